//! Unified experiment configuration and its flat text format.
//!
//! The on-disk format is one `key = value` pair per line (`#` comments),
//! round-trippable: parsing a file and re-serializing reproduces every key.
//! All randomness derives from the single `seed` via labeled streams.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::color::ColorMapConfig;
use crate::dataset::{AugmentConfig, GenerateConfig};
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::pipeline::{AblationToggles, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub generate: GenerateConfig,
    /// Hue compression factor in (0, 1]; 1 keeps the full wheel.
    pub colormap_compression: f64,
    pub power_mean_exponent: f64,
    pub model: ModelConfig,
    pub train: TrainParams,
    pub flow: FlowParams,
    pub toggles: AblationToggles,
    pub eval: EvalParams,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainParams {
    pub lr: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub pretrain_count: usize,
    pub pretrain_max_epochs: usize,
    pub unsup_epochs_per_round: usize,
    pub fusion_rounds: usize,
    pub replace_count: usize,
    pub superpixel_target: usize,
    pub augment: bool,
    pub speckle_sigma: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FlowParams {
    pub config: FlowConfig,
    pub pairs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_displacement_px: f64,
    pub pair_size: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalParams {
    pub iou_threshold: f64,
    pub min_area_frac: f64,
    pub morph_radius: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            generate: GenerateConfig::default(),
            colormap_compression: 1.0,
            power_mean_exponent: 1.0,
            model: ModelConfig::default(),
            train: TrainParams {
                lr: 1e-3,
                batch_size: 32,
                lambda: 1e-4,
                early_stop_patience: 10,
                max_epochs: 60,
                pretrain_count: 200,
                pretrain_max_epochs: 20,
                unsup_epochs_per_round: 5,
                fusion_rounds: 3,
                replace_count: 1,
                superpixel_target: 48,
                augment: true,
                speckle_sigma: 0.15,
            },
            flow: FlowParams {
                config: FlowConfig::default(),
                pairs: 2000,
                epochs: 30,
                batch_size: 8,
                max_displacement_px: 8.0,
                pair_size: 32,
            },
            toggles: AblationToggles::default(),
            eval: EvalParams {
                iou_threshold: 0.5,
                min_area_frac: 0.002,
                morph_radius: 1,
            },
        }
    }
}

impl ExperimentConfig {
    pub fn colormap(&self) -> ColorMapConfig {
        let mut cmap = if self.colormap_compression < 1.0 {
            ColorMapConfig::compressed(self.colormap_compression)
        } else {
            ColorMapConfig::default()
        };
        cmap.power_mean_exponent = self.power_mean_exponent;
        cmap
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            lambda: self.train.lambda,
            early_stop_patience: self.train.early_stop_patience,
            max_epochs: self.train.max_epochs,
            unsup_epochs_per_round: self.train.unsup_epochs_per_round,
            fusion_rounds: self.train.fusion_rounds,
            replace_count: self.train.replace_count,
            superpixel_target: self.train.superpixel_target,
            glad: Default::default(),
            colormap: self.colormap(),
            augment: if self.train.augment {
                Some(AugmentConfig {
                    speckle_sigma: self.train.speckle_sigma,
                    ..Default::default()
                })
            } else {
                None
            },
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.flow.config.validate()?;
        self.toggles.validate()?;
        if !(self.colormap_compression > 0.0 && self.colormap_compression <= 1.0) {
            return Err(Error::Config("colormap compression must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Serialize to the flat key = value text format (sorted keys).
    pub fn to_text(&self) -> String {
        let kv = self.to_pairs();
        let mut out = String::new();
        for (k, v) in kv {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }

    fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("generate.num_scenes", self.generate.num_scenes.to_string());
        put("generate.views_per_scene", self.generate.views_per_scene.to_string());
        put("generate.height", self.generate.height.to_string());
        put("generate.width", self.generate.width.to_string());
        put("generate.num_apertures", self.generate.num_apertures.to_string());
        put("generate.max_targets", self.generate.max_targets.to_string());
        put("generate.max_jitter", fmt_f64(self.generate.max_jitter));
        put("colormap.compression", fmt_f64(self.colormap_compression));
        put("colormap.power_mean_exponent", fmt_f64(self.power_mean_exponent));
        put("model.encoder_channels", join(&self.model.encoder.base_channels));
        put("model.encoder_side_hidden", self.model.encoder.side_hidden.to_string());
        put("model.decoder_channels", join(&self.model.decoder.channels));
        put(
            "model.decoder_extra_layers_unsup",
            self.model.decoder.extra_layers_unsup.to_string(),
        );
        put("model.parsing_window", self.model.parsing.window.to_string());
        put("model.parsing_sigma_f", fmt_f64(self.model.parsing.sigma_f));
        put("model.parsing_sigma_s", fmt_f64(self.model.parsing.sigma_s));
        put("model.parsing_mu_init", fmt_f64(self.model.parsing.mu_init));
        put("train.lr", fmt_f64(self.train.lr));
        put("train.batch_size", self.train.batch_size.to_string());
        put("train.lambda", fmt_f64(self.train.lambda));
        put("train.early_stop_patience", self.train.early_stop_patience.to_string());
        put("train.max_epochs", self.train.max_epochs.to_string());
        put("train.pretrain_count", self.train.pretrain_count.to_string());
        put("train.pretrain_max_epochs", self.train.pretrain_max_epochs.to_string());
        put(
            "train.unsup_epochs_per_round",
            self.train.unsup_epochs_per_round.to_string(),
        );
        put("train.fusion_rounds", self.train.fusion_rounds.to_string());
        put("train.replace_count", self.train.replace_count.to_string());
        put("train.superpixel_target", self.train.superpixel_target.to_string());
        put("train.augment", self.train.augment.to_string());
        put("train.speckle_sigma", fmt_f64(self.train.speckle_sigma));
        put("flow.feature_channels", join(&self.flow.config.feature_channels));
        put("flow.max_displacement", join(&self.flow.config.max_displacement));
        put(
            "flow.extra_interlevel_convs",
            self.flow.config.extra_interlevel_convs.to_string(),
        );
        put("flow.decoder_hidden", self.flow.config.decoder_hidden.to_string());
        put("flow.pairs", self.flow.pairs.to_string());
        put("flow.epochs", self.flow.epochs.to_string());
        put("flow.batch_size", self.flow.batch_size.to_string());
        put("flow.max_displacement_px", fmt_f64(self.flow.max_displacement_px));
        put("flow.pair_size", self.flow.pair_size.to_string());
        put(
            "ablate.use_supervised_branch",
            self.toggles.use_supervised_branch.to_string(),
        );
        put(
            "ablate.use_unsupervised_branch",
            self.toggles.use_unsupervised_branch.to_string(),
        );
        put("ablate.use_parsing", self.toggles.use_parsing.to_string());
        put("ablate.use_multi_image", self.toggles.use_multi_image.to_string());
        put("ablate.num_views", self.toggles.num_views.to_string());
        put("eval.iou_threshold", fmt_f64(self.eval.iou_threshold));
        put("eval.min_area_frac", fmt_f64(self.eval.min_area_frac));
        put("eval.morph_radius", self.eval.morph_radius.to_string());
        kv
    }

    /// Parse the flat text format; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(value, key)?,
            "generate.num_scenes" => self.generate.num_scenes = parse(value, key)?,
            "generate.views_per_scene" => self.generate.views_per_scene = parse(value, key)?,
            "generate.height" => self.generate.height = parse(value, key)?,
            "generate.width" => self.generate.width = parse(value, key)?,
            "generate.num_apertures" => self.generate.num_apertures = parse(value, key)?,
            "generate.max_targets" => self.generate.max_targets = parse(value, key)?,
            "generate.max_jitter" => self.generate.max_jitter = parse(value, key)?,
            "colormap.compression" => self.colormap_compression = parse(value, key)?,
            "colormap.power_mean_exponent" => self.power_mean_exponent = parse(value, key)?,
            "model.encoder_channels" => {
                self.model.encoder.base_channels = parse_array5(value, key)?
            }
            "model.encoder_side_hidden" => self.model.encoder.side_hidden = parse(value, key)?,
            "model.decoder_channels" => self.model.decoder.channels = parse_array6(value, key)?,
            "model.decoder_extra_layers_unsup" => {
                self.model.decoder.extra_layers_unsup = parse(value, key)?
            }
            "model.parsing_window" => self.model.parsing.window = parse(value, key)?,
            "model.parsing_sigma_f" => self.model.parsing.sigma_f = parse(value, key)?,
            "model.parsing_sigma_s" => self.model.parsing.sigma_s = parse(value, key)?,
            "model.parsing_mu_init" => self.model.parsing.mu_init = parse(value, key)?,
            "train.lr" => self.train.lr = parse(value, key)?,
            "train.batch_size" => self.train.batch_size = parse(value, key)?,
            "train.lambda" => self.train.lambda = parse(value, key)?,
            "train.early_stop_patience" => self.train.early_stop_patience = parse(value, key)?,
            "train.max_epochs" => self.train.max_epochs = parse(value, key)?,
            "train.pretrain_count" => self.train.pretrain_count = parse(value, key)?,
            "train.pretrain_max_epochs" => self.train.pretrain_max_epochs = parse(value, key)?,
            "train.unsup_epochs_per_round" => {
                self.train.unsup_epochs_per_round = parse(value, key)?
            }
            "train.fusion_rounds" => self.train.fusion_rounds = parse(value, key)?,
            "train.replace_count" => self.train.replace_count = parse(value, key)?,
            "train.superpixel_target" => self.train.superpixel_target = parse(value, key)?,
            "train.augment" => self.train.augment = parse(value, key)?,
            "train.speckle_sigma" => self.train.speckle_sigma = parse(value, key)?,
            "flow.feature_channels" => {
                self.flow.config.feature_channels = parse_list(value, key)?
            }
            "flow.max_displacement" => self.flow.config.max_displacement = parse_list(value, key)?,
            "flow.extra_interlevel_convs" => {
                self.flow.config.extra_interlevel_convs = parse(value, key)?
            }
            "flow.decoder_hidden" => self.flow.config.decoder_hidden = parse(value, key)?,
            "flow.pairs" => self.flow.pairs = parse(value, key)?,
            "flow.epochs" => self.flow.epochs = parse(value, key)?,
            "flow.batch_size" => self.flow.batch_size = parse(value, key)?,
            "flow.max_displacement_px" => self.flow.max_displacement_px = parse(value, key)?,
            "flow.pair_size" => self.flow.pair_size = parse(value, key)?,
            "ablate.use_supervised_branch" => {
                self.toggles.use_supervised_branch = parse(value, key)?
            }
            "ablate.use_unsupervised_branch" => {
                self.toggles.use_unsupervised_branch = parse(value, key)?
            }
            "ablate.use_parsing" => self.toggles.use_parsing = parse(value, key)?,
            "ablate.use_multi_image" => self.toggles.use_multi_image = parse(value, key)?,
            "ablate.num_views" => self.toggles.num_views = parse(value, key)?,
            "eval.iou_threshold" => self.eval.iou_threshold = parse(value, key)?,
            "eval.min_area_frac" => self.eval.min_area_frac = parse(value, key)?,
            "eval.morph_radius" => self.eval.morph_radius = parse(value, key)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }
}

fn fmt_f64(v: f64) -> String {
    // shortest representation that round-trips
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

fn parse<T: std::str::FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse '{value}' for {key}")))
}

fn parse_list(value: &str, key: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|p| parse(p.trim(), key))
        .collect()
}

fn parse_array5(value: &str, key: &str) -> Result<[usize; 5]> {
    let v = parse_list(value, key)?;
    v.try_into()
        .map_err(|_| Error::Config(format!("{key} needs exactly 5 entries")))
}

fn parse_array6(value: &str, key: &str) -> Result<[usize; 6]> {
    let v = parse_list(value, key)?;
    v.try_into()
        .map_err(|_| Error::Config(format!("{key} needs exactly 6 entries")))
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}
