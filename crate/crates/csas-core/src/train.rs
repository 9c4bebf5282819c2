//! Losses, the training loop and the experiment harness.
//!
//! Supervised and unsupervised branches train from one forward pass per
//! image: the mask cross-entropy on the supervised branch updates the
//! encoder and that branch; the same cross-entropy on the final
//! (merged-and-parsed) map updates only the merge and parsing heads; the
//! confidence-weighted double cross-entropy against the local/global fusion
//! maps updates only the unsupervised branch. Gradient isolation comes from
//! the detach points inside [`crate::pipeline::Model::forward`].

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::color::{ColorMapConfig, CsasImage};
use crate::dataset::{AugmentConfig, SceneRecord};
use crate::error::{Error, Result};
use crate::fusion::{
    build_fusion_maps, confidence_weights, glad_global, glad_local, region_means,
    replace_lowest_reliability, superpixel_average, superpixelize, FusionMaps, GladConfig,
    GladFit, Superpixelization, WeakMapSet,
};
use crate::nn::{check_finite, reduce_grads, update_running_stats, Adam, Fwd, ParamStore};
use crate::pipeline::Model;
use crate::scene::GroundTruthMask;
use crate::seeding::rng_for;
use crate::tensor::Tensor;

pub const PRED_EPS: f64 = 1e-7;

/// Pixel-summed cross-entropy of a foreground map against per-pixel targets,
/// scaled by `1/n` (the mini-batch share of the loss). Predictions are
/// clamped to [eps, 1-eps] first.
pub fn supervised_ce(f: &mut Fwd, pred_fg: Var, target: &Tensor, inv_n: f64) -> Var {
    let shape = f.tape.value(pred_fg).shape().to_vec();
    let t = target
        .reshape(&shape)
        .expect("target matches prediction shape");
    let p = f.tape.clamp(pred_fg, PRED_EPS, 1.0 - PRED_EPS);
    let ce = f.tape.bce_with_target(p, &t);
    let total = f.tape.sum_all(ce);
    f.tape.mul_scalar(total, inv_n)
}

/// Confidence-weighted double cross-entropy against the local and global
/// fusion maps, scaled by `1/n`.
pub fn unsupervised_ce(
    f: &mut Fwd,
    pred_fg: Var,
    kappa: &Tensor,
    pi: &Tensor,
    weights: &Tensor,
    inv_n: f64,
) -> Var {
    let shape = f.tape.value(pred_fg).shape().to_vec();
    let p = f.tape.clamp(pred_fg, PRED_EPS, 1.0 - PRED_EPS);
    let ce_k = f
        .tape
        .bce_with_target(p, &kappa.reshape(&shape).expect("kappa shape"));
    let ce_p = f
        .tape
        .bce_with_target(p, &pi.reshape(&shape).expect("pi shape"));
    let both = f.tape.add(ce_k, ce_p);
    let w = weights.reshape(&shape).expect("weight shape");
    let weighted = f.tape.weighted_sum(both, &w);
    f.tape.mul_scalar(weighted, inv_n)
}

/// Ridge contribution of the trainable parameters selected by `filter`.
pub fn ridge_value(store: &ParamStore, lambda: f64, filter: impl Fn(&str) -> bool) -> f64 {
    lambda * store.squared_norm(filter)
}

/// Add the analytic ridge gradient `2 lambda theta` for selected parameters.
pub fn add_ridge_grads(
    grads: &mut BTreeMap<String, Tensor>,
    store: &ParamStore,
    lambda: f64,
    filter: impl Fn(&str) -> bool,
) {
    if lambda == 0.0 {
        return;
    }
    for (name, value, trainable) in store.iter() {
        if !trainable || !filter(name) {
            continue;
        }
        let ridge = value.scale(2.0 * lambda);
        match grads.get_mut(name) {
            Some(g) => g.add_assign(&ridge),
            None => {
                grads.insert(name.to_string(), ridge);
            }
        }
    }
}

fn group_sup(name: &str) -> bool {
    name.starts_with("enc/") || name.starts_with("sup/")
}

fn group_heads(name: &str) -> bool {
    name.starts_with("merge/") || name.starts_with("parse/")
}

fn group_unsup(name: &str) -> bool {
    name.starts_with("unsup/")
}

/// Per-image fusion supervision for the unsupervised loss.
#[derive(Clone, Debug)]
pub struct FusionSupervision {
    pub kappa: Tensor,
    pub pi: Tensor,
    pub weights: Tensor,
}

/// Fusion bookkeeping carried across training rounds.
pub struct FusionState {
    pub weak: WeakMapSet,
    pub local: Vec<GladFit>,
    pub global: GladFit,
    pub maps: FusionMaps,
    pub supervision: Vec<FusionSupervision>,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    /// Unsupervised epochs between fusion rounds.
    pub unsup_epochs_per_round: usize,
    pub fusion_rounds: usize,
    pub replace_count: usize,
    pub superpixel_target: usize,
    pub glad: GladConfig,
    pub colormap: ColorMapConfig,
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            lambda: 1e-4,
            early_stop_patience: 10,
            max_epochs: 60,
            unsup_epochs_per_round: 5,
            fusion_rounds: 3,
            replace_count: 1,
            superpixel_target: 48,
            glad: GladConfig::default(),
            colormap: ColorMapConfig::default(),
            augment: Some(AugmentConfig::default()),
            seed: 0,
        }
    }
}

/// One labeled training sample (image already colorized).
#[derive(Clone)]
pub struct TrainSample {
    pub image: CsasImage,
    pub mask: GroundTruthMask,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_val: f64,
    /// Epoch (0-based, within the stage) whose weights were retained.
    pub best_epoch: usize,
}

/// Index at which training stops under the rule "validation loss increased
/// for `patience` consecutive epochs", or None if it never triggers.
/// The returned index is the epoch that completes the run (0-based).
pub fn early_stop_epoch(val_losses: &[f64], patience: usize) -> Option<usize> {
    let mut consecutive = 0;
    for t in 1..val_losses.len() {
        if val_losses[t] > val_losses[t - 1] {
            consecutive += 1;
            if consecutive == patience {
                return Some(t);
            }
        } else {
            consecutive = 0;
        }
    }
    None
}

/// Deterministic 70/15/15 split of `n` indices.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(seed, "split");
    order.shuffle(&mut rng);
    let n_train = (0.70 * n as f64).round() as usize;
    let n_val = (0.15 * n as f64).round() as usize;
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    (train, val, test)
}

struct BatchResult {
    loss: f64,
    grads: Vec<(String, Tensor)>,
    bn_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
}

/// One optimizer step over a mini-batch. `supervision` carries the fusion
/// targets when the unsupervised loss is active.
#[allow(clippy::too_many_arguments)]
fn batch_step(
    model: &Model,
    store: &mut ParamStore,
    adam: &mut Adam,
    batch: &[(TrainSample, Option<FusionSupervision>)],
    cfg: &TrainConfig,
    with_unsup: bool,
) -> Result<f64> {
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let frozen: &ParamStore = store;
    let results: Result<Vec<BatchResult>> = batch
        .par_iter()
        .map(|(sample, supervision)| {
            let mut tape = Tape::new();
            let mut f = Fwd::new(&mut tape, frozen, true);
            let out = model.forward(&mut f, &sample.image)?;
            let mask_t = sample.mask.to_tensor();
            let l_sup = supervised_ce(&mut f, out.sup.foreground, &mask_t, inv_n);
            let l_heads = supervised_ce(&mut f, out.refined, &mask_t, inv_n);
            let mut loss = f.tape.add(l_sup, l_heads);
            if with_unsup {
                if let Some(sv) = supervision {
                    let l_unsup = unsupervised_ce(
                        &mut f,
                        out.unsup.foreground,
                        &sv.kappa,
                        &sv.pi,
                        &sv.weights,
                        inv_n,
                    );
                    loss = f.tape.add(loss, l_unsup);
                }
            }
            let value = f.tape.value(loss).item();
            check_finite(value, "training batch")?;
            f.tape.backward(loss);
            Ok(BatchResult {
                loss: value,
                grads: f.tape.param_grads(),
                bn_stats: std::mem::take(&mut f.bn_stats),
            })
        })
        .collect();
    let results = results?;

    let mut total_loss = 0.0;
    let mut all_stats = Vec::new();
    let mut grads = reduce_grads(
        results
            .into_iter()
            .map(|r| {
                total_loss += r.loss;
                all_stats.extend(r.bn_stats);
                r.grads
            })
            .collect(),
    );
    add_ridge_grads(&mut grads, store, cfg.lambda, group_sup);
    add_ridge_grads(&mut grads, store, cfg.lambda, group_heads);
    if with_unsup {
        add_ridge_grads(&mut grads, store, cfg.lambda, group_unsup);
    }
    total_loss += ridge_value(store, cfg.lambda, group_sup)
        + ridge_value(store, cfg.lambda, group_heads)
        + if with_unsup {
            ridge_value(store, cfg.lambda, group_unsup)
        } else {
            0.0
        };

    let allowed = |name: &str| group_sup(name) || group_heads(name) || (with_unsup && group_unsup(name));
    adam.step(store, &grads, allowed);
    update_running_stats(store, &all_stats);
    Ok(total_loss)
}

/// Mean supervised validation loss (branch + final), evaluated without
/// gradients or augmentation.
pub fn validation_loss(model: &Model, store: &ParamStore, samples: &[TrainSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("empty validation split".into()));
    }
    let losses: Result<Vec<f64>> = samples
        .par_iter()
        .map(|sample| {
            let mut tape = Tape::new();
            let mut f = Fwd::new(&mut tape, store, false);
            let out = model.forward(&mut f, &sample.image)?;
            let mask_t = sample.mask.to_tensor();
            let l1 = supervised_ce(&mut f, out.sup.foreground, &mask_t, 1.0);
            let l2 = supervised_ce(&mut f, out.refined, &mask_t, 1.0);
            let total = f.tape.add(l1, l2);
            Ok(f.tape.value(total).item())
        })
        .collect();
    let losses = losses?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Compute weak-detector maps for every image and superpixel-average them.
pub fn initial_weak_maps(
    images: &[CsasImage],
    superpixels: &[Superpixelization],
) -> WeakMapSet {
    let detectors = crate::fusion::weak::builtin_detectors();
    let maps: Vec<Vec<Tensor>> = images
        .par_iter()
        .zip(superpixels.par_iter())
        .map(|(img, sp)| {
            detectors
                .iter()
                .map(|d| superpixel_average(&d.detect(img), sp))
                .collect()
        })
        .collect();
    WeakMapSet { maps }
}

/// Run GLAD at both levels and assemble fusion maps plus per-image
/// confidence-weighted supervision.
pub fn fit_fusion(
    weak: WeakMapSet,
    superpixels: &[Superpixelization],
    glad_cfg: &GladConfig,
) -> Result<FusionState> {
    // superpixel-average (idempotent for maps already averaged)
    let weak = WeakMapSet {
        maps: weak
            .maps
            .par_iter()
            .zip(superpixels.par_iter())
            .map(|(per_det, sp)| {
                per_det
                    .iter()
                    .map(|m| superpixel_average(m, sp))
                    .collect()
            })
            .collect(),
    };
    let local: Result<Vec<GladFit>> = weak
        .maps
        .par_iter()
        .zip(superpixels.par_iter())
        .map(|(per_det, sp)| {
            let scores: Vec<Vec<f64>> =
                per_det.iter().map(|m| region_means(m, sp)).collect();
            glad_local(&scores, glad_cfg)
        })
        .collect();
    let local = local?;
    let global = glad_global(&weak, glad_cfg)?;
    let maps = build_fusion_maps(&weak, &local, &global)?;
    let supervision = (0..weak.maps.len())
        .map(|i| FusionSupervision {
            kappa: maps.kappa[i].clone(),
            pi: maps.pi[i].clone(),
            weights: confidence_weights(&local[i], &superpixels[i], &global, i),
        })
        .collect();
    Ok(FusionState {
        weak,
        local,
        global,
        maps,
        supervision,
    })
}

/// One outer fusion round: GLAD inference on the current weak maps, then
/// lowest-reliability replacement with the branch predictions.
pub fn fusion_round(
    model: &Model,
    store: &ParamStore,
    images: &[CsasImage],
    superpixels: &[Superpixelization],
    weak: WeakMapSet,
    replace_count: usize,
    glad_cfg: &GladConfig,
) -> Result<(WeakMapSet, FusionState)> {
    let state = fit_fusion(weak, superpixels, glad_cfg)?;
    let branch_maps: Result<Vec<Tensor>> = images
        .par_iter()
        .map(|img| Ok(model.infer(store, img)?.unsup))
        .collect();
    let next = replace_lowest_reliability(&state.weak, &state.global, &branch_maps?, replace_count)?;
    Ok((next, state))
}

/// Training stages of the pretrain-then-specialize protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    PretrainGeneric,
    FinetuneSonar,
}

/// Run one training stage with early stopping; the best-validation weights
/// are restored into the store before returning. Sonar stages interleave the
/// unsupervised fusion loss and refresh the fusion state every
/// `unsup_epochs_per_round` epochs.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    model: &Model,
    store: &mut ParamStore,
    adam: &mut Adam,
    stage: Stage,
    train_scenes: Option<&[SceneRecord]>,
    train: &[TrainSample],
    val: &[TrainSample],
    cfg: &TrainConfig,
    history: &mut Vec<EpochRecord>,
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("empty train or validation split".into()));
    }
    let stage_name = match stage {
        Stage::PretrainGeneric => "pretrain",
        Stage::FinetuneSonar => "finetune",
    };
    let with_unsup = stage == Stage::FinetuneSonar;

    // fusion setup for the sonar stage
    let images: Vec<CsasImage> = train.iter().map(|s| s.image.clone()).collect();
    let mut fusion: Option<(WeakMapSet, Vec<Superpixelization>, FusionState)> = if with_unsup {
        let superpixels: Result<Vec<Superpixelization>> = images
            .par_iter()
            .map(|img| superpixelize(img, cfg.superpixel_target))
            .collect();
        let superpixels = superpixels?;
        let weak = initial_weak_maps(&images, &superpixels);
        let state = fit_fusion(weak.clone(), &superpixels, &cfg.glad)?;
        Some((weak, superpixels, state))
    } else {
        None
    };

    let mut rng = rng_for(cfg.seed, &format!("train/{stage_name}"));
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_store: Option<ParamStore> = None;
    let mut val_trace = Vec::new();
    let mut rounds_done = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Result<Vec<(TrainSample, Option<FusionSupervision>)>> = chunk
                .iter()
                .map(|&i| {
                    let sample = match (&cfg.augment, train_scenes) {
                        (Some(aug), Some(scenes)) if with_unsup => {
                            let (stack, mask, _) = &scenes[i].views[0];
                            let mut arng = ChaCha20Rng::seed_from_u64(rng.gen());
                            let (image, mask) = crate::dataset::augment_sample(
                                stack,
                                mask,
                                &cfg.colormap,
                                aug,
                                &mut arng,
                            )?;
                            TrainSample { image, mask }
                        }
                        _ => train[i].clone(),
                    };
                    let supervision = fusion
                        .as_ref()
                        .map(|(_, _, state)| state.supervision[i].clone());
                    Ok((sample, supervision))
                })
                .collect();
            let batch = batch?;
            epoch_loss += batch_step(model, store, adam, &batch, cfg, with_unsup)?;
            batches += 1;
        }
        epoch_loss /= batches.max(1) as f64;
        let val_loss = validation_loss(model, store, val)?;
        history.push(EpochRecord {
            stage: stage_name.to_string(),
            epoch,
            train_loss: epoch_loss,
            val_loss,
        });
        val_trace.push(val_loss);
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_store = Some(store.clone());
        }

        // fusion refresh
        if with_unsup
            && (epoch + 1) % cfg.unsup_epochs_per_round == 0
            && rounds_done + 1 < cfg.fusion_rounds
        {
            let (weak, superpixels, _) = fusion.take().expect("fusion state present");
            let (next_weak, _prev_state) = fusion_round(
                model,
                store,
                &images,
                &superpixels,
                weak,
                cfg.replace_count,
                &cfg.glad,
            )?;
            let state = fit_fusion(next_weak.clone(), &superpixels, &cfg.glad)?;
            fusion = Some((next_weak, superpixels, state));
            rounds_done += 1;
        }

        if early_stop_epoch(&val_trace, cfg.early_stop_patience) == Some(epoch) {
            break;
        }
    }

    if let Some(best) = best_store {
        *store = best;
    }
    Ok(TrainOutcome {
        history: history.clone(),
        best_val,
        best_epoch,
    })
}

use rand::SeedableRng;

/// Monte Carlo splits: one seeded permutation per trial.
pub fn monte_carlo_splits(
    n: usize,
    trials: usize,
    seed: u64,
) -> Vec<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    (0..trials)
        .map(|t| split_indices(n, crate::seeding::derive_seed(seed, &format!("mc/{t}"))))
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct MonteCarloReport {
    pub trials: Vec<crate::evalpost::MetricsReport>,
    pub mean_iaae: f64,
    pub std_iaae: f64,
    pub mean_aiou: f64,
    pub std_aiou: f64,
}

/// Aggregate per-trial reports with mean and standard deviation.
pub fn aggregate_trials(trials: Vec<crate::evalpost::MetricsReport>) -> MonteCarloReport {
    let n = trials.len().max(1) as f64;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / n;
    let std = |xs: &[f64], m: f64| {
        if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
        }
    };
    let iaae: Vec<f64> = trials.iter().map(|t| t.iaae).collect();
    let aiou: Vec<f64> = trials.iter().map(|t| t.aiou).collect();
    let mean_iaae = mean(&iaae);
    let mean_aiou = mean(&aiou);
    MonteCarloReport {
        std_iaae: std(&iaae, mean_iaae),
        std_aiou: std(&aiou, mean_aiou),
        mean_iaae,
        mean_aiou,
        trials,
    }
}


// ---------------------------------------------------------------------------
// experiment harness
// ---------------------------------------------------------------------------

use crate::config::ExperimentConfig;
use crate::evalpost::{
    aggregate_reports, detection_metrics, extract_boxes, segmentation_metrics, truth_boxes,
    MetricsReport,
};
use crate::flow::{
    aggregate_uniform, flow_metrics, synthetic_pair, FlowField, FlowNet, FlowPair,
};
use crate::pipeline::{route_single_view, AblationToggles};

/// Colorize scene records into training samples with the experiment colormap.
pub fn samples_from_scenes(cfg: &ExperimentConfig, scenes: &[SceneRecord]) -> Vec<TrainSample> {
    let cmap = cfg.colormap();
    scenes
        .par_iter()
        .map(|s| {
            let (stack, mask, _) = &s.views[0];
            TrainSample {
                image: crate::color::colorize(stack, &cmap),
                mask: mask.clone(),
            }
        })
        .collect()
}

/// Pretrain on the bundled generic set, then specialize on the sonar scenes.
/// Returns the trained model/store and the epoch history.
pub fn train_full(
    cfg: &ExperimentConfig,
    train_scenes: &[SceneRecord],
    val_scenes: &[SceneRecord],
) -> Result<(Model, ParamStore, Vec<EpochRecord>)> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, "model-init");
    let mut store = ParamStore::new();
    let model = Model::init(&mut store, cfg.model.clone(), &mut rng)?;
    let mut adam = Adam::new(cfg.train.lr);
    let mut history = Vec::new();

    // stage 1: generic pretraining
    if cfg.train.pretrain_count > 0 {
        let (h, w) = (cfg.generate.height, cfg.generate.width);
        let generic = crate::dataset::generic_pretrain_set(
            cfg.train.pretrain_count,
            h,
            w,
            crate::seeding::derive_seed(cfg.seed, "generic-set"),
        );
        let samples: Vec<TrainSample> = generic
            .into_iter()
            .map(|(image, mask)| TrainSample { image, mask })
            .collect();
        let n_val = (samples.len() / 6).max(1);
        let (val, train) = samples.split_at(n_val);
        let mut pre_cfg = cfg.train_config();
        pre_cfg.max_epochs = cfg.train.pretrain_max_epochs;
        pre_cfg.augment = None;
        run_stage(
            &model,
            &mut store,
            &mut adam,
            Stage::PretrainGeneric,
            None,
            train,
            val,
            &pre_cfg,
            &mut history,
        )?;
    }

    // stage 2: sonar specialization with fusion supervision
    let train_samples = samples_from_scenes(cfg, train_scenes);
    let val_samples = samples_from_scenes(cfg, val_scenes);
    let t_cfg = cfg.train_config();
    run_stage(
        &model,
        &mut store,
        &mut adam,
        Stage::FinetuneSonar,
        Some(train_scenes),
        &train_samples,
        &val_samples,
        &t_cfg,
        &mut history,
    )?;
    Ok((model, store, history))
}

/// Per-scene final map under the toggles, using all views when multi-image
/// aggregation is on.
pub fn scene_final_map(
    cfg: &ExperimentConfig,
    model: &Model,
    store: &ParamStore,
    flow: Option<(&FlowNet, &ParamStore)>,
    scene: &SceneRecord,
    toggles: &AblationToggles,
) -> Result<Tensor> {
    let cmap = cfg.colormap();
    let ref_img = crate::color::colorize(&scene.views[0].0, &cmap);
    let base_of = |maps: &crate::pipeline::InferenceMaps| -> Tensor {
        match (toggles.use_supervised_branch, toggles.use_unsupervised_branch) {
            (true, true) => maps.merged.clone(),
            (true, false) => maps.sup.clone(),
            (false, true) => maps.unsup.clone(),
            (false, false) => unreachable!("validated toggles"),
        }
    };
    let n_views = if toggles.use_multi_image {
        toggles.num_views.min(scene.views.len())
    } else {
        1
    };
    if n_views <= 1 {
        let maps = model.infer(store, &ref_img)?;
        return Ok(route_single_view(model, store, &maps, &ref_img, toggles));
    }
    let (flow_net, flow_store) = flow.ok_or_else(|| {
        Error::Config("multi-image aggregation requires a trained flow model".into())
    })?;
    let mut maps = Vec::with_capacity(n_views);
    let mut flows = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let img = if v == 0 {
            ref_img.clone()
        } else {
            crate::color::colorize(&scene.views[v].0, &cmap)
        };
        let inference = model.infer(store, &img)?;
        maps.push(base_of(&inference));
        flows.push(if v == 0 {
            FlowField::zeros(ref_img.height(), ref_img.width())
        } else {
            flow_net.estimate(flow_store, &ref_img, &img)?
        });
    }
    let consensus = aggregate_uniform(&maps, &flows)?;
    Ok(if toggles.use_parsing {
        model.refine_external(store, &consensus, &ref_img)
    } else {
        consensus
    })
}

/// Evaluate a trained model on held-out scenes.
pub fn evaluate(
    cfg: &ExperimentConfig,
    model: &Model,
    store: &ParamStore,
    flow: Option<(&FlowNet, &ParamStore)>,
    scenes: &[SceneRecord],
    toggles: &AblationToggles,
) -> Result<MetricsReport> {
    toggles.validate()?;
    let per_image: Result<Vec<_>> = scenes
        .par_iter()
        .map(|scene| {
            let final_map = scene_final_map(cfg, model, store, flow, scene, toggles)?;
            let mask = &scene.views[0].1;
            let seg = segmentation_metrics(&final_map, mask);
            let boxes = extract_boxes(
                &final_map,
                cfg.eval.min_area_frac,
                cfg.eval.morph_radius,
            );
            let det = detection_metrics(&boxes, &truth_boxes(mask), cfg.eval.iou_threshold);
            Ok((seg, det))
        })
        .collect();
    Ok(aggregate_reports(&per_image?))
}

/// Deterministic synthetic flow training and holdout pairs.
pub fn flow_pair_set(cfg: &ExperimentConfig, count: usize, label: &str) -> Vec<FlowPair> {
    let size = cfg.flow.pair_size;
    let seed = crate::seeding::derive_seed(cfg.seed, &format!("flow-pairs/{label}"));
    let bases: Vec<crate::scene::SceneSpec> = (0..count)
        .map(|i| {
            let mut srng = rng_for(seed, &format!("base/{i}"));
            let mut spec = crate::scene::SceneSpec::new(
                crate::seeding::derive_seed(seed, &format!("spec/{i}")),
                size,
                size,
            )
            .with_apertures(cfg.generate.num_apertures.min(16).max(8));
            spec.seafloor_kind = match srng.gen_range(0..4u8) {
                0 => crate::scene::SeafloorKind::FlatSand,
                1 => crate::scene::SeafloorKind::RippledSand,
                2 => crate::scene::SeafloorKind::Rocky,
                _ => crate::scene::SeafloorKind::Pitted,
            };
            spec.targets = vec![crate::scene::random_target(size, size, &mut srng)];
            spec
        })
        .collect();
    let cmap = cfg.colormap();
    bases
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let (stack, _) = crate::scene::generate_scene(spec).expect("valid flow base scene");
            let base = crate::color::colorize(&stack, &cmap);
            let mut prng = rng_for(seed, &format!("pair/{i}"));
            synthetic_pair(&base, cfg.flow.max_displacement_px, &mut prng)
        })
        .collect()
}

/// Train the flow network on synthetic pairs; returns the net, its store and
/// the average endpoint error on a held-out pair set.
pub fn train_flow(cfg: &ExperimentConfig) -> Result<(FlowNet, ParamStore, f64, Vec<f64>)> {
    let mut rng = rng_for(cfg.seed, "flow-init");
    let mut store = ParamStore::new();
    let net = FlowNet::init(&mut store, "flow", cfg.flow.config.clone(), &mut rng)?;
    let train_pairs = flow_pair_set(cfg, cfg.flow.pairs, "train");
    let holdout = flow_pair_set(cfg, (cfg.flow.pairs / 10).clamp(20, 100), "holdout");
    let mut adam = Adam::new(cfg.train.lr);
    let mut shuffle_rng = rng_for(cfg.seed, "flow-shuffle");
    let mut epoch_losses = Vec::with_capacity(cfg.flow.epochs);
    for _epoch in 0..cfg.flow.epochs {
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.flow.batch_size) {
            let frozen: &ParamStore = &store;
            let results: Result<Vec<(f64, Vec<(String, Tensor)>)>> = chunk
                .par_iter()
                .map(|&i| {
                    let pair = &train_pairs[i];
                    let mut tape = Tape::new();
                    let mut f = Fwd::new(&mut tape, frozen, true);
                    let a = f.tape.constant(pair.img_a.to_vector_rep());
                    let b = f.tape.constant(pair.img_b.to_vector_rep());
                    let (levels, _) = net.forward(&mut f, a, b)?;
                    let loss = net.loss(&mut f, &levels, &pair.flow.flow);
                    let scaled = f.tape.mul_scalar(loss, 1.0 / chunk.len() as f64);
                    let value = f.tape.value(scaled).item();
                    check_finite(value, "flow batch")?;
                    f.tape.backward(scaled);
                    Ok((value, f.tape.param_grads()))
                })
                .collect();
            let results = results?;
            let mut loss_sum = 0.0;
            let grads = reduce_grads(
                results
                    .into_iter()
                    .map(|(l, g)| {
                        loss_sum += l;
                        g
                    })
                    .collect(),
            );
            adam.step(&mut store, &grads, |_| true);
            epoch_loss += loss_sum;
            batches += 1;
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }
    // holdout AEE at full resolution
    let aee: Result<Vec<f64>> = holdout
        .par_iter()
        .map(|pair| {
            let pred = net.estimate(&store, &pair.img_a, &pair.img_b)?;
            Ok(flow_metrics(&pred, &pair.flow, Some((&pair.img_a, &pair.img_b))).aee)
        })
        .collect();
    let aee = aee?;
    let mean_aee = aee.iter().sum::<f64>() / aee.len() as f64;
    Ok((net, store, mean_aee, epoch_losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoders::DecoderConfig;
    use crate::encoder::EncoderConfig;
    use crate::pipeline::ModelConfig;
    use rand::SeedableRng;

    #[test]
    fn early_stopping_rule_matches_spec_examples() {
        // eleven values, ten consecutive increases: stop at the 11th epoch
        let mut rising = vec![1.0];
        for i in 0..10 {
            rising.push(1.1 + 0.1 * i as f64);
        }
        assert_eq!(early_stop_epoch(&rising, 10), Some(10));
        // a dip resets the counter: only two consecutive rises remain
        let dip = vec![1.0, 1.1, 1.2, 0.9, 1.1, 1.2];
        assert_eq!(early_stop_epoch(&dip, 3), None);
        let dip_then_rise = vec![1.0, 1.1, 0.9, 1.0, 1.1, 1.2];
        assert_eq!(early_stop_epoch(&dip_then_rise, 3), Some(5));
    }

    #[test]
    fn split_is_exact_and_seed_reproducible() {
        let (tr, va, te) = split_indices(100, 5);
        assert_eq!((tr.len(), va.len(), te.len()), (70, 15, 15));
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let (tr2, _, _) = split_indices(100, 5);
        assert_eq!(tr, tr2);
        let (tr3, _, _) = split_indices(100, 6);
        assert_ne!(tr, tr3);
        // single trial report equals that trial's metrics
        let r = crate::evalpost::MetricsReport {
            iaae: 0.8,
            aiou: 0.5,
            ..Default::default()
        };
        let agg = aggregate_trials(vec![r.clone()]);
        assert_eq!(agg.mean_iaae, 0.8);
        assert_eq!(agg.mean_aiou, 0.5);
        assert_eq!(agg.std_aiou, 0.0);
    }

    #[test]
    fn monte_carlo_splits_differ_between_trials() {
        let splits = monte_carlo_splits(40, 3, 1);
        let set: std::collections::HashSet<Vec<usize>> =
            splits.iter().map(|(tr, _, _)| tr.clone()).collect();
        assert_eq!(set.len(), 3);
    }

    #[test]
    fn supervised_loss_closed_forms() {
        let store = ParamStore::new();
        // psi == 0.5 everywhere: data term = d ln 2 per image
        let d = 12usize;
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, false);
        let p = f.tape.constant(Tensor::full(&[1, 3, 4], 0.5));
        let mask = Tensor::from_vec(&[1, 3, 4], (0..12).map(|i| (i % 2) as f64).collect());
        let loss = supervised_ce(&mut f, p, &mask, 1.0);
        let want = d as f64 * (2.0f64).ln();
        assert!((f.tape.value(loss).item() - want).abs() < 1e-9);

        // perfect prediction: data term ~ 0 after clamping
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, false);
        let p = f.tape.constant(mask.clone());
        let loss = supervised_ce(&mut f, p, &mask, 1.0);
        let bound = d as f64 * (-(1.0 - PRED_EPS).ln());
        assert!(f.tape.value(loss).item() <= bound + 1e-12);
    }

    #[test]
    fn supervised_loss_matches_hand_formula_and_finite_differences() {
        // tiny fixture: psi = sigmoid(w * x + b) per pixel, 4 pixels
        let x = Tensor::from_vec(&[1, 2, 2], vec![0.3, -0.8, 1.2, 0.5]);
        let mask = Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 1.0, 1.0]);
        let lambda = 1e-3;
        let eval = |wv: f64, bv: f64| -> f64 {
            let mut tape = Tape::new();
            let store = ParamStore::new();
            let mut f = Fwd::new(&mut tape, &store, false);
            let xc = f.tape.constant(x.clone());
            let w = f.tape.leaf(Tensor::scalar(wv));
            let b = f.tape.leaf(Tensor::scalar(bv));
            let wx = f.tape.mul_scalar_var(xc, w);
            let ones = f.tape.constant(Tensor::full(&[1, 2, 2], 1.0));
            let bb = f.tape.mul_scalar_var(ones, b);
            let z = f.tape.add(wx, bb);
            let p = f.tape.sigmoid(z);
            let l = supervised_ce(&mut f, p, &mask, 1.0);
            f.tape.value(l).item() + lambda * (wv * wv + bv * bv)
        };
        // hand evaluation at (w, b) = (0.7, -0.1)
        let (wv, bv) = (0.7, -0.1);
        let mut want = 0.0;
        for i in 0..4 {
            let z = wv * x.data()[i] + bv;
            let p = 1.0 / (1.0 + (-z).exp());
            let t = mask.data()[i];
            want -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        want += lambda * (wv * wv + bv * bv);
        assert!((eval(wv, bv) - want).abs() < 1e-12);

        // analytic gradient via the tape + ridge vs central differences
        let analytic = {
            let mut tape = Tape::new();
            let store = ParamStore::new();
            let mut f = Fwd::new(&mut tape, &store, false);
            let xc = f.tape.constant(x.clone());
            let w = f.tape.leaf(Tensor::scalar(wv));
            let b = f.tape.leaf(Tensor::scalar(bv));
            let wx = f.tape.mul_scalar_var(xc, w);
            let ones = f.tape.constant(Tensor::full(&[1, 2, 2], 1.0));
            let bb = f.tape.mul_scalar_var(ones, b);
            let z = f.tape.add(wx, bb);
            let p = f.tape.sigmoid(z);
            let l = supervised_ce(&mut f, p, &mask, 1.0);
            f.tape.backward(l);
            (
                f.tape.grad(w).unwrap().item() + 2.0 * lambda * wv,
                f.tape.grad(b).unwrap().item() + 2.0 * lambda * bv,
            )
        };
        let h = 1e-6;
        let fd_w = (eval(wv + h, bv) - eval(wv - h, bv)) / (2.0 * h);
        let fd_b = (eval(wv, bv + h) - eval(wv, bv - h)) / (2.0 * h);
        assert!((analytic.0 - fd_w).abs() / fd_w.abs().max(1.0) < 1e-6);
        assert!((analytic.1 - fd_b).abs() / fd_b.abs().max(1.0) < 1e-6);
    }

    #[test]
    fn unsupervised_loss_closed_forms() {
        let store = ParamStore::new();
        // zero weights: only the ridge would remain (here: zero)
        let kappa = Tensor::from_vec(&[1, 1, 3], vec![0.2, 0.9, 0.5]);
        let pi = Tensor::from_vec(&[1, 1, 3], vec![0.4, 0.1, 0.6]);
        let zero_w = Tensor::zeros(&[1, 1, 3]);
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, false);
        let p = f.tape.constant(Tensor::full(&[1, 1, 3], 0.37));
        let l = unsupervised_ce(&mut f, p, &kappa, &pi, &zero_w, 1.0);
        assert_eq!(f.tape.value(l).item(), 0.0);

        // kappa = pi and psi = kappa: data term is the target entropy floor,
        // near zero for confident targets
        let t = Tensor::from_vec(&[1, 1, 2], vec![1.0 - 1e-9, 1e-9]);
        let w = Tensor::full(&[1, 1, 2], 1.0);
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, false);
        let p = f.tape.constant(t.clone());
        let l = unsupervised_ce(&mut f, p, &t, &t, &w, 1.0);
        assert!(f.tape.value(l).item() < 1e-6);

        // 2-image, 3-pixel fixture against symbolic evaluation
        let preds = [
            Tensor::from_vec(&[1, 1, 3], vec![0.3, 0.6, 0.8]),
            Tensor::from_vec(&[1, 1, 3], vec![0.45, 0.2, 0.7]),
        ];
        let kappas = [
            Tensor::from_vec(&[1, 1, 3], vec![0.9, 0.2, 0.6]),
            Tensor::from_vec(&[1, 1, 3], vec![0.1, 0.5, 0.8]),
        ];
        let pis = [
            Tensor::from_vec(&[1, 1, 3], vec![0.7, 0.3, 0.5]),
            Tensor::from_vec(&[1, 1, 3], vec![0.2, 0.6, 0.9]),
        ];
        let ws = [
            Tensor::from_vec(&[1, 1, 3], vec![1.0, 0.5, 0.25]),
            Tensor::from_vec(&[1, 1, 3], vec![0.8, 0.1, 0.9]),
        ];
        let n = 2.0;
        let mut got = 0.0;
        for i in 0..2 {
            let mut tape = Tape::new();
            let mut f = Fwd::new(&mut tape, &store, false);
            let p = f.tape.constant(preds[i].clone());
            let l = unsupervised_ce(&mut f, p, &kappas[i], &pis[i], &ws[i], 1.0 / n);
            got += f.tape.value(l).item();
        }
        let ce = |t: f64, p: f64| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        let mut want = 0.0;
        for i in 0..2 {
            for j in 0..3 {
                let p = preds[i].data()[j];
                want += ws[i].data()[j]
                    * (ce(kappas[i].data()[j], p) + ce(pis[i].data()[j], p))
                    / n;
            }
        }
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn lambda_zero_removes_ridge_exactly() {
        let mut store = ParamStore::new();
        store.insert("enc/w", Tensor::from_vec(&[2], vec![3.0, -4.0]));
        assert_eq!(ridge_value(&store, 0.0, |_| true), 0.0);
        assert_eq!(ridge_value(&store, 1e-4, |_| true), 1e-4 * 25.0);
        let mut grads = BTreeMap::new();
        add_ridge_grads(&mut grads, &store, 0.0, |_| true);
        assert!(grads.is_empty());
    }

    fn micro_model() -> (Model, ParamStore) {
        let mut rng = ChaCha20Rng::seed_from_u64(71);
        let mut store = ParamStore::new();
        let cfg = ModelConfig {
            encoder: EncoderConfig::tiny([3, 4, 5, 5, 5], 3),
            decoder: DecoderConfig::tiny([6, 6, 5, 5, 4, 4]),
            ..Default::default()
        };
        let model = Model::init(&mut store, cfg, &mut rng).unwrap();
        (model, store)
    }

    #[test]
    fn training_reduces_loss_on_a_toy_set() {
        let (model, mut store) = micro_model();
        let set = crate::dataset::generic_pretrain_set(10, 16, 16, 3);
        let samples: Vec<TrainSample> = set
            .into_iter()
            .map(|(image, mask)| TrainSample { image, mask })
            .collect();
        let cfg = TrainConfig {
            batch_size: 5,
            max_epochs: 20,
            early_stop_patience: 20,
            augment: None,
            ..Default::default()
        };
        let mut adam = Adam::new(cfg.lr);
        let mut history = Vec::new();
        let outcome = run_stage(
            &model,
            &mut store,
            &mut adam,
            Stage::PretrainGeneric,
            None,
            &samples[..8],
            &samples[8..],
            &cfg,
            &mut history,
        )
        .unwrap();
        let first = outcome.history.first().unwrap().train_loss;
        let last = outcome.history.last().unwrap().train_loss;
        assert!(
            last < first,
            "training loss should fall: {first} -> {last}"
        );
    }
}
