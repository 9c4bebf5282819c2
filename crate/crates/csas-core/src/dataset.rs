//! Dataset layout and persistence.
//!
//! A generated dataset is one directory per scene:
//!
//! ```text
//! scene_0007/
//!   spec.json          scene specification (seed included)
//!   view_0/stack.tns   sub-aperture stack (f32 container)
//!   view_0/mask.png    0/255 ground truth
//!   view_0/view.json   view geometry (center jitter, aperture occlusion)
//!   view_1/...
//! ```
//!
//! Views of one scene share the scene's targets; each view jitters the
//! center point and attenuates an aperture arc, changing aspect coverage the
//! way repeated passes over the same area do.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::color::{colorize, ColorMapConfig, CsasImage};
use crate::container::{read_container, write_container, DType};
use crate::error::{Error, Result};
use crate::scene::augment::{apply_transform, GeometricTransform};
use crate::scene::{generate_scene, random_target, GroundTruthMask, SceneSpec, SubApertureStack};
use crate::seeding::rng_for;
use crate::tensor::Tensor;

/// Geometry of one view relative to the base scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    /// Center jitter in pixels (rows, cols).
    pub jitter: (f64, f64),
    /// Center angle (deg) of the attenuated aperture arc.
    pub occlusion_center_deg: f64,
    /// Width (deg) of the attenuated arc; 0 disables it.
    pub occlusion_width_deg: f64,
    /// Gain applied inside the arc.
    pub occlusion_gain: f64,
}

impl ViewSpec {
    pub fn identity() -> Self {
        ViewSpec {
            jitter: (0.0, 0.0),
            occlusion_center_deg: 0.0,
            occlusion_width_deg: 0.0,
            occlusion_gain: 1.0,
        }
    }

    pub fn transform(&self) -> GeometricTransform {
        GeometricTransform::translation(self.jitter.0, self.jitter.1)
    }
}

/// Apply a view's geometry to a base stack and mask: translate both by the
/// jitter and attenuate the occluded aperture arc.
pub fn render_view(
    stack: &SubApertureStack,
    mask: &GroundTruthMask,
    view: &ViewSpec,
) -> (SubApertureStack, GroundTruthMask) {
    let (k, h, w) = (stack.num_apertures(), stack.height(), stack.width());
    let mut out = stack.reflectivity.clone();
    // aperture occlusion
    if view.occlusion_width_deg > 0.0 {
        for ki in 0..k {
            let dist = crate::scene::angle_dist_deg(
                stack.center_angles[ki],
                view.occlusion_center_deg,
            );
            if dist <= view.occlusion_width_deg / 2.0 {
                for v in out.plane_mut(ki) {
                    *v *= view.occlusion_gain;
                }
            }
        }
    }
    // integer translation of every plane and of the mask
    let (dy, dx) = (view.jitter.0.round() as isize, view.jitter.1.round() as isize);
    let mut shifted = Tensor::zeros(&[k, h, w]);
    for ki in 0..k {
        let src = out.plane(ki);
        let dst = shifted.plane_mut(ki);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (sy, sx) = (y - dy, x - dx);
                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                    dst[y as usize * w + x as usize] = src[sy as usize * w + sx as usize];
                }
            }
        }
    }
    let mut shifted_mask = GroundTruthMask::zeros(h, w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (sy, sx) = (y - dy, x - dx);
            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                shifted_mask.data[y as usize * w + x as usize] =
                    mask.data[sy as usize * w + sx as usize];
            }
        }
    }
    (
        SubApertureStack {
            reflectivity: shifted,
            center_angles: stack.center_angles.clone(),
        },
        shifted_mask,
    )
}

pub fn save_stack(path: &Path, stack: &SubApertureStack) -> Result<()> {
    let meta = serde_json::json!({"kind": "stack"});
    let angles = Tensor::from_vec(&[stack.center_angles.len()], stack.center_angles.clone());
    write_container(
        path,
        &meta,
        &[
            ("reflectivity", &stack.reflectivity, DType::F32),
            ("center_angles", &angles, DType::F32),
        ],
    )
}

pub fn load_stack(path: &Path) -> Result<SubApertureStack> {
    let c = read_container(path)?;
    if c.meta.get("kind").and_then(|v| v.as_str()) != Some("stack") {
        return Err(Error::Dataset(format!("{} is not a stack", path.display())));
    }
    Ok(SubApertureStack {
        reflectivity: c.tensor("reflectivity")?.clone(),
        center_angles: c.tensor("center_angles")?.data().to_vec(),
    })
}

pub fn save_flow(path: &Path, flow: &crate::flow::FlowField) -> Result<()> {
    let meta = serde_json::json!({"kind": "flow"});
    write_container(path, &meta, &[("flow", &flow.flow, DType::F32)])
}

pub fn load_flow(path: &Path) -> Result<crate::flow::FlowField> {
    let c = read_container(path)?;
    if c.meta.get("kind").and_then(|v| v.as_str()) != Some("flow") {
        return Err(Error::Dataset(format!("{} is not a flow field", path.display())));
    }
    Ok(crate::flow::FlowField {
        flow: c.tensor("flow")?.clone(),
    })
}

pub fn save_mask_png(path: &Path, mask: &GroundTruthMask) -> Result<()> {
    let data: Vec<u8> = mask.data.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, data)
        .ok_or_else(|| Error::Dataset("mask buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn load_mask_png(path: &Path) -> Result<GroundTruthMask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(GroundTruthMask {
        height: h as usize,
        width: w as usize,
        data: img.into_raw().iter().map(|&v| u8::from(v >= 128)).collect(),
    })
}

/// Save a color-by-aspect rendering for inspection.
pub fn save_image_png(path: &Path, image: &CsasImage) -> Result<()> {
    let rgb = image.to_rgb8();
    let img =
        image::RgbImage::from_raw(image.width() as u32, image.height() as u32, rgb)
            .ok_or_else(|| Error::Dataset("image buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

/// Save a [0,1] map as an 8-bit grayscale PNG.
pub fn save_map_png(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let data: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| Error::Dataset("map buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

/// Controls for synthetic dataset generation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub num_scenes: usize,
    pub views_per_scene: usize,
    pub height: usize,
    pub width: usize,
    pub num_apertures: usize,
    pub max_targets: usize,
    pub seed: u64,
    /// Maximum view center jitter in pixels.
    pub max_jitter: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            num_scenes: 20,
            views_per_scene: 1,
            height: 64,
            width: 64,
            num_apertures: 100,
            max_targets: 2,
            seed: 7,
            max_jitter: 5.0,
        }
    }
}

/// One scene held in memory: base stack/mask plus per-view renderings.
#[derive(Clone, Debug)]
pub struct SceneRecord {
    pub spec: SceneSpec,
    pub views: Vec<(SubApertureStack, GroundTruthMask, ViewSpec)>,
}

/// Deterministically synthesize a scene set (views included).
pub fn generate_dataset(cfg: &GenerateConfig) -> Result<Vec<SceneRecord>> {
    use rayon::prelude::*;
    let specs: Vec<SceneSpec> = (0..cfg.num_scenes)
        .map(|i| {
            let scene_seed = crate::seeding::derive_seed(cfg.seed, &format!("scene/{i}"));
            let mut rng = rng_for(scene_seed, "targets");
            let kinds = [
                crate::scene::SeafloorKind::FlatSand,
                crate::scene::SeafloorKind::RippledSand,
                crate::scene::SeafloorKind::Rocky,
                crate::scene::SeafloorKind::Pitted,
            ];
            let mut spec =
                SceneSpec::new(scene_seed, cfg.height, cfg.width).with_apertures(cfg.num_apertures);
            spec.seafloor_kind = kinds[rng.gen_range(0..kinds.len())];
            let n_targets = rng.gen_range(1..=cfg.max_targets.max(1));
            spec.targets = (0..n_targets)
                .map(|_| random_target(cfg.height, cfg.width, &mut rng))
                .collect();
            spec
        })
        .collect();

    specs
        .into_par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let (stack, mask) = generate_scene(&spec)?;
            let mut vrng = rng_for(spec.seed, "views");
            let mut views = Vec::with_capacity(cfg.views_per_scene);
            for v in 0..cfg.views_per_scene {
                let view = if v == 0 {
                    ViewSpec::identity()
                } else {
                    ViewSpec {
                        jitter: (
                            vrng.gen_range(-cfg.max_jitter..=cfg.max_jitter).round(),
                            vrng.gen_range(-cfg.max_jitter..=cfg.max_jitter).round(),
                        ),
                        occlusion_center_deg: vrng.gen_range(0.0..360.0),
                        occlusion_width_deg: vrng.gen_range(40.0..120.0),
                        occlusion_gain: vrng.gen_range(0.2..0.7),
                    }
                };
                let (vs, vm) = render_view(&stack, &mask, &view);
                views.push((vs, vm, view));
            }
            let _ = i;
            Ok(SceneRecord { spec, views })
        })
        .collect()
}

/// Write a dataset tree. Refuses to clobber a non-empty directory unless
/// `force` is set.
pub fn write_dataset(root: &Path, scenes: &[SceneRecord], force: bool) -> Result<()> {
    if root.exists() {
        let non_empty = fs::read_dir(root)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Dataset(format!(
                "output directory {} is not empty (use --force)",
                root.display()
            )));
        }
    }
    fs::create_dir_all(root)?;
    for (i, scene) in scenes.iter().enumerate() {
        let dir = root.join(format!("scene_{i:04}"));
        fs::create_dir_all(&dir)?;
        fs::write(
            dir.join("spec.json"),
            serde_json::to_string_pretty(&scene.spec)?,
        )?;
        for (v, (stack, mask, view)) in scene.views.iter().enumerate() {
            let vdir = dir.join(format!("view_{v}"));
            fs::create_dir_all(&vdir)?;
            save_stack(&vdir.join("stack.tns"), stack)?;
            save_mask_png(&vdir.join("mask.png"), mask)?;
            fs::write(vdir.join("view.json"), serde_json::to_string_pretty(view)?)?;
        }
    }
    Ok(())
}

/// Read a dataset tree written by [`write_dataset`].
pub fn read_dataset(root: &Path) -> Result<Vec<SceneRecord>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("scene_"))
                    .unwrap_or(false)
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Dataset(format!(
            "{} contains no scene directories",
            root.display()
        )));
    }
    let mut scenes = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let spec: SceneSpec = serde_json::from_str(&fs::read_to_string(dir.join("spec.json"))?)?;
        let mut views = Vec::new();
        let mut v = 0usize;
        loop {
            let vdir = dir.join(format!("view_{v}"));
            if !vdir.is_dir() {
                break;
            }
            let stack = load_stack(&vdir.join("stack.tns"))?;
            let mask = load_mask_png(&vdir.join("mask.png"))?;
            let view: ViewSpec =
                serde_json::from_str(&fs::read_to_string(vdir.join("view.json"))?)?;
            views.push((stack, mask, view));
            v += 1;
        }
        if views.is_empty() {
            return Err(Error::Dataset(format!(
                "{} has no views",
                dir.display()
            )));
        }
        scenes.push(SceneRecord { spec, views });
    }
    Ok(scenes)
}

/// Colorize the first view of every scene.
pub fn colorize_dataset(
    scenes: &[SceneRecord],
    cmap: &ColorMapConfig,
) -> Vec<(CsasImage, GroundTruthMask)> {
    use rayon::prelude::*;
    scenes
        .par_iter()
        .map(|s| {
            let (stack, mask, _) = &s.views[0];
            (colorize(stack, cmap), mask.clone())
        })
        .collect()
}

/// Synthetic "natural-like" pretraining pairs: colorful blob objects over a
/// smoothly textured background, rendered straight into HSV images. Stands in
/// for a generic saliency corpus at desk scale.
pub fn generic_pretrain_set(
    count: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Vec<(CsasImage, GroundTruthMask)> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, &format!("generic/{i}"));
            let mut pixels = Tensor::zeros(&[3, h, w]);
            // background: smooth value texture around a base hue
            let base_hue: f64 = rng.gen_range(0.0..1.0);
            let base_val: f64 = rng.gen_range(0.25..0.6);
            let (fy, fx) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0));
            let (py, px) = (
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            );
            for y in 0..h {
                for x in 0..w {
                    let tex = 0.08
                        * ((y as f64 / h as f64 * std::f64::consts::TAU * fy + py).sin()
                            + (x as f64 / w as f64 * std::f64::consts::TAU * fx + px).sin());
                    pixels.set3(0, y, x, base_hue);
                    pixels.set3(1, y, x, rng.gen_range(0.05..0.25));
                    pixels.set3(2, y, x, (base_val + tex).clamp(0.0, 1.0));
                }
            }
            // one or two salient blobs with contrasting hue and value
            let mut mask = GroundTruthMask::zeros(h, w);
            let blobs = rng.gen_range(1..=2usize);
            for _ in 0..blobs {
                let cy = rng.gen_range(0.25 * h as f64..0.75 * h as f64);
                let cx = rng.gen_range(0.25 * w as f64..0.75 * w as f64);
                let ry = rng.gen_range(0.08 * h as f64..0.2 * h as f64);
                let rx = rng.gen_range(0.08 * w as f64..0.2 * w as f64);
                let hue = (base_hue + rng.gen_range(0.3..0.7)).rem_euclid(1.0);
                let val = (base_val + rng.gen_range(0.25..0.4)).min(1.0);
                let rot: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let (c, s) = (rot.cos(), rot.sin());
                for y in 0..h {
                    for x in 0..w {
                        let dy = y as f64 - cy;
                        let dx = x as f64 - cx;
                        let ly = (-s * dx + c * dy) / ry;
                        let lx = (c * dx + s * dy) / rx;
                        if lx * lx + ly * ly <= 1.0 {
                            pixels.set3(0, y, x, hue);
                            pixels.set3(1, y, x, rng.gen_range(0.6..0.9));
                            pixels.set3(2, y, x, val);
                            mask.data[y * w + x] = 1;
                        }
                    }
                }
            }
            (CsasImage::new(pixels), mask)
        })
        .collect()
}

/// Apply geometric (and optional stack-space) augmentation to one scene
/// sample, recolorizing when the stack is touched.
#[derive(Clone, Debug)]
pub struct AugmentConfig {
    pub policy: crate::scene::augment::AugmentPolicy,
    pub speckle_sigma: f64,
    pub speckle_prob: f64,
    pub haze_prob: f64,
    pub haze_attenuation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            policy: crate::scene::augment::AugmentPolicy {
                max_translation: 3.0,
                max_rotation_deg: 0.0,
                scale_range: (1.0, 1.0),
            },
            speckle_sigma: 0.15,
            speckle_prob: 0.5,
            haze_prob: 0.25,
            haze_attenuation: 0.6,
        }
    }
}

pub fn augment_sample(
    stack: &SubApertureStack,
    mask: &GroundTruthMask,
    cmap: &ColorMapConfig,
    cfg: &AugmentConfig,
    rng: &mut ChaCha20Rng,
) -> Result<(CsasImage, GroundTruthMask)> {
    let mut working = stack.clone();
    if cfg.speckle_sigma > 0.0 && rng.gen_bool(cfg.speckle_prob) {
        working = crate::scene::add_speckle(&working, cfg.speckle_sigma, rng.gen());
    }
    if cfg.haze_prob > 0.0 && rng.gen_bool(cfg.haze_prob) {
        let (h, w) = (working.height(), working.width());
        let ph = rng.gen_range(h / 4..=h / 2);
        let pw = rng.gen_range(w / 4..=w / 2);
        let y0 = rng.gen_range(0..=h - ph);
        let x0 = rng.gen_range(0..=w - pw);
        working = crate::scene::add_haze(
            &working,
            crate::scene::PatchRect {
                y0,
                x0,
                y1: y0 + ph,
                x1: x0 + pw,
            },
            cfg.haze_attenuation,
            true,
        )?;
    }
    let image = colorize(&working, cmap);
    let t = cfg.policy.sample(rng);
    apply_transform(&image, mask, &t)
}
