//! Synthetic multi-aspect sonar scenes with ground-truth masks.
//!
//! A scene is a stack of per-aspect reflectivity maps. The seafloor supplies
//! a mostly isotropic baseline (boosted inside the circular full-aspect
//! region), and each target facet adds reflectivity only for the apertures
//! whose center angle falls inside the facet's aspect band. That keeps the
//! generator honest about the one property everything downstream leans on:
//! targets are anisotropic, the seafloor mostly is not.

pub mod augment;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeafloorKind {
    FlatSand,
    RippledSand,
    Rocky,
    Pitted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TargetShape {
    Disc { radius: f64 },
    Rectangle { half_w: f64, half_h: f64 },
    Capsule { half_len: f64, radius: f64 },
    Polyline { points: Vec<(f64, f64)>, thickness: f64 },
}

/// One scattering facet: gain within an angular band of ensonification
/// directions, zero outside it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Facet {
    pub gain: f64,
    pub band_center_deg: f64,
    pub band_width_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub shape: TargetShape,
    /// (row, col) in pixels.
    pub center: (f64, f64),
    pub rotation_deg: f64,
    pub scale: f64,
    pub facets: Vec<Facet>,
    pub burial_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub seafloor_kind: SeafloorKind,
    pub targets: Vec<TargetSpec>,
    pub full_aspect_radius: f64,
    /// (row, col) center of the circular full-aspect region.
    pub center: (f64, f64),
    pub num_apertures: usize,
    pub aperture_spacing_deg: f64,
    /// Seafloor gain inside the full-aspect region relative to outside.
    pub full_aspect_gain: f64,
}

impl SceneSpec {
    pub fn new(seed: u64, height: usize, width: usize) -> Self {
        SceneSpec {
            seed,
            height,
            width,
            seafloor_kind: SeafloorKind::FlatSand,
            targets: Vec::new(),
            full_aspect_radius: 0.4 * height.min(width) as f64,
            center: ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0),
            num_apertures: 100,
            aperture_spacing_deg: 3.6,
            full_aspect_gain: 1.5,
        }
    }

    pub fn with_apertures(mut self, k: usize) -> Self {
        self.num_apertures = k;
        self.aperture_spacing_deg = 360.0 / k as f64;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let circle = self.num_apertures as f64 * self.aperture_spacing_deg;
        if (circle - 360.0).abs() > 1e-9 {
            return Err(Error::Scene(format!(
                "num_apertures x aperture_spacing must be 360, got {circle}"
            )));
        }
        if self.full_aspect_radius >= 0.5 * self.height.min(self.width) as f64 {
            return Err(Error::Scene(
                "full_aspect_radius must be smaller than half the shortest side".into(),
            ));
        }
        for (i, t) in self.targets.iter().enumerate() {
            if !(0.0..=1.0).contains(&t.burial_fraction) {
                return Err(Error::Scene(format!("target {i}: burial_fraction outside [0,1]")));
            }
            if t.scale <= 0.0 {
                return Err(Error::Scene(format!("target {i}: scale must be positive")));
            }
            for f in &t.facets {
                if f.gain < 0.0 {
                    return Err(Error::Scene(format!("target {i}: negative facet gain")));
                }
                if !(f.band_width_deg > 0.0 && f.band_width_deg <= 360.0) {
                    return Err(Error::Scene(format!(
                        "target {i}: facet band width must lie in (0, 360]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-aspect reflectivity volume (linear power, non-negative).
#[derive(Clone, Debug, PartialEq)]
pub struct SubApertureStack {
    /// [K, H, W]
    pub reflectivity: Tensor,
    /// Aperture center angles in degrees, strictly increasing from 0.
    pub center_angles: Vec<f64>,
}

impl SubApertureStack {
    pub fn num_apertures(&self) -> usize {
        self.reflectivity.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.reflectivity.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.reflectivity.shape()[2]
    }

    /// Circularly shift the aperture axis: slot `k` of the result holds the
    /// content of slot `(k + m) mod K`.
    pub fn roll(&self, m: usize) -> SubApertureStack {
        let k = self.num_apertures();
        let hw = self.height() * self.width();
        let mut data = Vec::with_capacity(k * hw);
        for slot in 0..k {
            let src = (slot + m) % k;
            data.extend_from_slice(self.reflectivity.plane(src));
        }
        SubApertureStack {
            reflectivity: Tensor::from_vec(self.reflectivity.shape(), data),
            center_angles: self.center_angles.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthMask {
    pub height: usize,
    pub width: usize,
    /// Row-major 0/1 labels.
    pub data: Vec<u8>,
}

impl GroundTruthMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        GroundTruthMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn positive_fraction(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Angular distance between two angles in degrees, in [0, 180].
pub fn angle_dist_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

fn in_band(angle: f64, facet: &Facet) -> bool {
    angle_dist_deg(angle, facet.band_center_deg) <= facet.band_width_deg / 2.0
}

/// Smooth positive noise field with mean ~0 and unit-ish amplitude: white
/// noise run through a few box-blur passes and rescaled.
fn smooth_noise(h: usize, w: usize, rng: &mut ChaCha20Rng, passes: usize) -> Vec<f64> {
    let mut field: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut tmp = vec![0.0; h * w];
    for _ in 0..passes {
        // 5x5 box blur, edge-clamped
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += field[yy * w + xx];
                    }
                }
                tmp[y * w + x] = acc / 25.0;
            }
        }
        std::mem::swap(&mut field, &mut tmp);
    }
    let std = (field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64)
        .sqrt()
        .max(1e-9);
    for v in &mut field {
        *v /= std;
    }
    field
}

/// Isotropic seafloor baseline per pixel, before the full-aspect boost.
fn seafloor_field(spec: &SceneSpec, rng: &mut ChaCha20Rng) -> (Vec<f64>, f64) {
    let (h, w) = (spec.height, spec.width);
    let noise = smooth_noise(h, w, rng, 2);
    let mut ripple_dir = 0.0;
    let field = match spec.seafloor_kind {
        SeafloorKind::FlatSand => noise.iter().map(|n| (1.0 + 0.04 * n).max(0.05)).collect(),
        SeafloorKind::RippledSand => {
            ripple_dir = rng.gen_range(0.0..std::f64::consts::PI);
            let wavelength = rng.gen_range(5.0..10.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let (c, s) = (ripple_dir.cos(), ripple_dir.sin());
            let mut out = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let u = x as f64 * c + y as f64 * s;
                    let ripple =
                        0.28 * (std::f64::consts::TAU * u / wavelength + phase).sin();
                    out.push((1.0 + ripple + 0.05 * noise[y * w + x]).max(0.05));
                }
            }
            out
        }
        SeafloorKind::Rocky => noise
            .iter()
            .map(|n| (1.0 + 1.4 * (n - blob_threshold()).max(0.0) + 0.04 * n).max(0.05))
            .collect(),
        SeafloorKind::Pitted => noise
            .iter()
            .map(|n| (1.0 - 0.8 * (n - blob_threshold()).max(0.0) + 0.04 * n).max(0.05))
            .collect(),
    };
    (field, ripple_dir)
}

// blob threshold for rocky/pitted texture
fn blob_threshold() -> f64 {
    0.55
}

fn shape_contains(shape: &TargetShape, local_y: f64, local_x: f64) -> bool {
    match shape {
        TargetShape::Disc { radius } => local_x * local_x + local_y * local_y <= radius * radius,
        TargetShape::Rectangle { half_w, half_h } => {
            local_x.abs() <= *half_w && local_y.abs() <= *half_h
        }
        TargetShape::Capsule { half_len, radius } => {
            let cx = local_x.clamp(-half_len, *half_len);
            let dx = local_x - cx;
            dx * dx + local_y * local_y <= radius * radius
        }
        TargetShape::Polyline { points, thickness } => {
            let r2 = thickness * thickness;
            points.windows(2).any(|seg| {
                let (ay, ax) = seg[0];
                let (by, bx) = seg[1];
                let (vy, vx) = (by - ay, bx - ax);
                let len2 = (vy * vy + vx * vx).max(1e-12);
                let t = (((local_y - ay) * vy + (local_x - ax) * vx) / len2).clamp(0.0, 1.0);
                let (py, px) = (ay + t * vy, ax + t * vx);
                let (dy, dx) = (local_y - py, local_x - px);
                dy * dy + dx * dx <= r2
            })
        }
    }
}

/// Support mask of one posed target; `true` entries are target pixels.
fn target_support(t: &TargetSpec, h: usize, w: usize) -> Vec<bool> {
    let rot = t.rotation_deg.to_radians();
    let (c, s) = (rot.cos(), rot.sin());
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - t.center.0;
            let dx = x as f64 - t.center.1;
            // rotate into the shape frame, then unscale
            let ly = (-s * dx + c * dy) / t.scale;
            let lx = (c * dx + s * dy) / t.scale;
            out[y * w + x] = shape_contains(&t.shape, ly, lx);
        }
    }
    out
}

/// Generate the reflectivity stack and ground-truth mask for `spec`.
/// Deterministic for a fixed spec (the seed lives inside it).
pub fn generate_scene(spec: &SceneSpec) -> Result<(SubApertureStack, GroundTruthMask)> {
    spec.validate()?;
    let (h, w, k) = (spec.height, spec.width, spec.num_apertures);
    let mut rng = rng_for(spec.seed, "scene/seafloor");
    let (floor, ripple_dir) = seafloor_field(spec, &mut rng);

    // full-aspect boost
    let mut base = floor;
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - spec.center.0;
            let dx = x as f64 - spec.center.1;
            if (dy * dy + dx * dx).sqrt() < spec.full_aspect_radius {
                base[y * w + x] *= spec.full_aspect_gain;
            }
        }
    }

    let angles: Vec<f64> = (0..k).map(|i| i as f64 * spec.aperture_spacing_deg).collect();

    // seafloor aspect profile: ripples scatter strongest broadside to the
    // crest direction, other bottom types are isotropic
    let aspect_profile: Vec<f64> = angles
        .iter()
        .map(|a| {
            if spec.seafloor_kind == SeafloorKind::RippledSand {
                let rel = a.to_radians() - ripple_dir;
                1.0 + 0.3 * (2.0 * rel).cos()
            } else {
                1.0
            }
        })
        .collect();

    let mut reflectivity = Tensor::zeros(&[k, h, w]);
    for ki in 0..k {
        let gain = aspect_profile[ki];
        let plane = reflectivity.plane_mut(ki);
        for (p, b) in plane.iter_mut().zip(&base) {
            *p = b * gain;
        }
    }

    let mut mask = GroundTruthMask::zeros(h, w);
    for (ti, target) in spec.targets.iter().enumerate() {
        let support = target_support(target, h, w);
        if !support.iter().any(|&v| v) {
            return Err(Error::Scene(format!(
                "target {ti} has no support inside the image"
            )));
        }
        let mut trng = rng_for(spec.seed, &format!("scene/target/{ti}"));
        let texture: Vec<f64> = (0..h * w).map(|_| trng.gen_range(0.8..1.2)).collect();
        let exposure = 1.0 - target.burial_fraction;
        for (i, &inside) in support.iter().enumerate() {
            if inside {
                mask.data[i] = 1;
            }
        }
        if exposure <= 0.0 {
            continue;
        }
        for facet in &target.facets {
            let add = facet.gain * exposure;
            for ki in 0..k {
                if !in_band(angles[ki], facet) {
                    continue;
                }
                let plane = reflectivity.plane_mut(ki);
                for (i, &inside) in support.iter().enumerate() {
                    if inside {
                        plane[i] += add * texture[i];
                    }
                }
            }
        }
    }

    Ok((
        SubApertureStack {
            reflectivity,
            center_angles: angles,
        },
        mask,
    ))
}

/// Multiplicative speckle: every value becomes `v * max(0, 1 + e)` with
/// `e ~ N(0, sigma^2)`, truncated so power stays non-negative.
pub fn add_speckle(stack: &SubApertureStack, sigma: f64, seed: u64) -> SubApertureStack {
    assert!(sigma >= 0.0, "speckle sigma must be non-negative");
    if sigma == 0.0 {
        return stack.clone();
    }
    let mut rng = rng_for(seed, "augment/speckle");
    let data = stack
        .reflectivity
        .data()
        .iter()
        .map(|&v| {
            let e = gaussian(&mut rng) * sigma;
            v * (1.0 + e).max(0.0)
        })
        .collect();
    SubApertureStack {
        reflectivity: Tensor::from_vec(stack.reflectivity.shape(), data),
        center_angles: stack.center_angles.clone(),
    }
}

fn gaussian(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRect {
    pub y0: usize,
    pub x0: usize,
    /// exclusive
    pub y1: usize,
    /// exclusive
    pub x1: usize,
}

/// Local haze: attenuate the patch, then (optionally) smear it with a fixed
/// 5x5 box kernel sampled edge-clamped from the attenuated image.
pub fn add_haze(
    stack: &SubApertureStack,
    patch: PatchRect,
    attenuation: f64,
    blur: bool,
) -> Result<SubApertureStack> {
    if !(attenuation > 0.0 && attenuation <= 1.0) {
        return Err(Error::Config("haze attenuation must lie in (0, 1]".into()));
    }
    let (k, h, w) = (stack.num_apertures(), stack.height(), stack.width());
    if patch.y1 > h || patch.x1 > w || patch.y0 >= patch.y1 || patch.x0 >= patch.x1 {
        return Err(Error::Config("haze patch does not fit inside the image".into()));
    }
    let mut out = stack.reflectivity.clone();
    for ki in 0..k {
        let plane = out.plane_mut(ki);
        for y in patch.y0..patch.y1 {
            for x in patch.x0..patch.x1 {
                plane[y * w + x] *= attenuation;
            }
        }
        if blur {
            let scaled = plane.to_vec();
            for y in patch.y0..patch.y1 {
                for x in patch.x0..patch.x1 {
                    let mut acc = 0.0;
                    for dy in -2i64..=2 {
                        for dx in -2i64..=2 {
                            let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                            let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                            acc += scaled[yy * w + xx];
                        }
                    }
                    plane[y * w + x] = acc / 25.0;
                }
            }
        }
    }
    Ok(SubApertureStack {
        reflectivity: out,
        center_angles: stack.center_angles.clone(),
    })
}

/// Random target with shape-appropriate facets, placed inside the image.
pub fn random_target(h: usize, w: usize, rng: &mut ChaCha20Rng) -> TargetSpec {
    let margin = 0.18 * h.min(w) as f64;
    let center = (
        rng.gen_range(margin..h as f64 - margin),
        rng.gen_range(margin..w as f64 - margin),
    );
    let unit = h.min(w) as f64 / 32.0;
    let rotation_deg = rng.gen_range(0.0..360.0);
    let kind = rng.gen_range(0..4u32);
    let (shape, facet_normals): (TargetShape, Vec<f64>) = match kind {
        0 => (
            TargetShape::Disc {
                radius: rng.gen_range(2.2..4.0) * unit,
            },
            vec![rng.gen_range(0.0..360.0), rng.gen_range(0.0..360.0)],
        ),
        1 => (
            TargetShape::Rectangle {
                half_w: rng.gen_range(2.5..4.5) * unit,
                half_h: rng.gen_range(1.2..2.5) * unit,
            },
            vec![0.0, 90.0, 180.0, 270.0],
        ),
        2 => (
            TargetShape::Capsule {
                half_len: rng.gen_range(2.5..4.5) * unit,
                radius: rng.gen_range(1.0..1.8) * unit,
            },
            vec![90.0, 270.0],
        ),
        _ => {
            let n = rng.gen_range(3..5usize);
            let mut points = Vec::with_capacity(n);
            let mut py = rng.gen_range(-3.0..3.0) * unit;
            let mut px = rng.gen_range(-3.0..3.0) * unit;
            for _ in 0..n {
                points.push((py, px));
                py += rng.gen_range(-2.5..2.5) * unit;
                px += rng.gen_range(-2.5..2.5) * unit;
            }
            (
                TargetShape::Polyline {
                    points,
                    thickness: rng.gen_range(0.8..1.4) * unit,
                },
                vec![rng.gen_range(0.0..360.0), rng.gen_range(0.0..360.0)],
            )
        }
    };
    let facets = facet_normals
        .iter()
        .map(|n| Facet {
            gain: rng.gen_range(2.5..5.0),
            band_center_deg: (n + rotation_deg).rem_euclid(360.0),
            band_width_deg: rng.gen_range(50.0..130.0),
        })
        .collect();
    TargetSpec {
        shape,
        center,
        rotation_deg,
        scale: 1.0,
        facets,
        burial_fraction: if rng.gen_bool(0.15) {
            rng.gen_range(0.0..0.5)
        } else {
            0.0
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn disc_spec(k: usize) -> SceneSpec {
        let mut spec = SceneSpec::new(11, 32, 32).with_apertures(k);
        spec.targets.push(TargetSpec {
            shape: TargetShape::Disc { radius: 4.0 },
            center: (16.0, 16.0),
            rotation_deg: 0.0,
            scale: 1.0,
            facets: vec![Facet {
                gain: 3.0,
                band_center_deg: 0.0,
                band_width_deg: 36.0,
            }],
            burial_fraction: 0.0,
        });
        spec
    }

    #[test]
    fn empty_scene_has_all_zero_mask() {
        let spec = SceneSpec::new(3, 24, 24).with_apertures(8);
        let (_, mask) = generate_scene(&spec).unwrap();
        assert!(mask.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = disc_spec(20);
        let (a, ma) = generate_scene(&spec).unwrap();
        let (b, mb) = generate_scene(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn facet_band_limits_target_reflectivity_to_member_apertures() {
        let spec = disc_spec(20); // 18 degrees apart, band center 0 width 36
        let (stack, mask) = generate_scene(&spec).unwrap();
        // isolate the target contribution by regenerating without the target
        let mut empty = spec.clone();
        empty.targets.clear();
        let (bg, _) = generate_scene(&empty).unwrap();
        for ki in 0..20 {
            let member = angle_dist_deg(stack.center_angles[ki], 0.0) <= 18.0;
            let mut target_energy = 0.0;
            for (i, &m) in mask.data.iter().enumerate() {
                if m == 1 {
                    target_energy +=
                        stack.reflectivity.plane(ki)[i] - bg.reflectivity.plane(ki)[i];
                }
            }
            if member {
                assert!(target_energy > 0.0, "aperture {ki} should carry the facet");
            } else {
                assert!(
                    target_energy.abs() < 1e-9,
                    "aperture {ki} should equal the seafloor baseline"
                );
            }
        }
    }

    #[test]
    fn out_of_image_target_is_rejected() {
        let mut spec = SceneSpec::new(5, 24, 24).with_apertures(8);
        spec.targets.push(TargetSpec {
            shape: TargetShape::Disc { radius: 2.0 },
            center: (60.0, 60.0),
            rotation_deg: 0.0,
            scale: 1.0,
            facets: vec![],
            burial_fraction: 0.0,
        });
        assert!(generate_scene(&spec).is_err());
    }

    #[test]
    fn full_aspect_region_is_boosted() {
        let mut spec = SceneSpec::new(9, 40, 40).with_apertures(8);
        spec.full_aspect_radius = 10.0;
        let (stack, _) = generate_scene(&spec).unwrap();
        let plane = stack.reflectivity.plane(0);
        let inside = plane[20 * 40 + 20];
        let outside = plane[2 * 40 + 2];
        assert!(inside > 1.2 * outside);
    }

    #[test]
    fn reflectivity_never_negative() {
        for kind in [
            SeafloorKind::FlatSand,
            SeafloorKind::RippledSand,
            SeafloorKind::Rocky,
            SeafloorKind::Pitted,
        ] {
            let mut spec = disc_spec(12);
            spec.seafloor_kind = kind;
            let (stack, _) = generate_scene(&spec).unwrap();
            assert!(stack.reflectivity.min() >= 0.0);
            assert!(stack.reflectivity.all_finite());
        }
    }

    #[test]
    fn speckle_zero_sigma_is_identity_and_seeded() {
        let (stack, _) = generate_scene(&disc_spec(12)).unwrap();
        assert_eq!(add_speckle(&stack, 0.0, 1).reflectivity, stack.reflectivity);
        let a = add_speckle(&stack, 0.1, 7);
        let b = add_speckle(&stack, 0.1, 7);
        assert_eq!(a.reflectivity, b.reflectivity);
        assert!(a.reflectivity.min() >= 0.0);
    }

    #[test]
    fn speckle_mean_matches_truncated_normal_oracle() {
        // E[max(0, 1+e)] = Phi(1/s) + s*phi(1/s); for s = 0.1 this is 1.0 to
        // double precision. Estimate over ~1e6 samples.
        let spec = SceneSpec::new(21, 100, 100).with_apertures(100);
        let (stack, _) = generate_scene(&spec).unwrap();
        let sigma = 0.1;
        let speckled = add_speckle(&stack, sigma, 3);
        let ratio_mean: f64 = speckled
            .reflectivity
            .data()
            .iter()
            .zip(stack.reflectivity.data())
            .map(|(s, o)| s / o)
            .sum::<f64>()
            / stack.reflectivity.len() as f64;
        let z = 1.0 / sigma;
        let phi = (-0.5 * z * z).exp() / (std::f64::consts::TAU).sqrt();
        let cdf = 0.5 * (1.0 + erf_approx(z / std::f64::consts::SQRT_2));
        let oracle = cdf + sigma * phi;
        assert!(
            (ratio_mean - oracle).abs() < 0.01 * oracle,
            "mean {ratio_mean} vs oracle {oracle}"
        );
    }

    // Abramowitz-Stegun 7.1.26, |err| < 1.5e-7 — plenty for a 1% check.
    fn erf_approx(x: f64) -> f64 {
        let sign = x.signum();
        let x = x.abs();
        let t = 1.0 / (1.0 + 0.3275911 * x);
        let y = 1.0
            - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
                + 0.254829592)
                * t
                * (-x * x).exp();
        sign * y
    }

    #[test]
    fn haze_without_blur_scales_patch_only() {
        let (stack, _) = generate_scene(&disc_spec(12)).unwrap();
        let patch = PatchRect { y0: 4, x0: 6, y1: 12, x1: 14 };
        let hazed = add_haze(&stack, patch, 0.5, false).unwrap();
        let w = stack.width();
        for ki in 0..stack.num_apertures() {
            for y in 0..stack.height() {
                for x in 0..w {
                    let orig = stack.reflectivity.plane(ki)[y * w + x];
                    let got = hazed.reflectivity.plane(ki)[y * w + x];
                    let inside = y >= 4 && y < 12 && x >= 6 && x < 14;
                    let want = if inside { orig * 0.5 } else { orig };
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
        // attenuation 1 with blur disabled is the identity
        let same = add_haze(&stack, patch, 1.0, false).unwrap();
        assert_eq!(same.reflectivity, stack.reflectivity);
    }

    #[test]
    fn haze_blur_matches_direct_convolution_oracle() {
        // 8x8 constant stack, interior patch: verify against a brute-force
        // 5x5 box convolution of the attenuated image.
        let refl = Tensor::full(&[1, 8, 8], 2.0);
        let stack = SubApertureStack {
            reflectivity: refl,
            center_angles: vec![0.0],
        };
        let patch = PatchRect { y0: 2, x0: 2, y1: 6, x1: 6 };
        let att = 0.5;
        let hazed = add_haze(&stack, patch, att, true).unwrap();
        let mut scaled = vec![2.0; 64];
        for y in 2..6 {
            for x in 2..6 {
                scaled[y * 8 + x] *= att;
            }
        }
        for y in 0..8 {
            for x in 0..8 {
                let want = if y >= 2 && y < 6 && x >= 2 && x < 6 {
                    let mut acc = 0.0;
                    for dy in -2i64..=2 {
                        for dx in -2i64..=2 {
                            let yy = (y as i64 + dy).clamp(0, 7) as usize;
                            let xx = (x as i64 + dx).clamp(0, 7) as usize;
                            acc += scaled[yy * 8 + xx];
                        }
                    }
                    acc / 25.0
                } else {
                    2.0
                };
                let got = hazed.reflectivity.plane(0)[y * 8 + x];
                assert!((got - want).abs() < 1e-12, "({y},{x}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn random_targets_generate_valid_scenes() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        for seed in 0..5u64 {
            let mut spec = SceneSpec::new(seed, 32, 32).with_apertures(12);
            spec.targets = vec![random_target(32, 32, &mut rng)];
            let (stack, mask) = generate_scene(&spec).unwrap();
            assert!(stack.reflectivity.min() >= 0.0);
            assert!(mask.data.iter().any(|&v| v == 1));
        }
    }
}
