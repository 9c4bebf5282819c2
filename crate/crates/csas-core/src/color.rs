//! Color-by-aspect rendering of sub-aperture stacks.
//!
//! Hue encodes the dominant scattering direction (angle of the circular
//! resultant of per-aperture reflectivity), saturation the angular
//! anisotropy (normalized resultant magnitude), and value the logarithmically
//! scaled reflectivity power mean. Entropy maps of the aperture distribution
//! serve as a diagnostic view.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::SubApertureStack;
use crate::tensor::Tensor;

/// Hue/saturation/value image, all channels in [0, 1], hue periodic.
#[derive(Clone, Debug, PartialEq)]
pub struct CsasImage {
    /// [3, H, W]: hue, saturation, value.
    pub pixels: Tensor,
}

impl CsasImage {
    pub fn new(pixels: Tensor) -> Self {
        assert_eq!(pixels.shape()[0], 3);
        CsasImage { pixels }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// Network/clustering representation: hue decoded into a direction
    /// vector scaled by saturation, value passed through —
    /// `[s cos(2 pi h), s sin(2 pi h), v]`. Keeps hue periodicity intact.
    pub fn to_vector_rep(&self) -> Tensor {
        let (h, w) = (self.height(), self.width());
        let mut out = Tensor::zeros(&[3, h, w]);
        for i in 0..h * w {
            let hue = self.pixels.data()[i];
            let sat = self.pixels.data()[h * w + i];
            let val = self.pixels.data()[2 * h * w + i];
            let a = std::f64::consts::TAU * hue;
            out.data_mut()[i] = sat * a.cos();
            out.data_mut()[h * w + i] = sat * a.sin();
            out.data_mut()[2 * h * w + i] = val;
        }
        out
    }

    /// Inverse of [`Self::to_vector_rep`].
    pub fn from_vector_rep(vec: &Tensor) -> Self {
        let (h, w) = (vec.shape()[1], vec.shape()[2]);
        let mut out = Tensor::zeros(&[3, h, w]);
        for i in 0..h * w {
            let cx = vec.data()[i];
            let sy = vec.data()[h * w + i];
            let val = vec.data()[2 * h * w + i];
            let sat = (cx * cx + sy * sy).sqrt().min(1.0);
            let hue = if sat > 1e-12 {
                (sy.atan2(cx) / std::f64::consts::TAU).rem_euclid(1.0)
            } else {
                0.0
            };
            out.data_mut()[i] = hue;
            out.data_mut()[h * w + i] = sat;
            out.data_mut()[2 * h * w + i] = val.clamp(0.0, 1.0);
        }
        CsasImage::new(out)
    }

    /// 8-bit RGB rendering (standard HSV-to-RGB).
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let mut out = Vec::with_capacity(3 * h * w);
        for i in 0..h * w {
            let hue = self.pixels.data()[i].rem_euclid(1.0) * 360.0;
            let sat = self.pixels.data()[h * w + i].clamp(0.0, 1.0);
            let val = self.pixels.data()[2 * h * w + i].clamp(0.0, 1.0);
            let c = val * sat;
            let hp = hue / 60.0;
            let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
            let (r, g, b) = match hp as u32 {
                0 => (c, x, 0.0),
                1 => (x, c, 0.0),
                2 => (0.0, c, x),
                3 => (0.0, x, c),
                4 => (x, 0.0, c),
                _ => (c, 0.0, x),
            };
            let m = val - c;
            out.push(((r + m) * 255.0).round() as u8);
            out.push(((g + m) * 255.0).round() as u8);
            out.push(((b + m) * 255.0).round() as u8);
        }
        out
    }
}

/// Angle-to-hue mapping with optional range compression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorMapConfig {
    /// (ensonification angle deg, hue deg) anchor pairs, circularly
    /// interpolated. The default maps 0 deg to red, 120 deg to blue and
    /// 240 deg to green.
    pub hue_anchor_angles: Vec<(f64, f64)>,
    /// Optional piecewise-linear hue remap (hue deg -> hue deg) reducing the
    /// dynamic range of the wheel.
    pub compression: Option<Vec<(f64, f64)>>,
    /// Exponent of the reflectivity power mean behind the value channel.
    pub power_mean_exponent: f64,
}

impl Default for ColorMapConfig {
    fn default() -> Self {
        ColorMapConfig {
            hue_anchor_angles: vec![(0.0, 0.0), (120.0, 240.0), (240.0, 120.0)],
            compression: None,
            power_mean_exponent: 1.0,
        }
    }
}

impl ColorMapConfig {
    /// Compressed wheel: hue range shrunk by `factor` (most of the wheel maps
    /// near red, a narrow slice keeps the remaining hues).
    pub fn compressed(factor: f64) -> Self {
        ColorMapConfig {
            compression: Some(vec![(0.0, 0.0), (360.0, 360.0 * factor)]),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hue_anchor_angles.len() < 2 {
            return Err(Error::Config("need at least two hue anchors".into()));
        }
        if self.compression.is_none() {
            // bijection check: consistent winding that covers the full wheel
            let mut total = 0.0;
            let n = self.hue_anchor_angles.len();
            let mut sign = 0.0;
            for i in 0..n {
                let (_, h0) = self.hue_anchor_angles[i];
                let (_, h1) = self.hue_anchor_angles[(i + 1) % n];
                let d = signed_circ_diff_deg(h1, h0);
                if d == 0.0 {
                    return Err(Error::Config("hue anchors collapse a segment".into()));
                }
                if sign == 0.0 {
                    sign = d.signum();
                } else if sign != d.signum() {
                    return Err(Error::Config("hue anchors are not monotone on the wheel".into()));
                }
                total += d;
            }
            if (total.abs() - 360.0).abs() > 1e-6 {
                return Err(Error::Config("hue anchors do not cover the wheel".into()));
            }
        }
        Ok(())
    }

    /// Hue in [0, 1) for an ensonification angle in degrees.
    pub fn map_angle(&self, angle_deg: f64) -> f64 {
        let a = angle_deg.rem_euclid(360.0);
        let mut anchors = self.hue_anchor_angles.clone();
        anchors.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        let n = anchors.len();
        // locate the wrapping segment containing `a`
        let mut hue = anchors[0].1;
        for i in 0..n {
            let (a0, h0) = anchors[i];
            let (mut a1, h1) = anchors[(i + 1) % n];
            if i + 1 == n {
                a1 += 360.0;
            }
            let aa = if a < a0 { a + 360.0 } else { a };
            if aa >= a0 && aa < a1 {
                let t = (aa - a0) / (a1 - a0);
                hue = h0 + t * signed_circ_diff_deg(h1, h0);
                break;
            }
        }
        let hue = hue.rem_euclid(360.0);
        let hue = match &self.compression {
            Some(points) => piecewise_linear(points, hue).rem_euclid(360.0),
            None => hue,
        };
        hue / 360.0
    }
}

fn signed_circ_diff_deg(a: f64, b: f64) -> f64 {
    let mut d = (a - b).rem_euclid(360.0);
    if d > 180.0 {
        d -= 360.0;
    }
    d
}

fn piecewise_linear(points: &[(f64, f64)], x: f64) -> f64 {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    if x <= pts[0].0 {
        return pts[0].1;
    }
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x <= x1 {
            let t = (x - x0) / (x1 - x0).max(1e-12);
            return y0 + t * (y1 - y0);
        }
    }
    pts[pts.len() - 1].1
}

fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q * (n as f64 - 1.0);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let t = pos - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

/// Render a stack into a color-by-aspect image.
pub fn colorize(stack: &SubApertureStack, cfg: &ColorMapConfig) -> CsasImage {
    let (k, h, w) = (stack.num_apertures(), stack.height(), stack.width());
    let p = cfg.power_mean_exponent;
    let radians: Vec<f64> = stack.center_angles.iter().map(|a| a.to_radians()).collect();
    let cosines: Vec<f64> = radians.iter().map(|r| r.cos()).collect();
    let sines: Vec<f64> = radians.iter().map(|r| r.sin()).collect();

    let mut hue = vec![0.0; h * w];
    let mut sat = vec![0.0; h * w];
    let mut log_mean = vec![0.0; h * w];
    for i in 0..h * w {
        let mut total = 0.0;
        let mut rx = 0.0;
        let mut ry = 0.0;
        let mut power_acc = 0.0;
        for ki in 0..k {
            let r = stack.reflectivity.plane(ki)[i];
            total += r;
            rx += r * cosines[ki];
            ry += r * sines[ki];
            power_acc += if p == 1.0 { r } else { r.powf(p) };
        }
        let power_mean = if p == 1.0 {
            power_acc / k as f64
        } else {
            (power_acc / k as f64).powf(1.0 / p)
        };
        log_mean[i] = (power_mean + 1e-12).ln();
        if total > 0.0 {
            let mag = (rx * rx + ry * ry).sqrt();
            sat[i] = (mag / total).min(1.0);
            let angle = ry.atan2(rx).to_degrees().rem_euclid(360.0);
            hue[i] = cfg.map_angle(angle);
        }
    }

    // logarithmic scaling with a per-image 1st-99th percentile stretch
    let mut sorted = log_mean.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p1 = percentile_sorted(&sorted, 0.01);
    let p99 = percentile_sorted(&sorted, 0.99);
    let span = (p99 - p1).max(1e-12);

    let mut pixels = Tensor::zeros(&[3, h, w]);
    for i in 0..h * w {
        pixels.data_mut()[i] = hue[i];
        pixels.data_mut()[h * w + i] = sat[i];
        pixels.data_mut()[2 * h * w + i] = ((log_mean[i] - p1) / span).clamp(0.0, 1.0);
    }
    CsasImage::new(pixels)
}

/// Normalized Shannon entropy of the per-pixel aperture distribution,
/// in [0, 1]; pixels with no reflectivity map to 0.
pub fn entropy_map(stack: &SubApertureStack) -> Tensor {
    let (k, h, w) = (stack.num_apertures(), stack.height(), stack.width());
    let mut out = Tensor::zeros(&[h, w]);
    if k < 2 {
        return out;
    }
    let log_k = (k as f64).ln();
    for i in 0..h * w {
        let mut total = 0.0;
        for ki in 0..k {
            total += stack.reflectivity.plane(ki)[i];
        }
        if total <= 0.0 {
            continue;
        }
        let mut ent = 0.0;
        for ki in 0..k {
            let p = stack.reflectivity.plane(ki)[i] / total;
            if p > 0.0 {
                ent -= p * p.ln();
            }
        }
        out.data_mut()[i] = (ent / log_k).clamp(0.0, 1.0);
    }
    out
}

/// Shift the hue wheel by `shift_slots` aperture slots (of `k` total);
/// saturation and value are untouched.
pub fn hue_rotate(image: &CsasImage, shift_slots: usize, k: usize) -> CsasImage {
    assert!(shift_slots < k, "shift must lie in [0, K)");
    hue_shift(image, shift_slots as f64 / k as f64)
}

/// Shift the hue channel by a fraction of the wheel (continuous variant used
/// by rotational augmentation).
pub fn hue_shift(image: &CsasImage, frac: f64) -> CsasImage {
    let (h, w) = (image.height(), image.width());
    let mut pixels = image.pixels.clone();
    for i in 0..h * w {
        pixels.data_mut()[i] = (pixels.data()[i] + frac).rem_euclid(1.0);
    }
    CsasImage::new(pixels)
}

/// Circular distance between two hue fractions, in [0, 0.5].
pub fn hue_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn stack_from(k: usize, h: usize, w: usize, data: Vec<f64>) -> SubApertureStack {
        SubApertureStack {
            reflectivity: Tensor::from_vec(&[k, h, w], data),
            center_angles: (0..k).map(|i| i as f64 * 360.0 / k as f64).collect(),
        }
    }

    #[test]
    fn default_map_sends_zero_to_red_and_120_to_blue() {
        let cfg = ColorMapConfig::default();
        cfg.validate().unwrap();
        assert!(hue_dist(cfg.map_angle(0.0), 0.0) < 1e-9);
        assert!(hue_dist(cfg.map_angle(120.0), 240.0 / 360.0) < 1e-9);
        assert!(hue_dist(cfg.map_angle(240.0), 120.0 / 360.0) < 1e-9);
    }

    #[test]
    fn energy_at_zero_degrees_is_red() {
        // all reflectivity concentrated in the aperture centered at 0 deg
        let mut d = vec![0.0; 4 * 2 * 2];
        for i in 0..4 {
            d[i] = 2.0;
        }
        let stack = stack_from(4, 2, 2, d);
        let img = colorize(&stack, &ColorMapConfig::default());
        for i in 0..4 {
            assert!(hue_dist(img.pixels.data()[i], 0.0) < 1e-9);
            assert!((img.pixels.data()[4 + i] - 1.0).abs() < 1e-9); // fully saturated
        }
    }

    #[test]
    fn uniform_reflectivity_is_gray() {
        let stack = stack_from(8, 2, 2, vec![0.7; 8 * 4]);
        let img = colorize(&stack, &ColorMapConfig::default());
        for i in 0..4 {
            assert!(img.pixels.data()[4 + i].abs() < 1e-12, "saturation must vanish");
        }
    }

    #[test]
    fn resultant_vector_matches_hand_computation() {
        // K = 4, reflectivity (1,1,0,0) at 0/90/180/270 deg:
        // resultant angle 45 deg, saturation sqrt(2)/2
        let stack = stack_from(4, 1, 1, vec![1.0, 1.0, 0.0, 0.0]);
        let img = colorize(&stack, &ColorMapConfig::default());
        let want_hue = ColorMapConfig::default().map_angle(45.0);
        assert!(hue_dist(img.pixels.data()[0], want_hue) < 1e-9);
        assert!((img.pixels.data()[1] - (2.0f64).sqrt() / 2.0).abs() < 1e-9);
    }

    #[test]
    fn entropy_endpoints_are_exact() {
        let uniform = stack_from(8, 1, 2, vec![0.3; 16]);
        let e = entropy_map(&uniform);
        assert!((e.data()[0] - 1.0).abs() < 1e-12);
        let mut d = vec![0.0; 8 * 2];
        d[0] = 5.0;
        d[1] = 5.0;
        let delta = stack_from(8, 1, 2, d);
        let e = entropy_map(&delta);
        assert_eq!(e.data()[0], 0.0);
        assert_eq!(e.data()[1], 0.0);
    }

    #[test]
    fn entropy_half_uniform_is_half() {
        // distribution (0.5, 0.5, 0, 0) over K = 4: ln2 / ln4 = 0.5
        let stack = stack_from(4, 1, 1, vec![0.5, 0.5, 0.0, 0.0]);
        let e = entropy_map(&stack);
        assert!((e.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn entropy_invariant_under_aperture_permutation() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..6 * 9).map(|_| rng.gen_range(0.0..2.0)).collect();
        let stack = stack_from(6, 3, 3, data);
        let e0 = entropy_map(&stack);
        let e1 = entropy_map(&stack.roll(2));
        assert!(crate::tensor::max_abs_diff(&e0, &e1) < 1e-12);
    }

    #[test]
    fn hue_rotate_identity_and_full_circle() {
        let spec = SceneSpec::new(5, 16, 16).with_apertures(8);
        let (stack, _) = generate_scene(&spec).unwrap();
        let img = colorize(&stack, &ColorMapConfig::default());
        let same = hue_rotate(&img, 0, 8);
        assert_eq!(same.pixels, img.pixels);
        let mut cur = img.clone();
        for _ in 0..8 {
            cur = hue_rotate(&cur, 1, 8);
        }
        for i in 0..16 * 16 {
            assert!(hue_dist(cur.pixels.data()[i], img.pixels.data()[i]) < 1e-9);
        }
    }

    #[test]
    fn colorize_commutes_with_aperture_roll() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let k = 8;
        let data: Vec<f64> = (0..k * 36).map(|_| rng.gen_range(0.0..3.0)).collect();
        let stack = stack_from(k, 6, 6, data);
        let cfg = ColorMapConfig::default();
        for m in 0..k {
            let a = colorize(&stack.roll(m), &cfg);
            let b = hue_rotate(&colorize(&stack, &cfg), m, k);
            for i in 0..36 {
                assert!(
                    hue_dist(a.pixels.data()[i], b.pixels.data()[i]) < 1e-6,
                    "hue mismatch at shift {m}"
                );
                for ch in 1..3 {
                    let d = (a.pixels.data()[ch * 36 + i] - b.pixels.data()[ch * 36 + i]).abs();
                    assert!(d < 1e-6, "channel {ch} mismatch at shift {m}");
                }
            }
        }
    }

    #[test]
    fn scaling_reflectivity_keeps_hue_and_saturation() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..6 * 16).map(|_| rng.gen_range(0.0..2.0)).collect();
        let stack = stack_from(6, 4, 4, data.clone());
        let scaled = stack_from(6, 4, 4, data.iter().map(|v| v * 3.7).collect());
        let cfg = ColorMapConfig::default();
        let a = colorize(&stack, &cfg);
        let b = colorize(&scaled, &cfg);
        for i in 0..16 {
            assert!(hue_dist(a.pixels.data()[i], b.pixels.data()[i]) < 1e-9);
            assert!((a.pixels.data()[16 + i] - b.pixels.data()[16 + i]).abs() < 1e-9);
        }
    }

    #[test]
    fn vector_rep_roundtrips() {
        let spec = SceneSpec::new(6, 16, 16).with_apertures(8);
        let (stack, _) = generate_scene(&spec).unwrap();
        let img = colorize(&stack, &ColorMapConfig::default());
        let back = CsasImage::from_vector_rep(&img.to_vector_rep());
        for i in 0..16 * 16 {
            let sat = img.pixels.data()[256 + i];
            if sat > 1e-9 {
                assert!(hue_dist(back.pixels.data()[i], img.pixels.data()[i]) < 1e-9);
            }
            assert!((back.pixels.data()[256 + i] - sat).abs() < 1e-9);
            assert!((back.pixels.data()[512 + i] - img.pixels.data()[512 + i]).abs() < 1e-9);
        }
    }

    #[test]
    fn compressed_map_narrows_hue_range() {
        let cfg = ColorMapConfig::compressed(0.25);
        for a in [0.0, 45.0, 133.0, 250.0, 359.0] {
            assert!(cfg.map_angle(a) <= 0.25 + 1e-9);
        }
    }
}
