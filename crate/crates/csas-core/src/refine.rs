//! Single-pass mean-field label refinement.
//!
//! One bilateral message-passing step over a local window: each pixel gathers
//! a kernel-weighted average `m` of its neighbors' foreground probabilities
//! (kernel from guide-feature and spatial distance, center excluded) and its
//! logit moves toward agreement, `logit' = logit(p) + mu (m - p)`. Where the
//! neighborhood already agrees (m = p) the map is a fixed point, so constant
//! regions separated by a strong guide edge pass through untouched.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Var, WindowWeights};
use crate::error::{Error, Result};
use crate::nn::{Fwd, ParamStore};
use crate::tensor::Tensor;

pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParsingConfig {
    /// Odd window side length.
    pub window: usize,
    /// Guide-feature bandwidth.
    pub sigma_f: f64,
    /// Spatial bandwidth in pixels.
    pub sigma_s: f64,
    /// Initial value of the trainable compatibility weight.
    pub mu_init: f64,
}

impl Default for ParsingConfig {
    fn default() -> Self {
        ParsingConfig {
            window: 9,
            sigma_f: 0.35,
            sigma_s: 2.0,
            mu_init: 1.0,
        }
    }
}

impl ParsingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || self.window < 3 {
            return Err(Error::Config("parsing window must be odd and >= 3".into()));
        }
        if self.sigma_f <= 0.0 || self.sigma_s <= 0.0 {
            return Err(Error::Config("parsing bandwidths must be positive".into()));
        }
        Ok(())
    }
}

/// Normalized bilateral kernel over the window for every pixel, center
/// excluded. Weights depend only on the guide, never on the map being
/// refined.
pub fn bilateral_weights(guide_vec: &Tensor, cfg: &ParsingConfig) -> Arc<WindowWeights> {
    let (c, h, w) = (guide_vec.shape()[0], guide_vec.shape()[1], guide_vec.shape()[2]);
    let win = cfg.window;
    let r = (win / 2) as isize;
    let inv_2sf2 = 1.0 / (2.0 * cfg.sigma_f * cfg.sigma_f);
    let inv_2ss2 = 1.0 / (2.0 * cfg.sigma_s * cfg.sigma_s);
    let mut weights = vec![0.0; h * w * win * win];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let base = ((y as usize * w + x as usize) * win) * win;
            let mut total = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                        continue;
                    }
                    let mut d2 = 0.0;
                    for ci in 0..c {
                        let a = guide_vec.at3(ci, y as usize, x as usize);
                        let b = guide_vec.at3(ci, ny as usize, nx as usize);
                        d2 += (a - b) * (a - b);
                    }
                    let s2 = (dy * dy + dx * dx) as f64;
                    let wv = (-d2 * inv_2sf2 - s2 * inv_2ss2).exp();
                    weights[base + ((dy + r) as usize) * win + (dx + r) as usize] = wv;
                    total += wv;
                }
            }
            if total > 0.0 {
                for k in 0..win * win {
                    weights[base + k] /= total;
                }
            }
        }
    }
    Arc::new(WindowWeights::new(win, h, w, weights))
}

/// Trainable refinement head; owns the scalar compatibility weight `mu`.
pub struct Refiner {
    pub cfg: ParsingConfig,
    name: String,
}

impl Refiner {
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: ParsingConfig) -> Result<Self> {
        cfg.validate()?;
        store.insert(&format!("{prefix}/mu"), Tensor::scalar(cfg.mu_init));
        Ok(Refiner {
            cfg,
            name: format!("{prefix}/mu"),
        })
    }

    /// One mean-field pass on a [1, H, W] probability map.
    pub fn forward(&self, f: &mut Fwd, map: Var, weights: Arc<WindowWeights>) -> Var {
        let mu_raw = f.param(&self.name);
        let mu = f.tape.clamp(mu_raw, 0.0, f64::INFINITY);
        refine_step(f, map, weights, mu)
    }
}

/// The refinement update itself, usable with any scalar `mu` variable.
pub fn refine_step(f: &mut Fwd, map: Var, weights: Arc<WindowWeights>, mu: Var) -> Var {
    let p = f.tape.clamp(map, PROB_EPS, 1.0 - PROB_EPS);
    let m = f.tape.window_average(p, weights);
    // logit(p) + mu (m - p), renormalized through the logistic
    let ln_p = f.tape.ln(p);
    let one_minus_p = f.tape.one_minus(p);
    let ln_q = f.tape.ln(one_minus_p);
    let logit = f.tape.sub(ln_p, ln_q);
    let delta = f.tape.sub(m, p);
    let scaled = f.tape.mul_scalar_var(delta, mu);
    let z = f.tape.add(logit, scaled);
    f.tape.sigmoid(z)
}

/// Inference-mode refinement of a plain tensor map.
pub fn refine_map(
    map: &Tensor,
    guide_vec: &Tensor,
    cfg: &ParsingConfig,
    mu: f64,
) -> Result<Tensor> {
    cfg.validate()?;
    let weights = bilateral_weights(guide_vec, cfg);
    let mut tape = crate::autodiff::Tape::new();
    let store = ParamStore::new();
    let mut f = Fwd::new(&mut tape, &store, false);
    let m = f.tape.constant(map.clone());
    let mu_v = f.tape.constant(Tensor::scalar(mu.max(0.0)));
    let out = refine_step(&mut f, m, weights, mu_v);
    Ok(f.tape.value(out).clone())
}

/// Sum of absolute horizontal and vertical differences.
pub fn total_variation(map: &Tensor) -> f64 {
    let (h, w) = match map.shape() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        s => panic!("total_variation on shape {s:?}"),
    };
    let d = map.data();
    let mut tv = 0.0;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                tv += (d[y * w + x + 1] - d[y * w + x]).abs();
            }
            if y + 1 < h {
                tv += (d[(y + 1) * w + x] - d[y * w + x]).abs();
            }
        }
    }
    tv
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn uniform_guide(h: usize, w: usize) -> Tensor {
        Tensor::full(&[3, h, w], 0.25)
    }

    #[test]
    fn mu_zero_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let map = Tensor::from_vec(
            &[1, 8, 8],
            (0..64).map(|_| rng.gen_range(0.05..0.95)).collect(),
        );
        let out = refine_map(&map, &uniform_guide(8, 8), &ParsingConfig::default(), 0.0).unwrap();
        assert!(crate::tensor::max_abs_diff(&out, &map) < 1e-9);
    }

    #[test]
    fn checkerboard_moves_toward_half_under_uniform_guide() {
        let (h, w) = (6usize, 6usize);
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] = if (y + x) % 2 == 0 { 0.9 } else { 0.1 };
            }
        }
        let map = Tensor::from_vec(&[1, h, w], data.clone());
        let out = refine_map(&map, &uniform_guide(h, w), &ParsingConfig::default(), 1.0).unwrap();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let before = (data[y * w + x] - 0.5).abs();
                let after = (out.data()[y * w + x] - 0.5).abs();
                assert!(after < before, "interior pixel ({y},{x}) must contract toward 0.5");
            }
        }
        // independent direct evaluation of the stated update on this grid
        let cfg = ParsingConfig::default();
        let r = (cfg.window / 2) as isize;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                let mut total = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                            continue;
                        }
                        let wv = (-((dy * dy + dx * dx) as f64)
                            / (2.0 * cfg.sigma_s * cfg.sigma_s))
                            .exp();
                        acc += wv * data[ny as usize * w as usize + nx as usize];
                        total += wv;
                    }
                }
                let m = acc / total;
                let p: f64 = data[y as usize * w + x as usize];
                let logit = (p / (1.0 - p)).ln() + (m - p);
                let want = 1.0 / (1.0 + (-logit).exp());
                let got = out.data()[y as usize * w + x as usize];
                assert!((got - want).abs() < 1e-9, "({y},{x}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn hard_guide_edge_keeps_side_constant_maps_fixed() {
        let (h, w) = (8usize, 8usize);
        let mut guide = Tensor::zeros(&[3, h, w]);
        let mut map = Tensor::zeros(&[1, h, w]);
        for y in 0..h {
            for x in 0..w {
                let left = x < w / 2;
                guide.set3(0, y, x, if left { 0.0 } else { 5.0 });
                map.set3(0, y, x, if left { 0.8 } else { 0.2 });
            }
        }
        let cfg = ParsingConfig {
            sigma_f: 0.05,
            ..Default::default()
        };
        let out = refine_map(&map, &guide, &cfg, 1.5).unwrap();
        assert!(
            crate::tensor::max_abs_diff(&out, &map) < 1e-6,
            "kernel mass stays within each side, so each side is a fixed point"
        );
    }

    #[test]
    fn uniform_guide_reduces_total_variation_of_random_maps() {
        let mut rng = ChaCha20Rng::seed_from_u64(32);
        for trial in 0..50 {
            let map = Tensor::from_vec(
                &[1, 8, 8],
                (0..64).map(|_| rng.gen_range(0.02..0.98)).collect(),
            );
            let out =
                refine_map(&map, &uniform_guide(8, 8), &ParsingConfig::default(), 1.0).unwrap();
            let before = total_variation(&map);
            let after = total_variation(&out);
            assert!(after < before, "trial {trial}: tv {before} -> {after}");
        }
    }

    #[test]
    fn refine_commutes_with_horizontal_flip() {
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let (h, w) = (8usize, 8usize);
        let map = Tensor::from_vec(&[1, h, w], (0..64).map(|_| rng.gen_range(0.1..0.9)).collect());
        let guide = Tensor::from_vec(
            &[3, h, w],
            (0..3 * 64).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let flip = |t: &Tensor| -> Tensor {
            let c = t.shape()[0];
            let mut out = t.clone();
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = t.at3(ci, y, w - 1 - x);
                        out.set3(ci, y, x, v);
                    }
                }
            }
            out
        };
        let cfg = ParsingConfig::default();
        let a = refine_map(&flip(&map), &flip(&guide), &cfg, 1.0).unwrap();
        let b = flip(&refine_map(&map, &guide, &cfg, 1.0).unwrap());
        assert!(crate::tensor::max_abs_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn output_stays_in_unit_interval() {
        let mut rng = ChaCha20Rng::seed_from_u64(34);
        let map = Tensor::from_vec(&[1, 8, 8], (0..64).map(|_| rng.gen_range(0.0..1.0)).collect());
        let guide = Tensor::from_vec(
            &[3, 8, 8],
            (0..3 * 64).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let out = refine_map(&map, &guide, &ParsingConfig::default(), 2.5).unwrap();
        assert!(out.min() >= 0.0 && out.max() <= 1.0);
    }
}
