//! Built-in weak saliency detectors: pure functions from a color-by-aspect
//! image to a [0, 1] map, behind one interface so externally produced maps
//! can stand in for any of them.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::color::CsasImage;
use crate::tensor::Tensor;

pub trait WeakDetector: Send + Sync {
    fn name(&self) -> &str;
    /// Saliency map in [0, 1], same H x W as the image.
    fn detect(&self, image: &CsasImage) -> Tensor;
}

/// The three bundled detectors.
pub fn builtin_detectors() -> Vec<Box<dyn WeakDetector>> {
    vec![
        Box::new(GlobalColorContrast),
        Box::new(BoundaryBackgroundPrior),
        Box::new(SpectralResidual),
    ]
}

fn normalize01(mut t: Tensor) -> Tensor {
    let (lo, hi) = (t.min(), t.max());
    let span = (hi - lo).max(1e-12);
    for v in t.data_mut() {
        *v = (*v - lo) / span;
    }
    t
}

/// Distance of each pixel's color vector from the global mean color.
pub struct GlobalColorContrast;

impl WeakDetector for GlobalColorContrast {
    fn name(&self) -> &str {
        "global-color-contrast"
    }

    fn detect(&self, image: &CsasImage) -> Tensor {
        let f = image.to_vector_rep();
        let (h, w) = (image.height(), image.width());
        let hw = h * w;
        let mut mean = [0.0; 3];
        for c in 0..3 {
            mean[c] = f.plane(c).iter().sum::<f64>() / hw as f64;
        }
        let mut out = Tensor::zeros(&[h, w]);
        for i in 0..hw {
            let mut d2 = 0.0;
            for c in 0..3 {
                let d = f.plane(c)[i] - mean[c];
                d2 += d * d;
            }
            out.data_mut()[i] = d2.sqrt();
        }
        normalize01(out)
    }
}

/// Distance from the mean color of the two-pixel image boundary, treating
/// the boundary as background.
pub struct BoundaryBackgroundPrior;

impl WeakDetector for BoundaryBackgroundPrior {
    fn name(&self) -> &str {
        "boundary-background-prior"
    }

    fn detect(&self, image: &CsasImage) -> Tensor {
        let f = image.to_vector_rep();
        let (h, w) = (image.height(), image.width());
        let mut mean = [0.0; 3];
        let mut count = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                let ring = y < 2 || y >= h - 2 || x < 2 || x >= w - 2;
                if ring {
                    for c in 0..3 {
                        mean[c] += f.at3(c, y, x);
                    }
                    count += 1.0;
                }
            }
        }
        for m in &mut mean {
            *m /= count.max(1.0);
        }
        let mut out = Tensor::zeros(&[h, w]);
        for y in 0..h {
            for x in 0..w {
                let mut d2 = 0.0;
                for c in 0..3 {
                    let d = f.at3(c, y, x) - mean[c];
                    d2 += d * d;
                }
                out.data_mut()[y * w + x] = d2.sqrt();
            }
        }
        normalize01(out)
    }
}

/// Spectral-residual saliency on the value channel: suppress the smooth part
/// of the log-amplitude spectrum and transform the residual back.
pub struct SpectralResidual;

impl WeakDetector for SpectralResidual {
    fn name(&self) -> &str {
        "spectral-residual"
    }

    fn detect(&self, image: &CsasImage) -> Tensor {
        let (h, w) = (image.height(), image.width());
        let hw = h * w;
        let value = &image.pixels.data()[2 * hw..3 * hw];
        let mut field: Vec<Complex64> =
            value.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft2(&mut field, h, w, false);

        let amplitude: Vec<f64> = field.iter().map(|c| c.norm().max(1e-12)).collect();
        let log_amp: Vec<f64> = amplitude.iter().map(|a| a.ln()).collect();
        // 3x3 box average of the log spectrum (wrapping, the spectrum is periodic)
        let mut smooth = vec![0.0; hw];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let ny = (y + dy).rem_euclid(h as isize) as usize;
                        let nx = (x + dx).rem_euclid(w as isize) as usize;
                        acc += log_amp[ny * w + nx];
                    }
                }
                smooth[y as usize * w + x as usize] = acc / 9.0;
            }
        }
        for (i, c) in field.iter_mut().enumerate() {
            let residual = log_amp[i] - smooth[i];
            let phase = c.arg();
            *c = Complex64::from_polar(residual.exp(), phase);
        }
        fft2(&mut field, h, w, true);
        let mut sal: Vec<f64> = field.iter().map(|c| c.norm_sqr()).collect();

        // small spatial blur stabilizes the map
        let src = sal.clone();
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                            acc += src[ny as usize * w + nx as usize];
                            n += 1.0;
                        }
                    }
                }
                sal[y as usize * w + x as usize] = acc / n;
            }
        }
        normalize01(Tensor::from_vec(&[h, w], sal))
    }
}

fn fft2(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for row in data.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
    if inverse {
        let scale = 1.0 / (h * w) as f64;
        for c in data.iter_mut() {
            *c *= scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::{colorize, ColorMapConfig};
    use crate::scene::{generate_scene, random_target, SceneSpec};
    use crate::seeding::rng_for;

    fn target_scene() -> (CsasImage, crate::scene::GroundTruthMask) {
        let mut rng = rng_for(7, "weak-test");
        let mut spec = SceneSpec::new(77, 32, 32).with_apertures(12);
        spec.targets = vec![random_target(32, 32, &mut rng)];
        let (stack, mask) = generate_scene(&spec).unwrap();
        (colorize(&stack, &ColorMapConfig::default()), mask)
    }

    #[test]
    fn detectors_emit_unit_interval_maps() {
        let (img, _) = target_scene();
        for det in builtin_detectors() {
            let map = det.detect(&img);
            assert_eq!(map.shape(), &[32, 32], "{}", det.name());
            assert!(map.min() >= 0.0 && map.max() <= 1.0, "{}", det.name());
            assert!(map.all_finite());
        }
    }

    #[test]
    fn color_contrast_scores_target_above_background() {
        let (img, mask) = target_scene();
        let map = GlobalColorContrast.detect(&img);
        let mut target_mean = 0.0;
        let mut bg_mean = 0.0;
        let (mut tn, mut bn) = (0.0, 0.0);
        for (i, &m) in mask.data.iter().enumerate() {
            if m == 1 {
                target_mean += map.data()[i];
                tn += 1.0;
            } else {
                bg_mean += map.data()[i];
                bn += 1.0;
            }
        }
        assert!(target_mean / tn > bg_mean / bn);
    }

    #[test]
    fn spectral_residual_is_deterministic() {
        let (img, _) = target_scene();
        let a = SpectralResidual.detect(&img);
        let b = SpectralResidual.detect(&img);
        assert_eq!(a, b);
    }
}
