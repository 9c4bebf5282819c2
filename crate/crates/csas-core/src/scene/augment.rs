//! Geometric augmentation applied jointly to an image and its mask.
//!
//! Rotations act on a color-by-aspect image in two coupled ways: the pixels
//! rotate spatially and the hue wheel shifts by the same angle, mirroring how
//! an actual scene rotation would change every scattering direction. Images
//! are resampled bilinearly in the hue-direction vector representation so
//! hue periodicity survives interpolation; masks use nearest-neighbor
//! sampling and stay binary.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::color::{hue_shift, CsasImage};
use crate::error::{Error, Result};
use crate::scene::GroundTruthMask;
use crate::tensor::Tensor;

/// Similarity transform about the image center: scale, then rotate, then
/// translate (rows/cols, pixels).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricTransform {
    pub translate: (f64, f64),
    pub rotation_deg: f64,
    pub scale: f64,
}

impl GeometricTransform {
    pub fn identity() -> Self {
        GeometricTransform {
            translate: (0.0, 0.0),
            rotation_deg: 0.0,
            scale: 1.0,
        }
    }

    pub fn translation(dy: f64, dx: f64) -> Self {
        GeometricTransform {
            translate: (dy, dx),
            ..Self::identity()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.translate == (0.0, 0.0) && self.rotation_deg == 0.0 && self.scale == 1.0
    }

    /// Exact inverse within the same parameterization.
    pub fn inverse(&self) -> Self {
        let rot = (-self.rotation_deg).to_radians();
        let (c, s) = (rot.cos(), rot.sin());
        let (ty, tx) = self.translate;
        // forward: q = R S (p - center) + center + t
        // inverse: p = R' S' (q - center) + center + t',  t' = -R' t / scale
        let inv_scale = 1.0 / self.scale;
        let tx2 = -(c * tx + s * ty) * inv_scale;
        let ty2 = -(-s * tx + c * ty) * inv_scale;
        GeometricTransform {
            translate: (ty2, tx2),
            rotation_deg: -self.rotation_deg,
            scale: inv_scale,
        }
    }
}

/// Enabled transforms and their ranges; all default to off.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub max_translation: f64,
    pub max_rotation_deg: f64,
    /// (lo, hi) multiplicative scale range; (1, 1) disables scaling.
    pub scale_range: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            max_translation: 0.0,
            max_rotation_deg: 0.0,
            scale_range: (1.0, 1.0),
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.scale_range.0 <= 0.0 || self.scale_range.1 < self.scale_range.0 {
            return Err(Error::Config("augment scale range must be positive".into()));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha20Rng) -> GeometricTransform {
        let t = self.max_translation;
        let translate = if t > 0.0 {
            (rng.gen_range(-t..=t).round(), rng.gen_range(-t..=t).round())
        } else {
            (0.0, 0.0)
        };
        let rotation_deg = if self.max_rotation_deg > 0.0 {
            rng.gen_range(-self.max_rotation_deg..=self.max_rotation_deg)
        } else {
            0.0
        };
        let scale = if self.scale_range.0 < self.scale_range.1 {
            rng.gen_range(self.scale_range.0..=self.scale_range.1)
        } else {
            self.scale_range.0
        };
        GeometricTransform {
            translate,
            rotation_deg,
            scale,
        }
    }
}

/// Apply the same similarity transform to an image and its mask. The image
/// additionally receives the hue-wheel shift coupled to the rotation.
pub fn apply_transform(
    image: &CsasImage,
    mask: &GroundTruthMask,
    t: &GeometricTransform,
) -> Result<(CsasImage, GroundTruthMask)> {
    if t.scale <= 0.0 {
        return Err(Error::Config("scale factor must be positive".into()));
    }
    let (h, w) = (image.height(), image.width());
    assert_eq!((mask.height, mask.width), (h, w), "image/mask size mismatch");
    if t.is_identity() {
        return Ok((image.clone(), mask.clone()));
    }

    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let rot = t.rotation_deg.to_radians();
    let (c, s) = (rot.cos(), rot.sin());

    // source coordinate of an output pixel (inverse mapping)
    let src = |y: usize, x: usize| -> (f64, f64) {
        let dy = y as f64 - cy - t.translate.0;
        let dx = x as f64 - cx - t.translate.1;
        // inverse rotation, then inverse scale
        let ly = (-s * dx + c * dy) / t.scale;
        let lx = (c * dx + s * dy) / t.scale;
        (cy + ly, cx + lx)
    };

    let vec_rep = image.to_vector_rep();
    let mut out_vec = Tensor::zeros(&[3, h, w]);
    let mut out_mask = GroundTruthMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            for ch in 0..3 {
                let v = crate::autodiff::sample_bilinear_zero(vec_rep.plane(ch), h, w, sy, sx);
                out_vec.set3(ch, y, x, v);
            }
            let ny = sy.round() as isize;
            let nx = sx.round() as isize;
            if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                out_mask.data[y * w + x] = mask.data[ny as usize * w + nx as usize];
            }
        }
    }
    let rotated = CsasImage::from_vector_rep(&out_vec);
    // joint hue-wheel shift: scene rotation by +r moves every scattering
    // direction by +r, which the default anti-rotation colormap renders as a
    // hue decrease of r/360
    let out_img = if t.rotation_deg != 0.0 {
        hue_shift(&rotated, -t.rotation_deg / 360.0)
    } else {
        rotated
    };
    Ok((out_img, out_mask))
}

/// Sample a transform from the policy and apply it.
pub fn augment(
    image: &CsasImage,
    mask: &GroundTruthMask,
    policy: &AugmentPolicy,
    rng: &mut ChaCha20Rng,
) -> Result<(CsasImage, GroundTruthMask)> {
    policy.validate()?;
    let t = policy.sample(rng);
    apply_transform(image, mask, &t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::{colorize, ColorMapConfig};
    use crate::scene::{generate_scene, SceneSpec, TargetShape, TargetSpec};
    use rand::SeedableRng;

    fn scene() -> (CsasImage, GroundTruthMask) {
        let mut spec = SceneSpec::new(13, 24, 24).with_apertures(8);
        spec.targets.push(TargetSpec {
            shape: TargetShape::Rectangle { half_w: 4.0, half_h: 2.0 },
            center: (12.0, 12.0),
            rotation_deg: 0.0,
            scale: 1.0,
            facets: vec![crate::scene::Facet {
                gain: 4.0,
                band_center_deg: 30.0,
                band_width_deg: 90.0,
            }],
            burial_fraction: 0.0,
        });
        let (stack, mask) = generate_scene(&spec).unwrap();
        (colorize(&stack, &ColorMapConfig::default()), mask)
    }

    #[test]
    fn empty_policy_is_identity() {
        let (img, mask) = scene();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (img2, mask2) = augment(&img, &mask, &AugmentPolicy::default(), &mut rng).unwrap();
        assert_eq!(img2.pixels, img.pixels);
        assert_eq!(mask2, mask);
    }

    #[test]
    fn integer_translation_shifts_mask_centroid_exactly() {
        let (img, mask) = scene();
        let t = GeometricTransform::translation(5.0, 0.0);
        let (_, mask2) = apply_transform(&img, &mask, &t).unwrap();
        let centroid = |m: &GroundTruthMask| -> (f64, f64) {
            let mut cy = 0.0;
            let mut cx = 0.0;
            let mut n = 0.0;
            for y in 0..m.height {
                for x in 0..m.width {
                    if m.data[y * m.width + x] == 1 {
                        cy += y as f64;
                        cx += x as f64;
                        n += 1.0;
                    }
                }
            }
            (cy / n, cx / n)
        };
        let (cy0, cx0) = centroid(&mask);
        let (cy1, cx1) = centroid(&mask2);
        assert!((cy1 - cy0 - 5.0).abs() < 1e-9);
        assert!((cx1 - cx0).abs() < 1e-9);
    }

    #[test]
    fn mask_stays_binary_under_rotation_and_scale() {
        let (img, mask) = scene();
        let t = GeometricTransform {
            translate: (1.0, -2.0),
            rotation_deg: 33.0,
            scale: 1.2,
        };
        let (_, mask2) = apply_transform(&img, &mask, &t).unwrap();
        assert!(mask2.data.iter().all(|&v| v == 0 || v == 1));
    }

    #[test]
    fn ninety_degree_rotation_matches_array_rotation_oracle() {
        let (img, mask) = scene();
        let t = GeometricTransform {
            translate: (0.0, 0.0),
            rotation_deg: 90.0,
            scale: 1.0,
        };
        let (_, got) = apply_transform(&img, &mask, &t).unwrap();
        // oracle: exact array rotation of a square mask (index permutation)
        let (h, w) = (mask.height, mask.width);
        assert_eq!(h, w);
        let mut want = GroundTruthMask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                want.data[y * w + x] = mask.data[(h - 1 - x) * w + y];
            }
        }
        assert_eq!(got.data, want.data);
    }

    #[test]
    fn inverse_translation_restores_mask() {
        let (img, mask) = scene();
        let t = GeometricTransform::translation(3.0, -4.0);
        let (img2, mask2) = apply_transform(&img, &mask, &t).unwrap();
        let (_, mask3) = apply_transform(&img2, &mask2, &t.inverse()).unwrap();
        assert_eq!(mask3.data, mask.data);
    }

    #[test]
    fn nonpositive_scale_is_rejected() {
        let (img, mask) = scene();
        let t = GeometricTransform {
            translate: (0.0, 0.0),
            rotation_deg: 0.0,
            scale: 0.0,
        };
        assert!(apply_transform(&img, &mask, &t).is_err());
        let bad = AugmentPolicy {
            scale_range: (0.0, 1.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
