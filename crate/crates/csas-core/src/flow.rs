//! Reduced pyramidal optical-flow network and multi-survey aggregation.
//!
//! A shared convolutional pyramid embeds both images; flow is estimated
//! coarse to fine. Each level warps the second image's features by the
//! upsampled flow, builds a local correlation cost volume, predicts a
//! residual flow, then runs a sub-pixel refinement block and a feature-driven
//! local smoothing that averages the flow where features agree without
//! blurring across feature edges.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, WindowWeights};
use crate::color::CsasImage;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Fwd, ParamStore};
use crate::scene::augment::GeometricTransform;
use crate::tensor::Tensor;

/// Dense per-pixel displacements: channel 0 is the column shift `u`,
/// channel 1 the row shift `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub flow: Tensor,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            flow: Tensor::zeros(&[2, h, w]),
        }
    }

    pub fn height(&self) -> usize {
        self.flow.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.flow.shape()[2]
    }

    /// Largest displacement magnitude.
    pub fn max_magnitude(&self) -> f64 {
        let hw = self.height() * self.width();
        (0..hw)
            .map(|i| {
                let u = self.flow.data()[i];
                let v = self.flow.data()[hw + i];
                (u * u + v * v).sqrt()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub pyramid_levels: usize,
    /// Feature channels per level, fine to coarse.
    pub feature_channels: Vec<usize>,
    /// Cost-volume radius per level, fine to coarse.
    pub max_displacement: Vec<usize>,
    /// Extra convolutions between the cost volume and the residual-flow head.
    pub extra_interlevel_convs: usize,
    pub decoder_hidden: usize,
    pub leaky_relu_slope: f64,
    /// Feature bandwidth of the flow-smoothing kernel.
    pub smoothing_sigma: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            pyramid_levels: 3,
            feature_channels: vec![8, 16, 24],
            max_displacement: vec![4, 4, 4],
            extra_interlevel_convs: 2,
            decoder_hidden: 20,
            leaky_relu_slope: 0.1,
            smoothing_sigma: 1.0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels < 2 {
            return Err(Error::Config("flow pyramid needs at least two levels".into()));
        }
        if self.feature_channels.len() != self.pyramid_levels
            || self.max_displacement.len() != self.pyramid_levels
        {
            return Err(Error::Config(
                "feature_channels and max_displacement must list one entry per level".into(),
            ));
        }
        if self.max_displacement.iter().any(|&r| r == 0) {
            return Err(Error::Config("cost-volume radius must be at least 1".into()));
        }
        Ok(())
    }

    pub fn scale_factor(&self) -> usize {
        1 << self.pyramid_levels
    }
}

struct LevelBlock {
    match_convs: Vec<Conv2d>,
    refine_convs: Vec<Conv2d>,
}

pub struct FlowNet {
    pub cfg: FlowConfig,
    feat_convs: Vec<[Conv2d; 2]>,
    levels: Vec<LevelBlock>,
}

impl FlowNet {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: FlowConfig,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut feat_convs = Vec::with_capacity(cfg.pyramid_levels);
        let mut in_c = 3;
        for l in 0..cfg.pyramid_levels {
            let out_c = cfg.feature_channels[l];
            let c0 = Conv2d::init(store, &format!("{prefix}/feat{l}/conv0"), in_c, out_c, 3, 2, 1, rng);
            let c1 = Conv2d::init(store, &format!("{prefix}/feat{l}/conv1"), out_c, out_c, 3, 1, 1, rng);
            feat_convs.push([c0, c1]);
            in_c = out_c;
        }
        let mut levels = Vec::with_capacity(cfg.pyramid_levels);
        for l in 0..cfg.pyramid_levels {
            let r = cfg.max_displacement[l];
            let cost_ch = (2 * r + 1) * (2 * r + 1);
            let fc = cfg.feature_channels[l];
            let hidden = cfg.decoder_hidden;
            let mut match_convs = Vec::new();
            let mut in_ch = cost_ch + fc + 2;
            match_convs.push(Conv2d::init(
                store,
                &format!("{prefix}/dec{l}/match0"),
                in_ch,
                hidden,
                3,
                1,
                1,
                rng,
            ));
            in_ch = hidden;
            for e in 0..cfg.extra_interlevel_convs {
                match_convs.push(Conv2d::init(
                    store,
                    &format!("{prefix}/dec{l}/extra{e}"),
                    in_ch,
                    hidden / 2,
                    3,
                    1,
                    1,
                    rng,
                ));
                in_ch = hidden / 2;
            }
            match_convs.push(Conv2d::init(
                store,
                &format!("{prefix}/dec{l}/flow"),
                in_ch,
                2,
                3,
                1,
                1,
                rng,
            ));
            // sub-pixel refinement block on [features_a, warped_b, flow]
            let refine_in = 2 * fc + 2;
            let refine_convs = vec![
                Conv2d::init(
                    store,
                    &format!("{prefix}/dec{l}/refine0"),
                    refine_in,
                    hidden / 2,
                    3,
                    1,
                    1,
                    rng,
                ),
                Conv2d::init(
                    store,
                    &format!("{prefix}/dec{l}/refine1"),
                    hidden / 2,
                    2,
                    3,
                    1,
                    1,
                    rng,
                ),
            ];
            levels.push(LevelBlock {
                match_convs,
                refine_convs,
            });
        }
        Ok(FlowNet {
            cfg,
            feat_convs,
            levels,
        })
    }

    fn pyramid(&self, f: &mut Fwd, image: Var) -> Vec<Var> {
        let slope = self.cfg.leaky_relu_slope;
        let mut out = Vec::with_capacity(self.cfg.pyramid_levels);
        let mut x = image;
        for convs in &self.feat_convs {
            let y = convs[0].forward(f, x);
            let y = f.tape.leaky_relu(y, slope);
            let y = convs[1].forward(f, y);
            x = f.tape.leaky_relu(y, slope);
            out.push(x);
        }
        out
    }

    /// Coarse-to-fine flow estimation. Returns the per-level flows (coarse
    /// first, in that level's pixel units) and the final full-resolution
    /// field.
    pub fn forward(&self, f: &mut Fwd, img_a: Var, img_b: Var) -> Result<(Vec<Var>, Var)> {
        let (h, w) = {
            let s = f.tape.value(img_a).shape();
            (s[1], s[2])
        };
        if f.tape.value(img_b).shape() != f.tape.value(img_a).shape() {
            return Err(Error::Shape("flow inputs must share dimensions".into()));
        }
        let scale = self.cfg.scale_factor();
        if h % scale != 0 || w % scale != 0 {
            return Err(Error::Shape(format!(
                "flow input {h}x{w} must be divisible by {scale}"
            )));
        }
        let slope = self.cfg.leaky_relu_slope;
        let feats_a = self.pyramid(f, img_a);
        let feats_b = self.pyramid(f, img_b);

        let mut level_flows = Vec::with_capacity(self.cfg.pyramid_levels);
        let mut flow: Option<Var> = None;
        for l in (0..self.cfg.pyramid_levels).rev() {
            let fa = feats_a[l];
            let fb = feats_b[l];
            let (lh, lw) = {
                let s = f.tape.value(fa).shape();
                (s[1], s[2])
            };
            let up_flow = match flow {
                Some(prev) => {
                    let up = f.tape.bilinear_resize(prev, lh, lw);
                    f.tape.mul_scalar(up, 2.0)
                }
                None => f.tape.constant(Tensor::zeros(&[2, lh, lw])),
            };
            let warped_b = f.tape.warp(fb, up_flow);
            let cost = f.tape.correlation(fa, warped_b, self.cfg.max_displacement[l]);
            let mut x = f.tape.concat_ch(&[cost, fa, up_flow]);
            let block = &self.levels[l];
            let n = block.match_convs.len();
            for (i, conv) in block.match_convs.iter().enumerate() {
                x = conv.forward(f, x);
                if i + 1 < n {
                    x = f.tape.leaky_relu(x, slope);
                }
            }
            let mut level_flow = f.tape.add(up_flow, x);

            // sub-pixel refinement
            let warped_b2 = f.tape.warp(fb, level_flow);
            let mut r = f.tape.concat_ch(&[fa, warped_b2, level_flow]);
            r = block.refine_convs[0].forward(f, r);
            r = f.tape.leaky_relu(r, slope);
            let delta = block.refine_convs[1].forward(f, r);
            level_flow = f.tape.add(level_flow, delta);

            // feature-driven local smoothing (weights detached from the tape)
            let weights = smoothing_weights(
                f.tape.value(fa),
                self.cfg.smoothing_sigma,
            );
            level_flow = f.tape.window_average(level_flow, weights);

            level_flows.push(level_flow);
            flow = Some(level_flow);
        }
        let finest = flow.expect("at least one level");
        let up = f.tape.bilinear_resize(finest, h, w);
        let full = f.tape.mul_scalar(up, 2.0);
        Ok((level_flows, full))
    }

    /// Inference wrapper on plain images.
    pub fn estimate(
        &self,
        store: &ParamStore,
        img_a: &CsasImage,
        img_b: &CsasImage,
    ) -> Result<FlowField> {
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, store, false);
        let a = f.tape.constant(img_a.to_vector_rep());
        let b = f.tape.constant(img_b.to_vector_rep());
        let (_, full) = self.forward(&mut f, a, b)?;
        Ok(FlowField {
            flow: f.tape.value(full).clone(),
        })
    }

    /// Multi-scale endpoint-error training loss against a ground-truth field
    /// at full resolution. Level weights follow the coarse-heavy schedule
    /// (0.32, 0.08, 0.02).
    pub fn loss(&self, f: &mut Fwd, level_flows: &[Var], gt_full: &Tensor) -> Var {
        let weights = [0.32, 0.08, 0.02];
        let mut total: Option<Var> = None;
        // level_flows are coarse-first; level l sits at scale 2^(l+1)
        for (i, &lf) in level_flows.iter().enumerate() {
            let level = self.cfg.pyramid_levels - 1 - i; // pyramid index
            let factor = 1 << (level + 1);
            let gt = downsample_flow(gt_full, factor);
            let gt_v = f.tape.constant(gt);
            let diff = f.tape.sub(lf, gt_v);
            let sq = f.tape.mul(diff, diff);
            let du2 = f.tape.slice_ch(sq, 0);
            let dv2 = f.tape.slice_ch(sq, 1);
            let mag2 = f.tape.add(du2, dv2);
            let safe = f.tape.add_scalar(mag2, 1e-8);
            let epe = f.tape.sqrt(safe);
            let mean = f.tape.mean_all(epe);
            let w = weights.get(i).copied().unwrap_or(0.02);
            let term = f.tape.mul_scalar(mean, w);
            total = Some(match total {
                Some(t) => f.tape.add(t, term),
                None => term,
            });
        }
        total.expect("at least one level")
    }
}

/// Average-pool a full-resolution flow field down by `factor` and rescale the
/// displacements into the coarse level's pixel units.
pub fn downsample_flow(flow: &Tensor, factor: usize) -> Tensor {
    let (h, w) = (flow.shape()[1], flow.shape()[2]);
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Tensor::zeros(&[2, oh, ow]);
    for c in 0..2 {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += flow.at3(c, oy * factor + dy, ox * factor + dx);
                    }
                }
                out.set3(c, oy, ox, acc / (factor * factor) as f64 / factor as f64);
            }
        }
    }
    out
}

/// 3x3 feature-driven smoothing weights (center included, normalized).
fn smoothing_weights(features: &Tensor, sigma: f64) -> Arc<WindowWeights> {
    let (c, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let win = 3usize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut weights = vec![0.0; h * w * win * win];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let base = ((y as usize * w + x as usize) * win) * win;
            let mut total = 0.0;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                        continue;
                    }
                    let mut d2 = 0.0;
                    for ci in 0..c {
                        let a = features.at3(ci, y as usize, x as usize);
                        let b = features.at3(ci, ny as usize, nx as usize);
                        d2 += (a - b) * (a - b);
                    }
                    let wv = (-d2 * inv).exp();
                    weights[base + ((dy + 1) as usize) * win + (dx + 1) as usize] = wv;
                    total += wv;
                }
            }
            for k in 0..win * win {
                weights[base + k] /= total;
            }
        }
    }
    Arc::new(WindowWeights::new(win, h, w, weights))
}

/// Bilinear backward warp of a plain tensor by a flow field.
pub fn warp_tensor(map: &Tensor, flow: &FlowField) -> Tensor {
    let mut tape = Tape::new();
    let m = tape.constant(map.clone());
    let fl = tape.constant(flow.flow.clone());
    let out = tape.warp(m, fl);
    tape.value(out).clone()
}

/// Per-pixel validity of a backward warp: true where the sample position
/// falls fully inside the source image.
pub fn warp_validity(flow: &FlowField) -> Vec<bool> {
    let (h, w) = (flow.height(), flow.width());
    let hw = h * w;
    let mut valid = vec![false; hw];
    for y in 0..h {
        for x in 0..w {
            let sx = x as f64 + flow.flow.data()[y * w + x];
            let sy = y as f64 + flow.flow.data()[hw + y * w + x];
            valid[y * w + x] =
                sx >= 0.0 && sx <= (w - 1) as f64 && sy >= 0.0 && sy <= (h - 1) as f64;
        }
    }
    valid
}

/// Validity-masked convex aggregation of saliency maps warped into the
/// reference frame. A learned logistic gate over local feature-similarity
/// statistics of the guide (the same mechanism the branch merge uses,
/// spread across N inputs) blends the reference map with the multi-survey
/// consensus; pixels with no valid warped sample keep the reference value.
pub struct Aggregator {
    gate: Conv2d,
    pub window: usize,
}

impl Aggregator {
    pub fn init(store: &mut ParamStore, prefix: &str, rng: &mut ChaCha20Rng) -> Self {
        let gate = Conv2d::init(store, &format!("{prefix}/gate"), 2, 1, 1, 1, 1, rng);
        // bias toward trusting the consensus until trained otherwise
        *store.get_mut(&format!("{prefix}/gate/b")) = Tensor::from_vec(&[1], vec![2.0]);
        Aggregator { gate, window: 5 }
    }

    /// `maps[0]` is the reference map (zero flow); `flows[i]` aligns
    /// `maps[i]` into the reference frame.
    pub fn aggregate(
        &self,
        store: &ParamStore,
        maps: &[Tensor],
        flows: &[FlowField],
        guide: &CsasImage,
    ) -> Result<Tensor> {
        if maps.is_empty() {
            return Err(Error::Config("aggregation needs at least one map".into()));
        }
        if maps.len() != flows.len() {
            return Err(Error::Config("one flow required per map".into()));
        }
        let (h, w) = (maps[0].shape()[0], maps[0].shape()[1]);
        let hw = h * w;
        let mut consensus = vec![0.0; hw];
        let mut counts = vec![0.0; hw];
        for (map, flow) in maps.iter().zip(flows) {
            let warped = warp_tensor(&map.reshape(&[1, h, w])?, flow);
            let valid = warp_validity(flow);
            for i in 0..hw {
                if valid[i] {
                    consensus[i] += warped.data()[i];
                    counts[i] += 1.0;
                }
            }
        }
        let stats = crate::decoders::merge_gate_stats(&guide.to_vector_rep(), self.window);
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, store, false);
        let s = f.tape.constant(stats);
        let z = self.gate.forward(&mut f, s);
        let g = f.tape.sigmoid(z);
        let gate = f.tape.value(g).clone();

        let reference = &maps[0];
        let mut out = Tensor::zeros(&[h, w]);
        for i in 0..hw {
            let r = reference.data()[i];
            let v = if counts[i] > 0.0 {
                let mean = consensus[i] / counts[i];
                let gv = gate.data()[i];
                (1.0 - gv) * r + gv * mean
            } else {
                r
            };
            out.data_mut()[i] = v.clamp(0.0, 1.0);
        }
        Ok(out)
    }
}

/// Plain validity-masked mean of warped maps (the ungated consensus).
pub fn aggregate_uniform(maps: &[Tensor], flows: &[FlowField]) -> Result<Tensor> {
    if maps.is_empty() || maps.len() != flows.len() {
        return Err(Error::Config("aggregation needs matching maps and flows".into()));
    }
    let (h, w) = (maps[0].shape()[0], maps[0].shape()[1]);
    let hw = h * w;
    let mut acc = vec![0.0; hw];
    let mut counts = vec![0.0; hw];
    for (map, flow) in maps.iter().zip(flows) {
        let warped = warp_tensor(&map.reshape(&[1, h, w])?, flow);
        let valid = warp_validity(flow);
        for i in 0..hw {
            if valid[i] {
                acc[i] += warped.data()[i];
                counts[i] += 1.0;
            }
        }
    }
    let reference = &maps[0];
    let data = (0..hw)
        .map(|i| {
            if counts[i] > 0.0 {
                (acc[i] / counts[i]).clamp(0.0, 1.0)
            } else {
                reference.data()[i]
            }
        })
        .collect();
    Ok(Tensor::from_vec(&[h, w], data))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FlowMetrics {
    pub aee: f64,
    pub aie: f64,
}

/// Average endpoint error and average interpolation error. The latter is the
/// RMS difference between the second image warped by the true field and by
/// the predicted field (value channel).
pub fn flow_metrics(
    pred: &FlowField,
    truth: &FlowField,
    img_pair: Option<(&CsasImage, &CsasImage)>,
) -> FlowMetrics {
    assert_eq!(pred.flow.shape(), truth.flow.shape(), "flow shape mismatch");
    let (h, w) = (pred.height(), pred.width());
    let hw = h * w;
    let mut aee = 0.0;
    for i in 0..hw {
        let du = pred.flow.data()[i] - truth.flow.data()[i];
        let dv = pred.flow.data()[hw + i] - truth.flow.data()[hw + i];
        aee += (du * du + dv * dv).sqrt();
    }
    aee /= hw as f64;

    let aie = match img_pair {
        Some((_, img_b)) => {
            let value = Tensor::from_vec(
                &[1, h, w],
                img_b.pixels.data()[2 * hw..3 * hw].to_vec(),
            );
            let by_truth = warp_tensor(&value, truth);
            let by_pred = warp_tensor(&value, pred);
            let mse = by_truth
                .data()
                .iter()
                .zip(by_pred.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / hw as f64;
            mse.sqrt()
        }
        None => 0.0,
    };
    FlowMetrics { aee, aie }
}

/// One synthetic training pair: `img_a` is `img_b` pulled back through a
/// known similarity-plus-deformation field, so `warp(img_b, flow) = img_a`
/// and `flow` is the exact ground truth for `estimate_flow(img_a, img_b)`.
pub struct FlowPair {
    pub img_a: CsasImage,
    pub img_b: CsasImage,
    pub flow: FlowField,
}

/// Build the ground-truth field of a similarity transform about the image
/// center plus a smooth random deformation, capped at `max_disp` pixels.
pub fn synthetic_flow_field(
    h: usize,
    w: usize,
    max_disp: f64,
    rng: &mut ChaCha20Rng,
) -> FlowField {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let t = GeometricTransform {
        translate: (rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)),
        rotation_deg: rng.gen_range(-4.0..4.0),
        scale: rng.gen_range(0.96..1.04),
    };
    let rot = t.rotation_deg.to_radians();
    let (c, s) = (rot.cos(), rot.sin());

    // smooth deformation: a coarse random grid, bilinearly upsampled
    let gsize = 4usize;
    let amp = 1.0;
    let grid_u: Vec<f64> = (0..gsize * gsize).map(|_| rng.gen_range(-amp..amp)).collect();
    let grid_v: Vec<f64> = (0..gsize * gsize).map(|_| rng.gen_range(-amp..amp)).collect();
    let sample_grid = |grid: &[f64], y: usize, x: usize| -> f64 {
        let gy = y as f64 / (h - 1) as f64 * (gsize - 1) as f64;
        let gx = x as f64 / (w - 1) as f64 * (gsize - 1) as f64;
        let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(gsize - 1), (x0 + 1).min(gsize - 1));
        let (wy, wx) = (gy - y0 as f64, gx - x0 as f64);
        grid[y0 * gsize + x0] * (1.0 - wy) * (1.0 - wx)
            + grid[y0 * gsize + x1] * (1.0 - wy) * wx
            + grid[y1 * gsize + x0] * wy * (1.0 - wx)
            + grid[y1 * gsize + x1] * wy * wx
    };

    let mut flow = Tensor::zeros(&[2, h, w]);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            // target position under the similarity transform
            let ty = cy + t.scale * (s * dx + c * dy) + t.translate.0;
            let tx = cx + t.scale * (c * dx - s * dy) + t.translate.1;
            let mut u = tx - x as f64 + sample_grid(&grid_u, y, x);
            let mut v = ty - y as f64 + sample_grid(&grid_v, y, x);
            let mag = (u * u + v * v).sqrt();
            if mag > max_disp {
                u *= max_disp / mag;
                v *= max_disp / mag;
            }
            flow.set3(0, y, x, u);
            flow.set3(1, y, x, v);
        }
    }
    FlowField { flow }
}

/// Synthesize a training pair from a base image.
pub fn synthetic_pair(base: &CsasImage, max_disp: f64, rng: &mut ChaCha20Rng) -> FlowPair {
    let (h, w) = (base.height(), base.width());
    let flow = synthetic_flow_field(h, w, max_disp, rng);
    let vec_b = base.to_vector_rep();
    let warped = warp_tensor(&vec_b, &flow);
    FlowPair {
        img_a: CsasImage::from_vector_rep(&warped),
        img_b: base.clone(),
        flow,
    }
}
