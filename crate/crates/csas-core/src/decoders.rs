//! Dual decoder branches and the content-gated merge.
//!
//! Both branches share a six-block, thirteen-layer topology of stride-1
//! transposed dilated convolutions with batch normalization and leaky ReLU
//! after every layer; nearest-replication "average unpooling" stages restore
//! full resolution. The unsupervised branch additionally concatenates
//! resampled encoder features at every unpooling stage (never-closed skips)
//! and carries a few extra layers. Branch probabilities come from a softmax
//! head; a learned logistic gate over local feature-similarity statistics
//! blends the two foreground maps, and a final convolution produces the
//! pre-refinement saliency map.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvT2d, Fwd, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Output width of each of the six blocks.
    pub channels: [usize; 6],
    /// Convolution layers per block; sums to 13 for the default topology.
    pub layers_per_block: [usize; 6],
    /// Unpooling (x2 upsampling) after these blocks.
    pub unpool_after: [bool; 6],
    /// Kernel dilation per block, widest at the coarse end.
    pub dilation: [usize; 6],
    pub leaky_relu_slope: f64,
    /// Encoder pool indices (1-based) concatenated at each unpooling stage of
    /// the unsupervised branch.
    pub skip_sources: Vec<usize>,
    /// Extra layers appended to the unsupervised branch before its head.
    pub extra_layers_unsup: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            channels: [64, 64, 32, 32, 16, 16],
            layers_per_block: [2, 2, 2, 2, 2, 3],
            unpool_after: [true, false, true, false, true, false],
            dilation: [4, 2, 2, 1, 1, 1],
            leaky_relu_slope: 0.1,
            skip_sources: vec![2, 1, 1],
            extra_layers_unsup: 2,
        }
    }
}

impl DecoderConfig {
    pub fn tiny(channels: [usize; 6]) -> Self {
        DecoderConfig {
            channels,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let total: usize = self.layers_per_block.iter().sum();
        if total != 13 {
            return Err(Error::Config(format!(
                "decoder must have 13 layers across 6 blocks, got {total}"
            )));
        }
        let unpools = self.unpool_after.iter().filter(|&&u| u).count();
        if self.skip_sources.len() != unpools {
            return Err(Error::Config(format!(
                "{} skip sources for {} unpooling stages",
                self.skip_sources.len(),
                unpools
            )));
        }
        if self.skip_sources.iter().any(|&s| s == 0 || s > 5) {
            return Err(Error::Config("skip sources must be encoder blocks 1..=5".into()));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        Ok(())
    }

    /// Upsampling factor across all unpooling stages.
    pub fn upsample_factor(&self) -> usize {
        1 << self.unpool_after.iter().filter(|&&u| u).count()
    }
}

/// Softmax head output of one branch.
pub struct BranchOutput {
    /// [2, H, W] (background, foreground).
    pub logits: Var,
    /// [2, H, W], per-pixel channel sum 1.
    pub probabilities: Var,
    /// [1, H, W] foreground probability.
    pub foreground: Var,
}

struct DecoderLayer {
    conv: ConvT2d,
    bn: BatchNorm2d,
}

/// One SDN13 decoder branch. With `with_skips` it expects encoder pool
/// tensors and concatenates them after every unpooling stage.
pub struct Decoder {
    pub cfg: DecoderConfig,
    with_skips: bool,
    blocks: Vec<Vec<DecoderLayer>>,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: DecoderConfig,
        in_channels: usize,
        skip_channels: &[usize],
        with_skips: bool,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if with_skips && skip_channels.len() != cfg.skip_sources.len() {
            return Err(Error::Config("skip channel list does not match sources".into()));
        }
        let mut blocks = Vec::with_capacity(6);
        let mut in_c = in_channels;
        let mut stage = 0usize;
        for b in 0..6 {
            let mut layers = Vec::new();
            let width = cfg.channels[b];
            let mut n_layers = cfg.layers_per_block[b];
            if b == 5 {
                n_layers += cfg.extra_layers_unsup * usize::from(with_skips);
            }
            for l in 0..n_layers {
                let last = b == 5 && l == n_layers - 1;
                let out_c = if last { 2 } else { width };
                let name = format!("{prefix}/b{b}/layer{l}");
                let conv = ConvT2d::init(store, &name, in_c, out_c, 3, cfg.dilation[b], rng);
                let bn = BatchNorm2d::init(store, &format!("{name}/bn"), out_c);
                layers.push(DecoderLayer { conv, bn });
                in_c = out_c;
            }
            blocks.push(layers);
            if cfg.unpool_after[b] && with_skips {
                in_c += skip_channels[stage];
                stage += 1;
            }
        }
        Ok(Decoder {
            cfg,
            with_skips,
            blocks,
        })
    }

    /// Run the branch. `skips` must hold one encoder tensor per unpooling
    /// stage when the branch was built with skip connections.
    pub fn forward(&self, f: &mut Fwd, features: Var, skips: &[Var]) -> Result<BranchOutput> {
        if self.with_skips && skips.len() != self.cfg.skip_sources.len() {
            return Err(Error::Config(format!(
                "expected {} skip tensors, got {}",
                self.cfg.skip_sources.len(),
                skips.len()
            )));
        }
        let slope = self.cfg.leaky_relu_slope;
        let mut x = features;
        let mut stage = 0usize;
        for b in 0..6 {
            for layer in &self.blocks[b] {
                let y = layer.conv.forward(f, x);
                let y = layer.bn.forward(f, y);
                x = f.tape.leaky_relu(y, slope);
            }
            if self.cfg.unpool_after[b] {
                x = f.tape.upsample_nearest2(x);
                if self.with_skips {
                    let (h, w) = {
                        let s = f.tape.value(x).shape();
                        (s[1], s[2])
                    };
                    let skip = skips[stage];
                    let same = {
                        let s = f.tape.value(skip).shape();
                        s[1] == h && s[2] == w
                    };
                    let skip = if same {
                        skip
                    } else {
                        f.tape.bilinear_resize(skip, h, w)
                    };
                    x = f.tape.concat_ch(&[x, skip]);
                    stage += 1;
                }
            }
        }
        let logits = x;
        let probabilities = f.tape.softmax_ch(logits);
        let foreground = f.tape.slice_ch(probabilities, 1);
        Ok(BranchOutput {
            logits,
            probabilities,
            foreground,
        })
    }
}

/// Learned content-gated convex merge of the two branch foreground maps,
/// cascaded into a final convolution.
pub struct MergeHead {
    gate: Conv2d,
    final_conv: Conv2d,
    pub window: usize,
}

/// Per-pixel feature-similarity statistics feeding the merge gate: mean
/// squared distance of each pixel's guide vector to its window neighborhood,
/// and the local variance of the value channel.
pub fn merge_gate_stats(guide_vec: &Tensor, window: usize) -> Tensor {
    let (c, h, w) = (guide_vec.shape()[0], guide_vec.shape()[1], guide_vec.shape()[2]);
    let r = (window / 2) as isize;
    let mut out = Tensor::zeros(&[2, h, w]);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut dist_acc = 0.0;
            let mut val_acc = 0.0;
            let mut val_sq = 0.0;
            let mut count = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
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
                    dist_acc += d2;
                    let v = guide_vec.at3(c - 1, ny as usize, nx as usize);
                    val_acc += v;
                    val_sq += v * v;
                    count += 1.0;
                }
            }
            let mean_v = val_acc / count;
            out.set3(0, y as usize, x as usize, dist_acc / count);
            out.set3(1, y as usize, x as usize, (val_sq / count - mean_v * mean_v).max(0.0));
        }
    }
    out
}

impl MergeHead {
    pub fn init(store: &mut ParamStore, prefix: &str, window: usize, rng: &mut ChaCha20Rng) -> Self {
        let gate = Conv2d::init(store, &format!("{prefix}/gate"), 2, 1, 1, 1, 1, rng);
        let final_conv = Conv2d::init(store, &format!("{prefix}/final"), 1, 1, 3, 1, 1, rng);
        // start the cascade near a monotone identity so early training keeps
        // the merged map informative: sigmoid(4 p - 2)
        let w = store.get_mut(&format!("{prefix}/final/w"));
        for v in w.data_mut().iter_mut() {
            *v = 0.0;
        }
        let center = (3 * 3) / 2;
        w.data_mut()[center] = 4.0;
        *store.get_mut(&format!("{prefix}/final/b")) = Tensor::from_vec(&[1], vec![-2.0]);
        MergeHead {
            gate,
            final_conv,
            window,
        }
    }

    /// Gate map `w` in (0, 1) from precomputed statistics.
    pub fn gate(&self, f: &mut Fwd, stats: &Tensor) -> Var {
        let s = f.tape.constant(stats.clone());
        let z = self.gate.forward(f, s);
        f.tape.sigmoid(z)
    }

    /// Convex combination `w * sup + (1 - w) * unsup`.
    pub fn convex(&self, f: &mut Fwd, gate: Var, sup_fg: Var, unsup_fg: Var) -> Var {
        let a = f.tape.mul(gate, sup_fg);
        let one_minus = f.tape.one_minus(gate);
        let b = f.tape.mul(one_minus, unsup_fg);
        f.tape.add(a, b)
    }

    /// Final cascade: one 3x3 convolution on the merged map, squashed back to
    /// a probability.
    pub fn cascade(&self, f: &mut Fwd, merged: Var) -> Var {
        let z = self.final_conv.forward(f, merged);
        f.tape.sigmoid(z)
    }

    /// Full merge: gate from guide statistics, convex blend, final cascade.
    /// Returns (pre-cascade merged map, final map).
    pub fn forward(
        &self,
        f: &mut Fwd,
        guide_vec: &Tensor,
        sup_fg: Var,
        unsup_fg: Var,
    ) -> (Var, Var) {
        let stats = merge_gate_stats(guide_vec, self.window);
        let w = self.gate(f, &stats);
        let merged = self.convex(f, w, sup_fg, unsup_fg);
        let final_map = self.cascade(f, merged);
        (merged, final_map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::Fwd;
    use rand::{Rng, SeedableRng};

    fn tiny() -> DecoderConfig {
        DecoderConfig::tiny([6, 6, 5, 5, 4, 4])
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha20Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn thirteen_layer_count_is_enforced() {
        let mut bad = tiny();
        bad.layers_per_block = [2, 2, 2, 2, 2, 2];
        assert!(bad.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn supervised_branch_restores_input_resolution() {
        let mut rng = ChaCha20Rng::seed_from_u64(20);
        let mut store = ParamStore::new();
        let dec = Decoder::init(&mut store, "sup", tiny(), 7, &[], false, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, false);
        let feats = rand_tensor(&[7, 8, 8], &mut rng);
        let x = f.tape.constant(feats);
        let out = dec.forward(&mut f, x, &[]).unwrap();
        assert_eq!(f.tape.value(out.logits).shape(), &[2, 64, 64]);
        // per-pixel probability normalization
        let p = f.tape.value(out.probabilities);
        for i in 0..64 * 64 {
            let s = p.data()[i] + p.data()[64 * 64 + i];
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_of_equal_logits_is_half() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 2, 2]));
        let p = tape.softmax_ch(z);
        for v in tape.value(p).data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_skips_match_a_no_skip_decoder_with_matching_weights() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let cfg = tiny();
        let dec = Decoder::init(&mut store, "unsup", cfg.clone(), 7, &[3, 3, 3], true, &mut rng)
            .unwrap();
        let feats = rand_tensor(&[7, 4, 4], &mut rng);

        // with-skip forward, skip tensors all zero
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, false);
        let x = f.tape.constant(feats.clone());
        let zero_skips: Vec<_> = (0..3)
            .map(|i| {
                let size = 8 << i;
                f.tape.constant(Tensor::zeros(&[3, size, size]))
            })
            .collect();
        let with_skips = dec.forward(&mut f, x, &zero_skips).unwrap();
        let got = f.tape.value(with_skips.foreground).clone();

        // reference: a no-skip decoder whose weights equal the skip decoder's
        // with the skip input channels dropped (those kernels see zeros only)
        let mut ref_store = ParamStore::new();
        let mut rng2 = ChaCha20Rng::seed_from_u64(99);
        let refd =
            Decoder::init(&mut ref_store, "unsup", cfg, 7, &[0, 0, 0], true, &mut rng2).unwrap();
        let names: Vec<String> = ref_store.names().map(|s| s.to_string()).collect();
        for name in names {
            let dst_shape = ref_store.get(&name).shape().to_vec();
            let src = store.get(&name);
            if src.shape() == dst_shape.as_slice() {
                *ref_store.get_mut(&name) = src.clone();
            } else {
                // ConvT weights [in, out, k, k]: keep the leading non-skip
                // input channels
                let keep = dst_shape[0];
                let (out_c, k) = (dst_shape[1], dst_shape[2]);
                let mut t = Tensor::zeros(&dst_shape);
                for ci in 0..keep {
                    for co in 0..out_c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let v = src.data()
                                    [((ci * out_c + co) * k + ky) * k + kx];
                                t.data_mut()[((ci * out_c + co) * k + ky) * k + kx] = v;
                            }
                        }
                    }
                }
                *ref_store.get_mut(&name) = t;
            }
        }
        let mut tape2 = Tape::new();
        let mut f2 = Fwd::new(&mut tape2, &ref_store, false);
        let x2 = f2.tape.constant(feats);
        let empty_skips: Vec<_> = (0..3)
            .map(|i| {
                let size = 8 << i;
                f2.tape.constant(Tensor::zeros(&[0, size, size]))
            })
            .collect();
        let no_skips = refd.forward(&mut f2, x2, &empty_skips).unwrap();
        let want = f2.tape.value(no_skips.foreground);
        assert!(crate::tensor::max_abs_diff(&got, want) < 1e-9);
    }

    #[test]
    fn missing_skip_tensor_is_an_error() {
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let mut store = ParamStore::new();
        let dec =
            Decoder::init(&mut store, "unsup", tiny(), 7, &[3, 3, 3], true, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, false);
        let x = f.tape.constant(Tensor::zeros(&[7, 4, 4]));
        assert!(dec.forward(&mut f, x, &[]).is_err());
    }

    #[test]
    fn merge_fixed_points_and_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let mut store = ParamStore::new();
        let head = MergeHead::init(&mut store, "merge", 5, &mut rng);
        let guide = rand_tensor(&[3, 8, 8], &mut rng);
        let p = rand_tensor(&[1, 8, 8], &mut rng).map(|v| 0.5 + 0.4 * v);

        // identical branch outputs: convex combination returns them exactly
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, false);
        let a = f.tape.constant(p.clone());
        let b = f.tape.constant(p.clone());
        let stats = merge_gate_stats(&guide.clone(), 5);
        let w = head.gate(&mut f, &stats);
        let merged = head.convex(&mut f, w, a, b);
        assert!(crate::tensor::max_abs_diff(f.tape.value(merged), &p) < 1e-12);

        // w = 1 returns the supervised branch before the final convolution
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, false);
        let sup = rand_tensor(&[1, 8, 8], &mut rng).map(|v| 0.5 + 0.4 * v);
        let uns = rand_tensor(&[1, 8, 8], &mut rng).map(|v| 0.5 + 0.4 * v);
        let sv = f.tape.constant(sup.clone());
        let uv = f.tape.constant(uns.clone());
        let ones = f.tape.constant(Tensor::full(&[1, 8, 8], 1.0));
        let merged = head.convex(&mut f, ones, sv, uv);
        assert!(crate::tensor::max_abs_diff(f.tape.value(merged), &sup) < 1e-12);

        // fixed random gate: brute-force convex arithmetic oracle
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, false);
        let wmap = rand_tensor(&[1, 8, 8], &mut rng).map(|v| 0.5 + 0.49 * v);
        let sv = f.tape.constant(sup.clone());
        let uv = f.tape.constant(uns.clone());
        let wv = f.tape.constant(wmap.clone());
        let merged = head.convex(&mut f, wv, sv, uv);
        let got = f.tape.value(merged);
        for i in 0..64 {
            let want = wmap.data()[i] * sup.data()[i] + (1.0 - wmap.data()[i]) * uns.data()[i];
            assert!((got.data()[i] - want).abs() < 1e-6);
            // merged map bounded by the branch min/max
            let lo = sup.data()[i].min(uns.data()[i]) - 1e-12;
            let hi = sup.data()[i].max(uns.data()[i]) + 1e-12;
            assert!(got.data()[i] >= lo && got.data()[i] <= hi);
        }
    }
}
