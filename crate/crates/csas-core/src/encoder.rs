//! Multi-scale contrast feature extractor: a VGG13-style backbone with
//! average pooling, side saliency heads on the first four pooling outputs,
//! stride-1 final pools and dilated kernels in the last blocks.
//!
//! Five blocks of two 3x3 convolutions each (leaky ReLU), pooled after every
//! block; pools four and five keep stride 1 so the backbone stays at 1/8
//! resolution, with dilation widening the deep kernels in exchange. Each of
//! the first four pooling outputs feeds a three-layer side head whose last
//! layer has a single-channel kernel; the four side maps are resampled to the
//! backbone scale and stacked with the block-five output.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Fwd, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub base_channels: [usize; 5],
    pub pool_strides: [usize; 5],
    pub dilation: [usize; 5],
    pub leaky_relu_slope: f64,
    /// Hidden width of the side saliency heads.
    pub side_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            base_channels: [16, 32, 64, 64, 64],
            pool_strides: [2, 2, 2, 1, 1],
            dilation: [1, 1, 1, 2, 4],
            leaky_relu_slope: 0.1,
            side_hidden: 8,
        }
    }
}

impl EncoderConfig {
    /// Narrow widths for fast CPU experiments and tests.
    pub fn tiny(base: [usize; 5], side_hidden: usize) -> Self {
        EncoderConfig {
            base_channels: base,
            side_hidden,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_strides[3] != 1 || self.pool_strides[4] != 1 {
            return Err(Error::Config("the last two pool strides must be 1".into()));
        }
        for (i, &s) in self.pool_strides.iter().enumerate() {
            if s != 1 && s != 2 {
                return Err(Error::Config(format!("pool stride {s} at block {i} unsupported")));
            }
        }
        // a removed pool stride must be answered by doubled dilation in the
        // block that follows it
        for i in 0..4 {
            if self.pool_strides[i] == 1 && self.dilation[i + 1] != 2 * self.dilation[i] {
                return Err(Error::Config(format!(
                    "pool {} has stride 1 but block {} dilation does not double",
                    i + 1,
                    i + 2
                )));
            }
        }
        if self.base_channels.iter().any(|&c| c == 0) || self.side_hidden == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    /// Total downsampling factor of the backbone (8 for the default strides).
    pub fn scale_factor(&self) -> usize {
        self.pool_strides.iter().product()
    }
}

/// Encoder feature bundle produced by one forward pass.
pub struct EncoderOut {
    /// Block-5 output after its pool, at 1/8 resolution.
    pub backbone: Var,
    /// Single-channel side saliency maps at their native scales
    /// (H/2, H/4, H/8, H/8).
    pub side_native: Vec<Var>,
    /// Backbone concatenated with the four side maps resampled to 1/8.
    pub stacked: Var,
    /// Pool outputs of blocks 1..5 (skip-connection sources).
    pub pools: Vec<Var>,
    /// Pre-pool block outputs (activation export, skip sources).
    pub blocks_out: Vec<Var>,
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    blocks: Vec<[Conv2d; 2]>,
    side_heads: Vec<[Conv2d; 3]>,
}

impl Encoder {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: EncoderConfig,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(5);
        let mut in_c = cfg.in_channels;
        for b in 0..5 {
            let out_c = cfg.base_channels[b];
            let d = cfg.dilation[b];
            let c0 = Conv2d::init(store, &format!("{prefix}/b{b}/conv0"), in_c, out_c, 3, 1, d, rng);
            let c1 = Conv2d::init(store, &format!("{prefix}/b{b}/conv1"), out_c, out_c, 3, 1, d, rng);
            blocks.push([c0, c1]);
            in_c = out_c;
        }
        let mut side_heads = Vec::with_capacity(4);
        for b in 0..4 {
            let in_c = cfg.base_channels[b];
            let s = cfg.side_hidden;
            let h0 = Conv2d::init(store, &format!("{prefix}/side{b}/conv0"), in_c, s, 3, 1, 1, rng);
            let h1 = Conv2d::init(store, &format!("{prefix}/side{b}/conv1"), s, s, 3, 1, 1, rng);
            let h2 = Conv2d::init(store, &format!("{prefix}/side{b}/conv2"), s, 1, 3, 1, 1, rng);
            side_heads.push([h0, h1, h2]);
        }
        Ok(Encoder {
            cfg,
            blocks,
            side_heads,
        })
    }

    /// Number of channels in the stacked bundle.
    pub fn stacked_channels(&self) -> usize {
        self.cfg.base_channels[4] + 4
    }

    pub fn forward(&self, f: &mut Fwd, image_vec: Var) -> Result<EncoderOut> {
        let shape = f.tape.value(image_vec).shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let scale = self.cfg.scale_factor();
        if h % scale != 0 || w % scale != 0 {
            return Err(Error::Shape(format!(
                "encoder input {h}x{w} must be divisible by {scale}"
            )));
        }
        let slope = self.cfg.leaky_relu_slope;
        let mut x = image_vec;
        let mut pools = Vec::with_capacity(5);
        let mut blocks_out = Vec::with_capacity(5);
        for b in 0..5 {
            for conv in &self.blocks[b] {
                let y = conv.forward(f, x);
                x = f.tape.leaky_relu(y, slope);
            }
            blocks_out.push(x);
            x = match self.cfg.pool_strides[b] {
                2 => f.tape.avg_pool2(x),
                _ => f.tape.avg_pool2_same(x),
            };
            pools.push(x);
        }
        let backbone = x;
        let (bh, bw) = {
            let s = f.tape.value(backbone).shape();
            (s[1], s[2])
        };

        let mut side_native = Vec::with_capacity(4);
        let mut side_resampled = Vec::with_capacity(4);
        for b in 0..4 {
            let mut s = pools[b];
            let head = &self.side_heads[b];
            let y = head[0].forward(f, s);
            s = f.tape.leaky_relu(y, slope);
            let y = head[1].forward(f, s);
            s = f.tape.leaky_relu(y, slope);
            let side = head[2].forward(f, s);
            side_native.push(side);
            let same_size = {
                let ss = f.tape.value(side).shape();
                ss[1] == bh && ss[2] == bw
            };
            side_resampled.push(if same_size {
                side
            } else {
                f.tape.bilinear_resize(side, bh, bw)
            });
        }

        let mut parts = vec![backbone];
        parts.extend(side_resampled);
        let stacked = f.tape.concat_ch(&parts);
        Ok(EncoderOut {
            backbone,
            side_native,
            stacked,
            pools,
            blocks_out,
        })
    }
}

/// Analytic effective receptive field after each block's convolutions,
/// computed by the standard jump/extent recursion over the layer sequence.
pub fn effective_receptive_field(cfg: &EncoderConfig) -> [usize; 5] {
    let mut rf = 1usize;
    let mut jump = 1usize;
    let mut out = [0usize; 5];
    for b in 0..5 {
        for _ in 0..2 {
            let k_eff = cfg.dilation[b] * (3 - 1) + 1;
            rf += (k_eff - 1) * jump;
        }
        out[b] = rf;
        // pool after the block
        rf += jump; // 2x2 kernel adds one jump
        jump *= cfg.pool_strides[b];
    }
    out
}

/// Per-channel activation maps of one encoder block (1-based index),
/// evaluated without gradients.
pub fn export_activations(
    encoder: &Encoder,
    store: &ParamStore,
    image_vec: &Tensor,
    block: usize,
) -> Result<Vec<Tensor>> {
    if !(1..=5).contains(&block) {
        return Err(Error::Config(format!("block {block} out of range 1..=5")));
    }
    let mut tape = crate::autodiff::Tape::new();
    let mut f = Fwd::new(&mut tape, store, false);
    let x = f.tape.constant(image_vec.clone());
    let out = encoder.forward(&mut f, x)?;
    let t = f.tape.value(out.blocks_out[block - 1]);
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    Ok((0..c)
        .map(|ci| Tensor::from_vec(&[h, w], t.plane(ci).to_vec()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig::tiny([3, 4, 5, 5, 5], 3)
    }

    fn forward_shapes(cfg: &EncoderConfig, h: usize, w: usize) -> (Vec<usize>, Vec<Vec<usize>>) {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, "enc", cfg.clone(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, false);
        let img = f.tape.constant(Tensor::zeros(&[3, h, w]));
        let out = enc.forward(&mut f, img).unwrap();
        let stacked = f.tape.value(out.stacked).shape().to_vec();
        let sides = out
            .side_native
            .iter()
            .map(|&v| f.tape.value(v).shape().to_vec())
            .collect();
        (stacked, sides)
    }

    #[test]
    fn shape_contract_for_64x64() {
        let cfg = tiny_cfg();
        let (stacked, sides) = forward_shapes(&cfg, 64, 64);
        assert_eq!(stacked, vec![5 + 4, 8, 8]);
        assert_eq!(sides[0], vec![1, 32, 32]);
        assert_eq!(sides[1], vec![1, 16, 16]);
        assert_eq!(sides[2], vec![1, 8, 8]);
        assert_eq!(sides[3], vec![1, 8, 8]);
    }

    #[test]
    fn shape_contract_for_128x96() {
        let (stacked, _) = forward_shapes(&tiny_cfg(), 128, 96);
        assert_eq!(stacked[1..], [16, 12]);
    }

    #[test]
    fn non_divisible_input_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, "enc", tiny_cfg(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, false);
        let img = f.tape.constant(Tensor::zeros(&[3, 20, 24]));
        let err = match enc.forward(&mut f, img) {
            Err(e) => e,
            Ok(_) => panic!("expected shape rejection"),
        };
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn zero_image_with_zero_biases_gives_zero_features() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, "enc", tiny_cfg(), &mut rng).unwrap();
        // biases start at zero by construction
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, false);
        let img = f.tape.constant(Tensor::zeros(&[3, 16, 16]));
        let out = enc.forward(&mut f, img).unwrap();
        assert_eq!(f.tape.value(out.stacked).max(), 0.0);
        assert_eq!(f.tape.value(out.stacked).min(), 0.0);
    }

    #[test]
    fn receptive_field_examples() {
        // two 3x3 stride-1 dilation-1 layers: RF 5
        let mut rf = 1;
        for _ in 0..2 {
            rf += 2;
        }
        assert_eq!(rf, 5);
        // one 3x3 layer with dilation 2: k_eff = 2*(3-1)+1 = 5
        assert_eq!(2 * (3 - 1) + 1, 5);
    }

    #[test]
    fn dilated_stride_one_config_matches_unmodified_rf_in_deep_blocks() {
        // compensating configuration: stride-1 pools 4 and 5, block-5 kernels
        // dilated x2
        let compensated = EncoderConfig {
            dilation: [1, 1, 1, 1, 2],
            ..tiny_cfg()
        };
        compensated.validate().unwrap();
        let unmodified = EncoderConfig {
            pool_strides: [2, 2, 2, 2, 2],
            dilation: [1, 1, 1, 1, 1],
            ..tiny_cfg()
        };
        let got = effective_receptive_field(&compensated);
        // independent oracle: closed-form sum over the layer sequence,
        // rf = 1 + sum_l (k_eff_l - 1) * prod_{i<l} stride_i
        let oracle = |strides: [usize; 5], dils: [usize; 5]| -> [usize; 5] {
            let mut layers: Vec<(usize, usize)> = Vec::new(); // (k_eff, stride)
            let mut marks = [0usize; 5];
            for b in 0..5 {
                layers.push((dils[b] * 2 + 1, 1));
                layers.push((dils[b] * 2 + 1, 1));
                marks[b] = layers.len();
                layers.push((2, strides[b])); // pool
            }
            let mut out = [0usize; 5];
            for b in 0..5 {
                let mut rf = 1usize;
                let mut prod = 1usize;
                for (i, &(k, s)) in layers.iter().enumerate() {
                    if i >= marks[b] {
                        break;
                    }
                    rf += (k - 1) * prod;
                    prod *= s;
                }
                out[b] = rf;
            }
            out
        };
        let want_unmod = oracle([2, 2, 2, 2, 2], [1, 1, 1, 1, 1]);
        assert_eq!(effective_receptive_field(&unmodified), want_unmod);
        assert_eq!(got[3], want_unmod[3], "block 4 receptive field must match");
        assert_eq!(got[4], want_unmod[4], "block 5 receptive field must match");
        // and the recursion agrees with the closed form on the modified net
        assert_eq!(got, oracle([2, 2, 2, 1, 1], [1, 1, 1, 1, 2]));
    }

    #[test]
    fn activation_export_shapes_and_determinism() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, "enc", tiny_cfg(), &mut rng).unwrap();
        let img = Tensor::from_vec(
            &[3, 16, 16],
            (0..3 * 256).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let maps = export_activations(&enc, &store, &img, 1).unwrap();
        assert_eq!(maps.len(), 3);
        assert_eq!(maps[0].shape(), &[16, 16]); // pre-pool, full resolution
        let again = export_activations(&enc, &store, &img, 1).unwrap();
        assert_eq!(maps, again);
        let zero = export_activations(&enc, &store, &Tensor::zeros(&[3, 16, 16]), 2).unwrap();
        assert!(zero.iter().all(|m| m.max() == 0.0 && m.min() == 0.0));
    }
}
