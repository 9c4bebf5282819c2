//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates gradients.
//! Every training step builds a fresh tape (define-by-run), which keeps the
//! engine small and makes per-image tapes trivially parallel across a batch.

mod conv;
mod spatial;

pub use conv::{conv2d_bwd_data, conv2d_bwd_weight, conv2d_fwd, conv_out_dim};
pub use spatial::{sample_bilinear_zero, WindowWeights};

use std::sync::Arc;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub needs_grad: bool,
    pub op: Op,
}

pub(crate) enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    /// Elementwise tensor times a broadcast scalar variable (shape `[1]`).
    MulScalarVar(Var, Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Ln(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    /// -(t ln p + (1-t) ln(1-p)) elementwise against a constant target.
    BceWithTarget {
        p: Var,
        target: Tensor,
    },
    SumAll(Var),
    MeanAll(Var),
    /// Scalar dot product against a constant weight tensor.
    WeightedSum {
        x: Var,
        w: Tensor,
    },
    SquaredNorm(Var),
    ConcatCh(Vec<Var>),
    SliceCh {
        x: Var,
        channel: usize,
    },
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        dilation: usize,
        pad: usize,
    },
    ConvT2d {
        x: Var,
        w: Var,
        dilation: usize,
        pad: usize,
    },
    SoftmaxCh(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<f64>,
        normalized: Tensor,
        training: bool,
    },
    AvgPool2(Var),
    AvgPool2Same(Var),
    UpsampleNearest2(Var),
    BilinearResize {
        x: Var,
        out_h: usize,
        out_w: usize,
    },
    Correlation {
        a: Var,
        b: Var,
        radius: usize,
    },
    Warp {
        map: Var,
        flow: Var,
    },
    /// Per-pixel weighted window average with constant, pre-normalized weights.
    WindowAverage {
        x: Var,
        weights: Arc<WindowWeights>,
    },
}

pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    bindings: Vec<(String, Var)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Differentiable leaf (network parameter or probed input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Constant)
    }

    /// Value copy that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, false, Op::Constant)
    }

    /// Differentiable leaf remembered under a parameter name so its gradient
    /// can be collected after `backward`.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.leaf(value);
        self.bindings.push((name.to_string(), v));
        v
    }

    /// Gradients of all named parameters bound on this tape. Names bound more
    /// than once have their gradients summed.
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        for (name, v) in &self.bindings {
            let g = match &self.nodes[v.0].grad {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.nodes[v.0].value.shape()),
            };
            if let Some(slot) = out.iter_mut().find(|(n, _)| n == name) {
                slot.1.add_assign(&g);
            } else {
                out.push((name.clone(), g));
            }
        }
        out
    }

    // ---- elementwise ops -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let ng = self.needs(a);
        self.push(v, ng, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(v, ng, Op::MulScalar(a, s))
    }

    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scalar var must have one element");
        let sv = self.value(s).data()[0];
        let v = self.value(x).map(|t| t * sv);
        let ng = self.needs(x) || self.needs(s);
        self.push(v, ng, Op::MulScalarVar(x, s))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.mul_scalar(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        let ng = self.needs(a);
        self.push(v, ng, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(stable_sigmoid);
        let ng = self.needs(a);
        self.push(v, ng, Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let ng = self.needs(a);
        self.push(v, ng, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        let ng = self.needs(a);
        self.push(v, ng, Op::Sqrt(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.needs(a);
        self.push(v, ng, Op::Clamp(a, lo, hi))
    }

    /// Elementwise binary cross-entropy of predictions `p` against constant
    /// targets: `-(t ln p + (1-t) ln(1-p))`. `p` must already be clamped away
    /// from {0, 1}.
    pub fn bce_with_target(&mut self, p: Var, target: &Tensor) -> Var {
        let v = self
            .value(p)
            .zip(target, |pv, t| -(t * pv.ln() + (1.0 - t) * (1.0 - pv).ln()));
        let ng = self.needs(p);
        self.push(
            v,
            ng,
            Op::BceWithTarget {
                p,
                target: target.clone(),
            },
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(v, ng, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let ng = self.needs(a);
        self.push(v, ng, Op::MeanAll(a))
    }

    pub fn weighted_sum(&mut self, x: Var, w: &Tensor) -> Var {
        assert_eq!(self.value(x).shape(), w.shape());
        let v = Tensor::scalar(
            self.value(x)
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum(),
        );
        let ng = self.needs(x);
        self.push(v, ng, Op::WeightedSum { x, w: w.clone() })
    }

    pub fn squared_norm(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().map(|x| x * x).sum());
        let ng = self.needs(a);
        self.push(v, ng, Op::SquaredNorm(a))
    }

    pub fn concat_ch(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (h, w) = {
            let s = self.value(parts[0]).shape();
            (s[1], s[2])
        };
        let mut data = Vec::new();
        let mut channels = 0;
        let mut ng = false;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &[h, w], "concat spatial mismatch");
            channels += t.shape()[0];
            data.extend_from_slice(t.data());
            ng |= self.needs(p);
        }
        let v = Tensor::from_vec(&[channels, h, w], data);
        self.push(v, ng, Op::ConcatCh(parts.to_vec()))
    }

    /// Extract one channel as a [1, H, W] tensor.
    pub fn slice_ch(&mut self, x: Var, channel: usize) -> Var {
        let xt = self.value(x);
        let (c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        assert!(channel < c, "channel {channel} out of range");
        let v = Tensor::from_vec(&[1, h, w], xt.plane(channel).to_vec());
        let ng = self.needs(x);
        self.push(v, ng, Op::SliceCh { x, channel })
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let xt = self.value(x);
        let bt = self.value(bias);
        assert_eq!(xt.shape()[0], bt.len(), "bias length mismatch");
        let (c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let mut v = xt.clone();
        for ci in 0..c {
            let bv = bt.data()[ci];
            for p in v.plane_mut(ci) {
                *p += bv;
            }
        }
        let _ = (h, w);
        let ng = self.needs(x) || self.needs(bias);
        self.push(v, ng, Op::AddChannelBias { x, bias })
    }

    // ---- backward --------------------------------------------------------

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Backpropagate from a scalar loss node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            self.step_back(i);
        }
    }

    fn step_back(&mut self, i: usize) {
        let g = self.nodes[i].grad.clone().expect("grad present");
        // Ops are matched by value where cheap; heavy ops borrow node data.
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga = g.zip(self.value(b), |gv, bv| gv * bv);
                let gb = g.zip(self.value(a), |gv, av| gv * av);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.accumulate(a, g);
            }
            Op::MulScalar(a, s) => {
                let (a, s) = (*a, *s);
                self.accumulate(a, g.scale(s));
            }
            Op::MulScalarVar(x, s) => {
                let (x, s) = (*x, *s);
                let sv = self.value(s).data()[0];
                let gx = g.scale(sv);
                let gs = Tensor::scalar(
                    g.data()
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(gv, xv)| gv * xv)
                        .sum(),
                );
                self.accumulate(x, gx);
                self.accumulate(s, gs);
            }
            Op::LeakyRelu(a, slope) => {
                let (a, slope) = (*a, *slope);
                let ga = g.zip(self.value(a), |gv, xv| {
                    if xv >= 0.0 {
                        gv
                    } else {
                        gv * slope
                    }
                });
                self.accumulate(a, ga);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let ga = g.zip(&self.nodes[i].value, |gv, y| gv * y * (1.0 - y));
                self.accumulate(a, ga);
            }
            Op::Ln(a) => {
                let a = *a;
                let ga = g.zip(self.value(a), |gv, xv| gv / xv);
                self.accumulate(a, ga);
            }
            Op::Sqrt(a) => {
                let a = *a;
                let ga = g.zip(&self.nodes[i].value, |gv, y| gv * 0.5 / y.max(1e-12));
                self.accumulate(a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let (a, lo, hi) = (*a, *lo, *hi);
                let ga = g.zip(self.value(a), |gv, xv| {
                    if xv >= lo && xv <= hi {
                        gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(a, ga);
            }
            Op::BceWithTarget { p, target } => {
                let p = *p;
                let target = target.clone();
                let gp = {
                    let pv = self.value(p);
                    let mut out = Tensor::zeros(pv.shape());
                    for (((o, &gv), &t), &pr) in out
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(target.data())
                        .zip(pv.data())
                    {
                        *o = gv * (-t / pr + (1.0 - t) / (1.0 - pr));
                    }
                    out
                };
                self.accumulate(p, gp);
            }
            Op::SumAll(a) => {
                let a = *a;
                let gv = g.item();
                let shape = self.value(a).shape().to_vec();
                self.accumulate(a, Tensor::full(&shape, gv));
            }
            Op::MeanAll(a) => {
                let a = *a;
                let n = self.value(a).len() as f64;
                let gv = g.item() / n;
                let shape = self.value(a).shape().to_vec();
                self.accumulate(a, Tensor::full(&shape, gv));
            }
            Op::WeightedSum { x, w } => {
                let x = *x;
                let gw = w.scale(g.item());
                self.accumulate(x, gw);
            }
            Op::SquaredNorm(a) => {
                let a = *a;
                let gv = g.item();
                let ga = self.value(a).map(|x| 2.0 * x * gv);
                self.accumulate(a, ga);
            }
            Op::SliceCh { x, channel } => {
                let (x, channel) = (*x, *channel);
                let (c, h, w) = {
                    let s = self.value(x).shape();
                    (s[0], s[1], s[2])
                };
                let mut gx = Tensor::zeros(&[c, h, w]);
                gx.plane_mut(channel).copy_from_slice(g.data());
                self.accumulate(x, gx);
            }
            Op::ConcatCh(parts) => {
                let parts = parts.clone();
                let (h, w) = {
                    let s = self.nodes[i].value.shape();
                    (s[1], s[2])
                };
                let mut offset = 0;
                for p in parts {
                    let c = self.value(p).shape()[0];
                    let hw = h * w;
                    let slice = g.data()[offset * hw..(offset + c) * hw].to_vec();
                    offset += c;
                    self.accumulate(p, Tensor::from_vec(&[c, h, w], slice));
                }
            }
            Op::AddChannelBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let c = self.value(bias).len();
                let mut gb = Tensor::zeros(&[c]);
                let hw = g.len() / c;
                for ci in 0..c {
                    gb.data_mut()[ci] = g.data()[ci * hw..(ci + 1) * hw].iter().sum();
                }
                self.accumulate(x, g);
                self.accumulate(bias, gb);
            }
            Op::Conv2d { .. }
            | Op::ConvT2d { .. }
            | Op::SoftmaxCh(_)
            | Op::BatchNorm { .. }
            | Op::AvgPool2(_)
            | Op::AvgPool2Same(_)
            | Op::UpsampleNearest2(_)
            | Op::BilinearResize { .. }
            | Op::Correlation { .. }
            | Op::Warp { .. }
            | Op::WindowAverage { .. } => self.step_back_heavy(i, g),
        }
    }
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}


#[cfg(test)]
mod tests {
    use super::gradcheck::max_rel_err;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&[2, 3, 3], &mut rng);
        let b = rand_tensor(&[2, 3, 3], &mut rng);
        let err = max_rel_err(&[a, b], |t, v| {
            let m = t.mul(v[0], v[1]);
            let s = t.sub(m, v[0]);
            let r = t.leaky_relu(s, 0.1);
            let sg = t.sigmoid(r);
            let c = t.clamp(sg, 1e-7, 1.0 - 1e-7);
            let l = t.ln(c);
            t.mean_all(l)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn bce_and_norm_grads_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = Tensor::from_vec(&[1, 2, 2], vec![0.3, 0.7, 0.45, 0.9]);
        let w = rand_tensor(&[1, 2, 2], &mut rng);
        let target = Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.5, 1.0]);
        let err = max_rel_err(&[p, w.clone()], |t, v| {
            let ce = t.bce_with_target(v[0], &target);
            let ws = t.weighted_sum(ce, &w);
            let n = t.squared_norm(v[1]);
            t.add(ws, n)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn scalar_var_broadcast_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&[1, 4, 4], &mut rng);
        let s = Tensor::scalar(0.63);
        let err = max_rel_err(&[x, s], |t, v| {
            let y = t.mul_scalar_var(v[0], v[1]);
            t.sum_all(y)
        });
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn concat_and_bias_grads_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = rand_tensor(&[2, 2, 2], &mut rng);
        let b = rand_tensor(&[1, 2, 2], &mut rng);
        let bias = rand_tensor(&[3], &mut rng);
        let err = max_rel_err(&[a, b, bias], |t, v| {
            let c = t.concat_ch(&[v[0], v[1]]);
            let y = t.add_channel_bias(c, v[2]);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        });
        assert!(err < 1e-6, "rel err {err}");
    }
}
