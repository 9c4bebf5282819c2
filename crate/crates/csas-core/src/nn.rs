//! Parameter storage, layer wrappers and the ADAM optimizer.
//!
//! Layers do not own their tensors; they hold names into a [`ParamStore`] and
//! lease values onto a [`Tape`] through a [`Fwd`] session. This keeps
//! checkpointing (named tensors) and per-image tape parallelism simple: each
//! worker builds its own tape against a shared read-only store.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct Entry {
    value: Tensor,
    trainable: bool,
}

/// Named tensor store for parameters and non-trainable buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.entries.insert(
            name.to_string(),
            Entry {
                value,
                trainable: true,
            },
        );
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor) {
        self.entries.insert(
            name.to_string(),
            Entry {
                value,
                trainable: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.trainable).unwrap_or(false)
    }

    /// Names in deterministic (sorted) order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Sum of squared values over trainable parameters matching `filter`.
    pub fn squared_norm(&self, filter: impl Fn(&str) -> bool) -> f64 {
        self.entries
            .iter()
            .filter(|(k, e)| e.trainable && filter(k))
            .map(|(_, e)| e.value.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), &e.value, e.trainable))
    }
}

/// One forward-pass session: a tape plus the store it leases parameters from.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub training: bool,
    /// Batch statistics reported by batch-norm layers during training,
    /// consumed by the trainer to update running estimates.
    pub bn_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl<'a> Fwd<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, training: bool) -> Self {
        Fwd {
            tape,
            store,
            training,
            bn_stats: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Var {
        self.tape.param(name, self.store.get(name).clone())
    }
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha20Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

/// 2-D convolution layer (weights [out, in, k, k]).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        store.insert(
            &format!("{name}/w"),
            he_uniform(&[out_c, in_c, kernel, kernel], in_c * kernel * kernel, rng),
        );
        store.insert(&format!("{name}/b"), Tensor::zeros(&[out_c]));
        Conv2d {
            name: name.to_string(),
            in_c,
            out_c,
            kernel,
            stride,
            dilation,
        }
    }

    pub fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let w = f.param(&format!("{}/w", self.name));
        let b = f.param(&format!("{}/b", self.name));
        let y = f.tape.conv2d(x, w, self.stride, self.dilation, self.pad());
        f.tape.add_channel_bias(y, b)
    }
}

/// Stride-1 transposed convolution layer (weights [in, out, k, k]).
#[derive(Clone, Debug)]
pub struct ConvT2d {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvT2d {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        store.insert(
            &format!("{name}/w"),
            he_uniform(&[in_c, out_c, kernel, kernel], in_c * kernel * kernel, rng),
        );
        store.insert(&format!("{name}/b"), Tensor::zeros(&[out_c]));
        ConvT2d {
            name: name.to_string(),
            in_c,
            out_c,
            kernel,
            dilation,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let pad = self.dilation * (self.kernel - 1) / 2;
        let w = f.param(&format!("{}/w", self.name));
        let b = f.param(&format!("{}/b", self.name));
        let y = f.tape.conv_t2d(x, w, self.dilation, pad);
        f.tape.add_channel_bias(y, b)
    }
}

/// Channel-wise batch normalization with running statistics (momentum 0.9).
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
}

pub const BN_MOMENTUM: f64 = 0.9;

impl BatchNorm2d {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        store.insert(&format!("{name}/gamma"), Tensor::full(&[channels], 1.0));
        store.insert(&format!("{name}/beta"), Tensor::zeros(&[channels]));
        store.insert_buffer(&format!("{name}/running_mean"), Tensor::zeros(&[channels]));
        store.insert_buffer(&format!("{name}/running_var"), Tensor::full(&[channels], 1.0));
        BatchNorm2d {
            name: name.to_string(),
            channels,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let gamma = f.param(&format!("{}/gamma", self.name));
        let beta = f.param(&format!("{}/beta", self.name));
        if f.training {
            let out = f.tape.batch_norm(x, gamma, beta, None);
            f.bn_stats.push((self.name.clone(), out.mean, out.var));
            out.y
        } else {
            let rm = f.store.get(&format!("{}/running_mean", self.name)).data().to_vec();
            let rv = f.store.get(&format!("{}/running_var", self.name)).data().to_vec();
            let out = f.tape.batch_norm(x, gamma, beta, Some((&rm, &rv)));
            out.y
        }
    }
}

/// Fold one batch worth of reported batch-norm statistics into the running
/// estimates. Statistics for the same layer are averaged first so the update
/// is independent of batch traversal order.
pub fn update_running_stats(store: &mut ParamStore, stats: &[(String, Vec<f64>, Vec<f64>)]) {
    let mut grouped: BTreeMap<&str, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for (name, mean, var) in stats {
        let slot = grouped
            .entry(name.as_str())
            .or_insert_with(|| (vec![0.0; mean.len()], vec![0.0; var.len()], 0));
        for (a, b) in slot.0.iter_mut().zip(mean) {
            *a += b;
        }
        for (a, b) in slot.1.iter_mut().zip(var) {
            *a += b;
        }
        slot.2 += 1;
    }
    for (name, (mean_sum, var_sum, count)) in grouped {
        let n = count as f64;
        let rm = store.get_mut(&format!("{name}/running_mean"));
        for (r, m) in rm.data_mut().iter_mut().zip(&mean_sum) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * (m / n);
        }
        let rv = store.get_mut(&format!("{name}/running_var"));
        for (r, v) in rv.data_mut().iter_mut().zip(&var_sum) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * (v / n);
        }
    }
}

/// ADAM with the standard defaults (lr 1e-3, beta1 0.9, beta2 0.999, eps 1e-8).
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: BTreeMap<String, u64>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: BTreeMap::new(),
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update from accumulated gradients. Only trainable parameters
    /// accepted by `filter` are touched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        filter: impl Fn(&str) -> bool,
    ) {
        for (name, grad) in grads {
            if !store.contains(name) || !store.is_trainable(name) || !filter(name) {
                continue;
            }
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let tt = *t as i32;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            for (mv, gv) in m.data_mut().iter_mut().zip(grad.data()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            }
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            for (vv, gv) in v.data_mut().iter_mut().zip(grad.data()) {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            }
            let bc1 = 1.0 - self.beta1.powi(tt);
            let bc2 = 1.0 - self.beta2.powi(tt);
            let value = store.get_mut(name);
            let (m, v) = (self.m.get(name).unwrap(), self.v.get(name).unwrap());
            for ((p, mv), vv) in value.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Merge per-image gradient lists into one map, summing duplicates in a fixed
/// order so the result is bit-deterministic.
pub fn reduce_grads(per_image: Vec<Vec<(String, Tensor)>>) -> BTreeMap<String, Tensor> {
    let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
    for grads in per_image {
        for (name, g) in grads {
            match out.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.insert(name, g);
                }
            }
        }
    }
    out
}

/// NaN guard used before applying gradients.
pub fn check_finite(loss: f64, context: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss encountered during {context}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::from_vec(&[2], vec![3.0, -2.0]));
        let mut adam = Adam::new(0.05);
        for _ in 0..400 {
            let x = store.get("x").clone();
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), x.scale(2.0));
            adam.step(&mut store, &grads, |_| true);
        }
        let x = store.get("x");
        assert!(x.data()[0].abs() < 1e-2 && x.data()[1].abs() < 1e-2);
    }

    #[test]
    fn conv_layer_roundtrip_through_session() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let conv = Conv2d::init(&mut store, "t/conv", 1, 2, 3, 1, 1, &mut rng);
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store, true);
        let x = f.tape.constant(Tensor::full(&[1, 4, 4], 1.0));
        let y = conv.forward(&mut f, x);
        assert_eq!(f.tape.value(y).shape(), &[2, 4, 4]);
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let mut store = ParamStore::new();
        BatchNorm2d::init(&mut store, "bn", 1);
        update_running_stats(
            &mut store,
            &[
                ("bn".to_string(), vec![1.0], vec![2.0]),
                ("bn".to_string(), vec![3.0], vec![4.0]),
            ],
        );
        let rm = store.get("bn/running_mean").data()[0];
        let rv = store.get("bn/running_var").data()[0];
        assert!((rm - 0.2).abs() < 1e-12); // 0.9*0 + 0.1*mean(1,3)
        assert!((rv - (0.9 + 0.1 * 3.0)).abs() < 1e-12);
    }
}
