//! Convolution primitives: forward, data-gradient and weight-gradient kernels
//! shared by the `Conv2d` and `ConvT2d` tape ops. Transposed convolution is
//! the exact adjoint, so its forward pass reuses the data-gradient kernel.

use rayon::prelude::*;

use super::{Op, Tape, Var};
use crate::tensor::Tensor;

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, dilation: usize, pad: usize) -> usize {
    (input + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1
}

/// Output-index range `lo..hi` such that `o * stride + offset` stays inside
/// `[0, len)`.
#[inline]
fn valid_range(len: usize, offset: isize, stride: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset < 0 {
        ((-offset + s - 1) / s) as usize
    } else {
        0
    };
    let max_o = (len as isize - 1 - offset).div_euclid(s);
    if max_o < lo as isize {
        return (0, 0);
    }
    let hi = (max_o as usize + 1).min(out_len);
    if lo >= hi {
        return (0, 0);
    }
    (lo, hi)
}

/// x: [Ci, H, W], w: [Co, Ci, kh, kw] -> [Co, Ho, Wo]
pub fn conv2d_fwd(x: &Tensor, w: &Tensor, stride: usize, dilation: usize, pad: usize) -> Tensor {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, wci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(ci, wci, "conv channel mismatch");
    let oh = conv_out_dim(h, kh, stride, dilation, pad);
    let ow = conv_out_dim(wd, kw, stride, dilation, pad);
    let mut out = Tensor::zeros(&[co, oh, ow]);

    let work = co * ci * kh * kw * oh * ow;
    let body = |c_out: usize, plane: &mut [f64]| {
        for c_in in 0..ci {
            let xplane = x.plane(c_in);
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w.data()[((c_out * ci + c_in) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let off_y = (ky * dilation) as isize - pad as isize;
                    let off_x = (kx * dilation) as isize - pad as isize;
                    let (y0, y1) = valid_range(h, off_y, stride, oh);
                    let (x0, x1) = valid_range(wd, off_x, stride, ow);
                    if y1 <= y0 || x1 <= x0 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = (oy * stride) as isize + off_y;
                        let xrow = &xplane[iy as usize * wd..(iy as usize + 1) * wd];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let ix0 = (x0 as isize + off_x) as usize;
                            for (o, xv) in orow[x0..x1].iter_mut().zip(&xrow[ix0..ix0 + (x1 - x0)])
                            {
                                *o += wv * xv;
                            }
                        } else {
                            for ox in x0..x1 {
                                let ix = (ox * stride) as isize + off_x;
                                orow[ox] += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    };

    if work > 400_000 && co > 1 {
        out.data_mut()
            .par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(c_out, plane)| body(c_out, plane));
    } else {
        for c_out in 0..co {
            let plane = &mut out.data_mut()[c_out * oh * ow..(c_out + 1) * oh * ow];
            body(c_out, plane);
        }
    }
    out
}

/// Gradient w.r.t. the convolution input. `g`: [Co, Ho, Wo].
pub fn conv2d_bwd_data(
    g: &Tensor,
    w: &Tensor,
    stride: usize,
    dilation: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
) -> Tensor {
    let (co, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let (wco, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(co, wco, "conv grad channel mismatch");
    let mut gx = Tensor::zeros(&[ci, in_h, in_w]);

    let work = co * ci * kh * kw * oh * ow;
    let body = |c_in: usize, plane: &mut [f64]| {
        for c_out in 0..co {
            let gplane = g.plane(c_out);
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w.data()[((c_out * ci + c_in) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let off_y = (ky * dilation) as isize - pad as isize;
                    let off_x = (kx * dilation) as isize - pad as isize;
                    let (y0, y1) = valid_range(in_h, off_y, stride, oh);
                    let (x0, x1) = valid_range(in_w, off_x, stride, ow);
                    if y1 <= y0 || x1 <= x0 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = ((oy * stride) as isize + off_y) as usize;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let xrow = &mut plane[iy * in_w..(iy + 1) * in_w];
                        if stride == 1 {
                            let ix0 = (x0 as isize + off_x) as usize;
                            for (gv, xv) in grow[x0..x1].iter().zip(&mut xrow[ix0..ix0 + (x1 - x0)])
                            {
                                *xv += wv * gv;
                            }
                        } else {
                            for ox in x0..x1 {
                                let ix = ((ox * stride) as isize + off_x) as usize;
                                xrow[ix] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    };

    if work > 400_000 && ci > 1 {
        gx.data_mut()
            .par_chunks_mut(in_h * in_w)
            .enumerate()
            .for_each(|(c_in, plane)| body(c_in, plane));
    } else {
        for c_in in 0..ci {
            let plane = &mut gx.data_mut()[c_in * in_h * in_w..(c_in + 1) * in_h * in_w];
            body(c_in, plane);
        }
    }
    gx
}

/// Gradient w.r.t. the convolution weights.
pub fn conv2d_bwd_weight(
    g: &Tensor,
    x: &Tensor,
    stride: usize,
    dilation: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Tensor {
    let (co, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut gw = Tensor::zeros(&[co, ci, kh, kw]);

    let work = co * ci * kh * kw * oh * ow;
    let body = |c_out: usize, wslice: &mut [f64]| {
        let gplane = g.plane(c_out);
        for c_in in 0..ci {
            let xplane = x.plane(c_in);
            for ky in 0..kh {
                for kx in 0..kw {
                    let off_y = (ky * dilation) as isize - pad as isize;
                    let off_x = (kx * dilation) as isize - pad as isize;
                    let (y0, y1) = valid_range(h, off_y, stride, oh);
                    let (x0, x1) = valid_range(wd, off_x, stride, ow);
                    if y1 <= y0 || x1 <= x0 {
                        wslice[(c_in * kh + ky) * kw + kx] = 0.0;
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = ((oy * stride) as isize + off_y) as usize;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let xrow = &xplane[iy * wd..(iy + 1) * wd];
                        if stride == 1 {
                            let ix0 = (x0 as isize + off_x) as usize;
                            acc += grow[x0..x1]
                                .iter()
                                .zip(&xrow[ix0..ix0 + (x1 - x0)])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        } else {
                            for ox in x0..x1 {
                                let ix = ((ox * stride) as isize + off_x) as usize;
                                acc += grow[ox] * xrow[ix];
                            }
                        }
                    }
                    wslice[(c_in * kh + ky) * kw + kx] = acc;
                }
            }
        }
    };

    if work > 400_000 && co > 1 {
        gw.data_mut()
            .par_chunks_mut(ci * kh * kw)
            .enumerate()
            .for_each(|(c_out, ws)| body(c_out, ws));
    } else {
        for c_out in 0..co {
            let ws = &mut gw.data_mut()[c_out * ci * kh * kw..(c_out + 1) * ci * kh * kw];
            body(c_out, ws);
        }
    }
    gw
}

impl Tape {
    /// Same-or-strided 2-D convolution, weight layout [Co, Ci, kh, kw].
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, dilation: usize, pad: usize) -> Var {
        let v = conv2d_fwd(self.value(x), self.value(w), stride, dilation, pad);
        let ng = self.nodes[x.0].needs_grad || self.nodes[w.0].needs_grad;
        self.push_node(
            v,
            ng,
            Op::Conv2d {
                x,
                w,
                stride,
                dilation,
                pad,
            },
        )
    }

    /// Stride-1 transposed convolution (exact adjoint of `conv2d` with the
    /// same dilation/padding), weight layout [Ci, Co, kh, kw].
    pub fn conv_t2d(&mut self, x: Var, w: Var, dilation: usize, pad: usize) -> Var {
        let (h, wd) = {
            let s = self.value(x).shape();
            (s[1], s[2])
        };
        let v = conv2d_bwd_data(self.value(x), self.value(w), 1, dilation, pad, h, wd);
        let ng = self.nodes[x.0].needs_grad || self.nodes[w.0].needs_grad;
        self.push_node(v, ng, Op::ConvT2d { x, w, dilation, pad })
    }

    pub(crate) fn push_node(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(super::Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn backward_conv(&mut self, i: usize, g: Tensor) {
        match &self.nodes[i].op {
            Op::Conv2d {
                x,
                w,
                stride,
                dilation,
                pad,
            } => {
                let (x, w, stride, dilation, pad) = (*x, *w, *stride, *dilation, *pad);
                let (in_h, in_w, kh, kw) = {
                    let xs = self.value(x).shape();
                    let ws = self.value(w).shape();
                    (xs[1], xs[2], ws[2], ws[3])
                };
                let gx = if self.nodes[x.0].needs_grad {
                    Some(conv2d_bwd_data(
                        &g,
                        self.value(w),
                        stride,
                        dilation,
                        pad,
                        in_h,
                        in_w,
                    ))
                } else {
                    None
                };
                let gw = if self.nodes[w.0].needs_grad {
                    Some(conv2d_bwd_weight(
                        &g,
                        self.value(x),
                        stride,
                        dilation,
                        pad,
                        kh,
                        kw,
                    ))
                } else {
                    None
                };
                if let Some(gx) = gx {
                    self.accumulate_node(x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate_node(w, gw);
                }
            }
            Op::ConvT2d { x, w, dilation, pad } => {
                let (x, w, dilation, pad) = (*x, *w, *dilation, *pad);
                let (kh, kw) = {
                    let ws = self.value(w).shape();
                    (ws[2], ws[3])
                };
                let gx = if self.nodes[x.0].needs_grad {
                    Some(conv2d_fwd(&g, self.value(w), 1, dilation, pad))
                } else {
                    None
                };
                // Roles swap for the weight gradient of the adjoint.
                let gw = if self.nodes[w.0].needs_grad {
                    Some(conv2d_bwd_weight(
                        self.value(x),
                        &g,
                        1,
                        dilation,
                        pad,
                        kh,
                        kw,
                    ))
                } else {
                    None
                };
                if let Some(gx) = gx {
                    self.accumulate_node(x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate_node(w, gw);
                }
            }
            _ => unreachable!("backward_conv on non-conv op"),
        }
    }

    pub(crate) fn accumulate_node(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::max_rel_err;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv_forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 5, 6], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        for &(s, d, p) in &[(1usize, 1usize, 1usize), (2, 1, 1), (1, 2, 2)] {
            let got = conv2d_fwd(&x, &w, s, d, p);
            let oh = conv_out_dim(5, 3, s, d, p);
            let ow = conv_out_dim(6, 3, s, d, p);
            let mut want = Tensor::zeros(&[3, oh, ow]);
            for co in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * s + ky * d) as isize - p as isize;
                                    let ix = (ox * s + kx * d) as isize - p as isize;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 6 {
                                        acc += w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                            * x.at3(ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        want.set3(co, oy, ox, acc);
                    }
                }
            }
            assert!(crate::tensor::max_abs_diff(&got, &want) < 1e-12);
        }
    }

    #[test]
    fn conv_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(s, d, p) in &[(1usize, 1usize, 1usize), (2, 1, 1), (1, 2, 2)] {
            let x = rand_tensor(&[2, 6, 6], &mut rng);
            let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
            let probe = rand_tensor(
                &[
                    3,
                    conv_out_dim(6, 3, s, d, p),
                    conv_out_dim(6, 3, s, d, p),
                ],
                &mut rng,
            );
            let err = max_rel_err(&[x, w], |t, v| {
                let y = t.conv2d(v[0], v[1], s, d, p);
                t.weighted_sum(y, &probe)
            });
            assert!(err < 1e-6, "stride {s} dil {d}: rel err {err}");
        }
    }

    #[test]
    fn dilation_larger_than_input_is_handled() {
        // kernel taps can fall entirely outside a tiny input
        let x = Tensor::full(&[1, 2, 2], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 0.5);
        let y = conv2d_fwd(&x, &w, 1, 4, 4);
        assert_eq!(y.shape(), &[1, 2, 2]);
        // only the center tap ever lands inside
        for v in y.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        let gx = conv2d_bwd_data(&y, &w, 1, 4, 4, 2, 2);
        assert_eq!(gx.shape(), &[1, 2, 2]);
        let gw = conv2d_bwd_weight(&y, &x, 1, 4, 4, 3, 3);
        assert_eq!(gw.shape(), &[1, 1, 3, 3]);
    }

    #[test]
    fn conv_transpose_is_adjoint_and_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // adjoint identity: <conv(x), y> == <x, convT(y)> with shared weights
        let x = rand_tensor(&[2, 5, 5], &mut rng);
        let y = rand_tensor(&[3, 5, 5], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let lhs = {
            let c = conv2d_fwd(&x, &w, 1, 1, 1);
            c.data().iter().zip(y.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let rhs = {
            let ct = conv2d_bwd_data(&y, &w, 1, 1, 1, 5, 5);
            ct.data().iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        assert!((lhs - rhs).abs() < 1e-10);

        let xt = rand_tensor(&[3, 4, 4], &mut rng);
        let wt = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let probe = rand_tensor(&[2, 4, 4], &mut rng);
        let err = max_rel_err(&[xt, wt], |t, v| {
            let z = t.conv_t2d(v[0], v[1], 2, 2);
            t.weighted_sum(z, &probe)
        });
        assert!(err < 1e-6, "convT rel err {err}");
    }
}
