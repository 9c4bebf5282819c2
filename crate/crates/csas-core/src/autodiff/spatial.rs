//! Spatial tape ops: pooling, unpooling, resampling, batch norm, channel
//! softmax, cost-volume correlation, flow warping and windowed averaging.

use rayon::prelude::*;

use super::{Op, Tape, Var};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;

/// Pre-normalized per-pixel window weights for [`Tape::window_average`].
///
/// `weights[((y * w + x) * win + dy) * win + dx]` is the weight of the
/// neighbor at `(y + dy - r, x + dx - r)`; out-of-bounds taps must carry
/// weight zero and each pixel's taps must sum to 1 (or to 0 for pixels with
/// no support, which then produce 0).
pub struct WindowWeights {
    pub win: usize,
    pub h: usize,
    pub w: usize,
    pub weights: Vec<f64>,
}

impl WindowWeights {
    pub fn new(win: usize, h: usize, w: usize, weights: Vec<f64>) -> Self {
        assert!(win % 2 == 1, "window must be odd");
        assert_eq!(weights.len(), h * w * win * win);
        WindowWeights { win, h, w, weights }
    }
}

pub struct BatchNormOut {
    pub y: Var,
    /// Per-channel batch mean (training mode) or the running mean echoed back.
    pub mean: Vec<f64>,
    /// Per-channel biased batch variance, same convention as `mean`.
    pub var: Vec<f64>,
}

impl Tape {
    pub fn softmax_ch(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let hw = h * w;
        let mut out = Tensor::zeros(&[c, h, w]);
        for p in 0..hw {
            let mut mx = f64::NEG_INFINITY;
            for ci in 0..c {
                mx = mx.max(xt.data()[ci * hw + p]);
            }
            let mut denom = 0.0;
            for ci in 0..c {
                denom += (xt.data()[ci * hw + p] - mx).exp();
            }
            for ci in 0..c {
                out.data_mut()[ci * hw + p] = (xt.data()[ci * hw + p] - mx).exp() / denom;
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push_node(out, ng, Op::SoftmaxCh(x))
    }

    /// Channel-wise batch normalization over the spatial extent. In training
    /// mode the batch statistics are computed from `x` and reported back so
    /// the caller can maintain running estimates; in inference mode the
    /// provided running statistics are used as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> BatchNormOut {
        let xt = self.value(x);
        let (c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let hw = h * w;
        let training = running.is_none();
        let (mean, var): (Vec<f64>, Vec<f64>) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut m = vec![0.0; c];
                let mut v = vec![0.0; c];
                for ci in 0..c {
                    let plane = xt.plane(ci);
                    let mu = plane.iter().sum::<f64>() / hw as f64;
                    m[ci] = mu;
                    v[ci] = plane.iter().map(|p| (p - mu) * (p - mu)).sum::<f64>() / hw as f64;
                }
                (m, v)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut normalized = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            let (m, is) = (mean[ci], inv_std[ci]);
            for (n, p) in normalized.plane_mut(ci).iter_mut().zip(xt.plane(ci)) {
                *n = (p - m) * is;
            }
        }
        let gt = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut y = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            for (o, n) in y.plane_mut(ci).iter_mut().zip(normalized.plane(ci)) {
                *o = gt[ci] * n + bt[ci];
            }
        }
        let ng = self.nodes[x.0].needs_grad
            || self.nodes[gamma.0].needs_grad
            || self.nodes[beta.0].needs_grad;
        let yv = self.push_node(
            y,
            ng,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                inv_std,
                normalized,
                training,
            },
        );
        BatchNormOut { y: yv, mean, var }
    }

    /// 2x2 average pooling with stride 2 (dimensions must be even).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ci in 0..c {
            let plane = xt.plane(ci);
            let oplane = out.plane_mut(ci);
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, xx) = (oy * 2, ox * 2);
                    oplane[oy * ow + ox] = 0.25
                        * (plane[y * w + xx]
                            + plane[y * w + xx + 1]
                            + plane[(y + 1) * w + xx]
                            + plane[(y + 1) * w + xx + 1]);
                }
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push_node(out, ng, Op::AvgPool2(x))
    }

    /// 2x2 average pooling with stride 1; borders average over the taps that
    /// fall inside the image, so the output keeps the input size.
    pub fn avg_pool2_same(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let mut out = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            let plane = xt.plane(ci);
            let oplane = out.plane_mut(ci);
            for y in 0..h {
                let y1 = (y + 1).min(h - 1);
                for x0 in 0..w {
                    let x1 = (x0 + 1).min(w - 1);
                    let mut acc = plane[y * w + x0];
                    let mut count = 1.0;
                    if x1 != x0 {
                        acc += plane[y * w + x1];
                        count += 1.0;
                    }
                    if y1 != y {
                        acc += plane[y1 * w + x0];
                        count += 1.0;
                        if x1 != x0 {
                            acc += plane[y1 * w + x1];
                            count += 1.0;
                        }
                    }
                    oplane[y * w + x0] = acc / count;
                }
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push_node(out, ng, Op::AvgPool2Same(x))
    }

    /// Nearest-replication x2 upsampling — the adjoint of mean pooling, used
    /// as the "average unpooling" stage of the decoders.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let (oh, ow) = (h * 2, w * 2);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ci in 0..c {
            let plane = xt.plane(ci);
            let oplane = out.plane_mut(ci);
            for y in 0..h {
                for x0 in 0..w {
                    let v = plane[y * w + x0];
                    oplane[(2 * y) * ow + 2 * x0] = v;
                    oplane[(2 * y) * ow + 2 * x0 + 1] = v;
                    oplane[(2 * y + 1) * ow + 2 * x0] = v;
                    oplane[(2 * y + 1) * ow + 2 * x0 + 1] = v;
                }
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push_node(out, ng, Op::UpsampleNearest2(x))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xt = self.value(x);
        let (c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let mut out = Tensor::zeros(&[c, out_h, out_w]);
        for oy in 0..out_h {
            let (y0, y1, wy) = resize_coords(oy, out_h, h);
            for ox in 0..out_w {
                let (x0, x1, wx) = resize_coords(ox, out_w, w);
                for ci in 0..c {
                    let plane = xt.plane(ci);
                    let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                    let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                    out.set3(ci, oy, ox, top * (1.0 - wy) + bot * wy);
                }
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push_node(out, ng, Op::BilinearResize { x, out_h, out_w })
    }

    /// Local cost volume: mean over channels of `a(y,x) * b(y+dy, x+dx)` for
    /// every displacement within `radius` (zero outside `b`). Output has
    /// `(2 radius + 1)^2` channels.
    pub fn correlation(&mut self, a: Var, b: Var, radius: usize) -> Var {
        let (c, h, w) = {
            let s = self.value(a).shape();
            (s[0], s[1], s[2])
        };
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let side = 2 * radius + 1;
        let mut out = Tensor::zeros(&[side * side, h, w]);
        let at = self.value(a);
        let bt = self.value(b);
        let planes: Vec<(usize, &mut [f64])> = {
            let hw = h * w;
            out.data_mut().chunks_mut(hw).enumerate().collect()
        };
        planes.into_par_iter().for_each(|(idx, oplane)| {
            let dy = (idx / side) as isize - radius as isize;
            let dx = (idx % side) as isize - radius as isize;
            for y in 0..h as isize {
                let sy = y + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w as isize {
                    let sx = x + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let mut acc = 0.0;
                    for ci in 0..c {
                        acc += at.at3(ci, y as usize, x as usize)
                            * bt.at3(ci, sy as usize, sx as usize);
                    }
                    oplane[y as usize * w + x as usize] = acc / c as f64;
                }
            }
        });
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push_node(out, ng, Op::Correlation { a, b, radius })
    }

    /// Backward bilinear warp: `out(y, x) = map(y + v, x + u)` with zero
    /// outside the image. `flow` is [2, H, W] with channel 0 the column shift
    /// `u` and channel 1 the row shift `v`.
    pub fn warp(&mut self, map: Var, flow: Var) -> Var {
        let mt = self.value(map);
        let ft = self.value(flow);
        let (c, h, w) = (mt.shape()[0], mt.shape()[1], mt.shape()[2]);
        assert_eq!(&ft.shape()[..], &[2, h, w], "flow shape mismatch");
        let mut out = Tensor::zeros(&[c, h, w]);
        for y in 0..h {
            for x in 0..w {
                let sx = x as f64 + ft.at3(0, y, x);
                let sy = y as f64 + ft.at3(1, y, x);
                for ci in 0..c {
                    out.set3(ci, y, x, sample_bilinear_zero(mt.plane(ci), h, w, sy, sx));
                }
            }
        }
        let ng = self.nodes[map.0].needs_grad || self.nodes[flow.0].needs_grad;
        self.push_node(out, ng, Op::Warp { map, flow })
    }

    /// Windowed weighted average with constant weights, applied per channel.
    pub fn window_average(&mut self, x: Var, weights: std::sync::Arc<WindowWeights>) -> Var {
        let xt = self.value(x);
        let (c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        assert_eq!((weights.h, weights.w), (h, w), "window weight size mismatch");
        let win = weights.win;
        let r = win / 2;
        let mut out = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            let plane = xt.plane(ci);
            let oplane = out.plane_mut(ci);
            for y in 0..h {
                for x0 in 0..w {
                    let base = ((y * w + x0) * win) * win;
                    let mut acc = 0.0;
                    for dy in 0..win {
                        let ny = y as isize + dy as isize - r as isize;
                        if ny < 0 || ny >= h as isize {
                            continue;
                        }
                        for dx in 0..win {
                            let nx = x0 as isize + dx as isize - r as isize;
                            if nx < 0 || nx >= w as isize {
                                continue;
                            }
                            let wv = weights.weights[base + dy * win + dx];
                            if wv != 0.0 {
                                acc += wv * plane[ny as usize * w + nx as usize];
                            }
                        }
                    }
                    oplane[y * w + x0] = acc;
                }
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push_node(out, ng, Op::WindowAverage { x, weights })
    }

    pub(crate) fn step_back_heavy(&mut self, i: usize, g: Tensor) {
        match &self.nodes[i].op {
            Op::Conv2d { .. } | Op::ConvT2d { .. } => self.backward_conv(i, g),
            Op::SoftmaxCh(x) => {
                let x = *x;
                let p = &self.nodes[i].value;
                let (c, h, w) = (p.shape()[0], p.shape()[1], p.shape()[2]);
                let hw = h * w;
                let mut gx = Tensor::zeros(&[c, h, w]);
                for pix in 0..hw {
                    let mut dot = 0.0;
                    for ci in 0..c {
                        dot += g.data()[ci * hw + pix] * p.data()[ci * hw + pix];
                    }
                    for ci in 0..c {
                        gx.data_mut()[ci * hw + pix] =
                            p.data()[ci * hw + pix] * (g.data()[ci * hw + pix] - dot);
                    }
                }
                self.accumulate_node(x, gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                inv_std,
                normalized,
                training,
                ..
            } => {
                let (x, gamma, beta, training) = (*x, *gamma, *beta, *training);
                let inv_std = inv_std.clone();
                let (c, h, w) = {
                    let s = normalized.shape();
                    (s[0], s[1], s[2])
                };
                let hw = (h * w) as f64;
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                let mut gx = Tensor::zeros(&[c, h, w]);
                let gammas = self.value(gamma).data().to_vec();
                let Op::BatchNorm { normalized, .. } = &self.nodes[i].op else {
                    unreachable!()
                };
                for ci in 0..c {
                    let gp = g.plane(ci);
                    let np = normalized.plane(ci);
                    let sum_g: f64 = gp.iter().sum();
                    let sum_gn: f64 = gp.iter().zip(np).map(|(a, b)| a * b).sum();
                    dgamma.data_mut()[ci] = sum_gn;
                    dbeta.data_mut()[ci] = sum_g;
                    let k = gammas[ci] * inv_std[ci];
                    let gxp = &mut gx.data_mut()[ci * h * w..(ci + 1) * h * w];
                    if training {
                        for ((o, &gv), &nv) in gxp.iter_mut().zip(gp).zip(np) {
                            *o = k * (gv - sum_g / hw - nv * sum_gn / hw);
                        }
                    } else {
                        for (o, &gv) in gxp.iter_mut().zip(gp) {
                            *o = k * gv;
                        }
                    }
                }
                self.accumulate_node(x, gx);
                self.accumulate_node(gamma, dgamma);
                self.accumulate_node(beta, dbeta);
            }
            Op::AvgPool2(x) => {
                let x = *x;
                let (c, oh, ow) = {
                    let s = self.nodes[i].value.shape();
                    (s[0], s[1], s[2])
                };
                let (h, w) = (oh * 2, ow * 2);
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    let gp = g.plane(ci);
                    let gxp = gx.plane_mut(ci);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gp[oy * ow + ox] * 0.25;
                            let (y, xx) = (oy * 2, ox * 2);
                            gxp[y * w + xx] += gv;
                            gxp[y * w + xx + 1] += gv;
                            gxp[(y + 1) * w + xx] += gv;
                            gxp[(y + 1) * w + xx + 1] += gv;
                        }
                    }
                }
                self.accumulate_node(x, gx);
            }
            Op::AvgPool2Same(x) => {
                let x = *x;
                let (c, h, w) = {
                    let s = self.nodes[i].value.shape();
                    (s[0], s[1], s[2])
                };
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    let gp = g.plane(ci);
                    let gxp = gx.plane_mut(ci);
                    for y in 0..h {
                        let y1 = (y + 1).min(h - 1);
                        for x0 in 0..w {
                            let x1 = (x0 + 1).min(w - 1);
                            let mut count = 1.0;
                            if x1 != x0 {
                                count += 1.0;
                            }
                            if y1 != y {
                                count += 1.0;
                                if x1 != x0 {
                                    count += 1.0;
                                }
                            }
                            let gv = gp[y * w + x0] / count;
                            gxp[y * w + x0] += gv;
                            if x1 != x0 {
                                gxp[y * w + x1] += gv;
                            }
                            if y1 != y {
                                gxp[y1 * w + x0] += gv;
                                if x1 != x0 {
                                    gxp[y1 * w + x1] += gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate_node(x, gx);
            }
            Op::UpsampleNearest2(x) => {
                let x = *x;
                let (c, oh, ow) = {
                    let s = self.nodes[i].value.shape();
                    (s[0], s[1], s[2])
                };
                let (h, w) = (oh / 2, ow / 2);
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    let gp = g.plane(ci);
                    let gxp = gx.plane_mut(ci);
                    for y in 0..h {
                        for x0 in 0..w {
                            gxp[y * w + x0] = gp[(2 * y) * ow + 2 * x0]
                                + gp[(2 * y) * ow + 2 * x0 + 1]
                                + gp[(2 * y + 1) * ow + 2 * x0]
                                + gp[(2 * y + 1) * ow + 2 * x0 + 1];
                        }
                    }
                }
                self.accumulate_node(x, gx);
            }
            Op::BilinearResize { x, out_h, out_w } => {
                let (x, out_h, out_w) = (*x, *out_h, *out_w);
                let (c, h, w) = {
                    let s = self.value(x).shape();
                    (s[0], s[1], s[2])
                };
                let mut gx = Tensor::zeros(&[c, h, w]);
                for oy in 0..out_h {
                    let (y0, y1, wy) = resize_coords(oy, out_h, h);
                    for ox in 0..out_w {
                        let (x0, x1, wx) = resize_coords(ox, out_w, w);
                        for ci in 0..c {
                            let gv = g.at3(ci, oy, ox);
                            let gxp = gx.plane_mut(ci);
                            gxp[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                            gxp[y0 * w + x1] += gv * (1.0 - wy) * wx;
                            gxp[y1 * w + x0] += gv * wy * (1.0 - wx);
                            gxp[y1 * w + x1] += gv * wy * wx;
                        }
                    }
                }
                self.accumulate_node(x, gx);
            }
            Op::Correlation { a, b, radius } => {
                let (a, b, radius) = (*a, *b, *radius);
                let (c, h, w) = {
                    let s = self.value(a).shape();
                    (s[0], s[1], s[2])
                };
                let side = 2 * radius + 1;
                let inv_c = 1.0 / c as f64;
                let need_a = self.nodes[a.0].needs_grad;
                let need_b = self.nodes[b.0].needs_grad;
                let mut ga = Tensor::zeros(&[c, h, w]);
                let mut gb = Tensor::zeros(&[c, h, w]);
                {
                    let at = self.value(a);
                    let bt = self.value(b);
                    for idx in 0..side * side {
                        let dy = (idx / side) as isize - radius as isize;
                        let dx = (idx % side) as isize - radius as isize;
                        let gp = g.plane(idx);
                        for y in 0..h as isize {
                            let sy = y + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for x in 0..w as isize {
                                let sx = x + dx;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let gv = gp[y as usize * w + x as usize] * inv_c;
                                if gv == 0.0 {
                                    continue;
                                }
                                for ci in 0..c {
                                    if need_a {
                                        ga.data_mut()[(ci * h + y as usize) * w + x as usize] +=
                                            gv * bt.at3(ci, sy as usize, sx as usize);
                                    }
                                    if need_b {
                                        gb.data_mut()[(ci * h + sy as usize) * w + sx as usize] +=
                                            gv * at.at3(ci, y as usize, x as usize);
                                    }
                                }
                            }
                        }
                    }
                }
                if need_a {
                    self.accumulate_node(a, ga);
                }
                if need_b {
                    self.accumulate_node(b, gb);
                }
            }
            Op::Warp { map, flow } => {
                let (map, flow) = (*map, *flow);
                let (c, h, w) = {
                    let s = self.value(map).shape();
                    (s[0], s[1], s[2])
                };
                let mut gmap = Tensor::zeros(&[c, h, w]);
                let mut gflow = Tensor::zeros(&[2, h, w]);
                let need_map = self.nodes[map.0].needs_grad;
                let need_flow = self.nodes[flow.0].needs_grad;
                {
                    let mt = self.value(map);
                    let ft = self.value(flow);
                    for y in 0..h {
                        for x in 0..w {
                            let sx = x as f64 + ft.at3(0, y, x);
                            let sy = y as f64 + ft.at3(1, y, x);
                            let x0 = sx.floor();
                            let y0 = sy.floor();
                            let wx = sx - x0;
                            let wy = sy - y0;
                            let corners = [
                                (y0 as isize, x0 as isize, (1.0 - wy) * (1.0 - wx)),
                                (y0 as isize, x0 as isize + 1, (1.0 - wy) * wx),
                                (y0 as isize + 1, x0 as isize, wy * (1.0 - wx)),
                                (y0 as isize + 1, x0 as isize + 1, wy * wx),
                            ];
                            let mut du = 0.0;
                            let mut dv = 0.0;
                            for ci in 0..c {
                                let gv = g.at3(ci, y, x);
                                if gv == 0.0 {
                                    continue;
                                }
                                let plane = mt.plane(ci);
                                let fetch = |yy: isize, xx: isize| -> f64 {
                                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                        plane[yy as usize * w + xx as usize]
                                    } else {
                                        0.0
                                    }
                                };
                                if need_map {
                                    for &(cy, cx, cw) in &corners {
                                        if cy >= 0 && cy < h as isize && cx >= 0 && cx < w as isize
                                        {
                                            gmap.data_mut()
                                                [(ci * h + cy as usize) * w + cx as usize] +=
                                                gv * cw;
                                        }
                                    }
                                }
                                if need_flow {
                                    let m00 = fetch(y0 as isize, x0 as isize);
                                    let m01 = fetch(y0 as isize, x0 as isize + 1);
                                    let m10 = fetch(y0 as isize + 1, x0 as isize);
                                    let m11 = fetch(y0 as isize + 1, x0 as isize + 1);
                                    du += gv * ((1.0 - wy) * (m01 - m00) + wy * (m11 - m10));
                                    dv += gv * ((1.0 - wx) * (m10 - m00) + wx * (m11 - m01));
                                }
                            }
                            if need_flow {
                                gflow.set3(0, y, x, du);
                                gflow.set3(1, y, x, dv);
                            }
                        }
                    }
                }
                if need_map {
                    self.accumulate_node(map, gmap);
                }
                if need_flow {
                    self.accumulate_node(flow, gflow);
                }
            }
            Op::WindowAverage { x, weights } => {
                let x = *x;
                let weights = weights.clone();
                let (c, h, w) = {
                    let s = self.value(x).shape();
                    (s[0], s[1], s[2])
                };
                let win = weights.win;
                let r = win / 2;
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    let gp = g.plane(ci);
                    let gxp = gx.plane_mut(ci);
                    for y in 0..h {
                        for x0 in 0..w {
                            let gv = gp[y * w + x0];
                            if gv == 0.0 {
                                continue;
                            }
                            let base = ((y * w + x0) * win) * win;
                            for dy in 0..win {
                                let ny = y as isize + dy as isize - r as isize;
                                if ny < 0 || ny >= h as isize {
                                    continue;
                                }
                                for dx in 0..win {
                                    let nx = x0 as isize + dx as isize - r as isize;
                                    if nx < 0 || nx >= w as isize {
                                        continue;
                                    }
                                    let wv = weights.weights[base + dy * win + dx];
                                    if wv != 0.0 {
                                        gxp[ny as usize * w + nx as usize] += gv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate_node(x, gx);
            }
            _ => unreachable!("step_back_heavy on light op"),
        }
    }
}

fn resize_coords(o: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, in_len as f64 - 1.0);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear sample with zero padding outside the image.
pub fn sample_bilinear_zero(plane: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let wx = sx - x0;
    let wy = sy - y0;
    let fetch = |yy: isize, xx: isize| -> f64 {
        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
            plane[yy as usize * w + xx as usize]
        } else {
            0.0
        }
    };
    let (y0, x0) = (y0 as isize, x0 as isize);
    fetch(y0, x0) * (1.0 - wy) * (1.0 - wx)
        + fetch(y0, x0 + 1) * (1.0 - wy) * wx
        + fetch(y0 + 1, x0) * wy * (1.0 - wx)
        + fetch(y0 + 1, x0 + 1) * wy * wx
}
