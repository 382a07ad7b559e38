use std::rc::Rc;

use super::conv::{ConvGeometry, ConvParams};
use super::{Graph, Var};
use crate::tensor::{numel, strides, Tensor};

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast needs equal rank: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "shapes {a:?} and {b:?} do not broadcast");
            x.max(y)
        })
        .collect()
}

/// For every flat index of `out`, the flat index of `inp` it reads.
fn broadcast_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    if out == inp {
        return (0..numel(out)).collect();
    }
    let in_strides = strides(inp);
    let eff: Vec<usize> = inp
        .iter()
        .zip(&in_strides)
        .map(|(&n, &s)| if n == 1 { 0 } else { s })
        .collect();
    let mut map = Vec::with_capacity(numel(out));
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..numel(out) {
        map.push(off);
        for axis in (0..out.len()).rev() {
            idx[axis] += 1;
            off += eff[axis];
            if idx[axis] < out[axis] {
                break;
            }
            off -= eff[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    map
}

fn reduce_by_map(grad: &[f64], map: &[usize], shape: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(shape);
    let d = out.data_mut();
    for (g, &m) in grad.iter().zip(map) {
        d[m] += g;
    }
    out
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<f64>,
}

/// `[B, C, rest...]` → (B, C, prod(rest)).
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected [B, C, ...], got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

/// Rank 4 or 5 → (batch, channels, [d, h, w]).
fn spatial3(shape: &[usize]) -> (usize, usize, [usize; 3]) {
    match shape.len() {
        4 => (shape[0], shape[1], [1, shape[2], shape[3]]),
        5 => (shape[0], shape[1], [shape[2], shape[3], shape[4]]),
        _ => panic!("convolution input must be rank 4 or 5, got {shape:?}"),
    }
}

fn kernel3(shape: &[usize]) -> [usize; 3] {
    match shape.len() {
        4 => [1, shape[2], shape[3]],
        5 => [shape[2], shape[3], shape[4]],
        _ => panic!("kernel must be rank 4 or 5, got {shape:?}"),
    }
}

fn with_spatial(rank: usize, b: usize, c: usize, s: [usize; 3]) -> Vec<usize> {
    if rank == 4 {
        assert_eq!(s[0], 1);
        vec![b, c, s[1], s[2]]
    } else {
        vec![b, c, s[0], s[1], s[2]]
    }
}

fn add_bias(out: &mut Tensor, bias: &Tensor) {
    let (b, c, inner) = channel_layout(out.shape());
    assert_eq!(bias.numel(), c, "bias length");
    let bv = bias.data().to_vec();
    let d = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            for v in &mut d[(bi * c + ci) * inner..][..inner] {
                *v += bv[ci];
            }
        }
    }
}

fn bias_grad(g: &Tensor) -> Tensor {
    let (b, c, inner) = channel_layout(g.shape());
    let mut out = vec![0.0; c];
    for bi in 0..b {
        for (ci, acc) in out.iter_mut().enumerate() {
            *acc += g.data()[(bi * c + ci) * inner..][..inner].iter().sum::<f64>();
        }
    }
    Tensor::from_vec(&[c], out).unwrap()
}

impl Graph {
    fn binary_broadcast(
        &self,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64) -> f64,
        db: fn(f64, f64) -> f64,
    ) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(va.shape(), vb.shape());
        let ma = broadcast_map(&out_shape, va.shape());
        let mb = broadcast_map(&out_shape, vb.shape());
        let data: Vec<f64> = ma
            .iter()
            .zip(&mb)
            .map(|(&i, &j)| f(va.data()[i], vb.data()[j]))
            .collect();
        let out = Tensor::from_vec(&out_shape, data).unwrap();
        self.push(out, &[a, b], move |g, needs| {
            let ga = needs[0].then(|| {
                let gd: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(ma.iter().zip(&mb))
                    .map(|(&gv, (&i, &j))| gv * da(va.data()[i], vb.data()[j]))
                    .collect();
                reduce_by_map(&gd, &ma, va.shape())
            });
            let gb = needs[1].then(|| {
                let gd: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(ma.iter().zip(&mb))
                    .map(|(&gv, (&i, &j))| gv * db(va.data()[i], vb.data()[j]))
                    .collect();
                reduce_by_map(&gd, &mb, vb.shape())
            });
            vec![ga, gb]
        })
    }

    /// Elementwise sum with same-rank broadcasting over size-1 axes.
    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_broadcast(a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary_broadcast(a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    /// Elementwise product with same-rank broadcasting over size-1 axes.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_broadcast(a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let vx = self.value(x);
        let out = vx.map(f);
        let vy = Rc::new(out.clone());
        self.push(out, &[x], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(vx.data().iter().zip(vy.data()))
                .map(|(&gv, (&xv, &yv))| gv * df(xv, yv))
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), data).unwrap())]
        })
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v * c, move |_, _| c)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v < 0.0 { 0.0 } else { v },
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), |_, y| y * (1.0 - y))
    }

    /// `relu6(x + 3) / 6`.
    pub fn hard_sigmoid(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| ((v + 3.0).clamp(0.0, 6.0)) / 6.0,
            |x, _| if x > -3.0 && x < 3.0 { 1.0 / 6.0 } else { 0.0 },
        )
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let vx = self.value(x);
        let in_shape = vx.shape().to_vec();
        let out = (*vx).clone().reshape(shape).expect("reshape size");
        self.push(out, &[x], move |g, _| vec![Some(g.clone().reshape(&in_shape).unwrap())])
    }

    pub fn sum(&self, x: Var) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        self.push(Tensor::scalar(vx.sum()), &[x], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    /// `Σ x ⊙ w` for a constant weight tensor.
    pub fn weighted_sum(&self, x: Var, w: &Tensor) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape(), w.shape(), "weighted_sum shape");
        let s: f64 = vx.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        let w = w.clone();
        self.push(Tensor::scalar(s), &[x], move |g, _| vec![Some(w.scale(g.item()))])
    }

    pub fn cat(&self, xs: &[Var], axis: usize) -> Var {
        let vals: Vec<Rc<Tensor>> = xs.iter().map(|&x| self.value(x)).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::cat(&refs, axis);
        let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        self.push(out, xs, move |g, needs| {
            let mut start = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&n, &need)| {
                    let part = need.then(|| g.narrow(axis, start, n));
                    start += n;
                    part
                })
                .collect()
        })
    }

    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let in_shape = vx.shape().to_vec();
        let out = vx.narrow(axis, start, len);
        self.push(out, &[x], move |g, _| {
            let outer: usize = in_shape[..axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let n = in_shape[axis];
            let mut full = Tensor::zeros(&in_shape);
            let d = full.data_mut();
            for o in 0..outer {
                let src = &g.data()[o * len * inner..][..len * inner];
                d[(o * n + start) * inner..][..len * inner].copy_from_slice(src);
            }
            vec![Some(full)]
        })
    }

    /// Mean over every axis after the channel axis, keeping them as size 1.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (b, c, inner) = channel_layout(vx.shape());
        let mut shape = vx.shape().to_vec();
        for s in &mut shape[2..] {
            *s = 1;
        }
        let data: Vec<f64> = (0..b * c)
            .map(|i| vx.data()[i * inner..][..inner].iter().sum::<f64>() / inner as f64)
            .collect();
        let in_shape = vx.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data).unwrap(), &[x], move |g, _| {
            let mut out = Tensor::zeros(&in_shape);
            let d = out.data_mut();
            for i in 0..b * c {
                let v = g.data()[i] / inner as f64;
                d[i * inner..][..inner].fill(v);
            }
            vec![Some(out)]
        })
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Tensor::zeros(&shape);
        {
            let d = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let m = (0..n).map(|k| vx.data()[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for k in 0..n {
                        let e = (vx.data()[at(k)] - m).exp();
                        d[at(k)] = e;
                        z += e;
                    }
                    for k in 0..n {
                        d[at(k)] /= z;
                    }
                }
            }
        }
        let vy = Rc::new(out.clone());
        self.push(out, &[x], move |g, _| {
            let mut gx = Tensor::zeros(&shape);
            let d = gx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| g.data()[at(k)] * vy.data()[at(k)]).sum();
                    for k in 0..n {
                        d[at(k)] = vy.data()[at(k)] * (g.data()[at(k)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Grouped cross-correlation. `x` is `[B, Cin, H, W]` with a
    /// `[Cout, Cin/g, kh, kw]` kernel, or the rank-5 analogue.
    pub fn conv(&self, x: Var, w: Var, bias: Option<Var>, params: ConvParams) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let rank = vx.rank();
        assert_eq!(vw.rank(), rank, "kernel rank must match input rank");
        if rank == 4 {
            assert!(
                params.stride[0] == 1 && params.padding[0] == 0,
                "2D conv with depth params"
            );
        }
        let (b, cin, input) = spatial3(vx.shape());
        let cout = vw.dim(0);
        assert_eq!(
            vw.dim(1) * params.groups,
            cin,
            "kernel in-channels {:?} vs input {:?}",
            vw.shape(),
            vx.shape()
        );
        let geom = ConvGeometry::new(b, cin, cout, input, kernel3(vw.shape()), params);
        let mut out = Tensor::zeros(&with_spatial(rank, b, cout, geom.output));
        geom.forward(vx.data(), vw.data(), out.data_mut());
        if let Some(bias) = bias {
            add_bias(&mut out, &self.value(bias));
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push(out, &parents, move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = Tensor::zeros(vx.shape());
                geom.backward_input(g.data(), vw.data(), gx.data_mut());
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = Tensor::zeros(vw.shape());
                geom.backward_weight(vx.data(), g.data(), gw.data_mut());
                gw
            });
            let mut res = vec![gx, gw];
            if needs.len() == 3 {
                res.push(needs[2].then(|| bias_grad(g)));
            }
            res
        })
    }

    /// Transposed convolution with a `[Cin, Cout/g, k...]` kernel. Output
    /// length per axis is `(in - 1) * stride - 2 * padding + kernel`.
    pub fn conv_transpose(&self, x: Var, w: Var, bias: Option<Var>, params: ConvParams) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let rank = vx.rank();
        assert_eq!(vw.rank(), rank, "kernel rank must match input rank");
        let (b, cin, input) = spatial3(vx.shape());
        assert_eq!(vw.dim(0), cin, "transposed kernel in-channels");
        let cout = vw.dim(1) * params.groups;
        let kernel = kernel3(vw.shape());
        let out_sp = [0, 1, 2].map(|a| (input[a] - 1) * params.stride[a] + kernel[a] - 2 * params.padding[a]);
        // The adjoint conv maps the output shape back to the input shape.
        let geom = ConvGeometry::new(b, cout, cin, out_sp, kernel, params);
        assert_eq!(geom.output, input, "transposed conv geometry is not invertible");
        let mut out = Tensor::zeros(&with_spatial(rank, b, cout, out_sp));
        geom.backward_input(vx.data(), vw.data(), out.data_mut());
        if let Some(bias) = bias {
            add_bias(&mut out, &self.value(bias));
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push(out, &parents, move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = Tensor::zeros(vx.shape());
                geom.forward(g.data(), vw.data(), gx.data_mut());
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = Tensor::zeros(vw.shape());
                geom.backward_weight(g.data(), vx.data(), gw.data_mut());
                gw
            });
            let mut res = vec![gx, gw];
            if needs.len() == 3 {
                res.push(needs[2].then(|| bias_grad(g)));
            }
            res
        })
    }

    /// Batch norm using the statistics of `x` itself (over every axis
    /// except the channel axis).
    pub fn batch_norm_train(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BnStats) {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let (b, c, inner) = channel_layout(vx.shape());
        let n = (b * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                s += vx.data()[(bi * c + ci) * inner..][..inner].iter().sum::<f64>();
            }
            let m = s / n;
            let mut ss = 0.0;
            for bi in 0..b {
                ss += vx.data()[(bi * c + ci) * inner..][..inner]
                    .iter()
                    .map(|v| (v - m) * (v - m))
                    .sum::<f64>();
            }
            mean[ci] = m;
            var[ci] = ss / n;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(vx.shape());
        let mut out = Tensor::zeros(vx.shape());
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * inner;
                for i in base..base + inner {
                    let h = (vx.data()[i] - mean[ci]) * inv_std[ci];
                    xhat.data_mut()[i] = h;
                    out.data_mut()[i] = h * vg.data()[ci] + vb.data()[ci];
                }
            }
        }
        let stats = BnStats {
            mean: mean.clone(),
            var: var
                .iter()
                .map(|v| if n > 1.0 { v * n / (n - 1.0) } else { *v })
                .collect(),
        };
        let y = self.push(out, &[x, gamma, beta], move |g, needs| {
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * inner;
                    for i in base..base + inner {
                        sum_g[ci] += g.data()[i];
                        sum_gx[ci] += g.data()[i] * xhat.data()[i];
                    }
                }
            }
            let gx = needs[0].then(|| {
                let mut gx = Tensor::zeros(xhat.shape());
                for bi in 0..b {
                    for ci in 0..c {
                        let k = vg.data()[ci] * inv_std[ci] / n;
                        let base = (bi * c + ci) * inner;
                        for i in base..base + inner {
                            gx.data_mut()[i] = k * (n * g.data()[i] - sum_g[ci] - xhat.data()[i] * sum_gx[ci]);
                        }
                    }
                }
                gx
            });
            let gg = needs[1].then(|| Tensor::from_vec(&[c], sum_gx.clone()).unwrap());
            let gb = needs[2].then(|| Tensor::from_vec(&[c], sum_g.clone()).unwrap());
            vec![gx, gg, gb]
        });
        (y, stats)
    }

    /// Batch norm with fixed statistics: a per-channel affine map.
    pub fn batch_norm_eval(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Var {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let (b, c, inner) = channel_layout(vx.shape());
        let scale: Vec<f64> = (0..c).map(|ci| vg.data()[ci] / (var[ci] + eps).sqrt()).collect();
        let shift: Vec<f64> = (0..c).map(|ci| vb.data()[ci] - mean[ci] * scale[ci]).collect();
        let mut out = Tensor::zeros(vx.shape());
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * inner;
                for i in base..base + inner {
                    out.data_mut()[i] = vx.data()[i] * scale[ci] + shift[ci];
                }
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        self.push(out, &[x, gamma, beta], move |g, needs| {
            let mut gx = Tensor::zeros(vx.shape());
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * inner;
                    for i in base..base + inner {
                        let gv = g.data()[i];
                        gx.data_mut()[i] = gv * scale[ci];
                        gg[ci] += gv * (vx.data()[i] - mean[ci]) * inv_std[ci];
                        gb[ci] += gv;
                    }
                }
            }
            vec![
                needs[0].then_some(gx),
                needs[1].then(|| Tensor::from_vec(&[c], gg).unwrap()),
                needs[2].then(|| Tensor::from_vec(&[c], gb).unwrap()),
            ]
        })
    }

    /// Divide each channel group of every pixel of `[B, C, H, W]` by its
    /// L2 norm plus `eps`.
    pub fn group_l2_normalize(&self, x: Var, groups: usize, eps: f64) -> Var {
        let vx = self.value(x);
        let (b, c, inner) = channel_layout(vx.shape());
        assert_eq!(c % groups, 0, "groups must divide channels");
        let cg = c / groups;
        let mut norms = vec![0.0; b * groups * inner];
        let mut out = Tensor::zeros(vx.shape());
        for bi in 0..b {
            for gi in 0..groups {
                for p in 0..inner {
                    let at = |k: usize| (bi * c + gi * cg + k) * inner + p;
                    let nrm = (0..cg).map(|k| vx.data()[at(k)].powi(2)).sum::<f64>().sqrt();
                    norms[(bi * groups + gi) * inner + p] = nrm;
                    for k in 0..cg {
                        out.data_mut()[at(k)] = vx.data()[at(k)] / (nrm + eps);
                    }
                }
            }
        }
        self.push(out, &[x], move |g, _| {
            let mut gx = Tensor::zeros(vx.shape());
            for bi in 0..b {
                for gi in 0..groups {
                    for p in 0..inner {
                        let at = |k: usize| (bi * c + gi * cg + k) * inner + p;
                        let nrm = norms[(bi * groups + gi) * inner + p];
                        let s = nrm + eps;
                        let dot: f64 = (0..cg).map(|k| vx.data()[at(k)] * g.data()[at(k)]).sum();
                        for k in 0..cg {
                            let mut v = g.data()[at(k)] / s;
                            if nrm > 0.0 {
                                v -= vx.data()[at(k)] * dot / (s * s * nrm);
                            }
                            gx.data_mut()[at(k)] = v;
                        }
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Group-wise correlation volume `[B, G, D, H, W]` between
    /// `[B, C, H, W]` features: `(G/C) <l_g(y,x), r_g(y,x-d)>`, zero where
    /// `x - d < 0`.
    pub fn group_correlation(&self, left: Var, right: Var, groups: usize, levels: usize) -> Var {
        let (vl, vr) = (self.value(left), self.value(right));
        assert_eq!(vl.shape(), vr.shape(), "left/right feature shapes");
        assert_eq!(vl.rank(), 4, "features must be [B, C, H, W]");
        let [b, c, h, w] = [vl.dim(0), vl.dim(1), vl.dim(2), vl.dim(3)];
        assert_eq!(c % groups, 0, "groups must divide channels");
        let cg = c / groups;
        let norm = groups as f64 / c as f64;
        let mut out = Tensor::zeros(&[b, groups, levels, h, w]);
        let hw = h * w;
        {
            let o = out.data_mut();
            for bi in 0..b {
                for gi in 0..groups {
                    for d in 0..levels.min(w) {
                        let obase = ((bi * groups + gi) * levels + d) * hw;
                        for k in 0..cg {
                            let cb = (bi * c + gi * cg + k) * hw;
                            let (lc, rc) = (&vl.data()[cb..cb + hw], &vr.data()[cb..cb + hw]);
                            for y in 0..h {
                                for x in d..w {
                                    o[obase + y * w + x] += norm * lc[y * w + x] * rc[y * w + x - d];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(out, &[left, right], move |g, needs| {
            let mut gl = Tensor::zeros(vl.shape());
            let mut gr = Tensor::zeros(vr.shape());
            for bi in 0..b {
                for gi in 0..groups {
                    for d in 0..levels.min(w) {
                        let gbase = ((bi * groups + gi) * levels + d) * hw;
                        let gs = &g.data()[gbase..gbase + hw];
                        for k in 0..cg {
                            let cb = (bi * c + gi * cg + k) * hw;
                            for y in 0..h {
                                for x in d..w {
                                    let gv = norm * gs[y * w + x];
                                    if needs[0] {
                                        gl.data_mut()[cb + y * w + x] += gv * vr.data()[cb + y * w + x - d];
                                    }
                                    if needs[1] {
                                        gr.data_mut()[cb + y * w + x - d] += gv * vl.data()[cb + y * w + x];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![needs[0].then_some(gl), needs[1].then_some(gr)]
        })
    }

    /// Expected disparity over the `k` highest entries of `[B, D, H, W]`
    /// under a softmax of those entries. Ties go to the lower index.
    pub fn topk_regression(&self, volume: Var, k: usize) -> Var {
        let vv = self.value(volume);
        assert_eq!(vv.rank(), 4, "volume must be [B, D, H, W]");
        let [b, levels, h, w] = [vv.dim(0), vv.dim(1), vv.dim(2), vv.dim(3)];
        assert!(k >= 1 && k <= levels, "k out of range");
        let hw = h * w;
        let mut out = Tensor::zeros(&[b, h, w]);
        // Per pixel: selected indices and their softmax weights.
        let mut sel = vec![0usize; b * hw * k];
        let mut wts = vec![0.0; b * hw * k];
        let mut order: Vec<usize> = Vec::with_capacity(levels);
        for bi in 0..b {
            for p in 0..hw {
                let val = |d: usize| vv.data()[(bi * levels + d) * hw + p];
                order.clear();
                order.extend(0..levels);
                // Stable sort keeps lower indices first among equal values.
                order.sort_by(|&i, &j| val(j).partial_cmp(&val(i)).unwrap_or(std::cmp::Ordering::Equal));
                let top = &order[..k];
                let m = val(top[0]);
                let mut z = 0.0;
                let slot = (bi * hw + p) * k;
                for (t, &d) in top.iter().enumerate() {
                    let e = if val(d) == f64::NEG_INFINITY {
                        0.0
                    } else {
                        (val(d) - m).exp()
                    };
                    wts[slot + t] = e;
                    sel[slot + t] = d;
                    z += e;
                }
                let mut est = 0.0;
                for t in 0..k {
                    wts[slot + t] /= z;
                    est += sel[slot + t] as f64 * wts[slot + t];
                }
                out.data_mut()[bi * hw + p] = est;
            }
        }
        let vshape = vv.shape().to_vec();
        let est = Rc::new(out.clone());
        self.push(out, &[volume], move |g, _| {
            let mut gv = Tensor::zeros(&vshape);
            for bi in 0..b {
                for p in 0..hw {
                    let slot = (bi * hw + p) * k;
                    let gp = g.data()[bi * hw + p];
                    let e = est.data()[bi * hw + p];
                    for t in 0..k {
                        let d = sel[slot + t];
                        gv.data_mut()[(bi * levels + d) * hw + p] += gp * wts[slot + t] * (d as f64 - e);
                    }
                }
            }
            vec![Some(gv)]
        })
    }

    /// Convex 4× upsampling. `disp` is `[B, h, w]`, `weights` is
    /// `[B, 9, 4, 4, h, w]`; output is `[B, 4h, 4w]` with
    /// `out = scale · Σ_n w_n · disp(neighbor_n)` over the replicate-padded
    /// 3×3 neighborhood.
    pub fn convex_upsample(&self, disp: Var, weights: Var, scale: f64) -> Var {
        let (vd, vw) = (self.value(disp), self.value(weights));
        let [b, h, w] = [vd.dim(0), vd.dim(1), vd.dim(2)];
        assert_eq!(vw.shape(), &[b, 9, 4, 4, h, w], "upsample weight shape");
        let (oh, ow) = (4 * h, 4 * w);
        let hw = h * w;
        let nb = move |y: usize, x: usize, n: usize| -> usize {
            let yy = (y as isize + n as isize / 3 - 1).clamp(0, h as isize - 1) as usize;
            let xx = (x as isize + n as isize % 3 - 1).clamp(0, w as isize - 1) as usize;
            yy * w + xx
        };
        let widx = move |bi: usize, n: usize, i: usize, j: usize, p: usize| (((bi * 9 + n) * 4 + i) * 4 + j) * hw + p;
        let mut out = Tensor::zeros(&[b, oh, ow]);
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    for i in 0..4 {
                        for j in 0..4 {
                            let mut acc = 0.0;
                            for n in 0..9 {
                                acc += vw.data()[widx(bi, n, i, j, p)] * vd.data()[bi * hw + nb(y, x, n)];
                            }
                            out.data_mut()[(bi * oh + 4 * y + i) * ow + 4 * x + j] = scale * acc;
                        }
                    }
                }
            }
        }
        self.push(out, &[disp, weights], move |g, needs| {
            let mut gd = Tensor::zeros(vd.shape());
            let mut gw = Tensor::zeros(vw.shape());
            for bi in 0..b {
                for y in 0..h {
                    for x in 0..w {
                        let p = y * w + x;
                        for i in 0..4 {
                            for j in 0..4 {
                                let go = scale * g.data()[(bi * oh + 4 * y + i) * ow + 4 * x + j];
                                for n in 0..9 {
                                    let q = bi * hw + nb(y, x, n);
                                    let wi = widx(bi, n, i, j, p);
                                    gd.data_mut()[q] += go * vw.data()[wi];
                                    gw.data_mut()[wi] += go * vd.data()[q];
                                }
                            }
                        }
                    }
                }
            }
            vec![needs[0].then_some(gd), needs[1].then_some(gw)]
        })
    }

    /// Mean smooth-L1 of `target - pred` over pixels where `mask` is set.
    /// Returns a constant zero when the mask is empty.
    pub fn masked_smooth_l1(&self, pred: Var, target: &Tensor, mask: &[bool]) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "prediction/target shape");
        assert_eq!(mask.len(), vp.numel(), "mask length");
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return self.constant(Tensor::scalar(0.0));
        }
        let mut total = 0.0;
        let mut dloss = vec![0.0; vp.numel()];
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                continue;
            }
            let e = target.data()[i] - vp.data()[i];
            if e.abs() < 1.0 {
                total += 0.5 * e * e;
                dloss[i] = -e;
            } else {
                total += e.abs() - 0.5;
                dloss[i] = -e.signum();
            }
        }
        let n = count as f64;
        let shape = vp.shape().to_vec();
        self.push(Tensor::scalar(total / n), &[pred], move |g, _| {
            let s = g.item() / n;
            vec![Some(
                Tensor::from_vec(&shape, dloss.iter().map(|d| d * s).collect()).unwrap(),
            )]
        })
    }
}
