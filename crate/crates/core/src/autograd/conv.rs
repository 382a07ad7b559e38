//! Grouped N-d convolution kernels (im2col + gemm).
//!
//! Everything is expressed on 3 spatial axes; 2D convolutions run with a
//! depth of 1 and a kernel depth of 1.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl ConvParams {
    pub fn new(stride: [usize; 3], padding: [usize; 3], groups: usize) -> Self {
        ConvParams {
            stride,
            padding,
            groups,
        }
    }

    /// Stride 1, "same" padding for an odd kernel.
    pub fn same(kernel: [usize; 3]) -> Self {
        ConvParams {
            stride: [1, 1, 1],
            padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
            groups: 1,
        }
    }
}

/// Fully resolved shapes for one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    assert!(
        input + 2 * padding >= kernel,
        "kernel {kernel} larger than padded input {input}+2*{padding}"
    );
    (input + 2 * padding - kernel) / stride + 1
}

impl ConvGeometry {
    pub fn new(
        batch: usize,
        in_channels: usize,
        out_channels: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        params: ConvParams,
    ) -> Self {
        let g = params.groups;
        assert!(
            g > 0 && in_channels.is_multiple_of(g) && out_channels.is_multiple_of(g),
            "groups {g} must divide in {in_channels} and out {out_channels}"
        );
        let output = [
            conv_output_len(input[0], kernel[0], params.stride[0], params.padding[0]),
            conv_output_len(input[1], kernel[1], params.stride[1], params.padding[1]),
            conv_output_len(input[2], kernel[2], params.stride[2], params.padding[2]),
        ];
        ConvGeometry {
            batch,
            in_channels,
            out_channels,
            groups: g,
            input,
            kernel,
            stride: params.stride,
            padding: params.padding,
            output,
        }
    }

    fn cin_g(&self) -> usize {
        self.in_channels / self.groups
    }

    fn cout_g(&self) -> usize {
        self.out_channels / self.groups
    }

    fn ksize(&self) -> usize {
        self.kernel.iter().product()
    }

    fn in_pos(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_pos(&self) -> usize {
        self.output.iter().product()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.cin_g() * self.ksize()
    }

    /// For each kernel tap along one axis and each output coordinate, the
    /// input coordinate (or `None` in the padding).
    fn taps(&self, axis: usize) -> Vec<Option<usize>> {
        let (k, o, s, p, n) = (
            self.kernel[axis],
            self.output[axis],
            self.stride[axis],
            self.padding[axis],
            self.input[axis],
        );
        let mut t = Vec::with_capacity(k * o);
        for kk in 0..k {
            for oo in 0..o {
                let i = (oo * s + kk) as isize - p as isize;
                t.push(if i >= 0 && (i as usize) < n {
                    Some(i as usize)
                } else {
                    None
                });
            }
        }
        t
    }

    /// Unfold one (batch, group) slab `x` = `[cin_g, D, H, W]` into
    /// `cols` = `[cin_g * K, P]`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (tz, ty, tx) = (self.taps(0), self.taps(1), self.taps(2));
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let [_, ih, iw] = self.input;
        let in_pos = self.in_pos();
        let p = self.out_pos();
        let mut row = 0;
        for c in 0..self.cin_g() {
            let xc = &x[c * in_pos..(c + 1) * in_pos];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let dst = &mut cols[row * p..(row + 1) * p];
                        let mut q = 0;
                        for z in 0..od {
                            let iz = tz[a * od + z];
                            for y in 0..oh {
                                let iy = ty[b * oh + y];
                                match (iz, iy) {
                                    (Some(iz), Some(iy)) => {
                                        let base = (iz * ih + iy) * iw;
                                        for xx in 0..ow {
                                            dst[q] = match tx[e * ow + xx] {
                                                Some(ix) => xc[base + ix],
                                                None => 0.0,
                                            };
                                            q += 1;
                                        }
                                    }
                                    _ => {
                                        dst[q..q + ow].fill(0.0);
                                        q += ow;
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatter-add `cols` back into `dx`.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (tz, ty, tx) = (self.taps(0), self.taps(1), self.taps(2));
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let [_, ih, iw] = self.input;
        let in_pos = self.in_pos();
        let p = self.out_pos();
        let mut row = 0;
        for c in 0..self.cin_g() {
            let xc = &mut dx[c * in_pos..(c + 1) * in_pos];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let src = &cols[row * p..(row + 1) * p];
                        let mut q = 0;
                        for z in 0..od {
                            let iz = tz[a * od + z];
                            for y in 0..oh {
                                let iy = ty[b * oh + y];
                                if let (Some(iz), Some(iy)) = (iz, iy) {
                                    let base = (iz * ih + iy) * iw;
                                    for xx in 0..ow {
                                        if let Some(ix) = tx[e * ow + xx] {
                                            xc[base + ix] += src[q];
                                        }
                                        q += 1;
                                    }
                                } else {
                                    q += ow;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    /// `out[b, co, P] = Σ w[co, ci, K] · x[b, ci, unfolded]`.
    pub fn forward(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let (cin_g, cout_g, k, p) = (self.cin_g(), self.cout_g(), self.ksize(), self.out_pos());
        let in_pos = self.in_pos();
        let rows = cin_g * k;
        let mut cols = vec![0.0; if self.is_pointwise() { 0 } else { rows * p }];
        for b in 0..self.batch {
            for g in 0..self.groups {
                let xg = &x[(b * self.in_channels + g * cin_g) * in_pos..][..cin_g * in_pos];
                let cols_view = if self.is_pointwise() {
                    ArrayView2::from_shape((rows, p), xg).unwrap()
                } else {
                    self.im2col(xg, &mut cols);
                    ArrayView2::from_shape((rows, p), &cols[..]).unwrap()
                };
                let wg = ArrayView2::from_shape((cout_g, rows), &w[g * cout_g * rows..][..cout_g * rows]).unwrap();
                let og = &mut out[(b * self.out_channels + g * cout_g) * p..][..cout_g * p];
                let mut ov = ArrayViewMut2::from_shape((cout_g, p), og).unwrap();
                general_mat_mul(1.0, &wg, &cols_view, 0.0, &mut ov);
            }
        }
    }

    /// Gradient w.r.t. the input; also the forward of a transposed conv.
    pub fn backward_input(&self, dy: &[f64], w: &[f64], dx: &mut [f64]) {
        let (cin_g, cout_g, k, p) = (self.cin_g(), self.cout_g(), self.ksize(), self.out_pos());
        let in_pos = self.in_pos();
        let rows = cin_g * k;
        let mut cols = vec![0.0; rows * p];
        for b in 0..self.batch {
            for g in 0..self.groups {
                let wg = ArrayView2::from_shape((cout_g, rows), &w[g * cout_g * rows..][..cout_g * rows]).unwrap();
                let dyg = ArrayView2::from_shape(
                    (cout_g, p),
                    &dy[(b * self.out_channels + g * cout_g) * p..][..cout_g * p],
                )
                .unwrap();
                let dxg = &mut dx[(b * self.in_channels + g * cin_g) * in_pos..][..cin_g * in_pos];
                if self.is_pointwise() {
                    let mut dv = ArrayViewMut2::from_shape((rows, p), dxg).unwrap();
                    general_mat_mul(1.0, &wg.t(), &dyg, 1.0, &mut dv);
                } else {
                    let mut cv = ArrayViewMut2::from_shape((rows, p), &mut cols[..]).unwrap();
                    general_mat_mul(1.0, &wg.t(), &dyg, 0.0, &mut cv);
                    self.col2im(&cols, dxg);
                }
            }
        }
    }

    /// Gradient w.r.t. the weight, accumulated into `dw`.
    pub fn backward_weight(&self, x: &[f64], dy: &[f64], dw: &mut [f64]) {
        let (cin_g, cout_g, k, p) = (self.cin_g(), self.cout_g(), self.ksize(), self.out_pos());
        let in_pos = self.in_pos();
        let rows = cin_g * k;
        let mut cols = vec![0.0; if self.is_pointwise() { 0 } else { rows * p }];
        for b in 0..self.batch {
            for g in 0..self.groups {
                let xg = &x[(b * self.in_channels + g * cin_g) * in_pos..][..cin_g * in_pos];
                let cols_view = if self.is_pointwise() {
                    ArrayView2::from_shape((rows, p), xg).unwrap()
                } else {
                    self.im2col(xg, &mut cols);
                    ArrayView2::from_shape((rows, p), &cols[..]).unwrap()
                };
                let dyg = ArrayView2::from_shape(
                    (cout_g, p),
                    &dy[(b * self.out_channels + g * cout_g) * p..][..cout_g * p],
                )
                .unwrap();
                let dwg = &mut dw[g * cout_g * rows..][..cout_g * rows];
                let mut dv = ArrayViewMut2::from_shape((cout_g, rows), dwg).unwrap();
                general_mat_mul(1.0, &dyg, &cols_view.t(), 1.0, &mut dv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::Tensor;

    /// Direct definition of a grouped cross-correlation.
    fn naive(geom: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
        let [id, ih, iw] = geom.input;
        let [od, oh, ow] = geom.output;
        let [kd, kh, kw] = geom.kernel;
        let cin_g = geom.in_channels / geom.groups;
        let cout_g = geom.out_channels / geom.groups;
        let mut out = vec![0.0; geom.batch * geom.out_channels * od * oh * ow];
        for b in 0..geom.batch {
            for co in 0..geom.out_channels {
                let g = co / cout_g;
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..cin_g {
                                for a in 0..kd {
                                    for c in 0..kh {
                                        for e in 0..kw {
                                            let iz = (z * geom.stride[0] + a) as isize - geom.padding[0] as isize;
                                            let iy = (y * geom.stride[1] + c) as isize - geom.padding[1] as isize;
                                            let ix = (xx * geom.stride[2] + e) as isize - geom.padding[2] as isize;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= id as isize
                                                || iy >= ih as isize
                                                || ix >= iw as isize
                                            {
                                                continue;
                                            }
                                            let cin = g * cin_g + ci;
                                            let xv = x[(((b * geom.in_channels + cin) * id + iz as usize) * ih
                                                + iy as usize)
                                                * iw
                                                + ix as usize];
                                            let wv = w[(((co * cin_g + ci) * kd + a) * kh + c) * kw + e];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            out[(((b * geom.out_channels + co) * od + z) * oh + y) * ow + xx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn geometries() -> Vec<ConvGeometry> {
        vec![
            ConvGeometry::new(2, 4, 6, [3, 5, 4], [3, 3, 3], ConvParams::same([3, 3, 3])),
            ConvGeometry::new(1, 4, 4, [4, 6, 6], [3, 3, 3], ConvParams::new([2, 2, 2], [1, 1, 1], 4)),
            ConvGeometry::new(2, 6, 4, [1, 7, 5], [1, 3, 3], ConvParams::new([1, 2, 2], [0, 1, 1], 2)),
            ConvGeometry::new(1, 3, 5, [2, 3, 3], [1, 1, 1], ConvParams::new([1, 1, 1], [0, 0, 0], 1)),
            ConvGeometry::new(1, 2, 2, [2, 6, 6], [1, 5, 5], ConvParams::new([1, 1, 1], [0, 2, 2], 1)),
        ]
    }

    #[test]
    fn forward_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for geom in geometries() {
            let x = Tensor::rand_uniform(&[geom.batch * geom.in_channels * geom.in_pos()], -1.0, 1.0, &mut rng);
            let w = Tensor::rand_uniform(&[geom.weight_len()], -1.0, 1.0, &mut rng);
            let mut out = vec![0.0; geom.batch * geom.out_channels * geom.out_pos()];
            geom.forward(x.data(), w.data(), &mut out);
            let expect = naive(&geom, x.data(), w.data());
            for (a, b) in out.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "{geom:?}");
            }
        }
    }

    /// <dy, conv(x)> = <backward_input(dy), x> and likewise for the weight.
    #[test]
    fn backward_kernels_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for geom in geometries() {
            let nx = geom.batch * geom.in_channels * geom.in_pos();
            let ny = geom.batch * geom.out_channels * geom.out_pos();
            let x = Tensor::rand_uniform(&[nx], -1.0, 1.0, &mut rng);
            let w = Tensor::rand_uniform(&[geom.weight_len()], -1.0, 1.0, &mut rng);
            let dy = Tensor::rand_uniform(&[ny], -1.0, 1.0, &mut rng);
            let mut y = vec![0.0; ny];
            geom.forward(x.data(), w.data(), &mut y);
            let lhs: f64 = y.iter().zip(dy.data()).map(|(a, b)| a * b).sum();

            let mut dx = vec![0.0; nx];
            geom.backward_input(dy.data(), w.data(), &mut dx);
            let rhs_x: f64 = dx.iter().zip(x.data()).map(|(a, b)| a * b).sum();
            let mut dw = vec![0.0; geom.weight_len()];
            geom.backward_weight(x.data(), dy.data(), &mut dw);
            let rhs_w: f64 = dw.iter().zip(w.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_x).abs() < 1e-9, "{geom:?}");
            assert!((lhs - rhs_w).abs() < 1e-9, "{geom:?}");
        }
    }
}
