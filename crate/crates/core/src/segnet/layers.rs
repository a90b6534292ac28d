//! Dense CHW tensors and the forward/backward kernels the network needs.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

pub trait Scalar:
    Float + FromPrimitive + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("representable")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![T::zero(); c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Self { c, h, w, data }
    }

    pub fn plane(&self, c: usize) -> &[T] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }

    /// Spatial sub-window `[y0, y0+h) x [x0, x0+w)` of every channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        let mut out = Self::zeros(self.c, h, w);
        for c in 0..self.c {
            for y in 0..h {
                let src = (c * self.h + y0 + y) * self.w + x0;
                let dst = (c * h + y) * w;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::from(*v).expect("cast")).collect(),
        }
    }
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

/// Dot product with eight independent partial sums so it vectorizes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += xa[i] * xb[i];
        }
    }
    let mut s = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    for v in acc {
        s += v;
    }
    s
}

/// Valid output range along one axis for kernel offset `d`.
#[inline]
fn span(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// `[cout][cin][k][k]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv<T> {
    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        Self { cin, cout, k, weight: vec![T::zero(); cout * cin * k * k], bias: vec![T::zero(); cout] }
    }

    pub fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    #[inline]
    fn widx(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.cin + ci) * self.k + ky) * self.k + kx
    }

    /// Stride-1 convolution with zero "same" padding.
    ///
    /// The input is copied into zero-bordered planes so each tap becomes one
    /// contiguous axpy over a flattened row range; the output is built in
    /// padded-width rows and the border columns are dropped at the end.
    pub fn forward(&self, input: &Tensor<T>) -> Tensor<T> {
        assert_eq!(input.c, self.cin, "conv input channels");
        const BLOCK: usize = 1024;
        let (h, w, k) = (input.h, input.w, self.k);
        let p = k / 2;
        let wp = w + 2 * p;
        // tail slack so the last taps of junk columns stay in bounds
        let stride = (h + 2 * p) * wp + k;
        let mut padded = vec![T::zero(); self.cin * stride];
        for ci in 0..self.cin {
            let src = input.plane(ci);
            let dst = &mut padded[ci * stride..(ci + 1) * stride];
            for y in 0..h {
                let o = (y + p) * wp + p;
                dst[o..o + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
        let n = h * wp;
        let mut acc = vec![T::zero(); n];
        let mut out = Tensor::zeros(self.cout, h, w);
        for co in 0..self.cout {
            acc.fill(self.bias[co]);
            for start in (0..n).step_by(BLOCK) {
                let end = (start + BLOCK).min(n);
                let dst = &mut acc[start..end];
                for ci in 0..self.cin {
                    let src = &padded[ci * stride..(ci + 1) * stride];
                    let taps = &self.weight[self.widx(co, ci, 0, 0)..][..k * k];
                    for ky in 0..k {
                        let row = &taps[ky * k..(ky + 1) * k];
                        let off = ky * wp;
                        if k == 3 {
                            let len = end - start;
                            let s0 = &src[start + off..][..len];
                            let s1 = &src[start + off + 1..][..len];
                            let s2 = &src[start + off + 2..][..len];
                            let (w0, w1, w2) = (row[0], row[1], row[2]);
                            for i in 0..len {
                                dst[i] += w0 * s0[i] + w1 * s1[i] + w2 * s2[i];
                            }
                        } else {
                            for (kx, &wv) in row.iter().enumerate() {
                                axpy(wv, &src[start + off + kx..end + off + kx], dst);
                            }
                        }
                    }
                }
            }
            let plane = out.plane_mut(co);
            for y in 0..h {
                plane[y * w..(y + 1) * w].copy_from_slice(&acc[y * wp..y * wp + w]);
            }
        }
        out
    }

    /// Returns the input gradient and accumulates parameter gradients.
    pub fn backward(&self, input: &Tensor<T>, dout: &Tensor<T>, grad: &mut Conv<T>) -> Tensor<T> {
        let (h, w, pad) = (input.h, input.w, (self.k / 2) as isize);
        let mut din = Tensor::zeros(self.cin, h, w);
        for co in 0..self.cout {
            let dp = dout.plane(co);
            grad.bias[co] += dp.iter().fold(T::zero(), |a, &b| a + b);
            for ci in 0..self.cin {
                let ip = input.plane(ci);
                for ky in 0..self.k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = span(h, dy);
                    for kx in 0..self.k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = span(w, dx);
                        let idx = self.widx(co, ci, ky, kx);
                        let wv = self.weight[idx];
                        let s0 = (x0 as isize + dx) as usize;
                        let n = x1 - x0;
                        let mut gw = T::zero();
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let drow = &dp[y * w + x0..y * w + x1];
                            gw += dot(drow, &ip[sy * w + s0..sy * w + s0 + n]);
                            let dst = &mut din.data[(ci * h + sy) * w + s0..(ci * h + sy) * w + s0 + n];
                            axpy(wv, drow, dst);
                        }
                        grad.weight[idx] += gw;
                    }
                }
            }
        }
        din
    }
}

pub fn relu<T: Scalar>(t: &mut Tensor<T>) {
    for v in &mut t.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient through ReLU given the activated output.
pub fn relu_backward<T: Scalar>(out: &Tensor<T>, dout: &mut Tensor<T>) {
    for (g, &o) in dout.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 max-pool, stride 2, ceil mode ("same" padding on odd sizes).
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (h, w) = (input.h, input.w);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(input.c, oh, ow);
    let mut arg = vec![0u32; input.c * oh * ow];
    for c in 0..input.c {
        let ip = input.plane(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut bi = 0usize;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for x in 2 * ox..(2 * ox + 2).min(w) {
                        let v = ip[y * w + x];
                        if v > best {
                            best = v;
                            bi = y * w + x;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out.data[o] = best;
                arg[o] = bi as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(dout: &Tensor<T>, arg: &[u32], h: usize, w: usize) -> Tensor<T> {
    let mut din = Tensor::zeros(dout.c, h, w);
    let n = dout.h * dout.w;
    for c in 0..dout.c {
        for i in 0..n {
            let o = c * n + i;
            din.data[c * h * w + arg[o] as usize] += dout.data[o];
        }
    }
    din
}

/// Nearest-neighbour 2x upsampling, cropped to `h x w`.
pub fn upsample2<T: Scalar>(input: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(input.c, h, w);
    for c in 0..input.c {
        for y in 0..h {
            for x in 0..w {
                out.data[(c * h + y) * w + x] = input.at(c, y / 2, x / 2);
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dout: &Tensor<T>, ih: usize, iw: usize) -> Tensor<T> {
    let mut din = Tensor::zeros(dout.c, ih, iw);
    for c in 0..dout.c {
        for y in 0..dout.h {
            for x in 0..dout.w {
                din.data[(c * ih + y / 2) * iw + x / 2] += dout.at(c, y, x);
            }
        }
    }
    din
}

pub fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert!(a.h == b.h && a.w == b.w, "concat spatial mismatch");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.c + b.c, a.h, a.w, data)
}

pub fn split<T: Scalar>(t: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let n = t.h * t.w;
    let a = Tensor::from_vec(ca, t.h, t.w, t.data[..ca * n].to_vec());
    let b = Tensor::from_vec(t.c - ca, t.h, t.w, t.data[ca * n..].to_vec());
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_naive() {
        let mut conv = Conv::<f64>::zeros(2, 3, 3);
        for (i, w) in conv.weight.iter_mut().enumerate() {
            *w = ((i * 37 % 11) as f64 - 5.0) / 7.0;
        }
        conv.bias = vec![0.1, -0.2, 0.3];
        let input = Tensor::from_vec(2, 5, 4, (0..40).map(|i| ((i * 13 % 17) as f64) / 9.0).collect());
        let out = conv.forward(&input);
        for co in 0..3 {
            for y in 0..5 {
                for x in 0..4 {
                    let mut s = conv.bias[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                if sy >= 0 && sy < 5 && sx >= 0 && sx < 4 {
                                    s += conv.weight[((co * 2 + ci) * 3 + ky) * 3 + kx] * input.at(ci, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    assert!((out.at(co, y, x) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let t = Tensor::<f32>::from_vec(1, 3, 5, (0..15).map(|v| v as f32).collect());
        let (p, arg) = maxpool2(&t);
        assert_eq!((p.h, p.w), (2, 3));
        assert_eq!(p.data, vec![6.0, 8.0, 9.0, 11.0, 13.0, 14.0]);
        let back = maxpool2_backward(&p, &arg, 3, 5);
        assert_eq!(back.at(0, 1, 1), 6.0);
        let up = upsample2(&p, 3, 5);
        assert_eq!(up.at(0, 2, 4), 14.0);
        let g = upsample2_backward(&up, 2, 3);
        // bottom-right cell receives a single pixel from the cropped 3x5 grid
        assert_eq!(g.at(0, 1, 2), 14.0);
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (0..19).map(|v| v as f64).collect();
        assert_eq!(dot(&a, &a), a.iter().map(|v| v * v).sum::<f64>());
    }
}
