//! Slice-level compute kernels shared by the forward and backward passes.
//!
//! Parallel kernels split work by output row, so every output element is
//! accumulated by one thread in a fixed order and results are bit-identical
//! regardless of thread count.

use rayon::prelude::*;

use super::tensor::Element;

const PAR_THRESHOLD: usize = 1 << 15;

/// `[m,k] x [k,n] -> [m,n]`
pub fn matmul_nn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    if n == 0 {
        return out;
    }
    let row = |(i, o): (usize, &mut [T])| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `[m,k] x [n,k]^T -> [m,n]`
pub fn matmul_nt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    if n == 0 {
        return out;
    }
    let row = |(i, o): (usize, &mut [T])| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, ov) in o.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&x, &y) in ar.iter().zip(br) {
                acc += x * y;
            }
            *ov = acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `[k,m]^T x [k,n] -> [m,n]`
pub fn matmul_tn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    if n == 0 {
        return out;
    }
    let row = |(i, o): (usize, &mut [T])| {
        for p in 0..k {
            let av = a[p * m + i];
            let br = &b[p * n..(p + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// Geometry of a 2-D convolution window sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return None;
        }
        Some(Self {
            channels,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn source(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some(y as usize * self.w + x as usize)
        }
    }
}

/// `[C,H,W] -> [C*kh*kw, out_h*out_w]`
pub fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.col_cols();
    let mut out = vec![T::ZERO; g.col_rows() * cols];
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let orow = &mut out[r * cols..(r + 1) * cols];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some(s) = g.source(oy, ky, ox, kx) {
                            orow[oy * g.out_w + ox] = plane[s];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[C,H,W]`.
pub fn col2im<T: Element>(col: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.col_cols();
    let mut out = vec![T::ZERO; g.channels * g.h * g.w];
    for c in 0..g.channels {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let crow = &col[r * cols..(r + 1) * cols];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some(s) = g.source(oy, ky, ox, kx) {
                            plane[s] += crow[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// One output coordinate of a bilinear sampler: two source indices and the
/// weight of the second one.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
}

/// Half-pixel-center sampling table along one axis. The window is
/// `[start, start+len)` in relative coordinates of an axis of `in_len` cells.
pub fn bilinear_taps(in_len: usize, start: f64, len: f64, out_len: usize) -> Vec<Tap> {
    let scale = len * in_len as f64 / out_len as f64;
    let offset = start * in_len as f64;
    (0..out_len)
        .map(|i| {
            let src = (offset + (i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == in_len - 1 { 0.0 } else { src - i0 as f64 };
            Tap { i0, i1, frac }
        })
        .collect()
}

/// Forward of grouped multi-head attention. `q,k,v` are `[groups*t, d]`;
/// returns the output and the softmax probabilities `[groups, heads, t, t]`.
pub fn attention_forward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    groups: usize,
    t: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::ZERO; groups * t * d];
    let mut probs = vec![T::ZERO; groups * heads * t * t];
    out.par_chunks_mut(t * d)
        .zip(probs.par_chunks_mut(heads * t * t))
        .enumerate()
        .for_each(|(gi, (o, p))| {
            let base = gi * t * d;
            for h in 0..heads {
                let col = h * dh;
                let ph = &mut p[h * t * t..(h + 1) * t * t];
                for i in 0..t {
                    let qi = &q[base + i * d + col..base + i * d + col + dh];
                    let row = &mut ph[i * t..(i + 1) * t];
                    let mut mx = T::from_f64(f64::NEG_INFINITY);
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &k[base + j * d + col..base + j * d + col + dh];
                        let mut s = T::ZERO;
                        for (&a, &b) in qi.iter().zip(kj) {
                            s += a * b;
                        }
                        *r = s * scale;
                        if *r > mx {
                            mx = *r;
                        }
                    }
                    let mut z = T::ZERO;
                    for r in row.iter_mut() {
                        *r = (*r - mx).exp();
                        z += *r;
                    }
                    for r in row.iter_mut() {
                        *r = *r / z;
                    }
                    let oi = &mut o[i * d + col..i * d + col + dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let vj = &v[base + j * d + col..base + j * d + col + dh];
                        for (ov, &vv) in oi.iter_mut().zip(vj) {
                            *ov += pij * vv;
                        }
                    }
                }
            }
        });
    (out, probs)
}

/// Backward of [`attention_forward`]; returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    groups: usize,
    t: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::ZERO; groups * t * d];
    let mut dk = vec![T::ZERO; groups * t * d];
    let mut dv = vec![T::ZERO; groups * t * d];
    dq.par_chunks_mut(t * d)
        .zip(dk.par_chunks_mut(t * d))
        .zip(dv.par_chunks_mut(t * d))
        .enumerate()
        .for_each(|(gi, ((dqg, dkg), dvg))| {
            let base = gi * t * d;
            let mut ds = vec![T::ZERO; t];
            for h in 0..heads {
                let col = h * dh;
                let ph = &probs[(gi * heads + h) * t * t..(gi * heads + h + 1) * t * t];
                for i in 0..t {
                    let row = &ph[i * t..(i + 1) * t];
                    let doi = &dout[base + i * d + col..base + i * d + col + dh];
                    // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
                    let mut dot = T::ZERO;
                    for j in 0..t {
                        let vj = &v[base + j * d + col..base + j * d + col + dh];
                        let mut s = T::ZERO;
                        for (&a, &b) in doi.iter().zip(vj) {
                            s += a * b;
                        }
                        ds[j] = s;
                        dot += s * row[j];
                        let dvj = &mut dvg[j * d + col..j * d + col + dh];
                        for (dv, &g) in dvj.iter_mut().zip(doi) {
                            *dv += row[j] * g;
                        }
                    }
                    for j in 0..t {
                        let s = row[j] * (ds[j] - dot) * scale;
                        let kj = &k[base + j * d + col..base + j * d + col + dh];
                        let qi = &q[base + i * d + col..base + i * d + col + dh];
                        let dqi = &mut dqg[i * d + col..i * d + col + dh];
                        for (a, &b) in dqi.iter_mut().zip(kj) {
                            *a += s * b;
                        }
                        let dkj = &mut dkg[j * d + col..j * d + col + dh];
                        for (a, &b) in dkj.iter_mut().zip(qi) {
                            *a += s * b;
                        }
                    }
                }
            }
        });
    (dq, dk, dv)
}

/// Strides of a row-major shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// General axis permutation: `out.shape[i] = shape[axes[i]]`.
pub fn permute<T: Element>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..x.len() {
        let src: usize = idx.iter().zip(axes).map(|(&i, &a)| i * in_strides[a]).sum();
        out.push(x[src]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}
