//! Reverse-mode tape. Nodes are appended in evaluation order, so the node
//! vector is already a topological order and backward is a reverse sweep.

use std::collections::{BTreeMap, HashMap};
use std::sync::Once;

use super::kernels::{self, ConvGeom, Tap};
use super::params::ParamStore;
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op identity plus everything its backward needs.
#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Softplus(Var),
    Gelu(Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, groups: usize, heads: usize, probs: Vec<T> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Resample { x: Var, ty: Vec<Tap>, tx: Vec<Tap> },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Gather { x: Var, idx: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    MeanGroups { x: Var, groups: usize },
    Sum(Var),
    Mean(Var),
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    CosineRows { x: Var, y: Var, degenerate: Vec<bool> },
    SmoothL1 { x: Var, y: Var, delta: T },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradient tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    flops: u64,
}

static ZERO_NORM_WARNING: Once = Once::new();

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), flops: 0 }
    }

    /// Multiply-accumulate count x2 of every matmul, conv and attention recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, op_name: &'static str, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter, inserting it on first use. Parameters of a
    /// frozen store are recorded as constants.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let v = if store.is_frozen() { self.constant(t.clone()) } else { self.leaf(t.clone()) };
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul_nn(self.val(a), self.val(b), m, k, n);
        self.flops += 2 * (m * k * n) as u64;
        self.push(Tensor::new([m, n], out)?, Op::Matmul(a, b), "matmul", &[a, b])
    }

    /// `x @ w + b` on row vectors.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_tiled(y, b),
            None => Ok(y),
        }
    }

    // ---------------------------------------------------------------- elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self.val(a).iter().zip(self.val(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), "add", &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub", &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul", &[a, b])
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s and `b` repeats over the leading axes.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_tiled", format!("{sa:?} + {sb:?}")));
        }
        let bv = self.val(b);
        let n = bv.len();
        let data = self.val(a).iter().enumerate().map(|(i, &x)| x + bv[i % n]).collect();
        let out = Tensor::new(sa.to_vec(), data)?;
        self.push(out, Op::AddTiled(a, b), "add_tiled", &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), "scale", &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a), "exp", &[a])
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), "softplus", &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| gelu(x).0);
        self.push(out, Op::Gelu(a), "gelu", &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a), "silu", &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut data = self.val(a).to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push(Tensor::new(shape, data)?, Op::Softmax(a), "softmax", &[a])
    }

    // ---------------------------------------------------------------- normalization / attention

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::invalid("layer_norm", "normalized dimension is zero"));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", format!("affine params must be [{d}]")));
        }
        let eps = T::from_f64(eps);
        let dt = T::from_f64(d as f64);
        let (g, b) = (self.val(gamma), self.val(beta));
        let rows = self.val(x).len() / d;
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for row in self.val(x).chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let r = T::ONE / (var + eps).sqrt();
            rstd.push(r);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[i] + b[i]);
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, "layer_norm", &[x, gamma, beta])
    }

    /// Multi-head `softmax(QK^T/sqrt(d/heads))V` on `groups` independent
    /// sequences stacked as `[groups*t, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, heads: usize) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 2 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(Error::shape("attention", "q, k, v must share a 2-D shape"));
        }
        let (rows, d) = (s[0], s[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid("attention", format!("dim {d} not divisible by {heads} heads")));
        }
        if groups == 0 || rows % groups != 0 {
            return Err(Error::invalid("attention", format!("{rows} tokens not divisible into {groups} groups")));
        }
        let t = rows / groups;
        let (out, probs) = kernels::attention_forward(self.val(q), self.val(k), self.val(v), groups, t, d, heads);
        self.flops += 4 * (groups * t * t * d) as u64;
        let out = Tensor::new(s, out)?;
        self.push(out, Op::Attention { q, k, v, groups, heads, probs }, "attention", &[q, k, v])
    }

    // ---------------------------------------------------------------- convolution / resampling

    fn conv_dims(&self, op: &'static str, x: Var, w: Var) -> Result<([usize; 4], [usize; 4])> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape(op, format!("input {sx:?} and kernel {sw:?} must be 4-D")));
        }
        Ok(([sx[0], sx[1], sx[2], sx[3]], [sw[0], sw[1], sw[2], sw[3]]))
    }

    /// Cross-correlation of `[N,C_in,H,W]` with `[C_out,C_in,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let ([n, c, h, wd], [co, ci, kh, kw]) = self.conv_dims("conv2d", x, w)?;
        if ci != c {
            return Err(Error::shape("conv2d", format!("input has {c} channels, kernel expects {ci}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::shape("conv2d", "bias must be [C_out]"));
            }
        }
        let g = ConvGeom::new(c, h, wd, kh, kw, stride, pad).ok_or_else(|| {
            Error::invalid("conv2d", format!("stride {stride}, kernel {kh}x{kw}, padded input {}x{}", h + 2 * pad, wd + 2 * pad))
        })?;
        let wv = self.val(w);
        let plane = c * h * wd;
        let cols = g.col_cols();
        let mut out = Vec::with_capacity(n * co * cols);
        for img in self.val(x).chunks(plane) {
            let col = kernels::im2col(img, &g);
            out.extend(kernels::matmul_nn(wv, &col, co, g.col_rows(), cols));
        }
        if let Some(b) = b {
            let bv = self.val(b);
            for (i, chunk) in out.chunks_mut(cols).enumerate() {
                let bias = bv[i % co];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        self.flops += 2 * (n * co * cols * g.col_rows()) as u64;
        let out = Tensor::new([n, co, g.out_h, g.out_w], out)?;
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, "conv2d", &inputs)
    }

    /// Transposed convolution (adjoint of [`Graph::conv2d`]) with kernel
    /// `[C_in,C_out,kh,kw]`; output side `(H-1)*stride - 2*pad + k + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let ([n, c, h, wd], [ci, co, kh, kw]) = self.conv_dims("conv_transpose2d", x, w)?;
        if ci != c {
            return Err(Error::shape("conv_transpose2d", format!("input has {c} channels, kernel expects {ci}")));
        }
        if stride == 0 || output_padding >= stride.max(1) {
            return Err(Error::invalid("conv_transpose2d", "need stride > 0 and output_padding < stride"));
        }
        let oh = ((h - 1) * stride + kh + output_padding).checked_sub(2 * pad);
        let ow = ((wd - 1) * stride + kw + output_padding).checked_sub(2 * pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::invalid("conv_transpose2d", "padding exceeds output extent"));
        };
        let g = ConvGeom::new(co, oh, ow, kh, kw, stride, pad)
            .filter(|g| g.out_h == h && g.out_w == wd)
            .ok_or_else(|| Error::invalid("conv_transpose2d", "inconsistent geometry"))?;
        let wv = self.val(w);
        let mut out = Vec::with_capacity(n * co * oh * ow);
        for img in self.val(x).chunks(c * h * wd) {
            let col = kernels::matmul_tn(wv, img, g.col_rows(), c, h * wd);
            out.extend(kernels::col2im(&col, &g));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::shape("conv_transpose2d", "bias must be [C_out]"));
            }
            let bv = self.val(b);
            for (i, chunk) in out.chunks_mut(oh * ow).enumerate() {
                let bias = bv[i % co];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        self.flops += 2 * (n * c * h * wd * g.col_rows()) as u64;
        let out = Tensor::new([n, co, oh, ow], out)?;
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        self.push(out, Op::ConvTranspose2d { x, w, b, stride, pad }, "conv_transpose2d", &inputs)
    }

    /// Bilinear resize of `[N,C,H,W]` (half-pixel centers).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.crop_resize(x, (0.0, 0.0, 1.0, 1.0), out_h, out_w)
    }

    /// Bilinear sampling of the relative window `(y0, x0, h, w)` of a
    /// `[N,C,H,W]` tensor onto an `out_h x out_w` grid.
    pub fn crop_resize(&mut self, x: Var, window: (f64, f64, f64, f64), out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("bilinear_resize", format!("expected [N,C,H,W], got {s:?}")));
        }
        if s.iter().any(|&d| d == 0) {
            return Err(Error::invalid("bilinear_resize", "empty source"));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_resize", "output size must be positive"));
        }
        let (y0, x0, wh, ww) = window;
        if wh <= 0.0 || ww <= 0.0 {
            return Err(Error::invalid("bilinear_resize", "zero-area crop window"));
        }
        if y0 < 0.0 || x0 < 0.0 || y0 + wh > 1.0 + 1e-9 || x0 + ww > 1.0 + 1e-9 {
            return Err(Error::invalid("bilinear_resize", format!("window {window:?} outside [0,1]^2")));
        }
        let (h, w) = (s[2], s[3]);
        let ty = kernels::bilinear_taps(h, y0, wh, out_h);
        let tx = kernels::bilinear_taps(w, x0, ww, out_w);
        let xv = self.val(x);
        let mut out = Vec::with_capacity(s[0] * s[1] * out_h * out_w);
        for plane in xv.chunks(h * w) {
            for a in &ty {
                let fy = T::from_f64(a.frac);
                let r0 = &plane[a.i0 * w..(a.i0 + 1) * w];
                let r1 = &plane[a.i1 * w..(a.i1 + 1) * w];
                for b in &tx {
                    let fx = T::from_f64(b.frac);
                    let top = r0[b.i0] + (r0[b.i1] - r0[b.i0]) * fx;
                    let bot = r1[b.i0] + (r1[b.i1] - r1[b.i0]) * fx;
                    out.push(top + (bot - top) * fy);
                }
            }
        }
        let out = Tensor::new([s[0], s[1], out_h, out_w], out)?;
        self.push(out, Op::Resample { x, ty, tx }, "bilinear_resize", &[x])
    }

    /// Per-channel affine `x * gamma[c] + beta[c]` on `[N,C,H,W]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::shape("channel_affine", format!("{s:?} with per-channel params")));
        }
        let (c, hw) = (s[1], s[2] * s[3]);
        let (g, b) = (self.val(gamma), self.val(beta));
        let data = self
            .val(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                v * g[ch] + b[ch]
            })
            .collect();
        let out = Tensor::new(s, data)?;
        self.push(out, Op::ChannelAffine { x, gamma, beta }, "channel_affine", &[x, gamma, beta])
    }

    // ---------------------------------------------------------------- layout

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid("permute", format!("axes {axes:?} for shape {s:?}")));
        }
        let data = kernels::permute(self.val(x), &s, axes);
        let out = Tensor::new(axes.iter().map(|&a| s[a]).collect::<Vec<_>>(), data)?;
        self.push(out, Op::Permute { x, axes: axes.to_vec() }, "permute", &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(x), "reshape", &[x])
    }

    /// Selects rows (slices along axis 0): `out[j] = x[idx[j]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::shape("gather_rows", "scalar input"));
        }
        let rows = s[0];
        let width = if rows == 0 { 0 } else { self.value(x).numel() / rows };
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of {rows}")));
        }
        let xv = self.val(x);
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&xv[i * width..(i + 1) * width]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Gather { x, idx: idx.to_vec() }, "gather_rows", &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for rank {}", first.len())));
        }
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = xs.iter().map(|&v| self.shape(v)[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.val(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Concat { xs: xs.to_vec(), axis }, "concat", xs)
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::invalid("slice", format!("{start}..{} on axis {axis} of {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let xv = self.val(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Slice { x, axis, start }, "slice", &[x])
    }

    // ---------------------------------------------------------------- reductions

    /// Mean of each of `groups` consecutive row blocks of a `[groups*t, d]` matrix.
    pub fn mean_groups(&mut self, x: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || groups == 0 || s[0] % groups != 0 || s[0] == 0 {
            return Err(Error::shape("mean_groups", format!("{s:?} into {groups} groups")));
        }
        let (t, d) = (s[0] / groups, s[1]);
        let inv = T::from_f64(1.0 / t as f64);
        let mut data = vec![T::ZERO; groups * d];
        for (r, row) in self.val(x).chunks(d).enumerate() {
            let o = &mut data[(r / t) * d..(r / t + 1) * d];
            for (a, &b) in o.iter_mut().zip(row) {
                *a += b;
            }
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new([groups, d], data)?;
        self.push(out, Op::MeanGroups { x, groups }, "mean_groups", &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), "sum", &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::invalid("mean", "empty input"));
        }
        let out = Tensor::scalar(self.value(x).sum() / T::from_f64(n as f64));
        self.push(out, Op::Mean(x), "mean", &[x])
    }

    // ---------------------------------------------------------------- losses

    /// Row-wise cosine distance `1 - x.y/(|x||y|)` of two `[N,d]` matrices.
    /// A row with a zero-norm side has distance 1 and zero gradient.
    pub fn cosine_distance_rows(&mut self, x: Var, y: Var) -> Result<Var> {
        self.same_shape("cosine_distance", x, y)?;
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("cosine_distance", format!("expected [N,d], got {s:?}")));
        }
        let d = s[1];
        let mut out = Vec::with_capacity(s[0]);
        let mut degenerate = Vec::with_capacity(s[0]);
        for (a, b) in self.val(x).chunks(d).zip(self.val(y).chunks(d)) {
            let (dot, na2, nb2) = dot_norms(a, b);
            if na2 == T::ZERO || nb2 == T::ZERO {
                ZERO_NORM_WARNING.call_once(|| log::warn!("cosine distance on a zero-norm vector; using distance 1"));
                out.push(T::ONE);
                degenerate.push(true);
            } else {
                // one rounding in the denominator keeps the 0 and 2 endpoints exact
                out.push(T::ONE - dot / (na2 * nb2).sqrt());
                degenerate.push(false);
            }
        }
        let out = Tensor::new([s[0]], out)?;
        self.push(out, Op::CosineRows { x, y, degenerate }, "cosine_distance", &[x, y])
    }

    /// Mean over elements of the smooth-L1 penalty on `x - y`.
    pub fn smooth_l1(&mut self, x: Var, y: Var, delta: f64) -> Result<Var> {
        self.same_shape("smooth_l1", x, y)?;
        if delta <= 0.0 {
            return Err(Error::invalid("smooth_l1", "delta must be positive"));
        }
        let n = self.value(x).numel();
        let dl = T::from_f64(delta);
        let half = T::from_f64(0.5);
        let total: T = self
            .val(x)
            .iter()
            .zip(self.val(y))
            .map(|(&a, &b)| {
                let d = (a - b).abs();
                if d < dl {
                    half * d * d / dl
                } else {
                    d - half * dl
                }
            })
            .sum();
        let out = Tensor::scalar(total / T::from_f64(n.max(1) as f64));
        self.push(out, Op::SmoothL1 { x, y, delta: dl }, "smooth_l1", &[x, y])
    }

    /// Mean softmax cross-entropy of `[N,K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape("cross_entropy", format!("{s:?} with {} labels", labels.len())));
        }
        let k = s[1];
        if labels.iter().any(|&l| l >= k) {
            return Err(Error::invalid("cross_entropy", "label out of range"));
        }
        let mut probs = self.val(logits).to_vec();
        let mut total = T::ZERO;
        for (row, &l) in probs.chunks_mut(k).zip(labels) {
            softmax_in_place(row);
            total -= row[l].ln();
        }
        let out = Tensor::scalar(total / T::from_f64(labels.len() as f64));
        self.push(out, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, "cross_entropy", &[logits])
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "loss must be a single element"));
        }
        self.backward_seeded(&[(loss, Tensor::full(self.shape(loss).to_vec(), T::ONE))])
    }

    /// Reverse sweep with explicit output cotangents.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(Error::shape("backward", "seed shape differs from output"));
            }
            self.acc(&mut grads, *v, g.data().to_vec());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            if let Some(g) = grads[i].take() {
                if !matches!(self.nodes[i].op, Op::Leaf) {
                    self.backprop(i, &g, &mut grads)?;
                }
                grads[i] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::new(self.shape(Var(i)).to_vec(), d).expect("grad shape")))
            .collect();
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    self.acc(grads, *a, kernels::matmul_nt(g, self.val(*b), m, n, k));
                }
                if self.requires_grad(*b) {
                    self.acc(grads, *b, kernels::matmul_tn(self.val(*a), g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                self.acc(grads, *a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                self.acc(grads, *b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
            }
            Op::AddTiled(a, b) => {
                self.acc(grads, *a, g.to_vec());
                let n = self.value(*b).numel();
                let mut gb = vec![T::ZERO; n];
                for (j, &v) in g.iter().enumerate() {
                    gb[j % n] += v;
                }
                self.acc(grads, *b, gb);
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.iter().map(|&v| v * *s).collect()),
            Op::Exp(a) => self.acc(grads, *a, g.iter().zip(out).map(|(&x, &y)| x * y).collect()),
            Op::Softplus(a) => {
                let gx = g.iter().zip(self.val(*a)).map(|(&x, &v)| x * sigmoid(v)).collect();
                self.acc(grads, *a, gx);
            }
            Op::Gelu(a) => {
                let gx = g.iter().zip(self.val(*a)).map(|(&x, &v)| x * gelu(v).1).collect();
                self.acc(grads, *a, gx);
            }
            Op::Silu(a) => {
                let gx = g
                    .iter()
                    .zip(self.val(*a))
                    .map(|(&x, &v)| {
                        let s = sigmoid(v);
                        x * (s + v * s * (T::ONE - s))
                    })
                    .collect();
                self.acc(grads, *a, gx);
            }
            Op::Softmax(a) => {
                let d = *self.shape(*a).last().expect("rank >= 1");
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(d).zip(out.chunks(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    gx.extend(gr.iter().zip(yr).map(|(&x, &y)| y * (x - dot)));
                }
                self.acc(grads, *a, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).numel();
                let gv = self.val(*gamma);
                let dt = T::from_f64(d as f64);
                let mut dgamma = vec![T::ZERO; d];
                let mut dbeta = vec![T::ZERO; d];
                let mut dx = Vec::with_capacity(g.len());
                for ((gr, hr), &r) in g.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                    let mut m1 = T::ZERO;
                    let mut m2 = T::ZERO;
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gv[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                    }
                    m1 = m1 / dt;
                    m2 = m2 / dt;
                    for j in 0..d {
                        dx.push(r * (gr[j] * gv[j] - m1 - hr[j] * m2));
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::Attention { q, k, v, groups, heads, probs } => {
                let s = self.shape(*q);
                let (t, d) = (s[0] / groups, s[1]);
                let (dq, dk, dv) =
                    kernels::attention_backward(self.val(*q), self.val(*k), self.val(*v), probs, g, *groups, t, d, *heads);
                self.acc(grads, *q, dq);
                self.acc(grads, *k, dk);
                self.acc(grads, *v, dv);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (c, h, wd) = (sx[1], sx[2], sx[3]);
                let (co, kh, kw) = (sw[0], sw[2], sw[3]);
                let geo = ConvGeom::new(c, h, wd, kh, kw, *stride, *pad).expect("validated in forward");
                let cols = geo.col_cols();
                let wv = self.val(*w);
                let mut dw = vec![T::ZERO; wv.len()];
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                for (img, gi) in self.val(*x).chunks(c * h * wd).zip(g.chunks(co * cols)) {
                    if self.requires_grad(*w) {
                        let col = kernels::im2col(img, &geo);
                        let part = kernels::matmul_nt(gi, &col, co, cols, geo.col_rows());
                        dw.iter_mut().zip(part).for_each(|(a, b)| *a += b);
                    }
                    if self.requires_grad(*x) {
                        let dcol = kernels::matmul_tn(wv, gi, geo.col_rows(), co, cols);
                        dx.extend(kernels::col2im(&dcol, &geo));
                    }
                }
                if self.requires_grad(*x) {
                    self.acc(grads, *x, dx);
                }
                if self.requires_grad(*w) {
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.acc(grads, *b, channel_sums(g, co, cols));
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let so = self.nodes[i].value.shape();
                let (c, h, wd) = (sx[1], sx[2], sx[3]);
                let (co, kh, kw) = (sw[1], sw[2], sw[3]);
                let (oh, ow) = (so[2], so[3]);
                let geo = ConvGeom::new(co, oh, ow, kh, kw, *stride, *pad).expect("validated in forward");
                let wv = self.val(*w);
                let mut dw = vec![T::ZERO; wv.len()];
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                for (img, gi) in self.val(*x).chunks(c * h * wd).zip(g.chunks(co * oh * ow)) {
                    let dcol = kernels::im2col(gi, &geo);
                    if self.requires_grad(*x) {
                        dx.extend(kernels::matmul_nn(wv, &dcol, c, geo.col_rows(), h * wd));
                    }
                    if self.requires_grad(*w) {
                        let part = kernels::matmul_nt(img, &dcol, c, h * wd, geo.col_rows());
                        dw.iter_mut().zip(part).for_each(|(a, b)| *a += b);
                    }
                }
                if self.requires_grad(*x) {
                    self.acc(grads, *x, dx);
                }
                if self.requires_grad(*w) {
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.acc(grads, *b, channel_sums(g, co, oh * ow));
                }
            }
            Op::Resample { x, ty, tx } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let mut dx = vec![T::ZERO; self.value(*x).numel()];
                let per_plane = ty.len() * tx.len();
                for (plane, gp) in dx.chunks_mut(h * w).zip(g.chunks(per_plane)) {
                    let mut it = gp.iter();
                    for a in ty {
                        let fy = T::from_f64(a.frac);
                        for b in tx {
                            let fx = T::from_f64(b.frac);
                            let v = *it.next().expect("plane size");
                            plane[a.i0 * w + b.i0] += v * (T::ONE - fy) * (T::ONE - fx);
                            plane[a.i0 * w + b.i1] += v * (T::ONE - fy) * fx;
                            plane[a.i1 * w + b.i0] += v * fy * (T::ONE - fx);
                            plane[a.i1 * w + b.i1] += v * fy * fx;
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Permute { x, axes } => {
                let out_shape = self.nodes[i].value.shape();
                let mut inv = vec![0; axes.len()];
                for (j, &a) in axes.iter().enumerate() {
                    inv[a] = j;
                }
                self.acc(grads, *x, kernels::permute(g, out_shape, &inv));
            }
            Op::Reshape(x) => self.acc(grads, *x, g.to_vec()),
            Op::Gather { x, idx } => {
                let n = self.value(*x).numel();
                let rows = self.shape(*x)[0];
                let width = if rows == 0 { 0 } else { n / rows };
                let mut dx = vec![T::ZERO; n];
                for (j, &r) in idx.iter().enumerate() {
                    let src = &g[j * width..(j + 1) * width];
                    dx[r * width..(r + 1) * width].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                }
                self.acc(grads, *x, dx);
            }
            Op::Concat { xs, axis } => {
                let s = self.nodes[i].value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis] * inner;
                    let mut dv = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        dv.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                    }
                    self.acc(grads, v, dv);
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = self.nodes[i].value.shape()[*axis] * inner;
                let mut dx = vec![T::ZERO; self.value(*x).numel()];
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    dx[base..base + len].copy_from_slice(&g[o * len..(o + 1) * len]);
                }
                self.acc(grads, *x, dx);
            }
            Op::MeanGroups { x, groups } => {
                let s = self.shape(*x);
                let (t, d) = (s[0] / groups, s[1]);
                let inv = T::from_f64(1.0 / t as f64);
                let mut dx = Vec::with_capacity(s[0] * d);
                for r in 0..s[0] {
                    dx.extend(g[(r / t) * d..(r / t + 1) * d].iter().map(|&v| v * inv));
                }
                self.acc(grads, *x, dx);
            }
            Op::Sum(x) => self.acc(grads, *x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, vec![g[0] / T::from_f64(n as f64); n]);
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let s = self.shape(*x);
                let (c, hw) = (s[1], s[2] * s[3]);
                let (xv, gv) = (self.val(*x), self.val(*gamma));
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                let mut dx = Vec::with_capacity(g.len());
                for (j, &gj) in g.iter().enumerate() {
                    let ch = (j / hw) % c;
                    dgamma[ch] += gj * xv[j];
                    dbeta[ch] += gj;
                    dx.push(gj * gv[ch]);
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::CosineRows { x, y, degenerate } => {
                let d = self.shape(*x)[1];
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                let mut dy = Vec::with_capacity(self.value(*x).numel());
                for (((a, b), &gr), &deg) in self.val(*x).chunks(d).zip(self.val(*y).chunks(d)).zip(g).zip(degenerate) {
                    if deg {
                        dx.extend(std::iter::repeat(T::ZERO).take(d));
                        dy.extend(std::iter::repeat(T::ZERO).take(d));
                        continue;
                    }
                    let (dot, na2, nb2) = dot_norms(a, b);
                    let inv = T::ONE / (na2 * nb2).sqrt();
                    let ca = dot / na2;
                    let cb = dot / nb2;
                    for j in 0..d {
                        dx.push(-gr * inv * (b[j] - ca * a[j]));
                        dy.push(-gr * inv * (a[j] - cb * b[j]));
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *y, dy);
            }
            Op::SmoothL1 { x, y, delta } => {
                let n = T::from_f64(self.value(*x).numel().max(1) as f64);
                let scale = g[0] / n;
                let dx: Vec<T> = self
                    .val(*x)
                    .iter()
                    .zip(self.val(*y))
                    .map(|(&a, &b)| {
                        let d = a - b;
                        let s = if d.abs() < *delta {
                            d / *delta
                        } else if d > T::ZERO {
                            T::ONE
                        } else {
                            -T::ONE
                        };
                        s * scale
                    })
                    .collect();
                self.acc(grads, *y, dx.iter().map(|&v| -v).collect());
                self.acc(grads, *x, dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::from_f64(labels.len() as f64);
                let mut dl = probs.clone();
                for (row, &l) in dl.chunks_mut(k).zip(labels) {
                    row[l] -= T::ONE;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.acc(grads, *logits, dl);
            }
        }
        Ok(())
    }
}

/// Gradients produced by a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<String, Var>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&v| self.get(v))
    }

    /// Gradients of every bound trainable parameter that received one.
    pub fn named(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter_map(|(name, &v)| self.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

fn channel_sums<T: Element>(g: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; channels];
    for (j, chunk) in g.chunks(plane).enumerate() {
        out[j % channels] += chunk.iter().copied().sum::<T>();
    }
    out
}

/// Dot product and squared norms.
fn dot_norms<T: Element>(a: &[T], b: &[T]) -> (T, T, T) {
    let mut dot = T::ZERO;
    let mut na = T::ZERO;
    let mut nb = T::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na, nb)
}

fn softmax_in_place<T: Element>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::from_f64(f64::NEG_INFINITY), |a, b| if b > a { b } else { a });
    let mut z = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

pub(crate) fn softplus<T: Element>(x: T) -> T {
    if x > T::ZERO {
        x + (T::ONE + (-x).exp()).ln()
    } else {
        (T::ONE + x.exp()).ln()
    }
}

/// GELU (tanh form) and its derivative.
fn gelu<T: Element>(x: T) -> (T, T) {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (T::ONE + T::from_f64(3.0) * a * x * x);
    let y = half * x * (T::ONE + th);
    let dy = half * (T::ONE + th) + half * x * (T::ONE - th * th) * du;
    (y, dy)
}
