//! Central-difference verification of the analytic backward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// An op under test together with its non-tensor arguments.
#[derive(Clone, Debug, PartialEq)]
pub enum GradOp {
    Matmul,
    Add,
    Sub,
    Mul,
    AddTiled,
    Scale(f64),
    Exp,
    Softplus,
    Gelu,
    Silu,
    Softmax,
    LayerNorm { eps: f64 },
    Attention { groups: usize, heads: usize },
    Conv2d { stride: usize, pad: usize, bias: bool },
    ConvTranspose2d { stride: usize, pad: usize, output_padding: usize, bias: bool },
    BilinearResize { out_h: usize, out_w: usize },
    CropResize { window: (f64, f64, f64, f64), out_h: usize, out_w: usize },
    ChannelAffine,
    Permute(Vec<usize>),
    GatherRows(Vec<usize>),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    MeanGroups(usize),
    Sum,
    Mean,
    CosineDistance,
    SmoothL1 { delta: f64 },
    CrossEntropy(Vec<usize>),
}

impl GradOp {
    pub fn apply(&self, g: &mut Graph<f64>, x: &[Var]) -> Result<Var> {
        match self {
            GradOp::Matmul => g.matmul(x[0], x[1]),
            GradOp::Add => g.add(x[0], x[1]),
            GradOp::Sub => g.sub(x[0], x[1]),
            GradOp::Mul => g.mul(x[0], x[1]),
            GradOp::AddTiled => g.add_tiled(x[0], x[1]),
            GradOp::Scale(s) => g.scale(x[0], *s),
            GradOp::Exp => g.exp(x[0]),
            GradOp::Softplus => g.softplus(x[0]),
            GradOp::Gelu => g.gelu(x[0]),
            GradOp::Silu => g.silu(x[0]),
            GradOp::Softmax => g.softmax(x[0]),
            GradOp::LayerNorm { eps } => g.layer_norm(x[0], x[1], x[2], *eps),
            GradOp::Attention { groups, heads } => g.attention(x[0], x[1], x[2], *groups, *heads),
            GradOp::Conv2d { stride, pad, bias } => g.conv2d(x[0], x[1], bias.then(|| x[2]), *stride, *pad),
            GradOp::ConvTranspose2d { stride, pad, output_padding, bias } => {
                g.conv_transpose2d(x[0], x[1], bias.then(|| x[2]), *stride, *pad, *output_padding)
            }
            GradOp::BilinearResize { out_h, out_w } => g.bilinear_resize(x[0], *out_h, *out_w),
            GradOp::CropResize { window, out_h, out_w } => g.crop_resize(x[0], *window, *out_h, *out_w),
            GradOp::ChannelAffine => g.channel_affine(x[0], x[1], x[2]),
            GradOp::Permute(axes) => g.permute(x[0], axes),
            GradOp::GatherRows(idx) => g.gather_rows(x[0], idx),
            GradOp::Concat { axis } => g.concat(x, *axis),
            GradOp::Slice { axis, start, len } => g.slice(x[0], *axis, *start, *len),
            GradOp::MeanGroups(groups) => g.mean_groups(x[0], *groups),
            GradOp::Sum => g.sum(x[0]),
            GradOp::Mean => g.mean(x[0]),
            GradOp::CosineDistance => g.cosine_distance_rows(x[0], x[1]),
            GradOp::SmoothL1 { delta } => g.smooth_l1(x[0], x[1], *delta),
            GradOp::CrossEntropy(labels) => g.cross_entropy(x[0], labels),
        }
    }
}

/// Maximum over input elements of `|analytic - central| / max(1, |central|)`
/// for the scalar `sum(r * op(inputs))` with a fixed random projection `r`.
pub fn grad_check(op: &GradOp, inputs: &[Tensor<f64>], eps: f64) -> Result<f64> {
    if inputs.iter().any(|t| !t.all_finite()) {
        return Err(Error::NonFinite("grad_check input"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = op.apply(&mut g, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a09e667);
    let proj = Tensor::<f64>::uniform(g.shape(out).to_vec(), -1.0, 1.0, &mut rng);
    let grads = g.backward_seeded(&[(out, proj.clone())])?;

    let objective = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = op.apply(&mut g, &vars)?;
        Ok(g.value(out).dot(&proj))
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = objective(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = objective(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite("grad_check central difference"));
            }
            let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// One random instance of every differentiable op, drawn from `seed`.
pub fn suite_cases(seed: u64) -> Vec<(&'static str, GradOp, Vec<Tensor<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| Tensor::<f64>::uniform(shape.to_vec(), -1.5, 1.5, &mut rng);
    vec![
        ("matmul", GradOp::Matmul, vec![r(&[3, 4]), r(&[4, 5])]),
        ("add", GradOp::Add, vec![r(&[3, 4]), r(&[3, 4])]),
        ("sub", GradOp::Sub, vec![r(&[3, 4]), r(&[3, 4])]),
        ("mul", GradOp::Mul, vec![r(&[3, 4]), r(&[3, 4])]),
        ("add_tiled", GradOp::AddTiled, vec![r(&[2, 3, 4]), r(&[3, 4])]),
        ("scale", GradOp::Scale(-1.7), vec![r(&[5])]),
        ("exp", GradOp::Exp, vec![r(&[6])]),
        ("softplus", GradOp::Softplus, vec![r(&[6])]),
        ("gelu", GradOp::Gelu, vec![r(&[8])]),
        ("silu", GradOp::Silu, vec![r(&[8])]),
        ("softmax", GradOp::Softmax, vec![r(&[3, 5])]),
        ("layer_norm", GradOp::LayerNorm { eps: 1e-6 }, vec![r(&[1, 8]), r(&[8]), r(&[8])]),
        ("layer_norm_rows", GradOp::LayerNorm { eps: 1e-5 }, vec![r(&[3, 6]), r(&[6]), r(&[6])]),
        ("attention", GradOp::Attention { groups: 1, heads: 2 }, vec![r(&[4, 8]), r(&[4, 8]), r(&[4, 8])]),
        ("attention_grouped", GradOp::Attention { groups: 2, heads: 2 }, vec![r(&[6, 4]), r(&[6, 4]), r(&[6, 4])]),
        ("conv2d", GradOp::Conv2d { stride: 1, pad: 1, bias: true }, vec![r(&[2, 2, 5, 5]), r(&[3, 2, 3, 3]), r(&[3])]),
        ("conv2d_strided", GradOp::Conv2d { stride: 2, pad: 1, bias: false }, vec![r(&[1, 2, 6, 6]), r(&[2, 2, 3, 3])]),
        (
            "conv_transpose2d",
            GradOp::ConvTranspose2d { stride: 2, pad: 1, output_padding: 1, bias: true },
            vec![r(&[1, 2, 3, 3]), r(&[2, 3, 3, 3]), r(&[3])],
        ),
        ("bilinear_up", GradOp::BilinearResize { out_h: 5, out_w: 4 }, vec![r(&[1, 2, 3, 3])]),
        ("bilinear_down", GradOp::BilinearResize { out_h: 3, out_w: 2 }, vec![r(&[2, 1, 4, 4])]),
        ("crop_resize", GradOp::CropResize { window: (0.1, 0.2, 0.6, 0.5), out_h: 4, out_w: 3 }, vec![r(&[1, 2, 4, 4])]),
        ("channel_affine", GradOp::ChannelAffine, vec![r(&[2, 3, 2, 2]), r(&[3]), r(&[3])]),
        ("permute", GradOp::Permute(vec![2, 0, 1]), vec![r(&[2, 3, 4])]),
        ("gather_rows", GradOp::GatherRows(vec![3, 0, 0, 2, 1]), vec![r(&[4, 3])]),
        ("concat", GradOp::Concat { axis: 1 }, vec![r(&[2, 2, 3]), r(&[2, 1, 3])]),
        ("slice", GradOp::Slice { axis: 1, start: 1, len: 2 }, vec![r(&[2, 4, 3])]),
        ("mean_groups", GradOp::MeanGroups(2), vec![r(&[6, 3])]),
        ("sum", GradOp::Sum, vec![r(&[3, 3])]),
        ("mean", GradOp::Mean, vec![r(&[3, 3])]),
        ("cosine_distance", GradOp::CosineDistance, vec![r(&[3, 5]), r(&[3, 5])]),
        ("smooth_l1", GradOp::SmoothL1 { delta: 1.0 }, vec![r(&[4, 3]).map(|v| 2.0 * v), r(&[4, 3])]),
        ("cross_entropy", GradOp::CrossEntropy(vec![0, 2, 1, 2]), vec![r(&[4, 3])]),
    ]
}
