//! Toy E-RADIO: a hybrid CNN/transformer backbone with a strided-conv stem,
//! two C2f stages, two windowed-attention stages with multi-resolution
//! attention (MRA), and a deconvolution fusion of the last two stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Init, Scope};
use crate::numerics::{Element, Graph, ParamStore, Var};
use crate::vit::{invert_permutation, vitdet_reorder, StudentOutput};

/// Width of each published size variant.
pub const VARIANT_WIDTHS: [(&str, usize); 5] = [("xt", 64), ("t", 80), ("s", 96), ("b", 128), ("l", 192)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ERadioConfig {
    pub embed_dim: usize,
    pub layers_per_stage: [usize; 4],
    pub window_size: usize,
    /// Subsample ratio of each stage-3 layer, cycled when shorter than the stage.
    pub mra_subsample_pattern: Vec<usize>,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Add the 2x-upsampled stage-4 map to the stage-3 map.
    pub fusion: bool,
    pub input_resolution: usize,
}

impl Default for ERadioConfig {
    /// The desk-scale "XT-toy" variant.
    fn default() -> Self {
        Self {
            embed_dim: 64,
            layers_per_stage: [1, 3, 4, 5],
            window_size: 2,
            mra_subsample_pattern: vec![2, 1, 2, 1, 2],
            heads: 4,
            mlp_ratio: 4.0,
            fusion: true,
            input_resolution: 64,
        }
    }
}

impl ERadioConfig {
    /// Full-size variant by name (`xt`, `t`, `s`, `b`, `l`) at 224 px with window 7.
    pub fn variant(name: &str) -> Result<Self> {
        let (_, width) = VARIANT_WIDTHS
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Config(format!("unknown E-RADIO variant {name:?}")))?;
        let layers = if matches!(name.to_ascii_lowercase().as_str(), "xt" | "t") { [1, 3, 4, 5] } else { [3, 3, 5, 5] };
        Ok(Self {
            embed_dim: *width,
            layers_per_stage: layers,
            window_size: 7,
            heads: width / 16,
            input_resolution: 224,
            ..Self::default()
        })
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    fn half(&self) -> usize {
        self.embed_dim / 2
    }

    /// Subsample ratio of stage-3 layer `i`.
    pub fn subsample(&self, i: usize) -> usize {
        if self.mra_subsample_pattern.is_empty() {
            1
        } else {
            self.mra_subsample_pattern[i % self.mra_subsample_pattern.len()]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!("E-RADIO embed_dim {} must be even and positive", self.embed_dim)));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads)));
        }
        if self.window_size == 0 {
            return Err(Error::Config("window_size must be positive".into()));
        }
        if self.mra_subsample_pattern.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::Config("subsample ratios must be 1 or 2".into()));
        }
        Ok(())
    }

    /// Side of every stage's feature map at `resolution`, stem output first.
    pub fn stage_sides(&self, resolution: usize) -> Result<[usize; 4]> {
        if resolution == 0 || resolution % 32 != 0 {
            return Err(Error::invalid("eradio_forward", format!("resolution {resolution} not divisible by 32")));
        }
        let r4 = resolution / 4;
        let sides = [r4, r4 / 2, r4 / 4, r4 / 8];
        let w = self.window_size;
        for i in 0..self.layers_per_stage[2] {
            let side = sides[2] / self.subsample(i);
            if side % w != 0 {
                return Err(Error::invalid("mra_block", format!("window {w} does not divide the {side}x{side} stage-3 attention grid")));
            }
        }
        if self.layers_per_stage[3] > 0 && sides[3] % w != 0 {
            return Err(Error::invalid("eradio_forward", format!("window {w} does not divide the {0}x{0} stage-4 grid", sides[3])));
        }
        Ok(sides)
    }

    /// Side of the output feature grid.
    pub fn output_side(&self, resolution: usize) -> Result<usize> {
        let sides = self.stage_sides(resolution)?;
        Ok(if self.fusion { sides[2] } else { sides[3] })
    }

    pub fn init<T: Element>(&self, seed: u64, prefix: &str) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng, prefix);
        let (c, h) = (self.embed_dim, self.half());
        conv_bn_init(&mut init, "stem.0", 3, h, 3);
        conv_bn_init(&mut init, "stem.1", h, c, 3);
        for (s, &n) in self.layers_per_stage[..2].iter().enumerate() {
            let p = format!("stage{}", s + 1);
            conv_bn_init(&mut init, &format!("{p}.cv1"), c, c, 1);
            for b in 0..n {
                conv_bn_init(&mut init, &format!("{p}.m.{b}.cv1"), h, h, 3);
                conv_bn_init(&mut init, &format!("{p}.m.{b}.cv2"), h, h, 3);
            }
            conv_bn_init(&mut init, &format!("{p}.cv2"), (2 + n) * h, c, 1);
        }
        for d in 1..=3 {
            conv_bn_init(&mut init, &format!("down{d}"), c, c, 3);
        }
        for i in 0..self.layers_per_stage[2] {
            let p = format!("stage3.{i}");
            if self.subsample(i) == 2 {
                init.normal(&format!("{p}.down.w"), &[c, c, 3, 3], (1.0 / (9 * c) as f64).sqrt());
                init.constant(&format!("{p}.down.b"), &[c], 0.0);
                init.normal(&format!("{p}.up.w"), &[c, c, 3, 3], (1.0 / (9 * c) as f64).sqrt());
                init.constant(&format!("{p}.up.b"), &[c], 0.0);
            }
            init.block(&format!("{p}.attn"), c, self.hidden_dim());
        }
        for i in 0..self.layers_per_stage[3] {
            init.block(&format!("stage4.{i}"), c, self.hidden_dim());
        }
        if self.fusion {
            init.normal("fuse.w", &[c, c, 3, 3], (1.0 / (9 * c) as f64).sqrt());
            init.constant("fuse.b", &[c], 0.0);
        }
        init.layer_norm("norm", c);
        init.linear("head", c, c);
        Ok(store)
    }

    pub fn num_params(&self) -> usize {
        let (c, h, hid) = (self.embed_dim, self.half(), self.hidden_dim());
        let conv_bn = |ci: usize, co: usize, k: usize| co * ci * k * k + 2 * co;
        let block = 4 * c + 4 * (c * c + c) + (c * hid + hid) + (hid * c + c);
        let mut n = conv_bn(3, h, 3) + conv_bn(h, c, 3) + 3 * conv_bn(c, c, 3);
        for &b in &self.layers_per_stage[..2] {
            n += conv_bn(c, c, 1) + b * 2 * conv_bn(h, h, 3) + conv_bn((2 + b) * h, c, 1);
        }
        for i in 0..self.layers_per_stage[2] {
            n += block + if self.subsample(i) == 2 { 2 * (9 * c * c + c) } else { 0 };
        }
        n += self.layers_per_stage[3] * block;
        if self.fusion {
            n += 9 * c * c + c;
        }
        n + 2 * c + c * c + c
    }
}

fn conv_bn_init<T: Element, R: rand::Rng>(init: &mut Init<T, R>, name: &str, cin: usize, cout: usize, k: usize) {
    init.normal(&format!("{name}.w"), &[cout, cin, k, k], (1.0 / (cin * k * k) as f64).sqrt());
    init.constant(&format!("{name}.bn.g"), &[cout], 1.0);
    init.constant(&format!("{name}.bn.b"), &[cout], 0.0);
}

/// Conv, inference-form batch norm (per-channel affine), SiLU.
fn conv_bn_silu<T: Element>(g: &mut Graph<T>, s: &Scope<T>, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = s.get(g, &format!("{name}.w"))?;
    let pad = g.shape(w)[2] / 2;
    let y = g.conv2d(x, w, None, stride, pad)?;
    let gamma = s.get(g, &format!("{name}.bn.g"))?;
    let beta = s.get(g, &format!("{name}.bn.b"))?;
    let y = g.channel_affine(y, gamma, beta)?;
    g.silu(y)
}

/// C2f: 1x1 conv, split in halves, `n` residual bottlenecks chained on the
/// second half, concatenation of both halves and every bottleneck output,
/// 1x1 conv back to `C`.
pub fn c2f_block<T: Element>(g: &mut Graph<T>, s: &Scope<T>, x: Var, n_bottlenecks: usize) -> Result<Var> {
    let c = g.shape(x)[1];
    if c % 2 != 0 {
        return Err(Error::shape("c2f_block", format!("channel count {c} is odd")));
    }
    let y = conv_bn_silu(g, s, "cv1", x, 1)?;
    let mut parts = vec![g.slice(y, 1, 0, c / 2)?, g.slice(y, 1, c / 2, c / 2)?];
    for b in 0..n_bottlenecks {
        let prev = *parts.last().expect("two halves");
        let m = s.sub(&format!("m.{b}"));
        let h = conv_bn_silu(g, &m, "cv1", prev, 1)?;
        let h = conv_bn_silu(g, &m, "cv2", h, 1)?;
        parts.push(g.add(prev, h)?);
    }
    let cat = g.concat(&parts, 1)?;
    conv_bn_silu(g, s, "cv2", cat, 1)
}

/// `[B,C,H,W]` map to `[B*H*W, C]` token rows.
fn to_tokens<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let t = g.permute(x, &[0, 2, 3, 1])?;
    g.reshape(t, &[s[0] * s[2] * s[3], s[1]])
}

fn to_map<T: Element>(g: &mut Graph<T>, x: Var, b: usize, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(x)[1];
    let m = g.reshape(x, &[b, h, w, c])?;
    g.permute(m, &[0, 3, 1, 2])
}

/// Pre-norm transformer block with non-overlapping `window x window`
/// attention over a `[B,C,H,W]` map.
pub fn windowed_block<T: Element>(g: &mut Graph<T>, s: &Scope<T>, x: Var, window: usize, heads: usize) -> Result<Var> {
    let sh = g.shape(x).to_vec();
    let (b, h, w) = (sh[0], sh[2], sh[3]);
    let perm = vitdet_reorder((h, w), window)?;
    let batched = |p: &[usize]| -> Vec<usize> { (0..b).flat_map(|i| p.iter().map(move |&j| i * h * w + j)).collect() };
    let t = to_tokens(g, x)?;
    let t = g.gather_rows(t, &batched(&perm))?;
    let t = nn::block(g, s, t, b * (h / window) * (w / window), heads)?;
    let t = g.gather_rows(t, &batched(&invert_permutation(&perm)))?;
    to_map(g, t, b, h, w)
}

/// Multi-resolution attention layer. Ratio 1 is a plain windowed block; ratio 2
/// downsamples with a strided 3x3 conv, runs the windowed block, upsamples
/// with a 3x3 deconvolution and adds the input back.
pub fn mra_block<T: Element>(g: &mut Graph<T>, s: &Scope<T>, x: Var, subsample: usize, window: usize, heads: usize) -> Result<Var> {
    let attn = s.sub("attn");
    match subsample {
        1 => windowed_block(g, &attn, x, window, heads),
        2 => {
            let sh = g.shape(x).to_vec();
            if sh[2] % 2 != 0 || sh[3] % 2 != 0 {
                return Err(Error::invalid("mra_block", format!("odd map {}x{} cannot be subsampled", sh[2], sh[3])));
            }
            let (dw, db) = (s.get(g, "down.w")?, s.get(g, "down.b")?);
            let y = g.conv2d(x, dw, Some(db), 2, 1)?;
            let y = windowed_block(g, &attn, y, window, heads)?;
            let (uw, ub) = (s.get(g, "up.w")?, s.get(g, "up.b")?);
            let y = g.conv_transpose2d(y, uw, Some(ub), 2, 1, 1)?;
            g.add(x, y)
        }
        r => Err(Error::invalid("mra_block", format!("unsupported subsample ratio {r}"))),
    }
}

/// Per-stage map sides recorded during a forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageTrace {
    pub stages: [usize; 4],
    pub output: usize,
}

/// Forward pass over `[B,3,R,R]` images.
pub fn eradio_forward<T: Element>(
    g: &mut Graph<T>,
    cfg: &ERadioConfig,
    scope: &Scope<T>,
    images: Var,
) -> Result<(StudentOutput, StageTrace)> {
    let s = g.shape(images).to_vec();
    if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
        return Err(Error::shape("eradio_forward", format!("expected square [B,3,R,R], got {s:?}")));
    }
    let batch = s[0];
    cfg.stage_sides(s[2])?;
    let mut trace = [0; 4];

    let x = conv_bn_silu(g, scope, "stem.0", images, 2)?;
    let mut x = conv_bn_silu(g, scope, "stem.1", x, 2)?;
    for st in 0..2 {
        trace[st] = g.shape(x)[2];
        x = c2f_block(g, &scope.sub(&format!("stage{}", st + 1)), x, cfg.layers_per_stage[st])?;
        x = conv_bn_silu(g, scope, &format!("down{}", st + 1), x, 2)?;
    }
    trace[2] = g.shape(x)[2];
    for i in 0..cfg.layers_per_stage[2] {
        x = mra_block(g, &scope.sub(&format!("stage3.{i}")), x, cfg.subsample(i), cfg.window_size, cfg.heads)?;
    }
    let stage3 = x;
    x = conv_bn_silu(g, scope, "down3", x, 2)?;
    trace[3] = g.shape(x)[2];
    for i in 0..cfg.layers_per_stage[3] {
        x = windowed_block(g, &scope.sub(&format!("stage4.{i}")), x, cfg.window_size, cfg.heads)?;
    }
    if cfg.fusion {
        let (fw, fb) = (scope.get(g, "fuse.w")?, scope.get(g, "fuse.b")?);
        let up = g.conv_transpose2d(x, fw, Some(fb), 2, 1, 1)?;
        x = g.add(up, stage3)?;
    }
    let side = g.shape(x)[2];
    let tokens = to_tokens(g, x)?;
    let spatial = nn::layer_norm(g, scope, "norm", tokens)?;
    let pooled = g.mean_groups(spatial, batch)?;
    let summary = nn::linear(g, scope, "head", pooled)?;
    let out = StudentOutput { summary, spatial, grid: (side, side), batch };
    Ok((out, StageTrace { stages: trace, output: side }))
}

/// Analytic forward FLOPs for one `resolution x resolution` image, counting
/// convolutions, deconvolutions, matmuls and attention.
pub fn eradio_flops(cfg: &ERadioConfig, resolution: usize) -> Result<u64> {
    let sides = cfg.stage_sides(resolution)?;
    let (c, h, hid) = (cfg.embed_dim, cfg.half(), cfg.hidden_dim());
    let conv = |ci: usize, co: usize, k: usize, out_side: usize| 2 * (co * ci * k * k * out_side * out_side) as u64;
    let win = |side: usize| {
        let n = side * side;
        nn::block_flops(n, n / (cfg.window_size * cfg.window_size), c, hid)
    };
    let mut f = conv(3, h, 3, resolution / 2) + conv(h, c, 3, sides[0]);
    for st in 0..2 {
        let (side, n) = (sides[st], cfg.layers_per_stage[st]);
        f += conv(c, c, 1, side) + n as u64 * 2 * conv(h, h, 3, side) + conv((2 + n) * h, c, 1, side);
        f += conv(c, c, 3, sides[st + 1]);
    }
    for i in 0..cfg.layers_per_stage[2] {
        if cfg.subsample(i) == 2 {
            let low = sides[2] / 2;
            f += 2 * conv(c, c, 3, low) + win(low);
        } else {
            f += win(sides[2]);
        }
    }
    f += conv(c, c, 3, sides[3]);
    f += cfg.layers_per_stage[3] as u64 * win(sides[3]);
    if cfg.fusion {
        // deconvolution cost is counted over its input grid, like the graph counter
        f += conv(c, c, 3, sides[3]);
    }
    Ok(f + 2 * (c * c) as u64)
}
