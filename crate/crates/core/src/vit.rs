//! Toy ViT encoder with Cropped Position Embeddings (CPE), CLS/avgpool
//! summarization and the alternating windowed/global ViTDet augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Init, Scope};
use crate::numerics::{Element, Graph, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Summarization {
    ClsToken,
    Avgpool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Side `G` of the `G x G` position-embedding grid.
    pub cpe_base_grid: usize,
    pub summarization: Summarization,
    pub window_sizes: Vec<usize>,
    /// Windowed layers per global layer.
    pub num_windowed: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            depth: 6,
            heads: 4,
            mlp_ratio: 4.0,
            cpe_base_grid: 16,
            summarization: Summarization::ClsToken,
            window_sizes: vec![2, 4],
            num_windowed: 2,
        }
    }
}

impl ViTConfig {
    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.depth == 0 || self.cpe_base_grid == 0 {
            return Err(Error::Config("patch_size, depth and cpe_base_grid must be positive".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads)));
        }
        if self.window_sizes.contains(&0) {
            return Err(Error::Config("window sizes must be positive".into()));
        }
        Ok(())
    }

    /// Patched grid for a square input, or an error if the side is not a multiple of the patch.
    pub fn grid_for(&self, resolution: usize) -> Result<usize> {
        if resolution == 0 || resolution % self.patch_size != 0 {
            return Err(Error::invalid(
                "patchify",
                format!("resolution {resolution} not divisible by patch size {}", self.patch_size),
            ));
        }
        Ok(resolution / self.patch_size)
    }

    /// Checks every configured window divides the patched grid at `resolution`.
    pub fn check_resolution(&self, resolution: usize) -> Result<()> {
        let grid = self.grid_for(resolution)?;
        if let Some(w) = self.window_sizes.iter().find(|&&w| grid % w != 0) {
            return Err(Error::Config(format!("window {w} does not divide the {grid}x{grid} patch grid at {resolution}px")));
        }
        Ok(())
    }

    pub fn init<T: Element>(&self, seed: u64, prefix: &str) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng, prefix);
        let (d, ps) = (self.embed_dim, self.patch_size);
        init.linear("patch", 3 * ps * ps, d);
        init.normal("pos", &[self.cpe_base_grid, self.cpe_base_grid, d], 0.02);
        if self.summarization == Summarization::ClsToken {
            init.normal("cls", &[d], 0.02);
        }
        for i in 0..self.depth {
            init.block(&format!("blocks.{i}"), d, self.hidden_dim());
        }
        init.layer_norm("norm", d);
        Ok(store)
    }

    pub fn num_params(&self) -> usize {
        let (d, ps, h) = (self.embed_dim, self.patch_size, self.hidden_dim());
        let block = 2 * 2 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d);
        let cls = if self.summarization == Summarization::ClsToken { d } else { 0 };
        (3 * ps * ps * d + d) + self.cpe_base_grid * self.cpe_base_grid * d + cls + self.depth * block + 2 * d
    }
}

/// Attention layout for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMode {
    Plain,
    ViTDet { window: usize },
}

/// Relative window `(y0, x0, h, w)` of the position-embedding grid.
pub type PosWindow = (f64, f64, f64, f64);

pub const FULL_WINDOW: PosWindow = (0.0, 0.0, 1.0, 1.0);

/// Student features for a batch.
#[derive(Clone, Copy, Debug)]
pub struct StudentOutput {
    /// `[B, d]`
    pub summary: Var,
    /// `[B*gh*gw, d]`, row-major over the patch grid within each image.
    pub spatial: Var,
    pub grid: (usize, usize),
    pub batch: usize,
}

/// `[B,3,H,W]` images to `[B*T, d]` patch tokens through a linear projection.
pub fn patchify<T: Element>(g: &mut Graph<T>, images: Var, patch_size: usize, w: Var, b: Option<Var>) -> Result<Var> {
    let s = g.shape(images).to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape("patchify", format!("expected [B,3,H,W], got {s:?}")));
    }
    let (bsz, h, wd) = (s[0], s[2], s[3]);
    if patch_size == 0 || h % patch_size != 0 || wd % patch_size != 0 {
        return Err(Error::invalid("patchify", format!("{h}x{wd} not divisible by patch size {patch_size}")));
    }
    let (gh, gw) = (h / patch_size, wd / patch_size);
    let x = g.reshape(images, &[bsz, 3, gh, patch_size, gw, patch_size])?;
    let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
    let x = g.reshape(x, &[bsz * gh * gw, 3 * patch_size * patch_size])?;
    g.linear(x, w, b)
}

/// Draws a square CPE crop window with relative side in `[0.5, 1.0]` and uniform offset.
pub fn sample_cpe_window(seed: u64) -> PosWindow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc9e0_0000_0000_0001);
    let side: f64 = rng.gen_range(0.5..=1.0);
    let y0 = rng.gen_range(0.0..=1.0 - side);
    let x0 = rng.gen_range(0.0..=1.0 - side);
    (y0, x0, side, side)
}

/// Crops the `[G,G,d]` base embedding to `window` and bilinearly resizes it to `[gh*gw, d]`.
pub fn cpe_positions<T: Element>(g: &mut Graph<T>, base: Var, window: PosWindow, grid: (usize, usize)) -> Result<Var> {
    let s = g.shape(base).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("cpe_positions", format!("base must be [G,G,d], got {s:?}")));
    }
    let d = s[2];
    let x = g.permute(base, &[2, 0, 1])?;
    let x = g.reshape(x, &[1, d, s[0], s[1]])?;
    let x = g.crop_resize(x, window, grid.0, grid.1)?;
    let x = g.reshape(x, &[d, grid.0 * grid.1])?;
    g.permute(x, &[1, 0])
}

/// Window-major patch order: `out[j] = in[perm[j]]` groups every `window x window`
/// block of the grid contiguously, blocks in row-major order.
pub fn vitdet_reorder(grid: (usize, usize), window: usize) -> Result<Vec<usize>> {
    let (gh, gw) = grid;
    if window == 0 || gh % window != 0 || gw % window != 0 {
        return Err(Error::invalid("vitdet_reorder", format!("window {window} does not divide grid {gh}x{gw}")));
    }
    let mut perm = Vec::with_capacity(gh * gw);
    for wy in 0..gh / window {
        for wx in 0..gw / window {
            for y in 0..window {
                for x in 0..window {
                    perm.push((wy * window + y) * gw + wx * window + x);
                }
            }
        }
    }
    Ok(perm)
}

/// Inverse permutation, used to scatter window-major tokens back to input order.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

/// Applies a per-image row permutation to `batch` stacked images of `t` rows.
fn batched(perm: &[usize], batch: usize) -> Vec<usize> {
    let t = perm.len();
    (0..batch).flat_map(|b| perm.iter().map(move |&p| b * t + p)).collect()
}

/// Summary vector per image: the CLS output or the mean of patch tokens.
pub fn summarize<T: Element>(
    g: &mut Graph<T>,
    patches: Var,
    cls: Option<Var>,
    mode: Summarization,
    batch: usize,
) -> Result<Var> {
    match (mode, cls) {
        (Summarization::ClsToken, Some(c)) => Ok(c),
        (Summarization::ClsToken, None) => Err(Error::invalid("summarize", "cls_token summarization without a CLS token")),
        (Summarization::Avgpool, _) => g.mean_groups(patches, batch),
    }
}

/// Interleaves `[B,d]` CLS rows in front of each image's `[t,d]` patch rows.
fn attach_cls<T: Element>(g: &mut Graph<T>, cls: Var, patches: Var, batch: usize, t: usize) -> Result<Var> {
    let all = g.concat(&[cls, patches], 0)?;
    let idx: Vec<usize> = (0..batch).flat_map(|b| std::iter::once(b).chain((0..t).map(move |j| batch + b * t + j))).collect();
    g.gather_rows(all, &idx)
}

fn detach_cls<T: Element>(g: &mut Graph<T>, x: Var, batch: usize, t: usize) -> Result<(Var, Var)> {
    let cls_idx: Vec<usize> = (0..batch).map(|b| b * (t + 1)).collect();
    let patch_idx: Vec<usize> = (0..batch).flat_map(|b| (0..t).map(move |j| b * (t + 1) + 1 + j)).collect();
    Ok((g.gather_rows(x, &cls_idx)?, g.gather_rows(x, &patch_idx)?))
}

/// Forward pass over `[B,3,H,W]` images.
///
/// In ViTDet mode the patches are reordered window-major; layer `i` attends
/// within windows when `i % (num_windowed+1) < num_windowed`, globally
/// otherwise, and the last layer is always global. The CLS token only joins
/// global layers. A window covering the whole grid is a single global window,
/// so every layer runs as in plain mode.
pub fn vit_forward<T: Element>(
    g: &mut Graph<T>,
    cfg: &ViTConfig,
    scope: &Scope<T>,
    images: Var,
    mode: AttnMode,
    pos_window: PosWindow,
) -> Result<StudentOutput> {
    let s = g.shape(images).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("vit_forward", format!("expected [B,3,H,W], got {s:?}")));
    }
    let batch = s[0];
    let gh = cfg.grid_for(s[2])?;
    let gw = cfg.grid_for(s[3])?;
    let t = gh * gw;
    let d = cfg.embed_dim;

    let pw = scope.get(g, "patch.w")?;
    let pb = scope.get(g, "patch.b")?;
    let tokens = patchify(g, images, cfg.patch_size, pw, Some(pb))?;
    let base = scope.get(g, "pos")?;
    let pos = cpe_positions(g, base, pos_window, (gh, gw))?;
    let tokens = g.reshape(tokens, &[batch, t, d])?;
    let tokens = g.add_tiled(tokens, pos)?;
    let mut patches = g.reshape(tokens, &[batch * t, d])?;

    let use_cls = cfg.summarization == Summarization::ClsToken;
    let mut cls = if use_cls {
        let c = scope.get(g, "cls")?;
        let c = g.reshape(c, &[1, d])?;
        Some(g.gather_rows(c, &vec![0; batch])?)
    } else {
        None
    };

    let window = match mode {
        AttnMode::Plain => None,
        AttnMode::ViTDet { window } => {
            let perm = vitdet_reorder((gh, gw), window)?;
            (perm.len() / (window * window) > 1).then_some((window, perm))
        }
    };

    let global = |g: &mut Graph<T>, i: usize, patches: Var, cls: Option<Var>| -> Result<(Var, Option<Var>)> {
        let bs = scope.sub(&format!("blocks.{i}"));
        match cls {
            Some(c) => {
                let x = attach_cls(g, c, patches, batch, t)?;
                let x = nn::block(g, &bs, x, batch, cfg.heads)?;
                let (c, p) = detach_cls(g, x, batch, t)?;
                Ok((p, Some(c)))
            }
            None => Ok((nn::block(g, &bs, patches, batch, cfg.heads)?, None)),
        }
    };

    match &window {
        None => {
            for i in 0..cfg.depth {
                (patches, cls) = global(g, i, patches, cls)?;
            }
        }
        Some((w, perm)) => {
            patches = g.gather_rows(patches, &batched(perm, batch))?;
            let n_windows = t / (w * w);
            let period = cfg.num_windowed + 1;
            for i in 0..cfg.depth {
                let windowed = i + 1 < cfg.depth && i % period < cfg.num_windowed;
                if windowed {
                    let bs = scope.sub(&format!("blocks.{i}"));
                    patches = nn::block(g, &bs, patches, batch * n_windows, cfg.heads)?;
                } else {
                    (patches, cls) = global(g, i, patches, cls)?;
                }
            }
            patches = g.gather_rows(patches, &batched(&invert_permutation(perm), batch))?;
        }
    }

    let patches = nn::layer_norm(g, scope, "norm", patches)?;
    let cls = match cls {
        Some(c) => Some(nn::layer_norm(g, scope, "norm", c)?),
        None => None,
    };
    let summary = summarize(g, patches, cls, cfg.summarization, batch)?;
    Ok(StudentOutput { summary, spatial: patches, grid: (gh, gw), batch })
}

/// Analytic forward FLOPs (multiply-accumulates x2) for a batch of one
/// `resolution x resolution` image in plain mode.
pub fn vit_flops(cfg: &ViTConfig, resolution: usize) -> Result<u64> {
    let grid = cfg.grid_for(resolution)?;
    let t = grid * grid;
    let d = cfg.embed_dim;
    let seq = t + usize::from(cfg.summarization == Summarization::ClsToken);
    let patch = 2 * t * 3 * cfg.patch_size * cfg.patch_size * d;
    Ok(patch as u64 + cfg.depth as u64 * nn::block_flops(seq, 1, d, cfg.hidden_dim()))
}
