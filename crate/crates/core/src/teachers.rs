//! Frozen synthetic teachers and the student's per-teacher adaptor heads.

use serde::{Deserialize, Serialize};

use crate::data::{generate_sample, resize_sample, PIXEL_MEAN, PIXEL_STD};
use crate::error::{Error, Result};
use crate::nn::{self, Init, Scope};
use crate::numerics::{Element, Graph, ParamStore, Tensor, Var};
use crate::vit::{vit_forward, AttnMode, StudentOutput, Summarization, ViTConfig, FULL_WINDOW};

/// Stock teacher profile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherProfile {
    ClipLike,
    DinoLike,
    SamLike,
}

impl TeacherProfile {
    pub const ALL: [TeacherProfile; 3] = [Self::ClipLike, Self::DinoLike, Self::SamLike];

    pub fn id(self) -> &'static str {
        match self {
            Self::ClipLike => "clip-like",
            Self::DinoLike => "dino-like",
            Self::SamLike => "sam-like",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.id() == id)
            .ok_or_else(|| Error::Config(format!("unknown teacher profile {id:?}")))
    }

    pub fn native_resolution(self) -> usize {
        match self {
            Self::ClipLike | Self::DinoLike => 32,
            Self::SamLike => 128,
        }
    }

    pub fn default_batch(self) -> usize {
        match self {
            Self::ClipLike | Self::DinoLike => 32,
            Self::SamLike => 4,
        }
    }

    pub fn vit_config(self) -> ViTConfig {
        let (patch_size, embed_dim, summarization) = match self {
            Self::ClipLike => (4, 48, Summarization::ClsToken),
            Self::DinoLike => (4, 40, Summarization::ClsToken),
            Self::SamLike => (8, 32, Summarization::Avgpool),
        };
        ViTConfig {
            patch_size,
            embed_dim,
            depth: 2,
            heads: 4,
            mlp_ratio: 2.0,
            cpe_base_grid: self.native_resolution() / patch_size,
            summarization,
            window_sizes: Vec::new(),
            num_windowed: 0,
        }
    }
}

/// Teacher entry of a run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub profile: TeacherProfile,
    pub seed: u64,
    /// Overrides the profile's per-rank batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_rank_batch: Option<usize>,
}

impl TeacherConfig {
    pub fn new(profile: TeacherProfile, seed: u64) -> Self {
        Self { profile, seed, per_rank_batch: None }
    }
}

/// An immutable teacher: frozen parameters plus its input/output conventions.
#[derive(Clone, Debug)]
pub struct TeacherSpec {
    pub id: String,
    pub profile: TeacherProfile,
    pub config: ViTConfig,
    pub params: ParamStore<f32>,
    pub native_resolution: usize,
    pub per_rank_batch: usize,
    pub feature_dim: usize,
    pub summary_mode: Summarization,
    pub patch_size: usize,
    pub hash: String,
}

impl TeacherSpec {
    /// Side of the spatial grid at native resolution.
    pub fn grid(&self) -> usize {
        self.native_resolution / self.patch_size
    }

    /// Fails if the parameters no longer match the recorded hash.
    pub fn verify(&self) -> Result<()> {
        let now = self.params.content_hash();
        if now != self.hash {
            return Err(crate::error::CheckpointError::TeacherMismatch(format!("{}: {} != {}", self.id, now, self.hash)).into());
        }
        Ok(())
    }
}

pub fn make_synthetic_teacher(seed: u64, cfg: &TeacherConfig) -> Result<TeacherSpec> {
    let profile = cfg.profile;
    let vit = profile.vit_config();
    vit.grid_for(profile.native_resolution())?;
    let mut params = vit.init::<f32>(seed, "")?;
    params.set_frozen(true);
    let hash = params.content_hash();
    Ok(TeacherSpec {
        id: profile.id().to_string(),
        profile,
        native_resolution: profile.native_resolution(),
        per_rank_batch: cfg.per_rank_batch.unwrap_or(profile.default_batch()),
        feature_dim: vit.embed_dim,
        summary_mode: vit.summarization,
        patch_size: vit.patch_size,
        config: vit,
        params,
        hash,
    })
}

/// Teacher targets for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutput<T: Element = f32> {
    /// `[B, feature_dim]`
    pub summary: Tensor<T>,
    /// `[B*th*tw, feature_dim]`
    pub spatial: Tensor<T>,
    pub grid: (usize, usize),
}

/// Frozen forward of `[B,3,R,R]` images at the teacher's native resolution.
pub fn teacher_forward<T: Element>(spec: &TeacherSpec, images: &Tensor<T>) -> Result<TeacherOutput<T>> {
    let s = images.shape();
    if s.len() != 4 || s[2] != spec.native_resolution || s[3] != spec.native_resolution {
        return Err(Error::invalid(
            "teacher_forward",
            format!("{} expects {}px input, got {s:?}", spec.id, spec.native_resolution),
        ));
    }
    let mut params: ParamStore<T> = spec.params.cast();
    params.set_frozen(true);
    let mut g = Graph::<T>::new();
    let (mean, std) = (T::from_f64(PIXEL_MEAN), T::from_f64(PIXEL_STD));
    let x = g.constant(images.map(|v| (v - mean) / std));
    let out = vit_forward(&mut g, &spec.config, &Scope::new(&params, ""), x, AttnMode::Plain, FULL_WINDOW)?;
    Ok(TeacherOutput { summary: g.value(out.summary).clone(), spatial: g.value(out.spatial).clone(), grid: out.grid })
}

/// Normalized class prototypes `[C, d]`: the mean teacher summary over 64
/// held-out images per class.
pub fn class_prototypes(spec: &TeacherSpec, num_classes: usize) -> Result<Tensor<f32>> {
    const PER_CLASS: usize = 64;
    const SEED_BASE: u64 = 1 << 40;
    let res = spec.native_resolution;
    let d = spec.feature_dim;
    let mut protos = vec![0f32; num_classes * d];
    for c in 0..num_classes {
        let mut batch = Vec::with_capacity(PER_CLASS * 3 * res * res);
        for k in 0..PER_CLASS {
            let seed = SEED_BASE + (k * num_classes + c) as u64;
            let s = resize_sample(&generate_sample(seed, num_classes, res)?, res)?;
            batch.extend_from_slice(s.image.data());
        }
        let out = teacher_forward(spec, &Tensor::new([PER_CLASS, 3, res, res], batch)?)?;
        let row = &mut protos[c * d..(c + 1) * d];
        for z in out.summary.data().chunks(d) {
            row.iter_mut().zip(z).for_each(|(r, &v)| *r += v / PER_CLASS as f32);
        }
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::new([num_classes, d], protos)
}

/// Parameter prefix of a teacher's adaptor heads.
pub fn head_prefix(teacher_id: &str) -> String {
    format!("heads.{teacher_id}")
}

/// Adds one summary and one spatial two-layer MLP head for `teacher_id`.
pub fn init_adaptor<T: Element>(store: &mut ParamStore<T>, teacher_id: &str, in_dim: usize, out_dim: usize, seed: u64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init::new(store, &mut rng, head_prefix(teacher_id));
    for branch in ["summary", "feature"] {
        init.linear(&format!("{branch}.fc1"), in_dim, in_dim);
        init.linear(&format!("{branch}.fc2"), in_dim, out_dim);
    }
}

/// Per-teacher projections of the student output: `(summary [B,d_t], spatial [B*gh*gw,d_t])`.
pub fn adaptor_forward<T: Element>(g: &mut Graph<T>, scope: &Scope<T>, x: &StudentOutput) -> Result<(Var, Var)> {
    let ys = nn::mlp(g, &scope.sub("summary"), x.summary)?;
    let yv = nn::mlp(g, &scope.sub("feature"), x.spatial)?;
    Ok((ys, yv))
}
