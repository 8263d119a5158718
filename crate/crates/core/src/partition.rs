//! Rank/teacher partitioning and the sequential simulation of a
//! data-parallel step.
//!
//! Teachers sharing `(per_rank_batch, resolution)` form a group; each group
//! owns a contiguous block of simulated ranks. A rank evaluates only its
//! group's teachers. Gradients are reduced with a mean over all ranks, which
//! makes each term's contribution `|R_t| / W` times its mean over the ranks
//! that hold it.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{generate_sample, random_resized_crop, resize_sample};
use crate::error::{Error, Result};
use crate::loss::{balance, feature_term, summary_term, BalancerMode, BalancerState, Branch, LossWeights, Term, TermKey};
use crate::nn::Scope;
use crate::numerics::{Element, Graph, ParamStore, Tensor, Var};
use crate::rng::stream_seed;
use crate::student::{StudentConfig, StudentKind};
use crate::teachers::{adaptor_forward, head_prefix, teacher_forward, TeacherSpec};
use crate::vit::{sample_cpe_window, AttnMode, PosWindow, FULL_WINDOW};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankGroup {
    pub group_id: usize,
    pub teacher_ids: Vec<String>,
    pub per_rank_batch: usize,
    pub resolution: usize,
    pub ranks: Vec<usize>,
    /// Fraction of ranks held by this group.
    pub sample_rate: f64,
}

/// Groups `(id, per_rank_batch, resolution)` entries, ordered by `(resolution, batch)`.
/// Teacher ids keep their input order within a group.
pub fn group_entries(entries: &[(&str, usize, usize)]) -> Result<Vec<RankGroup>> {
    if entries.is_empty() {
        return Err(Error::Config("no teachers to partition".into()));
    }
    let mut keyed: BTreeMap<(usize, usize), Vec<String>> = BTreeMap::new();
    for &(id, batch, res) in entries {
        keyed.entry((res, batch)).or_default().push(id.to_string());
    }
    Ok(keyed
        .into_iter()
        .enumerate()
        .map(|(i, ((resolution, per_rank_batch), teacher_ids))| RankGroup {
            group_id: i,
            teacher_ids,
            per_rank_batch,
            resolution,
            ranks: Vec::new(),
            sample_rate: 0.0,
        })
        .collect())
}

pub fn build_groups(teachers: &[TeacherSpec]) -> Result<Vec<RankGroup>> {
    let entries: Vec<(&str, usize, usize)> =
        teachers.iter().map(|t| (t.id.as_str(), t.per_rank_batch, t.native_resolution)).collect();
    group_entries(&entries)
}

/// Groups with their rank blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub world_size: usize,
    pub groups: Vec<RankGroup>,
}

impl Assignment {
    /// Index into `groups` of the group holding `rank`.
    pub fn group_of(&self, rank: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.ranks.contains(&rank))
    }

    /// `partition.json` contents.
    pub fn to_json(&self) -> String {
        let v = serde_json::json!({
            "world_size": self.world_size,
            "effective_batch_size": effective_batch_size(self),
            "groups": self.groups,
        });
        serde_json::to_string_pretty(&v).expect("assignment serializes")
    }
}

/// Contiguous rank blocks of `round(split_i * W)` ranks, the remainder to
/// the last group. Every group keeps at least one rank. An empty `split`
/// means equal shares.
pub fn assign_ranks(groups: Vec<RankGroup>, world_size: usize, split: &[f64]) -> Result<Assignment> {
    let n = groups.len();
    if n == 0 {
        return Err(Error::Config("no groups to assign".into()));
    }
    if world_size < n {
        return Err(Error::Config(format!("world_size {world_size} is smaller than the {n} teacher groups")));
    }
    let split: Vec<f64> = if split.is_empty() { vec![1.0 / n as f64; n] } else { split.to_vec() };
    if split.len() != n {
        return Err(Error::Config(format!("split has {} entries for {n} groups", split.len())));
    }
    if split.iter().any(|&s| !(s >= 0.0)) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split {split:?} must be non-negative and sum to 1")));
    }
    let mut groups = groups;
    let mut next = 0;
    for (i, g) in groups.iter_mut().enumerate() {
        let left_after = n - i - 1;
        let size = if left_after == 0 {
            world_size - next
        } else {
            ((split[i] * world_size as f64).round() as usize).clamp(1, world_size - next - left_after)
        };
        g.ranks = (next..next + size).collect();
        g.sample_rate = size as f64 / world_size as f64;
        next += size;
    }
    Ok(Assignment { world_size, groups })
}

/// Samples per step summed over all ranks.
pub fn effective_batch_size(a: &Assignment) -> usize {
    a.groups.iter().map(|g| g.ranks.len() * g.per_rank_batch).sum()
}

/// One rank's inputs for a step.
#[derive(Clone, Debug)]
pub struct RankBatch {
    pub rank: usize,
    /// Index into `Assignment::groups`.
    pub group: usize,
    /// Teacher view at the group resolution, `[B,3,R,R]`.
    pub teacher_images: Tensor<f32>,
    /// The same view at the student resolution.
    pub student_images: Tensor<f32>,
    pub class_ids: Vec<usize>,
    /// CPE crop of the student position embeddings.
    pub pos_window: PosWindow,
}

/// Student input side for a group.
pub fn student_resolution(cfg: &RunConfig, group: &RankGroup) -> usize {
    cfg.trainer.student_resolution.unwrap_or(group.resolution)
}

/// Seed of the `i`-th sample a rank draws at `step`.
pub fn sample_seed(cfg: &RunConfig, step: u64, rank: usize, i: usize, per_rank: usize) -> u64 {
    match cfg.data.pool_size {
        Some(pool) => {
            // each step walks a fresh permutation of the fixed pool
            let base = stream_seed(cfg.seed, "pool", &[]) >> 1;
            let mut order: Vec<u64> = (0..pool as u64).collect();
            let mut s = stream_seed(cfg.seed, "pool-order", &[step]);
            for k in (1..order.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                order.swap(k, ((s >> 33) % (k as u64 + 1)) as usize);
            }
            base + order[(rank * per_rank + i) % pool]
        }
        None => stream_seed(cfg.seed, "data", &[step, rank as u64, i as u64]),
    }
}

/// Draws every rank's batch for `step`. Each image is augmented once and
/// that view feeds the student and the rank's teachers.
pub fn draw_rank_batches(cfg: &RunConfig, a: &Assignment, step: u64) -> Result<Vec<RankBatch>> {
    let mut out = Vec::with_capacity(a.world_size);
    for rank in 0..a.world_size {
        let gi = a.group_of(rank).ok_or_else(|| Error::Config(format!("rank {rank} has no group")))?;
        let group = &a.groups[gi];
        let (b, res, sres) = (group.per_rank_batch, group.resolution, student_resolution(cfg, group));
        let mut timg = Vec::with_capacity(b * 3 * res * res);
        let mut simg = Vec::with_capacity(b * 3 * sres * sres);
        let mut class_ids = Vec::with_capacity(b);
        for i in 0..b {
            let sample = generate_sample(sample_seed(cfg, step, rank, i, b), cfg.data.num_classes, res)?;
            let view = if cfg.data.augment {
                let crop_seed = stream_seed(cfg.seed, "crop", &[step, rank as u64, i as u64]);
                random_resized_crop(&sample, crop_seed, &cfg.data.crop, res)?
            } else {
                sample
            };
            timg.extend_from_slice(view.image.data());
            simg.extend_from_slice(resize_sample(&view, sres)?.image.data());
            class_ids.push(view.class_id);
        }
        let pos_window = if cfg.student.kind == StudentKind::Vit && cfg.student.cpe_augment {
            sample_cpe_window(stream_seed(cfg.seed, "cpe", &[step, rank as u64]))
        } else {
            FULL_WINDOW
        };
        out.push(RankBatch {
            rank,
            group: gi,
            teacher_images: Tensor::new([b, 3, res, res], timg)?,
            student_images: Tensor::new([b, 3, sres, sres], simg)?,
            class_ids,
            pos_window,
        });
    }
    Ok(out)
}

/// Everything a step reads: student, heads and balancer scalars in `params`.
#[derive(Clone, Copy)]
pub struct Model<'a, T: Element> {
    pub student: &'a StudentConfig,
    pub teachers: &'a [TeacherSpec],
    pub params: &'a ParamStore<T>,
    pub weights: &'a LossWeights,
}

impl<T: Element> Model<'_, T> {
    fn teacher(&self, id: &str) -> Result<&TeacherSpec> {
        self.teachers.iter().find(|t| t.id == id).ok_or_else(|| Error::Config(format!("unknown teacher {id}")))
    }

    /// Term keys in teacher order.
    pub fn term_keys(&self) -> Vec<TermKey> {
        self.teachers
            .iter()
            .flat_map(|t| [TermKey::new(t.id.clone(), Branch::Summary), TermKey::new(t.id.clone(), Branch::Feature)])
            .collect()
    }
}

/// Records one rank's forward on `g` and returns its unweighted terms.
pub fn rank_terms<T: Element>(
    g: &mut Graph<T>,
    model: &Model<T>,
    group: &RankGroup,
    batch: &RankBatch,
    attn: AttnMode,
) -> Result<Vec<(TermKey, Var)>> {
    let images = g.constant(batch.student_images.cast());
    let out = model.student.forward(g, model.params, images, attn, batch.pos_window)?;
    let teacher_images: Tensor<T> = batch.teacher_images.cast();
    let mut terms = Vec::new();
    for id in &group.teacher_ids {
        let spec = model.teacher(id)?;
        let target = teacher_forward(spec, &teacher_images)?;
        let (ys, yv) = adaptor_forward(g, &Scope::new(model.params, head_prefix(id)), &out)?;
        let z = g.constant(target.summary);
        let zs = g.constant(target.spatial);
        terms.push((TermKey::new(id.clone(), Branch::Summary), summary_term(g, ys, z)?));
        let f = feature_term(g, yv, out.grid, zs, target.grid, out.batch, model.weights)?;
        terms.push((TermKey::new(id.clone(), Branch::Feature), f));
    }
    Ok(terms)
}

/// Result of one simulated step.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    /// Mean-reduced gradients of every parameter that received one.
    pub grads: BTreeMap<String, Tensor<T>>,
    pub total: f64,
    /// Per-term loss, averaged over the ranks holding the term.
    pub terms: BTreeMap<TermKey, f64>,
    /// Effective balancer weight per term.
    pub weights: BTreeMap<TermKey, f64>,
    /// Names of the parameters each rank contributed a gradient to.
    pub rank_params: Vec<Vec<String>>,
}

/// Ranks per term and the `|R_t| / W` fraction.
fn term_ranks(a: &Assignment, keys: &[TermKey]) -> BTreeMap<TermKey, (usize, f64)> {
    keys.iter()
        .filter_map(|k| {
            let n: usize = a.groups.iter().filter(|g| g.teacher_ids.contains(&k.teacher)).map(|g| g.ranks.len()).sum();
            (n > 0).then(|| (k.clone(), (n, n as f64 / a.world_size as f64)))
        })
        .collect()
}

/// Balances the per-term means on `g`; returns the balanced total.
fn combine<T: Element>(
    g: &mut Graph<T>,
    model: &Model<T>,
    means: &[(TermKey, Var)],
    ranks: &BTreeMap<TermKey, (usize, f64)>,
    balancer: &mut BalancerState,
) -> Result<crate::loss::Balanced> {
    let terms: Vec<Term> = means.iter().map(|(k, v)| Term { key: k.clone(), loss: *v, scale: ranks[k].1 }).collect();
    let b = if balancer.mode == BalancerMode::Uncertainty {
        terms.iter().map(|t| g.param(model.params, &t.key.balancer_param())).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    balance(g, &terms, model.weights, balancer, &b)
}

fn check_batches(a: &Assignment, batches: &[RankBatch]) -> Result<()> {
    if batches.len() != a.world_size || batches.iter().enumerate().any(|(r, b)| b.rank != r || a.group_of(r) != Some(b.group)) {
        return Err(Error::invalid("simulate_step", "need exactly one batch per rank, in rank order, on the rank's group"));
    }
    Ok(())
}

fn to_f64<T: Element>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).item().to_f64()
}

fn check_finite<T: Element>(grads: &BTreeMap<String, Tensor<T>>, total: f64) -> Result<()> {
    if !total.is_finite() || grads.values().any(|t| !t.all_finite()) {
        return Err(Error::NonFinite("training step"));
    }
    Ok(())
}

/// Runs every rank on its own tape, then reduces the gradients in rank order.
///
/// The per-rank forwards and backwards may run in parallel; the reduction
/// order is fixed, so the result does not depend on scheduling.
pub fn simulate_step<T: Element>(
    model: &Model<T>,
    a: &Assignment,
    batches: &[RankBatch],
    attn: AttnMode,
    balancer: &mut BalancerState,
) -> Result<StepOutput<T>> {
    check_batches(a, batches)?;
    let keys = model.term_keys();
    let ranks = term_ranks(a, &keys);

    let forwards: Vec<(Graph<T>, Vec<(TermKey, Var)>)> = batches
        .par_iter()
        .map(|b| {
            let mut g = Graph::new();
            let terms = rank_terms(&mut g, model, &a.groups[b.group], b, attn)?;
            Ok((g, terms))
        })
        .collect::<Result<_>>()?;

    // per-term means over the ranks holding the term
    let mut sums: BTreeMap<TermKey, T> = BTreeMap::new();
    for (g, terms) in &forwards {
        for (k, v) in terms {
            *sums.entry(k.clone()).or_insert(T::ZERO) += g.value(*v).item();
        }
    }
    let mut top = Graph::<T>::new();
    let means: Vec<(TermKey, Var)> = keys
        .iter()
        .filter(|k| sums.contains_key(*k))
        .map(|k| {
            let mean = sums[k] / T::from_f64(ranks[k].0 as f64);
            (k.clone(), top.leaf(Tensor::scalar(mean)))
        })
        .collect();
    let balanced = combine(&mut top, model, &means, &ranks, balancer)?;
    let top_grads = top.backward(balanced.total)?;
    let dmean: BTreeMap<TermKey, T> = means
        .iter()
        .map(|(k, v)| (k.clone(), top_grads.get(*v).map_or(T::ZERO, |t| t.item()) / T::from_f64(ranks[k].0 as f64)))
        .collect();

    let rank_grads: Vec<BTreeMap<String, Tensor<T>>> = forwards
        .par_iter()
        .map(|(g, terms)| {
            let seeds: Vec<(Var, Tensor<T>)> = terms.iter().map(|(k, v)| (*v, Tensor::scalar(dmean[k]))).collect();
            Ok(g.backward_seeded(&seeds)?.named())
        })
        .collect::<Result<_>>()?;

    let mut grads: BTreeMap<String, Tensor<T>> = top_grads.named();
    let mut rank_params = Vec::with_capacity(rank_grads.len());
    for rg in rank_grads {
        rank_params.push(rg.keys().cloned().collect());
        for (name, t) in rg {
            match grads.get_mut(&name) {
                Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, &b)| *a += b),
                None => {
                    grads.insert(name, t);
                }
            }
        }
    }
    let total = to_f64(&top, balanced.total);
    check_finite(&grads, total)?;
    let terms = means.iter().map(|(k, v)| (k.clone(), to_f64(&top, *v))).collect();
    Ok(StepOutput { grads, total, terms, weights: balanced.weights, rank_params })
}

/// The same step as one fused computation: every rank's forward on a single
/// tape and one backward pass.
pub fn fused_step<T: Element>(
    model: &Model<T>,
    a: &Assignment,
    batches: &[RankBatch],
    attn: AttnMode,
    balancer: &mut BalancerState,
) -> Result<StepOutput<T>> {
    check_batches(a, batches)?;
    let keys = model.term_keys();
    let ranks = term_ranks(a, &keys);
    let mut g = Graph::<T>::new();
    let mut acc: BTreeMap<TermKey, Var> = BTreeMap::new();
    for b in batches {
        for (k, v) in rank_terms(&mut g, model, &a.groups[b.group], b, attn)? {
            let s = g.scale(v, 1.0 / ranks[&k].0 as f64)?;
            let s = g.reshape(s, &[])?;
            let next = match acc.get(&k) {
                Some(&prev) => g.add(prev, s)?,
                None => s,
            };
            acc.insert(k, next);
        }
    }
    let means: Vec<(TermKey, Var)> = keys.iter().filter_map(|k| acc.get(k).map(|&v| (k.clone(), v))).collect();
    let balanced = combine(&mut g, model, &means, &ranks, balancer)?;
    let grads = g.backward(balanced.total)?.named();
    let total = to_f64(&g, balanced.total);
    check_finite(&grads, total)?;
    let terms = means.iter().map(|(k, v)| (k.clone(), to_f64(&g, *v))).collect();
    Ok(StepOutput { grads, total, terms, weights: balanced.weights, rank_params: Vec::new() })
}
