//! Weighted k-NN, prototype zero-shot classification, linear-probe dense
//! segmentation and mIoU.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{check_param_set, file_hash, load_checkpoint};
use crate::config::RunConfig;
use crate::data::{generate_sample, SyntheticSample};
use crate::error::{CheckpointError, Error, Result};
use crate::nn::Scope;
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::optim::{adamw_step, AdamWParams, OptimState};
use crate::student::StudentConfig;
use crate::trainer::{build_teachers, init_model};
use crate::teachers::{adaptor_forward, class_prototypes, head_prefix, teacher_forward, TeacherSpec};
use crate::vit::{AttnMode, FULL_WINDOW};

/// Seed bases of the evaluation splits, disjoint from training draws and prototypes.
pub const BANK_SEED_BASE: u64 = 1 << 41;
pub const QUERY_SEED_BASE: u64 = 1 << 42;
pub const PROBE_TRAIN_SEED_BASE: u64 = 1 << 43;
pub const PROBE_TEST_SEED_BASE: u64 = 1 << 44;

const CHUNK: usize = 32;

fn normalize_rows(data: &mut [f32], d: usize) {
    for row in data.chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Summary vectors with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    /// `[N, d]`
    pub embeddings: Tensor<f32>,
    pub labels: Vec<usize>,
    pub normalized: bool,
}

impl EmbeddingBank {
    pub fn new(embeddings: Tensor<f32>, labels: Vec<usize>, normalize: bool) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.dim(0) != labels.len() {
            return Err(Error::shape("EmbeddingBank", format!("{:?} rows vs {} labels", embeddings.shape(), labels.len())));
        }
        let mut embeddings = embeddings;
        if normalize {
            let d = embeddings.dim(1);
            normalize_rows(embeddings.data_mut(), d);
        }
        Ok(Self { embeddings, labels, normalized: normalize })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Cosine k-NN: each of the `k` nearest bank entries votes for its label
/// with weight `exp(sim / temperature)`. `k` is clamped to the bank size.
pub fn knn_classify(bank: &EmbeddingBank, queries: &Tensor<f32>, k: usize, temperature: f64) -> Result<Vec<usize>> {
    if bank.is_empty() {
        return Err(Error::invalid("knn_classify", "empty bank"));
    }
    if k == 0 || temperature <= 0.0 {
        return Err(Error::invalid("knn_classify", "k and temperature must be positive"));
    }
    let d = bank.embeddings.dim(1);
    if queries.rank() != 2 || queries.dim(1) != d {
        return Err(Error::shape("knn_classify", format!("queries {:?} vs bank dim {d}", queries.shape())));
    }
    let k = k.min(bank.len());
    let classes = bank.labels.iter().max().map_or(0, |m| m + 1);
    let mut preds = Vec::with_capacity(queries.dim(0));
    for q in queries.data().chunks(d) {
        let mut sims: Vec<(f64, usize)> = bank.embeddings.data().chunks(d).map(|e| cosine(q, e)).zip(0..).collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0f64; classes];
        for &(s, i) in &sims[..k] {
            votes[bank.labels[i]] += (s / temperature).exp();
        }
        preds.push(argmax(&votes));
    }
    Ok(preds)
}

/// Fraction of equal entries.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

/// Class whose prototype row has the highest cosine similarity with `query`.
pub fn zero_shot_classify(prototypes: &Tensor<f32>, query: &[f32]) -> Result<usize> {
    if prototypes.rank() != 2 || prototypes.dim(1) != query.len() || prototypes.dim(0) == 0 {
        return Err(Error::shape("zero_shot_classify", format!("prototypes {:?} vs query {}", prototypes.shape(), query.len())));
    }
    let sims: Vec<f64> = prototypes.data().chunks(query.len()).map(|p| cosine(p, query)).collect();
    Ok(argmax(&sims))
}

/// Mean over classes with a non-empty union of `|pred & gt| / |pred | gt|`.
pub fn miou(pred: &[u32], gt: &[u32], classes: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("miou", format!("{} vs {} cells", pred.len(), gt.len())));
    }
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= classes || g >= classes {
            return Err(Error::invalid("miou", format!("label outside 0..{classes}")));
        }
        union[p] += 1;
        if p == g {
            inter[p] += 1;
        } else {
            union[g] += 1;
        }
    }
    let ious: Vec<f64> = (0..classes).filter(|&c| union[c] > 0).map(|c| inter[c] as f64 / union[c] as f64).collect();
    Ok(if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 })
}

/// Majority label of each `res/grid` cell; ties go to the lowest label.
pub fn mask_to_grid(mask: &[u32], res: usize, grid: usize) -> Result<Vec<u32>> {
    if grid == 0 || res % grid != 0 || mask.len() != res * res {
        return Err(Error::invalid("mask_to_grid", format!("{} cells at {res}px onto a {grid}x{grid} grid", mask.len())));
    }
    let cell = res / grid;
    let mut out = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for y in gy * cell..(gy + 1) * cell {
                for x in gx * cell..(gx + 1) * cell {
                    *counts.entry(mask[y * res + x]).or_default() += 1;
                }
            }
            let best = counts.iter().fold((0u32, 0usize), |acc, (&l, &n)| if n > acc.1 { (l, n) } else { acc });
            out.push(best.0);
        }
    }
    Ok(out)
}

/// Trained per-position linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeWeights {
    /// `[d, classes]`
    pub w: Tensor<f32>,
    pub b: Tensor<f32>,
}

impl ProbeWeights {
    pub fn classes(&self) -> usize {
        self.b.numel()
    }

    /// Logits `[N, classes]` for `[N, d]` features.
    pub fn logits(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let x = g.constant(features.clone());
        let w = g.constant(self.w.clone());
        let b = g.constant(self.b.clone());
        let y = g.linear(x, w, Some(b))?;
        Ok(g.value(y).clone())
    }

    pub fn predict(&self, features: &Tensor<f32>) -> Result<Vec<u32>> {
        let logits = self.logits(features)?;
        let c = self.classes();
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| argmax(&row.iter().map(|&v| v as f64).collect::<Vec<_>>()) as u32)
            .collect())
    }
}

/// Softmax cross-entropy probe trained full-batch with AdamW (no weight
/// decay). Weights start at zero, so a zero-step probe has uniform logits.
pub fn linear_probe(features: &Tensor<f32>, labels: &[u32], classes: usize, steps: usize, lr: f64) -> Result<ProbeWeights> {
    if features.rank() != 2 || features.dim(0) != labels.len() {
        return Err(Error::shape("linear_probe", format!("{:?} features vs {} labels", features.shape(), labels.len())));
    }
    if labels.iter().any(|&l| l as usize >= classes) {
        return Err(Error::invalid("linear_probe", format!("label outside 0..{classes}")));
    }
    let d = features.dim(1);
    let mut params = ParamStore::<f32>::new();
    params.insert("w", Tensor::zeros([d, classes]));
    params.insert("b", Tensor::zeros([classes]));
    let mut opt = OptimState::new(AdamWParams { weight_decay: 0.0, ..Default::default() }, &params);
    let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    for _ in 0..steps {
        let mut g = Graph::<f32>::new();
        let x = g.constant(features.clone());
        let w = g.param(&params, "w")?;
        let b = g.param(&params, "b")?;
        let y = g.linear(x, w, Some(b))?;
        let loss = g.cross_entropy(y, &targets)?;
        let grads = g.backward(loss)?.named();
        adamw_step(&mut opt, &mut params, &grads, lr, |_| false)?;
    }
    Ok(ProbeWeights { w: params.get("w").expect("w").clone(), b: params.get("b").expect("b").clone() })
}

/// Backbone features of a batch of images.
#[derive(Clone, Debug)]
pub struct Features {
    /// `[N, d]`
    pub summary: Tensor<f32>,
    /// `[N*g*g, d]`
    pub spatial: Tensor<f32>,
    pub grid: usize,
}

fn stack(samples: &[SyntheticSample]) -> Result<Tensor<f32>> {
    let res = samples.first().map_or(0, |s| s.height());
    let data: Vec<f32> = samples.iter().flat_map(|s| s.image.data().iter().copied()).collect();
    Tensor::new([samples.len(), 3, res, res], data)
}

/// Student backbone features, plus the summary output of one adaptor head
/// when `head` names a teacher.
pub fn student_features(
    student: &StudentConfig,
    params: &ParamStore<f32>,
    samples: &[SyntheticSample],
    head: Option<&str>,
) -> Result<(Features, Option<Tensor<f32>>)> {
    let mut summary = Vec::new();
    let mut spatial = Vec::new();
    let mut head_out = Vec::new();
    let mut grid = 0;
    let mut dims = (0, 0);
    for chunk in samples.chunks(CHUNK) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(stack(chunk)?);
        let out = student.forward(&mut g, params, x, AttnMode::Plain, FULL_WINDOW)?;
        grid = out.grid.0;
        dims.0 = g.shape(out.summary)[1];
        summary.extend_from_slice(g.value(out.summary).data());
        spatial.extend_from_slice(g.value(out.spatial).data());
        if let Some(id) = head {
            let (ys, _) = adaptor_forward(&mut g, &Scope::new(params, head_prefix(id)), &out)?;
            dims.1 = g.shape(ys)[1];
            head_out.extend_from_slice(g.value(ys).data());
        }
    }
    let n = samples.len();
    let d = dims.0;
    let feats = Features { summary: Tensor::new([n, d], summary)?, spatial: Tensor::new([n * grid * grid, d], spatial)?, grid };
    let head_out = match head {
        Some(_) => Some(Tensor::new([n, dims.1], head_out)?),
        None => None,
    };
    Ok((feats, head_out))
}

/// Samples `base + i` for `i < n`; consecutive seeds are class-balanced.
pub fn eval_samples(base: u64, n: usize, num_classes: usize, resolution: usize) -> Result<Vec<SyntheticSample>> {
    (0..n as u64).map(|i| generate_sample(base + i, num_classes, resolution)).collect()
}

/// Probe mIoU of a backbone: probe trained on one split's spatial features
/// against grid-reduced masks, scored on another split. Labels are
/// `0..=num_classes` (0 is background).
pub fn probe_miou(student: &StudentConfig, params: &ParamStore<f32>, cfg: &RunConfig) -> Result<f64> {
    let e = &cfg.eval;
    let c = cfg.data.num_classes;
    let run = |base: u64, n: usize| -> Result<(Tensor<f32>, Vec<u32>)> {
        let samples = eval_samples(base, n, c, e.resolution)?;
        let (f, _) = student_features(student, params, &samples, None)?;
        let mut labels = Vec::with_capacity(f.spatial.dim(0));
        for s in &samples {
            labels.extend(mask_to_grid(&s.mask, e.resolution, f.grid)?);
        }
        Ok((f.spatial, labels))
    };
    let (xtr, ytr) = run(PROBE_TRAIN_SEED_BASE, e.probe_train_size)?;
    let (xte, yte) = run(PROBE_TEST_SEED_BASE, e.probe_test_size)?;
    let probe = linear_probe(&xtr, &ytr, c + 1, e.probe_steps, e.probe_lr)?;
    miou(&probe.predict(&xte)?, &yte, c + 1)
}

/// Evaluation report. Holds no timestamps, so equal inputs give equal files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub knn_top1: f64,
    /// Absent without a clip-like teacher.
    pub zero_shot_top1: Option<f64>,
    /// Accuracy of the clip-like teacher itself against the same prototypes.
    pub teacher_zero_shot_top1: Option<f64>,
    pub linear_probe_miou: f64,
    pub config_hash: String,
    pub checkpoint_hash: String,
}

/// k-NN, zero-shot and probe evaluation of the student in `params`.
pub fn evaluate(cfg: &RunConfig, params: &ParamStore<f32>, teachers: &[TeacherSpec], checkpoint_hash: &str) -> Result<EvalReport> {
    let e = &cfg.eval;
    let c = cfg.data.num_classes;
    cfg.student
        .check_resolution(e.resolution)
        .map_err(|err| Error::Config(format!("eval.resolution: {err}")))?;
    let clip = teachers.iter().find(|t| t.id == "clip-like");

    let bank_samples = eval_samples(BANK_SEED_BASE, e.bank_size, c, e.resolution)?;
    let query_samples = eval_samples(QUERY_SEED_BASE, e.query_size, c, e.resolution)?;
    let (bank_f, _) = student_features(&cfg.student, params, &bank_samples, None)?;
    let (query_f, head) = student_features(&cfg.student, params, &query_samples, clip.map(|t| t.id.as_str()))?;
    let bank = EmbeddingBank::new(bank_f.summary, bank_samples.iter().map(|s| s.class_id).collect(), true)?;
    let truth: Vec<usize> = query_samples.iter().map(|s| s.class_id).collect();
    let knn_top1 = accuracy(&knn_classify(&bank, &query_f.summary, e.k, e.temperature)?, &truth);

    let (zero_shot_top1, teacher_zero_shot_top1) = match (clip, head) {
        (Some(t), Some(head)) => {
            let protos = class_prototypes(t, c)?;
            let d = head.dim(1);
            let pred: Vec<usize> = head.data().chunks(d).map(|q| zero_shot_classify(&protos, q)).collect::<Result<_>>()?;
            let at_native: Vec<SyntheticSample> = eval_samples(QUERY_SEED_BASE, e.query_size, c, t.native_resolution)?;
            let tz = teacher_forward(t, &stack(&at_native)?)?.summary;
            let tpred: Vec<usize> = tz.data().chunks(t.feature_dim).map(|q| zero_shot_classify(&protos, q)).collect::<Result<_>>()?;
            (Some(accuracy(&pred, &truth)), Some(accuracy(&tpred, &truth)))
        }
        _ => (None, None),
    };

    let linear_probe_miou = probe_miou(&cfg.student, params, cfg)?;
    Ok(EvalReport {
        knn_top1,
        zero_shot_top1,
        teacher_zero_shot_top1,
        linear_probe_miou,
        config_hash: cfg.config_hash(),
        checkpoint_hash: checkpoint_hash.to_string(),
    })
}

/// Loads a checkpoint written under `cfg`'s teachers and evaluates it.
/// Teacher or parameter-set mismatches are checkpoint errors.
pub fn evaluate_checkpoint(cfg: &RunConfig, path: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let ck = load_checkpoint(path)?;
    let teachers = build_teachers(cfg)?;
    for t in &teachers {
        if ck.teacher_hashes.get(&t.id) != Some(&t.hash) {
            return Err(CheckpointError::TeacherMismatch(t.id.clone()).into());
        }
    }
    check_param_set(&ck, &init_model::<f32>(cfg, &teachers)?)?;
    if ck.config_hash != cfg.config_hash() {
        log::warn!("checkpoint config {} differs from the evaluation config {}", ck.config_hash, cfg.config_hash());
    }
    evaluate(cfg, &ck.params, &teachers, &file_hash(path)?)
}

/// Mean over rows of `|adapted student| / |teacher|` for one teacher's
/// spatial features on `samples` (drawn at the teacher's resolution; the
/// student sees them resized to `student_res`).
pub fn feature_norm_ratio(
    student: &StudentConfig,
    params: &ParamStore<f32>,
    teacher: &TeacherSpec,
    samples: &[SyntheticSample],
    student_res: usize,
) -> Result<f64> {
    let views: Vec<SyntheticSample> = samples.iter().map(|s| crate::data::resize_sample(s, student_res)).collect::<Result<_>>()?;
    let mut g = Graph::<f32>::new();
    let x = g.constant(stack(&views)?);
    let out = student.forward(&mut g, params, x, AttnMode::Plain, FULL_WINDOW)?;
    let (_, yv) = adaptor_forward(&mut g, &Scope::new(params, head_prefix(&teacher.id)), &out)?;
    let target = teacher_forward(teacher, &stack(samples)?)?;
    let zs = g.constant(target.spatial);
    // match the grids the loss compares
    let (gh, gw) = out.grid;
    let (th, tw) = target.grid;
    let d = teacher.feature_dim;
    let yv = if (gh, gw) == (th, tw) {
        yv
    } else {
        let y = g.reshape(yv, &[out.batch, gh, gw, d])?;
        let y = g.permute(y, &[0, 3, 1, 2])?;
        let y = g.bilinear_resize(y, th, tw)?;
        let y = g.permute(y, &[0, 2, 3, 1])?;
        g.reshape(y, &[out.batch * th * tw, d])?
    };
    let (s, t) = (g.value(yv), g.value(zs));
    let ratios: Vec<f64> = s
        .data()
        .chunks(d)
        .zip(t.data().chunks(d))
        .map(|(a, b)| {
            let na = a.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            let nb = b.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            na / nb
        })
        .collect();
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Deterministic Gaussian clusters for sanity checks: `per_class` points
/// around each of `classes` random centers.
pub fn gaussian_clusters(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> (Tensor<f32>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = Tensor::<f32>::randn([classes, dim], 1.0, &mut rng);
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for i in 0..classes * per_class {
        let c = i % classes;
        let noise = Tensor::<f32>::randn([dim], spread, &mut rng);
        data.extend(centers.row(c).iter().zip(noise.data()).map(|(a, b)| a + b));
        labels.push(c);
    }
    (Tensor::new([classes * per_class, dim], data).expect("cluster shape"), labels)
}
