//! Training loop: per-step batches through the partitioner, balanced loss,
//! AdamW under the cosine schedule, metrics CSV and checkpoints.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::{check_param_set, load_checkpoint, save_checkpoint, Checkpoint, RngState};
use crate::config::RunConfig;
use crate::error::{CheckpointError, Error, Result};
use crate::loss::{BalancerMode, BalancerState, TermKey};
use crate::numerics::{Element, ParamStore, Tensor};
use crate::optim::{adamw_step, scheduled_lr, AdamWParams, OptimState};
use crate::partition::{assign_ranks, build_groups, draw_rank_batches, simulate_step, student_resolution, Assignment, Model};
use crate::rng::stream_seed;
use crate::student::StudentKind;
use crate::teachers::{init_adaptor, make_synthetic_teacher, TeacherSpec};
use crate::vit::AttnMode;

/// Prefix of the uncertainty-balancer scalars; excluded from weight decay.
pub const BALANCER_PREFIX: &str = "balancer.";

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub balancer: BalancerState,
    pub optim: OptimState<f32>,
    /// Completed steps.
    pub step: u64,
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    /// 1-based index of the completed step.
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    /// `(column, value)` per term, in teacher order.
    pub terms: Vec<(String, f64)>,
    pub weights: Vec<(String, f64)>,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.step.to_string(), self.lr.to_string(), self.total.to_string()];
        cols.extend(self.terms.iter().map(|(_, v)| v.to_string()));
        cols.extend(self.weights.iter().map(|(_, v)| v.to_string()));
        cols.join(",")
    }
}

pub fn metrics_header(keys: &[TermKey]) -> String {
    let mut cols = vec!["step".to_string(), "lr".into(), "loss_total".into()];
    cols.extend(keys.iter().map(TermKey::name));
    cols.extend(keys.iter().map(|k| format!("w_{}", k.name())));
    cols.join(",")
}

/// Teachers in config order.
pub fn build_teachers(cfg: &RunConfig) -> Result<Vec<TeacherSpec>> {
    cfg.teachers.iter().map(|t| make_synthetic_teacher(t.seed, t)).collect()
}

/// Groups and rank blocks for a configuration, with the student checked
/// against every group's input resolution.
pub fn build_assignment(cfg: &RunConfig, teachers: &[TeacherSpec]) -> Result<Assignment> {
    let a = assign_ranks(build_groups(teachers)?, cfg.partition.world_size, &cfg.partition.split)?;
    for g in &a.groups {
        cfg.student.check_resolution(student_resolution(cfg, g))?;
    }
    Ok(a)
}

/// Student, adaptor heads and (in uncertainty mode) one `b` scalar per term.
pub fn init_model<T: Element>(cfg: &RunConfig, teachers: &[TeacherSpec]) -> Result<ParamStore<T>> {
    let mut store = cfg.student.init::<T>(stream_seed(cfg.seed, "student-init", &[]))?;
    let d = cfg.student.embed_dim();
    for (i, t) in teachers.iter().enumerate() {
        init_adaptor(&mut store, &t.id, d, t.feature_dim, stream_seed(cfg.seed, "head-init", &[i as u64]));
    }
    if cfg.loss.balancer == BalancerMode::Uncertainty {
        for t in teachers {
            for k in term_keys(std::slice::from_ref(t)) {
                store.insert(k.balancer_param(), Tensor::scalar(T::ZERO));
            }
        }
    }
    Ok(store)
}

fn term_keys(teachers: &[TeacherSpec]) -> Vec<TermKey> {
    use crate::loss::Branch;
    teachers
        .iter()
        .flat_map(|t| [TermKey::new(t.id.clone(), Branch::Summary), TermKey::new(t.id.clone(), Branch::Feature)])
        .collect()
}

/// Attention layout for a step: a ViTDet window drawn from the configured
/// sizes when the student is a ViT in ViTDet mode.
pub fn step_attention(cfg: &RunConfig, step: u64) -> AttnMode {
    let sizes = &cfg.student.vit.window_sizes;
    if cfg.student.kind != StudentKind::Vit || !cfg.student.vitdet || sizes.is_empty() {
        return AttnMode::Plain;
    }
    let i = (stream_seed(cfg.seed, "vitdet", &[step]) % sizes.len() as u64) as usize;
    AttnMode::ViTDet { window: sizes[i] }
}

#[derive(Debug)]
pub struct Trainer {
    cfg: RunConfig,
    teachers: Vec<TeacherSpec>,
    assignment: Assignment,
    config_hash: String,
    state: TrainState,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.student.vitdet && cfg.student.kind == StudentKind::Vit && cfg.student.vit.window_sizes.is_empty() {
            return Err(Error::Config("vitdet mode needs at least one window size".into()));
        }
        if cfg.trainer.warmup_steps >= cfg.trainer.steps && cfg.trainer.warmup_steps > 0 {
            return Err(Error::Config("warmup_steps must be below steps".into()));
        }
        let teachers = build_teachers(&cfg)?;
        let assignment = build_assignment(&cfg, &teachers)?;
        let params = init_model::<f32>(&cfg, &teachers)?;
        let hyper = AdamWParams {
            beta1: cfg.trainer.beta1,
            beta2: cfg.trainer.beta2,
            eps: cfg.trainer.eps,
            weight_decay: cfg.trainer.weight_decay,
        };
        let mut balancer = BalancerState::new(cfg.loss.balancer);
        balancer.momentum = cfg.loss.momentum;
        let state = TrainState { optim: OptimState::new(hyper, &params), params, balancer, step: 0 };
        let config_hash = cfg.config_hash();
        Ok(Self { cfg, teachers, assignment, config_hash, state })
    }

    /// Restores a checkpoint written by a run of the same configuration.
    pub fn resume(cfg: RunConfig, ck: Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        if ck.config_hash != t.config_hash {
            return Err(Error::Config(format!(
                "checkpoint was written by config {} but this run is {}",
                ck.config_hash, t.config_hash
            )));
        }
        for spec in &t.teachers {
            match ck.teacher_hashes.get(&spec.id) {
                Some(h) if *h == spec.hash => {}
                _ => return Err(CheckpointError::TeacherMismatch(spec.id.clone()).into()),
            }
        }
        check_param_set(&ck, &t.state.params)?;
        if ck.step > t.cfg.trainer.steps || ck.rng_state.seed != t.cfg.seed || ck.rng_state.step != ck.step {
            return Err(CheckpointError::Manifest("step or rng state inconsistent with the configuration".into()).into());
        }
        t.state = TrainState { params: ck.params, balancer: ck.balancer, optim: ck.optim, step: ck.step };
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn teachers(&self) -> &[TeacherSpec] {
        &self.teachers
    }

    pub fn assignment(&self) -> &Assignment {
        &self.assignment
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn term_keys(&self) -> Vec<TermKey> {
        term_keys(&self.teachers)
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.cfg.trainer.steps
    }

    /// One optimization step.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let k = self.state.step;
        if self.is_done() {
            return Err(Error::invalid("train_step", format!("all {k} steps are done")));
        }
        let tc = &self.cfg.trainer;
        let lr = scheduled_lr(k, tc.steps, tc.lr, tc.warmup_steps)?;
        let batches = draw_rank_batches(&self.cfg, &self.assignment, k)?;
        let attn = step_attention(&self.cfg, k);
        let model = Model {
            student: &self.cfg.student,
            teachers: &self.teachers,
            params: &self.state.params,
            weights: &self.cfg.loss.weights,
        };
        let mut balancer = self.state.balancer.clone();
        let out = simulate_step(&model, &self.assignment, &batches, attn, &mut balancer)?;
        adamw_step(&mut self.state.optim, &mut self.state.params, &out.grads, lr, |n| !n.starts_with(BALANCER_PREFIX))?;
        if self.state.params.iter().any(|(_, t)| !t.all_finite()) {
            return Err(Error::NonFinite("parameter update"));
        }
        self.state.balancer = balancer;
        self.state.step += 1;
        let keys = self.term_keys();
        Ok(StepMetrics {
            step: self.state.step,
            lr,
            total: out.total,
            terms: keys.iter().map(|k| (k.name(), out.terms.get(k).copied().unwrap_or(f64::NAN))).collect(),
            weights: keys.iter().map(|k| (format!("w_{}", k.name()), out.weights.get(k).copied().unwrap_or(f64::NAN))).collect(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.state.step,
            rng_state: RngState { seed: self.cfg.seed, step: self.state.step },
            config_hash: self.config_hash.clone(),
            teacher_hashes: self.teachers.iter().map(|t| (t.id.clone(), t.hash.clone())).collect(),
            params: self.state.params.clone(),
            optim: self.state.optim.clone(),
            balancer: self.state.balancer.clone(),
        }
    }

    /// Fails if any teacher's parameters changed.
    pub fn verify_teachers(&self) -> Result<()> {
        self.teachers.iter().try_for_each(TeacherSpec::verify)
    }
}

/// Outcome of [`run_training`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub steps_done: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub metrics_path: PathBuf,
    pub checkpoint: PathBuf,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:06}.amrd"))
}

/// Keeps the header and the rows of steps `<= step`.
fn truncate_metrics(path: &Path, header: &str, step: u64) -> Result<String> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut out = format!("{header}\n");
    for line in text.lines().skip(1) {
        let s: u64 = line.split(',').next().and_then(|c| c.parse().ok()).unwrap_or(u64::MAX);
        if s <= step {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Trains into `out_dir`: config copy, config hash, `partition.json`,
/// `metrics.csv` and checkpoints every `checkpoint_every` steps and at the
/// stopping point. `resume` continues from a checkpoint; `stop_at` ends the
/// run early after that many completed steps.
pub fn run_training(cfg: RunConfig, out_dir: &Path, resume: Option<&Path>, stop_at: Option<u64>) -> Result<RunSummary> {
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, load_checkpoint(p)?)?,
        None => Trainer::new(cfg)?,
    };
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.json"), trainer.cfg.to_json())?;
    fs::write(out_dir.join("config_hash.txt"), format!("{}\n", trainer.config_hash))?;
    fs::write(out_dir.join("partition.json"), trainer.assignment.to_json())?;

    let metrics_path = out_dir.join("metrics.csv");
    let header = metrics_header(&trainer.term_keys());
    let prefix = if resume.is_some() { truncate_metrics(&metrics_path, &header, trainer.state.step)? } else { format!("{header}\n") };
    let mut csv = BufWriter::new(fs::File::create(&metrics_path)?);
    csv.write_all(prefix.as_bytes())?;

    let end = stop_at.map_or(trainer.cfg.trainer.steps, |s| s.min(trainer.cfg.trainer.steps));
    let every = trainer.cfg.trainer.checkpoint_every;
    let (mut first_loss, mut last_loss) = (None, None);
    let mut last_ckpt = None;
    while trainer.state.step < end {
        let m = match trainer.train_step() {
            Ok(m) => m,
            Err(e) => {
                csv.flush()?;
                return Err(e);
            }
        };
        first_loss.get_or_insert(m.total);
        last_loss = Some(m.total);
        writeln!(csv, "{}", m.csv_row())?;
        log::info!("step {} loss {:.6} lr {:.3e}", m.step, m.total, m.lr);
        if every > 0 && m.step % every == 0 {
            csv.flush()?;
            let p = checkpoint_path(out_dir, m.step);
            save_checkpoint(&trainer.checkpoint(), &p)?;
            last_ckpt = Some((m.step, p));
        }
    }
    csv.flush()?;
    trainer.verify_teachers()?;
    let checkpoint = match last_ckpt {
        Some((s, p)) if s == trainer.state.step => p,
        _ => {
            let p = checkpoint_path(out_dir, trainer.state.step);
            save_checkpoint(&trainer.checkpoint(), &p)?;
            p
        }
    };
    Ok(RunSummary { steps_done: trainer.state.step, first_loss, last_loss, metrics_path, checkpoint })
}

/// Parses `metrics.csv` into its header and numeric rows.
pub fn read_metrics(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap_or_default().split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row: std::result::Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
        match row {
            Ok(r) if r.len() == header.len() => rows.push(r),
            _ => return Err(Error::Config(format!("{}: malformed row at line {}", path.display(), i + 2))),
        }
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::Branch;

    #[test]
    fn header_layout() {
        let keys = vec![TermKey::new("clip-like", Branch::Summary), TermKey::new("clip-like", Branch::Feature)];
        assert_eq!(
            metrics_header(&keys),
            "step,lr,loss_total,clip-like_summary,clip-like_feature,w_clip-like_summary,w_clip-like_feature"
        );
        let m = StepMetrics {
            step: 3,
            lr: 0.5,
            total: 1.25,
            terms: vec![("a".into(), 0.1), ("b".into(), 2.0)],
            weights: vec![("w_a".into(), 1.0), ("w_b".into(), 0.1)],
        };
        assert_eq!(m.csv_row(), "3,0.5,1.25,0.1,2,1,0.1");
    }
}
