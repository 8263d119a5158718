//! Summary and spatial feature losses, and the three loss-balancing schemes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Element, Graph, Tensor, Var};

/// Static loss weights. Teachers absent from a map take the defaults:
/// `lambda = 1` (0.1 for `sam-like`) and `gamma = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda: BTreeMap<String, f64>,
    pub gamma: BTreeMap<String, f64>,
    pub alpha: f64,
    pub beta: f64,
    /// Smooth-L1 transition point.
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: BTreeMap::new(), gamma: BTreeMap::new(), alpha: 0.9, beta: 0.1, delta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || (self.alpha + self.beta - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("alpha {} and beta {} must be non-negative and sum to 1", self.alpha, self.beta)));
        }
        if self.delta <= 0.0 {
            return Err(Error::Config("smooth-L1 delta must be positive".into()));
        }
        if self.lambda.values().chain(self.gamma.values()).any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn summary_weight(&self, teacher: &str) -> f64 {
        self.lambda.get(teacher).copied().unwrap_or(if teacher == "sam-like" { 0.1 } else { 1.0 })
    }

    pub fn feature_weight(&self, teacher: &str) -> f64 {
        self.gamma.get(teacher).copied().unwrap_or(1.0)
    }

    /// Static weight of a named term.
    pub fn term_weight(&self, key: &TermKey) -> f64 {
        match key.branch {
            Branch::Summary => self.summary_weight(&key.teacher),
            Branch::Feature => self.feature_weight(&key.teacher),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Summary,
    Feature,
}

/// One loss term: a (teacher, branch) pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TermKey {
    pub teacher: String,
    pub branch: Branch,
}

impl TermKey {
    pub fn new(teacher: impl Into<String>, branch: Branch) -> Self {
        Self { teacher: teacher.into(), branch }
    }

    /// Column name, e.g. `clip-like_summary`.
    pub fn name(&self) -> String {
        let b = match self.branch {
            Branch::Summary => "summary",
            Branch::Feature => "feature",
        };
        format!("{}_{b}", self.teacher)
    }

    /// Parameter holding this term's uncertainty scalar.
    pub fn balancer_param(&self) -> String {
        format!("balancer.{}", self.name())
    }
}

/// Mean row-wise cosine distance between `[N,d]` matrices.
pub fn cosine_distance<T: Element>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    let rows = g.cosine_distance_rows(x, y)?;
    g.mean(rows)
}

pub fn smooth_l1<T: Element>(g: &mut Graph<T>, x: Var, y: Var, delta: f64) -> Result<Var> {
    g.smooth_l1(x, y, delta)
}

/// Cosine distance between adapted student summaries and teacher summaries, averaged over the batch.
pub fn summary_term<T: Element>(g: &mut Graph<T>, student: Var, teacher: Var) -> Result<Var> {
    cosine_distance(g, student, teacher)
}

/// Spatial matching loss `alpha * cos + beta * smooth_l1`, averaged over
/// positions. The student grid is bilinearly resized to the teacher grid
/// when they differ.
pub fn feature_term<T: Element>(
    g: &mut Graph<T>,
    student: Var,
    student_grid: (usize, usize),
    teacher: Var,
    teacher_grid: (usize, usize),
    batch: usize,
    w: &LossWeights,
) -> Result<Var> {
    let (ss, ts) = (g.shape(student).to_vec(), g.shape(teacher).to_vec());
    if ss.len() != 2 || ts.len() != 2 || ss[1] != ts[1] {
        return Err(Error::shape("feature_loss", format!("student {ss:?} vs teacher {ts:?}")));
    }
    if ss[0] != batch * student_grid.0 * student_grid.1 || ts[0] != batch * teacher_grid.0 * teacher_grid.1 {
        return Err(Error::shape("feature_loss", "row count does not match batch and grid"));
    }
    let d = ss[1];
    let student = if student_grid == teacher_grid {
        student
    } else {
        let (gh, gw) = student_grid;
        let x = g.reshape(student, &[batch, gh, gw, d])?;
        let x = g.permute(x, &[0, 3, 1, 2])?;
        let x = g.bilinear_resize(x, teacher_grid.0, teacher_grid.1)?;
        let x = g.permute(x, &[0, 2, 3, 1])?;
        g.reshape(x, &[ts[0], d])?
    };
    let cos = cosine_distance(g, student, teacher)?;
    let l1 = g.smooth_l1(student, teacher, w.delta)?;
    let a = g.scale(cos, w.alpha)?;
    let b = g.scale(l1, w.beta)?;
    g.add(a, b)
}

/// Weighted sum `sum_i lambda_i * term_i` over `(teacher, term)` pairs.
fn weighted<T: Element>(g: &mut Graph<T>, terms: &[(String, Var)], weight: impl Fn(&str) -> f64) -> Result<Var> {
    let mut total = g.constant(Tensor::scalar(T::ZERO));
    for (teacher, l) in terms {
        let s = g.scale(*l, weight(teacher))?;
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// `sum_i lambda_i * L_cos(y_i, z_i)`; per-teacher terms are returned unweighted.
pub fn summary_loss<T: Element>(
    g: &mut Graph<T>,
    pairs: &[(String, Var, Var)],
    w: &LossWeights,
) -> Result<(Var, BTreeMap<String, Var>)> {
    let mut per = BTreeMap::new();
    for (id, y, z) in pairs {
        per.insert(id.clone(), summary_term(g, *y, *z)?);
    }
    let terms: Vec<(String, Var)> = per.iter().map(|(k, &v)| (k.clone(), v)).collect();
    Ok((weighted(g, &terms, |t| w.summary_weight(t))?, per))
}

/// One teacher's spatial pair for [`feature_loss`].
#[derive(Clone, Debug)]
pub struct FeaturePair {
    pub teacher: String,
    pub student: Var,
    pub student_grid: (usize, usize),
    pub target: Var,
    pub target_grid: (usize, usize),
    pub batch: usize,
}

/// `sum_i gamma_i * L_match,i`; per-teacher terms are returned unweighted.
pub fn feature_loss<T: Element>(g: &mut Graph<T>, pairs: &[FeaturePair], w: &LossWeights) -> Result<(Var, BTreeMap<String, Var>)> {
    let mut per = BTreeMap::new();
    for p in pairs {
        per.insert(p.teacher.clone(), feature_term(g, p.student, p.student_grid, p.target, p.target_grid, p.batch, w)?);
    }
    let terms: Vec<(String, Var)> = per.iter().map(|(k, &v)| (k.clone(), v)).collect();
    Ok((weighted(g, &terms, |t| w.feature_weight(t))?, per))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalancerMode {
    #[default]
    Naive,
    Uncertainty,
    Adaloss,
}

/// A scalar loss term entering a balancer. `scale` multiplies the term's
/// whole balanced contribution (penalty included).
#[derive(Clone, Debug)]
pub struct Term {
    pub key: TermKey,
    pub loss: Var,
    pub scale: f64,
}

/// Balanced total and the effective weight on each term.
#[derive(Clone, Debug)]
pub struct Balanced {
    pub total: Var,
    pub weights: BTreeMap<TermKey, f64>,
}

/// `sum scale * w * L` with the static weights.
pub fn balance_naive<T: Element>(g: &mut Graph<T>, terms: &[Term], w: &LossWeights) -> Result<Balanced> {
    let mut total = g.constant(Tensor::scalar(T::ZERO));
    let mut weights = BTreeMap::new();
    for t in terms {
        let lw = w.term_weight(&t.key);
        let s = g.scale(t.loss, lw * t.scale)?;
        total = g.add(total, s)?;
        weights.insert(t.key.clone(), lw);
    }
    Ok(Balanced { total, weights })
}

/// `sum scale * (exp(-b) * L + softplus(b))`, one trainable scalar `b` per term.
pub fn balance_uncertainty<T: Element>(g: &mut Graph<T>, terms: &[Term], b: &[Var]) -> Result<Balanced> {
    if b.len() != terms.len() {
        return Err(Error::invalid("balance_uncertainty", format!("{} terms but {} b scalars", terms.len(), b.len())));
    }
    let mut total = g.constant(Tensor::scalar(T::ZERO));
    let mut weights = BTreeMap::new();
    for (t, &bv) in terms.iter().zip(b) {
        let b0 = g.reshape(bv, &[])?;
        let nb = g.scale(b0, -1.0)?;
        let lam = g.exp(nb)?;
        let loss = g.reshape(t.loss, &[])?;
        let wl = g.mul(lam, loss)?;
        let pen = g.softplus(b0)?;
        let term = g.add(wl, pen)?;
        let term = g.scale(term, t.scale)?;
        total = g.add(total, term)?;
        weights.insert(t.key.clone(), g.value(lam).item().to_f64());
    }
    Ok(Balanced { total, weights })
}

/// Running means for AdaLoss, keyed by term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancerState {
    pub mode: BalancerMode,
    pub momentum: f64,
    pub running_mean: BTreeMap<String, f64>,
}

impl BalancerState {
    pub fn new(mode: BalancerMode) -> Self {
        Self { mode, momentum: 0.99, running_mean: BTreeMap::new() }
    }

    /// EMA update; the first observation initializes the mean.
    pub fn observe(&mut self, key: &TermKey, loss: f64) {
        let mu = self.momentum;
        self.running_mean
            .entry(key.name())
            .and_modify(|m| *m = mu * *m + (1.0 - mu) * loss)
            .or_insert(loss);
    }

    /// AdaLoss weight `1 / E[L]`; 1 before any observation.
    pub fn adaloss_weight(&self, key: &TermKey) -> f64 {
        match self.running_mean.get(&key.name()) {
            Some(&m) if m > 0.0 => 1.0 / m,
            _ => 1.0,
        }
    }
}

/// Updates the running means with the current term values, then returns
/// `sum scale * L / E[L]` with the means held constant.
pub fn balance_adaloss<T: Element>(g: &mut Graph<T>, terms: &[Term], state: &mut BalancerState) -> Result<Balanced> {
    for t in terms {
        let v = g.value(t.loss).item().to_f64();
        state.observe(&t.key, v);
    }
    let mut total = g.constant(Tensor::scalar(T::ZERO));
    let mut weights = BTreeMap::new();
    for t in terms {
        let w = state.adaloss_weight(&t.key);
        let s = g.scale(t.loss, w * t.scale)?;
        let s = g.reshape(s, &[])?;
        total = g.add(total, s)?;
        weights.insert(t.key.clone(), w);
    }
    Ok(Balanced { total, weights })
}

/// Dispatches on the state's mode. `b` must hold one scalar per term in
/// uncertainty mode and is ignored otherwise.
pub fn balance<T: Element>(
    g: &mut Graph<T>,
    terms: &[Term],
    w: &LossWeights,
    state: &mut BalancerState,
    b: &[Var],
) -> Result<Balanced> {
    match state.mode {
        BalancerMode::Naive => balance_naive(g, terms, w),
        BalancerMode::Uncertainty => balance_uncertainty(g, terms, b),
        BalancerMode::Adaloss => balance_adaloss(g, terms, state),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let w = LossWeights::default();
        assert!(w.validate().is_ok());
        assert_eq!(w.summary_weight("clip-like"), 1.0);
        assert_eq!(w.summary_weight("sam-like"), 0.1);
        assert_eq!(w.feature_weight("sam-like"), 1.0);
        let bad = LossWeights { alpha: 0.8, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn term_names() {
        let k = TermKey::new("dino-like", Branch::Feature);
        assert_eq!(k.name(), "dino-like_feature");
        assert_eq!(k.balancer_param(), "balancer.dino-like_feature");
    }
}
