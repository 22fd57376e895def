//! Training objectives over in-batch candidate scores.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::branches::{Branch, PerBranch};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("ramp length alpha must be at least 1, got {0}")]
    RampLength(f64),
    #[error("epoch must be nonnegative, got {0}")]
    NegativeEpoch(i64),
    #[error("{what}: expected {expected}, found {found}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },
}

/// `score[b, c] = H_b · D_c − ln(max(pop_c, 1))`.
pub fn debiased_scores(g: &mut Graph, users: Var, items: Var, pop: &[u64]) -> Result<Var, LossError> {
    let c = g.shape(items)[0];
    if pop.len() != c {
        return Err(LossError::Shape {
            what: "popularity counts",
            expected: c,
            found: pop.len(),
        });
    }
    let (du, di) = (g.shape(users)[1], g.shape(items)[1]);
    if du != di {
        return Err(LossError::Shape {
            what: "user/item width",
            expected: di,
            found: du,
        });
    }
    let dots = g.matmul_nt(users, items);
    let offset: Vec<f64> = pop.iter().map(|&p| -(p.max(1) as f64).ln()).collect();
    let offset = g.constant(Tensor::vector(&offset));
    Ok(g.add_bias(dots, offset))
}

/// `−Σ_rows log p(target)` with each row's softmax restricted to unblocked
/// candidates. A row whose only candidate is its target contributes 0.
pub fn inbatch_ce(g: &mut Graph, scores: Var, target_cols: &[usize], blocked: &Arc<Vec<bool>>) -> Var {
    let c = g.shape(scores)[1];
    for (r, &t) in target_cols.iter().enumerate() {
        debug_assert!(!blocked[r * c + t], "target column is blocked in row {r}");
        if (0..c).all(|j| j == t || blocked[r * c + j]) {
            log::warn!("row {r} has no negatives left after exclusion");
        }
    }
    let lp = g.log_softmax(scores, Some(blocked.clone()));
    let picked = g.pick(lp, target_cols);
    let total = g.sum(picked);
    g.scale(total, -1.0)
}

/// Teacher distribution `softmax(teacher / T)` over unblocked columns, read
/// from values only.
fn soft_targets(teacher: &Tensor, t: f64, blocked: &[bool]) -> Tensor {
    let c = teacher.last_dim();
    let mut p = teacher.data().to_vec();
    for (r, row) in p.chunks_mut(c).enumerate() {
        let open = |j: usize| !blocked[r * c + j];
        let max = (0..c)
            .filter(|&j| open(j))
            .map(|j| row[j] / t)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            *v = if open(j) { (*v / t - max).exp() } else { 0.0 };
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(teacher.shape(), p).expect("same shape")
}

/// `T² · KL(softmax(teacher/T) ‖ softmax(student/T))`, averaged over rows.
/// The teacher is a constant: no gradient reaches it.
pub fn distill_kl(
    g: &mut Graph,
    teacher: Var,
    student: Var,
    temperature: f64,
    blocked: &Arc<Vec<bool>>,
) -> Result<Var, LossError> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(LossError::Temperature(temperature));
    }
    let p = soft_targets(g.value(teacher), temperature, blocked);
    let rows = p.rows() as f64;
    let neg_entropy: f64 = p.data().iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum();
    let scaled = g.scale(student, 1.0 / temperature);
    let log_q = g.log_softmax(scaled, Some(blocked.clone()));
    let p = g.constant(p);
    let cross = g.mul(p, log_q);
    let cross = g.sum(cross);
    // KL = Σ p ln p − Σ p ln q
    let kl = g.scale(cross, -1.0);
    let kl = g.add_scalar(kl, neg_entropy);
    Ok(g.scale(kl, temperature * temperature / rows))
}

/// Gaussian ramp: 0 at epoch 0, `exp(−5(1 − e/α)²)` in between, 1 from α on.
pub fn ramp_weight(epoch: i64, alpha: f64) -> Result<f64, LossError> {
    if epoch < 0 {
        return Err(LossError::NegativeEpoch(epoch));
    }
    if alpha.is_nan() || alpha < 1.0 {
        return Err(LossError::RampLength(alpha));
    }
    let e = epoch as f64;
    Ok(if epoch == 0 {
        0.0
    } else if e >= alpha {
        1.0
    } else {
        (-5.0 * (1.0 - e / alpha).powi(2)).exp()
    })
}

/// Elementwise mean of score matrices.
pub fn ensemble(g: &mut Graph, parts: &[Var]) -> Var {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p);
    }
    if parts.len() == 1 {
        acc
    } else {
        g.scale(acc, 1.0 / parts.len() as f64)
    }
}

/// Per-branch KL terms: `v` and `t` learn from `z^id` (from `z^e` when there is
/// no ID branch), `id` learns from `z^e`.
pub fn distill_bundle(
    g: &mut Graph,
    logits: &PerBranch<Var>,
    temperature: f64,
    blocked: &Arc<Vec<bool>>,
) -> Result<PerBranch<Var>, LossError> {
    let all: Vec<Var> = logits.iter().map(|(_, v)| *v).collect();
    let z_e = ensemble(g, &all);
    let z_e = g.detach(z_e);
    let mut out = PerBranch::empty();
    for (b, &z) in logits.iter() {
        let teacher = match b {
            Branch::Visual | Branch::Textual => logits.id.unwrap_or(z_e),
            Branch::Id => z_e,
        };
        out.set(b, distill_kl(g, teacher, z, temperature, blocked)?);
    }
    Ok(out)
}

/// Loss components of one step. CE terms are summed over rows, KL terms are
/// row means; `ce_fused` holds the single CE of early and late fusion.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub epoch: usize,
    pub rows: usize,
    pub ce_v: f64,
    pub ce_t: f64,
    pub ce_id: f64,
    pub ce_fused: f64,
    pub kl_v: f64,
    pub kl_t: f64,
    pub kl_id: f64,
    pub w: f64,
    pub total: f64,
}

impl LossReport {
    pub fn ce_sum(&self) -> f64 {
        self.ce_v + self.ce_t + self.ce_id + self.ce_fused
    }

    pub fn kl_sum(&self) -> f64 {
        self.kl_v + self.kl_t + self.kl_id
    }

    /// Row-mean CE, comparable across batch sizes.
    pub fn ce_per_row(&self) -> f64 {
        self.ce_sum() / self.rows.max(1) as f64
    }
}

/// How branch scores combine into the training objective.
pub enum Objective {
    /// CE per branch plus `w`-weighted distillation when `temperature` is set.
    Collaborative { temperature: Option<f64>, w: f64 },
    /// One CE on a single score matrix (early fusion, or the late-fusion
    /// mean of branch scores).
    Single,
}

/// Total loss `ΣCE + w·ΣKL` and its components.
pub fn total_loss(
    g: &mut Graph,
    logits: &PerBranch<Var>,
    fused: Option<Var>,
    target_cols: &[usize],
    blocked: &Arc<Vec<bool>>,
    objective: &Objective,
) -> Result<(Var, LossReport), LossError> {
    let mut report = LossReport {
        rows: target_cols.len(),
        ..Default::default()
    };
    let read = |g: &Graph, v: Var| g.value(v).item();
    match objective {
        Objective::Single => {
            let z = match fused {
                Some(z) => z,
                None => {
                    let all: Vec<Var> = logits.iter().map(|(_, v)| *v).collect();
                    ensemble(g, &all)
                }
            };
            let ce = inbatch_ce(g, z, target_cols, blocked);
            report.ce_fused = read(g, ce);
            report.total = report.ce_fused;
            Ok((ce, report))
        }
        Objective::Collaborative { temperature, w } => {
            let mut terms = Vec::new();
            for (b, &z) in logits.iter() {
                let ce = inbatch_ce(g, z, target_cols, blocked);
                let v = read(g, ce);
                match b {
                    Branch::Visual => report.ce_v = v,
                    Branch::Textual => report.ce_t = v,
                    Branch::Id => report.ce_id = v,
                }
                terms.push(ce);
            }
            report.w = *w;
            if let (Some(t), true) = (temperature, logits.len() > 1) {
                let kls = distill_bundle(g, logits, *t, blocked)?;
                for (b, &kl) in kls.iter() {
                    let v = read(g, kl);
                    match b {
                        Branch::Visual => report.kl_v = v,
                        Branch::Textual => report.kl_t = v,
                        Branch::Id => report.kl_id = v,
                    }
                    if *w != 0.0 {
                        terms.push(g.scale(kl, *w));
                    }
                }
            }
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = g.add(total, t);
            }
            report.total = report.ce_sum() + report.w * report.kl_sum();
            Ok((total, report))
        }
    }
}
