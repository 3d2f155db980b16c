//! Class-specific ranking distillation.
//!
//! For every present class the teacher's top proposal anchors a set of
//! neighbors (IoU above a growing threshold τ). Teacher and MIDN scores over
//! that set are each turned into a distribution with a softmax, and the MIDN
//! is pulled towards the teacher's distribution with a KL divergence weighted
//! by the anchor's teacher score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, rank_by_score, BBox};
use crate::numcore::{clamped_ln, log_sum_exp, softmax, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrdConfig {
    pub tau0: f64,
    pub tau1: f64,
    /// Iteration at which τ reaches `tau1`.
    pub iter_max: usize,
    /// Softmax temperature applied to both score rows.
    pub temperature: f64,
}

impl Default for CrdConfig {
    fn default() -> Self {
        Self {
            tau0: 0.5,
            tau1: 1.0,
            iter_max: 80_000,
            temperature: 1.0,
        }
    }
}

impl CrdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.tau0 && self.tau0 <= self.tau1 && self.tau1 <= 1.0) {
            return Err(Error::Config("crd: need 0 <= tau0 <= tau1 <= 1".into()));
        }
        if self.iter_max == 0 {
            return Err(Error::Config("crd: iter_max must be >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("crd: temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Linear ramp of the overlap threshold from `tau0` to `tau1`.
pub fn tau_schedule(iter_cur: usize, cfg: &CrdConfig) -> f64 {
    let frac = (iter_cur as f64 / cfg.iter_max as f64).min(1.0);
    (cfg.tau0 + (cfg.tau1 - cfg.tau0) * frac).clamp(cfg.tau0, cfg.tau1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositiveSet {
    pub class: usize,
    pub anchor: usize,
    /// Ascending proposal indices; always contains `anchor`.
    pub members: Vec<usize>,
    /// Teacher score of the anchor, used as the loss weight.
    pub weight: f64,
}

/// Anchor = teacher's top proposal for `class` (lowest index on ties);
/// members = anchor plus every proposal with IoU > τ to it.
pub fn build_positive_set(
    x_wet: &Mat,
    proposals: &[BBox],
    class: usize,
    tau: f64,
) -> Result<PositiveSet> {
    if proposals.is_empty() || x_wet.cols() != proposals.len() || class >= x_wet.rows() {
        return Err(Error::shape(
            "build_positive_set",
            format!("class < rows and {} columns", proposals.len()),
            format!("{}x{}", x_wet.rows(), x_wet.cols()),
        ));
    }
    let anchor = rank_by_score(x_wet.row(class))[0];
    let members = (0..proposals.len())
        .filter(|&i| i == anchor || iou(&proposals[i], &proposals[anchor]) > tau)
        .collect();
    Ok(PositiveSet {
        class,
        anchor,
        members,
        weight: x_wet.get(class, anchor),
    })
}

/// Student and teacher rank distributions `(s', t')` over the set's members.
pub fn rank_distributions(
    x_midn: &Mat,
    x_wet: &Mat,
    ps: &PositiveSet,
    temperature: f64,
) -> (Vec<f64>, Vec<f64>) {
    let logits = |m: &Mat| -> Vec<f64> {
        ps.members
            .iter()
            .map(|&j| m.get(ps.class, j) / temperature)
            .collect()
    };
    (softmax(&logits(x_midn)), softmax(&logits(x_wet)))
}

/// `Σ_c (w_c / |P_c|) · KL(t'_c ‖ s'_c)` and its gradient with respect to
/// `x_midn`. Teacher scores are constants.
pub fn crd_loss(
    sets: &[PositiveSet],
    x_midn: &Mat,
    x_wet: &Mat,
    temperature: f64,
) -> Result<(f64, Mat)> {
    if x_wet.cols() != x_midn.cols() || x_wet.rows() < x_midn.rows() {
        return Err(Error::shape(
            "crd_loss",
            format!(">={}x{}", x_midn.rows(), x_midn.cols()),
            format!("{}x{}", x_wet.rows(), x_wet.cols()),
        ));
    }
    let mut loss = 0.0;
    let mut grad = Mat::zeros(x_midn.rows(), x_midn.cols());
    for ps in sets {
        if ps.class >= x_midn.rows() {
            return Err(Error::InvalidArgument(format!(
                "class {} out of range",
                ps.class
            )));
        }
        let student: Vec<f64> = ps
            .members
            .iter()
            .map(|&j| x_midn.get(ps.class, j) / temperature)
            .collect();
        let (s, t) = rank_distributions(x_midn, x_wet, ps, temperature);
        let lse = log_sum_exp(&student);
        let scale = ps.weight / ps.members.len() as f64;
        let kl: f64 = t
            .iter()
            .zip(&student)
            .map(|(&tj, &zj)| {
                if tj > 0.0 {
                    tj * (clamped_ln(tj) - (zj - lse))
                } else {
                    0.0
                }
            })
            .sum();
        loss += scale * kl;
        for ((&j, &sj), &tj) in ps.members.iter().zip(&s).zip(&t) {
            grad.add_at(ps.class, j, scale * (sj - tj) / temperature);
        }
    }
    Ok((loss, grad))
}

/// One positive set per present class.
pub fn build_positive_sets(
    x_wet: &Mat,
    proposals: &[BBox],
    present: &[usize],
    tau: f64,
) -> Result<Vec<PositiveSet>> {
    present
        .iter()
        .map(|&c| build_positive_set(x_wet, proposals, c, tau))
        .collect()
}
