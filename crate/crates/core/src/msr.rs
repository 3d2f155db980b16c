//! Multi-seed R-CNN supervision.
//!
//! Seeds are mined from the mean of teacher and last-refinement scores
//! (`x_msr`). For each present class the search is restricted to the top
//! `⌈μ_n |R|⌉` proposals scoring at least `μ_s · max x_msr_c`; NMS over that
//! range yields the seeds. A seed's confidence grows with the fraction `p` of
//! the two source score maps whose own search range contains a proposal close
//! to it: `w = x_msr · (1 + p^γ)`.
//!
//! Seeds then label the R-CNN head: IoU > 0.5 to a seed is positive, max IoU
//! below 0.1 is ignored, anything else is background.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, nms_subset, rank_by_score, BBox};
use crate::numcore::Mat;
use crate::oic::weighted_ce_loss;
use crate::synthscene::present_classes;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsrConfig {
    /// Score factor μ_s of the search threshold.
    pub mu_s: f64,
    /// Count factor μ_n of the search range.
    pub mu_n: f64,
    /// Exponent γ of the agreement term.
    pub gamma: f64,
    pub nms_thresh: f64,
    /// IoU at which a source's candidate counts as agreeing with a seed.
    pub match_thresh: f64,
    /// IoU above which a proposal is a positive of its nearest seed.
    pub positive_thresh: f64,
    /// Proposals whose best seed IoU is below this are ignored.
    pub ignore_thresh: f64,
}

impl Default for MsrConfig {
    fn default() -> Self {
        Self {
            mu_s: 0.7,
            mu_n: 0.05,
            gamma: 0.4,
            nms_thresh: 0.3,
            match_thresh: 0.5,
            positive_thresh: 0.5,
            ignore_thresh: 0.1,
        }
    }
}

impl MsrConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.mu_s) || !unit(self.mu_n) {
            return Err(Error::Config("msr: mu_s and mu_n must lie in (0,1]".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config("msr: gamma must be positive".into()));
        }
        for (name, v) in [
            ("nms_thresh", self.nms_thresh),
            ("match_thresh", self.match_thresh),
            ("positive_thresh", self.positive_thresh),
            ("ignore_thresh", self.ignore_thresh),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("msr: {name} must lie in [0,1]")));
            }
        }
        Ok(())
    }
}

/// `(x_wet + x_oicK) / 2`.
pub fn ensemble_scores(x_wet: &Mat, x_oic_k: &Mat) -> Result<Mat> {
    x_wet.zip_map(x_oic_k, |a, b| 0.5 * (a + b))
}

/// `σ_n = ⌈μ_n |R|⌉`, at least one.
pub fn search_count(num_proposals: usize, mu_n: f64) -> usize {
    ((mu_n * num_proposals as f64 - 1e-9).ceil() as usize).clamp(1, num_proposals.max(1))
}

/// `σ_s = μ_s · max(row)`.
pub fn search_threshold(row: &[f64], mu_s: f64) -> f64 {
    mu_s * row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Indices in the search range of one class row: the top `σ_n` by score
/// (ties to the lower index) that also score at least `σ_s`.
pub fn search_range(row: &[f64], mu_s: f64, mu_n: f64) -> Vec<usize> {
    let floor = search_threshold(row, mu_s);
    rank_by_score(row)
        .into_iter()
        .take(search_count(row.len(), mu_n))
        .filter(|&i| row[i] >= floor)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Seed {
    pub proposal: usize,
    pub class: usize,
    /// Score the seed was mined with.
    pub score: f64,
    /// Fraction `p` of reference sources that agree with the seed.
    pub agreement: f64,
    /// Loss weight `w`; equals `score` until [`seed_confidence`] runs.
    pub confidence: f64,
}

/// Mines seeds per present class. Falls back to the single top proposal when
/// the search range is empty.
pub fn mine_seeds(
    x_msr: &Mat,
    proposals: &[BBox],
    y_img: &[u8],
    cfg: &MsrConfig,
) -> Result<Vec<Seed>> {
    if x_msr.cols() != proposals.len() || x_msr.rows() < y_img.len() {
        return Err(Error::shape(
            "mine_seeds",
            format!(">={}x{}", y_img.len(), proposals.len()),
            format!("{}x{}", x_msr.rows(), x_msr.cols()),
        ));
    }
    let mut seeds = Vec::new();
    for class in present_classes(y_img) {
        let row = x_msr.row(class);
        let range = search_range(row, cfg.mu_s, cfg.mu_n);
        let mut kept = nms_subset(proposals, row, &range, cfg.nms_thresh);
        if kept.is_empty() {
            kept.push(rank_by_score(row)[0]);
        }
        seeds.extend(kept.into_iter().map(|proposal| Seed {
            proposal,
            class,
            score: row[proposal],
            agreement: 0.0,
            confidence: row[proposal],
        }));
    }
    Ok(seeds)
}

/// Sets `agreement` and `confidence` on every seed. Each source votes for a
/// seed iff its own search range for the seed's class holds a proposal with
/// IoU ≥ `match_thresh` to the seed.
pub fn seed_confidence(
    seeds: &mut [Seed],
    sources: &[&Mat],
    proposals: &[BBox],
    cfg: &MsrConfig,
) -> Result<()> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument(
            "seed_confidence needs at least one source".into(),
        ));
    }
    for s in sources {
        if s.cols() != proposals.len() {
            return Err(Error::shape("seed_confidence", proposals.len(), s.cols()));
        }
    }
    for seed in seeds.iter_mut() {
        let votes = sources
            .iter()
            .filter(|src| {
                search_range(src.row(seed.class), cfg.mu_s, cfg.mu_n)
                    .iter()
                    .any(|&j| iou(&proposals[j], &proposals[seed.proposal]) >= cfg.match_thresh)
            })
            .count();
        seed.agreement = votes as f64 / sources.len() as f64;
        seed.confidence = seed.score * (1.0 + seed.agreement.powf(cfg.gamma));
    }
    Ok(())
}

/// Single top-scoring seed per present class, weighted by its score. This is
/// the R-CNN supervision of the basic pipeline.
pub fn top_scoring_seeds(scores: &Mat, y_img: &[u8]) -> Vec<Seed> {
    present_classes(y_img)
        .into_iter()
        .map(|class| {
            let proposal = rank_by_score(scores.row(class))[0];
            let score = scores.get(class, proposal);
            Seed {
                proposal,
                class,
                score,
                agreement: 0.0,
                confidence: score,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    Positive(usize),
    Background,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RcnnLabels {
    pub assignments: Vec<Assignment>,
    /// Owning seed's confidence; zero for ignored proposals.
    pub weights: Vec<f64>,
    /// Regression target for positives.
    pub targets: Vec<Option<[f64; 4]>>,
}

impl RcnnLabels {
    /// Class index per proposal for the cross-entropy (`C` = background;
    /// ignored proposals carry zero weight).
    pub fn class_labels(&self, num_classes: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .map(|a| match a {
                Assignment::Positive(c) => *c,
                _ => num_classes,
            })
            .collect()
    }
}

pub fn gen_rcnn_labels(seeds: &[Seed], proposals: &[BBox], cfg: &MsrConfig) -> Result<RcnnLabels> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "gen_rcnn_labels needs at least one seed".into(),
        ));
    }
    let n = proposals.len();
    let mut assignments = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for p in proposals {
        let mut best = 0;
        let mut best_iou = f64::NEG_INFINITY;
        for (s, seed) in seeds.iter().enumerate() {
            let o = iou(p, &proposals[seed.proposal]);
            if o > best_iou || (o == best_iou && seed.confidence > seeds[best].confidence) {
                best = s;
                best_iou = o;
            }
        }
        let seed = &seeds[best];
        if best_iou > cfg.positive_thresh {
            assignments.push(Assignment::Positive(seed.class));
            weights.push(seed.confidence);
            targets.push(Some(regression_targets(p, &proposals[seed.proposal])));
        } else if best_iou < cfg.ignore_thresh {
            assignments.push(Assignment::Ignore);
            weights.push(0.0);
            targets.push(None);
        } else {
            assignments.push(Assignment::Background);
            weights.push(seed.confidence);
            targets.push(None);
        }
    }
    Ok(RcnnLabels {
        assignments,
        weights,
        targets,
    })
}

/// Center/size deltas that move `proposal` onto `target`.
pub fn regression_targets(proposal: &BBox, target: &BBox) -> [f64; 4] {
    let (px, py) = proposal.center();
    let (gx, gy) = target.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    [
        (gx - px) / pw,
        (gy - py) / ph,
        (target.width() / pw).ln(),
        (target.height() / ph).ln(),
    ]
}

/// Inverse of [`regression_targets`]: raw `(x1, y1, x2, y2)`, which may be
/// degenerate or off-canvas.
pub fn apply_deltas(proposal: &BBox, d: &[f64; 4]) -> [f64; 4] {
    let (pw, ph) = (proposal.width(), proposal.height());
    let (w, h) = (pw * d[2].exp(), ph * d[3].exp());
    // shift the corners rather than rebuilding from the center, so zero
    // deltas reproduce the proposal exactly
    let (dx, dy) = (d[0] * pw, d[1] * ph);
    let (gx, gy) = (0.5 * (pw - w), 0.5 * (ph - h));
    [
        proposal.x1() + dx + gx,
        proposal.y1() + dy + gy,
        proposal.x2() + dx - gx,
        proposal.y2() + dy - gy,
    ]
}

pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Weighted cross-entropy on the R-CNN classification branch; gradient with
/// respect to its logits.
pub fn rcnn_cls_loss(probs: &Mat, labels: &RcnnLabels) -> Result<(f64, Mat)> {
    let c = probs.rows() - 1;
    weighted_ce_loss(probs, &labels.class_labels(c), &labels.weights)
}

/// `(1/|R|) Σ_i w_i · smoothL1(t^c_i - v_i)` over positives, with the
/// gradient with respect to `t` (`4C × |R|`).
pub fn rcnn_reg_loss(t: &Mat, labels: &RcnnLabels) -> Result<(f64, Mat)> {
    let n = labels.assignments.len();
    if t.cols() != n || t.rows() % 4 != 0 {
        return Err(Error::shape(
            "rcnn_reg_loss",
            format!("4C x {n}"),
            format!("{}x{}", t.rows(), t.cols()),
        ));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Mat::zeros(t.rows(), n);
    for i in 0..n {
        let (Assignment::Positive(c), Some(v)) = (labels.assignments[i], labels.targets[i]) else {
            continue;
        };
        if 4 * c + 3 >= t.rows() {
            return Err(Error::InvalidArgument(format!(
                "class {c} outside regression rows"
            )));
        }
        let w = labels.weights[i];
        for (k, &vk) in v.iter().enumerate() {
            let d = t.get(4 * c + k, i) - vk;
            loss += w * smooth_l1(d);
            grad.set(4 * c + k, i, w * inv_n * smooth_l1_grad(d));
        }
    }
    Ok((loss * inv_n, grad))
}

pub fn rcnn_loss(cls: f64, reg: f64) -> f64 {
    cls + reg
}
