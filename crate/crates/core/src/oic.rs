//! Online instance classifiers: cascaded `C+1`-way heads trained on
//! top-scoring pseudo labels with a weighted cross-entropy loss.
//!
//! Background is the last class index, `C`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{iou, rank_by_score, BBox};
use crate::numcore::{clamped_ln, softmax_over_classes, AffineParams, Mat};
use crate::synthscene::present_classes;

/// Default IoU above which a proposal joins its nearest seed's class.
pub const NEIGHBOR_THRESH: f64 = 0.5;

/// Per-proposal hard labels and loss weights for one refinement classifier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefineLabels {
    /// Class index per proposal; `C` is background.
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
    /// `(class, proposal)` of every seed.
    pub seeds: Vec<(usize, usize)>,
}

impl RefineLabels {
    /// `(C+1) × |R|` one-hot matrix.
    pub fn one_hot(&self, num_classes: usize) -> Mat {
        let mut m = Mat::zeros(num_classes + 1, self.labels.len());
        for (i, &l) in self.labels.iter().enumerate() {
            m.set(l, i, 1.0);
        }
        m
    }
}

/// Per-proposal class posterior of one head: softmax over `C+1` classes.
pub fn head_probs(head: &AffineParams, hidden: &Mat) -> Result<Mat> {
    Ok(softmax_over_classes(&head.forward(hidden)?))
}

/// Output of head `k` (1-based) of the cascade.
pub fn oic_forward(heads: &[AffineParams], k: usize, hidden: &Mat) -> Result<Mat> {
    if k == 0 || k > heads.len() {
        return Err(Error::InvalidArgument(format!(
            "classifier index {k} outside 1..={}",
            heads.len()
        )));
    }
    head_probs(&heads[k - 1], hidden)
}

/// Top-scoring pseudo labels.
///
/// For every present class `c` the highest `scores[c, ·]` proposal (lowest
/// index on ties) becomes a seed. Each proposal then looks up its nearest
/// seed by IoU: above `neighbor_thresh` it takes that seed's class, otherwise
/// background; either way its weight is the seed's score. A seed proposal is
/// always labeled with its own class.
///
/// Only the first `C` rows of `scores` are read, so both MIDN scores and
/// `C+1` classifier outputs are accepted.
pub fn gen_refine_labels(
    scores: &Mat,
    y_img: &[u8],
    proposals: &[BBox],
    neighbor_thresh: f64,
) -> Result<RefineLabels> {
    let c = y_img.len();
    let n = proposals.len();
    if scores.rows() < c || scores.cols() != n {
        return Err(Error::shape(
            "gen_refine_labels",
            format!(">={c}x{n}"),
            format!("{}x{}", scores.rows(), scores.cols()),
        ));
    }
    let present = present_classes(y_img);
    if present.is_empty() {
        return Err(Error::NoPositiveClass);
    }
    let seeds: Vec<(usize, usize)> = present
        .iter()
        .map(|&cls| (cls, rank_by_score(scores.row(cls))[0]))
        .collect();

    let mut labels = vec![c; n];
    let mut weights = vec![0.0; n];
    for (i, p) in proposals.iter().enumerate() {
        let mut best = 0;
        let mut best_iou = f64::NEG_INFINITY;
        for (s, &(_, idx)) in seeds.iter().enumerate() {
            let o = if idx == i {
                1.0
            } else {
                iou(p, &proposals[idx])
            };
            if o > best_iou {
                best_iou = o;
                best = s;
            }
        }
        let (cls, idx) = seeds[best];
        weights[i] = scores.get(cls, idx);
        if best_iou > neighbor_thresh {
            labels[i] = cls;
        }
    }
    for &(cls, idx) in seeds.iter().rev() {
        labels[idx] = cls;
        weights[idx] = scores.get(cls, idx);
    }
    Ok(RefineLabels {
        labels,
        weights,
        seeds,
    })
}

/// `-(1/|R|) Σ_i w_i log probs[label_i, i]`, with the gradient taken with
/// respect to the pre-softmax logits of `probs`.
pub fn weighted_ce_loss(probs: &Mat, labels: &[usize], weights: &[f64]) -> Result<(f64, Mat)> {
    let n = probs.cols();
    if labels.len() != n || weights.len() != n {
        return Err(Error::shape(
            "weighted_ce_loss",
            n,
            labels.len().min(weights.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= probs.rows()) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range")));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Mat::zeros(probs.rows(), n);
    for i in 0..n {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        loss -= w * clamped_ln(probs.get(labels[i], i));
        for r in 0..probs.rows() {
            let target = if r == labels[i] { 1.0 } else { 0.0 };
            grad.set(r, i, w * inv_n * (probs.get(r, i) - target));
        }
    }
    Ok((loss * inv_n, grad))
}

pub fn oic_loss(probs: &Mat, labels: &RefineLabels) -> Result<(f64, Mat)> {
    weighted_ce_loss(probs, &labels.labels, &labels.weights)
}
