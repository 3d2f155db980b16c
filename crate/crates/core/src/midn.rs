//! Two-stream multiple instance detection network.
//!
//! `x_midn = softmax_over_classes(x_cls) ⊙ softmax_over_proposals(x_det)` and
//! the image score is its row sum. Both branches read the shared adapter
//! output; the adapter itself lives in [`crate::model`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numcore::{
    clamped_ln, softmax_over_classes, softmax_over_classes_backward, softmax_over_proposals,
    softmax_over_proposals_backward, AffineParams, Mat, PROB_EPS,
};
use crate::oic::{gen_refine_labels, RefineLabels};

/// Classification and detection branches, each emitting `C` scores per
/// proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MidnParams {
    pub cls: AffineParams,
    pub det: AffineParams,
}

#[derive(Debug, Clone)]
pub struct MidnScores {
    pub x_cls: Mat,
    pub x_det: Mat,
    pub cls_probs: Mat,
    pub det_probs: Mat,
    pub x_midn: Mat,
    pub x_img: Vec<f64>,
}

pub struct MidnGrads {
    pub params: MidnParams,
    pub hidden: Mat,
}

pub fn midn_forward(p: &MidnParams, hidden: &Mat) -> Result<MidnScores> {
    let x_cls = p.cls.forward(hidden)?;
    let x_det = p.det.forward(hidden)?;
    let cls_probs = softmax_over_classes(&x_cls);
    let det_probs = softmax_over_proposals(&x_det);
    let x_midn = cls_probs.zip_map(&det_probs, |a, b| a * b)?;
    let x_img = (0..x_midn.rows())
        .map(|c| x_midn.row(c).iter().sum())
        .collect();
    Ok(MidnScores {
        x_cls,
        x_det,
        cls_probs,
        det_probs,
        x_midn,
        x_img,
    })
}

impl MidnScores {
    /// Gradients of both pre-softmax branches given `dL/dx_midn`.
    pub fn backward_logits(&self, grad_midn: &Mat) -> Result<(Mat, Mat)> {
        let d_cls_probs = grad_midn.zip_map(&self.det_probs, |g, d| g * d)?;
        let d_det_probs = grad_midn.zip_map(&self.cls_probs, |g, c| g * c)?;
        Ok((
            softmax_over_classes_backward(&self.cls_probs, &d_cls_probs),
            softmax_over_proposals_backward(&self.det_probs, &d_det_probs),
        ))
    }
}

/// Backpropagates `dL/dx_midn` into branch parameters and the hidden features.
pub fn midn_backward(
    p: &MidnParams,
    hidden: &Mat,
    scores: &MidnScores,
    grad_midn: &Mat,
) -> Result<MidnGrads> {
    let (d_cls, d_det) = scores.backward_logits(grad_midn)?;
    let gc = p.cls.backward(hidden, &d_cls)?;
    let gd = p.det.backward(hidden, &d_det)?;
    let mut hidden_grad = gc.input.clone();
    hidden_grad.add_assign(&gd.input)?;
    Ok(MidnGrads {
        params: MidnParams {
            cls: gc.params(),
            det: gd.params(),
        },
        hidden: hidden_grad,
    })
}

/// Binary cross-entropy on the image scores. Returns the loss and
/// `dL/dx_img`; scores are clamped into `[1e-12, 1 - 1e-12]` first.
pub fn midn_loss(x_img: &[f64], y: &[u8]) -> Result<(f64, Vec<f64>)> {
    if x_img.len() != y.len() {
        return Err(Error::shape("midn_loss", y.len(), x_img.len()));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(y.len());
    for (&x, &yc) in x_img.iter().zip(y) {
        let p = x.clamp(PROB_EPS, 1.0 - PROB_EPS);
        if yc == 1 {
            loss -= clamped_ln(p);
            grad.push(-1.0 / p);
        } else {
            loss -= clamped_ln(1.0 - p);
            grad.push(1.0 / (1.0 - p));
        }
    }
    Ok((loss, grad))
}

/// Spreads `dL/dx_img` over proposals: every proposal contributes with unit
/// weight to its class sum.
pub fn image_grad_to_midn(grad_img: &[f64], num_proposals: usize) -> Mat {
    Mat::from_fn(grad_img.len(), num_proposals, |c, _| grad_img[c])
}

/// Pseudo labels for the first refinement classifier, built from MIDN scores
/// with the top-scoring rule.
pub fn midn_seed_labels(
    x_midn: &Mat,
    y: &[u8],
    proposals: &[BBox],
    neighbor_thresh: f64,
) -> Result<RefineLabels> {
    gen_refine_labels(x_midn, y, proposals, neighbor_thresh)
}
