//! Weighted ensemble teacher.
//!
//! The teacher mirrors the student's adapter and one `C+1`-way classification
//! head. After every optimizer step its adapter tracks the student adapter
//! with a plain EMA, and its head tracks a combination of the student's
//! classification heads chosen by [`EmaMode`]:
//!
//! - `single-last-oic` / `single-cls`: `θ_t ← αθ_t + (1-α)θ_s` for one head,
//! - `average`: uniform mean over the K refinement heads and the R-CNN head,
//! - `weighted`: `θ_t ← αθ_t + (1-α)/2 · (mean_k θ_k + θ_cls)`.
//!
//! The teacher never receives gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{trunk_forward, StudentParams};
use crate::numcore::{softmax_over_classes, AffineParams, Mat, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmaMode {
    /// Plain EMA from the last refinement classifier.
    SingleLastOic,
    /// Plain EMA from the R-CNN classification branch.
    SingleCls,
    /// Uniform average over all K+1 candidate heads.
    Average,
    /// Half of the student mass on the R-CNN classification branch, half
    /// spread over the refinement classifiers.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmaConfig {
    pub alpha: f64,
    pub mode: EmaMode,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.999,
            mode: EmaMode::Weighted,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "ema: alpha {} outside [0,1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} outside [0,1]"
        )));
    }
    Ok(())
}

fn check_shapes<P: ParamSet>(op: &'static str, teacher: &P, other: &P) -> Result<()> {
    let a: Vec<usize> = teacher.tensors().iter().map(|t| t.len()).collect();
    let b: Vec<usize> = other.tensors().iter().map(|t| t.len()).collect();
    if a != b {
        return Err(Error::shape(op, format!("{a:?}"), format!("{b:?}")));
    }
    Ok(())
}

/// `θ_t ← α θ_t + (1-α) · target`, coordinate-wise.
fn blend<P: ParamSet>(teacher: &mut P, alpha: f64, target: impl Fn(usize, usize) -> f64) {
    for (ti, t) in teacher.tensors_mut().into_iter().enumerate() {
        for (j, v) in t.iter_mut().enumerate() {
            *v = alpha * *v + (1.0 - alpha) * target(ti, j);
        }
    }
}

pub fn ema_update<P: ParamSet>(teacher: &mut P, student: &P, alpha: f64) -> Result<()> {
    check_alpha(alpha)?;
    check_shapes("ema_update", teacher, student)?;
    let s = student.tensors();
    blend(teacher, alpha, |t, j| s[t][j]);
    Ok(())
}

/// EMA towards the uniform mean of several students.
pub fn aema_update<P: ParamSet>(teacher: &mut P, students: &[&P], alpha: f64) -> Result<()> {
    check_alpha(alpha)?;
    if students.is_empty() {
        return Err(Error::InvalidArgument(
            "aema_update needs at least one student".into(),
        ));
    }
    for s in students {
        check_shapes("aema_update", teacher, *s)?;
    }
    let views: Vec<Vec<&[f64]>> = students.iter().map(|s| s.tensors()).collect();
    let count = students.len() as f64;
    blend(teacher, alpha, |t, j| {
        views.iter().map(|v| v[t][j]).sum::<f64>() / count
    });
    Ok(())
}

/// Per-source mixing weights of one weighted update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WemaCoefficients {
    pub teacher: f64,
    pub cls: f64,
    pub per_oic: f64,
    pub num_oic: usize,
}

impl WemaCoefficients {
    pub fn new(alpha: f64, num_oic: usize) -> Self {
        Self {
            teacher: alpha,
            cls: (1.0 - alpha) / 2.0,
            per_oic: (1.0 - alpha) / (2.0 * num_oic as f64),
            num_oic,
        }
    }

    pub fn sum(&self) -> f64 {
        self.teacher + self.cls + self.num_oic as f64 * self.per_oic
    }
}

/// `θ_t ← α θ_t + (1-α)/2 · ((1/K) Σ_k θ_k + θ_cls)`.
pub fn wema_update<P: ParamSet>(
    teacher: &mut P,
    oic: &[&P],
    cls: &P,
    alpha: f64,
) -> Result<WemaCoefficients> {
    check_alpha(alpha)?;
    if oic.is_empty() {
        return Err(Error::InvalidArgument("wema_update needs K >= 1".into()));
    }
    check_shapes("wema_update", teacher, cls)?;
    for s in oic {
        check_shapes("wema_update", teacher, *s)?;
    }
    let coeffs = WemaCoefficients::new(alpha, oic.len());
    if (coeffs.sum() - 1.0).abs() > 1e-12 {
        return Err(Error::NonFinite(format!(
            "weighted EMA coefficients sum to {}",
            coeffs.sum()
        )));
    }
    let views: Vec<Vec<&[f64]>> = oic.iter().map(|s| s.tensors()).collect();
    let cls_view = cls.tensors();
    let k = oic.len() as f64;
    blend(teacher, alpha, |t, j| {
        let oic_mean = views.iter().map(|v| v[t][j]).sum::<f64>() / k;
        0.5 * (oic_mean + cls_view[t][j])
    });
    Ok(coeffs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WetParams {
    pub adapter: AffineParams,
    pub head: AffineParams,
}

impl ParamSet for WetParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = self.adapter.tensors();
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.adapter.tensors_mut();
        out.extend(self.head.tensors_mut());
        out
    }
}

impl WetParams {
    /// Exact copy of the student under `mode`: the adapter, and the head
    /// combination the update rule tracks.
    pub fn init_from(student: &StudentParams, mode: EmaMode) -> Result<Self> {
        let mut wet = WetParams {
            adapter: student.adapter.clone(),
            head: student.rcnn_cls.clone(),
        };
        wet_update(&mut wet, student, &EmaConfig { alpha: 0.0, mode })?;
        Ok(wet)
    }

    pub fn tensor_names() -> Vec<String> {
        ["adapter.weight", "adapter.bias", "head.weight", "head.bias"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }
}

/// One teacher step: EMA on the adapter, mode-specific rule on the head.
pub fn wet_update(state: &mut WetParams, student: &StudentParams, cfg: &EmaConfig) -> Result<()> {
    ema_update(&mut state.adapter, &student.adapter, cfg.alpha)?;
    match cfg.mode {
        EmaMode::SingleLastOic => {
            let last = student
                .oic
                .last()
                .ok_or_else(|| Error::InvalidArgument("student has no refinement heads".into()))?;
            ema_update(&mut state.head, last, cfg.alpha)
        }
        EmaMode::SingleCls => ema_update(&mut state.head, &student.rcnn_cls, cfg.alpha),
        EmaMode::Average => {
            let mut all: Vec<&AffineParams> = student.oic.iter().collect();
            all.push(&student.rcnn_cls);
            aema_update(&mut state.head, &all, cfg.alpha)
        }
        EmaMode::Weighted => {
            let oic: Vec<&AffineParams> = student.oic.iter().collect();
            wema_update(&mut state.head, &oic, &student.rcnn_cls, cfg.alpha).map(|_| ())
        }
    }
}

/// Teacher scores `x_wet`: `(C+1) × |R|`, softmax over classes per proposal.
pub fn wet_forward(state: &WetParams, features: &Mat) -> Result<Mat> {
    let acts = trunk_forward(&state.adapter, features)?;
    wet_head_forward(state, &acts.hidden)
}

/// Teacher head applied to already computed hidden features.
pub fn wet_head_forward(state: &WetParams, hidden: &Mat) -> Result<Mat> {
    Ok(softmax_over_classes(&state.head.forward(hidden)?))
}
