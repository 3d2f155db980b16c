//! Student network layout: a shared feature adapter followed by the MIDN,
//! the online instance classifiers and the R-CNN head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::midn::MidnParams;
use crate::numcore::{relu, AffineParams, Mat, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    /// Number of cascaded online instance classifiers (K).
    pub num_oic: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        if self.num_oic == 0 {
            return Err(Error::Config("num_oic (K) must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adapter activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TrunkActs {
    pub pre: Mat,
    pub hidden: Mat,
}

/// `relu(adapter · features)`.
pub fn trunk_forward(adapter: &AffineParams, features: &Mat) -> Result<TrunkActs> {
    let pre = adapter.forward(features)?;
    let hidden = relu(&pre);
    Ok(TrunkActs { pre, hidden })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentParams {
    pub adapter: AffineParams,
    pub midn: MidnParams,
    pub oic: Vec<AffineParams>,
    pub rcnn_cls: AffineParams,
    pub rcnn_reg: AffineParams,
}

impl StudentParams {
    pub fn init(dims: &ModelDims, rng: &mut impl Rng) -> Self {
        let (d, h, c) = (dims.feature_dim, dims.hidden_dim, dims.num_classes);
        let mut adapter = AffineParams::gaussian(h, d, (2.0 / d as f64).sqrt(), rng);
        adapter.bias.iter_mut().for_each(|b| *b = 0.01);
        Self {
            adapter,
            midn: MidnParams {
                cls: AffineParams::gaussian(c, h, 0.01, rng),
                det: AffineParams::gaussian(c, h, 0.01, rng),
            },
            oic: (0..dims.num_oic)
                .map(|_| AffineParams::gaussian(c + 1, h, 0.01, rng))
                .collect(),
            rcnn_cls: AffineParams::gaussian(c + 1, h, 0.01, rng),
            rcnn_reg: AffineParams::gaussian(4 * c, h, 0.001, rng),
        }
    }

    /// All-zero parameters with the given layout; doubles as a gradient
    /// accumulator.
    pub fn zeros(dims: &ModelDims) -> Self {
        let (d, h, c) = (dims.feature_dim, dims.hidden_dim, dims.num_classes);
        Self {
            adapter: AffineParams::zeros(h, d),
            midn: MidnParams {
                cls: AffineParams::zeros(c, h),
                det: AffineParams::zeros(c, h),
            },
            oic: (0..dims.num_oic)
                .map(|_| AffineParams::zeros(c + 1, h))
                .collect(),
            rcnn_cls: AffineParams::zeros(c + 1, h),
            rcnn_reg: AffineParams::zeros(4 * c, h),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            feature_dim: self.adapter.in_dim(),
            hidden_dim: self.adapter.out_dim(),
            num_classes: self.midn.cls.out_dim(),
            num_oic: self.oic.len(),
        }
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["adapter.weight".to_string(), "adapter.bias".to_string()];
        for n in ["midn.cls", "midn.det"] {
            names.push(format!("{n}.weight"));
            names.push(format!("{n}.bias"));
        }
        for k in 0..self.oic.len() {
            names.push(format!("oic{}.weight", k + 1));
            names.push(format!("oic{}.bias", k + 1));
        }
        for n in ["rcnn.cls", "rcnn.reg"] {
            names.push(format!("{n}.weight"));
            names.push(format!("{n}.bias"));
        }
        names
    }

    pub fn axpy(&mut self, k: f64, other: &StudentParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += k * y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

impl ParamSet for StudentParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = self.adapter.tensors();
        out.extend(self.midn.cls.tensors());
        out.extend(self.midn.det.tensors());
        for h in &self.oic {
            out.extend(h.tensors());
        }
        out.extend(self.rcnn_cls.tensors());
        out.extend(self.rcnn_reg.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.adapter.tensors_mut();
        out.extend(self.midn.cls.tensors_mut());
        out.extend(self.midn.det.tensors_mut());
        for h in &mut self.oic {
            out.extend(h.tensors_mut());
        }
        out.extend(self.rcnn_cls.tensors_mut());
        out.extend(self.rcnn_reg.tensors_mut());
        out
    }
}
