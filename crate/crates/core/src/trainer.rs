//! Training loop: per-scene forward/backward through every head, loss
//! assembly, SGD with momentum, and teacher updates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::crd::{build_positive_sets, crd_loss, tau_schedule, CrdConfig};
use crate::error::{Error, Result};
use crate::midn::{image_grad_to_midn, midn_backward, midn_forward, midn_loss};
use crate::model::{trunk_forward, ModelDims, StudentParams};
use crate::msr::{
    ensemble_scores, gen_rcnn_labels, mine_seeds, rcnn_cls_loss, rcnn_loss, rcnn_reg_loss,
    seed_confidence, top_scoring_seeds, MsrConfig,
};
use crate::numcore::{relu_backward, Mat, ParamSet};
use crate::oic::{gen_refine_labels, head_probs, oic_loss};
use crate::synthscene::{Dataset, Scene};
use crate::wet::{wet_forward, wet_update, EmaConfig, EmaMode, WetParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Learning rate from `lr_drop_iter` on.
    pub lr_after_drop: f64,
    pub lr_drop_iter: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub num_oic: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    pub log_interval: usize,
    /// 0 disables intermediate checkpoints; the final one is always produced.
    pub checkpoint_interval: usize,
    /// Global gradient-norm cap; off when absent.
    pub clip_norm: Option<f64>,
    /// IoU above which a proposal joins its nearest refinement seed.
    pub neighbor_thresh: f64,
    pub use_wet: bool,
    pub use_crd: bool,
    pub use_msr: bool,
    /// MSR takes over R-CNN supervision from this fraction of the run.
    pub msr_start_fraction: f64,
    /// Horizon of the λ decay; defaults to `iterations`.
    pub lambda_horizon: Option<usize>,
    pub crd: CrdConfig,
    pub ema: EmaConfig,
    pub msr: MsrConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 70_000,
            lr: 1e-3,
            lr_after_drop: 1e-4,
            lr_drop_iter: 50_000,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 4,
            num_oic: 3,
            hidden_dim: 32,
            seed: 1,
            log_interval: 100,
            checkpoint_interval: 0,
            clip_norm: None,
            neighbor_thresh: 0.5,
            use_wet: true,
            use_crd: true,
            use_msr: true,
            msr_start_fraction: 0.4,
            lambda_horizon: None,
            crd: CrdConfig::default(),
            ema: EmaConfig::default(),
            msr: MsrConfig::default(),
        }
    }
}

pub const PRESETS: &[&str] = &[
    "baseline",
    "cbl",
    "ema-last-oic",
    "ema-cls",
    "a-ema",
    "w-ema",
];

impl TrainConfig {
    /// Switches components on or off to match a named preset. Only the
    /// component toggles and the teacher update mode are touched.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let full = |c: &mut Self, mode| {
            c.use_wet = true;
            c.use_crd = true;
            c.use_msr = true;
            c.ema.mode = mode;
        };
        match name {
            "baseline" => {
                self.use_wet = false;
                self.use_crd = false;
                self.use_msr = false;
            }
            "cbl" | "w-ema" => full(self, EmaMode::Weighted),
            "ema-last-oic" => full(self, EmaMode::SingleLastOic),
            "ema-cls" => full(self, EmaMode::SingleCls),
            "a-ema" => full(self, EmaMode::Average),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_preset(name)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.iterations == 0 || self.batch_size == 0 || self.num_oic == 0 || self.hidden_dim == 0
        {
            return bad("iterations, batch_size, num_oic and hidden_dim must be >= 1");
        }
        if self.log_interval == 0 {
            return bad("log_interval must be >= 1");
        }
        if !(self.lr > 0.0) || !(self.lr_after_drop > 0.0) {
            return bad("learning rates must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0,1) and weight_decay be >= 0");
        }
        if !(self.msr_start_fraction > 0.0 && self.msr_start_fraction <= 1.0) {
            return bad("msr_start_fraction must lie in (0,1]");
        }
        if !(0.0..=1.0).contains(&self.neighbor_thresh) {
            return bad("neighbor_thresh must lie in [0,1]");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be > 0");
        }
        if self.lambda_horizon == Some(0) {
            return bad("lambda_horizon must be >= 1");
        }
        if (self.use_crd || self.use_msr) && !self.use_wet {
            return bad("use_crd and use_msr need use_wet");
        }
        self.crd.validate()?;
        self.ema.validate()?;
        self.msr.validate()
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.lr_drop_iter {
            self.lr
        } else {
            self.lr_after_drop
        }
    }

    /// First iteration at which MSR supervises the R-CNN head.
    pub fn msr_start(&self) -> usize {
        (self.msr_start_fraction * self.iterations as f64).ceil() as usize
    }

    /// λ at `iteration`; identically 1 without CRD.
    pub fn lambda_at(&self, iteration: usize) -> f64 {
        if self.use_crd {
            lambda_schedule(iteration, self.lambda_horizon.unwrap_or(self.iterations))
        } else {
            1.0
        }
    }

    pub fn model_dims(&self, dataset: &Dataset) -> ModelDims {
        ModelDims {
            feature_dim: dataset.feature_dim(),
            hidden_dim: self.hidden_dim,
            num_classes: dataset.num_classes(),
            num_oic: self.num_oic,
        }
    }
}

/// `max(0, 1 − iter_cur / horizon)`.
pub fn lambda_schedule(iter_cur: usize, horizon: usize) -> f64 {
    (1.0 - iter_cur as f64 / horizon.max(1) as f64).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub midn: f64,
    pub crd: f64,
    pub oic_sum: f64,
    pub rcnn: f64,
}

/// `λ L_midn + (1 − λ) L_crd + Σ_k L_oic_k + L_rcnn`.
pub fn total_loss(parts: &LossParts, lambda: f64) -> f64 {
    lambda * parts.midn + (1.0 - lambda) * parts.crd + parts.oic_sum + parts.rcnn
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub iteration: usize,
    pub lambda: f64,
    pub tau: f64,
    pub lr: f64,
    pub msr_active: bool,
    pub midn: f64,
    pub crd: f64,
    pub oic: Vec<f64>,
    pub cls: f64,
    pub reg: f64,
    pub rcnn: f64,
    pub total: f64,
}

impl LossReport {
    pub fn csv_header(num_oic: usize) -> String {
        let mut cols: Vec<String> = [
            "iteration",
            "lambda",
            "tau",
            "lr",
            "msr_active",
            "l_midn",
            "l_crd",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        cols.extend((1..=num_oic).map(|k| format!("l_oic{k}")));
        cols.extend(
            ["l_cls", "l_reg", "l_rcnn", "l_total"]
                .iter()
                .map(|s| s.to_string()),
        );
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.iteration.to_string(),
            format!("{:e}", self.lambda),
            format!("{:e}", self.tau),
            format!("{:e}", self.lr),
            u8::from(self.msr_active).to_string(),
            format!("{:e}", self.midn),
            format!("{:e}", self.crd),
        ];
        cols.extend(self.oic.iter().map(|v| format!("{v:e}")));
        for v in [self.cls, self.reg, self.rcnn, self.total] {
            cols.push(format!("{v:e}"));
        }
        cols.join(",")
    }
}

pub fn history_csv(history: &[LossReport], num_oic: usize) -> String {
    let mut s = LossReport::csv_header(num_oic);
    s.push('\n');
    for r in history {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// `v ← m·v + g + wd·p`, `p ← p − lr·v`.
pub fn sgd_step<P: ParamSet>(
    params: &mut P,
    grads: &P,
    velocity: &mut P,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.num_params() != grads.num_params() || params.num_params() != velocity.num_params() {
        return Err(Error::shape(
            "sgd_step",
            params.num_params(),
            grads.num_params(),
        ));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    for ((p, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(velocity.tensors_mut())
    {
        for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Per-scene losses and student gradient.
#[derive(Debug, Clone)]
pub struct SceneStep {
    pub midn: f64,
    pub crd: f64,
    pub oic: Vec<f64>,
    pub cls: f64,
    pub reg: f64,
    pub grads: StudentParams,
}

/// Schedule values in force at one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub lambda: f64,
    pub tau: f64,
    pub msr_active: bool,
}

impl StepSchedule {
    pub fn at(cfg: &TrainConfig, iteration: usize) -> Self {
        Self {
            lambda: cfg.lambda_at(iteration),
            tau: tau_schedule(iteration, &cfg.crd),
            msr_active: cfg.use_msr && iteration >= cfg.msr_start(),
        }
    }
}

/// Forward and backward pass for one scene. The teacher is read only.
pub fn scene_step(
    student: &StudentParams,
    teacher: Option<&WetParams>,
    scene: &Scene,
    cfg: &TrainConfig,
    sched: StepSchedule,
) -> Result<SceneStep> {
    let dims = student.dims();
    let n = scene.num_proposals();
    let y = &scene.y_img;
    let acts = trunk_forward(&student.adapter, &scene.features)?;
    let hidden = &acts.hidden;
    let mut grads = StudentParams::zeros(&dims);
    let mut d_hidden = Mat::zeros(hidden.rows(), n);

    let midn = midn_forward(&student.midn, hidden)?;
    let (l_midn, g_img) = midn_loss(&midn.x_img, y)?;
    let mut g_midn = image_grad_to_midn(&g_img, n);
    g_midn.scale(sched.lambda);

    // refinement cascade: head 1 learns from MIDN, head k+1 from head k
    let mut l_oic = Vec::with_capacity(dims.num_oic);
    let mut prev = midn.x_midn.clone();
    for (k, head) in student.oic.iter().enumerate() {
        let probs = head_probs(head, hidden)?;
        let labels = gen_refine_labels(&prev, y, &scene.proposals, cfg.neighbor_thresh)?;
        let (l, g_logits) = oic_loss(&probs, &labels)?;
        let g = head.backward(hidden, &g_logits)?;
        d_hidden.add_assign(&g.input)?;
        grads.oic[k] = g.params();
        l_oic.push(l);
        prev = probs;
    }
    let last_oic = prev;

    let x_wet = teacher
        .map(|t| wet_forward(t, &scene.features))
        .transpose()?;

    let mut l_crd = 0.0;
    if cfg.use_crd {
        let x_wet = x_wet
            .as_ref()
            .ok_or_else(|| Error::Config("CRD needs the teacher".into()))?;
        let sets =
            build_positive_sets(x_wet, &scene.proposals, &scene.present_classes(), sched.tau)?;
        let (l, mut g) = crd_loss(&sets, &midn.x_midn, x_wet, cfg.crd.temperature)?;
        l_crd = l;
        g.scale(1.0 - sched.lambda);
        g_midn.add_assign(&g)?;
    }

    let seeds = if sched.msr_active {
        let x_wet = x_wet
            .as_ref()
            .ok_or_else(|| Error::Config("MSR needs the teacher".into()))?;
        let x_msr = ensemble_scores(x_wet, &last_oic)?;
        let mut seeds = mine_seeds(&x_msr, &scene.proposals, y, &cfg.msr)?;
        seed_confidence(&mut seeds, &[&last_oic, x_wet], &scene.proposals, &cfg.msr)?;
        seeds
    } else {
        top_scoring_seeds(&last_oic, y)
    };
    let rcnn_labels = gen_rcnn_labels(&seeds, &scene.proposals, &cfg.msr)?;
    let cls_probs = head_probs(&student.rcnn_cls, hidden)?;
    let (l_cls, g_cls) = rcnn_cls_loss(&cls_probs, &rcnn_labels)?;
    let g = student.rcnn_cls.backward(hidden, &g_cls)?;
    d_hidden.add_assign(&g.input)?;
    grads.rcnn_cls = g.params();
    let reg = student.rcnn_reg.forward(hidden)?;
    let (l_reg, g_reg) = rcnn_reg_loss(&reg, &rcnn_labels)?;
    let g = student.rcnn_reg.backward(hidden, &g_reg)?;
    d_hidden.add_assign(&g.input)?;
    grads.rcnn_reg = g.params();

    let gm = midn_backward(&student.midn, hidden, &midn, &g_midn)?;
    d_hidden.add_assign(&gm.hidden)?;
    grads.midn = gm.params;

    let d_pre = relu_backward(&acts.pre, &d_hidden);
    grads.adapter = student.adapter.backward(&scene.features, &d_pre)?.params();

    Ok(SceneStep {
        midn: l_midn,
        crd: l_crd,
        oic: l_oic,
        cls: l_cls,
        reg: l_reg,
        grads,
    })
}

fn scene_diagnostic(scene: &Scene, step: &SceneStep) -> String {
    format!(
        "scene {} (labels {:?}, {} proposals, {} gt boxes): L_midn={} L_crd={} L_oic={:?} L_cls={} L_reg={}",
        scene.id,
        scene.y_img,
        scene.num_proposals(),
        scene.gt.len(),
        step.midn,
        step.crd,
        step.oic,
        step.cls,
        step.reg
    )
}

/// Everything a run produces besides files.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub history: Vec<LossReport>,
}

/// Mutable state of a run, advanced one iteration at a time.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    train: Vec<&'a Scene>,
    student: StudentParams,
    velocity: StudentParams,
    teacher: Option<WetParams>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        let train = dataset.train();
        if train.is_empty() {
            return Err(Error::Dataset("no training scenes".into()));
        }
        let dims = cfg.model_dims(dataset);
        dims.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let student = StudentParams::init(&dims, &mut init_rng);
        let teacher = cfg
            .use_wet
            .then(|| WetParams::init_from(&student, cfg.ema.mode))
            .transpose()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            cfg: cfg.clone(),
            order: (0..train.len()).collect(),
            cursor: train.len(),
            train,
            velocity: StudentParams::zeros(&dims),
            student,
            teacher,
            rng,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn student(&self) -> &StudentParams {
        &self.student
    }

    pub fn teacher(&self) -> Option<&WetParams> {
        self.teacher.as_ref()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration as u64,
            student: self.student.clone(),
            teacher: self.teacher.clone(),
            velocity: self.velocity.clone(),
        }
    }

    /// Shuffled passes over the training split.
    fn next_batch(&mut self) -> Vec<&'a Scene> {
        (0..self.cfg.batch_size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.train[self.order[self.cursor - 1]]
            })
            .collect()
    }

    /// Runs one iteration and reports its losses.
    pub fn step(&mut self) -> Result<LossReport> {
        let it = self.iteration;
        let sched = StepSchedule::at(&self.cfg, it);
        let batch = self.next_batch();
        let (student, teacher, cfg) = (&self.student, self.teacher.as_ref(), &self.cfg);
        let steps = batch
            .par_iter()
            .map(|s| scene_step(student, teacher, s, cfg, sched))
            .collect::<Result<Vec<_>>>()?;

        let inv_b = 1.0 / batch.len() as f64;
        let dims = self.student.dims();
        let mut grads = StudentParams::zeros(&dims);
        let mut report = LossReport {
            iteration: it,
            lambda: sched.lambda,
            tau: sched.tau,
            lr: self.cfg.lr_at(it),
            msr_active: sched.msr_active,
            midn: 0.0,
            crd: 0.0,
            oic: vec![0.0; dims.num_oic],
            cls: 0.0,
            reg: 0.0,
            rcnn: 0.0,
            total: 0.0,
        };
        for (scene, step) in batch.iter().zip(&steps) {
            let parts = LossParts {
                midn: step.midn,
                crd: step.crd,
                oic_sum: step.oic.iter().sum(),
                rcnn: rcnn_loss(step.cls, step.reg),
            };
            if !total_loss(&parts, sched.lambda).is_finite() || !step.grads.is_finite() {
                return Err(Error::NonFinite(format!(
                    "iteration {it}: {}",
                    scene_diagnostic(scene, step)
                )));
            }
            grads.axpy(inv_b, &step.grads);
            report.midn += inv_b * step.midn;
            report.crd += inv_b * step.crd;
            for (acc, v) in report.oic.iter_mut().zip(&step.oic) {
                *acc += inv_b * v;
            }
            report.cls += inv_b * step.cls;
            report.reg += inv_b * step.reg;
        }
        report.rcnn = rcnn_loss(report.cls, report.reg);
        report.total = total_loss(
            &LossParts {
                midn: report.midn,
                crd: report.crd,
                oic_sum: report.oic.iter().sum(),
                rcnn: report.rcnn,
            },
            sched.lambda,
        );

        if let Some(cap) = self.cfg.clip_norm {
            let norm = grads.global_norm();
            if norm > cap {
                grads.scale(cap / norm);
            }
        }
        sgd_step(
            &mut self.student,
            &grads,
            &mut self.velocity,
            report.lr,
            self.cfg.momentum,
            self.cfg.weight_decay,
        )?;
        if let Some(t) = &mut self.teacher {
            wet_update(t, &self.student, &self.cfg.ema)?;
        }
        self.iteration += 1;
        Ok(report)
    }
}

/// Things a run reports while it progresses.
#[derive(Debug)]
pub enum TrainEvent<'a> {
    /// A loss report that went into the metric history.
    Logged(&'a LossReport),
    /// An intermediate checkpoint (every `checkpoint_interval` iterations).
    Checkpoint(&'a Checkpoint),
}

/// Trains for `cfg.iterations`, passing logged reports and intermediate
/// checkpoints to `on_event`.
pub fn train_with(
    cfg: &TrainConfig,
    dataset: &Dataset,
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(cfg, dataset)?;
    let mut history = Vec::new();
    for _ in 0..cfg.iterations {
        let report = trainer.step()?;
        let done = trainer.iteration();
        if report.iteration % cfg.log_interval == 0 || done == cfg.iterations {
            on_event(TrainEvent::Logged(&report))?;
            history.push(report);
        }
        if cfg.checkpoint_interval > 0
            && done % cfg.checkpoint_interval == 0
            && done < cfg.iterations
        {
            on_event(TrainEvent::Checkpoint(&trainer.checkpoint()))?;
        }
    }
    Ok(TrainOutput {
        checkpoint: trainer.checkpoint(),
        history,
    })
}

pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutput> {
    train_with(cfg, dataset, |_| Ok(()))
}
