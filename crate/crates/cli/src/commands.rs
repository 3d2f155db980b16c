use std::io::Write;
use std::path::{Path, PathBuf};

use cbl_core::checkpoint::Checkpoint;
use cbl_core::crd::{build_positive_set, tau_schedule, PositiveSet};
use cbl_core::eval::{evaluate, predict, MetricsSummary, ScoreSource};
use cbl_core::geometry::{iou, rank_by_score};
use cbl_core::msr::{ensemble_scores, mine_seeds, seed_confidence, top_scoring_seeds, Seed};
use cbl_core::synthscene::{Dataset, Scene};
use cbl_core::trainer::{history_csv, train_with, TrainEvent};
use cbl_core::{BBox, Mat};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::Runtime(format!(
            "dataset not found: {} (run `cbl gen` first)",
            path.display()
        )));
    }
    Ok(Dataset::load(path)?)
}

pub fn gen(cfg: &RunConfig, out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let path = out.unwrap_or_else(|| cfg.dataset_path());
    let dataset = Dataset::generate(&cfg.gen)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    dataset.save(&path)?;
    let mut resolved = cfg.clone();
    resolved.dataset = Some(path.clone());
    resolved.write_resolved(&path.with_extension("config.toml"))?;
    eprintln!(
        "wrote {} scenes to {}",
        dataset.scenes.len(),
        path.display()
    );
    Ok(path)
}

fn summary_files(dir: &Path, summary: &MetricsSummary, num_classes: usize) -> Result<(), CliError> {
    let json =
        serde_json::to_string_pretty(summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&dir.join("summary.json"), format!("{json}\n").as_bytes())?;
    let csv = format!(
        "{}\n{}\n",
        MetricsSummary::csv_header(num_classes),
        summary.csv_row()
    );
    write_file(&dir.join("summary.csv"), csv.as_bytes())
}

pub fn train(cfg: &RunConfig, quiet: bool) -> Result<MetricsSummary, CliError> {
    let dataset = load_dataset(&cfg.dataset_path())?;
    let dir = cfg.output_dir();
    create_dir(&dir)?;
    let mut resolved = cfg.clone();
    resolved.dataset = Some(cfg.dataset_path());
    resolved.write_resolved(&dir.join("config.toml"))?;

    let out = train_with(&cfg.train, &dataset, |event| {
        match event {
            TrainEvent::Logged(r) if !quiet => {
                eprintln!(
                    "iter {:>6}  loss {:.4}  midn {:.4}  crd {:.4}  rcnn {:.4}  lambda {:.3}",
                    r.iteration, r.total, r.midn, r.crd, r.rcnn, r.lambda
                );
            }
            TrainEvent::Logged(_) => {}
            TrainEvent::Checkpoint(ck) => {
                ck.save(&dir.join(format!("checkpoint_{:07}.ckpt", ck.iteration)))?;
            }
        }
        Ok(())
    })
    .map_err(|e| {
        let err = CliError::from(e);
        let _ = std::fs::write(dir.join("abort.txt"), format!("{err}\n"));
        err
    })?;

    out.checkpoint.save(&dir.join("checkpoint.ckpt"))?;
    write_file(
        &dir.join("history.csv"),
        history_csv(&out.history, cfg.train.num_oic).as_bytes(),
    )?;
    let summary = evaluate(
        &out.checkpoint.student,
        out.checkpoint.teacher.as_ref(),
        &dataset.train(),
        &dataset.test(),
        &cfg.eval,
    )?;
    summary_files(&dir, &summary, dataset.num_classes())?;
    Ok(summary)
}

pub fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    out: Option<&Path>,
) -> Result<MetricsSummary, CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let dataset = load_dataset(&cfg.dataset_path())?;
    check_compatible(&ck, &dataset)?;
    let summary = evaluate(
        &ck.student,
        ck.teacher.as_ref(),
        &dataset.train(),
        &dataset.test(),
        &cfg.eval,
    )?;
    if let Some(dir) = out {
        create_dir(dir)?;
        summary_files(dir, &summary, dataset.num_classes())?;
        let mut resolved = cfg.clone();
        resolved.dataset = Some(cfg.dataset_path());
        resolved.write_resolved(&dir.join("eval_config.toml"))?;
    }
    Ok(summary)
}

fn check_compatible(ck: &Checkpoint, dataset: &Dataset) -> Result<(), CliError> {
    let d = ck.dims();
    if d.num_classes != dataset.num_classes() || d.feature_dim != dataset.feature_dim() {
        return Err(CliError::Runtime(format!(
            "checkpoint expects {} classes and {} features; dataset has {} and {}",
            d.num_classes,
            d.feature_dim,
            dataset.num_classes(),
            dataset.feature_dim()
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct Ranked {
    pub proposal: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Best IoU with a ground-truth box of the class.
    pub gt_iou: f64,
}

#[derive(Debug, Serialize)]
pub struct ClassDump {
    pub class: usize,
    pub midn_top: Vec<Ranked>,
    pub wet_top: Option<Vec<Ranked>>,
    pub positive_set: Option<PositiveSet>,
    pub seeds: Vec<Seed>,
}

#[derive(Debug, Serialize)]
pub struct InspectDump {
    pub scene: usize,
    pub labels: Vec<u8>,
    pub iteration: u64,
    pub tau: f64,
    /// `msr` when seeds come from the teacher ensemble, `top-scoring` when
    /// the checkpoint has no teacher.
    pub seed_source: &'static str,
    pub classes: Vec<ClassDump>,
}

fn ranked(scores: &Mat, scene: &Scene, class: usize, top: usize) -> Vec<Ranked> {
    rank_by_score(scores.row(class))
        .into_iter()
        .take(top)
        .map(|i| Ranked {
            proposal: i,
            score: scores.get(class, i),
            bbox: scene.proposals[i],
            gt_iou: scene
                .gt_of_class(class)
                .map(|g| iou(g, &scene.proposals[i]))
                .fold(0.0, f64::max),
        })
        .collect()
}

pub fn inspect(
    cfg: &RunConfig,
    checkpoint: &Path,
    scene_id: usize,
    tau: Option<f64>,
    top: usize,
) -> Result<InspectDump, CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let dataset = load_dataset(&cfg.dataset_path())?;
    check_compatible(&ck, &dataset)?;
    let scene = dataset
        .scene(scene_id)
        .ok_or_else(|| CliError::Runtime(format!("scene {scene_id} not in dataset")))?;
    let tau = tau.unwrap_or_else(|| tau_schedule(ck.iteration as usize, &cfg.train.crd));
    if !(0.0..=1.0).contains(&tau) {
        return Err(CliError::Config(format!("tau {tau} outside [0,1]")));
    }
    let source = if ck.teacher.is_some() {
        ScoreSource::Ensemble
    } else {
        ScoreSource::Basic
    };
    let p = predict(&ck.student, ck.teacher.as_ref(), scene, source)?;
    let last_oic = p.oic.last().expect("at least one refinement head");
    let (seeds, seed_source) = match &p.wet {
        Some(wet) => {
            let x_msr = ensemble_scores(wet, last_oic)?;
            let mut seeds = mine_seeds(&x_msr, &scene.proposals, &scene.y_img, &cfg.train.msr)?;
            seed_confidence(
                &mut seeds,
                &[last_oic, wet],
                &scene.proposals,
                &cfg.train.msr,
            )?;
            (seeds, "msr")
        }
        None => (top_scoring_seeds(last_oic, &scene.y_img), "top-scoring"),
    };

    let mut classes = Vec::new();
    for class in scene.present_classes() {
        let positive_set = p
            .wet
            .as_ref()
            .map(|w| build_positive_set(w, &scene.proposals, class, tau))
            .transpose()?;
        classes.push(ClassDump {
            class,
            midn_top: ranked(&p.x_midn, scene, class, top),
            wet_top: p.wet.as_ref().map(|w| ranked(w, scene, class, top)),
            positive_set,
            seeds: seeds.iter().filter(|s| s.class == class).cloned().collect(),
        });
    }
    Ok(InspectDump {
        scene: scene.id,
        labels: scene.y_img.clone(),
        iteration: ck.iteration,
        tau,
        seed_source,
        classes,
    })
}

pub fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let s = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{s}").map_err(|e| CliError::Runtime(e.to_string()))
}
