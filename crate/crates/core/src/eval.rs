//! Inference scoring, box decoding and detection metrics (AP/mAP, CorLoc,
//! and top-1 MIDN localization accuracy).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, nms, rank_by_score, BBox};
use crate::midn::midn_forward;
use crate::model::{trunk_forward, StudentParams};
use crate::msr::apply_deltas;
use crate::numcore::Mat;
use crate::oic::head_probs;
use crate::synthscene::Scene;
use crate::wet::{wet_forward, wet_head_forward, WetParams};

/// Which classification outputs are combined into the final scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSource {
    /// Mean of the refinement heads and R-CNN head, averaged again with the
    /// teacher. Falls back to `basic` when no teacher exists.
    Ensemble,
    /// Mean of the refinement heads and the R-CNN head only.
    Basic,
    /// Teacher output alone.
    WetOnly,
    /// Like `ensemble`, but the teacher head reads the student's adapter
    /// features instead of running the teacher adapter.
    TeacherHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub score_source: ScoreSource,
    pub nms_thresh: f64,
    pub score_floor: f64,
    pub iou_thresh: f64,
    pub canvas_size: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_source: ScoreSource::Ensemble,
            nms_thresh: 0.3,
            score_floor: 1e-3,
            iou_thresh: 0.5,
            canvas_size: 1.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.nms_thresh) || !(0.0..=1.0).contains(&self.iou_thresh) {
            return Err(Error::Config("eval: thresholds must lie in [0,1]".into()));
        }
        if !(self.score_floor >= 0.0) || !(self.canvas_size > 0.0) {
            return Err(Error::Config(
                "eval: score_floor >= 0 and canvas_size > 0 required".into(),
            ));
        }
        Ok(())
    }
}

/// `½ · ( (Σ_k x_oic_k + x_cls) / (K+1) + x_wet )`; without a teacher, just
/// the inner average.
pub fn inference_scores(oic: &[Mat], cls: &Mat, wet: Option<&Mat>) -> Result<Mat> {
    let mut avg = cls.clone();
    for m in oic {
        avg.add_assign(m)?;
    }
    avg.scale(1.0 / (oic.len() + 1) as f64);
    match wet {
        Some(w) => avg.zip_map(w, |a, b| 0.5 * (a + b)),
        None => Ok(avg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    pub scene_id: usize,
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// Everything evaluation needs from one forward pass over a scene.
#[derive(Debug, Clone)]
pub struct ScenePrediction {
    pub x_midn: Mat,
    pub oic: Vec<Mat>,
    pub cls: Mat,
    pub wet: Option<Mat>,
    pub x_inf: Mat,
    pub reg: Mat,
}

pub fn predict(
    student: &StudentParams,
    teacher: Option<&WetParams>,
    scene: &Scene,
    source: ScoreSource,
) -> Result<ScenePrediction> {
    let acts = trunk_forward(&student.adapter, &scene.features)?;
    let x_midn = midn_forward(&student.midn, &acts.hidden)?.x_midn;
    let oic = student
        .oic
        .iter()
        .map(|h| head_probs(h, &acts.hidden))
        .collect::<Result<Vec<_>>>()?;
    let cls = head_probs(&student.rcnn_cls, &acts.hidden)?;
    let reg = student.rcnn_reg.forward(&acts.hidden)?;
    let wet = match (teacher, source) {
        (None, ScoreSource::WetOnly | ScoreSource::TeacherHead) => {
            return Err(Error::InvalidArgument(
                "score source needs a teacher but the model has none".into(),
            ))
        }
        (None, _) | (Some(_), ScoreSource::Basic) => None,
        (Some(t), ScoreSource::TeacherHead) => Some(wet_head_forward(t, &acts.hidden)?),
        (Some(t), _) => Some(wet_forward(t, &scene.features)?),
    };
    let x_inf = match source {
        ScoreSource::WetOnly => wet.clone().expect("teacher checked above"),
        _ => inference_scores(&oic, &cls, wet.as_ref())?,
    };
    Ok(ScenePrediction {
        x_midn,
        oic,
        cls,
        wet,
        x_inf,
        reg,
    })
}

/// Class-`class` boxes decoded from the regression output, clipped to the
/// canvas; `None` where nothing with positive area survives the clip.
pub fn decode_boxes(proposals: &[BBox], reg: &Mat, class: usize, canvas: f64) -> Vec<Option<BBox>> {
    proposals
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = [
                reg.get(4 * class, i),
                reg.get(4 * class + 1, i),
                reg.get(4 * class + 2, i),
                reg.get(4 * class + 3, i),
            ];
            let [x1, y1, x2, y2] = apply_deltas(p, &d);
            let (cx1, cy1) = (x1.clamp(0.0, canvas), y1.clamp(0.0, canvas));
            let (cx2, cy2) = (x2.clamp(0.0, canvas), y2.clamp(0.0, canvas));
            BBox::new(cx1, cy1, cx2, cy2).ok()
        })
        .collect()
}

fn check_detect_shapes(x_inf: &Mat, reg: &Mat, proposals: &[BBox]) -> Result<usize> {
    let n = proposals.len();
    if x_inf.cols() != n || reg.cols() != n || x_inf.rows() < 2 {
        return Err(Error::shape(
            "decode_and_detect",
            format!("(C+1) x {n} scores and 4C x {n} deltas"),
            format!(
                "{}x{} and {}x{}",
                x_inf.rows(),
                x_inf.cols(),
                reg.rows(),
                reg.cols()
            ),
        ));
    }
    let c = x_inf.rows() - 1;
    if reg.rows() != 4 * c {
        return Err(Error::shape("decode_and_detect", 4 * c, reg.rows()));
    }
    Ok(c)
}

/// Per class: decode, drop scores below `score_floor`, then NMS.
pub fn decode_and_detect(
    scene_id: usize,
    x_inf: &Mat,
    reg: &Mat,
    proposals: &[BBox],
    cfg: &EvalConfig,
) -> Result<Vec<Detection>> {
    let num_classes = check_detect_shapes(x_inf, reg, proposals)?;
    let mut out = Vec::new();
    for class in 0..num_classes {
        let decoded = decode_boxes(proposals, reg, class, cfg.canvas_size);
        let (boxes, scores): (Vec<BBox>, Vec<f64>) = decoded
            .iter()
            .zip(x_inf.row(class))
            .filter_map(|(b, &s)| b.map(|b| (b, s)))
            .filter(|&(_, s)| s >= cfg.score_floor)
            .unzip();
        for k in nms(&boxes, &scores, cfg.nms_thresh)? {
            out.push(Detection {
                scene_id,
                class,
                bbox: boxes[k],
                score: scores[k],
            });
        }
    }
    Ok(out)
}

/// Highest-scoring decoded box for each listed class, without NMS.
pub fn top_detections(
    scene_id: usize,
    x_inf: &Mat,
    reg: &Mat,
    proposals: &[BBox],
    classes: &[usize],
    canvas: f64,
) -> Result<Vec<Detection>> {
    check_detect_shapes(x_inf, reg, proposals)?;
    let mut out = Vec::new();
    for &class in classes {
        let decoded = decode_boxes(proposals, reg, class, canvas);
        if let Some(i) = rank_by_score(x_inf.row(class))
            .into_iter()
            .find(|&i| decoded[i].is_some())
        {
            out.push(Detection {
                scene_id,
                class,
                bbox: decoded[i].expect("filtered"),
                score: x_inf.get(class, i),
            });
        }
    }
    Ok(out)
}

/// Per-class value with classes lacking ground truth excluded.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    /// Classes that never occur and are left out of the mean.
    pub excluded: Vec<usize>,
}

impl ClassReport {
    fn from_per_class(per_class: Vec<Option<f64>>) -> Self {
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let excluded = per_class
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(c, _)| c)
            .collect();
        Self {
            per_class,
            mean,
            excluded,
        }
    }
}

/// Top-1 localization accuracy of MIDN scores: for each (scene, present
/// class) the top proposal is a hit iff its best IoU with a ground-truth box
/// of that class exceeds `iou_thresh`.
pub fn macc_at_1(x_midn: &[Mat], scenes: &[&Scene], iou_thresh: f64) -> Result<ClassReport> {
    if x_midn.len() != scenes.len() {
        return Err(Error::shape("macc_at_1", scenes.len(), x_midn.len()));
    }
    let c = scenes.first().map_or(0, |s| s.num_classes());
    let mut hits = vec![0usize; c];
    let mut total = vec![0usize; c];
    for (scores, scene) in x_midn.iter().zip(scenes) {
        for class in scene.present_classes() {
            let top = rank_by_score(scores.row(class))[0];
            let best = scene
                .gt_of_class(class)
                .map(|g| iou(g, &scene.proposals[top]))
                .fold(0.0, f64::max);
            total[class] += 1;
            if best > iou_thresh {
                hits[class] += 1;
            }
        }
    }
    Ok(ClassReport::from_per_class(
        (0..c)
            .map(|k| (total[k] > 0).then(|| hits[k] as f64 / total[k] as f64))
            .collect(),
    ))
}

/// Percentage of (scene, present class) pairs whose top detection overlaps
/// a ground-truth box of that class with IoU > 0.5. A pair with no
/// detection counts as a miss.
pub fn corloc(top: &[Detection], scenes: &[&Scene]) -> f64 {
    let mut pairs = 0usize;
    let mut hits = 0usize;
    for scene in scenes {
        for class in scene.present_classes() {
            pairs += 1;
            let hit = top
                .iter()
                .filter(|d| d.scene_id == scene.id && d.class == class)
                .max_by(|a, b| a.score.total_cmp(&b.score))
                .is_some_and(|d| scene.gt_of_class(class).any(|g| iou(g, &d.bbox) > 0.5));
            if hit {
                hits += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        100.0 * hits as f64 / pairs as f64
    }
}

/// Area under the precision envelope (all-point interpolation).
fn all_point_ap(tp: &[bool], num_gt: usize) -> f64 {
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len())
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum()
}

/// Per-class AP and their mean. Detections are matched greedily in
/// descending score order; each ground-truth box is matched at most once and
/// a match needs IoU > `iou_thresh`.
pub fn average_precision(
    detections: &[Detection],
    scenes: &[&Scene],
    num_classes: usize,
    iou_thresh: f64,
) -> ClassReport {
    let mut per_class = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let num_gt: usize = scenes.iter().map(|s| s.gt_of_class(class).count()).sum();
        if num_gt == 0 {
            per_class.push(None);
            continue;
        }
        let mut dets: Vec<&Detection> = detections.iter().filter(|d| d.class == class).collect();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut used: Vec<(usize, usize)> = Vec::new();
        let mut tp = Vec::with_capacity(dets.len());
        for d in dets {
            let Some(scene) = scenes.iter().find(|s| s.id == d.scene_id) else {
                tp.push(false);
                continue;
            };
            let best = scene
                .gt
                .iter()
                .enumerate()
                .filter(|(_, g)| g.class == class)
                .map(|(k, g)| (k, iou(&g.bbox, &d.bbox)))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((k, o)) if o > iou_thresh && !used.contains(&(scene.id, k)) => {
                    used.push((scene.id, k));
                    tp.push(true);
                }
                _ => tp.push(false),
            }
        }
        per_class.push(Some(all_point_ap(&tp, num_gt)));
    }
    ClassReport::from_per_class(per_class)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub score_source: ScoreSource,
    /// AP on the test split.
    pub ap: ClassReport,
    /// CorLoc (percent) on the training split.
    pub corloc: f64,
    /// MIDN top-1 accuracy on the training split at IoU 0.75.
    pub macc_075: ClassReport,
    /// Same at IoU 0.85.
    pub macc_085: ClassReport,
}

impl MetricsSummary {
    pub fn csv_header(num_classes: usize) -> String {
        let mut cols = vec![
            "score_source".to_string(),
            "map".into(),
            "corloc".into(),
            "macc_075".into(),
            "macc_085".into(),
        ];
        cols.extend((0..num_classes).map(|c| format!("ap_{c}")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let source = serde_json::to_value(self.score_source)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        let mut cols = vec![
            source,
            format!("{}", self.ap.mean),
            format!("{}", self.corloc),
            format!("{}", self.macc_075.mean),
            format!("{}", self.macc_085.mean),
        ];
        cols.extend(
            self.ap
                .per_class
                .iter()
                .map(|v| v.map_or_else(String::new, |x| format!("{x}"))),
        );
        cols.join(",")
    }
}

/// Full evaluation: mAP on the test split; CorLoc and MIDN mAcc@1 on the
/// training split.
pub fn evaluate(
    student: &StudentParams,
    teacher: Option<&WetParams>,
    train: &[&Scene],
    test: &[&Scene],
    cfg: &EvalConfig,
) -> Result<MetricsSummary> {
    cfg.validate()?;
    let num_classes = student.dims().num_classes;
    let mut detections = Vec::new();
    for scene in test {
        let p = predict(student, teacher, scene, cfg.score_source)?;
        detections.extend(decode_and_detect(
            scene.id,
            &p.x_inf,
            &p.reg,
            &scene.proposals,
            cfg,
        )?);
    }
    let ap = average_precision(&detections, test, num_classes, cfg.iou_thresh);

    let mut tops = Vec::new();
    let mut midn = Vec::with_capacity(train.len());
    for scene in train {
        let p = predict(student, teacher, scene, cfg.score_source)?;
        tops.extend(top_detections(
            scene.id,
            &p.x_inf,
            &p.reg,
            &scene.proposals,
            &scene.present_classes(),
            cfg.canvas_size,
        )?);
        midn.push(p.x_midn);
    }
    Ok(MetricsSummary {
        score_source: cfg.score_source,
        ap,
        corloc: corloc(&tops, train),
        macc_075: macc_at_1(&midn, train, 0.75)?,
        macc_085: macc_at_1(&midn, train, 0.85)?,
    })
}
