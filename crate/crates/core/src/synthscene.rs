//! Deterministic synthetic scenes: ground-truth objects, proposal sets,
//! image-level labels and proposal feature vectors.
//!
//! Each scene is a pure function of `(GenConfig, scene_index)`. Scenes draw
//! from their own ChaCha stream, so generation order and parallelism never
//! change the output.
//!
//! Proposals come in three kinds:
//! - jittered copies of a ground-truth box (IoU >= 0.5 with their object),
//! - part boxes, strict sub-rectangles of an object that carry an extra
//!   class-specific "part signature" in feature space,
//! - background boxes with IoU < 0.3 to every object.
//!
//! The feature of proposal `i` is `sum_g iou(i, g) * prototype(class_g)`, plus
//! `part_bonus * signature(class_g)` when `i` is a part of `g`, plus isotropic
//! Gaussian noise. Prototypes and signatures are `2C` orthonormal vectors
//! derived from the seed.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::numcore::Mat;

const PLACEMENT_RETRIES: usize = 200;
const BACKGROUND_MAX_IOU: f64 = 0.3;
const JITTER_MIN_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub num_classes: usize,
    pub num_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub proposals_per_scene: usize,
    /// Relative std of center shift and log-size change of jittered boxes.
    pub jitter_scale: f64,
    pub part_fraction: f64,
    pub background_fraction: f64,
    /// Range of the side-length ratio between a part box and its object.
    pub part_side_min: f64,
    pub part_side_max: f64,
    pub part_bonus: f64,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Object side lengths, as fractions of the canvas.
    pub object_size_min: f64,
    pub object_size_max: f64,
    pub canvas_size: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            num_scenes: 600,
            min_objects: 1,
            max_objects: 3,
            proposals_per_scene: 60,
            jitter_scale: 0.15,
            part_fraction: 0.2,
            background_fraction: 0.4,
            part_side_min: 0.55,
            part_side_max: 0.85,
            part_bonus: 0.7,
            feature_dim: 16,
            noise_sigma: 0.1,
            object_size_min: 0.2,
            object_size_max: 0.5,
            canvas_size: 1.0,
            seed: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("gen: {m}")));
        if self.num_classes == 0 {
            return err("num_classes must be >= 1");
        }
        if self.num_scenes == 0 {
            return err("num_scenes must be >= 1");
        }
        if self.min_objects == 0 || self.max_objects < self.min_objects {
            return err("objects per scene must satisfy 1 <= min_objects <= max_objects");
        }
        if self.proposals_per_scene < self.max_objects {
            return err("proposals_per_scene must be >= max_objects");
        }
        let frac_ok = |f: f64| (0.0..=1.0).contains(&f);
        if !frac_ok(self.part_fraction)
            || !frac_ok(self.background_fraction)
            || self.part_fraction + self.background_fraction > 1.0
        {
            return err("part_fraction and background_fraction must lie in [0,1] and sum to <= 1");
        }
        if !(self.part_side_min > 0.0
            && self.part_side_min <= self.part_side_max
            && self.part_side_max < 1.0)
        {
            return err("part sides must satisfy 0 < part_side_min <= part_side_max < 1");
        }
        if !(self.jitter_scale >= 0.0 && self.jitter_scale.is_finite()) {
            return err("jitter_scale must be finite and >= 0");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return err("noise_sigma must be finite and >= 0");
        }
        if !self.part_bonus.is_finite() {
            return err("part_bonus must be finite");
        }
        if !(self.canvas_size > 0.0 && self.canvas_size.is_finite()) {
            return err("canvas_size must be positive");
        }
        if !(self.object_size_min > 0.0
            && self.object_size_min <= self.object_size_max
            && self.object_size_max <= 1.0)
        {
            return err("object sizes must satisfy 0 < min <= max <= 1");
        }
        if self.feature_dim < self.num_classes {
            return err("feature_dim must be >= num_classes");
        }
        if self.part_fraction > 0.0 && self.feature_dim < 2 * self.num_classes {
            return err("feature_dim must be >= 2 * num_classes when part boxes are enabled");
        }
        Ok(())
    }

    /// Number of (jitter, part, background) proposals for a scene with
    /// `objects` ground-truth boxes.
    pub fn proposal_counts(&self, objects: usize) -> (usize, usize, usize) {
        let n = self.proposals_per_scene;
        let mut bg = (self.background_fraction * n as f64).round() as usize;
        let mut part = (self.part_fraction * n as f64).round() as usize;
        while n < objects + bg + part {
            if bg > 0 {
                bg -= 1;
            } else {
                part -= 1;
            }
        }
        (n - bg - part, part, bg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    Jitter { object: usize },
    Part { object: usize },
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// One synthetic image. Classes are zero-based; `y_img[c]` is 1 iff some
/// object has class `c`.
///
/// Snapshot field order: `id, gt, y_img, proposals, features, kinds,
/// relaxed_background`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: usize,
    pub gt: Vec<GtObject>,
    pub y_img: Vec<u8>,
    pub proposals: Vec<BBox>,
    /// `feature_dim × |R|`.
    pub features: Mat,
    pub kinds: Vec<ProposalKind>,
    /// Set when some background box could not be kept below the IoU limit.
    pub relaxed_background: bool,
}

impl Scene {
    pub fn num_classes(&self) -> usize {
        self.y_img.len()
    }

    pub fn num_proposals(&self) -> usize {
        self.proposals.len()
    }

    pub fn present_classes(&self) -> Vec<usize> {
        present_classes(&self.y_img)
    }

    pub fn gt_of_class(&self, class: usize) -> impl Iterator<Item = &BBox> {
        self.gt
            .iter()
            .filter(move |g| g.class == class)
            .map(|g| &g.bbox)
    }

    pub fn is_train(&self) -> bool {
        self.id % 2 == 0
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(format!("scene {}: {m}", self.id)));
        if self.proposals.is_empty() {
            return bad("no proposals".into());
        }
        if self.features.cols() != self.proposals.len() || self.kinds.len() != self.proposals.len()
        {
            return bad("proposal, kind and feature counts disagree".into());
        }
        let mut expect = vec![0u8; self.y_img.len()];
        for g in &self.gt {
            if g.class >= expect.len() {
                return bad(format!("class {} out of range", g.class));
            }
            expect[g.class] = 1;
        }
        if expect != self.y_img {
            return bad("y_img does not match ground truth".into());
        }
        if !self.features.is_finite() {
            return bad("non-finite features".into());
        }
        Ok(())
    }
}

pub fn present_classes(y_img: &[u8]) -> Vec<usize> {
    y_img
        .iter()
        .enumerate()
        .filter(|(_, &y)| y == 1)
        .map(|(c, _)| c)
        .collect()
}

/// Class prototypes followed by part signatures: `2C` (or `C` when parts are
/// disabled and the feature space is too small) orthonormal vectors.
pub fn class_directions(cfg: &GenConfig) -> Vec<Vec<f64>> {
    let count = if cfg.feature_dim >= 2 * cfg.num_classes {
        2 * cfg.num_classes
    } else {
        cfg.num_classes
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..cfg.feature_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn scene_rng(cfg: &GenConfig, scene_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(scene_index as u64);
    rng
}

fn gen_objects(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<Vec<GtObject>> {
    let s = cfg.canvas_size;
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<GtObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(0..cfg.num_classes);
        let mut best: Option<(f64, BBox)> = None;
        for _ in 0..PLACEMENT_RETRIES {
            let w = rng.random_range(cfg.object_size_min..=cfg.object_size_max) * s;
            let h = rng.random_range(cfg.object_size_min..=cfg.object_size_max) * s;
            let x = rng.random_range(0.0..=(s - w));
            let y = rng.random_range(0.0..=(s - h));
            let b = BBox::new(x, y, x + w, y + h)?;
            let overlap = objects.iter().map(|o| iou(&o.bbox, &b)).fold(0.0, f64::max);
            if best.as_ref().is_none_or(|(o, _)| overlap < *o) {
                best = Some((overlap, b));
            }
            if overlap <= 0.1 {
                break;
            }
        }
        let (_, bbox) = best.expect("at least one placement attempt");
        objects.push(GtObject { class, bbox });
    }
    Ok(objects)
}

fn jitter_box(cfg: &GenConfig, gt: &BBox, rng: &mut ChaCha8Rng) -> BBox {
    if cfg.jitter_scale == 0.0 {
        return *gt;
    }
    let normal = Normal::new(0.0, cfg.jitter_scale).expect("validated jitter scale");
    let (cx, cy) = gt.center();
    for _ in 0..PLACEMENT_RETRIES {
        let nx = cx + normal.sample(rng) * gt.width();
        let ny = cy + normal.sample(rng) * gt.height();
        let nw = gt.width() * normal.sample(rng).exp();
        let nh = gt.height() * normal.sample(rng).exp();
        let Some(b) = BBox::from_center(nx, ny, nw, nh)
            .ok()
            .and_then(|b| b.clip(0.0, cfg.canvas_size))
        else {
            continue;
        };
        if iou(&b, gt) >= JITTER_MIN_IOU {
            return b;
        }
    }
    *gt
}

fn part_box(cfg: &GenConfig, gt: &BBox, rng: &mut ChaCha8Rng) -> BBox {
    let fw = rng.random_range(cfg.part_side_min..=cfg.part_side_max);
    let fh = rng.random_range(cfg.part_side_min..=cfg.part_side_max);
    let w = gt.width() * fw;
    let h = gt.height() * fh;
    let x = gt.x1() + rng.random_range(0.0..=(gt.width() - w));
    let y = gt.y1() + rng.random_range(0.0..=(gt.height() - h));
    BBox::new(x, y, x + w, y + h).expect("strict sub-rectangle of a valid box")
}

/// Returns the box and whether it honors the background IoU limit.
fn background_box(cfg: &GenConfig, gt: &[GtObject], rng: &mut ChaCha8Rng) -> (BBox, bool) {
    let s = cfg.canvas_size;
    let mut best: Option<(f64, BBox)> = None;
    for _ in 0..PLACEMENT_RETRIES {
        let w = rng.random_range(0.05..=0.5) * s;
        let h = rng.random_range(0.05..=0.5) * s;
        let x = rng.random_range(0.0..=(s - w));
        let y = rng.random_range(0.0..=(s - h));
        let Ok(b) = BBox::new(x, y, x + w, y + h) else {
            continue;
        };
        let overlap = gt.iter().map(|g| iou(&g.bbox, &b)).fold(0.0, f64::max);
        if overlap < BACKGROUND_MAX_IOU {
            return (b, true);
        }
        if best.as_ref().is_none_or(|(o, _)| overlap < *o) {
            best = Some((overlap, b));
        }
    }
    (best.expect("at least one placement attempt").1, false)
}

/// Proposal boxes for a scene. The first `gt.len()` proposals are one jittered
/// copy per object, which guarantees an IoU >= 0.5 candidate for each.
/// Returns the boxes, their kinds and whether background placement had to be
/// relaxed.
pub fn gen_proposals(
    gt: &[GtObject],
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<BBox>, Vec<ProposalKind>, bool)> {
    if gt.is_empty() {
        return Err(Error::InvalidArgument(
            "gen_proposals needs at least one object".into(),
        ));
    }
    let (n_jit, n_part, n_bg) = cfg.proposal_counts(gt.len());
    let mut boxes = Vec::with_capacity(cfg.proposals_per_scene);
    let mut kinds = Vec::with_capacity(cfg.proposals_per_scene);
    for j in 0..n_jit {
        let object = if j < gt.len() {
            j
        } else {
            rng.random_range(0..gt.len())
        };
        boxes.push(jitter_box(cfg, &gt[object].bbox, rng));
        kinds.push(ProposalKind::Jitter { object });
    }
    for _ in 0..n_part {
        let object = rng.random_range(0..gt.len());
        boxes.push(part_box(cfg, &gt[object].bbox, rng));
        kinds.push(ProposalKind::Part { object });
    }
    let mut relaxed = false;
    for _ in 0..n_bg {
        let (b, ok) = background_box(cfg, gt, rng);
        relaxed |= !ok;
        boxes.push(b);
        kinds.push(ProposalKind::Background);
    }
    Ok((boxes, kinds, relaxed))
}

/// Feature matrix (`feature_dim × |R|`) for a scene's proposals.
pub fn featurize(
    gt: &[GtObject],
    proposals: &[BBox],
    kinds: &[ProposalKind],
    directions: &[Vec<f64>],
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Mat> {
    if cfg.feature_dim < cfg.num_classes {
        return Err(Error::Config(
            "gen: feature_dim must be >= num_classes".into(),
        ));
    }
    let c = cfg.num_classes;
    let mut feats = Mat::zeros(cfg.feature_dim, proposals.len());
    for (i, p) in proposals.iter().enumerate() {
        for g in gt {
            let o = iou(p, &g.bbox);
            if o > 0.0 {
                for (d, &v) in directions[g.class].iter().enumerate() {
                    feats.add_at(d, i, o * v);
                }
            }
        }
        if let ProposalKind::Part { object } = kinds[i] {
            if let Some(sig) = directions.get(c + gt[object].class) {
                for (d, &v) in sig.iter().enumerate() {
                    feats.add_at(d, i, cfg.part_bonus * v);
                }
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        for v in feats.data_mut() {
            *v += noise.sample(rng);
        }
    }
    Ok(feats)
}

fn gen_scene_with(cfg: &GenConfig, directions: &[Vec<f64>], scene_index: usize) -> Result<Scene> {
    let mut rng = scene_rng(cfg, scene_index);
    let gt = gen_objects(cfg, &mut rng)?;
    let (proposals, kinds, relaxed_background) = gen_proposals(&gt, cfg, &mut rng)?;
    let features = featurize(&gt, &proposals, &kinds, directions, cfg, &mut rng)?;
    let mut y_img = vec![0u8; cfg.num_classes];
    for g in &gt {
        y_img[g.class] = 1;
    }
    Ok(Scene {
        id: scene_index,
        gt,
        y_img,
        proposals,
        features,
        kinds,
        relaxed_background,
    })
}

pub fn gen_scene(cfg: &GenConfig, scene_index: usize) -> Result<Scene> {
    cfg.validate()?;
    gen_scene_with(cfg, &class_directions(cfg), scene_index)
}

/// A corpus of scenes. Even ids form the training split, odd ids the test
/// split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn generate(cfg: &GenConfig) -> Result<Self> {
        cfg.validate()?;
        let directions = class_directions(cfg);
        let scenes = (0..cfg.num_scenes)
            .into_par_iter()
            .map(|i| gen_scene_with(cfg, &directions, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { scenes })
    }

    pub fn num_classes(&self) -> usize {
        self.scenes.first().map_or(0, Scene::num_classes)
    }

    pub fn feature_dim(&self) -> usize {
        self.scenes.first().map_or(0, |s| s.features.rows())
    }

    pub fn train(&self) -> Vec<&Scene> {
        self.scenes.iter().filter(|s| s.is_train()).collect()
    }

    pub fn test(&self) -> Vec<&Scene> {
        self.scenes.iter().filter(|s| !s.is_train()).collect()
    }

    pub fn scene(&self, id: usize) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.id == id)
    }

    /// One JSON object per line, one line per scene.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for s in &self.scenes {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut scenes: Vec<Scene> = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let scene: Scene = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("line {}: {e}", n + 1)))?;
            scene.validate()?;
            if let Some(first) = scenes.first() {
                if first.num_classes() != scene.num_classes()
                    || first.features.rows() != scene.features.rows()
                {
                    return Err(Error::Dataset(format!(
                        "line {}: class count or feature dimension differs from first scene",
                        n + 1
                    )));
                }
            }
            scenes.push(scene);
        }
        if scenes.is_empty() {
            return Err(Error::Dataset("no scenes".into()));
        }
        Ok(Self { scenes })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            num_scenes: 20,
            ..GenConfig::default()
        }
    }

    #[test]
    fn label_vector_follows_ground_truth() {
        let cfg = GenConfig {
            num_classes: 3,
            min_objects: 1,
            max_objects: 1,
            feature_dim: 6,
            ..small()
        };
        for i in 0..50 {
            let s = gen_scene(&cfg, i).unwrap();
            let mut expect = vec![0u8; 3];
            expect[s.gt[0].class] = 1;
            assert_eq!(s.y_img, expect);
            if s.gt[0].class == 1 {
                assert_eq!(s.y_img, vec![0, 1, 0]);
            }
        }
    }

    #[test]
    fn scenes_are_deterministic() {
        let cfg = small();
        assert_eq!(gen_scene(&cfg, 7).unwrap(), gen_scene(&cfg, 7).unwrap());
        assert_ne!(gen_scene(&cfg, 7).unwrap(), gen_scene(&cfg, 8).unwrap());
        let a = Dataset::generate(&cfg).unwrap();
        assert_eq!(a.scenes[7], gen_scene(&cfg, 7).unwrap());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            GenConfig {
                num_scenes: 0,
                ..small()
            },
            GenConfig {
                canvas_size: 0.0,
                ..small()
            },
            GenConfig {
                feature_dim: 4,
                ..small()
            },
            GenConfig {
                part_fraction: 0.7,
                background_fraction: 0.5,
                ..small()
            },
            GenConfig {
                min_objects: 3,
                max_objects: 2,
                ..small()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
        let no_parts = GenConfig {
            part_fraction: 0.0,
            feature_dim: 5,
            ..small()
        };
        no_parts.validate().unwrap();
    }

    #[test]
    fn zero_jitter_and_no_parts_copy_ground_truth() {
        let cfg = GenConfig {
            jitter_scale: 0.0,
            part_fraction: 0.0,
            ..small()
        };
        for i in 0..10 {
            let s = gen_scene(&cfg, i).unwrap();
            for (b, k) in s.proposals.iter().zip(&s.kinds) {
                match k {
                    ProposalKind::Jitter { object } => assert_eq!(*b, s.gt[*object].bbox),
                    ProposalKind::Background => {}
                    ProposalKind::Part { .. } => panic!("parts disabled"),
                }
            }
        }
    }

    #[test]
    fn proposal_kinds_respect_their_overlap_rules() {
        let cfg = small();
        for i in 0..20 {
            let s = gen_scene(&cfg, i).unwrap();
            assert_eq!(s.num_proposals(), cfg.proposals_per_scene);
            for (o, g) in s.gt.iter().enumerate() {
                assert!(matches!(s.kinds[o], ProposalKind::Jitter { object } if object == o));
                assert!(iou(&s.proposals[o], &g.bbox) >= 0.5);
            }
            for (b, k) in s.proposals.iter().zip(&s.kinds) {
                match *k {
                    ProposalKind::Jitter { object } => {
                        assert!(iou(b, &s.gt[object].bbox) >= 0.5)
                    }
                    ProposalKind::Part { object } => {
                        let g = &s.gt[object].bbox;
                        assert!(iou(b, g) < 1.0);
                        assert!(b.x1() >= g.x1() && b.x2() <= g.x2());
                        assert!(b.y1() >= g.y1() && b.y2() <= g.y2());
                    }
                    ProposalKind::Background => {
                        if !s.relaxed_background {
                            assert!(s.gt.iter().all(|g| iou(b, &g.bbox) < 0.3));
                        }
                    }
                }
                assert!(b.x1() >= 0.0 && b.y1() >= 0.0 && b.x2() <= 1.0 && b.y2() <= 1.0);
            }
        }
    }

    #[test]
    fn noiseless_features_follow_prototypes() {
        let cfg = GenConfig {
            noise_sigma: 0.0,
            jitter_scale: 0.0,
            min_objects: 1,
            max_objects: 1,
            ..small()
        };
        let dirs = class_directions(&cfg);
        for i in 0..10 {
            let s = gen_scene(&cfg, i).unwrap();
            let proto = &dirs[s.gt[0].class];
            for (p, k) in s.kinds.iter().enumerate() {
                let f = s.features.col(p);
                match k {
                    ProposalKind::Jitter { .. } => {
                        for (a, b) in f.iter().zip(proto) {
                            assert!((a - b).abs() < 1e-12);
                        }
                    }
                    ProposalKind::Background => {
                        let o = iou(&s.proposals[p], &s.gt[0].bbox);
                        for (a, b) in f.iter().zip(proto) {
                            assert!((a - o * b).abs() < 1e-12);
                        }
                        if o == 0.0 {
                            assert!(f.iter().all(|&v| v == 0.0));
                        }
                    }
                    ProposalKind::Part { .. } => {}
                }
            }
        }
    }

    #[test]
    fn directions_are_orthonormal() {
        let cfg = small();
        let dirs = class_directions(&cfg);
        assert_eq!(dirs.len(), 2 * cfg.num_classes);
        for (i, a) in dirs.iter().enumerate() {
            for (j, b) in dirs.iter().enumerate() {
                let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn snapshot_round_trips_and_is_byte_stable() {
        let data = Dataset::generate(&GenConfig {
            num_scenes: 4,
            ..GenConfig::default()
        })
        .unwrap();
        let mut a = Vec::new();
        data.write_jsonl(&mut a).unwrap();
        let mut b = Vec::new();
        Dataset::generate(&GenConfig {
            num_scenes: 4,
            ..GenConfig::default()
        })
        .unwrap()
        .write_jsonl(&mut b)
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), 4);
        let back = Dataset::read_jsonl(&a[..]).unwrap();
        assert_eq!(back, data);

        let first = std::str::from_utf8(&a).unwrap().lines().next().unwrap();
        let keys = [
            "\"id\"",
            "\"gt\"",
            "\"y_img\"",
            "\"proposals\"",
            "\"features\"",
        ];
        let pos: Vec<usize> = keys.iter().map(|k| first.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn corrupt_snapshots_are_rejected() {
        let data = Dataset::generate(&GenConfig {
            num_scenes: 1,
            ..GenConfig::default()
        })
        .unwrap();
        let mut s = data.scenes[0].clone();
        s.y_img = vec![0; s.y_img.len()];
        let line = serde_json::to_string(&s).unwrap();
        assert!(Dataset::read_jsonl(line.as_bytes()).is_err());
        assert!(Dataset::read_jsonl(&b""[..]).is_err());
        assert!(Dataset::read_jsonl(&b"{\"id\":1}\n"[..]).is_err());
    }
}
