//! Shared fixtures for the integration tests and the acceptance runner:
//! small random instances, brute-force reference implementations and
//! full-chain loss closures for finite-difference checks.

#![allow(dead_code)]

use cbl_core::crd::{crd_loss, PositiveSet};
use cbl_core::midn::{image_grad_to_midn, midn_backward, midn_forward, midn_loss, MidnParams};
use cbl_core::msr::{rcnn_cls_loss, rcnn_reg_loss, Assignment, MsrConfig, RcnnLabels, Seed};
use cbl_core::numcore::{fd_gradcheck, AffineParams, ParamSet};
use cbl_core::oic::{head_probs, oic_loss, RefineLabels};
use cbl_core::{BBox, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- instances

/// Box on a small integer grid. Integer corners keep every IoU an exact
/// ratio of integers, so the oracle and the library agree bit for bit and
/// ties (including IoU exactly 0.5) come up often.
pub fn grid_box(rng: &mut impl Rng) -> BBox {
    let x1 = rng.random_range(0..8) as f64;
    let y1 = rng.random_range(0..8) as f64;
    let w = rng.random_range(1..=5) as f64;
    let h = rng.random_range(1..=5) as f64;
    BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

pub fn grid_boxes(rng: &mut impl Rng, n: usize) -> Vec<BBox> {
    (0..n).map(|_| grid_box(rng)).collect()
}

/// Scores in eighths of [0, 1]; exact in binary and tie-prone.
pub fn coarse_score(rng: &mut impl Rng) -> f64 {
    rng.random_range(0..=8) as f64 / 8.0
}

pub fn coarse_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| coarse_score(rng))
}

/// Image labels with at least one present class.
pub fn labels(rng: &mut impl Rng, c: usize) -> Vec<u8> {
    let mut y: Vec<u8> = (0..c).map(|_| u8::from(rng.random_bool(0.5))).collect();
    if y.iter().all(|&v| v == 0) {
        y[rng.random_range(0..c)] = 1;
    }
    y
}

pub fn gaussian_mat(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let normal = rand_distr::Normal::new(0.0, std).unwrap();
    Mat::from_fn(rows, cols, |_, _| rng.sample(normal))
}

pub fn gaussian_affine(rng: &mut impl Rng, out: usize, inp: usize, std: f64) -> AffineParams {
    AffineParams::gaussian(out, inp, std, rng)
}

// ---------------------------------------------------------------- oracles

pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let area = |r: &BBox| (r.x2() - r.x1()) * (r.y2() - r.y1());
    inter / (area(a) + area(b) - inter)
}

/// `j` is visited before `i`: higher score, or equal score and lower index.
fn outranks(scores: &[f64], j: usize, i: usize) -> bool {
    scores[j] > scores[i] || (scores[j] == scores[i] && j < i)
}

/// The unique top element: outranks every other index.
pub fn oracle_argmax(scores: &[f64]) -> usize {
    (0..scores.len())
        .find(|&i| (0..scores.len()).all(|j| j == i || outranks(scores, i, j)))
        .unwrap()
}

/// NMS by its fixed-point characterization: the kept set `S` is the only
/// subset of `candidates` in which an element belongs to `S` exactly when no
/// higher ranked member of `S` overlaps it by more than `thresh`. Found by
/// enumerating every subset; returned in rank order.
pub fn oracle_nms(boxes: &[BBox], scores: &[f64], candidates: &[usize], thresh: f64) -> Vec<usize> {
    let m = candidates.len();
    let mut found: Option<Vec<usize>> = None;
    for mask in 0u32..(1 << m) {
        let inside = |k: usize| mask & (1 << k) != 0;
        let consistent = (0..m).all(|a| {
            let i = candidates[a];
            let blocked = (0..m).any(|b| {
                let j = candidates[b];
                inside(b) && outranks(scores, j, i) && oracle_iou(&boxes[i], &boxes[j]) > thresh
            });
            inside(a) == !blocked
        });
        if consistent {
            assert!(found.is_none(), "NMS fixed point must be unique");
            found = Some(
                (0..m)
                    .filter(|&k| inside(k))
                    .map(|k| candidates[k])
                    .collect(),
            );
        }
    }
    let mut kept = found.expect("NMS fixed point exists");
    kept.sort_by(|&a, &b| {
        if outranks(scores, a, b) {
            std::cmp::Ordering::Less
        } else {
            std::cmp::Ordering::Greater
        }
    });
    kept
}

/// Top-scoring pseudo labels, computed proposal by proposal.
pub fn oracle_refine_labels(scores: &Mat, y: &[u8], boxes: &[BBox], thresh: f64) -> RefineLabels {
    let c = y.len();
    let present: Vec<usize> = (0..c).filter(|&k| y[k] == 1).collect();
    let seeds: Vec<(usize, usize)> = present
        .iter()
        .map(|&k| (k, oracle_argmax(scores.row(k))))
        .collect();
    let mut labels = Vec::new();
    let mut weights = Vec::new();
    for i in 0..boxes.len() {
        // a seed proposal keeps the lowest class it seeds
        if let Some(&(k, _)) = seeds.iter().find(|&&(_, p)| p == i) {
            labels.push(k);
            weights.push(scores.get(k, i));
            continue;
        }
        let overlaps: Vec<f64> = seeds
            .iter()
            .map(|&(_, p)| oracle_iou(&boxes[i], &boxes[p]))
            .collect();
        let best_o = overlaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s = overlaps.iter().position(|&o| o == best_o).unwrap();
        let (k, p) = seeds[s];
        labels.push(if best_o > thresh { k } else { c });
        weights.push(scores.get(k, p));
    }
    RefineLabels {
        labels,
        weights,
        seeds,
    }
}

/// Positive set as the largest subset whose every element is the anchor or
/// overlaps it by more than `tau`.
pub fn oracle_positive_set(x_wet: &Mat, boxes: &[BBox], class: usize, tau: f64) -> PositiveSet {
    let row = x_wet.row(class);
    let anchor = oracle_argmax(row);
    let n = boxes.len();
    let ok = |i: usize| i == anchor || oracle_iou(&boxes[i], &boxes[anchor]) > tau;
    let mut best: Vec<usize> = vec![];
    for mask in 0u32..(1 << n) {
        let subset: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        if subset.iter().all(|&i| ok(i)) && subset.len() > best.len() {
            best = subset;
        }
    }
    PositiveSet {
        class,
        anchor,
        members: best,
        weight: row[anchor],
    }
}

/// Smallest `k >= 1` with `k >= μ_n · n` (ties absorbed at 1e-9).
fn oracle_search_count(n: usize, mu_n: f64) -> usize {
    (1..=n)
        .find(|&k| k as f64 >= mu_n * n as f64 - 1e-9)
        .unwrap_or(n)
}

pub fn oracle_mine_seeds(x_msr: &Mat, boxes: &[BBox], y: &[u8], cfg: &MsrConfig) -> Vec<Seed> {
    let n = boxes.len();
    let mut seeds = Vec::new();
    for class in (0..y.len()).filter(|&k| y[k] == 1) {
        let row = x_msr.row(class);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let k = oracle_search_count(n, cfg.mu_n);
        // members of the top k by rank that clear the score floor
        let candidates: Vec<usize> = (0..n)
            .filter(|&i| (0..n).filter(|&j| outranks(row, j, i)).count() < k)
            .filter(|&i| row[i] >= cfg.mu_s * max)
            .collect();
        let mut kept = oracle_nms(boxes, row, &candidates, cfg.nms_thresh);
        if kept.is_empty() {
            kept.push(oracle_argmax(row));
        }
        for p in kept {
            seeds.push(Seed {
                proposal: p,
                class,
                score: row[p],
                agreement: 0.0,
                confidence: row[p],
            });
        }
    }
    seeds
}

pub fn oracle_targets(p: &BBox, g: &BBox) -> [f64; 4] {
    let pw = p.x2() - p.x1();
    let ph = p.y2() - p.y1();
    let gw = g.x2() - g.x1();
    let gh = g.y2() - g.y1();
    [
        ((g.x1() + g.x2()) / 2.0 - (p.x1() + p.x2()) / 2.0) / pw,
        ((g.y1() + g.y2()) / 2.0 - (p.y1() + p.y2()) / 2.0) / ph,
        (gw / pw).ln(),
        (gh / ph).ln(),
    ]
}

/// Each proposal goes to the seed with the highest IoU, then the highest
/// confidence, then the earliest position.
pub fn oracle_rcnn_labels(seeds: &[Seed], boxes: &[BBox], cfg: &MsrConfig) -> RcnnLabels {
    let mut assignments = Vec::new();
    let mut weights = Vec::new();
    let mut targets = Vec::new();
    for p in boxes {
        let key = |s: &Seed| (oracle_iou(p, &boxes[s.proposal]), s.confidence);
        let best = (0..seeds.len())
            .find(|&a| {
                seeds.iter().all(|other| {
                    let (o1, c1) = key(&seeds[a]);
                    let (o2, c2) = key(other);
                    o1 > o2 || (o1 == o2 && c1 >= c2)
                }) && (0..a).all(|b| key(&seeds[b]) != key(&seeds[a]))
            })
            .unwrap();
        let seed = &seeds[best];
        let o = oracle_iou(p, &boxes[seed.proposal]);
        if o > cfg.positive_thresh {
            assignments.push(Assignment::Positive(seed.class));
            weights.push(seed.confidence);
            targets.push(Some(oracle_targets(p, &boxes[seed.proposal])));
        } else if o < cfg.ignore_thresh {
            assignments.push(Assignment::Ignore);
            weights.push(0.0);
            targets.push(None);
        } else {
            assignments.push(Assignment::Background);
            weights.push(seed.confidence);
            targets.push(None);
        }
    }
    RcnnLabels {
        assignments,
        weights,
        targets,
    }
}

pub fn same_targets(a: &RcnnLabels, b: &RcnnLabels) -> bool {
    a.assignments == b.assignments
        && a.weights == b.weights
        && a.targets.iter().zip(&b.targets).all(|(x, y)| match (x, y) {
            (Some(x), Some(y)) => x.iter().zip(y).all(|(u, v)| (u - v).abs() < 1e-12),
            (None, None) => true,
            _ => false,
        })
}

// ---------------------------------------------------------------- gradients

pub const FD_EPS: f64 = 1e-4;

/// Small random shapes: `C <= 4`, `|R| <= 12`.
pub fn small_shape(rng: &mut impl Rng) -> (usize, usize, usize) {
    (
        rng.random_range(1..=4),
        rng.random_range(2..=12),
        rng.random_range(2..=6),
    )
}

fn flat_with_hidden<P: ParamSet>(p: &P, hidden: &Mat) -> Vec<f64> {
    let mut v = p.flatten();
    v.extend_from_slice(hidden.data());
    v
}

fn split<P: ParamSet + Clone>(template: &P, hidden: &Mat, flat: &[f64]) -> (P, Mat) {
    let mut p = template.clone();
    let n = p.num_params();
    p.load_flat(&flat[..n]).unwrap();
    let h = Mat::from_vec(hidden.rows(), hidden.cols(), flat[n..].to_vec()).unwrap();
    (p, h)
}

/// Both MIDN branches as one flat parameter vector.
#[derive(Clone)]
pub struct MidnHead(pub MidnParams);

/// Position of the detection-branch bias in `MidnHead::flatten()`. The
/// proposal softmax is shift invariant, so its gradient is identically zero
/// and central differences there only see roundoff.
fn det_bias_range(p: &MidnHead) -> std::ops::Range<usize> {
    let end = p.0.cls.num_params() + p.0.det.num_params();
    end - p.0.det.bias.len()..end
}

/// Finite differences on every coordinate except `skip`, whose analytic
/// gradient must instead vanish to 1e-12.
fn gradcheck_skipping(
    mut loss: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    skip: std::ops::Range<usize>,
) -> f64 {
    if analytic[skip.clone()].iter().any(|g| g.abs() > 1e-12) {
        return f64::INFINITY;
    }
    let keep: Vec<usize> = (0..theta.len()).filter(|i| !skip.contains(i)).collect();
    let reduced: Vec<f64> = keep.iter().map(|&i| theta[i]).collect();
    let reduced_grad: Vec<f64> = keep.iter().map(|&i| analytic[i]).collect();
    let mut full = theta.to_vec();
    let wrapped = |r: &[f64]| {
        for (&i, &v) in keep.iter().zip(r) {
            full[i] = v;
        }
        loss(&full)
    };
    fd_gradcheck(wrapped, &reduced, &reduced_grad, FD_EPS).unwrap()
}

impl ParamSet for MidnHead {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.0.cls.tensors();
        v.extend(self.0.det.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let MidnParams { cls, det } = &mut self.0;
        let mut v = cls.tensors_mut();
        v.extend(det.tensors_mut());
        v
    }
}

/// Worst relative error of the MIDN loss gradient, taken with respect to
/// both branches and the hidden features.
pub fn check_midn(rng: &mut impl Rng) -> f64 {
    let (c, n, h) = small_shape(rng);
    let p = MidnHead(MidnParams {
        cls: gaussian_affine(rng, c, h, 0.8),
        det: gaussian_affine(rng, c, h, 0.8),
    });
    let hidden = gaussian_mat(rng, h, n, 1.0);
    let y = labels(rng, c);
    let scores = midn_forward(&p.0, &hidden).unwrap();
    let (_, g_img) = midn_loss(&scores.x_img, &y).unwrap();
    let g = midn_backward(&p.0, &hidden, &scores, &image_grad_to_midn(&g_img, n)).unwrap();
    let analytic = flat_with_hidden(&MidnHead(g.params), &g.hidden);
    let loss = |flat: &[f64]| {
        let (q, hd) = split(&p, &hidden, flat);
        midn_loss(&midn_forward(&q.0, &hd).unwrap().x_img, &y)
            .unwrap()
            .0
    };
    gradcheck_skipping(
        loss,
        &flat_with_hidden(&p, &hidden),
        &analytic,
        det_bias_range(&p),
    )
}

/// Refinement head loss with labels from random scores.
pub fn check_oic(rng: &mut impl Rng) -> f64 {
    let (c, n, h) = small_shape(rng);
    let head = gaussian_affine(rng, c + 1, h, 0.8);
    let hidden = gaussian_mat(rng, h, n, 1.0);
    let y = labels(rng, c);
    let boxes = grid_boxes(rng, n);
    let prev = gaussian_mat(rng, c, n, 1.0);
    let lbl = cbl_core::oic::gen_refine_labels(&prev, &y, &boxes, 0.5).unwrap();
    let probs = head_probs(&head, &hidden).unwrap();
    let (_, g_logits) = oic_loss(&probs, &lbl).unwrap();
    let g = head.backward(&hidden, &g_logits).unwrap();
    let analytic = flat_with_hidden(&g.params(), &g.input);
    let loss = |flat: &[f64]| {
        let (q, hd) = split(&head, &hidden, flat);
        oic_loss(&head_probs(&q, &hd).unwrap(), &lbl).unwrap().0
    };
    fd_gradcheck(loss, &flat_with_hidden(&head, &hidden), &analytic, FD_EPS).unwrap()
}

/// CRD loss through the MIDN forward pass; teacher scores are constants.
pub fn check_crd(rng: &mut impl Rng) -> f64 {
    let (c, n, h) = small_shape(rng);
    let p = MidnHead(MidnParams {
        cls: gaussian_affine(rng, c, h, 0.8),
        det: gaussian_affine(rng, c, h, 0.8),
    });
    let hidden = gaussian_mat(rng, h, n, 1.0);
    let y = labels(rng, c);
    let boxes = grid_boxes(rng, n);
    // teacher rows drawn as C+1 softmax columns
    let x_wet = cbl_core::numcore::softmax_over_classes(&gaussian_mat(rng, c + 1, n, 2.0));
    let tau = rng.random_range(0.0..1.0);
    let present: Vec<usize> = (0..c).filter(|&k| y[k] == 1).collect();
    let sets = cbl_core::crd::build_positive_sets(&x_wet, &boxes, &present, tau).unwrap();
    let temperature = if rng.random_bool(0.5) {
        1.0
    } else {
        rng.random_range(0.2..3.0)
    };
    let scores = midn_forward(&p.0, &hidden).unwrap();
    let (_, g_midn) = crd_loss(&sets, &scores.x_midn, &x_wet, temperature).unwrap();
    let g = midn_backward(&p.0, &hidden, &scores, &g_midn).unwrap();
    let analytic = flat_with_hidden(&MidnHead(g.params), &g.hidden);
    let loss = |flat: &[f64]| {
        let (q, hd) = split(&p, &hidden, flat);
        let x = midn_forward(&q.0, &hd).unwrap().x_midn;
        crd_loss(&sets, &x, &x_wet, temperature).unwrap().0
    };
    gradcheck_skipping(
        loss,
        &flat_with_hidden(&p, &hidden),
        &analytic,
        det_bias_range(&p),
    )
}

fn random_rcnn_labels(rng: &mut impl Rng, c: usize, n: usize) -> RcnnLabels {
    let boxes = grid_boxes(rng, n);
    let y = labels(rng, c);
    let scores = coarse_mat(rng, c, n);
    let cfg = MsrConfig {
        mu_n: 0.5,
        ..MsrConfig::default()
    };
    let mut seeds = cbl_core::msr::mine_seeds(&scores, &boxes, &y, &cfg).unwrap();
    for s in &mut seeds {
        s.confidence = rng.random_range(0.1..2.0);
    }
    cbl_core::msr::gen_rcnn_labels(&seeds, &boxes, &cfg).unwrap()
}

pub fn check_cls(rng: &mut impl Rng) -> f64 {
    let (c, n, h) = small_shape(rng);
    let head = gaussian_affine(rng, c + 1, h, 0.8);
    let hidden = gaussian_mat(rng, h, n, 1.0);
    let lbl = random_rcnn_labels(rng, c, n);
    let (_, g_logits) = rcnn_cls_loss(&head_probs(&head, &hidden).unwrap(), &lbl).unwrap();
    let g = head.backward(&hidden, &g_logits).unwrap();
    let analytic = flat_with_hidden(&g.params(), &g.input);
    let loss = |flat: &[f64]| {
        let (q, hd) = split(&head, &hidden, flat);
        rcnn_cls_loss(&head_probs(&q, &hd).unwrap(), &lbl)
            .unwrap()
            .0
    };
    fd_gradcheck(loss, &flat_with_hidden(&head, &hidden), &analytic, FD_EPS).unwrap()
}

pub fn check_reg(rng: &mut impl Rng) -> f64 {
    let (c, n, h) = small_shape(rng);
    // large enough outputs that both smooth-L1 branches show up
    let head = gaussian_affine(rng, 4 * c, h, 1.0);
    let hidden = gaussian_mat(rng, h, n, 1.0);
    let lbl = random_rcnn_labels(rng, c, n);
    let (_, g_out) = rcnn_reg_loss(&head.forward(&hidden).unwrap(), &lbl).unwrap();
    let g = head.backward(&hidden, &g_out).unwrap();
    let analytic = flat_with_hidden(&g.params(), &g.input);
    let loss = |flat: &[f64]| {
        let (q, hd) = split(&head, &hidden, flat);
        rcnn_reg_loss(&q.forward(&hd).unwrap(), &lbl).unwrap().0
    };
    fd_gradcheck(loss, &flat_with_hidden(&head, &hidden), &analytic, FD_EPS).unwrap()
}

// ---------------------------------------------------------------- oracle cases

fn mismatch<T: std::fmt::Debug>(op: &str, got: T, want: T) -> Result<(), String> {
    Err(format!("{op}: got {got:?}, want {want:?}"))
}

/// `|R| <= 8` instance sizes.
fn small_n(rng: &mut impl Rng) -> usize {
    rng.random_range(1..=8)
}

fn some_thresh(rng: &mut impl Rng) -> f64 {
    [0.0, 0.1, 0.3, 0.5, 0.7, 1.0][rng.random_range(0..6)]
}

pub fn nms_case(rng: &mut impl Rng) -> Result<(), String> {
    let n = small_n(rng);
    let boxes = grid_boxes(rng, n);
    let scores: Vec<f64> = (0..n).map(|_| coarse_score(rng)).collect();
    let thresh = some_thresh(rng);
    let all: Vec<usize> = (0..n).collect();
    let want = oracle_nms(&boxes, &scores, &all, thresh);
    let got = cbl_core::geometry::nms(&boxes, &scores, thresh).unwrap();
    if got != want {
        return mismatch("nms", got, want);
    }
    let subset: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.6)).collect();
    let want = oracle_nms(&boxes, &scores, &subset, thresh);
    let got = cbl_core::geometry::nms_subset(&boxes, &scores, &subset, thresh);
    if got != want {
        return mismatch("nms_subset", got, want);
    }
    Ok(())
}

pub fn refine_case(rng: &mut impl Rng) -> Result<(), String> {
    let n = small_n(rng);
    let c = rng.random_range(1..=4);
    let boxes = grid_boxes(rng, n);
    let y = labels(rng, c);
    // MIDN-shaped (C rows) or classifier-shaped (C+1 rows) scores
    let rows = c + usize::from(rng.random_bool(0.5));
    let scores = coarse_mat(rng, rows, n);
    let thresh = some_thresh(rng);
    let want = oracle_refine_labels(&scores, &y, &boxes, thresh);
    let got = cbl_core::oic::gen_refine_labels(&scores, &y, &boxes, thresh).unwrap();
    if got != want {
        return mismatch("gen_refine_labels", got, want);
    }
    Ok(())
}

pub fn positive_set_case(rng: &mut impl Rng) -> Result<(), String> {
    let n = small_n(rng);
    let c = rng.random_range(1..=4);
    let boxes = grid_boxes(rng, n);
    let x_wet = coarse_mat(rng, c + 1, n);
    let class = rng.random_range(0..c);
    let tau = some_thresh(rng);
    let want = oracle_positive_set(&x_wet, &boxes, class, tau);
    let got = cbl_core::crd::build_positive_set(&x_wet, &boxes, class, tau).unwrap();
    if got != want {
        return mismatch("build_positive_set", got, want);
    }
    Ok(())
}

pub fn random_msr_config(rng: &mut impl Rng) -> MsrConfig {
    MsrConfig {
        mu_s: [0.0, 0.5, 0.7, 0.95, 1.0][rng.random_range(0..5)],
        mu_n: [0.05, 0.2, 0.5, 1.0][rng.random_range(0..4)],
        nms_thresh: some_thresh(rng),
        positive_thresh: [0.3, 0.5, 0.7][rng.random_range(0..3)],
        ignore_thresh: [0.0, 0.1, 0.2][rng.random_range(0..3)],
        ..MsrConfig::default()
    }
}

pub fn mine_seeds_case(rng: &mut impl Rng) -> Result<(), String> {
    let n = small_n(rng);
    let c = rng.random_range(1..=4);
    let boxes = grid_boxes(rng, n);
    let y = labels(rng, c);
    let x_msr = coarse_mat(rng, c + 1, n);
    let cfg = random_msr_config(rng);
    let want = oracle_mine_seeds(&x_msr, &boxes, &y, &cfg);
    let got = cbl_core::msr::mine_seeds(&x_msr, &boxes, &y, &cfg).unwrap();
    if got != want {
        return mismatch("mine_seeds", got, want);
    }
    Ok(())
}

pub fn rcnn_case(rng: &mut impl Rng) -> Result<(), String> {
    let n = small_n(rng);
    let c = rng.random_range(1..=4);
    let boxes = grid_boxes(rng, n);
    let cfg = random_msr_config(rng);
    let seeds: Vec<Seed> = (0..rng.random_range(1..=4))
        .map(|_| {
            let score = coarse_score(rng);
            Seed {
                proposal: rng.random_range(0..n),
                class: rng.random_range(0..c),
                score,
                agreement: 0.0,
                // coarse so equal-IoU seeds also tie on confidence sometimes
                confidence: score * [1.0, 1.5, 2.0][rng.random_range(0..3)],
            }
        })
        .collect();
    let want = oracle_rcnn_labels(&seeds, &boxes, &cfg);
    let got = cbl_core::msr::gen_rcnn_labels(&seeds, &boxes, &cfg).unwrap();
    if !same_targets(&got, &want) {
        return mismatch("gen_rcnn_labels", got, want);
    }
    Ok(())
}

pub type Case = fn(&mut ChaCha8Rng) -> Result<(), String>;

pub const ORACLE_CASES: &[(&str, Case)] = &[
    ("gen_refine_labels", refine_case),
    ("build_positive_set", positive_set_case),
    ("mine_seeds", mine_seeds_case),
    ("gen_rcnn_labels", rcnn_case),
    ("nms", nms_case),
];

pub const GRADIENT_CASES: &[(&str, fn(&mut ChaCha8Rng) -> f64)] = &[
    ("L_midn", check_midn),
    ("L_oic", check_oic),
    ("L_crd", check_crd),
    ("L_cls", check_cls),
    ("L_reg", check_reg),
];

// ---------------------------------------------------------------- teacher algebra

use cbl_core::model::{ModelDims, StudentParams};
use cbl_core::wet::{
    aema_update, ema_update, wema_update, wet_update, EmaConfig, EmaMode, WetParams,
};

fn max_abs_diff<P: ParamSet>(a: &P, b: &P) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Weighted update on random heads: returned coefficients sum to one.
pub fn wema_sum_case(rng: &mut impl Rng) -> Result<(), String> {
    let alpha = rng.random_range(0.0..=1.0);
    let k = rng.random_range(1..=6);
    let mut t = gaussian_affine(rng, 3, 2, 1.0);
    let heads: Vec<AffineParams> = (0..k).map(|_| gaussian_affine(rng, 3, 2, 1.0)).collect();
    let cls = gaussian_affine(rng, 3, 2, 1.0);
    let refs: Vec<&AffineParams> = heads.iter().collect();
    let c = wema_update(&mut t, &refs, &cls, alpha).map_err(|e| e.to_string())?;
    let sum = c.teacher + c.cls + k as f64 * c.per_oic;
    if (sum - 1.0).abs() > 1e-12 {
        return Err(format!("coefficients sum to {sum} at alpha {alpha}, K {k}"));
    }
    Ok(())
}

/// With every student equal, the averaged and weighted rules collapse to
/// the plain EMA.
pub fn equal_students_case(rng: &mut impl Rng) -> Result<(), String> {
    let alpha = rng.random_range(0.0..=1.0);
    let k = rng.random_range(1..=6);
    let t0 = gaussian_affine(rng, 4, 3, 1.0);
    let s = gaussian_affine(rng, 4, 3, 1.0);
    let mut plain = t0.clone();
    ema_update(&mut plain, &s, alpha).unwrap();
    let same: Vec<&AffineParams> = (0..k).map(|_| &s).collect();
    let mut weighted = t0.clone();
    wema_update(&mut weighted, &same, &s, alpha).unwrap();
    let mut averaged = t0.clone();
    aema_update(&mut averaged, &same, alpha).unwrap();
    for (name, got) in [("weighted", &weighted), ("average", &averaged)] {
        let d = max_abs_diff(got, &plain);
        if d > 1e-12 {
            return Err(format!("{name} differs from plain EMA by {d:e}"));
        }
    }
    Ok(())
}

/// Student combination each mode's teacher head converges to.
fn head_target(s: &StudentParams, mode: EmaMode) -> AffineParams {
    let mean = |heads: &[&AffineParams]| {
        let mut m = AffineParams::zeros(heads[0].out_dim(), heads[0].in_dim());
        let flat: Vec<f64> = (0..m.num_params())
            .map(|j| heads.iter().map(|h| h.flatten()[j]).sum::<f64>() / heads.len() as f64)
            .collect();
        m.load_flat(&flat).unwrap();
        m
    };
    let oic: Vec<&AffineParams> = s.oic.iter().collect();
    match mode {
        EmaMode::SingleLastOic => s.oic.last().unwrap().clone(),
        EmaMode::SingleCls => s.rcnn_cls.clone(),
        EmaMode::Average => {
            let mut all = oic.clone();
            all.push(&s.rcnn_cls);
            mean(&all)
        }
        EmaMode::Weighted => mean(&[&mean(&oic), &s.rcnn_cls]),
    }
}

/// Frozen student: after `N` updates every teacher coordinate sits at
/// `α^N` times its initial distance from the target.
pub fn geometric_case(rng: &mut impl Rng) -> Result<(), String> {
    let modes = [
        EmaMode::SingleLastOic,
        EmaMode::SingleCls,
        EmaMode::Average,
        EmaMode::Weighted,
    ];
    let mode = modes[rng.random_range(0..4)];
    let alpha = [0.5, 0.9, 0.99, 0.999][rng.random_range(0..4)];
    let steps = rng.random_range(1..=60);
    let dims = ModelDims {
        feature_dim: 3,
        hidden_dim: 4,
        num_classes: 2,
        num_oic: rng.random_range(1..=4),
    };
    let student = StudentParams::init(&dims, rng);
    let mut teacher = WetParams {
        adapter: gaussian_affine(rng, 4, 3, 1.0),
        head: gaussian_affine(rng, 3, 4, 1.0),
    };
    let target = WetParams {
        adapter: student.adapter.clone(),
        head: head_target(&student, mode),
    };
    let start: Vec<f64> = teacher.flatten();
    let cfg = EmaConfig { alpha, mode };
    for _ in 0..steps {
        wet_update(&mut teacher, &student, &cfg).unwrap();
    }
    let rate = alpha.powi(steps);
    for ((now, t0), goal) in teacher.flatten().iter().zip(&start).zip(target.flatten()) {
        let want = goal + rate * (t0 - goal);
        if (now - want).abs() > 1e-9 {
            return Err(format!(
                "{mode:?} alpha {alpha} N {steps}: {now} vs closed form {want}"
            ));
        }
    }
    Ok(())
}

pub const TEACHER_CASES: &[(&str, Case)] = &[
    ("coefficient sum", wema_sum_case),
    ("equal-student reductions", equal_students_case),
    ("geometric convergence", geometric_case),
];
