//! Evaluation protocol: class-aware greedy matching, Recall@100 at IoU
//! 0.4/0.5/0.6, mAP@0.5 with all-point PR interpolation, and the
//! seen/unseen harmonic-mean aggregation for the generalized settings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{ClassSplit, Dataset, ImageRecord, InstanceAnnotation, Segmentation};
use crate::maskgeom::{box_iou, mask_iou, BinaryMask, BoundingBox};

pub const DEFAULT_IOU_THRESHOLDS: [f64; 3] = [0.4, 0.5, 0.6];
pub const DEFAULT_TOP_K: usize = 100;
pub const MAP_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction references unknown image {0}")]
    UnknownImage(u64),
    #[error("prediction references unknown category {0}")]
    UnknownCategory(u64),
    #[error("segmentation task but prediction on image {0} has no mask")]
    MissingPredictionMask(u64),
    #[error("segmentation task but ground-truth annotation {0} has no mask")]
    MissingGtMask(u64),
    #[error("bad segmentation on image {image_id}: {message}")]
    BadMask { image_id: u64, message: String },
    #[error("no ground truth in scope: {0}")]
    NoGroundTruth(String),
    #[error("invalid prediction score {0}")]
    BadScore(f64),
    #[error("prediction has degenerate bbox [{0}, {1}, {2}, {3}]")]
    BadBox(f64, f64, f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detection,
    Segmentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    UnseenOnly,
    Generalized,
}

/// One of the four evaluation settings ZSD / ZSI / GZSD / GZSI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSetting {
    pub task: Task,
    pub regime: Regime,
}

impl EvalSetting {
    pub const ZSD: Self = Self { task: Task::Detection, regime: Regime::UnseenOnly };
    pub const ZSI: Self = Self { task: Task::Segmentation, regime: Regime::UnseenOnly };
    pub const GZSD: Self = Self { task: Task::Detection, regime: Regime::Generalized };
    pub const GZSI: Self = Self { task: Task::Segmentation, regime: Regime::Generalized };

    pub fn from_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "zsd" => Some(Self::ZSD),
            "zsi" => Some(Self::ZSI),
            "gzsd" => Some(Self::GZSD),
            "gzsi" => Some(Self::GZSI),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.task, self.regime) {
            (Task::Detection, Regime::UnseenOnly) => "zsd",
            (Task::Segmentation, Regime::UnseenOnly) => "zsi",
            (Task::Detection, Regime::Generalized) => "gzsd",
            (Task::Segmentation, Regime::Generalized) => "gzsi",
        }
    }
}

/// Scored detection/segmentation hypothesis, COCO results-file shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: u64,
    pub category_id: u64,
    pub score: f64,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<Segmentation>,
}

impl Prediction {
    pub fn bounding_box(&self) -> Result<BoundingBox, MetricsError> {
        BoundingBox::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
            .map_err(|_| MetricsError::BadBox(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3]))
    }
}

/// Parse a COCO results JSON array.
pub fn parse_predictions(raw: &[u8]) -> Result<Vec<Prediction>, serde_json::Error> {
    serde_json::from_slice(raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IouKind {
    Box,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub pred_idx: usize,
    pub gt_idx: usize,
    pub iou: f64,
}

/// Greedy matching: predictions in descending score order (stable on ties)
/// each take the unmatched same-category ground truth of highest IoU >= t.
pub fn match_greedy(
    preds: &[Prediction],
    gts: &[InstanceAnnotation],
    threshold: f64,
    kind: IouKind,
    image: &ImageRecord,
) -> Result<Vec<MatchedPair>, MetricsError> {
    let iou = iou_matrix(preds, gts, kind, image)?;
    let order = score_order(preds);
    let cat_p: Vec<u64> = preds.iter().map(|p| p.category_id).collect();
    let cat_g: Vec<u64> = gts.iter().map(|g| g.category_id).collect();
    Ok(match_on_matrix(&iou, &order, &cat_p, &cat_g, threshold))
}

/// Indices of `preds` sorted by descending score, ties kept in input order.
fn score_order(preds: &[Prediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b].score.partial_cmp(&preds[a].score).unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

fn match_on_matrix(
    iou: &[Vec<f64>],
    pred_order: &[usize],
    pred_cat: &[u64],
    gt_cat: &[u64],
    threshold: f64,
) -> Vec<MatchedPair> {
    let mut gt_taken = vec![false; gt_cat.len()];
    let mut matches = Vec::new();
    for &p in pred_order {
        let mut best: Option<(usize, f64)> = None;
        for (g, &cat) in gt_cat.iter().enumerate() {
            if gt_taken[g] || cat != pred_cat[p] {
                continue;
            }
            let v = iou[p][g];
            if v >= threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            gt_taken[g] = true;
            matches.push(MatchedPair { pred_idx: p, gt_idx: g, iou: v });
        }
    }
    matches
}

fn decode_gt_mask(gt: &InstanceAnnotation, image: &ImageRecord) -> Result<BinaryMask, MetricsError> {
    let seg = gt.segmentation.as_ref().ok_or(MetricsError::MissingGtMask(gt.id))?;
    seg.to_mask(image.width as usize, image.height as usize)
        .map_err(|message| MetricsError::BadMask { image_id: image.id, message })
}

fn decode_pred_mask(p: &Prediction, image: &ImageRecord) -> Result<BinaryMask, MetricsError> {
    let seg = p.segmentation.as_ref().ok_or(MetricsError::MissingPredictionMask(p.image_id))?;
    seg.to_mask(image.width as usize, image.height as usize)
        .map_err(|message| MetricsError::BadMask { image_id: image.id, message })
}

fn iou_matrix(
    preds: &[Prediction],
    gts: &[InstanceAnnotation],
    kind: IouKind,
    image: &ImageRecord,
) -> Result<Vec<Vec<f64>>, MetricsError> {
    match kind {
        IouKind::Box => {
            let gt_boxes: Vec<Option<BoundingBox>> = gts.iter().map(|g| g.bounding_box()).collect();
            preds
                .iter()
                .map(|p| {
                    let pb = p.bounding_box()?;
                    Ok(gt_boxes
                        .iter()
                        .map(|gb| gb.as_ref().map_or(0.0, |gb| box_iou(&pb, gb)))
                        .collect())
                })
                .collect()
        }
        IouKind::Mask => {
            let gt_masks: Vec<BinaryMask> =
                gts.iter().map(|g| decode_gt_mask(g, image)).collect::<Result<_, _>>()?;
            let pred_masks: Vec<BinaryMask> =
                preds.iter().map(|p| decode_pred_mask(p, image)).collect::<Result<_, _>>()?;
            pred_masks
                .iter()
                .map(|pm| {
                    gt_masks
                        .iter()
                        .map(|gm| {
                            mask_iou(pm, gm).map_err(|e| MetricsError::BadMask {
                                image_id: image.id,
                                message: e.to_string(),
                            })
                        })
                        .collect()
                })
                .collect()
        }
    }
}

/// Harmonic mean of a seen/unseen metric pair; 0 when the pair sums to 0.
pub fn harmonic_mean(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

/// Metrics for one class scope (all / seen / unseen).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricSet {
    /// `(iou_threshold, recall)` pairs, ascending threshold.
    pub recall_at_k: Vec<(f64, f64)>,
    pub map50: f64,
    /// AP@0.5 per class name, classes with at least one ground truth.
    pub per_class_ap: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub setting: String,
    pub top_k: usize,
    pub overall: MetricSet,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seen: Option<MetricSet>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unseen: Option<MetricSet>,
    /// Harmonic means of the seen/unseen blocks, generalized regimes only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub harmonic_mean: Option<HarmonicMeans>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HarmonicMeans {
    pub recall_at_k: Vec<(f64, f64)>,
    pub map50: f64,
}

// Per-image working state: top-k predictions, in-scope ground truth, and
// their IoU matrix.
struct PreparedImage<'a> {
    preds: Vec<&'a Prediction>,
    gts: Vec<&'a InstanceAnnotation>,
    /// pred x gt IoUs, preds already in descending-score order.
    iou: Vec<Vec<f64>>,
}

pub struct EvalOptions {
    pub top_k: usize,
    pub iou_thresholds: Vec<f64>,
    pub map_iou: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            iou_thresholds: DEFAULT_IOU_THRESHOLDS.to_vec(),
            map_iou: MAP_IOU,
        }
    }
}

/// Run the full protocol for one setting over a test pool.
pub fn evaluate(
    test: &Dataset,
    preds: &[Prediction],
    split: &ClassSplit,
    setting: EvalSetting,
) -> Result<EvalReport, MetricsError> {
    evaluate_with(test, preds, split, setting, &EvalOptions::default())
}

pub fn evaluate_with(
    test: &Dataset,
    preds: &[Prediction],
    split: &ClassSplit,
    setting: EvalSetting,
    opts: &EvalOptions,
) -> Result<EvalReport, MetricsError> {
    let cat_name: BTreeMap<u64, &str> =
        test.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    let image_by_id: BTreeMap<u64, &ImageRecord> = test.images.iter().map(|i| (i.id, i)).collect();

    for p in preds {
        if !p.score.is_finite() {
            return Err(MetricsError::BadScore(p.score));
        }
        if !image_by_id.contains_key(&p.image_id) {
            return Err(MetricsError::UnknownImage(p.image_id));
        }
        if !cat_name.contains_key(&p.category_id) {
            return Err(MetricsError::UnknownCategory(p.category_id));
        }
        if setting.task == Task::Segmentation && p.segmentation.is_none() {
            return Err(MetricsError::MissingPredictionMask(p.image_id));
        }
    }

    let seen_ids: Vec<u64> = cat_name
        .iter()
        .filter(|(_, n)| split.is_seen(n))
        .map(|(&id, _)| id)
        .collect();
    let unseen_ids: Vec<u64> = cat_name
        .iter()
        .filter(|(_, n)| split.is_unseen(n))
        .map(|(&id, _)| id)
        .collect();

    let kind = match setting.task {
        Task::Detection => IouKind::Box,
        Task::Segmentation => IouKind::Mask,
    };

    // Prediction pool: unseen-only discards seen-class predictions before
    // top-k selection; generalized keeps the combined pool.
    let pool: Vec<&Prediction> = match setting.regime {
        Regime::UnseenOnly => preds.iter().filter(|p| unseen_ids.contains(&p.category_id)).collect(),
        Regime::Generalized => preds.iter().collect(),
    };

    // Ground-truth scope, excluding crowds and uninvolved classes.
    let gt_scope: Vec<u64> = match setting.regime {
        Regime::UnseenOnly => unseen_ids.clone(),
        Regime::Generalized => seen_ids.iter().chain(&unseen_ids).copied().collect(),
    };

    let mut prepared: Vec<PreparedImage> = Vec::with_capacity(test.images.len());
    for image in &test.images {
        let gts: Vec<&InstanceAnnotation> = test
            .annotations
            .iter()
            .filter(|a| a.image_id == image.id && a.iscrowd == 0 && gt_scope.contains(&a.category_id))
            .collect();
        let mut img_preds: Vec<&Prediction> =
            pool.iter().filter(|p| p.image_id == image.id).copied().collect();
        let owned: Vec<Prediction> = img_preds.iter().map(|p| (*p).clone()).collect();
        let order = score_order(&owned);
        img_preds = order.iter().take(opts.top_k).map(|&i| img_preds[i]).collect();

        let owned_sorted: Vec<Prediction> = img_preds.iter().map(|p| (*p).clone()).collect();
        let owned_gts: Vec<InstanceAnnotation> = gts.iter().map(|g| (*g).clone()).collect();
        let iou = iou_matrix(&owned_sorted, &owned_gts, kind, image)?;
        prepared.push(PreparedImage { preds: img_preds, gts, iou });
    }

    let overall = metric_set(&prepared, &gt_scope, &cat_name, opts, "all classes")?;
    let (seen, unseen, hm) = match setting.regime {
        Regime::UnseenOnly => (None, None, None),
        Regime::Generalized => {
            let s = metric_set(&prepared, &seen_ids, &cat_name, opts, "seen classes")?;
            let u = metric_set(&prepared, &unseen_ids, &cat_name, opts, "unseen classes")?;
            let hm = HarmonicMeans {
                recall_at_k: s
                    .recall_at_k
                    .iter()
                    .zip(&u.recall_at_k)
                    .map(|(&(t, rs), &(_, ru))| (t, harmonic_mean(rs, ru)))
                    .collect(),
                map50: harmonic_mean(s.map50, u.map50),
            };
            (Some(s), Some(u), Some(hm))
        }
    };

    let mut notes = Vec::new();
    if setting.regime == Regime::UnseenOnly {
        notes.push("mAP averaged over unseen classes only".to_string());
    }
    Ok(EvalReport {
        setting: setting.name().to_string(),
        top_k: opts.top_k,
        overall,
        seen,
        unseen,
        harmonic_mean: hm,
        notes,
    })
}

fn metric_set(
    prepared: &[PreparedImage],
    scope: &[u64],
    cat_name: &BTreeMap<u64, &str>,
    opts: &EvalOptions,
    scope_label: &str,
) -> Result<MetricSet, MetricsError> {
    let total_gt: usize = prepared
        .iter()
        .map(|pi| pi.gts.iter().filter(|g| scope.contains(&g.category_id)).count())
        .sum();
    if total_gt == 0 {
        return Err(MetricsError::NoGroundTruth(scope_label.to_string()));
    }

    let mut recall_at_k = Vec::new();
    for &t in &opts.iou_thresholds {
        let mut matched = 0usize;
        for pi in prepared {
            matched += scoped_matches(pi, scope, t).len();
        }
        recall_at_k.push((t, matched as f64 / total_gt as f64));
    }

    // Per-class AP at the mAP threshold.
    let mut per_class_ap = BTreeMap::new();
    let mut classes: Vec<u64> = scope.to_vec();
    classes.sort_unstable();
    for cat in classes {
        let n_gt: usize = prepared
            .iter()
            .map(|pi| pi.gts.iter().filter(|g| g.category_id == cat).count())
            .sum();
        if n_gt == 0 {
            continue;
        }
        let ap = class_ap(prepared, cat, opts.map_iou, n_gt);
        per_class_ap.insert(cat_name[&cat].to_string(), ap);
    }
    let map50 = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    Ok(MetricSet { recall_at_k, map50, per_class_ap })
}

// Greedy matches within one image restricted to the scope categories.
// Predictions are already score-sorted; class-aware matching makes the
// scope restriction equivalent to matching on the full pool and filtering.
fn scoped_matches(pi: &PreparedImage, scope: &[u64], threshold: f64) -> Vec<MatchedPair> {
    let pred_cat: Vec<u64> = pi.preds.iter().map(|p| p.category_id).collect();
    let gt_cat: Vec<u64> = pi.gts.iter().map(|g| g.category_id).collect();
    let order: Vec<usize> = (0..pi.preds.len())
        .filter(|&i| scope.contains(&pred_cat[i]))
        .collect();
    let mut iou = pi.iou.clone();
    for (g, &cat) in gt_cat.iter().enumerate() {
        if !scope.contains(&cat) {
            for row in iou.iter_mut() {
                row[g] = -1.0;
            }
        }
    }
    match_on_matrix(&iou, &order, &pred_cat, &gt_cat, threshold)
}

fn class_ap(prepared: &[PreparedImage], cat: u64, threshold: f64, n_gt: usize) -> f64 {
    // Collect (score, tp) for every prediction of this class, TP flags from
    // per-image greedy matching at the threshold.
    let mut entries: Vec<(f64, bool)> = Vec::new();
    for pi in prepared {
        let matches = scoped_matches(pi, &[cat], threshold);
        for (i, p) in pi.preds.iter().enumerate() {
            if p.category_id != cat {
                continue;
            }
            let tp = matches.iter().any(|m| m.pred_idx == i);
            entries.push((p.score, tp));
        }
    }
    // Stable sort by descending score; equal scores keep image/input order.
    entries.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    let mut precisions = Vec::with_capacity(entries.len());
    let mut tp_flags = Vec::with_capacity(entries.len());
    let mut tp = 0usize;
    for (i, &(_, is_tp)) in entries.iter().enumerate() {
        tp += is_tp as usize;
        precisions.push(tp as f64 / (i + 1) as f64);
        tp_flags.push(is_tp);
    }
    // All-point interpolation: precision envelope from the right, summed at
    // each recall step.
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            ap += envelope[i] / n_gt as f64;
        }
    }
    ap
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn image() -> ImageRecord {
        ImageRecord { id: 1, width: 100, height: 100, file_name: None }
    }

    fn gt(id: u64, cat: u64, bbox: [f64; 4]) -> InstanceAnnotation {
        InstanceAnnotation {
            id,
            image_id: 1,
            category_id: cat,
            bbox,
            segmentation: None,
            iscrowd: 0,
            area: None,
        }
    }

    fn pred(cat: u64, score: f64, bbox: [f64; 4]) -> Prediction {
        Prediction { image_id: 1, category_id: cat, score, bbox, segmentation: None }
    }

    #[test]
    fn greedy_matches_same_class_overlap() {
        let preds = vec![pred(1, 0.9, [0.0, 0.0, 10.0, 10.0])];
        let gts = vec![gt(1, 1, [0.0, 0.0, 10.0, 11.0])];
        let m = match_greedy(&preds, &gts, 0.5, IouKind::Box, &image()).unwrap();
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn greedy_is_class_aware() {
        let preds = vec![pred(1, 0.9, [0.0, 0.0, 10.0, 10.0])];
        let gts = vec![gt(1, 2, [0.0, 0.0, 10.0, 10.0])];
        let m = match_greedy(&preds, &gts, 0.5, IouKind::Box, &image()).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn higher_score_wins_single_gt() {
        let preds = vec![
            pred(1, 0.8, [0.0, 0.0, 10.0, 10.0]),
            pred(1, 0.9, [1.0, 0.0, 10.0, 10.0]),
        ];
        let gts = vec![gt(1, 1, [0.0, 0.0, 10.0, 10.0])];
        let m = match_greedy(&preds, &gts, 0.5, IouKind::Box, &image()).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].pred_idx, 1, "the 0.9-scored prediction takes the GT");
    }

    #[test]
    fn harmonic_mean_benchmark_rows() {
        assert!((harmonic_mean(46.51, 4.83) - 8.75).abs() < 0.01);
        assert!((harmonic_mean(70.76, 53.85) - 61.16).abs() < 0.01);
        assert!((harmonic_mean(62.30, 38.14) - 47.31).abs() < 0.01);
    }

    #[test]
    fn harmonic_mean_edges() {
        assert_abs_diff_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert_abs_diff_eq!(harmonic_mean(5.0, 0.0), 0.0);
        for x in [0.1, 1.0, 37.5] {
            assert_abs_diff_eq!(harmonic_mean(x, x), x, epsilon = 1e-12);
        }
    }

    fn toy_eval_data() -> (Dataset, ClassSplit) {
        let raw = serde_json::json!({
            "images": [
                {"id": 1, "width": 100, "height": 100},
                {"id": 2, "width": 100, "height": 100}
            ],
            "categories": [
                {"id": 1, "name": "cat"},
                {"id": 2, "name": "zebra"}
            ],
            "annotations": [
                {"id": 10, "image_id": 1, "category_id": 2, "bbox": [0.0, 0.0, 10.0, 10.0]},
                {"id": 11, "image_id": 1, "category_id": 1, "bbox": [50.0, 50.0, 10.0, 10.0]},
                {"id": 12, "image_id": 2, "category_id": 2, "bbox": [20.0, 20.0, 10.0, 10.0]}
            ]
        });
        let d = crate::annotations::parse_dataset(&serde_json::to_vec(&raw).unwrap()).unwrap();
        let s = ClassSplit {
            name: "toy".into(),
            seen: vec!["cat".into()],
            unseen: vec!["zebra".into()],
        };
        (d, s)
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let (d, s) = toy_eval_data();
        let preds: Vec<Prediction> = d
            .annotations
            .iter()
            .map(|a| Prediction {
                image_id: a.image_id,
                category_id: a.category_id,
                score: 0.9,
                bbox: a.bbox,
                segmentation: None,
            })
            .collect();
        let report = evaluate(&d, &preds, &s, EvalSetting::GZSD).unwrap();
        for &(_, r) in &report.overall.recall_at_k {
            assert_abs_diff_eq!(r, 1.0);
        }
        assert_abs_diff_eq!(report.overall.map50, 1.0);
        let hm = report.harmonic_mean.unwrap();
        assert_abs_diff_eq!(hm.map50, 1.0);
    }

    #[test]
    fn unseen_only_discards_seen_predictions_and_gt() {
        let (d, s) = toy_eval_data();
        // Only the seen-class GT is covered; unseen predictions are junk.
        let preds = vec![Prediction {
            image_id: 1,
            category_id: 1,
            score: 0.9,
            bbox: [50.0, 50.0, 10.0, 10.0],
            segmentation: None,
        }];
        let report = evaluate(&d, &preds, &s, EvalSetting::ZSD).unwrap();
        for &(_, r) in &report.overall.recall_at_k {
            assert_abs_diff_eq!(r, 0.0);
        }
        // Both unseen classes' GT count (2 zebras), seen GT ignored.
        assert!(report.seen.is_none());
        assert_eq!(report.overall.per_class_ap.len(), 1);
    }

    #[test]
    fn partial_recall_hand_count() {
        let (d, s) = toy_eval_data();
        // Match zebra on image 1 and the cat; miss the zebra on image 2.
        let preds = vec![
            pred(2, 0.9, [0.0, 0.0, 10.0, 10.0]),
            Prediction {
                image_id: 1,
                category_id: 1,
                score: 0.8,
                bbox: [50.0, 50.0, 10.0, 10.0],
                segmentation: None,
            },
        ];
        let report = evaluate(&d, &preds, &s, EvalSetting::GZSD).unwrap();
        for &(_, r) in &report.overall.recall_at_k {
            assert_abs_diff_eq!(r, 2.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn recall_monotone_in_threshold() {
        let (d, s) = toy_eval_data();
        let preds = vec![
            pred(2, 0.9, [0.0, 0.0, 10.0, 12.0]),
            Prediction {
                image_id: 2,
                category_id: 2,
                score: 0.7,
                bbox: [20.0, 20.0, 14.0, 14.0],
                segmentation: None,
            },
        ];
        let report = evaluate(&d, &preds, &s, EvalSetting::ZSD).unwrap();
        let rs: Vec<f64> = report.overall.recall_at_k.iter().map(|&(_, r)| r).collect();
        assert!(rs[0] >= rs[1] && rs[1] >= rs[2]);
    }

    #[test]
    fn ap_single_tp() {
        let gts = vec![gt(1, 1, [0.0, 0.0, 10.0, 10.0])];
        let preds = vec![pred(1, 0.9, [0.0, 0.0, 10.0, 10.0])];
        let prepared = prepare_for_test(&preds, &gts);
        assert_abs_diff_eq!(class_ap(&prepared, 1, 0.5, 1), 1.0);
    }

    #[test]
    fn ap_tp_then_fp_still_one() {
        // Interpolation carries precision 1 at full recall.
        let gts = vec![gt(1, 1, [0.0, 0.0, 10.0, 10.0])];
        let preds = vec![
            pred(1, 0.9, [0.0, 0.0, 10.0, 10.0]),
            pred(1, 0.5, [80.0, 80.0, 10.0, 10.0]),
        ];
        let prepared = prepare_for_test(&preds, &gts);
        assert_abs_diff_eq!(class_ap(&prepared, 1, 0.5, 1), 1.0);
    }

    #[test]
    fn ap_only_fp_is_zero() {
        let gts = vec![gt(1, 1, [0.0, 0.0, 10.0, 10.0])];
        let preds = vec![pred(1, 0.9, [80.0, 80.0, 10.0, 10.0])];
        let prepared = prepare_for_test(&preds, &gts);
        assert_abs_diff_eq!(class_ap(&prepared, 1, 0.5, 1), 0.0);
    }

    #[test]
    fn no_ground_truth_is_an_error() {
        let (d, s) = toy_eval_data();
        let d_empty = Dataset { images: d.images.clone(), annotations: vec![], categories: d.categories.clone() };
        let err = evaluate(&d_empty, &[], &s, EvalSetting::GZSD).unwrap_err();
        assert!(matches!(err, MetricsError::NoGroundTruth(_)));
    }

    #[test]
    fn segmentation_requires_masks() {
        let (d, s) = toy_eval_data();
        let preds = vec![pred(2, 0.9, [0.0, 0.0, 10.0, 10.0])];
        let err = evaluate(&d, &preds, &s, EvalSetting::ZSI).unwrap_err();
        assert!(matches!(err, MetricsError::MissingPredictionMask(_)));
    }

    #[test]
    fn score_scaling_leaves_report_unchanged() {
        let (d, s) = toy_eval_data();
        let preds = vec![
            pred(2, 0.4, [0.0, 0.0, 10.0, 12.0]),
            pred(2, 0.2, [1.0, 0.0, 10.0, 10.0]),
        ];
        let scaled: Vec<Prediction> = preds
            .iter()
            .map(|p| Prediction { score: p.score * 2.0, ..p.clone() })
            .collect();
        let a = evaluate(&d, &preds, &s, EvalSetting::ZSD).unwrap();
        let b = evaluate(&d, &scaled, &s, EvalSetting::ZSD).unwrap();
        assert_eq!(a.overall, b.overall);
    }

    fn prepare_for_test<'a>(
        preds: &'a [Prediction],
        gts: &'a [InstanceAnnotation],
    ) -> Vec<PreparedImage<'a>> {
        let img = image();
        let order = score_order(preds);
        let sorted: Vec<&Prediction> = order.iter().map(|&i| &preds[i]).collect();
        let owned: Vec<Prediction> = sorted.iter().map(|p| (*p).clone()).collect();
        let iou = iou_matrix(&owned, gts, IouKind::Box, &img).unwrap();
        vec![PreparedImage { preds: sorted, gts: gts.iter().collect(), iou }]
    }
}
