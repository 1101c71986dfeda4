//! Detection-quality metrics: greedy matching, 101-point interpolated AP and
//! mAP at one or several IoU thresholds.
//!
//! A prediction counts as a true positive when its IoU with an unmatched
//! same-category ground-truth box is at least the threshold (inclusive).
//! Predictions are pooled across images per category before AP is computed,
//! and mAP averages AP over the categories that have ground truth.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledBox, SceneRecord};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::CategoryId;

/// Number of recall points in interpolated AP (0.00, 0.01, ..., 1.00).
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub category: CategoryId,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BBox, category: CategoryId, score: f64) -> Self {
        Self {
            bbox,
            category,
            score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// TP flag per prediction, indexed like the input slice.
    pub true_positive: Vec<bool>,
    pub false_negatives: usize,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.true_positive.iter().filter(|&&t| t).count()
    }

    pub fn fp(&self) -> usize {
        self.true_positive.len() - self.tp()
    }
}

/// Indices of `predictions` by descending score, ties in input order.
pub fn score_order(predictions: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .score
            .total_cmp(&predictions[a].score)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy matching on one image at IoU threshold `t` (inclusive).
pub fn match_greedy(predictions: &[ScoredBox], truths: &[LabeledBox], t: f64) -> MatchResult {
    let mut taken = vec![false; truths.len()];
    let mut true_positive = vec![false; predictions.len()];
    for i in score_order(predictions) {
        let p = &predictions[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in truths.iter().enumerate() {
            if taken[j] || g.category != p.category {
                continue;
            }
            let v = p.bbox.iou(&g.bbox);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            if v >= t {
                taken[j] = true;
                true_positive[i] = true;
            }
        }
    }
    MatchResult {
        true_positive,
        false_negatives: taken.iter().filter(|&&m| !m).count(),
    }
}

/// 101-point interpolated AP over detections already sorted by descending
/// score. Returns `None` when `num_truths` is 0.
pub fn average_precision(sorted_flags: &[bool], num_truths: usize) -> Option<f64> {
    if num_truths == 0 {
        return None;
    }
    // (precision, tp) at each operating point
    let mut points = Vec::with_capacity(sorted_flags.len());
    let mut tp = 0usize;
    for (k, &hit) in sorted_flags.iter().enumerate() {
        tp += hit as usize;
        points.push((tp as f64 / (k + 1) as f64, tp));
    }
    // Suffix maximum of precision so each recall level reads its envelope.
    let mut envelope = vec![0.0f64; points.len() + 1];
    for k in (0..points.len()).rev() {
        envelope[k] = envelope[k + 1].max(points[k].0);
    }
    let mut sum = 0.0;
    let mut k = 0usize;
    for r in 0..RECALL_POINTS {
        // first operating point with recall >= r / 100, compared exactly
        while k < points.len() && points[k].1 * 100 < r * num_truths {
            k += 1;
        }
        sum += envelope[k];
    }
    Some(sum / RECALL_POINTS as f64)
}

/// IoU thresholds to evaluate at.
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds(Vec<f64>);

impl Thresholds {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("at least one IoU threshold is required"));
        }
        if let Some(t) = values.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::invalid(format!("IoU threshold {t} outside (0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn single(t: f64) -> Result<Self> {
        Self::new(vec![t])
    }

    /// `start, start + step, ..., end`, each value rounded to its shortest
    /// decimal so that e.g. 0.5 + 3 * 0.05 is exactly `0.65`.
    pub fn range(start: f64, end: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || end < start {
            return Err(Error::invalid(format!(
                "bad threshold range {start}:{end}:{step}"
            )));
        }
        let n = ((end - start) / step + 1e-9).floor() as usize + 1;
        let values = (0..n)
            .map(|i| {
                let v = start + i as f64 * step;
                format!("{v:.10}").parse::<f64>().unwrap_or(v)
            })
            .collect();
        Self::new(values)
    }

    /// The ten thresholds 0.50, 0.55, ..., 0.95.
    pub fn coco_range() -> Self {
        Self::range(0.5, 0.95, 0.05).expect("static range is valid")
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl std::str::FromStr for Thresholds {
    type Err = Error;

    /// Accepts `0.4`, `0.4,0.5` or `start:end:step`.
    fn from_str(s: &str) -> Result<Self> {
        let num = |x: &str| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad threshold `{x}`")))
        };
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            [a, b, c] => Self::range(num(a)?, num(b)?, num(c)?),
            [single] => Self::new(single.split(',').map(num).collect::<Result<_>>()?),
            _ => Err(Error::invalid(format!("bad threshold spec `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub category_id: CategoryId,
    /// `None` when the category has no ground truth.
    pub ap: Option<f64>,
    pub num_truths: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub iou_threshold: f64,
    pub map: f64,
    pub categories: Vec<CategoryResult>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<ThresholdResult>,
    /// Mean of the per-threshold mAPs.
    pub mean_map: f64,
}

impl EvalReport {
    pub fn map_at(&self, t: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .find(|r| r.iou_threshold == t)
            .map(|r| r.map)
    }
}

/// Evaluates predictions against ground truth.
///
/// `categories` is the category table; predictions naming any other id are
/// rejected, as are predictions on images absent from `truths`. Images with
/// no predictions contribute their ground truth as false negatives.
pub fn evaluate(
    predictions: &[SceneRecord<ScoredBox>],
    truths: &[SceneRecord<LabeledBox>],
    categories: &[CategoryId],
    thresholds: &Thresholds,
) -> Result<EvalReport> {
    let known: HashSet<CategoryId> = categories.iter().copied().collect();
    let truth_index: HashMap<&str, usize> = truths
        .iter()
        .enumerate()
        .map(|(i, s)| (s.image_id.as_str(), i))
        .collect();
    for g in truths.iter().flat_map(|s| &s.boxes) {
        if !known.contains(&g.category) {
            return Err(Error::invalid(format!(
                "ground truth uses unknown category id {}",
                g.category
            )));
        }
    }

    let empty: Vec<ScoredBox> = Vec::new();
    let mut preds_for: Vec<&[ScoredBox]> = vec![&empty; truths.len()];
    for scene in predictions {
        let Some(&i) = truth_index.get(scene.image_id.as_str()) else {
            return Err(Error::invalid(format!(
                "predictions reference image `{}` absent from ground truth",
                scene.image_id
            )));
        };
        if let Some(p) = scene.boxes.iter().find(|p| !known.contains(&p.category)) {
            return Err(Error::invalid(format!(
                "image `{}`: prediction uses unknown category id {}",
                scene.image_id, p.category
            )));
        }
        if let Some(p) = scene.boxes.iter().find(|p| !(0.0..=1.0).contains(&p.score)) {
            return Err(Error::invalid(format!(
                "image `{}`: score {} outside [0, 1]",
                scene.image_id, p.score
            )));
        }
        preds_for[i] = &scene.boxes;
    }

    let mut sorted_categories: Vec<CategoryId> = known.iter().copied().collect();
    sorted_categories.sort_unstable();

    let mut per_threshold = Vec::with_capacity(thresholds.values().len());
    for &t in thresholds.values() {
        // category -> (score, image position, box index, tp)
        let mut pooled: BTreeMap<CategoryId, Vec<(f64, usize, usize, bool)>> = BTreeMap::new();
        let mut truths_per_cat: BTreeMap<CategoryId, usize> = BTreeMap::new();
        let mut fn_per_cat: BTreeMap<CategoryId, usize> = BTreeMap::new();
        for (img, scene) in truths.iter().enumerate() {
            let preds = preds_for[img];
            let m = match_greedy(preds, &scene.boxes, t);
            for (k, p) in preds.iter().enumerate() {
                pooled
                    .entry(p.category)
                    .or_default()
                    .push((p.score, img, k, m.true_positive[k]));
            }
            for g in &scene.boxes {
                *truths_per_cat.entry(g.category).or_default() += 1;
            }
            // unmatched truths per category
            let matched_per_cat = preds
                .iter()
                .zip(&m.true_positive)
                .filter(|(_, &tp)| tp)
                .fold(HashMap::<CategoryId, usize>::new(), |mut acc, (p, _)| {
                    *acc.entry(p.category).or_default() += 1;
                    acc
                });
            let mut totals = HashMap::<CategoryId, usize>::new();
            for g in &scene.boxes {
                *totals.entry(g.category).or_default() += 1;
            }
            for (c, n) in totals {
                *fn_per_cat.entry(c).or_default() += n - matched_per_cat.get(&c).copied().unwrap_or(0);
            }
        }

        let mut results = Vec::with_capacity(sorted_categories.len());
        let (mut ap_sum, mut ap_count) = (0.0, 0usize);
        for &c in &sorted_categories {
            let mut dets = pooled.remove(&c).unwrap_or_default();
            dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let flags: Vec<bool> = dets.iter().map(|d| d.3).collect();
            let n = truths_per_cat.get(&c).copied().unwrap_or(0);
            let ap = average_precision(&flags, n);
            if let Some(v) = ap {
                ap_sum += v;
                ap_count += 1;
            }
            let tp = flags.iter().filter(|&&f| f).count();
            results.push(CategoryResult {
                category_id: c,
                ap,
                num_truths: n,
                tp,
                fp: flags.len() - tp,
                fn_: fn_per_cat.get(&c).copied().unwrap_or(0),
            });
        }
        let map = if ap_count == 0 {
            0.0
        } else {
            ap_sum / ap_count as f64
        };
        per_threshold.push(ThresholdResult {
            iou_threshold: t,
            map,
            tp: results.iter().map(|r| r.tp).sum(),
            fp: results.iter().map(|r| r.fp).sum(),
            fn_: results.iter().map(|r| r.fn_).sum(),
            categories: results,
        });
    }

    let mean_map =
        per_threshold.iter().map(|r| r.map).sum::<f64>() / per_threshold.len() as f64;
    Ok(EvalReport {
        thresholds: per_threshold,
        mean_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn gt(bbox: BBox, category: CategoryId) -> LabeledBox {
        LabeledBox { bbox, category }
    }

    #[test]
    fn clear_hit() {
        // IoU 0.6: (0,0,10,10) vs (0,0,10,6)
        let m = match_greedy(
            &[ScoredBox::new(b(0.0, 0.0, 10.0, 6.0), 0, 0.9)],
            &[gt(b(0.0, 0.0, 10.0, 10.0), 0)],
            0.4,
        );
        assert_eq!((m.tp(), m.fp(), m.false_negatives), (1, 0, 0));
    }

    #[test]
    fn threshold_is_inclusive() {
        // IoU exactly 0.4: (0,0,10,10) vs (0,0,10,4)
        let p = b(0.0, 0.0, 10.0, 4.0);
        let g = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(p.iou(&g), 0.4);
        let m = match_greedy(&[ScoredBox::new(p, 0, 1.0)], &[gt(g, 0)], 0.4);
        assert_eq!(m.tp(), 1);
    }

    #[test]
    fn higher_score_takes_the_truth() {
        let g = gt(b(0.0, 0.0, 10.0, 10.0), 0);
        let preds = [
            ScoredBox::new(b(0.0, 0.0, 10.0, 9.0), 0, 0.3),
            ScoredBox::new(b(0.0, 0.0, 10.0, 7.0), 0, 0.7),
        ];
        let m = match_greedy(&preds, &[g], 0.5);
        assert_eq!(m.true_positive, vec![false, true]);
        assert_eq!(m.false_negatives, 0);
    }

    #[test]
    fn duplicates_yield_one_tp() {
        let g = gt(b(0.0, 0.0, 10.0, 10.0), 0);
        let preds = vec![ScoredBox::new(g.bbox, 0, 1.0); 4];
        let m = match_greedy(&preds, &[g], 0.5);
        assert_eq!(m.tp(), 1);
        assert_eq!(m.fp(), 3);
    }

    #[test]
    fn wrong_category_never_matches() {
        let g = gt(b(0.0, 0.0, 10.0, 10.0), 0);
        let m = match_greedy(&[ScoredBox::new(g.bbox, 1, 1.0)], &[g], 0.5);
        assert_eq!((m.tp(), m.fp(), m.false_negatives), (0, 1, 1));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), Some(1.0));
        assert_eq!(average_precision(&[false], 1), Some(0.0));
        assert_eq!(average_precision(&[false, true], 1), Some(0.5));
        assert_eq!(average_precision(&[], 3), Some(0.0));
        assert_eq!(average_precision(&[true], 0), None);
    }

    #[test]
    fn ap_partial_recall() {
        // one of two truths found at rank 1: recall 0.5, precision 1 for r <= 0.5
        let ap = average_precision(&[true], 2).unwrap();
        assert!((ap - 51.0 / 101.0).abs() < 1e-15);
    }

    #[test]
    fn threshold_parsing() {
        let t: Thresholds = "0.5:0.95:0.05".parse().unwrap();
        assert_eq!(
            t.values(),
            &[0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95]
        );
        assert_eq!(t, Thresholds::coco_range());
        let t: Thresholds = "0.4".parse().unwrap();
        assert_eq!(t.values(), &[0.4]);
        assert!("0".parse::<Thresholds>().is_err());
        assert!("1.5".parse::<Thresholds>().is_err());
        assert!("a:b".parse::<Thresholds>().is_err());
        assert!("0.9:0.5:0.1".parse::<Thresholds>().is_err());
    }

    fn scene(id: &str, boxes: Vec<LabeledBox>) -> SceneRecord<LabeledBox> {
        SceneRecord::new(id, 100, 100, boxes)
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let truths = vec![
            scene("a", vec![gt(b(0.0, 0.0, 10.0, 10.0), 0), gt(b(20.0, 20.0, 40.0, 30.0), 1)]),
            scene("b", vec![gt(b(5.0, 5.0, 15.0, 25.0), 1)]),
        ];
        let preds: Vec<_> = truths
            .iter()
            .map(|s| s.with_boxes(s.boxes.iter().map(|g| ScoredBox::new(g.bbox, g.category, 1.0)).collect()))
            .collect();
        let report = evaluate(&preds, &truths, &[0, 1, 2], &Thresholds::single(0.4).unwrap()).unwrap();
        assert_eq!(report.map_at(0.4), Some(1.0));
        let report = evaluate(&preds, &truths, &[0, 1, 2], &Thresholds::coco_range()).unwrap();
        assert_eq!(report.mean_map, 1.0);
        // category 2 has no truths and is excluded
        assert_eq!(report.thresholds[0].categories[2].ap, None);
    }

    #[test]
    fn empty_predictions_score_zero() {
        let truths = vec![scene("a", vec![gt(b(0.0, 0.0, 10.0, 10.0), 0)])];
        let report = evaluate(&[], &truths, &[0], &Thresholds::coco_range()).unwrap();
        assert_eq!(report.mean_map, 0.0);
        assert_eq!(report.thresholds[0].fn_, 1);
    }

    #[test]
    fn unknown_ids_are_rejected() {
        let truths = vec![scene("a", vec![gt(b(0.0, 0.0, 10.0, 10.0), 0)])];
        let bad_cat = vec![SceneRecord::new("a", 100, 100, vec![ScoredBox::new(b(0.0, 0.0, 1.0, 1.0), 5, 0.5)])];
        assert!(matches!(
            evaluate(&bad_cat, &truths, &[0], &Thresholds::single(0.4).unwrap()),
            Err(Error::InvalidArgument(_))
        ));
        let bad_img = vec![SceneRecord::new("zzz", 100, 100, vec![ScoredBox::new(b(0.0, 0.0, 1.0, 1.0), 0, 0.5)])];
        assert!(evaluate(&bad_img, &truths, &[0], &Thresholds::single(0.4).unwrap()).is_err());
    }
}
