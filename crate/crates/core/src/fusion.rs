//! Weighted boxes fusion over multiple annotators.
//!
//! Boxes from every annotator of an image are visited in a fixed order and
//! greedily attached to the best-overlapping fused box of the same category.
//! Each fused box is the proficiency-weighted mean of its cluster, and once
//! every box has been visited the cluster receives a confidence reflecting how
//! many annotators agreed on it.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SceneRecord;
use crate::error::{Error, Result};
use crate::geometry::{weighted_average, BBox};
use crate::CategoryId;

/// An annotator and the proficiency `p` in `(0, 1]` used to weight its boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotator {
    pub id: String,
    pub proficiency: f64,
}

impl Annotator {
    pub fn new(id: impl Into<String>, proficiency: f64) -> Result<Self> {
        let a = Self {
            id: id.into(),
            proficiency,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.proficiency > 0.0 && self.proficiency <= 1.0) {
            return Err(Error::invalid(format!(
                "annotator `{}` proficiency must lie in (0, 1], got {}",
                self.id, self.proficiency
            )));
        }
        Ok(())
    }
}

/// One box drawn by one annotator.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedBox {
    pub bbox: BBox,
    pub category: CategoryId,
    pub annotator: String,
    /// Fusion weight; normally the annotator's proficiency.
    pub weight: f64,
}

impl AnnotatedBox {
    pub fn new(bbox: BBox, category: CategoryId, annotator: &Annotator) -> Self {
        Self {
            bbox,
            category,
            annotator: annotator.id.clone(),
            weight: annotator.proficiency,
        }
    }
}

/// Boxes merged into one fused box. All members share a category.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    members: Vec<AnnotatedBox>,
}

impl Cluster {
    fn new(first: AnnotatedBox) -> Self {
        Self {
            members: vec![first],
        }
    }

    pub fn members(&self) -> &[AnnotatedBox] {
        &self.members
    }

    pub fn category(&self) -> CategoryId {
        self.members[0].category
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn weighted_box(&self) -> Result<BBox> {
        let boxes: Vec<BBox> = self.members.iter().map(|m| m.bbox).collect();
        let weights: Vec<f64> = self.members.iter().map(|m| m.weight).collect();
        weighted_average(&boxes, &weights)
    }

    fn mean_weight(&self) -> f64 {
        self.members.iter().map(|m| m.weight).sum::<f64>() / self.members.len() as f64
    }
}

/// Consensus box produced by fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedBox {
    pub bbox: BBox,
    pub category: CategoryId,
    /// Agreement score; in `(0, 1]` under [`ConfidenceMode::NormalizedAgreement`].
    pub confidence: f64,
    /// Number of boxes `T` in the cluster.
    pub cluster_size: usize,
    pub contributing_annotators: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    /// `c = mean(cluster weights) * min(T, N) / N`.
    #[default]
    NormalizedAgreement,
    /// `c = T`. Diagnostic only, not a valid loss weight.
    RawCount,
}

impl ConfidenceMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConfidenceMode::NormalizedAgreement => "normalized_agreement",
            ConfidenceMode::RawCount => "raw_count",
        }
    }
}

impl std::str::FromStr for ConfidenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized_agreement" | "normalized-agreement" => Ok(Self::NormalizedAgreement),
            "raw_count" | "raw-count" => Ok(Self::RawCount),
            other => Err(Error::invalid(format!("unknown confidence mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for ConfidenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    /// Boxes match when `iou > match_iou_threshold` (strict).
    pub match_iou_threshold: f64,
    /// Number of annotators `N` used to normalize agreement.
    pub num_annotators: usize,
    pub confidence_mode: ConfidenceMode,
}

impl FusionConfig {
    pub const DEFAULT_MATCH_IOU: f64 = 0.4;

    pub fn new(num_annotators: usize) -> Self {
        Self {
            match_iou_threshold: Self::DEFAULT_MATCH_IOU,
            num_annotators,
            confidence_mode: ConfidenceMode::default(),
        }
    }

    pub fn with_threshold(mut self, theta: f64) -> Self {
        self.match_iou_threshold = theta;
        self
    }

    pub fn with_mode(mut self, mode: ConfidenceMode) -> Self {
        self.confidence_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.match_iou_threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::invalid(format!(
                "match IoU threshold must lie in (0, 1), got {t}"
            )));
        }
        if self.num_annotators == 0 {
            return Err(Error::invalid("number of annotators must be at least 1"));
        }
        Ok(())
    }
}

/// Fuses one image's annotations and returns the clusters alongside the
/// fused boxes (same order, one cluster per fused box).
pub fn fuse_image_clusters(
    annotations: &[AnnotatedBox],
    annotators: &[Annotator],
    config: &FusionConfig,
) -> Result<(Vec<FusedBox>, Vec<Cluster>)> {
    config.validate()?;
    let table: HashMap<&str, &Annotator> =
        annotators.iter().map(|a| (a.id.as_str(), a)).collect();

    let mut present = BTreeSet::new();
    for (i, a) in annotations.iter().enumerate() {
        if !table.contains_key(a.annotator.as_str()) {
            return Err(Error::invalid(format!(
                "annotation {i} references unknown annotator `{}`",
                a.annotator
            )));
        }
        if !(a.weight > 0.0 && a.weight <= 1.0) {
            return Err(Error::invalid(format!(
                "annotation {i} has weight {} outside (0, 1]",
                a.weight
            )));
        }
        present.insert(a.annotator.as_str());
    }
    if present.len() > config.num_annotators {
        return Err(Error::invalid(format!(
            "{} distinct annotators present but N = {}",
            present.len(),
            config.num_annotators
        )));
    }

    // Proficiency descending, then annotator id, then input position.
    let mut order: Vec<usize> = (0..annotations.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&annotations[i], &annotations[j]);
        let (pa, pb) = (
            table[a.annotator.as_str()].proficiency,
            table[b.annotator.as_str()].proficiency,
        );
        pb.total_cmp(&pa)
            .then_with(|| a.annotator.cmp(&b.annotator))
            .then(i.cmp(&j))
    });

    let mut clusters: Vec<Cluster> = Vec::new();
    let mut fused: Vec<BBox> = Vec::new();
    for idx in order {
        let ann = &annotations[idx];
        let mut best: Option<(usize, f64)> = None;
        for (pos, (fb, cl)) in fused.iter().zip(&clusters).enumerate() {
            if cl.category() != ann.category {
                continue;
            }
            let v = fb.iou(&ann.bbox);
            if v > config.match_iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((pos, v));
            }
        }
        match best {
            Some((pos, _)) => {
                clusters[pos].members.push(ann.clone());
                fused[pos] = clusters[pos].weighted_box()?;
            }
            None => {
                clusters.push(Cluster::new(ann.clone()));
                fused.push(ann.bbox);
            }
        }
    }

    let n = config.num_annotators;
    let out = fused
        .into_iter()
        .zip(&clusters)
        .map(|(bbox, cl)| {
            let t = cl.len();
            let confidence = match config.confidence_mode {
                ConfidenceMode::NormalizedAgreement => {
                    cl.mean_weight() * t.min(n) as f64 / n as f64
                }
                ConfidenceMode::RawCount => t as f64,
            };
            FusedBox {
                bbox,
                category: cl.category(),
                confidence,
                cluster_size: t,
                contributing_annotators: cl.members.iter().map(|m| m.annotator.clone()).collect(),
            }
        })
        .collect();
    Ok((out, clusters))
}

/// Fuses the annotations of a single image.
pub fn fuse_image(
    annotations: &[AnnotatedBox],
    annotators: &[Annotator],
    config: &FusionConfig,
) -> Result<Vec<FusedBox>> {
    fuse_image_clusters(annotations, annotators, config).map(|(f, _)| f)
}

/// Fuses every image independently. Images are processed in parallel on the
/// current rayon pool; output order follows input order.
pub fn fuse_dataset(
    scenes: &[SceneRecord<AnnotatedBox>],
    annotators: &[Annotator],
    config: &FusionConfig,
) -> Result<Vec<SceneRecord<FusedBox>>> {
    config.validate()?;
    scenes
        .par_iter()
        .map(|scene| {
            let boxes = fuse_image(&scene.boxes, annotators, config).map_err(|e| match e {
                Error::InvalidArgument(m) => {
                    Error::InvalidArgument(format!("image `{}`: {m}", scene.image_id))
                }
                other => other,
            })?;
            Ok(scene.with_boxes(boxes))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn experts(n: usize, p: f64) -> Vec<Annotator> {
        (1..=n)
            .map(|i| Annotator::new(format!("R{i}"), p).unwrap())
            .collect()
    }

    #[test]
    fn full_agreement() {
        let ann = experts(3, 0.8);
        let boxes: Vec<_> = ann
            .iter()
            .map(|a| AnnotatedBox::new(b(10.0, 10.0, 50.0, 50.0), 2, a))
            .collect();
        let out = fuse_image(&boxes, &ann, &FusionConfig::new(3)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, b(10.0, 10.0, 50.0, 50.0));
        assert_eq!(out[0].cluster_size, 3);
        assert!((out[0].confidence - 0.8).abs() < 1e-12);
        assert_eq!(out[0].contributing_annotators.len(), 3);
    }

    #[test]
    fn lone_box() {
        let ann = experts(3, 0.8);
        let boxes = vec![AnnotatedBox::new(b(1.0, 2.0, 30.0, 40.0), 0, &ann[1])];
        let out = fuse_image(&boxes, &ann, &FusionConfig::new(3)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, b(1.0, 2.0, 30.0, 40.0));
        assert_eq!(out[0].cluster_size, 1);
        assert!((out[0].confidence - 0.8 / 3.0).abs() < 1e-12);
        assert!((out[0].confidence - 0.2667).abs() < 1e-4);
    }

    #[test]
    fn two_overlapping_boxes_merge() {
        let ann = experts(2, 1.0);
        let boxes = vec![
            AnnotatedBox::new(b(0.0, 0.0, 10.0, 10.0), 1, &ann[0]),
            AnnotatedBox::new(b(2.0, 2.0, 12.0, 12.0), 1, &ann[1]),
        ];
        let out = fuse_image(&boxes, &ann, &FusionConfig::new(2)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, b(1.0, 1.0, 11.0, 11.0));
        assert_eq!(out[0].confidence, 1.0);
    }

    #[test]
    fn empty_input() {
        let ann = experts(3, 0.8);
        assert!(fuse_image(&[], &ann, &FusionConfig::new(3)).unwrap().is_empty());
    }

    #[test]
    fn threshold_is_strict() {
        // IoU exactly 0.5 between (0,0,2,1) and (0,0,1,1)
        let ann = experts(2, 1.0);
        let boxes = vec![
            AnnotatedBox::new(b(0.0, 0.0, 2.0, 1.0), 0, &ann[0]),
            AnnotatedBox::new(b(0.0, 0.0, 1.0, 1.0), 0, &ann[1]),
        ];
        let cfg = FusionConfig::new(2).with_threshold(0.5);
        assert_eq!(fuse_image(&boxes, &ann, &cfg).unwrap().len(), 2);
        let cfg = FusionConfig::new(2).with_threshold(0.49);
        assert_eq!(fuse_image(&boxes, &ann, &cfg).unwrap().len(), 1);
    }

    #[test]
    fn categories_never_mix() {
        let ann = experts(2, 1.0);
        let boxes = vec![
            AnnotatedBox::new(b(0.0, 0.0, 10.0, 10.0), 0, &ann[0]),
            AnnotatedBox::new(b(0.0, 0.0, 10.0, 10.0), 1, &ann[1]),
        ];
        let out = fuse_image(&boxes, &ann, &FusionConfig::new(2)).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|f| f.cluster_size == 1));
    }

    #[test]
    fn best_match_wins_and_ties_go_to_lower_index() {
        let ann = experts(3, 1.0);
        // R1 seeds two fused boxes; R2's box overlaps the second more.
        let boxes = vec![
            AnnotatedBox::new(b(0.0, 0.0, 10.0, 10.0), 0, &ann[0]),
            AnnotatedBox::new(b(4.0, 0.0, 14.0, 10.0), 0, &ann[0]),
            AnnotatedBox::new(b(3.0, 0.0, 13.0, 10.0), 0, &ann[1]),
        ];
        let cfg = FusionConfig::new(3).with_threshold(0.45);
        let (out, clusters) = fuse_image_clusters(&boxes, &ann, &cfg).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(clusters[1].len(), 2);

        // Equidistant box: IoU with both seeds is identical, lower index wins.
        let boxes = vec![
            AnnotatedBox::new(b(0.0, 0.0, 10.0, 10.0), 0, &ann[0]),
            AnnotatedBox::new(b(4.0, 0.0, 14.0, 10.0), 0, &ann[0]),
            AnnotatedBox::new(b(2.0, 0.0, 12.0, 10.0), 0, &ann[1]),
        ];
        let (_, clusters) = fuse_image_clusters(&boxes, &ann, &cfg).unwrap();
        assert_eq!(clusters[0].len(), 2);
        assert_eq!(clusters[1].len(), 1);
    }

    #[test]
    fn canonical_order_puts_proficient_annotators_first() {
        let ann = vec![
            Annotator::new("low", 0.5).unwrap(),
            Annotator::new("high", 0.9).unwrap(),
        ];
        let boxes = vec![
            AnnotatedBox::new(b(0.0, 0.0, 10.0, 10.0), 0, &ann[0]),
            AnnotatedBox::new(b(1.0, 0.0, 11.0, 10.0), 0, &ann[1]),
        ];
        let (_, clusters) = fuse_image_clusters(&boxes, &ann, &FusionConfig::new(2)).unwrap();
        assert_eq!(clusters[0].members()[0].annotator, "high");
    }

    #[test]
    fn raw_count_mode() {
        let ann = experts(3, 0.8);
        let boxes: Vec<_> = ann
            .iter()
            .map(|a| AnnotatedBox::new(b(10.0, 10.0, 50.0, 50.0), 2, a))
            .collect();
        let cfg = FusionConfig::new(3).with_mode(ConfidenceMode::RawCount);
        let out = fuse_image(&boxes, &ann, &cfg).unwrap();
        assert_eq!(out[0].confidence, 3.0);
    }

    #[test]
    fn errors() {
        let ann = experts(2, 0.8);
        let stranger = Annotator::new("X", 0.5).unwrap();
        let boxes = vec![AnnotatedBox::new(b(0.0, 0.0, 1.0, 1.0), 0, &stranger)];
        assert!(matches!(
            fuse_image(&boxes, &ann, &FusionConfig::new(2)),
            Err(Error::InvalidArgument(_))
        ));

        let boxes: Vec<_> = ann
            .iter()
            .map(|a| AnnotatedBox::new(b(0.0, 0.0, 1.0, 1.0), 0, a))
            .collect();
        assert!(fuse_image(&boxes, &ann, &FusionConfig::new(1)).is_err());
        assert!(fuse_image(&boxes, &ann, &FusionConfig::new(0)).is_err());
        assert!(fuse_image(&boxes, &ann, &FusionConfig::new(2).with_threshold(1.0)).is_err());
        assert!(fuse_image(&boxes, &ann, &FusionConfig::new(2).with_threshold(0.0)).is_err());
        assert!(Annotator::new("bad", 1.5).is_err());
        assert!(Annotator::new("bad", 0.0).is_err());
    }

    #[test]
    fn single_annotator_is_identity() {
        let ann = experts(1, 1.0);
        let boxes = vec![
            AnnotatedBox::new(b(0.0, 0.0, 10.0, 10.0), 0, &ann[0]),
            AnnotatedBox::new(b(20.0, 20.0, 30.0, 30.0), 0, &ann[0]),
            AnnotatedBox::new(b(0.0, 0.0, 10.0, 10.0), 3, &ann[0]),
        ];
        let out = fuse_image(&boxes, &ann, &FusionConfig::new(1)).unwrap();
        assert_eq!(out.len(), 3);
        for (f, a) in out.iter().zip(&boxes) {
            assert_eq!(f.bbox, a.bbox);
            assert_eq!(f.category, a.category);
            assert_eq!(f.confidence, 1.0);
        }
    }

    #[test]
    fn agreement_is_monotone_in_cluster_size() {
        let n = 5;
        let ann = experts(n, 0.7);
        let mut last = 0.0;
        for t in 1..=n {
            let boxes: Vec<_> = ann[..t]
                .iter()
                .map(|a| AnnotatedBox::new(b(0.0, 0.0, 8.0, 8.0), 0, a))
                .collect();
            let c = fuse_image(&boxes, &ann, &FusionConfig::new(n)).unwrap()[0].confidence;
            assert!(c >= last);
            last = c;
        }
        assert!((last - 0.7).abs() < 1e-12);
    }

    fn scene() -> impl Strategy<Value = (Vec<Annotator>, Vec<AnnotatedBox>)> {
        let ann = proptest::collection::vec(0.05f64..=1.0, 1..5);
        ann.prop_flat_map(|ps| {
            let k = ps.len();
            let boxes = proptest::collection::vec(
                (0usize..k, 0u32..3, 0.0f64..40.0, 0.0f64..40.0, 1.0f64..20.0, 1.0f64..20.0),
                0..15,
            );
            (Just(ps), boxes)
        })
        .prop_map(|(ps, raw)| {
            let ann: Vec<Annotator> = ps
                .iter()
                .enumerate()
                .map(|(i, &p)| Annotator::new(format!("A{i}"), p).unwrap())
                .collect();
            let boxes = raw
                .into_iter()
                .map(|(r, c, x, y, w, h)| AnnotatedBox::new(b(x, y, x + w, y + h), c, &ann[r]))
                .collect();
            (ann, boxes)
        })
    }

    proptest! {
        #[test]
        fn fused_boxes_are_convex_pure_and_bounded((ann, boxes) in scene(), theta in 0.05f64..0.95) {
            let cfg = FusionConfig::new(ann.len()).with_threshold(theta);
            let (out, clusters) = fuse_image_clusters(&boxes, &ann, &cfg).unwrap();
            prop_assert_eq!(out.len(), clusters.len());
            prop_assert_eq!(clusters.iter().map(Cluster::len).sum::<usize>(), boxes.len());
            for (f, cl) in out.iter().zip(&clusters) {
                prop_assert!(cl.members().iter().all(|m| m.category == f.category));
                prop_assert!(f.confidence > 0.0 && f.confidence <= 1.0);
                prop_assert_eq!(f.cluster_size, cl.len());
                for k in 0..4 {
                    let vals = cl.members().iter().map(|m| m.bbox.to_array()[k]);
                    let lo = vals.clone().fold(f64::INFINITY, f64::min);
                    let hi = vals.fold(f64::NEG_INFINITY, f64::max);
                    let v = f.bbox.to_array()[k];
                    prop_assert!(v >= lo && v <= hi);
                }
            }
            let again = fuse_image(&boxes, &ann, &cfg).unwrap();
            prop_assert_eq!(out, again);
        }
    }
}
