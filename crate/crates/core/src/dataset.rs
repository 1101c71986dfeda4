//! The JSON container shared by every artifact: ground truth, multi-annotator
//! sets, fused labels and predictions, plus the loss-weight export and the
//! evaluation report.
//!
//! Files are written canonically: fixed key order, images sorted by id,
//! annotations grouped by image in input order, one record per line, and
//! floats in shortest round-trip form. Writing the same value twice yields
//! the same bytes, and a parsed canonical file writes back byte-identical.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::{EvalReport, ScoredBox};
use crate::fusion::{AnnotatedBox, Annotator, ConfidenceMode, FusedBox};
use crate::geometry::BBox;
use crate::loss::{ImageWeights, WeightExport, WeightRow};
use crate::CategoryId;

pub const FORMAT_VERSION: u32 = 1;

/// Boxes overflowing the image by at most this much are clipped with a
/// warning; anything larger is rejected.
pub const OVERFLOW_TOLERANCE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GroundTruth,
    MultiAnnotator,
    Fused,
    Predictions,
}

impl DatasetKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetKind::GroundTruth => "ground_truth",
            DatasetKind::MultiAnnotator => "multi_annotator",
            DatasetKind::Fused => "fused",
            DatasetKind::Predictions => "predictions",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
}

impl Category {
    pub fn new(id: CategoryId, name: impl Into<String>) -> Self {
        Self {
            id,
            name: name.into(),
        }
    }
}

/// Ground-truth object: a box and its category.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub category: CategoryId,
}

/// One image's worth of boxes. `T` decides what kind of record this is.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord<T> {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<T>,
}

impl<T> SceneRecord<T> {
    pub fn new(image_id: impl Into<String>, width: u32, height: u32, boxes: Vec<T>) -> Self {
        Self {
            image_id: image_id.into(),
            width,
            height,
            boxes,
        }
    }

    /// Same image, different boxes.
    pub fn with_boxes<U>(&self, boxes: Vec<U>) -> SceneRecord<U> {
        SceneRecord {
            image_id: self.image_id.clone(),
            width: self.width,
            height: self.height,
            boxes,
        }
    }
}

/// Kind-specific payload of a [`DatasetFile`].
#[derive(Debug, Clone, PartialEq)]
pub enum Annotations {
    GroundTruth(Vec<SceneRecord<LabeledBox>>),
    MultiAnnotator(Vec<SceneRecord<AnnotatedBox>>),
    Fused {
        mode: ConfidenceMode,
        scenes: Vec<SceneRecord<FusedBox>>,
    },
    Predictions(Vec<SceneRecord<ScoredBox>>),
}

/// A validated dataset file held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub categories: Vec<Category>,
    /// Required for multi-annotator files, optional otherwise.
    pub annotators: Vec<Annotator>,
    pub annotations: Annotations,
}

/// Result of a successful parse. Warnings are recoverable issues such as
/// boxes clipped back into their image.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub dataset: DatasetFile,
    pub warnings: Vec<String>,
}

impl DatasetFile {
    pub fn ground_truth(categories: Vec<Category>, scenes: Vec<SceneRecord<LabeledBox>>) -> Self {
        Self {
            categories,
            annotators: Vec::new(),
            annotations: Annotations::GroundTruth(scenes),
        }
    }

    pub fn multi_annotator(
        categories: Vec<Category>,
        annotators: Vec<Annotator>,
        scenes: Vec<SceneRecord<AnnotatedBox>>,
    ) -> Self {
        Self {
            categories,
            annotators,
            annotations: Annotations::MultiAnnotator(scenes),
        }
    }

    pub fn fused(
        categories: Vec<Category>,
        annotators: Vec<Annotator>,
        mode: ConfidenceMode,
        scenes: Vec<SceneRecord<FusedBox>>,
    ) -> Self {
        Self {
            categories,
            annotators,
            annotations: Annotations::Fused { mode, scenes },
        }
    }

    pub fn predictions(categories: Vec<Category>, scenes: Vec<SceneRecord<ScoredBox>>) -> Self {
        Self {
            categories,
            annotators: Vec::new(),
            annotations: Annotations::Predictions(scenes),
        }
    }

    pub fn kind(&self) -> DatasetKind {
        match &self.annotations {
            Annotations::GroundTruth(_) => DatasetKind::GroundTruth,
            Annotations::MultiAnnotator(_) => DatasetKind::MultiAnnotator,
            Annotations::Fused { .. } => DatasetKind::Fused,
            Annotations::Predictions(_) => DatasetKind::Predictions,
        }
    }

    pub fn num_images(&self) -> usize {
        self.image_ids().len()
    }

    pub fn num_annotations(&self) -> usize {
        match &self.annotations {
            Annotations::GroundTruth(s) => s.iter().map(|s| s.boxes.len()).sum(),
            Annotations::MultiAnnotator(s) => s.iter().map(|s| s.boxes.len()).sum(),
            Annotations::Fused { scenes, .. } => scenes.iter().map(|s| s.boxes.len()).sum(),
            Annotations::Predictions(s) => s.iter().map(|s| s.boxes.len()).sum(),
        }
    }

    pub fn image_ids(&self) -> Vec<&str> {
        fn ids<T>(s: &[SceneRecord<T>]) -> Vec<&str> {
            s.iter().map(|s| s.image_id.as_str()).collect()
        }
        match &self.annotations {
            Annotations::GroundTruth(s) => ids(s),
            Annotations::MultiAnnotator(s) => ids(s),
            Annotations::Fused { scenes, .. } => ids(scenes),
            Annotations::Predictions(s) => ids(s),
        }
    }

    pub fn category_ids(&self) -> Vec<CategoryId> {
        self.categories.iter().map(|c| c.id).collect()
    }

    pub fn as_ground_truth(&self) -> Result<&[SceneRecord<LabeledBox>]> {
        match &self.annotations {
            Annotations::GroundTruth(s) => Ok(s),
            _ => Err(self.kind_error(DatasetKind::GroundTruth)),
        }
    }

    pub fn as_multi_annotator(&self) -> Result<&[SceneRecord<AnnotatedBox>]> {
        match &self.annotations {
            Annotations::MultiAnnotator(s) => Ok(s),
            _ => Err(self.kind_error(DatasetKind::MultiAnnotator)),
        }
    }

    pub fn as_fused(&self) -> Result<&[SceneRecord<FusedBox>]> {
        match &self.annotations {
            Annotations::Fused { scenes, .. } => Ok(scenes),
            _ => Err(self.kind_error(DatasetKind::Fused)),
        }
    }

    pub fn as_predictions(&self) -> Result<&[SceneRecord<ScoredBox>]> {
        match &self.annotations {
            Annotations::Predictions(s) => Ok(s),
            _ => Err(self.kind_error(DatasetKind::Predictions)),
        }
    }

    /// Views any file as scored boxes: predictions keep their score, fused
    /// boxes use their confidence, and ground-truth or annotator boxes score 1.
    pub fn to_scored(&self) -> Vec<SceneRecord<ScoredBox>> {
        fn map<T>(s: &[SceneRecord<T>], f: impl Fn(&T) -> ScoredBox) -> Vec<SceneRecord<ScoredBox>> {
            s.iter()
                .map(|s| s.with_boxes(s.boxes.iter().map(&f).collect()))
                .collect()
        }
        match &self.annotations {
            Annotations::GroundTruth(s) => map(s, |b| ScoredBox::new(b.bbox, b.category, 1.0)),
            Annotations::MultiAnnotator(s) => map(s, |b| ScoredBox::new(b.bbox, b.category, 1.0)),
            Annotations::Fused { scenes, .. } => {
                map(scenes, |b| ScoredBox::new(b.bbox, b.category, b.confidence))
            }
            Annotations::Predictions(s) => s.clone(),
        }
    }

    /// Splits a multi-annotator file into one scored set per annotator (score
    /// 1), in annotator-table order. Every image appears in every split.
    pub fn split_by_annotator(&self) -> Result<Vec<(String, Vec<SceneRecord<ScoredBox>>)>> {
        let scenes = self.as_multi_annotator()?;
        Ok(self
            .annotators
            .iter()
            .map(|a| {
                let split = scenes
                    .iter()
                    .map(|s| {
                        s.with_boxes(
                            s.boxes
                                .iter()
                                .filter(|b| b.annotator == a.id)
                                .map(|b| ScoredBox::new(b.bbox, b.category, 1.0))
                                .collect(),
                        )
                    })
                    .collect();
                (a.id.clone(), split)
            })
            .collect())
    }

    fn kind_error(&self, expected: DatasetKind) -> Error {
        Error::KindMismatch {
            expected,
            found: self.kind(),
        }
    }

    /// Re-runs every invariant check and returns the warnings a parse of the
    /// written file would report.
    pub fn validate(&self) -> Result<Vec<String>> {
        from_raw(self.to_raw()).map(|p| p.warnings)
    }

    /// Canonical serialization.
    pub fn to_canonical_string(&self) -> Result<String> {
        self.validate()?;
        Ok(render_raw(&self.to_raw()))
    }

    pub fn write_to<W: Write>(&self, mut sink: W) -> Result<()> {
        let text = self.to_canonical_string()?;
        sink.write_all(text.as_bytes())?;
        sink.flush()?;
        Ok(())
    }

    pub fn write_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = self.to_canonical_string()?;
        std::fs::write(path, text)?;
        Ok(())
    }

    fn to_raw(&self) -> RawFile {
        // canonical record order is by image id; the sort is stable so
        // annotations keep their input order within an image
        fn ordered<T>(s: &[SceneRecord<T>]) -> Vec<&SceneRecord<T>> {
            let mut v: Vec<_> = s.iter().collect();
            v.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            v
        }
        fn images<T>(s: &[SceneRecord<T>]) -> Vec<ImageInfo> {
            ordered(s)
                .into_iter()
                .map(|s| ImageInfo {
                    id: s.image_id.clone(),
                    width: s.width,
                    height: s.height,
                })
                .collect()
        }
        fn rows<T>(s: &[SceneRecord<T>], f: impl Fn(&str, &T) -> RawAnnotation) -> Vec<RawAnnotation> {
            ordered(s)
                .into_iter()
                .flat_map(|s| s.boxes.iter().map(|b| f(&s.image_id, b)).collect::<Vec<_>>())
                .collect()
        }

        let proficiency: HashMap<&str, f64> = self
            .annotators
            .iter()
            .map(|a| (a.id.as_str(), a.proficiency))
            .collect();

        let (imgs, annotations, confidence_mode) = match &self.annotations {
            Annotations::GroundTruth(s) => (
                images(s),
                rows(s, |img, b| RawAnnotation::base(img, b.category, b.bbox)),
                None,
            ),
            Annotations::MultiAnnotator(s) => (
                images(s),
                rows(s, |img, b| {
                    let mut r = RawAnnotation::base(img, b.category, b.bbox);
                    r.annotator_id = Some(b.annotator.clone());
                    if proficiency.get(b.annotator.as_str()) != Some(&b.weight) {
                        r.weight = Some(b.weight);
                    }
                    r
                }),
                None,
            ),
            Annotations::Fused { mode, scenes } => (
                images(scenes),
                rows(scenes, |img, b| {
                    let mut r = RawAnnotation::base(img, b.category, b.bbox);
                    r.confidence = Some(b.confidence);
                    r.cluster_size = Some(b.cluster_size);
                    r.contributors = Some(b.contributing_annotators.iter().cloned().collect());
                    r
                }),
                match mode {
                    ConfidenceMode::NormalizedAgreement => None,
                    ConfidenceMode::RawCount => Some(ConfidenceMode::RawCount),
                },
            ),
            Annotations::Predictions(s) => (
                images(s),
                rows(s, |img, b| {
                    let mut r = RawAnnotation::base(img, b.category, b.bbox);
                    r.score = Some(b.score);
                    r
                }),
                None,
            ),
        };

        RawFile {
            format_version: FORMAT_VERSION,
            kind: self.kind(),
            confidence_mode,
            categories: self.categories.clone(),
            annotators: (!self.annotators.is_empty()).then(|| {
                self.annotators
                    .iter()
                    .map(|a| RawAnnotator {
                        id: a.id.clone(),
                        proficiency: Some(a.proficiency),
                    })
                    .collect()
            }),
            images: imgs,
            annotations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageInfo {
    id: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnnotator {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    proficiency: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnnotation {
    image_id: String,
    category_id: CategoryId,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    annotator_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cluster_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    contributors: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

impl RawAnnotation {
    fn base(image_id: &str, category_id: CategoryId, bbox: BBox) -> Self {
        Self {
            image_id: image_id.to_owned(),
            category_id,
            bbox: bbox.to_array(),
            annotator_id: None,
            weight: None,
            confidence: None,
            cluster_size: None,
            contributors: None,
            score: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    format_version: u32,
    kind: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    confidence_mode: Option<ConfidenceMode>,
    categories: Vec<Category>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    annotators: Option<Vec<RawAnnotator>>,
    images: Vec<ImageInfo>,
    annotations: Vec<RawAnnotation>,
}

fn json_error(e: serde_json::Error) -> Error {
    Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

fn to_line<T: Serialize>(v: &T) -> String {
    // Plain structs of strings, integers and finite floats always serialize.
    serde_json::to_string(v).expect("record serializes")
}

fn push_array<T: Serialize>(out: &mut String, key: &str, items: &[T], last: bool) {
    out.push_str(&format!("  \"{key}\": ["));
    if items.is_empty() {
        out.push(']');
    } else {
        out.push('\n');
        for (i, it) in items.iter().enumerate() {
            out.push_str("    ");
            out.push_str(&to_line(it));
            if i + 1 < items.len() {
                out.push(',');
            }
            out.push('\n');
        }
        out.push_str("  ]");
    }
    out.push_str(if last { "\n" } else { ",\n" });
}

fn render_raw(raw: &RawFile) -> String {
    let mut out = String::from("{\n");
    out.push_str(&format!("  \"format_version\": {},\n", raw.format_version));
    out.push_str(&format!("  \"kind\": {},\n", to_line(&raw.kind)));
    if let Some(mode) = raw.confidence_mode {
        out.push_str(&format!("  \"confidence_mode\": {},\n", to_line(&mode)));
    }
    push_array(&mut out, "categories", &raw.categories, false);
    if let Some(a) = &raw.annotators {
        push_array(&mut out, "annotators", a, false);
    }
    push_array(&mut out, "images", &raw.images, false);
    push_array(&mut out, "annotations", &raw.annotations, true);
    out.push_str("}\n");
    out
}

fn check_unique<'a>(what: &str, ids: impl Iterator<Item = String>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id.clone()) {
            return Err(Error::validation(format!("duplicate {what} id `{id}`")));
        }
    }
    Ok(())
}

fn from_raw(raw: RawFile) -> Result<Parsed> {
    if raw.format_version != FORMAT_VERSION {
        return Err(Error::validation(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            raw.format_version
        )));
    }
    let kind = raw.kind;
    if raw.confidence_mode.is_some() && kind != DatasetKind::Fused {
        return Err(Error::validation(format!(
            "confidence_mode is only allowed in fused files, found in `{kind}`"
        )));
    }
    let mode = raw.confidence_mode.unwrap_or_default();

    check_unique("category", raw.categories.iter().map(|c| c.id.to_string()))?;
    check_unique("image", raw.images.iter().map(|i| i.id.clone()))?;

    let mut annotators = Vec::new();
    if let Some(list) = &raw.annotators {
        check_unique("annotator", list.iter().map(|a| a.id.clone()))?;
        for (i, a) in list.iter().enumerate() {
            let p = a.proficiency.unwrap_or(1.0);
            let ann = Annotator::new(a.id.clone(), p)
                .map_err(|e| Error::validation(format!("annotators[{i}]: {e}")))?;
            annotators.push(ann);
        }
    } else if kind == DatasetKind::MultiAnnotator {
        return Err(Error::validation(
            "multi_annotator files require an `annotators` table",
        ));
    }
    let proficiency: HashMap<&str, f64> = annotators
        .iter()
        .map(|a| (a.id.as_str(), a.proficiency))
        .collect();

    let known_categories: HashSet<CategoryId> = raw.categories.iter().map(|c| c.id).collect();
    let image_index: HashMap<&str, usize> = raw
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| (img.id.as_str(), i))
        .collect();
    for (i, img) in raw.images.iter().enumerate() {
        if img.width == 0 || img.height == 0 {
            return Err(Error::validation(format!(
                "images[{i}] (`{}`): width and height must be positive",
                img.id
            )));
        }
    }

    let mut warnings = Vec::new();
    let mut gt: Vec<Vec<LabeledBox>> = vec![Vec::new(); raw.images.len()];
    let mut multi: Vec<Vec<AnnotatedBox>> = vec![Vec::new(); raw.images.len()];
    let mut fused: Vec<Vec<FusedBox>> = vec![Vec::new(); raw.images.len()];
    let mut preds: Vec<Vec<ScoredBox>> = vec![Vec::new(); raw.images.len()];

    for (i, a) in raw.annotations.iter().enumerate() {
        let fail = |msg: String| {
            Error::validation(format!("annotations[{i}] (image `{}`): {msg}", a.image_id))
        };
        let Some(&img_pos) = image_index.get(a.image_id.as_str()) else {
            return Err(fail("unknown image id".into()));
        };
        let img = &raw.images[img_pos];
        if !known_categories.contains(&a.category_id) {
            return Err(fail(format!("unknown category id {}", a.category_id)));
        }
        let [x1, y1, x2, y2] = a.bbox;
        let mut bbox = BBox::new(x1, y1, x2, y2).map_err(|e| fail(e.to_string()))?;
        let (w, h) = (img.width as f64, img.height as f64);
        if !bbox.is_within(w, h) {
            let t = OVERFLOW_TOLERANCE;
            if x1 < -t || y1 < -t || x2 > w + t || y2 > h + t {
                return Err(fail(format!(
                    "box {:?} exceeds the {}x{} image by more than {t}px",
                    a.bbox, img.width, img.height
                )));
            }
            bbox = bbox.clip(w, h);
            let msg = format!(
                "annotations[{i}] (image `{}`): box {:?} clipped to the {}x{} image",
                a.image_id, a.bbox, img.width, img.height
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }

        let forbid = |present: bool, field: &str| -> Result<()> {
            if present {
                Err(fail(format!("field `{field}` is not allowed in a `{kind}` file")))
            } else {
                Ok(())
            }
        };
        if kind != DatasetKind::MultiAnnotator {
            forbid(a.annotator_id.is_some(), "annotator_id")?;
            forbid(a.weight.is_some(), "weight")?;
        }
        if kind != DatasetKind::Fused {
            forbid(a.confidence.is_some(), "confidence")?;
            forbid(a.cluster_size.is_some(), "cluster_size")?;
            forbid(a.contributors.is_some(), "contributors")?;
        }
        if kind != DatasetKind::Predictions {
            forbid(a.score.is_some(), "score")?;
        }

        match kind {
            DatasetKind::GroundTruth => gt[img_pos].push(LabeledBox {
                bbox,
                category: a.category_id,
            }),
            DatasetKind::MultiAnnotator => {
                let Some(who) = &a.annotator_id else {
                    return Err(fail("missing annotator_id".into()));
                };
                let Some(&p) = proficiency.get(who.as_str()) else {
                    return Err(fail(format!("unknown annotator id `{who}`")));
                };
                let weight = a.weight.unwrap_or(p);
                if !(weight > 0.0 && weight <= 1.0) {
                    return Err(fail(format!("weight {weight} outside (0, 1]")));
                }
                multi[img_pos].push(AnnotatedBox {
                    bbox,
                    category: a.category_id,
                    annotator: who.clone(),
                    weight,
                });
            }
            DatasetKind::Fused => {
                let Some(c) = a.confidence else {
                    return Err(fail("missing confidence".into()));
                };
                let cluster_size = a.cluster_size.unwrap_or(1);
                if cluster_size == 0 {
                    return Err(fail("cluster_size must be at least 1".into()));
                }
                match mode {
                    ConfidenceMode::NormalizedAgreement if !(c > 0.0 && c <= 1.0) => {
                        return Err(fail(format!("confidence {c} outside (0, 1]")));
                    }
                    ConfidenceMode::RawCount if c != cluster_size as f64 => {
                        return Err(fail(format!(
                            "raw_count confidence {c} differs from cluster_size {cluster_size}"
                        )));
                    }
                    _ => {}
                }
                let contributors: BTreeSet<String> =
                    a.contributors.clone().unwrap_or_default().into_iter().collect();
                if !annotators.is_empty() {
                    if let Some(who) = contributors.iter().find(|c| !proficiency.contains_key(c.as_str())) {
                        return Err(fail(format!("unknown contributor `{who}`")));
                    }
                }
                fused[img_pos].push(FusedBox {
                    bbox,
                    category: a.category_id,
                    confidence: c,
                    cluster_size,
                    contributing_annotators: contributors,
                });
            }
            DatasetKind::Predictions => {
                let Some(s) = a.score else {
                    return Err(fail("missing score".into()));
                };
                if !(0.0..=1.0).contains(&s) {
                    return Err(fail(format!("score {s} outside [0, 1]")));
                }
                preds[img_pos].push(ScoredBox::new(bbox, a.category_id, s));
            }
        }
    }

    fn scenes<T>(images: &[ImageInfo], boxes: Vec<Vec<T>>) -> Vec<SceneRecord<T>> {
        images
            .iter()
            .zip(boxes)
            .map(|(img, b)| SceneRecord::new(img.id.clone(), img.width, img.height, b))
            .collect()
    }
    let annotations = match kind {
        DatasetKind::GroundTruth => Annotations::GroundTruth(scenes(&raw.images, gt)),
        DatasetKind::MultiAnnotator => Annotations::MultiAnnotator(scenes(&raw.images, multi)),
        DatasetKind::Fused => Annotations::Fused {
            mode,
            scenes: scenes(&raw.images, fused),
        },
        DatasetKind::Predictions => Annotations::Predictions(scenes(&raw.images, preds)),
    };

    Ok(Parsed {
        dataset: DatasetFile {
            categories: raw.categories,
            annotators,
            annotations,
        },
        warnings,
    })
}

fn check_kind(parsed: Parsed, expected: Option<DatasetKind>) -> Result<Parsed> {
    match expected {
        Some(k) if k != parsed.dataset.kind() => Err(Error::KindMismatch {
            expected: k,
            found: parsed.dataset.kind(),
        }),
        _ => Ok(parsed),
    }
}

/// Parses and validates a dataset file. `expected` of `None` accepts any kind.
pub fn parse_bytes(input: &[u8], expected: Option<DatasetKind>) -> Result<Parsed> {
    let raw: RawFile = serde_json::from_slice(input).map_err(json_error)?;
    check_kind(from_raw(raw)?, expected)
}

pub fn parse_str(input: &str, expected: Option<DatasetKind>) -> Result<Parsed> {
    parse_bytes(input.as_bytes(), expected)
}

pub fn read_path(path: impl AsRef<Path>, expected: Option<DatasetKind>) -> Result<Parsed> {
    let bytes = std::fs::read(path)?;
    parse_bytes(&bytes, expected)
}

/// Box layout of an external file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExternalDialect {
    /// `[x1, y1, x2, y2]`.
    CornerForm,
    /// `[x, y, width, height]`.
    WidthHeightForm,
}

impl std::str::FromStr for ExternalDialect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corner_form" => Ok(Self::CornerForm),
            "width_height_form" => Ok(Self::WidthHeightForm),
            other => Err(Error::invalid(format!(
                "unknown dialect `{other}` (expected corner_form or width_height_form)"
            ))),
        }
    }
}

/// Ingests a loosely formatted external file: numeric image, annotator and
/// contributor ids are turned into strings, `format_version` may be omitted,
/// and boxes are read in the given dialect.
pub fn convert_external_str(input: &str, dialect: &str) -> Result<Parsed> {
    let dialect: ExternalDialect = dialect.parse()?;
    let mut doc: Value = serde_json::from_str(input).map_err(json_error)?;
    let Some(obj) = doc.as_object_mut() else {
        return Err(Error::validation("top-level value must be an object"));
    };
    obj.entry("format_version")
        .or_insert(Value::from(FORMAT_VERSION));

    fn stringify(v: &mut Value) {
        if let Value::Number(n) = v {
            *v = Value::String(n.to_string());
        }
    }
    for list in ["images", "annotators"] {
        if let Some(Value::Array(items)) = obj.get_mut(list) {
            for it in items {
                if let Some(id) = it.get_mut("id") {
                    stringify(id);
                }
            }
        }
    }
    if let Some(Value::Array(items)) = obj.get_mut("annotations") {
        for (i, it) in items.iter_mut().enumerate() {
            for key in ["image_id", "annotator_id"] {
                if let Some(v) = it.get_mut(key) {
                    stringify(v);
                }
            }
            if let Some(Value::Array(who)) = it.get_mut("contributors") {
                who.iter_mut().for_each(stringify);
            }
            if dialect == ExternalDialect::WidthHeightForm {
                let Some(bbox) = it.get_mut("bbox") else {
                    continue;
                };
                let nums: Option<Vec<f64>> = bbox
                    .as_array()
                    .map(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
                    .unwrap_or(None);
                let Some(nums) = nums.filter(|n| n.len() == 4) else {
                    return Err(Error::validation(format!(
                        "annotations[{i}]: bbox must be four numbers"
                    )));
                };
                let b = BBox::from_xywh(nums[0], nums[1], nums[2], nums[3])
                    .map_err(|e| Error::validation(format!("annotations[{i}]: {e}")))?;
                *bbox = serde_json::to_value(b.to_array()).map_err(json_error)?;
            }
        }
    }
    let raw: RawFile = serde_json::from_value(doc).map_err(json_error)?;
    from_raw(raw)
}

pub fn convert_external(path: impl AsRef<Path>, dialect: &str) -> Result<Parsed> {
    let text = std::fs::read_to_string(path)?;
    convert_external_str(&text, dialect)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWeightRow {
    image_id: String,
    category_id: CategoryId,
    bbox: [f64; 4],
    weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWeights {
    format_version: u32,
    kind: String,
    images: Vec<ImageInfo>,
    weights: Vec<RawWeightRow>,
}

pub const WEIGHTS_KIND: &str = "loss_weights";

impl WeightExport {
    fn to_raw(&self) -> RawWeights {
        let mut ordered: Vec<&ImageWeights> = self.images.iter().collect();
        ordered.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        RawWeights {
            format_version: FORMAT_VERSION,
            kind: WEIGHTS_KIND.to_owned(),
            images: ordered
                .iter()
                .map(|i| ImageInfo {
                    id: i.image_id.clone(),
                    width: i.width,
                    height: i.height,
                })
                .collect(),
            weights: ordered
                .iter()
                .flat_map(|i| {
                    i.rows.iter().map(|r| RawWeightRow {
                        image_id: i.image_id.clone(),
                        category_id: r.category,
                        bbox: r.bbox.to_array(),
                        weight: r.weight,
                    })
                })
                .collect(),
        }
    }

    pub fn to_canonical_string(&self) -> Result<String> {
        let raw = self.to_raw();
        Self::from_raw(raw.clone())?;
        let mut out = String::from("{\n");
        out.push_str(&format!("  \"format_version\": {},\n", raw.format_version));
        out.push_str(&format!("  \"kind\": {},\n", to_line(&raw.kind)));
        push_array(&mut out, "images", &raw.images, false);
        push_array(&mut out, "weights", &raw.weights, true);
        out.push_str("}\n");
        Ok(out)
    }

    pub fn write_path(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_canonical_string()?)?;
        Ok(())
    }

    pub fn parse_bytes(input: &[u8]) -> Result<Self> {
        let raw: RawWeights = serde_json::from_slice(input).map_err(json_error)?;
        Self::from_raw(raw)
    }

    pub fn parse_str(input: &str) -> Result<Self> {
        Self::parse_bytes(input.as_bytes())
    }

    pub fn read_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_bytes(&std::fs::read(path)?)
    }

    fn from_raw(raw: RawWeights) -> Result<Self> {
        if raw.format_version != FORMAT_VERSION {
            return Err(Error::validation(format!(
                "unsupported format_version {}",
                raw.format_version
            )));
        }
        if raw.kind != WEIGHTS_KIND {
            return Err(Error::validation(format!(
                "expected kind `{WEIGHTS_KIND}`, found `{}`",
                raw.kind
            )));
        }
        check_unique("image", raw.images.iter().map(|i| i.id.clone()))?;
        let index: HashMap<&str, usize> = raw
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| (img.id.as_str(), i))
            .collect();
        let mut images: Vec<ImageWeights> = raw
            .images
            .iter()
            .map(|i| ImageWeights {
                image_id: i.id.clone(),
                width: i.width,
                height: i.height,
                rows: Vec::new(),
            })
            .collect();
        for (i, r) in raw.weights.iter().enumerate() {
            let Some(&pos) = index.get(r.image_id.as_str()) else {
                return Err(Error::validation(format!(
                    "weights[{i}]: unknown image id `{}`",
                    r.image_id
                )));
            };
            let [x1, y1, x2, y2] = r.bbox;
            let bbox = BBox::new(x1, y1, x2, y2)
                .map_err(|e| Error::validation(format!("weights[{i}]: {e}")))?;
            if !(r.weight > 0.0 && r.weight <= 1.0) {
                return Err(Error::validation(format!(
                    "weights[{i}]: weight {} outside (0, 1]",
                    r.weight
                )));
            }
            images[pos].rows.push(WeightRow {
                bbox,
                category: r.category_id,
                weight: r.weight,
            });
        }
        Ok(WeightExport { images })
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FUSED: &str = r#"{
  "format_version": 1,
  "kind": "fused",
  "categories": [
    {"id":0,"name":"nodule"}
  ],
  "images": [
    {"id":"img_1","width":100,"height":100}
  ],
  "annotations": [
    {"image_id":"img_1","category_id":0,"bbox":[10.0,10.0,50.0,50.0],"confidence":0.8,"cluster_size":3,"contributors":["R1","R2","R3"]}
  ]
}
"#;

    #[test]
    fn minimal_fused_file_round_trips() {
        let p = parse_str(FUSED, Some(DatasetKind::Fused)).unwrap();
        assert!(p.warnings.is_empty());
        let f = &p.dataset.as_fused().unwrap()[0].boxes[0];
        assert_eq!(f.confidence, 0.8);
        assert_eq!(f.cluster_size, 3);
        assert_eq!(p.dataset.to_canonical_string().unwrap(), FUSED);
    }

    #[test]
    fn kind_mismatch() {
        let err = parse_str(FUSED, Some(DatasetKind::Predictions)).unwrap_err();
        assert!(matches!(
            err,
            Error::KindMismatch {
                expected: DatasetKind::Predictions,
                found: DatasetKind::Fused
            }
        ));
    }

    #[test]
    fn syntax_error_has_position() {
        let err = parse_str("{\n  \"format_version\": 1,\n  oops", None).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn multi(annotator: &str) -> String {
        format!(
            r#"{{"format_version":1,"kind":"multi_annotator",
            "categories":[{{"id":1,"name":"a"}}],
            "annotators":[{{"id":"R1","proficiency":0.9}},{{"id":"R2"}}],
            "images":[{{"id":"x","width":10,"height":10}}],
            "annotations":[
              {{"image_id":"x","category_id":1,"bbox":[0,0,5,5],"annotator_id":"R1"}},
              {{"image_id":"x","category_id":1,"bbox":[0,0,5,5],"annotator_id":"{annotator}"}}
            ]}}"#
        )
    }

    #[test]
    fn unknown_annotator_names_the_record() {
        let err = parse_str(&multi("R9"), None).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation(_)));
        assert!(msg.contains("annotations[1]"), "{msg}");
        assert!(msg.contains("R9"), "{msg}");
    }

    #[test]
    fn proficiency_defaults_to_one() {
        let p = parse_str(&multi("R2"), None).unwrap();
        assert_eq!(p.dataset.annotators[1].proficiency, 1.0);
        let scenes = p.dataset.as_multi_annotator().unwrap();
        assert_eq!(scenes[0].boxes[0].weight, 0.9);
        assert_eq!(scenes[0].boxes[1].weight, 1.0);
    }

    #[test]
    fn records_are_written_in_image_id_order() {
        let text = r#"{"format_version":1,"kind":"ground_truth","categories":[{"id":0,"name":"a"}],
            "images":[{"id":"b","width":10,"height":10},{"id":"a","width":10,"height":10}],
            "annotations":[{"image_id":"b","category_id":0,"bbox":[5,5,6,6]},
                           {"image_id":"a","category_id":0,"bbox":[2,2,3,3]},
                           {"image_id":"b","category_id":0,"bbox":[1,1,2,2]}]}"#;
        let out = parse_str(text, None).unwrap().dataset.to_canonical_string().unwrap();
        let a = out.find(r#"{"id":"a""#).unwrap();
        let b = out.find(r#"{"id":"b""#).unwrap();
        assert!(a < b);
        let first = out.find("[2.0,2.0,3.0,3.0]").unwrap();
        let second = out.find("[5.0,5.0,6.0,6.0]").unwrap();
        let third = out.find("[1.0,1.0,2.0,2.0]").unwrap();
        assert!(first < second && second < third, "{out}");
        assert_eq!(parse_str(&out, None).unwrap().dataset.to_canonical_string().unwrap(), out);
    }

    #[test]
    fn small_overflow_is_clipped_with_warning() {
        let text = r#"{"format_version":1,"kind":"ground_truth","categories":[{"id":0,"name":"a"}],
            "images":[{"id":"i","width":10,"height":10}],
            "annotations":[{"image_id":"i","category_id":0,"bbox":[-0.5,0,10.75,10]}]}"#;
        let p = parse_str(text, None).unwrap();
        assert_eq!(p.warnings.len(), 1);
        let b = p.dataset.as_ground_truth().unwrap()[0].boxes[0].bbox;
        assert_eq!(b.to_array(), [0.0, 0.0, 10.0, 10.0]);

        let far = text.replace("10.75", "12.5");
        assert!(matches!(parse_str(&far, None), Err(Error::Validation(_))));
    }

    #[test]
    fn kind_specific_fields_are_enforced() {
        let base = r#"{"format_version":1,"kind":"KIND","categories":[{"id":0,"name":"a"}],
            "images":[{"id":"i","width":10,"height":10}],
            "annotations":[{"image_id":"i","category_id":0,"bbox":[0,0,1,1]EXTRA}]}"#;
        let case = |kind: &str, extra: &str| {
            parse_str(&base.replace("KIND", kind).replace("EXTRA", extra), None)
        };
        assert!(case("predictions", r#","score":0.5"#).is_ok());
        assert!(case("predictions", "").is_err());
        assert!(case("predictions", r#","score":1.5"#).is_err());
        assert!(case("fused", r#","confidence":0.0"#).is_err());
        assert!(case("fused", r#","confidence":1.0"#).is_ok());
        assert!(case("ground_truth", r#","score":0.5"#).is_err());
        assert!(case("ground_truth", r#","colour":"red""#).is_err());
        assert!(case("multi_annotator", "").is_err());
    }

    #[test]
    fn reference_errors() {
        let text = r#"{"format_version":1,"kind":"ground_truth","categories":[{"id":0,"name":"a"}],
            "images":[{"id":"i","width":10,"height":10}],
            "annotations":[{"image_id":"IMG","category_id":CAT,"bbox":[0,0,1,1]}]}"#;
        assert!(parse_str(&text.replace("IMG", "j").replace("CAT", "0"), None).is_err());
        assert!(parse_str(&text.replace("IMG", "i").replace("CAT", "7"), None).is_err());
        assert!(parse_str(&text.replace("IMG", "i").replace("CAT", "0"), None).is_ok());
        let bad_version = text.replace("IMG", "i").replace("CAT", "0").replace("\"format_version\":1", "\"format_version\":2");
        assert!(parse_str(&bad_version, None).is_err());
    }

    #[test]
    fn external_width_height_dialect() {
        let text = r#"{"kind":"ground_truth","categories":[{"id":3,"name":"a"}],
            "images":[{"id":17,"width":100,"height":100}],
            "annotations":[{"image_id":17,"category_id":3,"bbox":[10,10,40,40]}]}"#;
        let p = convert_external_str(text, "width_height_form").unwrap();
        let scenes = p.dataset.as_ground_truth().unwrap();
        assert_eq!(scenes[0].image_id, "17");
        assert_eq!(scenes[0].boxes[0].bbox.to_array(), [10.0, 10.0, 50.0, 50.0]);

        let p = convert_external_str(text, "corner_form").unwrap();
        let b = p.dataset.as_ground_truth().unwrap()[0].boxes[0].bbox;
        assert_eq!(b.to_array(), [10.0, 10.0, 40.0, 40.0]);

        let neg = text.replace("[10,10,40,40]", "[10,10,-4,40]");
        assert!(matches!(
            convert_external_str(&neg, "width_height_form"),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            convert_external_str(text, "polar"),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn weights_round_trip() {
        let w = WeightExport {
            images: vec![ImageWeights {
                image_id: "a".into(),
                width: 20,
                height: 20,
                rows: vec![WeightRow {
                    bbox: BBox::new(1.0, 1.0, 3.0, 3.0).unwrap(),
                    category: 2,
                    weight: 0.8 / 3.0,
                }],
            }],
        };
        let s = w.to_canonical_string().unwrap();
        let back = WeightExport::parse_str(&s).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.images[0].rows[0].weight.to_bits(), (0.8f64 / 3.0).to_bits());
        assert_eq!(back.to_canonical_string().unwrap(), s);
    }
}
