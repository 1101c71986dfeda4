//! Simulated multi-expert annotation sets.
//!
//! Ground-truth scenes are random non-overlapping boxes on a blank canvas.
//! Each simulated expert owns a transition matrix over `C` true categories
//! and `C + 1` outcomes (the extra outcome `no_obj` drops the object). For
//! every object the expert samples an outcome from its row, and if it keeps
//! the object it draws a jittered box whose IoU with the truth exceeds a
//! floor.
//!
//! Everything is a pure function of [`SimConfig`]: matrices come from one
//! ChaCha stream and each scene from its own stream keyed by scene index, so
//! scenes can be generated in parallel without changing the output.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Category, LabeledBox, SceneRecord};
use crate::error::{Error, Result};
use crate::fusion::{AnnotatedBox, Annotator};
use crate::geometry::{iou, BBox};
use crate::CategoryId;

/// Ground-truth objects in one scene never overlap more than this.
pub const MAX_TRUTH_OVERLAP: f64 = 0.3;
pub const PLACEMENT_ATTEMPTS: usize = 1000;

const JITTER_START: f64 = 0.15;
const JITTER_HALVE_EVERY: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub num_experts: usize,
    /// Shared expert proficiency `p`.
    pub proficiency: f64,
    /// Standard deviation of the diagonal draw around its mean.
    pub diag_stddev: f64,
    /// Mean of the diagonal draw; defaults to `proficiency`.
    pub diag_mean: Option<f64>,
    /// Jittered boxes keep IoU above this; defaults to `proficiency`. A floor
    /// of 1 disables jitter.
    pub jitter_iou_floor: Option<f64>,
    pub num_categories: usize,
    pub canvas_width: u32,
    pub canvas_height: u32,
    /// Inclusive range of objects per scene.
    pub objects_per_scene: (usize, usize),
    /// Inclusive range of box side lengths, in pixels.
    pub object_size: (u32, u32),
    pub num_scenes: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_experts: 3,
            proficiency: 0.8,
            diag_stddev: 0.05,
            diag_mean: None,
            jitter_iou_floor: None,
            num_categories: 10,
            canvas_width: 256,
            canvas_height: 256,
            objects_per_scene: (1, 4),
            object_size: (20, 64),
            num_scenes: 1000,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn diagonal_mean(&self) -> f64 {
        self.diag_mean.unwrap_or(self.proficiency)
    }

    pub fn iou_floor(&self) -> f64 {
        self.jitter_iou_floor.unwrap_or(self.proficiency)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.num_experts == 0 {
            return bad("number of experts must be at least 1".into());
        }
        if !(self.proficiency > 0.0 && self.proficiency < 1.0) {
            return bad(format!(
                "proficiency must lie in (0, 1), got {}",
                self.proficiency
            ));
        }
        if !(self.diag_stddev >= 0.0 && self.diag_stddev.is_finite()) {
            return bad(format!(
                "diagonal stddev must be finite and nonnegative, got {}",
                self.diag_stddev
            ));
        }
        let m = self.diagonal_mean();
        if !(m > 0.0 && m <= 1.0) {
            return bad(format!("diagonal mean must lie in (0, 1], got {m}"));
        }
        let f = self.iou_floor();
        if !(f > 0.0 && f <= 1.0) {
            return bad(format!("jitter IoU floor must lie in (0, 1], got {f}"));
        }
        if self.num_categories == 0 {
            return bad("number of categories must be at least 1".into());
        }
        if self.canvas_width == 0 || self.canvas_height == 0 {
            return bad("canvas must be nonempty".into());
        }
        let (lo, hi) = self.objects_per_scene;
        if lo > hi {
            return bad(format!("empty objects-per-scene range {lo}..={hi}"));
        }
        let (lo, hi) = self.object_size;
        if lo == 0 || lo > hi {
            return bad(format!("bad object size range {lo}..={hi}"));
        }
        if hi > self.canvas_width || hi > self.canvas_height {
            return bad(format!(
                "objects up to {hi}px do not fit a {}x{} canvas",
                self.canvas_width, self.canvas_height
            ));
        }
        Ok(())
    }

    pub fn categories(&self) -> Vec<Category> {
        (0..self.num_categories)
            .map(|i| Category::new(i as CategoryId, format!("digit_{i}")))
            .collect()
    }

    pub fn annotators(&self) -> Vec<Annotator> {
        (1..=self.num_experts)
            .map(|k| Annotator {
                id: expert_id(k),
                proficiency: self.proficiency,
            })
            .collect()
    }
}

pub fn expert_id(k: usize) -> String {
    format!("E{k}")
}

pub fn image_id(index: usize) -> String {
    format!("img_{index:06}")
}

/// Row-stochastic confusion matrix of one expert: `C` rows (true category)
/// by `C + 1` columns (reported category, then `no_obj`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub expert: String,
    pub entries: Vec<Vec<f64>>,
}

impl TransitionMatrix {
    /// Builds a matrix from its diagonal, spreading `1 - a_ii` evenly over
    /// the other `C` outcomes of each row.
    pub fn from_diagonal(expert: impl Into<String>, diagonal: &[f64]) -> Self {
        let c = diagonal.len();
        let entries = diagonal
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let off = (1.0 - a) / c as f64;
                let mut row = vec![off; c + 1];
                row[i] = a;
                row
            })
            .collect();
        Self {
            expert: expert.into(),
            entries,
        }
    }

    pub fn num_categories(&self) -> usize {
        self.entries.len()
    }

    /// Column index of the `no_obj` outcome.
    pub fn no_obj(&self) -> usize {
        self.entries.len()
    }

    pub fn row(&self, category: usize) -> &[f64] {
        &self.entries[category]
    }

    pub fn diagonal(&self, category: usize) -> f64 {
        self.entries[category][category]
    }

    /// Checks stochasticity, nonnegativity, `a_ii` in `[0.5, 1]` and strict
    /// diagonal dominance.
    pub fn validate(&self) -> Result<()> {
        let c = self.entries.len();
        for (i, row) in self.entries.iter().enumerate() {
            let fail = |m: String| Err(Error::validation(format!("{} row {i}: {m}", self.expert)));
            if row.len() != c + 1 {
                return fail(format!("expected {} columns, got {}", c + 1, row.len()));
            }
            if row.iter().any(|v| !(*v >= 0.0)) {
                return fail("negative entry".into());
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return fail(format!("sums to {s}"));
            }
            let a = row[i];
            if !(0.5..=1.0).contains(&a) {
                return fail(format!("diagonal {a} outside [0.5, 1]"));
            }
            if row.iter().enumerate().any(|(j, v)| j != i && *v >= a) {
                return fail("not diagonally dominant".into());
            }
        }
        Ok(())
    }
}

/// `min(max(0.5, alpha), 1)`.
pub fn clamp_diagonal(alpha: f64) -> f64 {
    alpha.max(0.5).min(1.0)
}

/// Draws one diagonal entry per row from `Normal(mean, stddev)`, clamped.
pub fn build_transition_matrix<R: Rng + ?Sized>(
    expert_index: usize,
    config: &SimConfig,
    rng: &mut R,
) -> Result<TransitionMatrix> {
    config.validate()?;
    let normal = Normal::new(config.diagonal_mean(), config.diag_stddev)
        .map_err(|e| Error::invalid(format!("diagonal distribution: {e}")))?;
    let diagonal: Vec<f64> = (0..config.num_categories)
        .map(|_| clamp_diagonal(normal.sample(rng)))
        .collect();
    Ok(TransitionMatrix::from_diagonal(expert_id(expert_index), &diagonal))
}

/// Rejection-samples a box with IoU strictly above `iou_floor` against
/// `true_box`, clipped to the canvas.
///
/// Each coordinate moves by up to `beta` times the box side; `beta` starts at
/// 0.15 and halves after every 20 rejections. A floor of 1 or more, or a
/// zero-area truth, returns the truth unchanged.
pub fn jitter_box<R: Rng + ?Sized>(
    true_box: &BBox,
    iou_floor: f64,
    canvas: (f64, f64),
    rng: &mut R,
) -> BBox {
    let (cw, ch) = canvas;
    let (w, h) = (true_box.width(), true_box.height());
    if iou_floor >= 1.0 || w <= 0.0 || h <= 0.0 {
        return true_box.clip(cw, ch);
    }
    let mut beta = JITTER_START;
    let mut rejections = 0usize;
    loop {
        if beta < 1e-15 {
            return true_box.clip(cw, ch);
        }
        let mut u = || rng.random_range(-1.0..=1.0) * beta;
        let (dx1, dy1, dx2, dy2) = (u() * w, u() * h, u() * w, u() * h);
        let cand = BBox::new(
            true_box.x1() + dx1,
            true_box.y1() + dy1,
            true_box.x2() + dx2,
            true_box.y2() + dy2,
        );
        if let Ok(cand) = cand.map(|b| b.clip(cw, ch)) {
            if iou(&cand, true_box) > iou_floor {
                return cand;
            }
        }
        rejections += 1;
        if rejections % JITTER_HALVE_EVERY == 0 {
            beta *= 0.5;
        }
    }
}

/// What one expert did with one ground-truth object.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertOutcome {
    pub truth_index: usize,
    /// Reported category, `None` for `no_obj`.
    pub category: Option<CategoryId>,
    pub bbox: Option<BBox>,
}

/// Per-object outcomes of one expert on one scene.
pub fn simulate_expert_outcomes<R: Rng + ?Sized>(
    scene: &SceneRecord<LabeledBox>,
    matrix: &TransitionMatrix,
    config: &SimConfig,
    rng: &mut R,
) -> Result<Vec<ExpertOutcome>> {
    let canvas = (scene.width as f64, scene.height as f64);
    let floor = config.iou_floor();
    let no_obj = matrix.no_obj();
    scene
        .boxes
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let row = matrix
                .entries
                .get(g.category as usize)
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "category {} outside the {}-category matrix",
                        g.category,
                        matrix.num_categories()
                    ))
                })?;
            let pick = WeightedIndex::new(row)
                .map_err(|e| Error::invalid(format!("transition row {}: {e}", g.category)))?
                .sample(rng);
            if pick == no_obj {
                return Ok(ExpertOutcome {
                    truth_index: k,
                    category: None,
                    bbox: None,
                });
            }
            Ok(ExpertOutcome {
                truth_index: k,
                category: Some(pick as CategoryId),
                bbox: Some(jitter_box(&g.bbox, floor, canvas, rng)),
            })
        })
        .collect()
}

/// Boxes one expert draws for a scene; `no_obj` outcomes are omitted.
pub fn simulate_expert<R: Rng + ?Sized>(
    scene: &SceneRecord<LabeledBox>,
    matrix: &TransitionMatrix,
    config: &SimConfig,
    rng: &mut R,
) -> Result<Vec<AnnotatedBox>> {
    Ok(simulate_expert_outcomes(scene, matrix, config, rng)?
        .into_iter()
        .filter_map(|o| {
            Some(AnnotatedBox {
                bbox: o.bbox?,
                category: o.category?,
                annotator: matrix.expert.clone(),
                weight: config.proficiency,
            })
        })
        .collect())
}

fn place_objects<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R, image: &str) -> Vec<LabeledBox> {
    let (lo, hi) = config.objects_per_scene;
    let count = rng.random_range(lo..=hi);
    let (smin, smax) = config.object_size;
    let mut placed: Vec<LabeledBox> = Vec::with_capacity(count);
    for _ in 0..count {
        let category = rng.random_range(0..config.num_categories) as CategoryId;
        let mut done = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let w = rng.random_range(smin..=smax);
            let h = rng.random_range(smin..=smax);
            let x = rng.random_range(0..=config.canvas_width - w);
            let y = rng.random_range(0..=config.canvas_height - h);
            let bbox = BBox::from_xywh(x as f64, y as f64, w as f64, h as f64)
                .expect("integer box is valid");
            if placed.iter().all(|o| iou(&o.bbox, &bbox) <= MAX_TRUTH_OVERLAP) {
                placed.push(LabeledBox { bbox, category });
                done = true;
                break;
            }
        }
        if !done {
            log::warn!("{image}: could not place an object after {PLACEMENT_ATTEMPTS} attempts, skipping it");
        }
    }
    placed
}

/// RNG for scene `index`; stream 0 is reserved for the matrices.
pub fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// One scene: its ground truth and every expert's outcomes, in expert order.
pub fn simulate_scene(
    index: usize,
    config: &SimConfig,
    matrices: &[TransitionMatrix],
) -> Result<(SceneRecord<LabeledBox>, Vec<Vec<ExpertOutcome>>)> {
    let mut rng = scene_rng(config.seed, index);
    let id = image_id(index);
    let objects = place_objects(config, &mut rng, &id);
    let scene = SceneRecord::new(id, config.canvas_width, config.canvas_height, objects);
    let outcomes = matrices
        .iter()
        .map(|m| simulate_expert_outcomes(&scene, m, config, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((scene, outcomes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub categories: Vec<Category>,
    pub annotators: Vec<Annotator>,
    pub matrices: Vec<TransitionMatrix>,
    pub ground_truth: Vec<SceneRecord<LabeledBox>>,
    /// All experts' boxes per scene, grouped by expert in expert order.
    pub annotations: Vec<SceneRecord<AnnotatedBox>>,
}

impl SimulatedDataset {
    /// The boxes of a single expert, every scene included.
    pub fn expert_view(&self, expert: &str) -> Vec<SceneRecord<AnnotatedBox>> {
        self.annotations
            .iter()
            .map(|s| {
                s.with_boxes(
                    s.boxes
                        .iter()
                        .filter(|b| b.annotator == expert)
                        .cloned()
                        .collect(),
                )
            })
            .collect()
    }
}

pub fn transition_matrices(config: &SimConfig) -> Result<Vec<TransitionMatrix>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (1..=config.num_experts)
        .map(|k| build_transition_matrix(k, config, &mut rng))
        .collect()
}

pub fn generate_dataset(config: &SimConfig) -> Result<SimulatedDataset> {
    config.validate()?;
    let matrices = transition_matrices(config)?;
    let annotators = config.annotators();

    let scenes = (0..config.num_scenes)
        .into_par_iter()
        .map(|i| simulate_scene(i, config, &matrices))
        .collect::<Result<Vec<_>>>()?;

    let mut ground_truth = Vec::with_capacity(scenes.len());
    let mut annotations = Vec::with_capacity(scenes.len());
    for (scene, outcomes) in scenes {
        let boxes = outcomes
            .iter()
            .zip(&matrices)
            .flat_map(|(outs, m)| {
                outs.iter().filter_map(|o| {
                    Some(AnnotatedBox {
                        bbox: o.bbox?,
                        category: o.category?,
                        annotator: m.expert.clone(),
                        weight: config.proficiency,
                    })
                })
            })
            .collect();
        annotations.push(scene.with_boxes(boxes));
        ground_truth.push(scene);
    }

    Ok(SimulatedDataset {
        categories: config.categories(),
        annotators,
        matrices,
        ground_truth,
        annotations,
    })
}
