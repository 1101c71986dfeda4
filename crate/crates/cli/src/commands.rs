use std::path::Path;

use annofuse_core::dataset::{self, DatasetKind};
use annofuse_core::eval::{evaluate, EvalReport, Thresholds};
use annofuse_core::fusion::{fuse_dataset, ConfidenceMode, FusionConfig};
use annofuse_core::loss::export_weights;
use annofuse_core::sim::{generate_dataset, SimConfig};
use annofuse_core::{DatasetFile, Error};
use serde_json::json;

use crate::render;
use crate::{EvalArgs, FuseArgs, LossWeightsArgs, RenderArgs, SimulateArgs};

/// Exit 1 for I/O failures, 2 for bad input.
#[derive(Debug)]
pub enum CliError {
    Io(String),
    Validation(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Validation(_) => 2,
        }
    }
}

trait Context<T> {
    fn context(self, what: impl std::fmt::Display) -> Result<T, CliError>;
}

impl<T> Context<T> for Result<T, Error> {
    fn context(self, what: impl std::fmt::Display) -> Result<T, CliError> {
        self.map_err(|e| {
            let msg = format!("{what}: {e}");
            if e.is_validation() {
                CliError::Validation(msg)
            } else {
                CliError::Io(msg)
            }
        })
    }
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn read(path: &Path, kind: Option<DatasetKind>) -> Result<DatasetFile, CliError> {
    let parsed = dataset::read_path(path, kind).context(path.display())?;
    for w in &parsed.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(parsed.dataset)
}

fn write(ds: &DatasetFile, path: &Path) -> Result<(), CliError> {
    ds.write_path(path).context(path.display())?;
    log::info!("wrote {} ({} images, {} boxes)", path.display(), ds.num_images(), ds.num_annotations());
    Ok(())
}

pub fn run_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let config = SimConfig {
        num_experts: a.experts,
        proficiency: a.proficiency,
        diag_stddev: a.diag_stddev,
        diag_mean: a.diag_mean,
        jitter_iou_floor: a.jitter_iou_floor,
        num_categories: a.categories,
        canvas_width: a.width,
        canvas_height: a.height,
        objects_per_scene: (a.min_objects, a.max_objects),
        object_size: (a.min_size, a.max_size),
        num_scenes: a.scenes,
        seed: a.seed,
    };
    let sim = generate_dataset(&config).context("simulate")?;

    std::fs::create_dir_all(&a.out_dir).map_err(|e| io(&a.out_dir, e))?;
    let gt = DatasetFile::ground_truth(sim.categories.clone(), sim.ground_truth.clone());
    write(&gt, &a.out_dir.join("ground_truth.json"))?;
    let all = DatasetFile::multi_annotator(
        sim.categories.clone(),
        sim.annotators.clone(),
        sim.annotations.clone(),
    );
    write(&all, &a.out_dir.join("multi_annotator.json"))?;
    for annotator in &sim.annotators {
        let one = DatasetFile::multi_annotator(
            sim.categories.clone(),
            vec![annotator.clone()],
            sim.expert_view(&annotator.id),
        );
        write(&one, &a.out_dir.join(format!("expert_{}.json", annotator.id)))?;
    }
    let matrices = json!({
        "format_version": dataset::FORMAT_VERSION,
        "kind": "transition_matrices",
        "outcomes": sim.categories.iter().map(|c| c.name.clone()).chain(["no_obj".to_owned()]).collect::<Vec<_>>(),
        "matrices": sim.matrices,
    });
    let path = a.out_dir.join("transition_matrices.json");
    let mut text = serde_json::to_string_pretty(&matrices).expect("matrices serialize");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| io(&path, e))?;
    Ok(())
}

pub fn run_fuse(a: &FuseArgs) -> Result<(), CliError> {
    let mode: ConfidenceMode = a.confidence_mode.parse().context("--confidence-mode")?;
    let ds = read(&a.input, Some(DatasetKind::MultiAnnotator))?;
    let config = FusionConfig::new(ds.annotators.len().max(1))
        .with_threshold(a.iou_thresh)
        .with_mode(mode);
    config.validate().context("fuse")?;
    let scenes = ds.as_multi_annotator().context(a.input.display())?;
    let fused = fuse_dataset(scenes, &ds.annotators, &config).context(a.input.display())?;
    let out = DatasetFile::fused(ds.categories.clone(), ds.annotators.clone(), mode, fused);
    write(&out, &a.output)
}

pub fn run_loss_weights(a: &LossWeightsArgs) -> Result<(), CliError> {
    let ds = read(&a.input, Some(DatasetKind::Fused))?;
    let weights = export_weights(ds.as_fused().context(a.input.display())?).context(a.input.display())?;
    weights.write_path(&a.output).context(a.output.display())?;
    log::info!("wrote {} ({} weights)", a.output.display(), weights.num_rows());
    Ok(())
}

pub fn run_eval(a: &EvalArgs) -> Result<(), CliError> {
    let thresholds: Thresholds = a.thresholds.parse().context("--thresholds")?;
    let preds = read(&a.predictions, None)?;
    let truth = read(&a.truth, Some(DatasetKind::GroundTruth))?;
    if preds.categories != truth.categories {
        return Err(CliError::Validation(format!(
            "category tables of {} and {} differ",
            a.predictions.display(),
            a.truth.display()
        )));
    }
    let categories = truth.category_ids();
    let truths = truth.as_ground_truth().context(a.truth.display())?;

    let sets = match preds.kind() {
        DatasetKind::MultiAnnotator => preds.split_by_annotator().context(a.predictions.display())?,
        kind => vec![(kind.to_string(), preds.to_scored())],
    };
    let mut rows = Vec::with_capacity(sets.len());
    for (name, scored) in sets {
        let report: EvalReport =
            evaluate(&scored, truths, &categories, &thresholds).context(a.predictions.display())?;
        let cells: Vec<String> = report
            .thresholds
            .iter()
            .map(|t| format!("mAP@{}={:.4}", t.iou_threshold, t.map))
            .collect();
        if report.thresholds.len() > 1 {
            eprintln!("{name}: {} mean={:.4}", cells.join(" "), report.mean_map);
        } else {
            eprintln!("{name}: {}", cells.join(" "));
        }
        rows.push(json!({ "source": name, "report": report }));
    }
    let doc = json!({
        "format_version": dataset::FORMAT_VERSION,
        "kind": "eval_report",
        "thresholds": thresholds.values(),
        "rows": rows,
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("report serializes");
    text.push('\n');
    std::fs::write(&a.output, text).map_err(|e| io(&a.output, e))
}

pub fn run_render(a: &RenderArgs) -> Result<(), CliError> {
    let ds = read(&a.input, None)?;
    let svg = render::render_image(&ds, &a.image_id).context(a.input.display())?;
    std::fs::write(&a.output, svg).map_err(|e| io(&a.output, e))
}
