//! The `run`, `eval`, `export` and `gen` subcommands.

use std::path::Path;

use ssc_core::config::RunConfig;

use crate::{load_config, read_input, AppError, AppResult};

pub struct RunArtifacts {
    pub report: String,
    pub logits: ssc_core::Tensor,
    pub pred: ssc_core::loss::VoxelLabels,
    pub gt: ssc_core::loss::VoxelLabels,
}

/// Execute a full run in memory: scene generation, forward pass, losses and
/// metrics, with the report rendered to a string.
pub fn execute(rc: &RunConfig) -> AppResult<RunArtifacts> {
    let output_grid = rc.pipeline.output_grid();
    let sample = ssc_core::scene::generate_scene(
        &output_grid,
        rc.pipeline.num_classes,
        rc.pipeline.embed_dim,
        &rc.scene,
        rc.seed,
    )?;
    let params = ssc_core::pipeline::PipelineParams::init(&rc.pipeline, rc.seed)?;
    let features = ssc_core::pipeline::MultiScaleFeatures::new(sample.features.clone())?;
    let out = ssc_core::pipeline::forward_pipeline(
        &rc.pipeline,
        &params,
        &sample.camera,
        &sample.depth,
        &features,
    )?;

    let freqs = sample.labels.class_frequencies(rc.pipeline.num_classes);
    let weights = ssc_core::metrics::class_weights_from_frequencies(&freqs)?;
    let loss = ssc_core::loss::total_loss(&out.logits, &out.aux_logits, &sample.labels, &weights)?;

    let pred = ssc_core::metrics::argmax_labels(&out.logits)?;
    let cm = ssc_core::metrics::confusion_matrix(&pred, &sample.labels, rc.pipeline.num_classes)?;
    let metrics = ssc_core::metrics::metrics(&cm);

    let report = ssc_core::report::emit_report(rc.seed, &loss, &metrics);
    Ok(RunArtifacts {
        report,
        logits: out.logits,
        pred,
        gt: sample.labels,
    })
}

fn effective_config(
    config: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> AppResult<RunConfig> {
    let mut rc = load_config(config)?;
    if let Some(s) = seed {
        rc.seed = s;
    }
    if let Some(o) = out {
        rc.out_dir = o.display().to_string();
    }
    Ok(rc)
}

pub fn run(config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> AppResult<()> {
    let rc = effective_config(config, seed, out)?;
    let artifacts = execute(&rc)?;
    let dir = Path::new(&rc.out_dir);
    std::fs::create_dir_all(dir)
        .map_err(|e| AppError::Other(format!("cannot create {}: {e}", dir.display())))?;
    std::fs::write(dir.join("report.txt"), &artifacts.report)
        .map_err(|e| AppError::Other(e.to_string()))?;
    ssc_core::gridio::save_logits_file(&dir.join("logits.symv"), &artifacts.logits)?;
    ssc_core::gridio::save_labels_file(&dir.join("pred.symv"), &artifacts.pred)?;
    ssc_core::gridio::save_labels_file(&dir.join("gt.symv"), &artifacts.gt)?;
    print!("{}", artifacts.report);
    Ok(())
}

fn load_labels(path: &Path) -> AppResult<ssc_core::loss::VoxelLabels> {
    let bytes = read_input(path)?;
    match ssc_core::gridio::load_grid(&mut bytes.as_slice())
        .map_err(|e| AppError::usage(format!("{}: {e}", path.display())))?
    {
        ssc_core::gridio::Grid::Labels(l) => Ok(l),
        ssc_core::gridio::Grid::Logits(_) => Err(AppError::usage(format!(
            "{}: expected a label grid, found logits",
            path.display()
        ))),
    }
}

pub fn eval(pred: &Path, gt: &Path, classes: usize) -> AppResult<()> {
    let pred = load_labels(pred)?;
    let gt = load_labels(gt)?;
    let cm = ssc_core::metrics::confusion_matrix(&pred, &gt, classes)?;
    let m = ssc_core::metrics::metrics(&cm);
    let fmt = |v: Option<f64>| match v {
        Some(v) => format!("{v:.9}"),
        None => "undefined".to_string(),
    };
    println!("occupancy_iou: {}", fmt(m.occupancy_iou));
    println!("miou: {}", fmt(m.miou));
    for (i, iou) in m.per_class_iou.iter().enumerate() {
        println!("iou_{}: {}", ssc_core::report::class_name(i + 1), fmt(*iou));
    }
    Ok(())
}

pub fn export(pred: &Path, out: &Path) -> AppResult<()> {
    let bytes = read_input(pred)?;
    let logits = match ssc_core::gridio::load_grid(&mut bytes.as_slice())
        .map_err(|e| AppError::usage(format!("{}: {e}", pred.display())))?
    {
        ssc_core::gridio::Grid::Logits(l) => l,
        ssc_core::gridio::Grid::Labels(_) => {
            return Err(AppError::usage(format!(
                "{}: expected a logits grid, found labels",
                pred.display()
            )))
        }
    };
    let labels = ssc_core::metrics::argmax_labels(&logits)?;
    ssc_core::gridio::save_labels_file(out, &labels)?;
    Ok(())
}

/// Depth maps are stored as an `[H, W, 1]` single-channel logits grid;
/// invalid pixels are -1.
pub fn gen(config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> AppResult<()> {
    let rc = effective_config(config, seed, out)?;
    let grid = rc.pipeline.output_grid();
    let sample = ssc_core::scene::generate_scene(
        &grid,
        rc.pipeline.num_classes,
        rc.pipeline.embed_dim,
        &rc.scene,
        rc.seed,
    )?;
    let dir = Path::new(&rc.out_dir);
    std::fs::create_dir_all(dir)
        .map_err(|e| AppError::Other(format!("cannot create {}: {e}", dir.display())))?;
    ssc_core::gridio::save_labels_file(&dir.join("labels.symv"), &sample.labels)?;
    std::fs::write(
        dir.join("calib.txt"),
        sample.camera.to_calibration_string(),
    )
    .map_err(|e| AppError::Other(e.to_string()))?;
    let (h, w) = (sample.depth.height(), sample.depth.width());
    let depth = ssc_core::Tensor::from_fn(&[h, w, 1, 1], |idx| {
        sample.depth.get(idx[0], idx[1]).unwrap_or(-1.0)
    });
    ssc_core::gridio::save_logits_file(&dir.join("depth.symv"), &depth)?;
    Ok(())
}
