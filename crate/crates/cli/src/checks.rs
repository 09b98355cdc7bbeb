//! The `check` subcommand: a named invariant suite. Each property prints one
//! `name: pass`/`name: FAIL` line; the first failure makes the process exit 1
//! with that property's name.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use ssc_core::attention::{deformable_attn_2d, DeformableAttnParams};
use ssc_core::geometry::{lift_pixel, world_to_image, Projection};
use ssc_core::loss::{
    scene_class_affinity, total_loss, voxel_softmax, weighted_cross_entropy, AffinityMode,
    ClassWeights, VoxelLabels,
};
use ssc_core::numerics::{bilinear_sample, finite_diff_check};
use ssc_core::pipeline::{decoder_layer, MultiScaleFeatures, PipelineParams};
use ssc_core::Tensor;

use crate::{load_config, runner, AppError, AppResult};

struct Suite {
    failed: Option<String>,
}

impl Suite {
    fn property(&mut self, name: &str, run: impl FnOnce() -> Result<(), String>) {
        match run() {
            Ok(()) => println!("{name}: pass"),
            Err(detail) => {
                println!("{name}: FAIL ({detail})");
                if self.failed.is_none() {
                    self.failed = Some(name.to_string());
                }
            }
        }
    }
}

pub fn check(config: Option<&Path>, seed: Option<u64>, negative_control: bool) -> AppResult<()> {
    let mut rc = load_config(config)?;
    if let Some(s) = seed {
        rc.seed = s;
    }
    let mut suite = Suite { failed: None };

    suite.property("geometry_round_trip", || geometry_round_trip(rc.seed));
    suite.property("attention_degenerate_reduction", || {
        attention_degenerate_reduction(rc.seed)
    });
    suite.property("gradient_check", || gradient_check(rc.seed, negative_control));
    suite.property("loss_identity", || loss_identity(rc.seed));
    suite.property("loss_anchor", loss_anchor);
    suite.property("fov_locality", || fov_locality(&rc));
    suite.property("run_determinism", || run_determinism(&rc));
    suite.property("metrics_identity", || metrics_identity(rc.seed));

    match suite.failed {
        None => Ok(()),
        Some(name) => Err(AppError::Invariant(name)),
    }
}

fn geometry_round_trip(seed: u64) -> Result<(), String> {
    let rc = ssc_core::config::RunConfig::default();
    let grid = rc.pipeline.output_grid();
    let cam = ssc_core::scene::default_camera(&grid, 64, 48)
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xA1);
    for _ in 0..500 {
        let pixel = [rng.gen_range(0.0..63.0), rng.gen_range(0.0..47.0)];
        let depth = rng.gen_range(0.5..10.0);
        let world = lift_pixel(&cam, pixel, depth).map_err(|e| e.to_string())?;
        match world_to_image(&cam, world) {
            Projection::Pixel { norm, depth: z } => {
                let back = [norm[0] * 63.0, norm[1] * 47.0];
                let err = (back[0] - pixel[0])
                    .abs()
                    .max((back[1] - pixel[1]).abs())
                    .max((z - depth).abs());
                if err > 1e-9 {
                    return Err(format!("round-trip error {err:.3e}"));
                }
            }
            Projection::BehindCamera => return Err("point fell behind camera".into()),
        }
    }
    Ok(())
}

fn attention_degenerate_reduction(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xB2);
    let c = 6;
    let fmap = Tensor::from_fn(&[5, 7, c], |_| rng.gen_range(-1.0..1.0));
    let params = DeformableAttnParams::degenerate(c, 1, 2);
    let queries = Tensor::from_fn(&[4, c], |_| rng.gen_range(-1.0..1.0));
    let refs = Tensor::from_fn(&[4, 2], |_| rng.gen_range(0.1..0.9));
    let got = deformable_attn_2d(&params, &queries, &refs, std::slice::from_ref(&fmap))
        .map_err(|e| e.to_string())?;
    for q in 0..4 {
        let p = [refs.at(&[q, 0]), refs.at(&[q, 1])];
        let want = bilinear_sample(&fmap, p).map_err(|e| e.to_string())?;
        for ch in 0..c {
            let d = (got.at(&[q, ch]) - want[ch]).abs();
            if d > 1e-12 {
                return Err(format!("deviation {d:.3e} from interpolation"));
            }
        }
    }
    Ok(())
}

fn gradient_check(seed: u64, negative_control: bool) -> Result<(), String> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xC3);
    let classes = 4;
    let logits = Tensor::from_fn(&[2, 2, 2, classes], |_| rng.gen_range(-2.0..2.0));
    let labels = VoxelLabels::new(
        [2, 2, 2],
        (0..8).map(|_| rng.gen_range(0..classes) as u8).collect(),
    )
    .map_err(|e| e.to_string())?;
    let weights = ClassWeights(vec![1.0, 2.0, 0.5, 1.5]);
    let (_, mut grad) =
        weighted_cross_entropy(&logits, &labels, &weights).map_err(|e| e.to_string())?;
    if negative_control {
        grad = grad.scale(2.0);
    }
    let mut f = |x: &Tensor| {
        weighted_cross_entropy(x, &labels, &weights)
            .map(|(l, _)| l)
            .unwrap_or(f64::NAN)
    };
    let err = finite_diff_check(&mut f, &logits, &grad, 1e-5).map_err(|e| e.to_string())?;
    if err > 1e-5 {
        return Err(format!("cross-entropy gradient rel. err {err:.3e}"));
    }

    // affinity gradients, both modes
    for mode in [AffinityMode::Semantic, AffinityMode::Geometric] {
        let probs = voxel_softmax(&logits).map_err(|e| e.to_string())?;
        let (_, g) = scene_class_affinity(&probs, &labels, mode).map_err(|e| e.to_string())?;
        let mut f = |p: &Tensor| {
            scene_class_affinity(p, &labels, mode)
                .map(|(l, _)| l)
                .unwrap_or(f64::NAN)
        };
        let err = finite_diff_check(&mut f, &probs, &g, 1e-6).map_err(|e| e.to_string())?;
        if err > 1e-5 {
            return Err(format!("affinity gradient rel. err {err:.3e}"));
        }
    }
    Ok(())
}

fn loss_identity(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xD4);
    let classes = 3;
    let logits = Tensor::from_fn(&[2, 2, 2, classes], |_| rng.gen_range(-2.0..2.0));
    let aux = Tensor::from_fn(&[1, 1, 1, classes], |_| rng.gen_range(-2.0..2.0));
    // clear majority class so the downsampled auxiliary label is not ignored
    let labels =
        VoxelLabels::new([2, 2, 2], vec![1, 1, 1, 0, 1, 1, 2, 1]).map_err(|e| e.to_string())?;
    let report = total_loss(&logits, &[aux], &labels, &ClassWeights::uniform(classes))
        .map_err(|e| e.to_string())?;
    let recomputed =
        report.scal_geo + report.scal_sem + report.ce + 0.5 * report.aux.iter().sum::<f64>();
    if report.total.to_bits() != recomputed.to_bits() {
        return Err("loss total is not the bitwise sum of its components".into());
    }
    Ok(())
}

fn loss_anchor() -> Result<(), String> {
    // two voxels, two classes: p(class 1) = 0.2 and 0.6, labels = [0, 1]
    let probs = Tensor::new(vec![2, 1, 1, 2], vec![0.8, 0.2, 0.4, 0.6]).unwrap();
    let labels = VoxelLabels::new([2, 1, 1], vec![0, 1]).map_err(|e| e.to_string())?;
    let (loss, _) =
        scene_class_affinity(&probs, &labels, AffinityMode::Semantic).map_err(|e| e.to_string())?;
    let class0 = -((0.8f64 / 1.2).ln() + 0.8f64.ln() + 0.6f64.ln());
    let class1 = -((0.6f64 / 0.8).ln() + 0.6f64.ln() + 0.8f64.ln());
    let oracle = 0.5 * (class0 + class1);
    if (loss - oracle).abs() > 1e-12 {
        return Err(format!("affinity {loss} vs formula {oracle}"));
    }
    if (loss - 1.0805).abs() > 1e-4 {
        return Err(format!("affinity {loss} not within 1e-4 of 1.0805"));
    }
    Ok(())
}

fn fov_locality(rc: &ssc_core::config::RunConfig) -> Result<(), String> {
    let output_grid = rc.pipeline.output_grid();
    let sample = ssc_core::scene::generate_scene(
        &output_grid,
        rc.pipeline.num_classes,
        rc.pipeline.embed_dim,
        &rc.scene,
        rc.seed,
    )
    .map_err(|e| e.to_string())?;
    let params = PipelineParams::init(&rc.pipeline, rc.seed).map_err(|e| e.to_string())?;
    let features =
        MultiScaleFeatures::new(sample.features.clone()).map_err(|e| e.to_string())?;
    let encoded =
        ssc_core::pipeline::encode_features(&params, &features).map_err(|e| e.to_string())?;
    let scene =
        ssc_core::pipeline::init_scene(&rc.pipeline, &params, &sample.camera, &sample.depth)
            .map_err(|e| e.to_string())?;

    // proposal layer touches only proposed voxels
    let after = ssc_core::pipeline::voxel_proposal_layer(&scene, &encoded, &params.proposal_stage)
        .map_err(|e| e.to_string())?;
    let dims = rc.pipeline.grid.dims;
    let c = rc.pipeline.embed_dim;
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                if scene.proposal.contains([i, j, k]) {
                    continue;
                }
                for ch in 0..c {
                    if after.embeddings.at(&[i, j, k, ch]).to_bits()
                        != scene.embeddings.at(&[i, j, k, ch]).to_bits()
                    {
                        return Err(format!("proposal layer modified voxel ({i},{j},{k})"));
                    }
                }
            }
        }
    }

    // every decoder layer leaves out-of-FOV voxels bitwise unchanged
    let mut state = after;
    let mut instances = params.instance_queries.clone();
    for (li, layer) in params.decoder.iter().enumerate() {
        let (next, q) = decoder_layer(
            &state,
            &instances,
            &encoded,
            &sample.camera,
            &sample.depth,
            layer,
            &rc.pipeline.stages,
        )
        .map_err(|e| e.to_string())?;
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    if state.fov_mask.get([i, j, k]) {
                        continue;
                    }
                    for ch in 0..c {
                        if next.embeddings.at(&[i, j, k, ch]).to_bits()
                            != state.embeddings.at(&[i, j, k, ch]).to_bits()
                        {
                            return Err(format!(
                                "layer {li} modified out-of-FOV voxel ({i},{j},{k})"
                            ));
                        }
                    }
                }
            }
        }
        state = next;
        instances = q;
    }
    Ok(())
}

fn run_determinism(rc: &ssc_core::config::RunConfig) -> Result<(), String> {
    let a = runner::execute(rc).map_err(|_| "first run failed".to_string())?;
    let b = runner::execute(rc).map_err(|_| "second run failed".to_string())?;
    if a.report != b.report {
        return Err("reports differ between identical runs".into());
    }
    if a.logits != b.logits {
        return Err("logits differ between identical runs".into());
    }
    let s = a.logits.shape().to_vec();
    let g = rc.pipeline.output_grid();
    if s != [g.dims[0], g.dims[1], g.dims[2], rc.pipeline.num_classes] {
        return Err(format!("unexpected logits shape {s:?}"));
    }
    Ok(())
}

fn metrics_identity(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xE5);
    let gt = VoxelLabels::new(
        [3, 3, 2],
        (0..18).map(|_| rng.gen_range(0..5) as u8).collect(),
    )
    .map_err(|e| e.to_string())?;
    let cm = ssc_core::metrics::confusion_matrix(&gt, &gt, 5).map_err(|e| e.to_string())?;
    let m = ssc_core::metrics::metrics(&cm);
    if m.miou != Some(1.0) {
        return Err(format!("perfect prediction mIoU {:?}", m.miou));
    }
    if m.occupancy_iou != Some(1.0) {
        return Err(format!("perfect prediction IoU {:?}", m.occupancy_iou));
    }
    Ok(())
}
