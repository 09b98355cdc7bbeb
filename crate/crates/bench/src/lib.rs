//! Shared fixtures for the criterion benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use ssc_core::geometry::VoxelGridSpec;
use ssc_core::pipeline::{PipelineConfig, QueryMode, StageFlags};
use ssc_core::scene::{generate_scene, SceneParams, SceneSample};
use ssc_core::Tensor;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Small forward-pass configuration used by the end-to-end benchmark.
pub fn bench_config() -> PipelineConfig {
    PipelineConfig {
        num_queries: 8,
        embed_dim: 16,
        decoder_layers: 2,
        encoder_layers: 1,
        heads: 2,
        sampling_points: 2,
        grid: VoxelGridSpec::new([0.0, -1.6, -0.4], [0.2, 0.2, 0.2], [16, 16, 4]).unwrap(),
        num_classes: 8,
        upsample_factor: 2,
        stages: StageFlags::default(),
        query_mode: QueryMode::Learnable,
    }
}

pub fn bench_sample(config: &PipelineConfig, seed: u64) -> SceneSample {
    let params = SceneParams {
        image_width: 32,
        image_height: 24,
        num_boxes: 3,
        max_box_extent: 6,
        ..SceneParams::default()
    };
    generate_scene(
        &config.output_grid(),
        config.num_classes,
        config.embed_dim,
        &params,
        seed,
    )
    .expect("scene generation")
}
