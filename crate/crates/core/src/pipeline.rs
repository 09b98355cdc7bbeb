//! The instance-query scene completion pipeline: learnable instance queries
//! and scene volume, the voxel proposal layer, the five-stage decoder stack,
//! and the dilated-convolution prediction head.
//!
//! Stage order within a decoder layer is fixed: instance<-image,
//! scene<-instance, scene self-attention, instance<-scene, instance
//! self-attention. Scene stages only update voxels inside the FOV mask;
//! out-of-FOV voxels pass through bitwise unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::attention::{
    cross_attn, deformable_attn_2d, deformable_attn_3d, residual_block, self_attn,
    AttnBlockParams, DeformableAttnParams,
};
use crate::error::{CoreError, Result};
use crate::geometry::{
    compute_fov_mask, denormalize_pixel, lift_pixel, propose_voxels, world_to_image, BoolGrid,
    CameraModel, DepthMap, Projection, VoxelGridSpec, VoxelProposal,
};
use crate::numerics::upsample_trilinear;
use crate::tensor::{LinearMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    /// Reference points are parameters (squashed into [0,1]^2 at init).
    Learnable,
    /// Reference points fixed at a stratified uniform grid.
    Detached,
    /// No instance queries; all instance stages are skipped.
    None,
}

impl std::str::FromStr for QueryMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learnable" => Ok(QueryMode::Learnable),
            "detached" => Ok(QueryMode::Detached),
            "none" => Ok(QueryMode::None),
            other => Err(CoreError::config(format!("unknown query mode `{other}`"))),
        }
    }
}

impl QueryMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            QueryMode::Learnable => "learnable",
            QueryMode::Detached => "detached",
            QueryMode::None => "none",
        }
    }
}

/// Per-stage enable flags for the decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageFlags {
    pub instance_from_image: bool,
    pub scene_from_instance: bool,
    pub scene_self: bool,
    pub instance_from_scene: bool,
    pub instance_self: bool,
}

impl Default for StageFlags {
    fn default() -> Self {
        StageFlags {
            instance_from_image: true,
            scene_from_instance: true,
            scene_self: true,
            instance_from_scene: true,
            instance_self: true,
        }
    }
}

impl StageFlags {
    pub fn all_off() -> Self {
        StageFlags {
            instance_from_image: false,
            scene_from_instance: false,
            scene_self: false,
            instance_from_scene: false,
            instance_self: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub num_queries: usize,
    pub embed_dim: usize,
    pub decoder_layers: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub sampling_points: usize,
    /// Decoder-resolution grid; output logits are upsampled from it.
    pub grid: VoxelGridSpec,
    pub num_classes: usize,
    pub upsample_factor: usize,
    pub stages: StageFlags,
    pub query_mode: QueryMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            num_queries: 100,
            embed_dim: 32,
            decoder_layers: 3,
            encoder_layers: 6,
            heads: 4,
            sampling_points: 2,
            grid: VoxelGridSpec::new([0.0, -3.2, -0.8], [0.2, 0.2, 0.2], [32, 32, 8]).unwrap(),
            num_classes: 20,
            upsample_factor: 2,
            stages: StageFlags::default(),
            query_mode: QueryMode::Learnable,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decoder_layers < 1 {
            return Err(CoreError::config("decoder_layers must be >= 1"));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(CoreError::config("embed_dim must be divisible by heads"));
        }
        if self.sampling_points == 0 {
            return Err(CoreError::config("sampling_points must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(CoreError::config("need at least empty + one class"));
        }
        if self.upsample_factor == 0 {
            return Err(CoreError::config("upsample_factor must be >= 1"));
        }
        if self.query_mode != QueryMode::None && self.num_queries == 0 {
            return Err(CoreError::config("num_queries must be >= 1"));
        }
        Ok(())
    }

    /// Grid of the final logits: decoder grid refined by the upsample factor.
    pub fn output_grid(&self) -> VoxelGridSpec {
        self.grid.refined(self.upsample_factor)
    }
}

/// Sparse contextual instance queries plus their 2D reference points.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceQueries {
    /// `[N, C]`
    pub embeddings: Tensor,
    /// `[N, 2]` in `[0,1]^2`
    pub ref_points_2d: Tensor,
    pub learnable: bool,
}

impl InstanceQueries {
    pub fn len(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.ref_points_2d.shape()[0] != self.embeddings.shape()[0] {
            return Err(CoreError::shape("query/ref point count mismatch"));
        }
        for v in self.ref_points_2d.data() {
            if !(0.0..=1.0).contains(v) {
                return Err(CoreError::domain(format!("ref point {v} outside [0,1]")));
            }
        }
        Ok(())
    }

    /// Reorder queries and reference points by `perm` (new index -> old).
    pub fn permuted(&self, perm: &[usize]) -> Result<InstanceQueries> {
        let n = self.len();
        if perm.len() != n {
            return Err(CoreError::shape("permutation length mismatch"));
        }
        let c = self.embeddings.shape()[1];
        let embeddings = Tensor::from_fn(&[n, c], |idx| self.embeddings.at(&[perm[idx[0]], idx[1]]));
        let ref_points_2d =
            Tensor::from_fn(&[n, 2], |idx| self.ref_points_2d.at(&[perm[idx[0]], idx[1]]));
        Ok(InstanceQueries {
            embeddings,
            ref_points_2d,
            learnable: self.learnable,
        })
    }
}

/// The volumetric scene state threaded through the decoder.
#[derive(Debug, Clone)]
pub struct SceneVolume {
    /// `[X, Y, Z, C]`
    pub embeddings: Tensor,
    pub fov_mask: BoolGrid,
    pub proposal: VoxelProposal,
    pub grid: VoxelGridSpec,
}

impl SceneVolume {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.embeddings.shape()[0],
            self.embeddings.shape()[1],
            self.embeddings.shape()[2],
        ];
        if dims != self.fov_mask.dims || dims != self.grid.dims {
            return Err(CoreError::shape("scene volume dims mismatch"));
        }
        for idx in self.proposal.indices() {
            if idx[0] >= dims[0] || idx[1] >= dims[1] || idx[2] >= dims[2] {
                return Err(CoreError::shape("proposal index outside grid"));
            }
        }
        Ok(())
    }
}

/// Multi-scale 2D feature maps, one `[H_l, W_l, C]` tensor per level.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleFeatures {
    pub levels: Vec<Tensor>,
}

impl MultiScaleFeatures {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        if levels.is_empty() {
            return Err(CoreError::shape("need at least one feature level"));
        }
        let c = levels[0].shape()[2];
        for l in &levels {
            if l.rank() != 3 || l.shape()[2] != c {
                return Err(CoreError::shape("inconsistent feature level shape"));
            }
        }
        Ok(MultiScaleFeatures { levels })
    }

    pub fn embed_dim(&self) -> usize {
        self.levels[0].shape()[2]
    }
}

/// One 3x3x3 dilated convolution branch of the prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3dParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation: usize,
    /// `[out][in][3][3][3]`, row-major.
    pub weight: Vec<f64>,
}

impl Conv3dParams {
    pub fn zeros(in_channels: usize, out_channels: usize, dilation: usize) -> Self {
        Conv3dParams {
            in_channels,
            out_channels,
            dilation,
            weight: vec![0.0; out_channels * in_channels * 27],
        }
    }

    pub fn init(in_channels: usize, out_channels: usize, dilation: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / ((in_channels * 27) as f64).sqrt();
        Conv3dParams {
            in_channels,
            out_channels,
            dilation,
            weight: (0..out_channels * in_channels * 27)
                .map(|_| rng.gen_range(-scale..scale))
                .collect(),
        }
    }

    /// Zero-padded dilated convolution over a `[X, Y, Z, C_in]` volume.
    pub fn apply(&self, vol: &Tensor) -> Result<Tensor> {
        let s = vol.shape();
        if vol.rank() != 4 || s[3] != self.in_channels {
            return Err(CoreError::shape("conv3d input must be [X, Y, Z, C_in]"));
        }
        let (nx, ny, nz) = (s[0], s[1], s[2]);
        let (ci, co, d) = (self.in_channels, self.out_channels, self.dilation as i64);
        let data = vol.data();
        let mut out = vec![0.0; nx * ny * nz * co];
        for x in 0..nx as i64 {
            for y in 0..ny as i64 {
                for z in 0..nz as i64 {
                    let out_off = ((x as usize * ny + y as usize) * nz + z as usize) * co;
                    for (kidx, (dx, dy, dz)) in kernel_offsets().enumerate() {
                        let (sx, sy, sz) = (x + dx * d, y + dy * d, z + dz * d);
                        if sx < 0
                            || sy < 0
                            || sz < 0
                            || sx >= nx as i64
                            || sy >= ny as i64
                            || sz >= nz as i64
                        {
                            continue;
                        }
                        let in_off = ((sx as usize * ny + sy as usize) * nz + sz as usize) * ci;
                        for o in 0..co {
                            let wbase = (o * ci) * 27 + kidx;
                            let mut acc = 0.0;
                            for i in 0..ci {
                                acc += self.weight[wbase + i * 27] * data[in_off + i];
                            }
                            out[out_off + o] += acc;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![nx, ny, nz, co], out)
    }
}

fn kernel_offsets() -> impl Iterator<Item = (i64, i64, i64)> {
    (-1..=1).flat_map(|dx| (-1..=1).flat_map(move |dy| (-1..=1).map(move |dz| (dx, dy, dz))))
}

/// Prediction head: parallel dilated 3D convolutions plus an identity branch,
/// summed and channel-mixed, then a per-voxel classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub branches: Vec<Conv3dParams>,
    pub mix: LinearMap,
    pub classifier: LinearMap,
}

impl HeadParams {
    pub fn init(embed_dim: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        HeadParams {
            branches: [1, 2, 3]
                .iter()
                .map(|&d| Conv3dParams::init(embed_dim, embed_dim, d, rng))
                .collect(),
            mix: random_map(embed_dim, embed_dim, rng),
            classifier: random_map(num_classes, embed_dim, rng),
        }
    }
}

fn random_map(out: usize, inp: usize, rng: &mut impl Rng) -> LinearMap {
    let scale = 1.0 / (inp as f64).sqrt();
    LinearMap::new(
        out,
        inp,
        (0..out * inp).map(|_| rng.gen_range(-scale..scale)).collect(),
        vec![0.0; out],
    )
    .unwrap()
}

/// A deformable attention stage with its residual-block wrapper.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformStageParams {
    pub attn: DeformableAttnParams,
    pub block: AttnBlockParams,
}

/// Parameters of one decoder layer, one bundle per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams {
    pub instance_from_image: DeformStageParams,
    pub scene_from_instance: AttnBlockParams,
    pub scene_self: DeformStageParams,
    pub instance_from_scene: DeformStageParams,
    pub instance_self: AttnBlockParams,
}

/// Everything learned: encoder layers, the proposal stage, the decoder stack,
/// the prediction head, and the initial query/volume embeddings.
#[derive(Debug, Clone)]
pub struct PipelineParams {
    pub encoder_layers: Vec<DeformStageParams>,
    pub proposal_stage: DeformStageParams,
    pub decoder: Vec<DecoderLayerParams>,
    pub head: HeadParams,
    pub instance_queries: InstanceQueries,
    /// Initial `[X, Y, Z, C]` scene embeddings.
    pub scene_init: Tensor,
}

impl PipelineParams {
    /// Deterministic initialization from a seed.
    pub fn init(config: &PipelineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let c = config.embed_dim;
        let heads = config.heads;
        let k_s = config.sampling_points;
        let ffn_hidden = 2 * c;
        let feature_levels = 2;

        let deform_stage = |levels: usize, point_dim: usize, rng: &mut ChaCha20Rng| {
            Ok::<_, CoreError>(DeformStageParams {
                attn: DeformableAttnParams::init(c, heads, k_s, levels, point_dim, rng)?,
                block: AttnBlockParams::init(c, heads, ffn_hidden, rng)?,
            })
        };

        let encoder_layers = (0..config.encoder_layers)
            .map(|_| deform_stage(feature_levels, 2, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let proposal_stage = deform_stage(feature_levels, 2, &mut rng)?;
        let decoder = (0..config.decoder_layers)
            .map(|_| {
                Ok(DecoderLayerParams {
                    instance_from_image: deform_stage(feature_levels, 2, &mut rng)?,
                    scene_from_instance: AttnBlockParams::init(c, heads, ffn_hidden, &mut rng)?,
                    scene_self: deform_stage(1, 3, &mut rng)?,
                    instance_from_scene: deform_stage(1, 3, &mut rng)?,
                    instance_self: AttnBlockParams::init(c, heads, ffn_hidden, &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = HeadParams::init(c, config.num_classes, &mut rng);

        let dims = config.grid.dims;
        let scene_init = Tensor::from_fn(&[dims[0], dims[1], dims[2], c], |_| {
            rng.gen_range(-1.0..1.0)
        });

        let n = if config.query_mode == QueryMode::None {
            0
        } else {
            config.num_queries
        };
        let embeddings = Tensor::from_fn(&[n.max(1), c], |_| rng.gen_range(-1.0..1.0));
        let ref_points_2d = match config.query_mode {
            QueryMode::Learnable => {
                // unconstrained parameterization squashed into [0,1]^2
                Tensor::from_fn(&[n.max(1), 2], |_| {
                    let raw: f64 = rng.gen_range(-2.0..2.0);
                    1.0 / (1.0 + (-raw).exp())
                })
            }
            QueryMode::Detached | QueryMode::None => stratified_grid(n.max(1)),
        };
        let instance_queries = InstanceQueries {
            embeddings,
            ref_points_2d,
            learnable: config.query_mode == QueryMode::Learnable,
        };

        Ok(PipelineParams {
            encoder_layers,
            proposal_stage,
            decoder,
            head,
            instance_queries,
            scene_init,
        })
    }
}

/// First `n` points of a stratified uniform grid over `[0,1]^2`.
pub fn stratified_grid(n: usize) -> Tensor {
    let g = (n as f64).sqrt().ceil() as usize;
    let g = g.max(1);
    Tensor::from_fn(&[n, 2], |idx| {
        let cell = idx[0];
        let (gx, gy) = (cell % g, cell / g);
        if idx[1] == 0 {
            (gx as f64 + 0.5) / g as f64
        } else {
            (gy as f64 + 0.5) / g as f64
        }
    })
}

/// Initialize the scene volume: stored embeddings plus the geometric masks.
pub fn init_scene(
    config: &PipelineConfig,
    params: &PipelineParams,
    cam: &CameraModel,
    depth: &DepthMap,
) -> Result<SceneVolume> {
    config.validate()?;
    if depth.width() != cam.width() || depth.height() != cam.height() {
        return Err(CoreError::config("depth map does not match camera"));
    }
    let scene = SceneVolume {
        embeddings: params.scene_init.clone(),
        fov_mask: compute_fov_mask(cam, &config.grid),
        proposal: propose_voxels(cam, &config.grid, depth)?,
        grid: config.grid.clone(),
    };
    scene.validate()?;
    Ok(scene)
}

/// Gather rows `[M, C]` of the volume at the given lattice indices.
fn gather_voxels(volume: &Tensor, indices: &[[usize; 3]]) -> Tensor {
    let c = volume.shape()[3];
    let (ny, nz) = (volume.shape()[1], volume.shape()[2]);
    let mut data = Vec::with_capacity(indices.len() * c);
    for idx in indices {
        let off = ((idx[0] * ny + idx[1]) * nz + idx[2]) * c;
        data.extend_from_slice(&volume.data()[off..off + c]);
    }
    Tensor::new(vec![indices.len(), c], data).expect("gather shape")
}

/// Write rows back at the given indices.
fn scatter_voxels(volume: &mut Tensor, indices: &[[usize; 3]], rows: &Tensor) {
    let c = volume.shape()[3];
    let (ny, nz) = (volume.shape()[1], volume.shape()[2]);
    for (r, idx) in indices.iter().enumerate() {
        let off = ((idx[0] * ny + idx[1]) * nz + idx[2]) * c;
        volume.data_mut()[off..off + c].copy_from_slice(rows.last_axis_slice(&[r]));
    }
}

fn fov_indices(mask: &BoolGrid) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for i in 0..mask.dims[0] {
        for j in 0..mask.dims[1] {
            for k in 0..mask.dims[2] {
                if mask.get([i, j, k]) {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

/// Toy image encoder: `encoder_layers` rounds of 2D deformable
/// self-attention over the feature pyramid, each pixel attending from its own
/// normalized coordinate.
pub fn encode_features(
    params: &PipelineParams,
    features: &MultiScaleFeatures,
) -> Result<MultiScaleFeatures> {
    let mut levels = features.levels.clone();
    for stage in &params.encoder_layers {
        let mut updated = Vec::with_capacity(levels.len());
        for l in 0..levels.len() {
            let (h, w, c) = (
                levels[l].shape()[0],
                levels[l].shape()[1],
                levels[l].shape()[2],
            );
            let queries = levels[l].reshape(vec![h * w, c])?;
            let refs = Tensor::from_fn(&[h * w, 2], |idx| {
                let (row, col) = (idx[0] / w, idx[0] % w);
                if idx[1] == 0 {
                    if w > 1 { col as f64 / (w as f64 - 1.0) } else { 0.0 }
                } else if h > 1 {
                    row as f64 / (h as f64 - 1.0)
                } else {
                    0.0
                }
            });
            let attn = deformable_attn_2d(&stage.attn, &queries, &refs, &levels)?;
            let out = residual_block(&stage.block, &queries, &attn)?;
            updated.push(out.reshape(vec![h, w, c])?);
        }
        levels = updated;
    }
    MultiScaleFeatures::new(levels)
}

/// The single proposal initialization layer: proposed voxels aggregate image
/// features via deformable attention; every other voxel is untouched.
pub fn voxel_proposal_layer(
    scene: &SceneVolume,
    features: &MultiScaleFeatures,
    stage: &DeformStageParams,
) -> Result<SceneVolume> {
    scene.validate()?;
    let mut out = scene.clone();
    if scene.proposal.is_empty() {
        return Ok(out);
    }
    let indices = scene.proposal.indices();
    let queries = gather_voxels(&scene.embeddings, indices);
    let n = indices.len();
    let refs = Tensor::from_fn(&[n, 2], |idx| scene.proposal.canonical_pixels()[idx[0]][idx[1]]);
    let attn = deformable_attn_2d(&stage.attn, &queries, &refs, &features.levels)?;
    let updated = residual_block(&stage.block, &queries, &attn)?;
    scatter_voxels(&mut out.embeddings, indices, &updated);
    Ok(out)
}

/// Lift the 2D reference points to normalized 3D grid coordinates using the
/// depth map; invalid-depth queries fall back to the scene-center depth.
fn instance_ref_points_3d(
    instances: &InstanceQueries,
    cam: &CameraModel,
    depth: &DepthMap,
    grid: &VoxelGridSpec,
) -> Result<Tensor> {
    let fallback = match world_to_image(cam, grid.center_of_grid()) {
        Projection::Pixel { depth, .. } => depth,
        Projection::BehindCamera => 1.0,
    };
    let n = instances.len();
    let mut data = Vec::with_capacity(n * 3);
    for q in 0..n {
        let p2 = [
            instances.ref_points_2d.at(&[q, 0]),
            instances.ref_points_2d.at(&[q, 1]),
        ];
        let z = depth.sample_valid(p2).unwrap_or(fallback).max(1e-6);
        let pixel = denormalize_pixel(cam, p2);
        let world = lift_pixel(cam, pixel, z)?;
        data.extend_from_slice(&grid.normalized_point(world));
    }
    Tensor::new(vec![n, 3], data)
}

/// One decoder layer; stages apply in their fixed order, each gated by its
/// flag, with disabled stages bit-identical to the identity.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer(
    scene: &SceneVolume,
    instances: &InstanceQueries,
    features: &MultiScaleFeatures,
    cam: &CameraModel,
    depth: &DepthMap,
    layer: &DecoderLayerParams,
    flags: &StageFlags,
) -> Result<(SceneVolume, InstanceQueries)> {
    scene.validate()?;
    let has_queries = !instances.is_empty();
    let wants_instances = flags.instance_from_image
        || flags.scene_from_instance
        || flags.instance_from_scene
        || flags.instance_self;
    if wants_instances && !has_queries {
        return Err(CoreError::config(
            "instance stage enabled but no instance queries configured",
        ));
    }

    let mut scene = scene.clone();
    let mut queries = instances.embeddings.clone();

    // 1. instance <- image
    if flags.instance_from_image {
        let attn = deformable_attn_2d(
            &layer.instance_from_image.attn,
            &queries,
            &instances.ref_points_2d,
            &features.levels,
        )?;
        queries = residual_block(&layer.instance_from_image.block, &queries, &attn)?;
    }

    let fov = fov_indices(&scene.fov_mask);

    // 2. scene <- instance (FOV voxels only)
    if flags.scene_from_instance && !fov.is_empty() {
        let voxel_queries = gather_voxels(&scene.embeddings, &fov);
        let attn = cross_attn(&layer.scene_from_instance, &voxel_queries, &queries, &queries)?;
        let updated = residual_block(&layer.scene_from_instance, &voxel_queries, &attn)?;
        scatter_voxels(&mut scene.embeddings, &fov, &updated);
    }

    // 3. scene self-attention: FOV queries sample the full volume
    if flags.scene_self && !fov.is_empty() {
        let voxel_queries = gather_voxels(&scene.embeddings, &fov);
        let refs = Tensor::from_fn(&[fov.len(), 3], |idx| {
            scene.grid.normalized_index(fov[idx[0]])[idx[1]]
        });
        let attn =
            deformable_attn_3d(&layer.scene_self.attn, &voxel_queries, &refs, &scene.embeddings)?;
        let updated = residual_block(&layer.scene_self.block, &voxel_queries, &attn)?;
        scatter_voxels(&mut scene.embeddings, &fov, &updated);
    }

    // 4. instance <- scene via depth-lifted 3D reference points
    if flags.instance_from_scene {
        let carrier = InstanceQueries {
            embeddings: queries.clone(),
            ref_points_2d: instances.ref_points_2d.clone(),
            learnable: instances.learnable,
        };
        let refs3 = instance_ref_points_3d(&carrier, cam, depth, &scene.grid)?;
        let attn =
            deformable_attn_3d(&layer.instance_from_scene.attn, &queries, &refs3, &scene.embeddings)?;
        queries = residual_block(&layer.instance_from_scene.block, &queries, &attn)?;
    }

    // 5. instance self-attention
    if flags.instance_self {
        let attn = self_attn(&layer.instance_self, &queries)?;
        queries = residual_block(&layer.instance_self, &queries, &attn)?;
    }

    Ok((
        scene,
        InstanceQueries {
            embeddings: queries,
            ref_points_2d: instances.ref_points_2d.clone(),
            learnable: instances.learnable,
        },
    ))
}

/// Run the full decoder stack, capturing the scene state after each layer.
#[allow(clippy::too_many_arguments)]
pub fn run_decoder_stack(
    scene: SceneVolume,
    instances: InstanceQueries,
    features: &MultiScaleFeatures,
    cam: &CameraModel,
    depth: &DepthMap,
    layers: &[DecoderLayerParams],
    flags: &StageFlags,
) -> Result<(SceneVolume, InstanceQueries, Vec<Tensor>)> {
    if layers.is_empty() {
        return Err(CoreError::config("decoder stack needs >= 1 layer"));
    }
    let mut scene = scene;
    let mut instances = instances;
    let mut intermediates = Vec::with_capacity(layers.len());
    for layer in layers {
        let (s, q) = decoder_layer(&scene, &instances, features, cam, depth, layer, flags)?;
        scene = s;
        instances = q;
        intermediates.push(scene.embeddings.clone());
    }
    Ok((scene, instances, intermediates))
}

/// Dilation-aggregating head followed by the per-voxel classifier and
/// trilinear upsampling of the logits.
pub fn prediction_head(
    scene_feats: &Tensor,
    head: &HeadParams,
    upsample_factor: usize,
) -> Result<Tensor> {
    let mut summed = scene_feats.clone(); // identity branch
    for branch in &head.branches {
        summed = summed.add(&branch.apply(scene_feats)?)?;
    }
    let mixed = head.mix.apply(&summed)?;
    let logits = head.classifier.apply(&mixed)?;
    upsample_trilinear(&logits, upsample_factor)
}

/// Output of a full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[fX, fY, fZ, num_classes]`
    pub logits: Tensor,
    /// One decoder-resolution logits tensor per decoder layer.
    pub aux_logits: Vec<Tensor>,
    pub instances: InstanceQueries,
    pub scene: SceneVolume,
}

/// End-to-end forward pass: encode features, initialize the scene, run the
/// proposal layer and decoder stack, and apply the shared prediction head to
/// the final state and each intermediate.
pub fn forward_pipeline(
    config: &PipelineConfig,
    params: &PipelineParams,
    cam: &CameraModel,
    depth: &DepthMap,
    features: &MultiScaleFeatures,
) -> Result<ForwardOutput> {
    config.validate()?;
    if features.embed_dim() != config.embed_dim {
        return Err(CoreError::config("feature channels do not match embed_dim"));
    }
    let encoded = encode_features(params, features)?;
    let scene = init_scene(config, params, cam, depth)?;
    let scene = voxel_proposal_layer(&scene, &encoded, &params.proposal_stage)?;

    let instances = if config.query_mode == QueryMode::None {
        InstanceQueries {
            embeddings: Tensor::zeros(&[1, config.embed_dim]),
            ref_points_2d: Tensor::zeros(&[1, 2]),
            learnable: false,
        }
    } else {
        params.instance_queries.clone()
    };
    let flags = if config.query_mode == QueryMode::None {
        StageFlags {
            instance_from_image: false,
            scene_from_instance: false,
            instance_from_scene: false,
            instance_self: false,
            ..config.stages
        }
    } else {
        config.stages
    };

    let (scene, instances, intermediates) = run_decoder_stack(
        scene,
        instances,
        &encoded,
        cam,
        depth,
        &params.decoder,
        &flags,
    )?;

    let logits = prediction_head(&scene.embeddings, &params.head, config.upsample_factor)?;
    // shared head; auxiliaries stay at decoder resolution
    let aux_logits = intermediates
        .iter()
        .map(|s| prediction_head(s, &params.head, 1))
        .collect::<Result<Vec<_>>>()?;

    if !logits.all_finite() {
        return Err(CoreError::domain("non-finite logits"));
    }
    Ok(ForwardOutput {
        logits,
        aux_logits,
        instances,
        scene,
    })
}
