//! Synthetic scene generation for end-to-end runs: a labeled voxel world
//! (ground plane plus random boxes), a camera posed to look at it, a depth
//! map rendered by ray marching, and per-class image features pooled into a
//! small pyramid.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{CoreError, Result};
use crate::geometry::{CameraModel, DepthMap, VoxelGridSpec};
use crate::loss::{VoxelLabels, IGNORE};
use crate::tensor::Tensor;

/// Knobs for the synthetic world and its rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub image_width: usize,
    pub image_height: usize,
    pub num_boxes: usize,
    /// Largest box edge, in voxels of the label grid.
    pub max_box_extent: usize,
    pub feature_levels: usize,
    pub ground_plane: bool,
    /// Classes the boxes draw from; empty means all nonzero classes.
    pub palette: Vec<u8>,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            image_width: 64,
            image_height: 48,
            num_boxes: 4,
            max_box_extent: 6,
            feature_levels: 2,
            ground_plane: true,
            palette: Vec::new(),
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.image_width < 2 || self.image_height < 2 {
            return Err(CoreError::config("image must be at least 2x2"));
        }
        if self.feature_levels == 0 {
            return Err(CoreError::config("need at least one feature level"));
        }
        let down = 1 << (self.feature_levels - 1);
        if self.image_width % down != 0 || self.image_height % down != 0 {
            return Err(CoreError::config(
                "image size must be divisible by 2^(feature_levels-1)",
            ));
        }
        Ok(())
    }
}

/// A generated scene: labels on `grid`, a camera looking at it, the rendered
/// depth map, and the feature pyramid.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub labels: VoxelLabels,
    pub grid: VoxelGridSpec,
    pub camera: CameraModel,
    pub depth: DepthMap,
    /// `[H_l, W_l, C]` per level, level 0 at full image resolution.
    pub features: Vec<Tensor>,
}

/// Proper look-at rotation: camera z toward `target`, x to the right, y down
/// in world terms (right-handed with image v growing downward).
pub fn look_at(eye: [f64; 3], target: [f64; 3]) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    let eye_v = Vector3::new(eye[0], eye[1], eye[2]);
    let z = (Vector3::new(target[0], target[1], target[2]) - eye_v)
        .try_normalize(1e-12)
        .ok_or_else(|| CoreError::domain("look-at eye coincides with target"))?;
    let up = Vector3::new(0.0, 0.0, 1.0);
    let x = up
        .cross(&z)
        .try_normalize(1e-12)
        .ok_or_else(|| CoreError::domain("look-at direction parallel to up axis"))?;
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let t = -r * eye_v;
    Ok((r, t))
}

/// Camera posed outside the grid's -x face, looking at the grid center.
pub fn default_camera(grid: &VoxelGridSpec, width: usize, height: usize) -> Result<CameraModel> {
    let center = grid.center_of_grid();
    let extent = grid.extent();
    let eye = [
        grid.origin[0] - 0.6 * extent[0],
        center[1],
        center[2] + 0.25 * extent[2],
    ];
    let (r, t) = look_at(eye, center)?;
    let f = 0.8 * width as f64;
    let k = Matrix3::new(
        f,
        0.0,
        (width as f64 - 1.0) / 2.0,
        0.0,
        f,
        (height as f64 - 1.0) / 2.0,
        0.0,
        0.0,
        1.0,
    );
    CameraModel::new(k, r, t, (width, height))
}

/// Labels: a one-voxel ground layer of class 1 plus random axis-aligned boxes
/// of random nonzero classes.
pub fn generate_labels(
    grid: &VoxelGridSpec,
    num_classes: usize,
    params: &SceneParams,
    rng: &mut ChaCha20Rng,
) -> Result<VoxelLabels> {
    if num_classes < 2 {
        return Err(CoreError::config("need at least empty + one class"));
    }
    let dims = grid.dims;
    let mut labels = VoxelLabels::filled(dims, 0);
    if params.ground_plane {
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                labels.set([i, j, 0], 1);
            }
        }
    }
    let max_class = (num_classes - 1).min(IGNORE as usize - 1) as u8;
    if params.palette.iter().any(|&c| c == 0 || c > max_class) {
        return Err(CoreError::config("palette class out of range"));
    }
    for _ in 0..params.num_boxes {
        let class = if params.palette.is_empty() {
            rng.gen_range(1..=max_class)
        } else {
            params.palette[rng.gen_range(0..params.palette.len())]
        };
        let ext = [
            rng.gen_range(1..=params.max_box_extent.min(dims[0]).max(1)),
            rng.gen_range(1..=params.max_box_extent.min(dims[1]).max(1)),
            rng.gen_range(1..=params.max_box_extent.min(dims[2]).max(1)),
        ];
        let base = [
            rng.gen_range(0..=dims[0] - ext[0]),
            rng.gen_range(0..=dims[1] - ext[1]),
            rng.gen_range(0..=dims[2] - ext[2]),
        ];
        for i in base[0]..base[0] + ext[0] {
            for j in base[1]..base[1] + ext[1] {
                for k in base[2]..base[2] + ext[2] {
                    labels.set([i, j, k], class);
                }
            }
        }
    }
    Ok(labels)
}

/// March a ray through the grid and return `(t, class)` at the first occupied
/// voxel, with `t` the camera-depth parameter of the entry point.
pub fn ray_march(
    grid: &VoxelGridSpec,
    labels: &VoxelLabels,
    origin: [f64; 3],
    dir: [f64; 3],
) -> Option<(f64, u8)> {
    let dims = grid.dims;
    // slab intersection with the grid box
    let mut t_enter = 0.0f64;
    let mut t_exit = f64::INFINITY;
    for a in 0..3 {
        let lo = grid.origin[a];
        let hi = grid.origin[a] + grid.voxel_size[a] * dims[a] as f64;
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo || origin[a] >= hi {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = ((lo - origin[a]) / dir[a], (hi - origin[a]) / dir[a]);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_enter = t_enter.max(t0);
        t_exit = t_exit.min(t1);
    }
    if t_enter > t_exit {
        return None;
    }

    // voxel traversal from the entry point
    let t_start = t_enter + 1e-9;
    let entry = [
        origin[0] + t_start * dir[0],
        origin[1] + t_start * dir[1],
        origin[2] + t_start * dir[2],
    ];
    let mut idx = [0i64; 3];
    let mut t_max = [0.0f64; 3];
    let mut t_delta = [f64::INFINITY; 3];
    let mut step = [0i64; 3];
    for a in 0..3 {
        let cell = ((entry[a] - grid.origin[a]) / grid.voxel_size[a]).floor() as i64;
        idx[a] = cell.clamp(0, dims[a] as i64 - 1);
        if dir[a] > 1e-15 {
            step[a] = 1;
            let next = grid.origin[a] + (idx[a] + 1) as f64 * grid.voxel_size[a];
            t_max[a] = (next - origin[a]) / dir[a];
            t_delta[a] = grid.voxel_size[a] / dir[a];
        } else if dir[a] < -1e-15 {
            step[a] = -1;
            let next = grid.origin[a] + idx[a] as f64 * grid.voxel_size[a];
            t_max[a] = (next - origin[a]) / dir[a];
            t_delta[a] = grid.voxel_size[a] / -dir[a];
        } else {
            t_max[a] = f64::INFINITY;
        }
    }
    let mut t_entry = t_enter;
    loop {
        let l = labels.get([idx[0] as usize, idx[1] as usize, idx[2] as usize]);
        if l != 0 && l != IGNORE {
            return Some((t_entry.max(0.0), l));
        }
        // advance along the axis with the nearest crossing
        let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        t_entry = t_max[a];
        idx[a] += step[a];
        t_max[a] += t_delta[a];
        if idx[a] < 0 || idx[a] >= dims[a] as i64 || t_entry > t_exit {
            return None;
        }
    }
}

/// Deterministic per-class feature vector (independent of the scene seed).
pub fn class_feature(class: u8, embed_dim: usize) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(0x5ce9e_c1a55 ^ (class as u64).wrapping_mul(0x9e37));
    (0..embed_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Render depth and hit classes per pixel. Depth parameter: for a pixel
/// `(u, v)` the ray is `origin + t * R^T K^{-1} (u, v, 1)`, so `t` equals the
/// camera-frame depth of the hit.
pub fn render_depth(
    cam: &CameraModel,
    grid: &VoxelGridSpec,
    labels: &VoxelLabels,
) -> Result<(DepthMap, Vec<u8>)> {
    let (w, h) = (cam.width(), cam.height());
    let origin = cam.center_world();
    let mut values = Tensor::zeros(&[h, w]);
    let mut valid = vec![false; h * w];
    let mut classes = vec![0u8; h * w];
    for v in 0..h {
        for u in 0..w {
            let d = cam.pixel_ray_world([u as f64, v as f64]);
            match ray_march(grid, labels, origin, d) {
                Some((t, class)) if t > 1e-9 => {
                    values.set(&[v, u], t);
                    valid[v * w + u] = true;
                    classes[v * w + u] = class;
                }
                _ => {}
            }
        }
    }
    Ok((DepthMap::new(values, valid)?, classes))
}

/// Paint per-class features at hit pixels (zero where the ray misses), then
/// average-pool by factors of two into a pyramid.
pub fn render_features(
    cam: &CameraModel,
    hit_classes: &[u8],
    embed_dim: usize,
    levels: usize,
) -> Result<Vec<Tensor>> {
    let (w, h) = (cam.width(), cam.height());
    if hit_classes.len() != w * h {
        return Err(CoreError::shape("hit class buffer does not match image"));
    }
    let table: Vec<Vec<f64>> = (0..=255u8).map(|c| class_feature(c, embed_dim)).collect();
    let base = Tensor::from_fn(&[h, w, embed_dim], |idx| {
        let class = hit_classes[idx[0] * w + idx[1]];
        if class == 0 {
            0.0
        } else {
            table[class as usize][idx[2]]
        }
    });
    let mut pyramid = vec![base];
    for _ in 1..levels {
        let prev = pyramid.last().unwrap();
        let (ph, pw) = (prev.shape()[0], prev.shape()[1]);
        if ph % 2 != 0 || pw % 2 != 0 {
            return Err(CoreError::config("feature level size must halve evenly"));
        }
        let pooled = Tensor::from_fn(&[ph / 2, pw / 2, embed_dim], |idx| {
            let (r, c, ch) = (idx[0] * 2, idx[1] * 2, idx[2]);
            0.25 * (prev.at(&[r, c, ch])
                + prev.at(&[r + 1, c, ch])
                + prev.at(&[r, c + 1, ch])
                + prev.at(&[r + 1, c + 1, ch]))
        });
        pyramid.push(pooled);
    }
    Ok(pyramid)
}

/// Generate the full sample on the given label grid.
pub fn generate_scene(
    grid: &VoxelGridSpec,
    num_classes: usize,
    embed_dim: usize,
    params: &SceneParams,
    seed: u64,
) -> Result<SceneSample> {
    params.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let labels = generate_labels(grid, num_classes, params, &mut rng)?;
    let camera = default_camera(grid, params.image_width, params.image_height)?;
    let (depth, hit_classes) = render_depth(&camera, grid, &labels)?;
    let features = render_features(&camera, &hit_classes, embed_dim, params.feature_levels)?;
    Ok(SceneSample {
        labels,
        grid: grid.clone(),
        camera,
        depth,
        features,
    })
}
