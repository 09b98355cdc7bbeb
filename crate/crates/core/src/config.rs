//! Run configuration: a small `key = value` text format with bracketed
//! sections. Unknown sections or keys are errors, every key has a documented
//! default, and `#`/`;` start comments.
//!
//! Sections and keys:
//! - `[pipeline]`: num_queries, embed_dim, decoder_layers, encoder_layers,
//!   heads, sampling_points, num_classes, upsample_factor, query_mode
//!   (learnable | detached | none), stage_instance_from_image,
//!   stage_scene_from_instance, stage_scene_self, stage_instance_from_scene,
//!   stage_instance_self (booleans)
//! - `[grid]`: origin (3 reals), voxel_size (3 reals), dims (3 ints)
//! - `[scene]`: image_width, image_height, num_boxes, max_box_extent,
//!   feature_levels, ground_plane, palette (comma-separated class ids)
//! - `[run]`: seed, out_dir

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::geometry::VoxelGridSpec;
use crate::pipeline::{PipelineConfig, QueryMode};
use crate::scene::SceneParams;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub scene: SceneParams,
    pub seed: u64,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pipeline: PipelineConfig::default(),
            scene: SceneParams::default(),
            seed: 0,
            out_dir: "out".to_string(),
        }
    }
}

fn parse_scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CoreError::config(format!("key `{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(CoreError::config(format!(
            "key `{key}`: expected boolean, got `{value}`"
        ))),
    }
}

fn parse_triple<T: std::str::FromStr + Copy>(key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(CoreError::config(format!(
            "key `{key}`: expected 3 comma-separated values"
        )));
    }
    Ok([
        parse_scalar(key, parts[0])?,
        parse_scalar(key, parts[1])?,
        parse_scalar(key, parts[2])?,
    ])
}

/// Parse the text format into `(section, key) -> value`, validating syntax.
fn parse_sections(text: &str) -> Result<BTreeMap<(String, String), String>> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find(['#', ';']) {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| {
                CoreError::config(format!("line {}: unterminated section header", lineno + 1))
            })?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CoreError::config(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        if section.is_empty() {
            return Err(CoreError::config(format!(
                "line {}: key outside any section",
                lineno + 1
            )));
        }
        let key = key.trim().to_string();
        let prev = out.insert((section.clone(), key.clone()), value.trim().to_string());
        if prev.is_some() {
            return Err(CoreError::config(format!(
                "duplicate key `{key}` in section [{section}]"
            )));
        }
    }
    Ok(out)
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let entries = parse_sections(text)?;
    let mut rc = RunConfig::default();
    let mut origin = rc.pipeline.grid.origin;
    let mut voxel_size = rc.pipeline.grid.voxel_size;
    let mut dims = rc.pipeline.grid.dims;

    for ((section, key), value) in &entries {
        let v = value.as_str();
        let k = key.as_str();
        match (section.as_str(), k) {
            ("pipeline", "num_queries") => rc.pipeline.num_queries = parse_scalar(k, v)?,
            ("pipeline", "embed_dim") => rc.pipeline.embed_dim = parse_scalar(k, v)?,
            ("pipeline", "decoder_layers") => rc.pipeline.decoder_layers = parse_scalar(k, v)?,
            ("pipeline", "encoder_layers") => rc.pipeline.encoder_layers = parse_scalar(k, v)?,
            ("pipeline", "heads") => rc.pipeline.heads = parse_scalar(k, v)?,
            ("pipeline", "sampling_points") => rc.pipeline.sampling_points = parse_scalar(k, v)?,
            ("pipeline", "num_classes") => rc.pipeline.num_classes = parse_scalar(k, v)?,
            ("pipeline", "upsample_factor") => rc.pipeline.upsample_factor = parse_scalar(k, v)?,
            ("pipeline", "query_mode") => rc.pipeline.query_mode = v.parse::<QueryMode>()?,
            ("pipeline", "stage_instance_from_image") => {
                rc.pipeline.stages.instance_from_image = parse_bool(k, v)?
            }
            ("pipeline", "stage_scene_from_instance") => {
                rc.pipeline.stages.scene_from_instance = parse_bool(k, v)?
            }
            ("pipeline", "stage_scene_self") => rc.pipeline.stages.scene_self = parse_bool(k, v)?,
            ("pipeline", "stage_instance_from_scene") => {
                rc.pipeline.stages.instance_from_scene = parse_bool(k, v)?
            }
            ("pipeline", "stage_instance_self") => {
                rc.pipeline.stages.instance_self = parse_bool(k, v)?
            }
            ("grid", "origin") => origin = parse_triple(k, v)?,
            ("grid", "voxel_size") => voxel_size = parse_triple(k, v)?,
            ("grid", "dims") => dims = parse_triple(k, v)?,
            ("scene", "image_width") => rc.scene.image_width = parse_scalar(k, v)?,
            ("scene", "image_height") => rc.scene.image_height = parse_scalar(k, v)?,
            ("scene", "num_boxes") => rc.scene.num_boxes = parse_scalar(k, v)?,
            ("scene", "max_box_extent") => rc.scene.max_box_extent = parse_scalar(k, v)?,
            ("scene", "feature_levels") => rc.scene.feature_levels = parse_scalar(k, v)?,
            ("scene", "ground_plane") => rc.scene.ground_plane = parse_bool(k, v)?,
            ("scene", "palette") => {
                rc.scene.palette = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|p| parse_scalar(k, p.trim()))
                        .collect::<Result<Vec<u8>>>()?
                };
            }
            ("run", "seed") => rc.seed = parse_scalar(k, v)?,
            ("run", "out_dir") => rc.out_dir = v.to_string(),
            ("pipeline", _) | ("grid", _) | ("scene", _) | ("run", _) => {
                return Err(CoreError::config(format!(
                    "unknown key `{k}` in section [{section}]"
                )));
            }
            _ => {
                return Err(CoreError::config(format!("unknown section [{section}]")));
            }
        }
    }

    rc.pipeline.grid = VoxelGridSpec::new(origin, voxel_size, dims)?;
    rc.pipeline.validate()?;
    rc.scene.validate()?;
    Ok(rc)
}

pub fn load_run_config(path: &std::path::Path) -> Result<RunConfig> {
    parse_run_config(&std::fs::read_to_string(path)?)
}

/// Render a config back out (used to ship defaults and for round-trip tests).
pub fn emit_run_config(rc: &RunConfig) -> String {
    let p = &rc.pipeline;
    let g = &p.grid;
    let s = &rc.scene;
    let palette = s
        .palette
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "[pipeline]\n\
         num_queries = {}\n\
         embed_dim = {}\n\
         decoder_layers = {}\n\
         encoder_layers = {}\n\
         heads = {}\n\
         sampling_points = {}\n\
         num_classes = {}\n\
         upsample_factor = {}\n\
         query_mode = {}\n\
         stage_instance_from_image = {}\n\
         stage_scene_from_instance = {}\n\
         stage_scene_self = {}\n\
         stage_instance_from_scene = {}\n\
         stage_instance_self = {}\n\
         \n[grid]\n\
         origin = {},{},{}\n\
         voxel_size = {},{},{}\n\
         dims = {},{},{}\n\
         \n[scene]\n\
         image_width = {}\n\
         image_height = {}\n\
         num_boxes = {}\n\
         max_box_extent = {}\n\
         feature_levels = {}\n\
         ground_plane = {}\n\
         palette = {}\n\
         \n[run]\n\
         seed = {}\n\
         out_dir = {}\n",
        p.num_queries,
        p.embed_dim,
        p.decoder_layers,
        p.encoder_layers,
        p.heads,
        p.sampling_points,
        p.num_classes,
        p.upsample_factor,
        p.query_mode.as_str(),
        p.stages.instance_from_image,
        p.stages.scene_from_instance,
        p.stages.scene_self,
        p.stages.instance_from_scene,
        p.stages.instance_self,
        g.origin[0],
        g.origin[1],
        g.origin[2],
        g.voxel_size[0],
        g.voxel_size[1],
        g.voxel_size[2],
        g.dims[0],
        g.dims[1],
        g.dims[2],
        s.image_width,
        s.image_height,
        s.num_boxes,
        s.max_box_extent,
        s.feature_levels,
        s.ground_plane,
        palette,
        rc.seed,
        rc.out_dir,
    )
}
