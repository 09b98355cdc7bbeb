//! Attention primitives: multi-scale 2D deformable attention, 3D deformable
//! attention over scene volumes, standard multi-head cross/self attention,
//! and the post-norm FFN/LN residual block.
//!
//! Deformable sampling weights are softmax-normalized over all
//! `levels x sampling_points` samples of a head, so they always sum to 1.
//! Raw offsets are interpreted in texel units: an offset of 1.0 moves the
//! sample by one texel of the level it addresses.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::numerics::{bilinear_sample, layer_norm, softmax_slice, trilinear_sample};
use crate::tensor::{LinearMap, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        LayerNormParams {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            eps: 1e-6,
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gamma, &self.beta, self.eps)
    }
}

/// Parameters of one deformable attention operator.
///
/// `point_dim` is 2 for image sampling and 3 for volume sampling; the offset
/// net emits `heads * levels * sampling_points * point_dim` values per query
/// and the weight net one pre-softmax logit per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformableAttnParams {
    pub heads: usize,
    pub sampling_points: usize,
    pub levels: usize,
    pub point_dim: usize,
    pub value_proj: LinearMap,
    pub output_proj: LinearMap,
    pub offset_net: LinearMap,
    pub weight_net: LinearMap,
}

impl DeformableAttnParams {
    pub fn embed_dim(&self) -> usize {
        self.value_proj.in_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.embed_dim();
        if self.heads == 0 || c % self.heads != 0 {
            return Err(CoreError::config(format!(
                "embed dim {} not divisible by heads {}",
                c, self.heads
            )));
        }
        let samples = self.heads * self.levels * self.sampling_points;
        if self.offset_net.out_dim() != samples * self.point_dim {
            return Err(CoreError::shape("offset net output dim mismatch"));
        }
        if self.weight_net.out_dim() != samples {
            return Err(CoreError::shape("weight net output dim mismatch"));
        }
        if self.value_proj.out_dim() != c || self.output_proj.in_dim() != c {
            return Err(CoreError::shape("projection dim mismatch"));
        }
        Ok(())
    }

    /// Degenerate configuration: identity projections, zero offsets, one
    /// sampling point — reduces the operator to interpolation at the
    /// reference point.
    pub fn degenerate(embed_dim: usize, levels: usize, point_dim: usize) -> Self {
        DeformableAttnParams {
            heads: 1,
            sampling_points: 1,
            levels,
            point_dim,
            value_proj: LinearMap::identity(embed_dim),
            output_proj: LinearMap::identity(embed_dim),
            offset_net: LinearMap::zeros(levels * point_dim, embed_dim),
            weight_net: LinearMap::zeros(levels, embed_dim),
        }
    }

    /// Fresh parameters: small random projections, zero offset weights with a
    /// fixed stencil of biases, uniform initial attention weights.
    pub fn init(
        embed_dim: usize,
        heads: usize,
        sampling_points: usize,
        levels: usize,
        point_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let scale = 1.0 / (embed_dim as f64).sqrt();
        let rand_map = |rng: &mut dyn rand::RngCore, out: usize, inp: usize| {
            let weight = (0..out * inp)
                .map(|_| rng.gen_range(-scale..scale))
                .collect();
            LinearMap::new(out, inp, weight, vec![0.0; out]).unwrap()
        };
        let samples = heads * levels * sampling_points;
        let mut offset_net = LinearMap::zeros(samples * point_dim, embed_dim);
        // stencil biases: spread initial samples on a small ring around the
        // reference point, distinct per sample index
        for s in 0..samples {
            let angle = 2.0 * std::f64::consts::PI * s as f64 / samples.max(1) as f64;
            let radius = 0.5 + 0.5 * (s % sampling_points.max(1)) as f64;
            let bias = offset_net.bias_mut();
            bias[s * point_dim] = radius * angle.cos();
            if point_dim > 1 {
                bias[s * point_dim + 1] = radius * angle.sin();
            }
            if point_dim > 2 {
                bias[s * point_dim + 2] = radius * (angle / 2.0).sin();
            }
        }
        let params = DeformableAttnParams {
            heads,
            sampling_points,
            levels,
            point_dim,
            value_proj: rand_map(rng, embed_dim, embed_dim),
            output_proj: rand_map(rng, embed_dim, embed_dim),
            offset_net,
            weight_net: LinearMap::zeros(samples, embed_dim),
        };
        params.validate()?;
        Ok(params)
    }
}

/// Per-sample offset in normalized units for a level of the given extents:
/// raw texel offsets divided by `(extent - 1)` per axis.
#[inline]
fn normalized_offset(raw: f64, extent: usize) -> f64 {
    if extent > 1 {
        raw / (extent as f64 - 1.0)
    } else {
        0.0
    }
}

/// Multi-scale 2D deformable attention. `queries` is `[N, C]`, `ref_points`
/// `[N, 2]` normalized, `features` one `[H_l, W_l, C]` map per level.
/// The residual connection is NOT included; callers add it.
pub fn deformable_attn_2d(
    params: &DeformableAttnParams,
    queries: &Tensor,
    ref_points: &Tensor,
    features: &[Tensor],
) -> Result<Tensor> {
    params.validate()?;
    if params.point_dim != 2 {
        return Err(CoreError::config("deformable_attn_2d needs point_dim 2"));
    }
    if features.is_empty() {
        return Err(CoreError::domain("at least one feature level required"));
    }
    if features.len() != params.levels {
        return Err(CoreError::shape(format!(
            "expected {} feature levels, got {}",
            params.levels,
            features.len()
        )));
    }
    let c = params.embed_dim();
    check_queries(queries, ref_points, c, 2)?;
    for f in features {
        if f.rank() != 3 || f.shape()[2] != c {
            return Err(CoreError::shape("feature level must be [H, W, C]"));
        }
    }
    if !ref_points.all_finite() {
        return Err(CoreError::domain("non-finite reference point"));
    }

    let projected: Vec<Tensor> = features
        .iter()
        .map(|f| params.value_proj.apply(f))
        .collect::<Result<_>>()?;

    let n = queries.shape()[0];
    let heads = params.heads;
    let head_dim = c / heads;
    let k_s = params.sampling_points;
    let levels = params.levels;
    let mut out = Tensor::zeros(&[n, c]);
    for q in 0..n {
        let q_row = queries.last_axis_slice(&[q]);
        let reference = ref_points.last_axis_slice(&[q]);
        let raw_offsets = params.offset_net.apply_vec(q_row);
        let logits = params.weight_net.apply_vec(q_row);
        for h in 0..heads {
            let mut weights = logits[h * levels * k_s..(h + 1) * levels * k_s].to_vec();
            softmax_slice(&mut weights);
            let acc_off = q * c + h * head_dim;
            for l in 0..levels {
                let (height, width) = (projected[l].shape()[0], projected[l].shape()[1]);
                for s in 0..k_s {
                    let sample_idx = (h * levels + l) * k_s + s;
                    let off = &raw_offsets[sample_idx * 2..sample_idx * 2 + 2];
                    let p = [
                        reference[0] + normalized_offset(off[0], width),
                        reference[1] + normalized_offset(off[1], height),
                    ];
                    let value = bilinear_sample(&projected[l], p)?;
                    let w = weights[l * k_s + s];
                    for d in 0..head_dim {
                        out.data_mut()[acc_off + d] += w * value[h * head_dim + d];
                    }
                }
            }
        }
    }
    params.output_proj.apply(&out)
}

/// Single-level 3D deformable attention over a `[X, Y, Z, C]` volume.
pub fn deformable_attn_3d(
    params: &DeformableAttnParams,
    queries: &Tensor,
    ref_points: &Tensor,
    volume: &Tensor,
) -> Result<Tensor> {
    params.validate()?;
    if params.point_dim != 3 {
        return Err(CoreError::config("deformable_attn_3d needs point_dim 3"));
    }
    if params.levels != 1 {
        return Err(CoreError::config("volume attention is single-level"));
    }
    let c = params.embed_dim();
    check_queries(queries, ref_points, c, 3)?;
    if volume.rank() != 4 || volume.shape()[3] != c {
        return Err(CoreError::shape("volume must be [X, Y, Z, C]"));
    }
    if !ref_points.all_finite() {
        return Err(CoreError::domain("non-finite reference point"));
    }

    let projected = params.value_proj.apply(volume)?;
    let (nx, ny, nz) = (volume.shape()[0], volume.shape()[1], volume.shape()[2]);

    let n = queries.shape()[0];
    let heads = params.heads;
    let head_dim = c / heads;
    let k_s = params.sampling_points;
    let mut out = Tensor::zeros(&[n, c]);
    for q in 0..n {
        let q_row = queries.last_axis_slice(&[q]);
        let reference = ref_points.last_axis_slice(&[q]);
        let raw_offsets = params.offset_net.apply_vec(q_row);
        let logits = params.weight_net.apply_vec(q_row);
        for h in 0..heads {
            let mut weights = logits[h * k_s..(h + 1) * k_s].to_vec();
            softmax_slice(&mut weights);
            let acc_off = q * c + h * head_dim;
            for s in 0..k_s {
                let sample_idx = h * k_s + s;
                let off = &raw_offsets[sample_idx * 3..sample_idx * 3 + 3];
                let p = [
                    reference[0] + normalized_offset(off[0], nx),
                    reference[1] + normalized_offset(off[1], ny),
                    reference[2] + normalized_offset(off[2], nz),
                ];
                let value = trilinear_sample(&projected, p)?;
                let w = weights[s];
                for d in 0..head_dim {
                    out.data_mut()[acc_off + d] += w * value[h * head_dim + d];
                }
            }
        }
    }
    params.output_proj.apply(&out)
}

fn check_queries(queries: &Tensor, ref_points: &Tensor, c: usize, dim: usize) -> Result<()> {
    if queries.rank() != 2 || queries.shape()[1] != c {
        return Err(CoreError::shape("queries must be [N, C]"));
    }
    if ref_points.rank() != 2
        || ref_points.shape()[0] != queries.shape()[0]
        || ref_points.shape()[1] != dim
    {
        return Err(CoreError::shape(format!(
            "reference points must be [N, {dim}]"
        )));
    }
    Ok(())
}

/// One attention block: multi-head QKV projections plus the FFN/LN residual
/// machinery shared by every decoder stage.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnBlockParams {
    pub heads: usize,
    pub q_proj: LinearMap,
    pub k_proj: LinearMap,
    pub v_proj: LinearMap,
    pub out_proj: LinearMap,
    pub ffn_hidden: LinearMap,
    pub ffn_out: LinearMap,
    pub ln_attn: LayerNormParams,
    pub ln_ffn: LayerNormParams,
}

impl AttnBlockParams {
    pub fn embed_dim(&self) -> usize {
        self.q_proj.in_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.embed_dim();
        if self.heads == 0 || c % self.heads != 0 {
            return Err(CoreError::config(format!(
                "embed dim {c} not divisible by heads {}",
                self.heads
            )));
        }
        for (name, m, (out, inp)) in [
            ("q_proj", &self.q_proj, (c, c)),
            ("k_proj", &self.k_proj, (c, c)),
            ("v_proj", &self.v_proj, (c, c)),
            ("out_proj", &self.out_proj, (c, c)),
        ] {
            if m.out_dim() != out || m.in_dim() != inp {
                return Err(CoreError::shape(format!("{name} dims inconsistent")));
            }
        }
        if self.ffn_hidden.in_dim() != c || self.ffn_out.out_dim() != c {
            return Err(CoreError::shape("FFN dims inconsistent"));
        }
        if self.ffn_out.in_dim() != self.ffn_hidden.out_dim() {
            return Err(CoreError::shape("FFN hidden dims inconsistent"));
        }
        if self.ln_attn.gamma.len() != c || self.ln_ffn.gamma.len() != c {
            return Err(CoreError::shape("layer norm dims inconsistent"));
        }
        Ok(())
    }

    /// Identity projections, zero FFN: `residual_block` degenerates to
    /// `LN(LN(x + attn))`.
    pub fn degenerate(embed_dim: usize) -> Self {
        AttnBlockParams {
            heads: 1,
            q_proj: LinearMap::identity(embed_dim),
            k_proj: LinearMap::identity(embed_dim),
            v_proj: LinearMap::identity(embed_dim),
            out_proj: LinearMap::identity(embed_dim),
            ffn_hidden: LinearMap::zeros(embed_dim, embed_dim),
            ffn_out: LinearMap::zeros(embed_dim, embed_dim),
            ln_attn: LayerNormParams::identity(embed_dim),
            ln_ffn: LayerNormParams::identity(embed_dim),
        }
    }

    pub fn init(embed_dim: usize, heads: usize, ffn_hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let scale = 1.0 / (embed_dim as f64).sqrt();
        let mut rand_map = |out: usize, inp: usize| {
            let weight = (0..out * inp)
                .map(|_| rng.gen_range(-scale..scale))
                .collect();
            LinearMap::new(out, inp, weight, vec![0.0; out]).unwrap()
        };
        let params = AttnBlockParams {
            heads,
            q_proj: rand_map(embed_dim, embed_dim),
            k_proj: rand_map(embed_dim, embed_dim),
            v_proj: rand_map(embed_dim, embed_dim),
            out_proj: rand_map(embed_dim, embed_dim),
            ffn_hidden: rand_map(ffn_hidden, embed_dim),
            ffn_out: rand_map(embed_dim, ffn_hidden),
            ln_attn: LayerNormParams::identity(embed_dim),
            ln_ffn: LayerNormParams::identity(embed_dim),
        };
        params.validate()?;
        Ok(params)
    }
}

/// Standard multi-head scaled dot-product cross-attention.
pub fn cross_attn(params: &AttnBlockParams, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    params.validate()?;
    let c = params.embed_dim();
    if q.rank() != 2 || q.shape()[1] != c {
        return Err(CoreError::shape("queries must be [M, C]"));
    }
    if k.rank() != 2 || v.rank() != 2 || k.shape() != v.shape() || k.shape()[1] != c {
        return Err(CoreError::shape("keys/values must be matching [N, C]"));
    }
    let n = k.shape()[0];
    if n == 0 {
        return Err(CoreError::domain("empty key set"));
    }
    let m = q.shape()[0];
    let heads = params.heads;
    let head_dim = c / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let qp = params.q_proj.apply(q)?;
    let kp = params.k_proj.apply(k)?;
    let vp = params.v_proj.apply(v)?;

    let mut out = Tensor::zeros(&[m, c]);
    let mut scores = vec![0.0; n];
    for i in 0..m {
        for h in 0..heads {
            let q_h = &qp.data()[i * c + h * head_dim..i * c + (h + 1) * head_dim];
            for (j, score) in scores.iter_mut().enumerate() {
                let k_h = &kp.data()[j * c + h * head_dim..j * c + (h + 1) * head_dim];
                let mut dot = 0.0;
                for d in 0..head_dim {
                    dot += q_h[d] * k_h[d];
                }
                *score = dot * scale;
            }
            softmax_slice(&mut scores);
            let acc_off = i * c + h * head_dim;
            for (j, &w) in scores.iter().enumerate() {
                let v_h = &vp.data()[j * c + h * head_dim..j * c + (h + 1) * head_dim];
                for d in 0..head_dim {
                    out.data_mut()[acc_off + d] += w * v_h[d];
                }
            }
        }
    }
    params.out_proj.apply(&out)
}

/// `cross_attn(q, q, q)`.
pub fn self_attn(params: &AttnBlockParams, q: &Tensor) -> Result<Tensor> {
    cross_attn(params, q, q, q)
}

/// Post-norm residual wrapper: `y = LN(x + attn_out); z = LN(y + FFN(y))`
/// with `FFN = linear -> relu -> linear`.
pub fn residual_block(block: &AttnBlockParams, x: &Tensor, attn_out: &Tensor) -> Result<Tensor> {
    if x.shape() != attn_out.shape() {
        return Err(CoreError::shape(format!(
            "residual shapes differ: {:?} vs {:?}",
            x.shape(),
            attn_out.shape()
        )));
    }
    let y = block.ln_attn.apply(&x.add(attn_out)?)?;
    let hidden = block.ffn_hidden.apply(&y)?.map(|v| v.max(0.0));
    let ffn = block.ffn_out.apply(&hidden)?;
    block.ln_ffn.apply(&y.add(&ffn)?)
}

// --- parameter serialization -----------------------------------------------
//
// Each LinearMap is a flat blob: out_dim u32 LE, in_dim u32 LE, then
// out*in weight doubles (row-major) and out bias doubles, all LE. A text
// manifest lists blob names in topological order, one per line; blobs are
// concatenated in that order in the binary file.

pub fn write_linear_map(w: &mut impl Write, m: &LinearMap) -> Result<()> {
    w.write_all(&(m.out_dim() as u32).to_le_bytes())?;
    w.write_all(&(m.in_dim() as u32).to_le_bytes())?;
    for v in m.weight().iter().chain(m.bias()) {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_linear_map(r: &mut impl Read) -> Result<LinearMap> {
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let out_dim = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let in_dim = u32::from_le_bytes(u32buf) as usize;
    let mut f64buf = [0u8; 8];
    let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut f64buf)?;
            vals.push(f64::from_le_bytes(f64buf));
        }
        Ok(vals)
    };
    let weight = read_f64s(out_dim * in_dim)?;
    let bias = read_f64s(out_dim)?;
    LinearMap::new(out_dim, in_dim, weight, bias)
}

/// Save named linear maps: blobs concatenated into `bin_path`, names listed
/// in order in `manifest_path`.
pub fn save_linear_maps(
    bin_path: &Path,
    manifest_path: &Path,
    entries: &[(&str, &LinearMap)],
) -> Result<()> {
    let mut bin = std::io::BufWriter::new(std::fs::File::create(bin_path)?);
    let mut manifest = String::new();
    for (name, m) in entries {
        write_linear_map(&mut bin, m)?;
        manifest.push_str(name);
        manifest.push('\n');
    }
    bin.flush()?;
    std::fs::write(manifest_path, manifest)?;
    Ok(())
}

pub fn load_linear_maps(bin_path: &Path, manifest_path: &Path) -> Result<Vec<(String, LinearMap)>> {
    let manifest = std::fs::read_to_string(manifest_path)?;
    let mut bin = std::io::BufReader::new(std::fs::File::open(bin_path)?);
    let mut out = Vec::new();
    for name in manifest.lines().filter(|l| !l.is_empty()) {
        out.push((name.to_string(), read_linear_map(&mut bin)?));
    }
    Ok(out)
}
