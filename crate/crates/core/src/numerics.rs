//! Numeric primitives: softmax, layer norm, bilinear/trilinear interpolation
//! with analytic coordinate gradients, trilinear upsampling, and a
//! central-difference gradient checker.
//!
//! Conventions (used everywhere in the crate):
//! - normalized coordinates are align-corners: `p in [0,1]` maps to the
//!   continuous index `p * (extent - 1)`;
//! - samples whose interpolation corners fall outside the lattice contribute
//!   zero (zero padding, not clamping);
//! - spatial tensors are channel-last, `[H, W, C]` or `[X, Y, Z, C]`.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(CoreError::shape(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; x.len()];
    let data = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..extent {
                max = max.max(data[base + k * inner]);
            }
            let mut sum = 0.0;
            for k in 0..extent {
                let e = (data[base + k * inner] - max).exp();
                out[base + k * inner] = e;
                sum += e;
            }
            for k in 0..extent {
                out[base + k * inner] /= sum;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Softmax of a bare slice, in place.
pub fn softmax_slice(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Layer normalization over the last axis, then affine by `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| CoreError::shape("layer_norm on rank-0 tensor"))?;
    if gamma.len() != c || beta.len() != c {
        return Err(CoreError::shape(format!(
            "layer_norm params have lengths {}/{}, expected {}",
            gamma.len(),
            beta.len(),
            c
        )));
    }
    let rows = x.len() / c;
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        let row = &x.data()[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            out.push((row[j] - mean) * inv * gamma[j] + beta[j]);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Corner weights for one axis: continuous index -> (base index, fraction).
#[inline]
fn split_index(coord: f64) -> (i64, f64) {
    let f = coord.floor();
    (f as i64, coord - f)
}

#[inline]
fn in_range(i: i64, extent: usize) -> bool {
    i >= 0 && (i as usize) < extent
}

/// Bilinear sample of `fmap` (shape `[H, W, C]`) at normalized `p = (x, y)`,
/// where `x` runs along the width and `y` along the height. Out-of-range
/// corners contribute zero.
pub fn bilinear_sample(fmap: &Tensor, p: [f64; 2]) -> Result<Vec<f64>> {
    let shape = fmap.shape();
    if shape.len() != 3 {
        return Err(CoreError::shape(format!(
            "bilinear_sample expects [H,W,C], got {shape:?}"
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let u = p[0] * (w as f64 - 1.0);
    let v = p[1] * (h as f64 - 1.0);
    let (u0, fu) = split_index(u);
    let (v0, fv) = split_index(v);
    let data = fmap.data();
    let mut out = vec![0.0; c];
    for (dv, wv) in [(0i64, 1.0 - fv), (1, fv)] {
        let vi = v0 + dv;
        if wv == 0.0 || !in_range(vi, h) {
            continue;
        }
        for (du, wu) in [(0i64, 1.0 - fu), (1, fu)] {
            let ui = u0 + du;
            if wu == 0.0 || !in_range(ui, w) {
                continue;
            }
            let weight = wv * wu;
            let off = (vi as usize * w + ui as usize) * c;
            for ch in 0..c {
                out[ch] += weight * data[off + ch];
            }
        }
    }
    Ok(out)
}

/// Analytic derivative of [`bilinear_sample`] w.r.t. the normalized point,
/// returned as `C` rows of `(d/dx, d/dy)`.
///
/// Errors when `p` lies on a lattice line of an axis with extent > 1, where
/// the interpolant has a kink.
pub fn bilinear_sample_grad(fmap: &Tensor, p: [f64; 2]) -> Result<Vec<[f64; 2]>> {
    let shape = fmap.shape();
    if shape.len() != 3 {
        return Err(CoreError::shape(format!(
            "bilinear_sample_grad expects [H,W,C], got {shape:?}"
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let u = p[0] * (w as f64 - 1.0);
    let v = p[1] * (h as f64 - 1.0);
    if w > 1 && u == u.floor() {
        return Err(CoreError::NonDifferentiable(format!("u = {u} on lattice line")));
    }
    if h > 1 && v == v.floor() {
        return Err(CoreError::NonDifferentiable(format!("v = {v} on lattice line")));
    }
    let (u0, fu) = split_index(u);
    let (v0, fv) = split_index(v);
    let data = fmap.data();
    let mut grad = vec![[0.0f64; 2]; c];
    // d(weight)/du and d(weight)/dv per corner, then chain by (extent-1).
    for (dv, wv, dwv) in [(0i64, 1.0 - fv, -1.0), (1, fv, 1.0)] {
        let vi = v0 + dv;
        if !in_range(vi, h) {
            continue;
        }
        for (du, wu, dwu) in [(0i64, 1.0 - fu, -1.0), (1, fu, 1.0)] {
            let ui = u0 + du;
            if !in_range(ui, w) {
                continue;
            }
            let du_weight = dwu * wv * (w as f64 - 1.0);
            let dv_weight = wu * dwv * (h as f64 - 1.0);
            let off = (vi as usize * w + ui as usize) * c;
            for ch in 0..c {
                grad[ch][0] += du_weight * data[off + ch];
                grad[ch][1] += dv_weight * data[off + ch];
            }
        }
    }
    Ok(grad)
}

/// Trilinear sample of `vol` (shape `[X, Y, Z, C]`) at normalized `p`.
pub fn trilinear_sample(vol: &Tensor, p: [f64; 3]) -> Result<Vec<f64>> {
    let shape = vol.shape();
    if shape.len() != 4 {
        return Err(CoreError::shape(format!(
            "trilinear_sample expects [X,Y,Z,C], got {shape:?}"
        )));
    }
    let (nx, ny, nz, c) = (shape[0], shape[1], shape[2], shape[3]);
    let cx = p[0] * (nx as f64 - 1.0);
    let cy = p[1] * (ny as f64 - 1.0);
    let cz = p[2] * (nz as f64 - 1.0);
    let (x0, fx) = split_index(cx);
    let (y0, fy) = split_index(cy);
    let (z0, fz) = split_index(cz);
    let data = vol.data();
    let mut out = vec![0.0; c];
    for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
        let xi = x0 + dx;
        if wx == 0.0 || !in_range(xi, nx) {
            continue;
        }
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            let yi = y0 + dy;
            if wy == 0.0 || !in_range(yi, ny) {
                continue;
            }
            for (dz, wz) in [(0i64, 1.0 - fz), (1, fz)] {
                let zi = z0 + dz;
                if wz == 0.0 || !in_range(zi, nz) {
                    continue;
                }
                let weight = wx * wy * wz;
                let off = ((xi as usize * ny + yi as usize) * nz + zi as usize) * c;
                for ch in 0..c {
                    out[ch] += weight * data[off + ch];
                }
            }
        }
    }
    Ok(out)
}

/// Analytic derivative of [`trilinear_sample`] w.r.t. the normalized point,
/// `C` rows of `(d/dx, d/dy, d/dz)`.
pub fn trilinear_sample_grad(vol: &Tensor, p: [f64; 3]) -> Result<Vec<[f64; 3]>> {
    let shape = vol.shape();
    if shape.len() != 4 {
        return Err(CoreError::shape(format!(
            "trilinear_sample_grad expects [X,Y,Z,C], got {shape:?}"
        )));
    }
    let (nx, ny, nz, c) = (shape[0], shape[1], shape[2], shape[3]);
    let cs = [
        p[0] * (nx as f64 - 1.0),
        p[1] * (ny as f64 - 1.0),
        p[2] * (nz as f64 - 1.0),
    ];
    for (coord, extent) in cs.iter().zip([nx, ny, nz]) {
        if extent > 1 && *coord == coord.floor() {
            return Err(CoreError::NonDifferentiable(format!(
                "coordinate {coord} on lattice plane"
            )));
        }
    }
    let (x0, fx) = split_index(cs[0]);
    let (y0, fy) = split_index(cs[1]);
    let (z0, fz) = split_index(cs[2]);
    let data = vol.data();
    let mut grad = vec![[0.0f64; 3]; c];
    for (dx, wx, dwx) in [(0i64, 1.0 - fx, -1.0), (1, fx, 1.0)] {
        let xi = x0 + dx;
        if !in_range(xi, nx) {
            continue;
        }
        for (dy, wy, dwy) in [(0i64, 1.0 - fy, -1.0), (1, fy, 1.0)] {
            let yi = y0 + dy;
            if !in_range(yi, ny) {
                continue;
            }
            for (dz, wz, dwz) in [(0i64, 1.0 - fz, -1.0), (1, fz, 1.0)] {
                let zi = z0 + dz;
                if !in_range(zi, nz) {
                    continue;
                }
                let gx = dwx * wy * wz * (nx as f64 - 1.0);
                let gy = wx * dwy * wz * (ny as f64 - 1.0);
                let gz = wx * wy * dwz * (nz as f64 - 1.0);
                let off = ((xi as usize * ny + yi as usize) * nz + zi as usize) * c;
                for ch in 0..c {
                    grad[ch][0] += gx * data[off + ch];
                    grad[ch][1] += gy * data[off + ch];
                    grad[ch][2] += gz * data[off + ch];
                }
            }
        }
    }
    Ok(grad)
}

/// Align-corners trilinear upsampling of `vol` `[X,Y,Z,C]` by an integer
/// factor. Factor 1 is the identity.
pub fn upsample_trilinear(vol: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(CoreError::domain("upsample factor must be >= 1"));
    }
    let shape = vol.shape();
    if shape.len() != 4 {
        return Err(CoreError::shape(format!(
            "upsample_trilinear expects [X,Y,Z,C], got {shape:?}"
        )));
    }
    if factor == 1 {
        return Ok(vol.clone());
    }
    let (nx, ny, nz, c) = (shape[0], shape[1], shape[2], shape[3]);
    let (ox, oy, oz) = (nx * factor, ny * factor, nz * factor);
    let norm = |i: usize, extent: usize| -> f64 {
        if extent <= 1 {
            0.0
        } else {
            i as f64 / (extent as f64 - 1.0)
        }
    };
    let mut data = Vec::with_capacity(ox * oy * oz * c);
    for i in 0..ox {
        let px = norm(i, ox);
        for j in 0..oy {
            let py = norm(j, oy);
            for k in 0..oz {
                let pz = norm(k, oz);
                data.extend_from_slice(&trilinear_sample(vol, [px, py, pz])?);
            }
        }
    }
    Tensor::new(vec![ox, oy, oz, c], data)
}

/// Central-difference check of `analytic_grad` against `f` at `x`.
///
/// Returns the maximum elementwise relative error
/// `|analytic - numeric| / max(1, |numeric|)`. A non-finite evaluation of `f`
/// fails with the offending flat index.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&Tensor) -> f64,
    x: &Tensor,
    analytic_grad: &Tensor,
    h: f64,
) -> Result<f64> {
    if x.shape() != analytic_grad.shape() {
        return Err(CoreError::shape(format!(
            "gradient shape {:?} does not match input {:?}",
            analytic_grad.shape(),
            x.shape()
        )));
    }
    let mut probe = x.clone();
    let mut max_err = 0.0f64;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(CoreError::GradientCheck(format!(
                "non-finite evaluation at flat index {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic_grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn fmap_2x2(a: f64, b: f64, c: f64, d: f64) -> Tensor {
        Tensor::new(vec![2, 2, 1], vec![a, b, c, d]).unwrap()
    }

    #[test]
    fn softmax_symmetric() {
        let x = Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        for v in y.data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_exp_oracle() {
        // direct exp/normalize oracle on (ln 1, ln 2, ln 3)
        let x = Tensor::new(vec![3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert_abs_diff_eq!(y.data()[0], 1.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(y.data()[1], 2.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(y.data()[2], 3.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn softmax_no_overflow() {
        let x = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!(y.all_finite());
        assert_abs_diff_eq!(y.data()[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y.data()[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_along_axis() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let x = Tensor::from_fn(&[3, 4, 2], |_| rng.gen_range(-50.0..50.0));
        let y = softmax(&x, 1).unwrap();
        for o in 0..3 {
            for i in 0..2 {
                let sum: f64 = (0..4).map(|k| y.at(&[o, k, i])).sum();
                assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_constant_slice_is_zero() {
        let x = Tensor::filled(&[2, 4], 3.5);
        let y = layer_norm(&x, &[1.0; 4], &[0.0; 4], 1e-6).unwrap();
        for v in y.data() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point_slice() {
        // mean 2, population std 1
        let x = Tensor::new(vec![2], vec![1.0, 3.0]).unwrap();
        let y = layer_norm(&x, &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert_abs_diff_eq!(y.data()[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y.data()[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn layer_norm_zero_gamma_returns_beta() {
        let x = Tensor::new(vec![3], vec![5.0, -2.0, 0.1]).unwrap();
        let y = layer_norm(&x, &[0.0; 3], &[7.0; 3], 1e-6).unwrap();
        for v in y.data() {
            assert_abs_diff_eq!(*v, 7.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn bilinear_exact_at_lattice_points() {
        let fmap = Tensor::from_fn(&[3, 4, 2], |idx| (idx[0] * 100 + idx[1] * 10 + idx[2]) as f64);
        for i in 0..3 {
            for j in 0..4 {
                let p = [j as f64 / 3.0, i as f64 / 2.0];
                let s = bilinear_sample(&fmap, p).unwrap();
                assert_abs_diff_eq!(s[0], fmap.at(&[i, j, 0]), epsilon = 1e-12);
                assert_abs_diff_eq!(s[1], fmap.at(&[i, j, 1]), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_center_of_2x2_is_mean() {
        let fmap = fmap_2x2(1.0, 2.0, 3.0, 4.0);
        let s = bilinear_sample(&fmap, [0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(s[0], 2.5, epsilon = 1e-12);
    }

    /// Brute-force 4-corner oracle, independent of the implementation path.
    fn bilinear_oracle(fmap: &Tensor, p: [f64; 2]) -> Vec<f64> {
        let (h, w, c) = (fmap.shape()[0], fmap.shape()[1], fmap.shape()[2]);
        let u = p[0] * (w as f64 - 1.0);
        let v = p[1] * (h as f64 - 1.0);
        let mut out = vec![0.0; c];
        for ch in 0..c {
            for iv in 0..h as i64 {
                for iu in 0..w as i64 {
                    let wu = 1.0 - (u - iu as f64).abs();
                    let wv = 1.0 - (v - iv as f64).abs();
                    if wu > 0.0 && wv > 0.0 {
                        out[ch] += wu * wv * fmap.at(&[iv as usize, iu as usize, ch]);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn bilinear_out_of_range_matches_corner_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let fmap = Tensor::from_fn(&[3, 3, 2], |_| rng.gen_range(-1.0..1.0));
        for p in [[-0.5, 0.5], [0.3, 1.4], [-0.2, -0.2], [0.77, 0.13]] {
            let got = bilinear_sample(&fmap, p).unwrap();
            let want = bilinear_oracle(&fmap, p);
            for (g, w) in got.iter().zip(&want) {
                assert_abs_diff_eq!(*g, *w, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_fully_out_of_range_is_zero() {
        let fmap = fmap_2x2(1.0, 2.0, 3.0, 4.0);
        let s = bilinear_sample(&fmap, [5.0, 5.0]).unwrap();
        assert_eq!(s[0], 0.0);
    }

    #[test]
    fn bilinear_midpoint_linearity() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let fmap = Tensor::from_fn(&[4, 4, 1], |_| rng.gen_range(-1.0..1.0));
        for _ in 0..20 {
            let a: [f64; 2] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            // stay on the same horizontal segment inside one cell
            let cell = (a[0] * 3.0).floor().min(2.0) / 3.0;
            let b = [cell + rng.gen_range(0.0..(1.0 / 3.0)), a[1]];
            let a = [cell + rng.gen_range(0.0..(1.0 / 3.0)), a[1]];
            let mid = [(a[0] + b[0]) / 2.0, a[1]];
            let sa = bilinear_sample(&fmap, a).unwrap()[0];
            let sb = bilinear_sample(&fmap, b).unwrap()[0];
            let sm = bilinear_sample(&fmap, mid).unwrap()[0];
            assert_abs_diff_eq!(sm, (sa + sb) / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn bilinear_grad_constant_map_is_zero() {
        let fmap = Tensor::filled(&[3, 3, 2], 4.2);
        let g = bilinear_sample_grad(&fmap, [0.4, 0.6]).unwrap();
        for row in g {
            assert_abs_diff_eq!(row[0], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(row[1], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn bilinear_grad_linear_ramp() {
        // f(u, v) = u in pixel units; slope in normalized x is (W-1)
        let fmap = Tensor::from_fn(&[3, 4, 1], |idx| idx[1] as f64);
        let g = bilinear_sample_grad(&fmap, [0.37, 0.52]).unwrap();
        assert_abs_diff_eq!(g[0][0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[0][1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn bilinear_grad_matches_central_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let fmap = Tensor::from_fn(&[5, 6, 3], |_| rng.gen_range(-2.0..2.0));
        let h = 1e-5;
        for _ in 0..50 {
            let p = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
            let g = match bilinear_sample_grad(&fmap, p) {
                Ok(g) => g,
                Err(_) => continue, // lattice line, allowed by the precondition
            };
            for ch in 0..3 {
                for axis in 0..2 {
                    let mut pp = p;
                    pp[axis] += h;
                    let mut pm = p;
                    pm[axis] -= h;
                    let fp = bilinear_sample(&fmap, pp).unwrap()[ch];
                    let fm = bilinear_sample(&fmap, pm).unwrap()[ch];
                    let numeric = (fp - fm) / (2.0 * h);
                    let rel = (g[ch][axis] - numeric).abs() / numeric.abs().max(1.0);
                    assert!(rel < 1e-6, "rel err {rel} at p {p:?}");
                }
            }
        }
    }

    #[test]
    fn bilinear_grad_rejects_lattice_line() {
        let fmap = fmap_2x2(1.0, 2.0, 3.0, 4.0);
        assert!(matches!(
            bilinear_sample_grad(&fmap, [0.0, 0.5]),
            Err(CoreError::NonDifferentiable(_))
        ));
    }

    #[test]
    fn trilinear_exact_at_lattice_and_constant() {
        let vol = Tensor::from_fn(&[2, 3, 2, 1], |idx| (idx[0] * 9 + idx[1] * 3 + idx[2]) as f64);
        let s = trilinear_sample(&vol, [1.0, 0.5, 0.0]).unwrap();
        assert_abs_diff_eq!(s[0], vol.at(&[1, 1, 0, 0]), epsilon = 1e-12);

        let cvol = Tensor::filled(&[3, 3, 3, 2], 1.25);
        let s = trilinear_sample(&cvol, [0.3, 0.7, 0.45]).unwrap();
        assert_abs_diff_eq!(s[0], 1.25, epsilon = 1e-12);
        assert_abs_diff_eq!(s[1], 1.25, epsilon = 1e-12);
    }

    /// Brute-force 8-corner oracle.
    fn trilinear_oracle(vol: &Tensor, p: [f64; 3]) -> Vec<f64> {
        let s = vol.shape();
        let (nx, ny, nz, c) = (s[0], s[1], s[2], s[3]);
        let cx = p[0] * (nx as f64 - 1.0);
        let cy = p[1] * (ny as f64 - 1.0);
        let cz = p[2] * (nz as f64 - 1.0);
        let mut out = vec![0.0; c];
        for ch in 0..c {
            for ix in 0..nx as i64 {
                for iy in 0..ny as i64 {
                    for iz in 0..nz as i64 {
                        let wx = 1.0 - (cx - ix as f64).abs();
                        let wy = 1.0 - (cy - iy as f64).abs();
                        let wz = 1.0 - (cz - iz as f64).abs();
                        if wx > 0.0 && wy > 0.0 && wz > 0.0 {
                            out[ch] += wx
                                * wy
                                * wz
                                * vol.at(&[ix as usize, iy as usize, iz as usize, ch]);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn trilinear_matches_corner_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let vol = Tensor::from_fn(&[3, 4, 2, 2], |_| rng.gen_range(-1.0..1.0));
        for _ in 0..30 {
            let p = [
                rng.gen_range(-0.3..1.3),
                rng.gen_range(-0.3..1.3),
                rng.gen_range(-0.3..1.3),
            ];
            let got = trilinear_sample(&vol, p).unwrap();
            let want = trilinear_oracle(&vol, p);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trilinear_grad_matches_central_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let vol = Tensor::from_fn(&[4, 3, 3, 2], |_| rng.gen_range(-2.0..2.0));
        let h = 1e-5;
        for _ in 0..50 {
            let p = [
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
            ];
            let g = match trilinear_sample_grad(&vol, p) {
                Ok(g) => g,
                Err(_) => continue,
            };
            for ch in 0..2 {
                for axis in 0..3 {
                    let mut pp = p;
                    pp[axis] += h;
                    let mut pm = p;
                    pm[axis] -= h;
                    let fp = trilinear_sample(&vol, pp).unwrap()[ch];
                    let fm = trilinear_sample(&vol, pm).unwrap()[ch];
                    let numeric = (fp - fm) / (2.0 * h);
                    let rel = (g[ch][axis] - numeric).abs() / numeric.abs().max(1.0);
                    assert!(rel < 1e-6, "rel err {rel} at p {p:?}");
                }
            }
        }
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        let vol = Tensor::from_fn(&[2, 3, 2, 2], |_| rng.gen_range(-1.0..1.0));
        let up = upsample_trilinear(&vol, 1).unwrap();
        assert_eq!(up, vol);
    }

    #[test]
    fn upsample_constant_volume() {
        let vol = Tensor::filled(&[2, 2, 2, 1], 0.75);
        let up = upsample_trilinear(&vol, 3).unwrap();
        assert_eq!(up.shape(), &[6, 6, 6, 1]);
        for v in up.data() {
            assert_abs_diff_eq!(*v, 0.75, epsilon = 1e-12);
        }
    }

    #[test]
    fn upsample_matches_per_point_sampling() {
        let vol = Tensor::from_fn(&[2, 2, 2, 1], |idx| (idx[0] + idx[1] + idx[2]) as f64);
        let up = upsample_trilinear(&vol, 2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    let p = [i as f64 / 3.0, j as f64 / 3.0, k as f64 / 3.0];
                    let want = trilinear_sample(&vol, p).unwrap()[0];
                    assert_abs_diff_eq!(up.at(&[i, j, k, 0]), want, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn finite_diff_sum_function() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 0.0, 5.0]).unwrap();
        let grad = Tensor::filled(&[4], 1.0);
        let err = finite_diff_check(&mut |t| t.data().iter().sum(), &x, &grad, 1e-5).unwrap();
        assert!(err < 1e-10);
    }

    #[test]
    fn finite_diff_quadratic() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let grad = x.clone();
        let err = finite_diff_check(
            &mut |t| 0.5 * t.data().iter().map(|v| v * v).sum::<f64>(),
            &x,
            &grad,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn finite_diff_negative_control() {
        // deliberately wrong gradient 2x for f = 0.5 ||x||^2
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let wrong = x.scale(2.0);
        let err = finite_diff_check(
            &mut |t| 0.5 * t.data().iter().map(|v| v * v).sum::<f64>(),
            &x,
            &wrong,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.4, "negative control should report a large error, got {err}");
    }
}
