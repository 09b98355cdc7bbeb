//! Training losses: class-frequency-weighted cross-entropy, scene-class
//! affinity losses (semantic and geometric), and the composite total with
//! 0.5-scaled auxiliaries. Analytic gradients are provided w.r.t. logits
//! (cross-entropy, total) and probabilities (affinity).

use crate::error::{CoreError, Result};
use crate::numerics::softmax;
use crate::tensor::Tensor;

/// Label value marking voxels excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// Probability clamp applied before logarithms.
pub const PROB_EPS: f64 = 1e-8;

/// Per-voxel class ids over a `[X, Y, Z]` lattice. Class 0 is "empty".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelLabels {
    pub dims: [usize; 3],
    pub labels: Vec<u8>,
}

impl VoxelLabels {
    pub fn new(dims: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        if labels.len() != dims[0] * dims[1] * dims[2] {
            return Err(CoreError::shape("label count does not match dims"));
        }
        Ok(VoxelLabels { dims, labels })
    }

    pub fn filled(dims: [usize; 3], value: u8) -> Self {
        VoxelLabels {
            dims,
            labels: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    pub fn get(&self, idx: [usize; 3]) -> u8 {
        self.labels[self.offset(idx)]
    }

    pub fn set(&mut self, idx: [usize; 3], value: u8) {
        let off = self.offset(idx);
        self.labels[off] = value;
    }

    pub fn validate_classes(&self, num_classes: usize) -> Result<()> {
        for &l in &self.labels {
            if l != IGNORE && l as usize >= num_classes {
                return Err(CoreError::domain(format!(
                    "label {l} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(())
    }

    /// Empirical per-class voxel fractions over non-ignored voxels.
    pub fn class_frequencies(&self, num_classes: usize) -> Vec<f64> {
        let mut counts = vec![0usize; num_classes];
        let mut total = 0usize;
        for &l in &self.labels {
            if l != IGNORE {
                counts[l as usize] += 1;
                total += 1;
            }
        }
        counts
            .into_iter()
            .map(|c| if total > 0 { c as f64 / total as f64 } else { 0.0 })
            .collect()
    }
}

/// Positive per-class weights for the cross-entropy loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        ClassWeights(vec![1.0; num_classes])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(CoreError::domain("class weights must be positive finite"));
        }
        Ok(())
    }
}

/// Scalar loss decomposition. The arithmetic identity
/// `total = scal_geo + scal_sem + ce + 0.5 * sum(aux)` holds bitwise.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub total: f64,
    pub scal_sem: f64,
    pub scal_geo: f64,
    pub ce: f64,
    pub aux: Vec<f64>,
    pub grad_logits: Option<Tensor>,
}

/// Per-voxel softmax of `[X, Y, Z, K]` logits.
pub fn voxel_softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 4 {
        return Err(CoreError::shape("voxel logits must be [X, Y, Z, K]"));
    }
    softmax(logits, 3)
}

fn check_logits_labels(logits: &Tensor, labels: &VoxelLabels) -> Result<usize> {
    if logits.rank() != 4 {
        return Err(CoreError::shape("logits must be [X, Y, Z, K]"));
    }
    let dims = [logits.shape()[0], logits.shape()[1], logits.shape()[2]];
    if dims != labels.dims {
        return Err(CoreError::shape(format!(
            "logits dims {:?} vs labels {:?}",
            dims, labels.dims
        )));
    }
    let k = logits.shape()[3];
    labels.validate_classes(k)?;
    Ok(k)
}

/// Mean over non-ignored voxels of `-w[y] log p[y]`, with the analytic
/// gradient w.r.t. logits.
pub fn weighted_cross_entropy(
    logits: &Tensor,
    labels: &VoxelLabels,
    weights: &ClassWeights,
) -> Result<(f64, Tensor)> {
    let k = check_logits_labels(logits, labels)?;
    if weights.0.len() != k {
        return Err(CoreError::shape("weight count does not match classes"));
    }
    weights.validate()?;
    let probs = voxel_softmax(logits)?;
    let counted = labels.labels.iter().filter(|&&l| l != IGNORE).count();
    if counted == 0 {
        return Err(CoreError::domain("all voxels ignored"));
    }
    let inv = 1.0 / counted as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for (v, &y) in labels.labels.iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        let w = weights.0[y as usize];
        let p = &probs.data()[v * k..(v + 1) * k];
        let py = p[y as usize].max(PROB_EPS);
        loss += -w * py.ln() * inv;
        let g = &mut grad.data_mut()[v * k..(v + 1) * k];
        for c in 0..k {
            let onehot = if c == y as usize { 1.0 } else { 0.0 };
            g[c] = w * (p[c] - onehot) * inv;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffinityMode {
    /// All classes.
    Semantic,
    /// Binary occupied/empty collapse; occupied mass is `1 - p_empty`.
    Geometric,
}

/// Scene-class affinity loss: mean over classes of
/// `-(log P_c + log R_c + log S_c)` built from soft precision, recall, and
/// specificity counts. Returns the scalar and the analytic gradient w.r.t.
/// the probability tensor.
pub fn scene_class_affinity(
    probs: &Tensor,
    labels: &VoxelLabels,
    mode: AffinityMode,
) -> Result<(f64, Tensor)> {
    let k = check_logits_labels(probs, labels)?;
    let voxels: Vec<usize> = (0..labels.len())
        .filter(|&v| labels.labels[v] != IGNORE)
        .collect();
    if voxels.is_empty() {
        return Err(CoreError::domain("all voxels ignored"));
    }

    match mode {
        AffinityMode::Semantic => {
            let get = |v: usize, c: usize| probs.data()[v * k + c];
            let label = |v: usize| labels.labels[v] as usize;
            let (loss, grad_flat) = affinity_core(&voxels, k, get, label)?;
            let mut grad = Tensor::zeros(probs.shape());
            for (vi, &v) in voxels.iter().enumerate() {
                for c in 0..k {
                    grad.data_mut()[v * k + c] = grad_flat[vi * k + c];
                }
            }
            Ok((loss, grad))
        }
        AffinityMode::Geometric => {
            // binary collapse: class 0 = empty, class 1 = occupied
            let get = |v: usize, c: usize| {
                let p_empty = probs.data()[v * k];
                if c == 0 {
                    p_empty
                } else {
                    1.0 - p_empty
                }
            };
            let label = |v: usize| usize::from(labels.labels[v] != 0);
            let (loss, grad_flat) = affinity_core(&voxels, 2, get, label)?;
            // chain rule: only the empty channel carries gradient,
            // d p_occ / d p_empty = -1
            let mut grad = Tensor::zeros(probs.shape());
            for (vi, &v) in voxels.iter().enumerate() {
                grad.data_mut()[v * k] = grad_flat[vi * 2] - grad_flat[vi * 2 + 1];
            }
            Ok((loss, grad))
        }
    }
}

/// Shared soft-count machinery over an abstract probability accessor. The
/// gradient is returned dense over `voxels.len() * num_classes`, with the
/// clamp zeroing gradients at saturated entries.
fn affinity_core(
    voxels: &[usize],
    num_classes: usize,
    get: impl Fn(usize, usize) -> f64,
    label: impl Fn(usize) -> usize,
) -> Result<(f64, Vec<f64>)> {
    let clamp = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let n = voxels.len();
    let mut grad = vec![0.0; n * num_classes];
    let mut loss = 0.0;
    let mut counted_classes = 0usize;

    for c in 0..num_classes {
        let positives = voxels.iter().filter(|&&v| label(v) == c).count();
        let negatives = n - positives;
        let mut class_terms = 0usize;
        let mut class_loss = 0.0;

        // soft counts
        let mut hit = 0.0; // sum p over positives
        let mut mass = 0.0; // sum p over all
        let mut reject = 0.0; // sum (1 - p) over negatives
        for &v in voxels {
            let p = clamp(get(v, c));
            mass += p;
            if label(v) == c {
                hit += p;
            } else {
                reject += 1.0 - p;
            }
        }

        if positives > 0 {
            let precision = hit / mass;
            let recall = hit / positives as f64;
            class_loss += -(precision.ln() + recall.ln());
            class_terms += 2;
        }
        if negatives > 0 {
            let specificity = reject / negatives as f64;
            class_loss += -specificity.ln();
            class_terms += 1;
        }
        if class_terms == 0 {
            continue;
        }
        loss += class_loss;
        counted_classes += 1;

        // gradients; mean over classes applied after the loop
        for (vi, &v) in voxels.iter().enumerate() {
            let raw = get(v, c);
            if raw <= PROB_EPS || raw >= 1.0 - PROB_EPS {
                continue; // clamp plateau
            }
            let is_pos = label(v) == c;
            let mut g = 0.0;
            if positives > 0 {
                // d(-log P)/dp = d(-log hit + log mass)/dp
                if is_pos {
                    g += -1.0 / hit + 1.0 / mass;
                    // d(-log R)/dp
                    g += -1.0 / hit;
                } else {
                    g += 1.0 / mass;
                }
            }
            if negatives > 0 && !is_pos {
                // d(-log S)/dp = 1/reject
                g += 1.0 / reject;
            }
            grad[vi * num_classes + c] += g;
        }
    }

    if counted_classes == 0 {
        return Err(CoreError::domain("no class contributed a term"));
    }
    let scale = 1.0 / counted_classes as f64;
    for g in grad.iter_mut() {
        *g *= scale;
    }
    Ok((loss * scale, grad))
}

/// Majority-vote label downsampling by an integer factor, with ties broken
/// toward IGNORE.
pub fn downsample_labels(labels: &VoxelLabels, factor: usize) -> Result<VoxelLabels> {
    if factor == 0 {
        return Err(CoreError::domain("downsample factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(labels.clone());
    }
    for d in labels.dims {
        if d % factor != 0 {
            return Err(CoreError::shape(format!(
                "dims {:?} not divisible by factor {factor}",
                labels.dims
            )));
        }
    }
    let out_dims = [
        labels.dims[0] / factor,
        labels.dims[1] / factor,
        labels.dims[2] / factor,
    ];
    let mut out = VoxelLabels::filled(out_dims, IGNORE);
    for i in 0..out_dims[0] {
        for j in 0..out_dims[1] {
            for k in 0..out_dims[2] {
                let mut counts = std::collections::BTreeMap::new();
                for di in 0..factor {
                    for dj in 0..factor {
                        for dk in 0..factor {
                            let l = labels.get([i * factor + di, j * factor + dj, k * factor + dk]);
                            *counts.entry(l).or_insert(0usize) += 1;
                        }
                    }
                }
                let best = counts
                    .iter()
                    .filter(|(&l, _)| l != IGNORE)
                    .max_by_key(|(_, &c)| c);
                let vote = match best {
                    Some((&l, &c)) => {
                        let ties = counts
                            .iter()
                            .filter(|(&l2, &c2)| l2 != IGNORE && c2 == c && l2 != l)
                            .count();
                        let ignored = counts.get(&IGNORE).copied().unwrap_or(0);
                        if ties > 0 || ignored >= c {
                            IGNORE
                        } else {
                            l
                        }
                    }
                    None => IGNORE,
                };
                out.set([i, j, k], vote);
            }
        }
    }
    Ok(out)
}

/// Full loss `L = L_scal_geo + L_scal_sem + L_ce` on the final logits plus
/// 0.5-scaled copies per auxiliary logits tensor. Auxiliary logits at a
/// coarser resolution are supervised against majority-vote-downsampled
/// labels.
pub fn total_loss(
    final_logits: &Tensor,
    aux_logits: &[Tensor],
    labels: &VoxelLabels,
    weights: &ClassWeights,
) -> Result<LossReport> {
    let (geo, sem, ce, grad) = single_loss(final_logits, labels, weights)?;
    let mut aux = Vec::with_capacity(aux_logits.len());
    for logits in aux_logits {
        let dims = [logits.shape()[0], logits.shape()[1], logits.shape()[2]];
        let factor = if dims == labels.dims {
            1
        } else {
            let f = labels.dims[0] / dims[0].max(1);
            if f == 0
                || [dims[0] * f, dims[1] * f, dims[2] * f] != labels.dims
            {
                return Err(CoreError::shape(format!(
                    "auxiliary dims {:?} incompatible with labels {:?}",
                    dims, labels.dims
                )));
            }
            f
        };
        let coarse = downsample_labels(labels, factor)?;
        let (g, s, c, _) = single_loss(logits, &coarse, weights)?;
        aux.push(g + s + c);
    }
    let total = geo + sem + ce + 0.5 * aux.iter().sum::<f64>();
    Ok(LossReport {
        total,
        scal_sem: sem,
        scal_geo: geo,
        ce,
        aux,
        grad_logits: Some(grad),
    })
}

/// One resolution level: affinity losses + weighted CE, with the combined
/// gradient w.r.t. logits (affinity gradients pulled back through softmax).
fn single_loss(
    logits: &Tensor,
    labels: &VoxelLabels,
    weights: &ClassWeights,
) -> Result<(f64, f64, f64, Tensor)> {
    let probs = voxel_softmax(logits)?;
    let (geo, grad_geo) = scene_class_affinity(&probs, labels, AffinityMode::Geometric)?;
    let (sem, grad_sem) = scene_class_affinity(&probs, labels, AffinityMode::Semantic)?;
    let (ce, grad_ce) = weighted_cross_entropy(logits, labels, weights)?;
    let grad_p = grad_geo.add(&grad_sem)?;
    let grad = softmax_backward(&probs, &grad_p)?.add(&grad_ce)?;
    Ok((geo, sem, ce, grad))
}

/// Pull a gradient w.r.t. probabilities back through the per-voxel softmax:
/// `dL/dz_k = p_k (g_k - sum_j g_j p_j)`.
pub fn softmax_backward(probs: &Tensor, grad_probs: &Tensor) -> Result<Tensor> {
    if probs.shape() != grad_probs.shape() {
        return Err(CoreError::shape("softmax_backward shape mismatch"));
    }
    let k = *probs.shape().last().unwrap();
    let rows = probs.len() / k;
    let mut out = Tensor::zeros(probs.shape());
    for r in 0..rows {
        let p = &probs.data()[r * k..(r + 1) * k];
        let g = &grad_probs.data()[r * k..(r + 1) * k];
        let dot: f64 = p.iter().zip(g).map(|(pi, gi)| pi * gi).sum();
        for c in 0..k {
            out.data_mut()[r * k + c] = p[c] * (g[c] - dot);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn labels_1d(dims: [usize; 3], vals: &[u8]) -> VoxelLabels {
        VoxelLabels::new(dims, vals.to_vec()).unwrap()
    }

    #[test]
    fn ce_uniform_prediction_is_ln2() {
        let logits = Tensor::zeros(&[1, 1, 1, 2]);
        let labels = labels_1d([1, 1, 1], &[0]);
        let (loss, _) = weighted_cross_entropy(&logits, &labels, &ClassWeights::uniform(2)).unwrap();
        assert_abs_diff_eq!(loss, 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn ce_saturated_prediction_vanishes() {
        let logits = Tensor::new(vec![1, 1, 1, 2], vec![20.0, 0.0]).unwrap();
        let labels = labels_1d([1, 1, 1], &[0]);
        let (loss, _) = weighted_cross_entropy(&logits, &labels, &ClassWeights::uniform(2)).unwrap();
        assert!(loss < 1e-8);
    }

    #[test]
    fn ce_mixed_case_formula_and_gradient() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let logits = Tensor::from_fn(&[3, 1, 1, 4], |_| rng.gen_range(-1.0..1.0));
        let labels = labels_1d([3, 1, 1], &[2, 0, IGNORE]);
        let w = ClassWeights(vec![1.0, 2.0, 0.5, 1.5]);
        let (loss, grad) = weighted_cross_entropy(&logits, &labels, &w).unwrap();

        // direct formula evaluation
        let probs = voxel_softmax(&logits).unwrap();
        let mut expect = 0.0;
        for (v, &y) in [2u8, 0].iter().enumerate() {
            expect += -w.0[y as usize] * probs.data()[v * 4 + y as usize].ln() / 2.0;
        }
        assert_abs_diff_eq!(loss, expect, epsilon = 1e-12);

        let err = finite_diff_check(
            &mut |t| weighted_cross_entropy(t, &labels, &w).unwrap().0,
            &logits,
            &grad,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn ce_all_ignored_is_domain_error() {
        let logits = Tensor::zeros(&[1, 1, 2, 3]);
        let labels = labels_1d([1, 1, 2], &[IGNORE, IGNORE]);
        assert!(weighted_cross_entropy(&logits, &labels, &ClassWeights::uniform(3)).is_err());
    }

    #[test]
    fn affinity_perfect_prediction_is_tiny() {
        // one-hot up to the eps clamp
        let labels = labels_1d([2, 1, 1], &[0, 1]);
        let probs = Tensor::new(
            vec![2, 1, 1, 2],
            vec![1.0 - 1e-7, 1e-7, 1e-7, 1.0 - 1e-7],
        )
        .unwrap();
        for mode in [AffinityMode::Semantic, AffinityMode::Geometric] {
            let (loss, _) = scene_class_affinity(&probs, &labels, mode).unwrap();
            assert!(loss < 1e-5, "{mode:?} loss {loss}");
        }
    }

    #[test]
    fn affinity_worked_example() {
        // p = [[0.8, 0.2], [0.4, 0.6]], y = [0, 1]:
        // class 0 term -(ln(2/3) + ln 0.8 + ln 0.6), class 1 term
        // -(ln 0.75 + ln 0.6 + ln 0.8), mean ~= 1.0805
        let probs = Tensor::new(vec![2, 1, 1, 2], vec![0.8, 0.2, 0.4, 0.6]).unwrap();
        let labels = labels_1d([2, 1, 1], &[0, 1]);
        let (loss, _) = scene_class_affinity(&probs, &labels, AffinityMode::Semantic).unwrap();
        let class0 = -((2.0f64 / 3.0).ln() + 0.8f64.ln() + 0.6f64.ln());
        let class1 = -((0.75f64).ln() + 0.6f64.ln() + 0.8f64.ln());
        assert_abs_diff_eq!(loss, (class0 + class1) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 1.0805, epsilon = 1e-4);
    }

    #[test]
    fn affinity_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        // interior probabilities; rows need not sum to 1 for the check
        let probs = Tensor::from_fn(&[2, 2, 2, 3], |_| rng.gen_range(0.1..0.9));
        let labels = VoxelLabels::new(
            [2, 2, 2],
            (0..8).map(|i| if i == 5 { IGNORE } else { i % 3 }).collect(),
        )
        .unwrap();
        for mode in [AffinityMode::Semantic, AffinityMode::Geometric] {
            let (_, grad) = scene_class_affinity(&probs, &labels, mode).unwrap();
            let err = finite_diff_check(
                &mut |t| scene_class_affinity(t, &labels, mode).unwrap().0,
                &probs,
                &grad,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "{mode:?} rel err {err}");
        }
    }

    #[test]
    fn affinity_voxel_permutation_invariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let flat: Vec<f64> = (0..12).map(|_| rng.gen_range(0.1..0.9)).collect();
        let labels: Vec<u8> = vec![0, 1, 2, 0];
        let probs = Tensor::new(vec![4, 1, 1, 3], flat.clone()).unwrap();
        let l = labels_1d([4, 1, 1], &labels);
        let (base, _) = scene_class_affinity(&probs, &l, AffinityMode::Semantic).unwrap();

        let perm = [3usize, 1, 0, 2];
        let mut pflat = vec![0.0; 12];
        let mut plab = vec![0u8; 4];
        for (dst, &src) in perm.iter().enumerate() {
            pflat[dst * 3..dst * 3 + 3].copy_from_slice(&flat[src * 3..src * 3 + 3]);
            plab[dst] = labels[src];
        }
        let probs_p = Tensor::new(vec![4, 1, 1, 3], pflat).unwrap();
        let lp = labels_1d([4, 1, 1], &plab);
        let (permuted, _) = scene_class_affinity(&probs_p, &lp, AffinityMode::Semantic).unwrap();
        assert_abs_diff_eq!(base, permuted, epsilon = 1e-14);
    }

    #[test]
    fn total_loss_identity_and_aux_scaling() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let logits = Tensor::from_fn(&[2, 2, 2, 3], |_| rng.gen_range(-1.0..1.0));
        let labels = VoxelLabels::new([2, 2, 2], (0..8).map(|i| i % 3).collect()).unwrap();
        let w = ClassWeights::uniform(3);

        let base = total_loss(&logits, &[], &labels, &w).unwrap();
        assert_eq!(base.total, base.scal_geo + base.scal_sem + base.ce);
        assert!(base.aux.is_empty());

        // aux = [final logits] at the same resolution -> total = 1.5x base
        let with_aux = total_loss(&logits, &[logits.clone()], &labels, &w).unwrap();
        assert_abs_diff_eq!(with_aux.total, 1.5 * base.total, epsilon = 1e-12);
        assert_eq!(
            with_aux.total,
            with_aux.scal_geo + with_aux.scal_sem + with_aux.ce + 0.5 * with_aux.aux.iter().sum::<f64>()
        );
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let logits = Tensor::from_fn(&[2, 2, 1, 3], |_| rng.gen_range(-1.0..1.0));
        let labels = VoxelLabels::new([2, 2, 1], vec![0, 1, 2, 1]).unwrap();
        let w = ClassWeights(vec![1.0, 0.7, 1.3]);
        let report = total_loss(&logits, &[], &labels, &w).unwrap();
        let grad = report.grad_logits.unwrap();
        let err = finite_diff_check(
            &mut |t| {
                let r = total_loss(t, &[], &labels, &w).unwrap();
                r.total
            },
            &logits,
            &grad,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn perfect_prediction_all_components_tiny() {
        // logit margin 20 toward ground truth
        let labels = VoxelLabels::new([2, 2, 1], vec![0, 1, 2, 1]).unwrap();
        let logits = Tensor::from_fn(&[2, 2, 1, 3], |idx| {
            let v = (idx[0] * 2 + idx[1]) * 1 + idx[2];
            let y = labels.labels[v] as usize;
            if idx[3] == y {
                20.0
            } else {
                0.0
            }
        });
        let r = total_loss(&logits, &[], &labels, &ClassWeights::uniform(3)).unwrap();
        assert!(r.ce < 1e-5);
        assert!(r.scal_sem < 1e-5);
        assert!(r.scal_geo < 1e-5);
    }

    #[test]
    fn ignore_hygiene() {
        // flipping predictions on ignored voxels changes nothing
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut logits = Tensor::from_fn(&[2, 2, 1, 3], |_| rng.gen_range(-1.0..1.0));
        let labels = VoxelLabels::new([2, 2, 1], vec![0, IGNORE, 2, 1]).unwrap();
        let w = ClassWeights::uniform(3);
        let before = total_loss(&logits, &[], &labels, &w).unwrap();
        // voxel 1 is ignored; scramble its logits
        for c in 0..3 {
            logits.data_mut()[3 + c] = rng.gen_range(-10.0..10.0);
        }
        let after = total_loss(&logits, &[], &labels, &w).unwrap();
        assert_eq!(before.total, after.total);
        assert_eq!(before.ce, after.ce);
    }

    #[test]
    fn downsample_majority_vote_and_ties() {
        // factor 2 over a 2x2x2 block
        let mut labels = VoxelLabels::filled([2, 2, 2], 1);
        labels.labels[0] = 2; // minority
        let down = downsample_labels(&labels, 2).unwrap();
        assert_eq!(down.labels, vec![1]);

        // 4-4 tie between classes -> IGNORE
        let tie = VoxelLabels::new([2, 2, 2], vec![1, 1, 1, 1, 2, 2, 2, 2]).unwrap();
        let down = downsample_labels(&tie, 2).unwrap();
        assert_eq!(down.labels, vec![IGNORE]);

        // ignore majority wins toward IGNORE
        let ig = VoxelLabels::new([2, 2, 2], vec![IGNORE; 8]).unwrap();
        assert_eq!(downsample_labels(&ig, 2).unwrap().labels, vec![IGNORE]);
    }
}
