//! Evaluation metrics: confusion matrices, per-class IoU, mIoU over the
//! semantic classes, and occupancy IoU over the binary occupied/empty
//! collapse. Class 0 is "empty" and excluded from mIoU.

use crate::error::{CoreError, Result};
use crate::loss::{ClassWeights, VoxelLabels, IGNORE};
use crate::tensor::Tensor;

/// Counts over non-ignored voxels, indexed `[ground truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// Per-class ground-truth counts (row sums).
    pub fn gt_counts(&self) -> Vec<u64> {
        (0..self.num_classes)
            .map(|g| (0..self.num_classes).map(|p| self.get(g, p)).sum())
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Per-voxel argmax with lowest-index tie-break.
pub fn argmax_labels(logits: &Tensor) -> Result<VoxelLabels> {
    if logits.rank() != 4 {
        return Err(CoreError::shape("logits must be [X, Y, Z, K]"));
    }
    let k = logits.shape()[3];
    if k > IGNORE as usize {
        return Err(CoreError::domain("too many classes for u8 labels"));
    }
    let dims = [logits.shape()[0], logits.shape()[1], logits.shape()[2]];
    let voxels = dims[0] * dims[1] * dims[2];
    let mut labels = Vec::with_capacity(voxels);
    for v in 0..voxels {
        let row = &logits.data()[v * k..(v + 1) * k];
        let mut best = 0usize;
        for (c, &val) in row.iter().enumerate() {
            if val > row[best] {
                best = c;
            }
        }
        labels.push(best as u8);
    }
    VoxelLabels::new(dims, labels)
}

pub fn confusion_matrix(
    pred: &VoxelLabels,
    gt: &VoxelLabels,
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    if pred.dims != gt.dims {
        return Err(CoreError::shape(format!(
            "pred dims {:?} vs gt {:?}",
            pred.dims, gt.dims
        )));
    }
    pred.validate_classes(num_classes)?;
    gt.validate_classes(num_classes)?;
    let mut counts = vec![0u64; num_classes * num_classes];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if g == IGNORE || p == IGNORE {
            continue;
        }
        counts[g as usize * num_classes + p as usize] += 1;
    }
    Ok(ConfusionMatrix {
        num_classes,
        counts,
    })
}

/// Metric summary. `occupancy_iou` is `None` when neither prediction nor
/// ground truth contains an occupied voxel (undefined, never silently 0).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub occupancy_iou: Option<f64>,
    pub miou: Option<f64>,
    /// Per semantic class (index 0 here is class id 1); `None` when the class
    /// is absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
}

pub fn metrics(cm: &ConfusionMatrix) -> MetricReport {
    let n = cm.num_classes;
    let mut per_class = Vec::with_capacity(n.saturating_sub(1));
    let mut sum = 0.0;
    let mut included = 0usize;
    for c in 1..n {
        let tp = cm.get(c, c);
        let fp: u64 = (0..n).filter(|&g| g != c).map(|g| cm.get(g, c)).sum();
        let fn_: u64 = (0..n).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
        let denom = tp + fp + fn_;
        if denom == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / denom as f64;
            per_class.push(Some(iou));
            sum += iou;
            included += 1;
        }
    }
    let miou = (included > 0).then(|| sum / included as f64);

    // binary occupied/empty collapse
    let mut inter = 0u64;
    let mut union = 0u64;
    for g in 0..n {
        for p in 0..n {
            let c = cm.get(g, p);
            let g_occ = g != 0;
            let p_occ = p != 0;
            if g_occ && p_occ {
                inter += c;
            }
            if g_occ || p_occ {
                union += c;
            }
        }
    }
    let occupancy_iou = (union > 0).then(|| inter as f64 / union as f64);

    MetricReport {
        occupancy_iou,
        miou,
        per_class_iou: per_class,
    }
}

/// Inverse-log frequency weighting `w_c = 1 / ln(1.02 + f_c)`, normalized so
/// the mean weight is 1.
pub fn class_weights_from_frequencies(freqs: &[f64]) -> Result<ClassWeights> {
    if freqs.is_empty() {
        return Err(CoreError::domain("no frequencies given"));
    }
    if freqs.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err(CoreError::domain("frequencies must be nonnegative finite"));
    }
    if freqs.iter().all(|&f| f == 0.0) {
        return Err(CoreError::domain("frequencies must not all be zero"));
    }
    let raw: Vec<f64> = freqs.iter().map(|f| 1.0 / (1.02 + f).ln()).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(ClassWeights(raw.into_iter().map(|w| w / mean).collect()))
}
