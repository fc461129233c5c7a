//! Segmentation losses: class-weighted cross-entropy, the two-domain balanced
//! objective and the teacher-distribution losses used for distillation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Target};
use crate::tensor::Scalar;

/// Label id that is excluded from losses and metrics.
pub const VOID: u8 = 255;
/// Lower clamp on class weights.
pub const WCE_EPSILON: f64 = 1e-5;
/// Allowed deviation of a teacher distribution from the simplex.
pub const SIMPLEX_TOLERANCE: f64 = 1e-4;

/// Per-class pixel frequencies over a labeled set and the weights derived
/// from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub frequencies: Vec<f64>,
    pub present: Vec<bool>,
    pub counts: Vec<u64>,
    pub weights: Vec<f64>,
    pub epsilon: f64,
    pub void_label: u8,
}

impl ClassStats {
    pub fn num_classes(&self) -> usize {
        self.frequencies.len()
    }

    /// Stats from raw per-class pixel counts.
    pub fn from_counts(counts: Vec<u64>, void_label: u8, epsilon: f64) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Data("no labeled pixels to count class frequencies".into()));
        }
        let frequencies: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        let present = counts.iter().map(|&c| c > 0).collect();
        let mut stats = ClassStats { frequencies, present, counts, weights: Vec::new(), epsilon, void_label };
        stats.weights = wce_weights(&stats);
        Ok(stats)
    }
}

/// Counts pixels per class over label maps; `void_label` pixels are skipped.
pub fn class_frequencies<'a, I>(label_maps: I, num_classes: usize, void_label: u8) -> Result<ClassStats>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    let mut counts = vec![0u64; num_classes];
    for map in label_maps {
        for &y in map {
            if y == void_label {
                continue;
            }
            let slot = counts
                .get_mut(y as usize)
                .ok_or_else(|| Error::Data(format!("label {y} outside [0, {num_classes})")))?;
            *slot += 1;
        }
    }
    ClassStats::from_counts(counts, void_label, WCE_EPSILON)
}

/// `ω_l = max(f_l⁻¹ / (Σ_i f_i⁻¹ · min_i f_i⁻¹), ε)` over present classes;
/// absent classes get `ε`.
pub fn wce_weights(stats: &ClassStats) -> Vec<f64> {
    let inv: Vec<Option<f64>> = stats
        .frequencies
        .iter()
        .zip(&stats.present)
        .map(|(&f, &p)| (p && f > 0.0).then(|| 1.0 / f))
        .collect();
    let sum: f64 = inv.iter().flatten().sum();
    let min = inv.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    inv.iter()
        .map(|v| match v {
            Some(v) => (v / (sum * min)).max(stats.epsilon),
            None => stats.epsilon,
        })
        .collect()
}

fn check_labels(labels: &[u8], classes: usize, void_label: u8) -> Result<()> {
    match labels.iter().find(|&&y| y != void_label && y as usize >= classes) {
        Some(y) => Err(Error::Data(format!("label {y} outside [0, {classes})"))),
        None => Ok(()),
    }
}

/// Per-pixel weights `scale · ω(y) / (#non-void pixels)` plus hard targets,
/// with void pixels given weight zero.
fn hard_target<T: Scalar>(labels: &[u8], omega: &[f64], void_label: u8, scale: f64) -> (Vec<usize>, Vec<T>) {
    let count = labels.iter().filter(|&&y| y != void_label).count();
    let norm = if count == 0 { 0.0 } else { scale / count as f64 };
    let mut targets = Vec::with_capacity(labels.len());
    let mut weights = Vec::with_capacity(labels.len());
    for &y in labels {
        if y == void_label {
            targets.push(0);
            weights.push(T::zero());
        } else {
            targets.push(y as usize);
            weights.push(T::from_f64_lossy(omega[y as usize] * norm));
        }
    }
    (targets, weights)
}

/// Mean per-pixel weight `Σ f_l ω_l` under the pool's class frequencies;
/// 1 for unit weights.
pub fn expected_weight(stats: &ClassStats, omega: &[f64]) -> f64 {
    stats.frequencies.iter().zip(omega).map(|(f, w)| f * w).sum()
}

/// Weighted cross-entropy over non-void pixels, normalized by their count.
/// `labels` is the `[N, H, W]` map flattened in batch-major order.
pub fn loss_wce<T: Scalar>(g: &mut Graph<T>, logits: NodeId, labels: &[u8], omega: &[f64], void_label: u8) -> Result<NodeId> {
    let classes = g.value(logits).dims4()?[1];
    if omega.len() != classes {
        return Err(Error::Parameter(format!("{} class weights for {classes} classes", omega.len())));
    }
    check_labels(labels, classes, void_label)?;
    let (targets, weights) = hard_target(labels, omega, void_label, 1.0);
    g.cross_entropy(logits, Target::Hard(targets), weights)
}

/// `loss_wce(dense) + λ · loss_wce(sparse)` on separately forwarded batches.
#[allow(clippy::too_many_arguments)]
pub fn loss_bgc<T: Scalar>(
    g: &mut Graph<T>,
    dense_logits: NodeId,
    dense_labels: &[u8],
    sparse_logits: Option<NodeId>,
    sparse_labels: &[u8],
    lambda: f64,
    omega_dense: &[f64],
    omega_sparse: &[f64],
) -> Result<NodeId> {
    if lambda < 0.0 {
        return Err(Error::Parameter(format!("lambda must be non-negative, got {lambda}")));
    }
    if dense_labels.is_empty() {
        return Err(Error::Data("balanced loss needs a non-empty dense batch".into()));
    }
    let dense = loss_wce(g, dense_logits, dense_labels, omega_dense, VOID)?;
    let sparse_logits = match sparse_logits {
        Some(s) if lambda > 0.0 => s,
        _ => return Ok(dense),
    };
    let sparse = loss_wce(g, sparse_logits, sparse_labels, omega_sparse, VOID)?;
    let sparse = g.scale(sparse, T::from_f64_lossy(lambda))?;
    g.add(dense, sparse)
}

/// Proportioned-batch form of the balanced loss: the first `n_dense` samples
/// of one forwarded batch are dense, the rest sparse. Each part is normalized
/// by its own non-void count and the sparse part is scaled by `λ`.
pub fn loss_bgc_proportioned<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    labels: &[u8],
    n_dense: usize,
    lambda: f64,
    omega_dense: &[f64],
    omega_sparse: &[f64],
) -> Result<NodeId> {
    let [n, classes, h, w] = g.value(logits).dims4()?;
    if n_dense == 0 {
        return Err(Error::Data("balanced loss needs a non-empty dense batch".into()));
    }
    if n_dense > n || labels.len() != n * h * w {
        return Err(Error::Dimension(format!("{n_dense} dense samples in a batch of {n}, {} labels", labels.len())));
    }
    if lambda < 0.0 {
        return Err(Error::Parameter(format!("lambda must be non-negative, got {lambda}")));
    }
    check_labels(labels, classes, VOID)?;
    let split = n_dense * h * w;
    let (mut targets, mut weights) = hard_target::<T>(&labels[..split], omega_dense, VOID, 1.0);
    let (t2, w2) = hard_target::<T>(&labels[split..], omega_sparse, VOID, lambda);
    targets.extend(t2);
    weights.extend(w2);
    g.cross_entropy(logits, Target::Hard(targets), weights)
}

fn check_simplex<T: Scalar>(probs: &[T], n: usize, classes: usize, plane: usize) -> Result<()> {
    for b in 0..n {
        for p in 0..plane {
            let s: f64 = (0..classes).map(|c| probs[(b * classes + c) * plane + p].as_f64()).sum();
            if !s.is_finite() || (s - 1.0).abs() > SIMPLEX_TOLERANCE {
                return Err(Error::Data(format!("teacher distribution at sample {b}, pixel {p} sums to {s}")));
            }
        }
    }
    Ok(())
}

/// Index of the largest probability per pixel; ties go to the lowest class.
pub fn argmax_channels<T: Scalar>(values: &[T], n: usize, classes: usize, plane: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = values[b * classes * plane + p];
            for c in 1..classes {
                let v = values[(b * classes + c) * plane + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Cross-entropy between teacher distributions `[N, L, H, W]` and the
/// student softmax, averaged over pixels.
pub fn distill_ce<T: Scalar>(g: &mut Graph<T>, student_logits: NodeId, teacher_probs: &[T]) -> Result<NodeId> {
    let [n, classes, h, w] = g.value(student_logits).dims4()?;
    check_simplex(teacher_probs, n, classes, h * w)?;
    let weight = T::from_f64_lossy(1.0 / (n * h * w) as f64);
    g.cross_entropy(student_logits, Target::Soft(teacher_probs.to_vec()), vec![weight; n * h * w])
}

/// [`distill_ce`] with each pixel weighted by `ω(argmax teacher)`.
pub fn distill_wce<T: Scalar>(g: &mut Graph<T>, student_logits: NodeId, teacher_probs: &[T], omega: &[f64]) -> Result<NodeId> {
    let [n, classes, h, w] = g.value(student_logits).dims4()?;
    if omega.len() != classes {
        return Err(Error::Parameter(format!("{} class weights for {classes} classes", omega.len())));
    }
    check_simplex(teacher_probs, n, classes, h * w)?;
    let norm = 1.0 / (n * h * w) as f64;
    let weights = argmax_channels(teacher_probs, n, classes, h * w)
        .into_iter()
        .map(|c| T::from_f64_lossy(omega[c as usize] * norm))
        .collect();
    g.cross_entropy(student_logits, Target::Soft(teacher_probs.to_vec()), weights)
}

/// Sharpens or flattens distributions as `p^(1/t)` renormalized per pixel.
pub fn temper<T: Scalar>(probs: &[T], classes: usize, plane: usize, temperature: f64) -> Vec<T> {
    if temperature == 1.0 {
        return probs.to_vec();
    }
    let mut out: Vec<T> = probs.iter().map(|p| T::from_f64_lossy(p.as_f64().powf(1.0 / temperature))).collect();
    for chunk in out.chunks_mut(classes * plane) {
        for p in 0..plane {
            let s: f64 = (0..classes).map(|c| chunk[c * plane + p].as_f64()).sum();
            for c in 0..classes {
                chunk[c * plane + p] = T::from_f64_lossy(chunk[c * plane + p].as_f64() / s);
            }
        }
    }
    out
}
