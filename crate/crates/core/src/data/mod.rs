//! Samples, preprocessing, procedural two-domain scenes, object compositing,
//! domain-proportioned batch sampling and Netpbm dataset storage.

mod io;
mod scene;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::VOID;
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

pub use io::{dataset_read, dataset_write, read_pgm, read_ppm, write_pgm, write_ppm, MANIFEST_FILE};
pub use scene::{
    gen_dense_scene, gen_sparse_scene, gen_test_scene, gen_unlabeled_scene, SceneParams, FULL_PALETTE, OBJECT_CLASSES,
    SMALL_PALETTE, STRUCTURAL_CLASSES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Dense,
    Sparse,
    Unlabeled,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Dense => "dense",
            Domain::Sparse => "sparse",
            Domain::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dense" => Ok(Domain::Dense),
            "sparse" => Ok(Domain::Sparse),
            "unlabeled" => Ok(Domain::Unlabeled),
            other => Err(format!("unknown domain {other:?}")),
        }
    }
}

/// An RGB image `[3, H, W]` holding 8-bit values, an optional label map
/// `[H, W]` with [`VOID`] as the ignore id, and its domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub labels: Option<Vec<u8>>,
    pub domain: Domain,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Dense-domain validity: every pixel labeled with a palette class
    /// except void occlusion margins next to other labels.
    pub fn validate_dense(&self, num_classes: usize) -> Result<()> {
        let labels = self.labels.as_ref().ok_or_else(|| Error::Data(format!("{}: dense sample without labels", self.id)))?;
        let (h, w) = (self.height(), self.width());
        for y in 0..h {
            for x in 0..w {
                let v = labels[y * w + x];
                if v == VOID {
                    let touches_label = neighbours(x, y, w, h).any(|(nx, ny)| labels[ny * w + nx] != VOID);
                    if !touches_label {
                        return Err(Error::Data(format!("{}: void region at ({x}, {y}) is not a margin", self.id)));
                    }
                } else if v as usize >= num_classes {
                    return Err(Error::Data(format!("{}: label {v} outside palette", self.id)));
                }
            }
        }
        Ok(())
    }
}

fn neighbours(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let (x, y) = (x as i64, y as i64);
    [(-1, 0), (1, 0), (0, -1), (0, 1)].into_iter().filter_map(move |(dx, dy)| {
        let (nx, ny) = (x + dx, y + dy);
        (nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64).then_some((nx as usize, ny as usize))
    })
}

/// Per-channel local contrast normalization:
/// `x / (1 + α/k² · Σ_{window} x²)^β` with a `k × k` window anchored at the
/// pixel and extending right and down, zero-padded past the border.
pub fn contrast_normalize<T: Scalar>(x: &Tensor<T>, k: usize, alpha: f64, beta: f64) -> Result<Tensor<T>> {
    if k == 0 {
        return Err(Error::Parameter("contrast normalization window must be at least 1".into()));
    }
    let (c, h, w) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Dimension(format!("contrast_normalize expects [C, H, W], got {s:?}"))),
    };
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    // summed-area table of squares with one row/column of zero padding
    let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
    let scale = alpha / (k * k) as f64;
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let mut row = 0.0;
            for xx in 0..w {
                let v = plane[y * w + xx].as_f64();
                row += v * v;
                sat[(y + 1) * (w + 1) + xx + 1] = sat[y * (w + 1) + xx + 1] + row;
            }
        }
        for y in 0..h {
            let y1 = (y + k).min(h);
            for xx in 0..w {
                let x1 = (xx + k).min(w);
                let s = sat[y1 * (w + 1) + x1] - sat[y * (w + 1) + x1] - sat[y1 * (w + 1) + xx] + sat[y * (w + 1) + xx];
                let denom = (1.0 + scale * s.max(0.0)).powf(beta);
                out.push(T::from_f64_lossy(plane[y * w + xx].as_f64() / denom));
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Zero mean over the whole image, then rescaled so the largest magnitude is
/// 127. Constant images map to zeros.
pub fn standardize<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.len() as f64;
    let mean = x.data().iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let max = x.data().iter().map(|v| (v.as_f64() - mean).abs()).fold(0.0, f64::max);
    if max == 0.0 {
        return Tensor::zeros(x.shape());
    }
    let s = 127.0 / max;
    x.map(|v| T::from_f64_lossy((v.as_f64() - mean) * s))
}

pub const CONTRAST_KERNEL: usize = 7;
pub const CONTRAST_ALPHA: f64 = 1.0;
pub const CONTRAST_BETA: f64 = 0.5;

/// Network input for an 8-bit image: contrast normalization, then
/// standardization.
pub fn preprocess(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let x: Tensor<f64> = image.cast();
    let normalized = contrast_normalize(&x, CONTRAST_KERNEL, CONTRAST_ALPHA, CONTRAST_BETA)?;
    Ok(standardize(&normalized).cast())
}

/// Outcome of pasting sparse-domain objects into a dense scene.
#[derive(Debug, Clone)]
pub struct Composite {
    pub sample: Sample,
    /// Pixels overwritten by pasted objects, `[H, W]`.
    pub pasted: Vec<bool>,
    pub warnings: Vec<String>,
}

/// 4-connected components of non-void pixels, as pixel index lists.
fn components(labels: &[u8], w: usize, h: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; labels.len()];
    let mut out = Vec::new();
    for start in 0..labels.len() {
        if seen[start] || labels[start] == VOID {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(p) = stack.pop() {
            comp.push(p);
            for (nx, ny) in neighbours(p % w, p / w, w, h) {
                let q = ny * w + nx;
                if !seen[q] && labels[q] != VOID {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

const PLACEMENT_TRIES: usize = 8;

/// Pastes every object (connected labeled region) of `objects` at a uniform
/// random position inside `dense`, overwriting pixels and labels. Objects
/// that do not fit, or find no spot clear of earlier pastes, are skipped
/// with a warning.
pub fn flying_cars_composite(dense: &Sample, objects: &Sample, rng: &mut RngState) -> Result<Composite> {
    let dense_labels =
        dense.labels.as_ref().ok_or_else(|| Error::Data(format!("{}: background sample has no labels", dense.id)))?;
    let obj_labels =
        objects.labels.as_ref().ok_or_else(|| Error::Data(format!("{}: object sample has no labels", objects.id)))?;
    let (h, w) = (dense.height(), dense.width());
    let (oh, ow) = (objects.height(), objects.width());
    let mut image = dense.image.clone();
    let mut labels = dense_labels.clone();
    let mut pasted = vec![false; h * w];
    let mut warnings = Vec::new();
    for comp in components(obj_labels, ow, oh) {
        let (x0, x1) = comp.iter().map(|p| p % ow).fold((usize::MAX, 0), |(a, b), x| (a.min(x), b.max(x)));
        let (y0, y1) = comp.iter().map(|p| p / ow).fold((usize::MAX, 0), |(a, b), y| (a.min(y), b.max(y)));
        let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
        if bw > w || bh > h {
            warnings.push(format!("object of {bw}×{bh} from {} does not fit {w}×{h}, skipped", objects.id));
            continue;
        }
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let tx = rng.index(w - bw + 1);
            let ty = rng.index(h - bh + 1);
            let target = |p: usize| (ty + p / ow - y0) * w + tx + p % ow - x0;
            if comp.iter().any(|&p| pasted[target(p)]) {
                continue;
            }
            for &p in &comp {
                let t = target(p);
                labels[t] = obj_labels[p];
                pasted[t] = true;
                for ch in 0..3 {
                    image.data_mut()[ch * h * w + t] = objects.image.data()[ch * oh * ow + p];
                }
            }
            placed = true;
            break;
        }
        if !placed {
            warnings.push(format!("no free spot for an object from {}, skipped", objects.id));
        }
    }
    for msg in &warnings {
        log::warn!("{msg}");
    }
    let sample = Sample { id: format!("{}+{}", dense.id, objects.id), image, labels: Some(labels), domain: Domain::Dense };
    Ok(Composite { sample, pasted, warnings })
}

/// Samples per batch from each domain, and the weight of the sparse part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchPlan {
    pub n_dense: usize,
    pub n_sparse: usize,
    pub lambda: f64,
}

impl Default for BatchPlan {
    fn default() -> Self {
        BatchPlan { n_dense: 6, n_sparse: 2, lambda: 0.25 }
    }
}

impl BatchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.n_dense == 0 {
            return Err(Error::Config("batch plan needs at least one dense sample".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Indices into the dense and sparse pools for one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub dense: Vec<usize>,
    pub sparse: Vec<usize>,
}

/// Endless stream of batches drawn with replacement in fixed proportions.
#[derive(Debug, Clone)]
pub struct BgcSampler {
    dense_len: usize,
    sparse_len: usize,
    plan: BatchPlan,
    rng: RngState,
}

pub fn bgc_batch_sampler(dense_len: usize, sparse_len: usize, plan: BatchPlan, rng: RngState) -> Result<BgcSampler> {
    plan.validate()?;
    if dense_len == 0 {
        return Err(Error::Data("batch plan requests dense samples but the dense pool is empty".into()));
    }
    if plan.n_sparse > 0 && sparse_len == 0 {
        return Err(Error::Data("batch plan requests sparse samples but the sparse pool is empty".into()));
    }
    Ok(BgcSampler { dense_len, sparse_len, plan, rng })
}

impl Iterator for BgcSampler {
    type Item = BatchIndices;

    fn next(&mut self) -> Option<BatchIndices> {
        let dense = (0..self.plan.n_dense).map(|_| self.rng.index(self.dense_len)).collect();
        let sparse = (0..self.plan.n_sparse).map(|_| self.rng.index(self.sparse_len)).collect();
        Some(BatchIndices { dense, sparse })
    }
}

/// Per-domain class shares in percent of labeled pixels, one row per domain.
pub fn class_distribution_csv(samples: &[Sample], palette: &[String]) -> String {
    let mut out = format!("domain,samples,labeled_pixels,void_pixels,{}\n", palette.join(","));
    for domain in [Domain::Dense, Domain::Sparse, Domain::Unlabeled] {
        let group: Vec<&Sample> = samples.iter().filter(|s| s.domain == domain).collect();
        if group.is_empty() {
            continue;
        }
        let mut counts = vec![0u64; palette.len()];
        let mut void = 0u64;
        for s in &group {
            for &y in s.labels.iter().flatten() {
                match counts.get_mut(y as usize) {
                    Some(c) => *c += 1,
                    None => void += 1,
                }
            }
        }
        let labeled: u64 = counts.iter().sum();
        let shares: Vec<String> = counts
            .iter()
            .map(|&c| if labeled == 0 { "0.00".into() } else { format!("{:.2}", 100.0 * c as f64 / labeled as f64) })
            .collect();
        out.push_str(&format!("{domain},{},{labeled},{void},{}\n", group.len(), shares.join(",")));
    }
    out
}
