//! Heatmap targets, losses and selection for the RoI and objectness stages.
//!
//! Losses return `(value, dvalue/dinput)` so they can be wrapped as graph ops.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ground_truth::SceneGroundTruth;
use crate::scalar::{pairwise_sum, Real};
use crate::spatial::KdTree;
use crate::voxel::{SparseVoxelGrid, VoxelIndex};

/// Predictions are clamped to `[CLAMP, 1 - CLAMP]` before taking logs.
pub const CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeatmapParams<T> {
    /// Centroid spread, in coarse voxels.
    pub sigma_c: T,
    /// Boundary spread, in coarse voxels.
    pub sigma_b: T,
    pub alpha: T,
    pub gamma: T,
    pub beta: T,
    pub epsilon: T,
    pub kappa: T,
}

impl<T: Real> Default for HeatmapParams<T> {
    fn default() -> Self {
        Self {
            sigma_c: T::lit(6.0),
            sigma_b: T::lit(4.0),
            alpha: T::lit(4.0),
            gamma: T::lit(2.0),
            beta: T::lit(10.0),
            epsilon: T::lit(0.3),
            kappa: T::lit(0.5),
        }
    }
}

impl<T: Real> HeatmapParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_c > T::zero() && self.sigma_b > T::zero()) {
            return Err(Error::InvalidInput("heatmap spreads must be positive".into()));
        }
        if !(self.kappa > T::zero() && self.kappa < T::one()) {
            return Err(Error::InvalidInput("kappa must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Distance-weighted RoI target for each coarse voxel.
///
/// Distances are measured in units of the coarse resolution.
pub fn roi_target<T: Real>(grid: &SparseVoxelGrid<T>, gt: &SceneGroundTruth<T>, params: &HeatmapParams<T>) -> Vec<T> {
    if gt.is_empty() {
        return vec![T::zero(); grid.len()];
    }
    let (boundary, _) = gt.labeled_points();
    let tree = KdTree::new(&boundary);
    let centroids = gt.centroids();
    let inv_res2 = T::one() / (grid.resolution() * grid.resolution());
    let (sc2, sb2) = (params.sigma_c * params.sigma_c, params.sigma_b * params.sigma_b);
    grid.indices()
        .par_iter()
        .map(|&v| {
            let p = grid.center(v);
            let dc = centroids.iter().map(|c| (p - *c).norm_squared()).fold(T::infinity(), T::min) * inv_res2;
            let db = tree.nearest(p).map(|(_, d2)| d2).unwrap_or(T::infinity()) * inv_res2;
            roi_value(dc, db, sc2, sb2)
        })
        .collect()
}

/// Target value from squared distances (already in voxel units).
#[inline]
pub fn roi_value<T: Real>(dc2: T, db2: T, sigma_c2: T, sigma_b2: T) -> T {
    T::lit(0.5) * ((-dc2 / sigma_c2).exp() + (-db2 / sigma_b2).exp())
}

#[inline]
fn clamp_prob<T: Real>(p: T) -> (T, bool) {
    let lo = T::lit(CLAMP);
    let hi = T::one() - lo;
    if p < lo {
        (lo, false)
    } else if p > hi {
        (hi, false)
    } else {
        (p, true)
    }
}

/// Gaussian focal loss, mean over voxels.
pub fn gaussian_focal_loss<T: Real>(pred: &[T], target: &[T], alpha: T, gamma: T) -> Result<(T, Vec<T>)> {
    check_len(pred.len(), target.len())?;
    if pred.is_empty() {
        return Ok((T::zero(), Vec::new()));
    }
    let n = T::from_usize(pred.len()).unwrap();
    let (terms, grad): (Vec<T>, Vec<T>) = pred
        .par_iter()
        .zip(target.par_iter())
        .map(|(&p, &h)| {
            let (p, inside) = clamp_prob(p);
            let q = T::one() - p;
            let neg_w = (T::one() - h).powf(alpha);
            let l = -h * q.powf(gamma) * p.ln() - neg_w * p.powf(gamma) * q.ln();
            let dpos = -h * (-gamma * q.powf(gamma - T::one()) * p.ln() + q.powf(gamma) / p);
            let dneg = -neg_w * (gamma * p.powf(gamma - T::one()) * q.ln() - p.powf(gamma) / q);
            let g = if inside { (dpos + dneg) / n } else { T::zero() };
            (l, g)
        })
        .unzip();
    Ok((pairwise_sum(&terms) / n, grad))
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Suppression<T> {
    pub attention: Vec<T>,
    /// Rows with attention above κ, ascending.
    pub kept: Vec<usize>,
}

pub fn soft_suppress<T: Real>(pred: &[T], beta: T, epsilon: T, kappa: T) -> Suppression<T> {
    let attention: Vec<T> = pred.iter().map(|&h| sigmoid(beta * (h - epsilon))).collect();
    let kept = attention.iter().enumerate().filter(|(_, &a)| a > kappa).map(|(i, _)| i).collect();
    Suppression { attention, kept }
}

/// Object owning each voxel: the object contributing most model points to it
/// (lowest object index on ties), `None` for background.
pub fn voxel_owners<T: Real>(grid: &SparseVoxelGrid<T>, gt: &SceneGroundTruth<T>) -> Vec<Option<usize>> {
    let mut counts: HashMap<VoxelIndex, Vec<(usize, usize)>> = HashMap::new();
    for (i, o) in gt.objects.iter().enumerate() {
        for &p in &o.cloud {
            let e = counts.entry(p.cell_index(grid.origin(), grid.resolution())).or_default();
            match e.iter_mut().find(|(obj, _)| *obj == i) {
                Some(c) => c.1 += 1,
                None => e.push((i, 1)),
            }
        }
    }
    grid.indices()
        .iter()
        .map(|v| {
            counts.get(v).map(|c| {
                c.iter().copied().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).unwrap().0
            })
        })
        .collect()
}

pub fn objectness_target<T: Real>(grid: &SparseVoxelGrid<T>, gt: &SceneGroundTruth<T>) -> Vec<T> {
    voxel_owners(grid, gt).into_iter().map(|o| if o.is_some() { T::one() } else { T::zero() }).collect()
}

/// Binary focal loss summed over voxels and divided by `max(1, #positives)`.
pub fn focal_loss<T: Real>(pred: &[T], target: &[T], alpha: T, gamma: T) -> Result<(T, Vec<T>)> {
    check_len(pred.len(), target.len())?;
    let positives = target.iter().filter(|&&y| y > T::lit(0.5)).count();
    let norm = T::from_usize(positives.max(1)).unwrap();
    let (terms, grad): (Vec<T>, Vec<T>) = pred
        .par_iter()
        .zip(target.par_iter())
        .map(|(&p, &y)| {
            let (p, inside) = clamp_prob(p);
            let q = T::one() - p;
            let (l, d) = if y > T::lit(0.5) {
                let l = -alpha * q.powf(gamma) * p.ln();
                let d = -alpha * (-gamma * q.powf(gamma - T::one()) * p.ln() + q.powf(gamma) / p);
                (l, d)
            } else {
                let a = T::one() - alpha;
                let l = -a * p.powf(gamma) * q.ln();
                let d = -a * (gamma * p.powf(gamma - T::one()) * q.ln() - p.powf(gamma) / q);
                (l, d)
            };
            (l, if inside { d / norm } else { T::zero() })
        })
        .unzip();
    Ok((pairwise_sum(&terms) / norm, grad))
}

/// Number of voxels kept by [`adaptive_topk`].
pub fn topk_count(n: usize, ratio: f64, k_min: usize, k_max: usize) -> usize {
    let want = ((ratio * n as f64).ceil() as usize).max(k_min);
    want.min(k_max.min(n))
}

/// Highest-scoring rows, ties broken by the smaller voxel index; returned ascending.
pub fn adaptive_topk<T: Real>(scores: &[T], indices: &[VoxelIndex], ratio: f64, k_min: usize, k_max: usize) -> Result<Vec<usize>> {
    check_len(scores.len(), indices.len())?;
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidInput(format!("topK ratio must lie in (0, 1], got {ratio}")));
    }
    let k = topk_count(scores.len(), ratio, k_min, k_max);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(indices[a].cmp(&indices[b])));
    let mut kept = order[..k].to_vec();
    kept.sort_by(|&a, &b| indices[a].cmp(&indices[b]));
    Ok(kept)
}

/// Inverse-frequency class weights `N / (K_present · n_c)`; zero for absent classes.
/// The per-sample weights then average to one.
pub fn class_weights<T: Real>(labels: &[usize], num_classes: usize) -> Vec<T> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        if l < num_classes {
            counts[l] += 1;
        }
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    let n = T::from_usize(labels.len()).unwrap();
    counts
        .iter()
        .map(|&c| if c == 0 { T::zero() } else { n / T::from_usize(present * c).unwrap() })
        .collect()
}

/// Weighted cross-entropy over row-major logits `n × k`, mean over rows.
pub fn weighted_cross_entropy<T: Real>(logits: &[T], k: usize, labels: &[usize], weights: &[T]) -> Result<(T, Vec<T>)> {
    if k == 0 || logits.len() != labels.len() * k || weights.len() != k {
        return Err(Error::DimensionMismatch(format!("{} logits, {} labels, {} classes, {} weights", logits.len(), labels.len(), k, weights.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidInput(format!("label {bad} out of range for {k} classes")));
    }
    if labels.is_empty() {
        return Ok((T::zero(), Vec::new()));
    }
    let n = T::from_usize(labels.len()).unwrap();
    let mut grad = vec![T::zero(); logits.len()];
    let mut terms = Vec::with_capacity(labels.len());
    for (i, (row, g)) in logits.chunks(k).zip(grad.chunks_mut(k)).enumerate() {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&x| (x - m).exp()).collect();
        let z: T = exps.iter().copied().sum();
        let y = labels[i];
        let w = weights[y];
        terms.push(w * (z.ln() + m - row[y]));
        for j in 0..k {
            let softmax = exps[j] / z;
            let ind = if j == y { T::one() } else { T::zero() };
            g[j] = w * (softmax - ind) / n;
        }
    }
    Ok((pairwise_sum(&terms) / n, grad))
}

/// Row-major `features (n × c) · projection (c × ch)`.
pub fn conditioning_bias<T: Real>(features: &[T], c: usize, projection: &[T], ch: usize) -> Result<Vec<T>> {
    if c == 0 || !features.len().is_multiple_of(c) || projection.len() != c * ch {
        return Err(Error::DimensionMismatch(format!("features {} (c = {c}) vs projection {} ({c}×{ch})", features.len(), projection.len())));
    }
    let mut out = vec![T::zero(); features.len() / c * ch];
    for (row, o) in features.chunks(c).zip(out.chunks_mut(ch.max(1))) {
        for (a, &x) in row.iter().enumerate() {
            for (b, y) in o.iter_mut().enumerate() {
                *y = *y + x * projection[a * ch + b];
            }
        }
    }
    Ok(out)
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!("{a} predictions for {b} targets")));
    }
    Ok(())
}
