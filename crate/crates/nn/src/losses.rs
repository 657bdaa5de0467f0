//! Graph nodes for the training losses and the weighted multi-task sum.

use std::sync::Arc;

use sparsepose::heatmap::{focal_loss, gaussian_focal_loss, weighted_cross_entropy};
use sparsepose::linalg::Mat3;
use sparsepose::pose::{rot6d_backward, rot6d_to_matrix, smooth_l1, ChamferRotLoss};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{NnError, Result};

/// λ weights of the RoI, objectness, class, offset and rotation terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub roi: f64,
    pub objectness: f64,
    pub class: f64,
    pub translation: f64,
    pub rotation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { roi: 1.0, objectness: 3.0, class: 2.0, translation: 3.0, rotation: 1.0 }
    }
}

impl LossWeights {
    pub fn to_array(self) -> [f64; 5] {
        [self.roi, self.objectness, self.class, self.translation, self.rotation]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self { roi: a[0], objectness: a[1], class: a[2], translation: a[3], rotation: a[4] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(NnError::Shape(format!("loss weights must be finite and non-negative, got {:?}", self.to_array())))
        }
    }
}

/// `Σ λ_i · L_i` over plain values.
pub fn multitask_value(parts: [f64; 5], w: &LossWeights) -> f64 {
    parts.iter().zip(w.to_array()).map(|(p, l)| p * l).sum()
}

/// `Σ λ_i · L_i` over scalar graph nodes.
pub fn multitask_loss(g: &mut Graph, parts: [Var; 5], w: &LossWeights) -> Result<Var> {
    g.weighted_sum(&parts, &w.to_array())
}

fn scalar_node(g: &mut Graph, inputs: Var, value: f64, grad: Vec<f64>) -> Var {
    g.custom(&[inputs], Tensor::scalar(value), move |_, dy| vec![Some(grad.iter().map(|v| v * dy[0]).collect())])
}

/// Gaussian focal loss of probabilities `pred` against soft targets.
pub fn gaussian_focal(g: &mut Graph, pred: Var, target: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
    let (l, grad) = gaussian_focal_loss(g.value(pred).data(), target, alpha, gamma)?;
    Ok(scalar_node(g, pred, l, grad))
}

/// Binary focal loss of probabilities `pred` against 0/1 targets.
pub fn focal(g: &mut Graph, pred: Var, target: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
    let (l, grad) = focal_loss(g.value(pred).data(), target, alpha, gamma)?;
    Ok(scalar_node(g, pred, l, grad))
}

/// Weighted cross-entropy over `n × K` logits.
pub fn weighted_ce(g: &mut Graph, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
    let k = g.value(logits).cols();
    let (l, grad) = weighted_cross_entropy(g.value(logits).data(), k, labels, weights)?;
    Ok(scalar_node(g, logits, l, grad))
}

/// Huber loss on `n × 3` offsets, averaged over masked-in rows.
pub fn smooth_l1_loss(g: &mut Graph, pred: Var, target: &[f64], mask: &[bool], delta: f64) -> Result<Var> {
    let (l, grad) = smooth_l1(g.value(pred).data(), target, mask, delta)?;
    Ok(scalar_node(g, pred, l, grad))
}

/// Maps `n × 6` rotation parameters to `n × 9` row-major rotation matrices.
pub fn rot6d(g: &mut Graph, x: Var) -> Result<Var> {
    let t = g.value(x);
    if t.cols() != 6 || t.shape().len() != 2 {
        return Err(NnError::Shape(format!("rot6d expects n × 6, got {:?}", t.shape())));
    }
    let n = t.rows();
    let raw: Vec<[f64; 6]> = t.data().chunks(6).map(|c| c.try_into().unwrap()).collect();
    let mut out = Vec::with_capacity(n * 9);
    for r in &raw {
        out.extend(rot6d_to_matrix(r)?.to_row_major());
    }
    Ok(g.custom(&[x], Tensor::matrix(n, 9, out)?, move |_, dy| {
        let mut dx = Vec::with_capacity(n * 6);
        for (r, d) in raw.iter().zip(dy.chunks(9)) {
            // the forward pass already rejected degenerate inputs
            dx.extend(rot6d_backward(r, &Mat3::from_row_major(d)).expect("non-degenerate 6-D input"));
        }
        vec![Some(dx)]
    }))
}

/// Chamfer rotation loss on `n × 9` predicted matrices. Row `i` is scored
/// against `models[model_of[i]]` when `model_of[i]` is set; the value is the mean
/// over scored rows.
pub fn chamfer_rotation(g: &mut Graph, rot: Var, gt: &[Mat3<f64>], model_of: &[Option<usize>], models: &[Arc<ChamferRotLoss<f64>>]) -> Result<Var> {
    let t = g.value(rot);
    let n = t.rows();
    if t.cols() != 9 || gt.len() != n || model_of.len() != n {
        return Err(NnError::Shape(format!("{} rotations, {} targets, {} model ids", n, gt.len(), model_of.len())));
    }
    if model_of.iter().flatten().any(|&m| m >= models.len()) {
        return Err(NnError::Shape("model id out of range".into()));
    }
    let valid = model_of.iter().flatten().count();
    let mut grad = vec![0.0; n * 9];
    let mut total = 0.0;
    if valid > 0 {
        use rayon::prelude::*;
        let parts: Vec<(f64, Mat3<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| match model_of[i] {
                Some(m) => models[m].eval(&Mat3::from_row_major(t.row(i)), &gt[i]),
                None => (0.0, Mat3::zeros()),
            })
            .collect();
        let inv = 1.0 / valid as f64;
        for (i, (v, gm)) in parts.into_iter().enumerate() {
            total += v;
            grad[i * 9..(i + 1) * 9].copy_from_slice(&gm.scale(inv).to_row_major());
        }
        total *= inv;
    }
    Ok(scalar_node(g, rot, total, grad))
}
