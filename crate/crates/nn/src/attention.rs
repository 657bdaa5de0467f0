//! Windowed multi-head self-attention and the dual-branch fusion block.
//!
//! Windows are jagged: each is a list of row indices into the voxel feature
//! matrix and attention never crosses a window boundary. Windows are processed
//! in parallel and scattered back into disjoint rows, so results do not depend
//! on scheduling.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sparsepose::voxel::{partition_windows, VoxelIndex};

use crate::autodiff::{softmax_in_place, Graph, Tensor, Var};
use crate::error::{NnError, Result};
use crate::layers::{LayerNorm, Linear};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub channels: usize,
    pub heads: usize,
    pub window_small: usize,
    pub window_medium: usize,
    /// Divide logits by `√D`; `false` keeps the raw dot product.
    pub scaled: bool,
}

impl AttentionConfig {
    pub fn new(channels: usize, heads: usize, window_small: usize, window_medium: usize) -> Result<Self> {
        let cfg = Self { channels, heads, window_small, window_medium, scaled: true };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(NnError::Shape(format!("{} channels cannot be split into {} heads", self.channels, self.heads)));
        }
        if !(self.window_small >= 1 && self.window_small < self.window_medium) {
            return Err(NnError::Shape(format!("window sizes {} / {} must satisfy 1 ≤ small < medium", self.window_small, self.window_medium)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Row lists of the windows, shared between the forward and backward passes.
pub type Windows = Arc<Vec<Vec<usize>>>;

pub fn windows_for(indices: &[VoxelIndex], size: usize) -> Result<Windows> {
    Ok(Arc::new(partition_windows(indices, size)?.into_iter().map(|w| w.rows).collect()))
}

fn validate_windows(windows: &[Vec<usize>], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for w in windows {
        if w.is_empty() {
            return Err(NnError::Shape("empty attention window".into()));
        }
        for &r in w {
            if r >= n || std::mem::replace(&mut seen[r], true) {
                return Err(NnError::Shape(format!("window row {r} is out of range or repeated")));
            }
        }
    }
    Ok(())
}

struct WindowOut {
    z: Vec<f64>,
    /// `heads × k × k` softmax weights.
    probs: Vec<f64>,
}

fn head_slice(x: &[f64], rows: &[usize], c: usize, h: usize, d: usize) -> Vec<f64> {
    rows.iter().flat_map(|&r| x[r * c + h * d..r * c + (h + 1) * d].iter().copied()).collect()
}

fn window_forward(q: &[f64], k: &[f64], v: &[f64], c: usize, heads: usize, scale: f64, rows: &[usize]) -> WindowOut {
    let kw = rows.len();
    let d = c / heads;
    let mut z = vec![0.0; kw * c];
    let mut probs = vec![0.0; heads * kw * kw];
    for h in 0..heads {
        let (qh, kh, vh) = (head_slice(q, rows, c, h, d), head_slice(k, rows, c, h, d), head_slice(v, rows, c, h, d));
        let a = &mut probs[h * kw * kw..(h + 1) * kw * kw];
        for i in 0..kw {
            let row = &mut a[i * kw..(i + 1) * kw];
            for j in 0..kw {
                row[j] = scale * (0..d).map(|t| qh[i * d + t] * kh[j * d + t]).sum::<f64>();
            }
            softmax_in_place(row);
            for t in 0..d {
                z[i * c + h * d + t] = (0..kw).map(|j| row[j] * vh[j * d + t]).sum();
            }
        }
    }
    WindowOut { z, probs }
}

/// Per-window attention on precomputed `q`, `k`, `v` (all `n × C`); returns the
/// concatenated head outputs `z` (`n × C`). Rows outside every window are zero.
pub fn window_attention(g: &mut Graph, q: Var, k: Var, v: Var, windows: Windows, heads: usize, scaled: bool) -> Result<Var> {
    let (n, c) = (g.value(q).rows(), g.value(q).cols());
    if g.value(k).shape() != g.value(q).shape() || g.value(v).shape() != g.value(q).shape() || g.value(q).shape().len() != 2 {
        return Err(NnError::Shape("q, k and v must be equal n × C matrices".into()));
    }
    if heads == 0 || c % heads != 0 {
        return Err(NnError::Shape(format!("{c} channels cannot be split into {heads} heads")));
    }
    validate_windows(&windows, n)?;
    let d = c / heads;
    let scale = if scaled { 1.0 / (d as f64).sqrt() } else { 1.0 };
    let outs: Vec<WindowOut> = {
        let (qv, kv, vv) = (g.value(q).data(), g.value(k).data(), g.value(v).data());
        windows.par_iter().map(|rows| window_forward(qv, kv, vv, c, heads, scale, rows)).collect()
    };
    let mut z = vec![0.0; n * c];
    for (rows, o) in windows.iter().zip(&outs) {
        for (i, &r) in rows.iter().enumerate() {
            z[r * c..(r + 1) * c].copy_from_slice(&o.z[i * c..(i + 1) * c]);
        }
    }
    let probs: Vec<Vec<f64>> = outs.into_iter().map(|o| o.probs).collect();
    let value = Tensor::matrix(n, c, z)?;
    Ok(g.custom(&[q, k, v], value, move |g, dz| {
        let (qv, kv, vv) = (g.value(q).data(), g.value(k).data(), g.value(v).data());
        let parts: Vec<[Vec<f64>; 3]> = windows
            .par_iter()
            .zip(probs.par_iter())
            .map(|(rows, a)| window_backward(qv, kv, vv, dz, c, heads, scale, rows, a))
            .collect();
        let mut dq = vec![0.0; n * c];
        let mut dk = vec![0.0; n * c];
        let mut dv = vec![0.0; n * c];
        for (rows, [pq, pk, pv]) in windows.iter().zip(&parts) {
            for (i, &r) in rows.iter().enumerate() {
                dq[r * c..(r + 1) * c].copy_from_slice(&pq[i * c..(i + 1) * c]);
                dk[r * c..(r + 1) * c].copy_from_slice(&pk[i * c..(i + 1) * c]);
                dv[r * c..(r + 1) * c].copy_from_slice(&pv[i * c..(i + 1) * c]);
            }
        }
        vec![Some(dq), Some(dk), Some(dv)]
    }))
}

#[allow(clippy::too_many_arguments)]
fn window_backward(q: &[f64], k: &[f64], v: &[f64], dz: &[f64], c: usize, heads: usize, scale: f64, rows: &[usize], probs: &[f64]) -> [Vec<f64>; 3] {
    let kw = rows.len();
    let d = c / heads;
    let mut dq = vec![0.0; kw * c];
    let mut dk = vec![0.0; kw * c];
    let mut dv = vec![0.0; kw * c];
    for h in 0..heads {
        let (qh, kh, vh, dzh) = (head_slice(q, rows, c, h, d), head_slice(k, rows, c, h, d), head_slice(v, rows, c, h, d), head_slice(dz, rows, c, h, d));
        let a = &probs[h * kw * kw..(h + 1) * kw * kw];
        for i in 0..kw {
            // dA_ij = dz_i · v_j, then the softmax Jacobian
            let da: Vec<f64> = (0..kw).map(|j| (0..d).map(|t| dzh[i * d + t] * vh[j * d + t]).sum()).collect();
            let dot: f64 = (0..kw).map(|j| da[j] * a[i * kw + j]).sum();
            for j in 0..kw {
                let aij = a[i * kw + j];
                let ds = aij * (da[j] - dot) * scale;
                for t in 0..d {
                    dq[i * c + h * d + t] += ds * kh[j * d + t];
                    dk[j * c + h * d + t] += ds * qh[i * d + t];
                    dv[j * c + h * d + t] += aij * dzh[i * d + t];
                }
            }
        }
    }
    [dq, dk, dv]
}

/// Attention weights of one window (`heads × k × k`), for inspection.
pub fn attention_weights(q: &Tensor, k: &Tensor, rows: &[usize], heads: usize, scaled: bool) -> Vec<f64> {
    let c = q.cols();
    let d = c / heads;
    let scale = if scaled { 1.0 / (d as f64).sqrt() } else { 1.0 };
    window_forward(q.data(), k.data(), k.data(), c, heads, scale, rows).probs
}

/// `ẑ_w = concat_h(softmax(q_h k_hᵀ) v_h) · W` with linear q/k/v projections.
#[derive(Clone, Debug)]
pub struct WindowMhsa {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub scaled: bool,
}

impl WindowMhsa {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), c, c, true)?,
            k: Linear::new(store, rng, &format!("{name}.k"), c, c, true)?,
            v: Linear::new(store, rng, &format!("{name}.v"), c, c, true)?,
            out: Linear::new(store, rng, &format!("{name}.proj"), c, c, false)?,
            heads: cfg.heads,
            scaled: cfg.scaled,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, windows: Windows) -> Result<Var> {
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let z = window_attention(g, q, k, v, windows, self.heads, self.scaled)?;
        self.out.forward(g, p, z)
    }
}

/// Small- and medium-window attention in parallel, fused by a `2C → C`
/// linear layer, residual add and layer norm.
#[derive(Clone, Debug)]
pub struct DualBranchBlock {
    pub small: WindowMhsa,
    pub medium: WindowMhsa,
    pub fuse: Linear,
    pub norm: LayerNorm,
    pub cfg: AttentionConfig,
}

impl DualBranchBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Self {
            small: WindowMhsa::new(store, rng, &format!("{name}.small"), cfg)?,
            medium: WindowMhsa::new(store, rng, &format!("{name}.medium"), cfg)?,
            fuse: Linear::new(store, rng, &format!("{name}.fuse"), 2 * c, c, true)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), c)?,
            cfg: *cfg,
        })
    }

    /// Windows for both branches from the voxel indices of the rows.
    pub fn windows(&self, indices: &[VoxelIndex]) -> Result<(Windows, Windows)> {
        Ok((windows_for(indices, self.cfg.window_small)?, windows_for(indices, self.cfg.window_medium)?))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, windows: &(Windows, Windows)) -> Result<Var> {
        let zs = self.small.forward(g, p, x, windows.0.clone())?;
        let zm = self.medium.forward(g, p, x, windows.1.clone())?;
        let z = g.concat_cols(zs, zm)?;
        let z = self.fuse.forward(g, p, z)?;
        let y = g.add(x, z)?;
        self.norm.forward(g, p, y)
    }
}
