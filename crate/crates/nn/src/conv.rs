//! Submanifold sparse 3×3×3 convolution.

use std::collections::HashMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sparsepose::voxel::VoxelIndex;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{NnError, Result};
use crate::params::{Bound, ParamId, ParamStore};

pub const TAPS: usize = 27;
pub const CENTER_TAP: usize = 13;
const NONE: u32 = u32::MAX;

/// Tap `k` covers offset `(k / 9 − 1, k / 3 % 3 − 1, k % 3 − 1)`; tap `26 − k` is its mirror.
pub fn tap_offset(k: usize) -> [i32; 3] {
    [(k / 9) as i32 - 1, (k / 3 % 3) as i32 - 1, (k % 3) as i32 - 1]
}

/// Active neighbor of every row for every tap.
#[derive(Clone, Debug)]
pub struct Rulebook {
    neighbors: Vec<[u32; TAPS]>,
}

impl Rulebook {
    pub fn new(indices: &[VoxelIndex]) -> Self {
        let lookup: HashMap<VoxelIndex, u32> = indices.iter().enumerate().map(|(i, &v)| (v, i as u32)).collect();
        let neighbors = indices
            .par_iter()
            .map(|v| {
                let mut row = [NONE; TAPS];
                for (k, slot) in row.iter_mut().enumerate() {
                    let o = tap_offset(k);
                    if let Some(&j) = lookup.get(&[v[0] + o[0], v[1] + o[1], v[2] + o[2]]) {
                        *slot = j;
                    }
                }
                row
            })
            .collect();
        Self { neighbors }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbor(&self, row: usize, tap: usize) -> Option<usize> {
        let j = self.neighbors[row][tap];
        (j != NONE).then_some(j as usize)
    }
}

/// `out_i = Σ_k x_{nb(i,k)} · W_k` with `W` stored as `(27·C_in) × C_out`.
pub fn subm_conv(g: &mut Graph, x: Var, w: Var, rules: Arc<Rulebook>) -> Result<Var> {
    let (n, cin) = (g.value(x).rows(), g.value(x).cols());
    let wt = g.value(w);
    if rules.len() != n || g.value(x).shape().len() != 2 {
        return Err(NnError::Shape(format!("{n} feature rows for a rulebook of {}", rules.len())));
    }
    if wt.shape().len() != 2 || wt.rows() != TAPS * cin {
        return Err(NnError::Shape(format!("kernel {:?} does not match {cin} input channels", wt.shape())));
    }
    let cout = wt.cols();
    let mut out = vec![0.0; n * cout];
    {
        let (xv, wv) = (g.value(x).data(), wt.data());
        out.par_chunks_mut(cout.max(1)).enumerate().for_each(|(i, o)| {
            for k in 0..TAPS {
                if let Some(j) = rules.neighbor(i, k) {
                    accumulate(o, &xv[j * cin..(j + 1) * cin], &wv[k * cin * cout..(k + 1) * cin * cout], cout);
                }
            }
        });
    }
    Ok(g.custom(&[x, w], Tensor::matrix(n, cout, out)?, move |g, dy| {
        let (xv, wv) = (g.value(x).data(), g.value(w).data());
        // row j receives from row i through tap k exactly when i is j's neighbor through 26 − k
        let mut dx = vec![0.0; n * cin];
        dx.par_chunks_mut(cin.max(1)).enumerate().for_each(|(j, d)| {
            for k in 0..TAPS {
                if let Some(i) = rules.neighbor(j, TAPS - 1 - k) {
                    let wk = &wv[k * cin * cout..(k + 1) * cin * cout];
                    let dyi = &dy[i * cout..(i + 1) * cout];
                    for (a, da) in d.iter_mut().enumerate() {
                        *da += wk[a * cout..(a + 1) * cout].iter().zip(dyi).map(|(p, q)| p * q).sum::<f64>();
                    }
                }
            }
        });
        let mut dw = vec![0.0; TAPS * cin * cout];
        dw.par_chunks_mut((cin * cout).max(1)).enumerate().for_each(|(k, d)| {
            for i in 0..n {
                if let Some(j) = rules.neighbor(i, k) {
                    let xj = &xv[j * cin..(j + 1) * cin];
                    let dyi = &dy[i * cout..(i + 1) * cout];
                    for (a, &xa) in xj.iter().enumerate() {
                        for (p, q) in d[a * cout..(a + 1) * cout].iter_mut().zip(dyi) {
                            *p += xa * q;
                        }
                    }
                }
            }
        });
        vec![Some(dx), Some(dw)]
    }))
}

fn accumulate(out: &mut [f64], x: &[f64], w: &[f64], cout: usize) {
    for (a, &xa) in x.iter().enumerate() {
        if xa != 0.0 {
            for (o, &wv) in out.iter_mut().zip(&w[a * cout..(a + 1) * cout]) {
                *o += xa * wv;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SubmConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl SubmConv {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, output: usize) -> Result<Self> {
        let fan_in = TAPS * input;
        let weight = store.add_uniform(format!("{name}.weight"), &[fan_in, output], fan_in, rng)?;
        let bias = store.add_filled(format!("{name}.bias"), &[output], 0.0)?;
        Ok(Self { weight, bias, input, output })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, rules: Arc<Rulebook>) -> Result<Var> {
        let y = subm_conv(g, x, p.var(self.weight), rules)?;
        g.add_bias(y, p.var(self.bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradient_error, random_tensor};
    use rand::{Rng, SeedableRng};

    fn random_indices(rng: &mut ChaCha8Rng, n: usize, extent: i32) -> Vec<VoxelIndex> {
        let mut set = std::collections::BTreeSet::new();
        while set.len() < n {
            set.insert([rng.random_range(0..extent), rng.random_range(0..extent), rng.random_range(0..extent)]);
        }
        set.into_iter().collect()
    }

    /// Dense zero-padded convolution over the whole box, read back at active voxels.
    fn dense_oracle(indices: &[VoxelIndex], x: &Tensor, w: &Tensor, extent: i32) -> Vec<f64> {
        let (cin, cout) = (x.cols(), w.cols());
        let e = extent as usize;
        let mut grid = vec![0.0; e * e * e * cin];
        let flat = |v: [i32; 3]| (v[0] as usize * e + v[1] as usize) * e + v[2] as usize;
        for (r, &v) in indices.iter().enumerate() {
            grid[flat(v) * cin..(flat(v) + 1) * cin].copy_from_slice(x.row(r));
        }
        let mut out = Vec::new();
        for &v in indices {
            let mut o = vec![0.0; cout];
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let u = [v[0] + dx, v[1] + dy, v[2] + dz];
                        if u.iter().any(|&c| c < 0 || c >= extent) {
                            continue;
                        }
                        let k = ((dx + 1) * 9 + (dy + 1) * 3 + dz + 1) as usize;
                        for a in 0..cin {
                            for b in 0..cout {
                                o[b] += grid[flat(u) * cin + a] * w.data()[(k * cin + a) * cout + b];
                            }
                        }
                    }
                }
            }
            out.extend(o);
        }
        out
    }

    #[test]
    fn matches_masked_dense_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for (n, extent, cin, cout) in [(1, 4, 2, 3), (40, 6, 3, 2), (300, 16, 2, 4)] {
            let idx = random_indices(&mut rng, n, extent);
            let x = random_tensor(&mut rng, &[n, cin]);
            let w = random_tensor(&mut rng, &[TAPS * cin, cout]);
            let want = dense_oracle(&idx, &x, &w, extent);
            let mut g = Graph::new();
            let (xv, wv) = (g.leaf(x), g.leaf(w));
            let y = subm_conv(&mut g, xv, wv, Arc::new(Rulebook::new(&idx))).unwrap();
            assert_eq!(g.value(y).rows(), n);
            for (a, b) in g.value(y).data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_kernel_and_isolated_voxel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = 3;
        let idx = random_indices(&mut rng, 20, 4);
        let x = random_tensor(&mut rng, &[20, c]);
        let mut w = vec![0.0; TAPS * c * c];
        (0..c).for_each(|a| w[(CENTER_TAP * c + a) * c + a] = 1.0);
        let mut g = Graph::new();
        let (xv, wv) = (g.leaf(x.clone()), g.leaf(Tensor::matrix(TAPS * c, c, w).unwrap()));
        let y = subm_conv(&mut g, xv, wv, Arc::new(Rulebook::new(&idx))).unwrap();
        assert_eq!(g.value(y).data(), x.data());

        let iso = vec![[0, 0, 0], [5, 5, 5]];
        let x = random_tensor(&mut rng, &[2, c]);
        let k = random_tensor(&mut rng, &[TAPS * c, 2]);
        let mut g = Graph::new();
        let (xv, kv) = (g.leaf(x.clone()), g.leaf(k.clone()));
        let y = subm_conv(&mut g, xv, kv, Arc::new(Rulebook::new(&iso))).unwrap();
        for r in 0..2 {
            for b in 0..2 {
                let want: f64 = (0..c).map(|a| x.row(r)[a] * k.data()[(CENTER_TAP * c + a) * 2 + b]).sum();
                assert!((g.value(y).row(r)[b] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mirror_taps_pair_up() {
        for k in 0..TAPS {
            let (a, b) = (tap_offset(k), tap_offset(TAPS - 1 - k));
            assert_eq!([a[0] + b[0], a[1] + b[1], a[2] + b[2]], [0, 0, 0]);
        }
        assert_eq!(tap_offset(CENTER_TAP), [0, 0, 0]);
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (n, extent, cin, cout) in [(1, 3, 1, 2), (6, 3, 2, 2), (12, 4, 2, 1)] {
            let idx = random_indices(&mut rng, n, extent);
            let rules = Arc::new(Rulebook::new(&idx));
            let inputs = vec![random_tensor(&mut rng, &[n, cin]), random_tensor(&mut rng, &[TAPS * cin, cout]), random_tensor(&mut rng, &[n, cout])];
            let err = gradient_error(&inputs, |g, v| {
                let y = subm_conv(g, v[0], v[1], rules.clone())?;
                let y = g.mul(y, v[2])?;
                Ok(g.sum(y))
            })
            .unwrap();
            assert!(err < 1e-4, "{err:e}");
        }
    }
}
