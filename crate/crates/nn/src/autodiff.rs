//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] records every operation in creation order; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into each node.

use rayon::prelude::*;

use crate::error::{NnError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a matrix (1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Column count of a matrix (length for vectors).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient contributions for each parent, in parent order (`None` = no contribution).
pub type Grads = Vec<Option<Vec<f64>>>;
type BackwardFn = Box<dyn Fn(&Graph, &[f64]) -> Grads + Send + Sync>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node (input or parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Records a custom operation. `backward` receives the graph and the
    /// upstream gradient and returns one contribution per parent.
    pub fn custom<F>(&mut self, parents: &[Var], value: Tensor, backward: F) -> Var
    where
        F: Fn(&Graph, &[f64]) -> Grads + Send + Sync + 'static,
    {
        self.nodes.push(Node { value, parents: parents.to_vec(), backward: Some(Box::new(backward)), grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Back-propagates from a scalar node; gradients of earlier calls are cleared.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(NnError::Shape("backward needs a scalar root".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(bw) = &node.backward {
                let contrib = bw(self, &g);
                debug_assert_eq!(contrib.len(), node.parents.len());
                for (p, c) in node.parents.iter().zip(contrib) {
                    let Some(c) = c else { continue };
                    match &mut grads[p.0] {
                        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(c),
                    }
                }
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads.into_iter().chain(std::iter::repeat(None))) {
            node.grad = g;
        }
        Ok(())
    }

    fn check(&self, cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
        if cond {
            Ok(())
        } else {
            Err(NnError::Shape(msg()))
        }
    }

    fn matrix_dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// `a (n×k) · b (k×m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims(a);
        let (k2, m) = self.matrix_dims(b);
        self.check(k == k2 && self.value(b).shape().len() == 2, || format!("matmul {n}×{k} by {k2}×{m}"))?;
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        Ok(self.custom(&[a, b], Tensor { shape: vec![n, m], data: out }, move |g, dy| {
            let (av, bv) = (g.value(a).data(), g.value(b).data());
            let da = matmul_raw_bt(dy, bv, n, m, k);
            let db = matmul_raw_at(av, dy, n, k, m);
            vec![Some(da), Some(db)]
        }))
    }

    /// Elementwise `a + b` (same shape).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(self.value(a).shape() == self.value(b).shape(), || "add of different shapes".into())?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.custom(&[a, b], Tensor { shape, data }, |_, dy| vec![Some(dy.to_vec()), Some(dy.to_vec())]))
    }

    /// Elementwise product (same shape).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(self.value(a).shape() == self.value(b).shape(), || "mul of different shapes".into())?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.custom(&[a, b], Tensor { shape, data }, move |g, dy| {
            let (av, bv) = (g.value(a).data(), g.value(b).data());
            vec![
                Some(dy.iter().zip(bv).map(|(d, y)| d * y).collect()),
                Some(dy.iter().zip(av).map(|(d, x)| d * x).collect()),
            ]
        }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let value = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|x| x * s).collect() };
        self.custom(&[a], value, move |_, dy| vec![Some(dy.iter().map(|d| d * s).collect())])
    }

    /// Adds a length-m bias to every row of an n×m matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims(x);
        self.check(self.value(b).len() == m, || format!("bias of {} for {m} columns", self.value(b).len()))?;
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        data.chunks_mut(m.max(1)).for_each(|r| r.iter_mut().zip(&bv).for_each(|(a, b)| *a += b));
        let shape = self.value(x).shape().to_vec();
        Ok(self.custom(&[x, b], Tensor { shape, data }, move |_, dy| {
            let mut db = vec![0.0; m];
            for r in 0..n {
                for c in 0..m {
                    db[c] += dy[r * m + c];
                }
            }
            vec![Some(dy.to_vec()), Some(db)]
        }))
    }

    /// Scales row i of an n×m matrix by `w[i]` (w has n entries).
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims(x);
        self.check(self.value(w).len() == n, || format!("{} row weights for {n} rows", self.value(w).len()))?;
        let wv = self.value(w).data().to_vec();
        let data = self.value(x).data().chunks(m.max(1)).zip(&wv).flat_map(|(r, s)| r.iter().map(move |v| v * s)).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.custom(&[x, w], Tensor { shape, data }, move |g, dy| {
            let (xv, wv) = (g.value(x).data(), g.value(w).data());
            let mut dx = vec![0.0; n * m];
            let mut dw = vec![0.0; n];
            for r in 0..n {
                for c in 0..m {
                    dx[r * m + c] = dy[r * m + c] * wv[r];
                    dw[r] += dy[r * m + c] * xv[r * m + c];
                }
            }
            vec![Some(dx), Some(dw)]
        }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&v| v.max(0.0)).collect() };
        self.custom(&[x], value, move |g, dy| {
            let xv = g.value(x).data();
            vec![Some(dy.iter().zip(xv).map(|(d, &v)| if v > 0.0 { *d } else { 0.0 }).collect())]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y: Vec<f64> = t.data.iter().map(|&v| sparsepose::heatmap::sigmoid(v)).collect();
        let value = Tensor { shape: t.shape.clone(), data: y.clone() };
        self.custom(&[x], value, move |_, dy| vec![Some(dy.iter().zip(&y).map(|(d, s)| d * s * (1.0 - s)).collect())])
    }

    /// Row-wise layer normalization with learned scale and shift (length m each).
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (n, m) = self.matrix_dims(x);
        self.check(self.value(gamma).len() == m && self.value(beta).len() == m, || "layernorm parameter size".into())?;
        let (gv, bv) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for (r, row) in self.value(x).data().chunks(m).enumerate() {
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for c in 0..m {
                let h = (row[c] - mean) * is;
                xhat[r * m + c] = h;
                out[r * m + c] = h * gv[c] + bv[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.custom(&[x, gamma, beta], Tensor { shape, data: out }, move |g, dy| {
            let gv = g.value(gamma).data();
            let mut dx = vec![0.0; n * m];
            let mut dg = vec![0.0; m];
            let mut db = vec![0.0; m];
            for r in 0..n {
                let (dyr, xh) = (&dy[r * m..(r + 1) * m], &xhat[r * m..(r + 1) * m]);
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for c in 0..m {
                    let dh = dyr[c] * gv[c];
                    s1 += dh;
                    s2 += dh * xh[c];
                    dg[c] += dyr[c] * xh[c];
                    db[c] += dyr[c];
                }
                for c in 0..m {
                    let dh = dyr[c] * gv[c];
                    dx[r * m + c] = inv_std[r] * (dh - s1 / m as f64 - xh[c] * s2 / m as f64);
                }
            }
            vec![Some(dx), Some(dg), Some(db)]
        }))
    }

    /// Row-wise softmax of an n×m matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (n, m) = self.matrix_dims(x);
        let mut y = self.value(x).data().to_vec();
        y.chunks_mut(m.max(1)).for_each(softmax_in_place);
        let value = Tensor { shape: self.value(x).shape().to_vec(), data: y.clone() };
        self.custom(&[x], value, move |_, dy| {
            let mut dx = vec![0.0; n * m];
            for r in 0..n {
                let (yr, dr) = (&y[r * m..(r + 1) * m], &dy[r * m..(r + 1) * m]);
                let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                for c in 0..m {
                    dx[r * m + c] = yr[c] * (dr[c] - dot);
                }
            }
            vec![Some(dx)]
        })
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca) = self.matrix_dims(a);
        let (n2, cb) = self.matrix_dims(b);
        self.check(n == n2, || format!("concat of {n} and {n2} rows"))?;
        let mut data = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            data.extend_from_slice(self.value(a).row(r));
            data.extend_from_slice(self.value(b).row(r));
        }
        Ok(self.custom(&[a, b], Tensor { shape: vec![n, ca + cb], data }, move |_, dy| {
            let mut da = Vec::with_capacity(n * ca);
            let mut db = Vec::with_capacity(n * cb);
            for r in dy.chunks(ca + cb) {
                da.extend_from_slice(&r[..ca]);
                db.extend_from_slice(&r[ca..]);
            }
            vec![Some(da), Some(db)]
        }))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.matrix_dims(x);
        self.check(start <= end && end <= m, || format!("column slice {start}..{end} of {m}"))?;
        let w = end - start;
        let data = self.value(x).data().chunks(m).flat_map(|r| r[start..end].iter().copied()).collect();
        Ok(self.custom(&[x], Tensor { shape: vec![n, w], data }, move |_, dy| {
            let mut dx = vec![0.0; n * m];
            for r in 0..n {
                dx[r * m + start..r * m + end].copy_from_slice(&dy[r * w..(r + 1) * w]);
            }
            vec![Some(dx)]
        }))
    }

    /// Rows `idx` of a matrix (repeats allowed); backward scatters and adds.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = self.matrix_dims(x);
        self.check(idx.iter().all(|&i| i < n), || format!("row index out of range for {n} rows"))?;
        let idx = idx.to_vec();
        let data = idx.iter().flat_map(|&i| self.value(x).row(i).to_vec()).collect();
        Ok(self.custom(&[x], Tensor { shape: vec![idx.len(), m], data }, move |_, dy| {
            let mut dx = vec![0.0; n * m];
            for (k, &i) in idx.iter().enumerate() {
                for c in 0..m {
                    dx[i * m + c] += dy[k * m + c];
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Mean of the rows in each segment: `out[s] = mean{x[i] : seg[i] = s}`.
    pub fn segment_mean(&mut self, x: Var, seg: &[usize], segments: usize) -> Result<Var> {
        let (n, m) = self.matrix_dims(x);
        self.check(seg.len() == n && seg.iter().all(|&s| s < segments), || "segment ids".into())?;
        let mut count = vec![0usize; segments];
        seg.iter().for_each(|&s| count[s] += 1);
        let mut out = vec![0.0; segments * m];
        for (i, &s) in seg.iter().enumerate() {
            let row = self.value(x).row(i);
            for c in 0..m {
                out[s * m + c] += row[c] / count[s] as f64;
            }
        }
        let seg = seg.to_vec();
        Ok(self.custom(&[x], Tensor { shape: vec![segments, m], data: out }, move |_, dy| {
            let mut dx = vec![0.0; n * m];
            for (i, &s) in seg.iter().enumerate() {
                for c in 0..m {
                    dx[i * m + c] = dy[s * m + c] / count[s] as f64;
                }
            }
            vec![Some(dx)]
        }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = sparsepose::scalar::pairwise_sum(self.value(x).data());
        self.custom(&[x], Tensor::scalar(s), move |_, dy| vec![Some(vec![dy[0]; n])])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `Σ w_i · parts_i` over scalar nodes.
    pub fn weighted_sum(&mut self, parts: &[Var], weights: &[f64]) -> Result<Var> {
        self.check(parts.len() == weights.len(), || "one weight per part".into())?;
        self.check(parts.iter().all(|&p| self.value(p).len() == 1), || "weighted_sum takes scalars".into())?;
        let v: Vec<f64> = parts.iter().zip(weights).map(|(&p, w)| w * self.value(p).item()).collect();
        let total = v.iter().sum();
        let weights = weights.to_vec();
        Ok(self.custom(parts, Tensor::scalar(total), move |_, dy| weights.iter().map(|w| Some(vec![w * dy[0]])).collect()))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Row-major `a (n×k) · b (k×m)`.
pub fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    if m == 0 {
        return out;
    }
    out.par_chunks_mut(m).enumerate().for_each(|(r, o)| {
        for (t, &x) in a[r * k..(r + 1) * k].iter().enumerate() {
            if x != 0.0 {
                for (y, &w) in o.iter_mut().zip(&b[t * m..(t + 1) * m]) {
                    *y += x * w;
                }
            }
        }
    });
    out
}

/// `a (n×m) · bᵀ` where `b` is k×m; result n×k.
pub fn matmul_raw_bt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    if k == 0 {
        return out;
    }
    out.par_chunks_mut(k).enumerate().for_each(|(r, o)| {
        let ar = &a[r * m..(r + 1) * m];
        for (t, y) in o.iter_mut().enumerate() {
            *y = ar.iter().zip(&b[t * m..(t + 1) * m]).map(|(x, w)| x * w).sum();
        }
    });
    out
}

/// `aᵀ · b` where `a` is n×k and `b` is n×m; result k×m.
pub fn matmul_raw_at(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    if m == 0 {
        return out;
    }
    out.par_chunks_mut(m).enumerate().for_each(|(t, o)| {
        for r in 0..n {
            let x = a[r * k + t];
            if x != 0.0 {
                for (y, &w) in o.iter_mut().zip(&b[r * m..(r + 1) * m]) {
                    *y += x * w;
                }
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_identity_and_naive_oracle() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let mut eye = vec![0.0; 9];
        (0..3).for_each(|i| eye[i * 4] = 1.0);
        let w = g.leaf(Tensor::matrix(3, 3, eye).unwrap());
        let b = g.leaf(Tensor::zeros(&[3]));
        let y = g.matmul(x, w).unwrap();
        let y = g.add_bias(y, b).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_tensor(&mut rng, &[5, 4]);
        let bm = random_tensor(&mut rng, &[4, 3]);
        let got = matmul_raw(a.data(), bm.data(), 5, 4, 3);
        for r in 0..5 {
            for c in 0..3 {
                let want: f64 = (0..4).map(|k| a.data()[r * 4 + k] * bm.data()[k * 3 + c]).sum();
                assert!((got[r * 3 + c] - want).abs() < 1e-14);
            }
        }
        assert!(g.matmul(w, b).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let x = g.leaf(random_tensor(&mut rng, &[4, 7]));
        let y = g.softmax_rows(x);
        for r in 0..4 {
            assert!((g.value(y).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn elementary_ops_pass_gradient_checks() {
        let shapes = [(1usize, 1usize), (3, 4), (6, 2)];
        for (seed, &(n, m)) in shapes.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
            let inputs = vec![
                random_tensor(&mut rng, &[n, m]),
                random_tensor(&mut rng, &[m, 3]),
                random_tensor(&mut rng, &[3]),
                random_tensor(&mut rng, &[3]),
                random_tensor(&mut rng, &[3]),
                random_tensor(&mut rng, &[n, m]),
                random_tensor(&mut rng, &[n]),
            ];
            check_gradients(&inputs, 1e-4, |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.add_bias(h, v[2])?;
                let h = g.layernorm(h, v[3], v[4])?;
                let s = g.sigmoid(h);
                let r = g.relu(v[5]);
                let p = g.mul(r, v[0])?;
                let p = g.mul_rows(p, v[6])?;
                let c = g.concat_cols(s, p)?;
                let c = g.softmax_rows(c);
                let c = g.slice_cols(c, 1, 3)?;
                let rows: Vec<usize> = (0..n).rev().chain([0]).collect();
                let c = g.gather_rows(c, &rows)?;
                let seg: Vec<usize> = (0..n + 1).map(|i| i % 2).collect();
                let c = g.segment_mean(c, &seg, 2)?;
                let c = g.scale(c, 3.0);
                let a = g.mean(c);
                let b = g.sum(s);
                g.weighted_sum(&[a, b], &[1.5, 0.25])
            })
            .unwrap();
        }
    }

    #[test]
    fn accumulates_over_shared_parents() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }
}
