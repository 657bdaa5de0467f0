//! Named parameter storage, seeded initialization, SGD and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{NnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph leaves for every parameter of a store, valid for one graph.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(NnError::Shape(format!("duplicate parameter name '{name}'")));
        }
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    /// Uniform `±1/√fan_in` initialization.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        self.add(name, Tensor::new(shape, vec![value; n])?)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.leaf(t.clone())).collect())
    }

    /// Gradients after `g.backward`; parameters unused by the loss get zeros.
    pub fn grads(&self, g: &Graph, bound: &Bound) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .zip(bound.vars())
            .map(|(t, &v)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    }

    /// Copies values of same-named, same-shaped parameters from `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other.by_name(name).ok_or_else(|| NnError::Checkpoint(format!("missing parameter '{name}'")))?;
            if src.shape() != t.shape() {
                return Err(NnError::Checkpoint(format!("parameter '{name}' has shape {:?}, expected {:?}", src.shape(), t.shape())));
            }
            *t = src.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| NnError::Checkpoint("parameter name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            store.add(name, Tensor::new(&shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(NnError::Checkpoint("trailing bytes".into()));
        }
        Ok(store)
    }

    /// Writes atomically via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

const MAGIC: &[u8; 8] = b"SPNNCKPT";
const VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| NnError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Classical momentum SGD: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: Vec::new() }
    }

    /// Applies one update; nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(NnError::Shape(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for ((name, t), g) in store.names.iter().zip(&store.tensors).zip(grads) {
            if g.len() != t.len() {
                return Err(NnError::Shape(format!("gradient of '{name}' has {} values, expected {}", g.len(), t.len())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFiniteGradient(name.clone()));
            }
        }
        if self.velocity.len() != store.len() {
            self.velocity = store.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        }
        for ((t, g), v) in store.tensors.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((p, &gi), vi) in t.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *p -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.add_uniform("layer.w", &[3, 2], 3, &mut rng).unwrap();
        s.add_filled("layer.b", &[2], 0.5).unwrap();
        s
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut s = store();
        let before = s.clone();
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(&mut s, &[vec![0.0; 6], vec![0.0; 2]]).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn plain_step_subtracts_lr() {
        let mut s = ParamStore::new();
        let id = s.add_filled("p", &[1], 1.0).unwrap();
        Sgd::new(0.1, 0.0).step(&mut s, &[vec![1.0]]).unwrap();
        assert!((s.get(id).item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_matches_unrolled_recurrence() {
        let mut s = ParamStore::new();
        let id = s.add_filled("p", &[1], 2.0).unwrap();
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(&mut s, &[vec![1.0]]).unwrap();
        opt.step(&mut s, &[vec![0.5]]).unwrap();
        // v1 = 1, p1 = 2 − 0.1; v2 = 0.9 + 0.5, p2 = p1 − 0.1·1.4
        let want = 2.0 - 0.1 * 1.0 - 0.1 * (0.9 * 1.0 + 0.5);
        assert!((s.get(id).item() - want).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store();
        let before = s.clone();
        let err = Sgd::new(0.1, 0.0).step(&mut s, &[vec![0.0; 6], vec![f64::NAN, 0.0]]).unwrap_err();
        assert!(matches!(&err, NnError::NonFiniteGradient(n) if n == "layer.b"), "{err}");
        assert_eq!(s, before);
    }

    #[test]
    fn initialization_is_seeded_and_bounded() {
        let (a, b) = (store(), store());
        assert_eq!(a, b);
        let bound = 1.0 / 3f64.sqrt();
        assert!(a.tensors()[0].data().iter().all(|v| v.abs() <= bound));
        let mut c = store();
        assert!(c.add_filled("layer.w", &[1], 0.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        s.save(&path).unwrap();
        let back = ParamStore::load(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), s.to_bytes());

        let bytes = s.to_bytes();
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParamStore::from_bytes(&bad).is_err());
        bad = bytes.clone();
        bad[8] = 9;
        assert!(ParamStore::from_bytes(&bad).is_err());
    }

    #[test]
    fn load_from_checks_shapes() {
        let mut a = store();
        let mut other = ParamStore::new();
        other.add_filled("layer.w", &[3, 2], 7.0).unwrap();
        other.add_filled("layer.b", &[2], 8.0).unwrap();
        a.load_from(&other).unwrap();
        assert_eq!(a.by_name("layer.w").unwrap().data(), &[7.0; 6]);
        let mut wrong = ParamStore::new();
        wrong.add_filled("layer.w", &[6], 0.0).unwrap();
        wrong.add_filled("layer.b", &[2], 0.0).unwrap();
        assert!(a.load_from(&wrong).is_err());
    }
}
