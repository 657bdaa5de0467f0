//! Toy networks for the three learned stages: a two-level RoI U-Net on the
//! coarse grid, an objectness/classification net and the pose net.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparsepose::voxel::{parent_index, VoxelIndex};

use crate::attention::{AttentionConfig, DualBranchBlock, Windows};
use crate::autodiff::{Graph, Tensor, Var};
use crate::conv::{Rulebook, SubmConv};
use crate::error::{NnError, Result};
use crate::layers::Linear;
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub coarse_channels: usize,
    pub fine_channels: usize,
    /// Object classes, not counting background.
    pub num_classes: usize,
    pub roi_width: usize,
    pub obj_width: usize,
    pub attention: AttentionConfig,
    /// Metres per unit of the offset head output.
    pub offset_scale: f64,
}

impl ModelConfig {
    pub fn new(coarse_channels: usize, fine_channels: usize, num_classes: usize, offset_scale: f64) -> Result<Self> {
        Ok(Self {
            coarse_channels,
            fine_channels,
            num_classes,
            roi_width: 16,
            obj_width: 32,
            attention: AttentionConfig::new(32, 4, 4, 8)?,
            offset_scale,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.coarse_channels == 0 || self.fine_channels == 0 || self.num_classes == 0 || self.roi_width == 0 || self.obj_width == 0 {
            return Err(NnError::Shape("model widths and channel counts must be positive".into()));
        }
        if !(self.offset_scale > 0.0 && self.offset_scale.is_finite()) {
            return Err(NnError::Shape(format!("offset scale must be positive, got {}", self.offset_scale)));
        }
        Ok(())
    }
}

/// Active sets of both U-Net levels; level 1 coarsens level 0 by two.
#[derive(Clone, Debug)]
pub struct UNetLevels {
    pub rules0: Arc<Rulebook>,
    pub down: Vec<usize>,
    pub n1: usize,
    pub rules1: Arc<Rulebook>,
}

impl UNetLevels {
    pub fn new(indices: &[VoxelIndex]) -> Self {
        let parents: BTreeMap<VoxelIndex, usize> = indices.iter().map(|&v| (parent_index(v, 2), 0)).collect();
        let level1: Vec<VoxelIndex> = parents.keys().copied().collect();
        let lookup: BTreeMap<VoxelIndex, usize> = level1.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let down = indices.iter().map(|&v| lookup[&parent_index(v, 2)]).collect();
        Self { rules0: Arc::new(Rulebook::new(indices)), down, n1: level1.len(), rules1: Arc::new(Rulebook::new(&level1)) }
    }
}

#[derive(Clone, Debug)]
pub struct RoiUNet {
    enc: [SubmConv; 2],
    mid: [SubmConv; 2],
    dec: SubmConv,
    head: Linear,
}

impl RoiUNet {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let w = cfg.roi_width;
        Ok(Self {
            enc: [SubmConv::new(store, rng, "roi.enc0", cfg.coarse_channels, w)?, SubmConv::new(store, rng, "roi.enc1", w, w)?],
            mid: [SubmConv::new(store, rng, "roi.mid0", w, w)?, SubmConv::new(store, rng, "roi.mid1", w, w)?],
            dec: SubmConv::new(store, rng, "roi.dec", w, w)?,
            head: Linear::zeros(store, "roi.head", w, 1)?,
        })
    }

    /// Per-voxel RoI probability (`n × 1`).
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, lv: &UNetLevels) -> Result<Var> {
        let mut h = x;
        for c in &self.enc {
            h = c.forward(g, p, h, lv.rules0.clone())?;
            h = g.relu(h);
        }
        let skip = h;
        let mut m = g.segment_mean(h, &lv.down, lv.n1)?;
        for c in &self.mid {
            m = c.forward(g, p, m, lv.rules1.clone())?;
            m = g.relu(m);
        }
        let up = g.gather_rows(m, &lv.down)?;
        let h = g.add(up, skip)?;
        let h = self.dec.forward(g, p, h, lv.rules0.clone())?;
        let h = g.relu(h);
        let logit = self.head.forward(g, p, h)?;
        Ok(g.sigmoid(logit))
    }
}

#[derive(Clone, Debug)]
pub struct ObjNet {
    convs: [SubmConv; 3],
    obj_head: Linear,
    cls_hidden: Linear,
    cls_condition: ParamId,
    cls_out: Linear,
}

pub struct ObjOutput {
    /// Objectness probability, `n × 1`.
    pub objectness: Var,
    /// Class logits, `n × (K + 1)` with background at column 0.
    pub logits: Var,
}

impl ObjNet {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let w = cfg.obj_width;
        Ok(Self {
            convs: [
                SubmConv::new(store, rng, "obj.conv0", cfg.fine_channels, w)?,
                SubmConv::new(store, rng, "obj.conv1", w, w)?,
                SubmConv::new(store, rng, "obj.conv2", w, w)?,
            ],
            obj_head: Linear::zeros(store, "obj.head", w, 1)?,
            cls_hidden: Linear::new(store, rng, "cls.hidden", w, w, true)?,
            cls_condition: store.add_uniform("cls.condition", &[1, w], 1, rng)?,
            cls_out: Linear::zeros(store, "cls.out", w, cfg.num_classes + 1)?,
        })
    }

    /// The objectness score enters the classifier's hidden layer as an
    /// additive bias `score · projection`, without a gradient path back.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, rules: Arc<Rulebook>) -> Result<ObjOutput> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, p, h, rules.clone())?;
            h = g.relu(h);
        }
        let logit = self.obj_head.forward(g, p, h)?;
        let objectness = g.sigmoid(logit);
        let heat = g.leaf(g.value(objectness).clone());
        let bias = g.matmul(heat, p.var(self.cls_condition))?;
        let hidden = self.cls_hidden.forward(g, p, h)?;
        let hidden = g.add(hidden, bias)?;
        let hidden = g.relu(hidden);
        let logits = self.cls_out.forward(g, p, hidden)?;
        Ok(ObjOutput { objectness, logits })
    }
}

#[derive(Clone, Debug)]
pub struct PoseNet {
    convs: [SubmConv; 2],
    blocks: [DualBranchBlock; 2],
    offset: Linear,
    rotation: Linear,
    offset_scale: f64,
}

pub struct PoseOutput {
    /// Offsets to the object centre in metres, `n × 3`.
    pub offsets: Var,
    /// Raw 6-D rotation parameters, `n × 6`.
    pub rot6d: Var,
}

/// Sparse context shared by the pose-net layers for one active set.
#[derive(Clone, Debug)]
pub struct PoseContext {
    pub rules: Arc<Rulebook>,
    pub windows: (Windows, Windows),
}

impl PoseNet {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let w = cfg.attention.channels;
        let offset = Linear::zeros(store, "pose.offset", w, 3)?;
        let rotation = Linear::zeros(store, "pose.rotation", w, 6)?;
        let bias = rotation.bias.expect("zero-initialised heads carry a bias");
        store.get_mut(bias).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        Ok(Self {
            convs: [SubmConv::new(store, rng, "pose.conv0", cfg.fine_channels, w)?, SubmConv::new(store, rng, "pose.conv1", w, w)?],
            blocks: [DualBranchBlock::new(store, rng, "pose.block0", &cfg.attention)?, DualBranchBlock::new(store, rng, "pose.block1", &cfg.attention)?],
            offset,
            rotation,
            offset_scale: cfg.offset_scale,
        })
    }

    pub fn context(&self, indices: &[VoxelIndex]) -> Result<PoseContext> {
        Ok(PoseContext { rules: Arc::new(Rulebook::new(indices)), windows: self.blocks[0].windows(indices)? })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, ctx: &PoseContext) -> Result<PoseOutput> {
        let mut h = x;
        for (c, b) in self.convs.iter().zip(&self.blocks) {
            h = c.forward(g, p, h, ctx.rules.clone())?;
            h = g.relu(h);
            h = b.forward(g, p, h, &ctx.windows)?;
        }
        let raw = self.offset.forward(g, p, h)?;
        let offsets = g.scale(raw, self.offset_scale);
        let rot6d = self.rotation.forward(g, p, h)?;
        Ok(PoseOutput { offsets, rot6d })
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub roi: RoiUNet,
    pub obj: ObjNet,
    pub pose: PoseNet,
}

impl Network {
    /// Builds the network and its freshly initialised parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let roi = RoiUNet::new(&mut store, &mut rng, &config)?;
        let obj = ObjNet::new(&mut store, &mut rng, &config)?;
        let pose = PoseNet::new(&mut store, &mut rng, &config)?;
        Ok((Self { config, roi, obj, pose }, store))
    }
}

/// Constant input tensor for a feature matrix.
pub fn features_tensor(features: &[f64], channels: usize) -> Result<Tensor> {
    Tensor::matrix(features.len() / channels.max(1), channels, features.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use rand::Rng;

    fn cloud_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<VoxelIndex> {
        let mut s = std::collections::BTreeSet::new();
        while s.len() < n {
            s.insert([rng.random_range(0..8), rng.random_range(0..8), rng.random_range(0..3)]);
        }
        s.into_iter().collect()
    }

    #[test]
    fn initial_heads_and_shapes() {
        let cfg = ModelConfig::new(4, 8, 3, 0.04).unwrap();
        let (net, store) = Network::new(cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = cloud_indices(&mut rng, 30);

        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xc = g.leaf(random_tensor(&mut rng, &[30, 4]));
        let h = net.roi.forward(&mut g, &p, xc, &UNetLevels::new(&idx)).unwrap();
        assert_eq!(g.value(h).shape(), &[30, 1]);
        assert!(g.value(h).data().iter().all(|&v| v == 0.5));

        let xf = g.leaf(random_tensor(&mut rng, &[30, 8]));
        let o = net.obj.forward(&mut g, &p, xf, Arc::new(Rulebook::new(&idx))).unwrap();
        assert!(g.value(o.objectness).data().iter().all(|&v| v == 0.5));
        assert_eq!(g.value(o.logits).shape(), &[30, 4]);

        let ctx = net.pose.context(&idx).unwrap();
        let out = net.pose.forward(&mut g, &p, xf, &ctx).unwrap();
        assert_eq!(g.value(out.offsets).shape(), &[30, 3]);
        assert_eq!(g.value(out.rot6d).shape(), &[30, 6]);
        assert!(g.value(out.offsets).data().iter().all(|&v| v == 0.0));
        for r in 0..30 {
            assert_eq!(g.value(out.rot6d).row(r), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let cfg = ModelConfig::new(4, 8, 2, 0.04).unwrap();
            let (net, mut store) = Network::new(cfg, 3).unwrap();
            // perturb the zero heads so outputs depend on every layer
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for id in store.ids() {
                store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
            }
            let idx = cloud_indices(&mut ChaCha8Rng::seed_from_u64(2), 40);
            let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(4), &[40, 8]);
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let xv = g.leaf(x);
            let ctx = net.pose.context(&idx).unwrap();
            let out = net.pose.forward(&mut g, &p, xv, &ctx).unwrap();
            let o = net.obj.forward(&mut g, &p, xv, ctx.rules.clone()).unwrap();
            let mut v = g.value(out.offsets).data().to_vec();
            v.extend_from_slice(g.value(out.rot6d).data());
            v.extend_from_slice(g.value(o.logits).data());
            v.iter().map(|x| x.to_bits()).collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn unet_levels_halve_resolution() {
        let idx = vec![[0, 0, 0], [1, 1, 1], [2, 0, 0], [-1, 0, 0]];
        let lv = UNetLevels::new(&idx);
        assert_eq!(lv.n1, 3);
        assert_eq!(lv.down, vec![1, 1, 2, 0]);
    }
}
