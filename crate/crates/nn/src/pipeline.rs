//! Scene preparation, the joint training step and inference from depth views
//! to pose hypotheses.

use std::collections::HashSet;
use std::sync::Arc;

use sparsepose::camera::{Camera, DepthImage, DepthRange};
use sparsepose::fusion::{fuse_views, Aabb};
use sparsepose::ground_truth::SceneGroundTruth;
use sparsepose::heatmap::{adaptive_topk, class_weights, roi_target, soft_suppress, voxel_owners, HeatmapParams};
use sparsepose::linalg::{Mat3, Vec3};
use sparsepose::pose::{oracle_votes, pose_targets, recover_poses, rot6d_to_matrix, ChamferRotLoss, PoseEstimate, ViewSet, VoteSet, VotingParams};
use sparsepose::synth::ObjectModel;
use sparsepose::voxel::{coarsen, lift_and_filter, voxelize, Coarsened, Lifted, SparseVoxelGrid, VoxelIndex};

use crate::attention::AttentionConfig;
use crate::autodiff::{Graph, Tensor, Var};
use crate::conv::Rulebook;
use crate::error::{NnError, Result};
use crate::losses::{chamfer_rotation, focal, gaussian_focal, multitask_value, rot6d, smooth_l1_loss, weighted_ce, LossWeights};
use crate::models::{features_tensor, ModelConfig, Network, UNetLevels};
use crate::params::{ParamStore, Sgd};

/// Channels of the fine grid: point offset (3), log count, height.
pub const FINE_CHANNELS: usize = 5;

/// Everything the learned pipeline needs besides the network weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineParams {
    /// Fine voxel size (m).
    pub theta: f64,
    pub coarse_factor: usize,
    pub depth_range: DepthRange<f64>,
    pub heat: HeatmapParams<f64>,
    /// Multiply the lifted coarse features by the soft attention.
    pub reweight_features: bool,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub topk_ratio: f64,
    pub topk_min: usize,
    pub topk_max: usize,
    pub weights: LossWeights,
    /// Huber knee of the offset loss (m).
    pub smooth_l1_delta: f64,
    pub chamfer_points: usize,
    pub attention: AttentionConfig,
    pub voting: VotingParams<f64>,
    pub lr: f64,
    pub momentum: f64,
    /// Leading fraction of steps that train the RoI head alone.
    pub warmup_fraction: f64,
    /// Clip on the global gradient norm; 0 disables clipping.
    pub clip_norm: f64,
}

impl PipelineParams {
    pub fn for_resolution(theta: f64) -> Self {
        Self {
            theta,
            coarse_factor: 10,
            depth_range: DepthRange::default(),
            heat: HeatmapParams::default(),
            reweight_features: false,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            topk_ratio: 0.5,
            topk_min: 16,
            topk_max: 20_000,
            weights: LossWeights::default(),
            smooth_l1_delta: 0.01,
            chamfer_points: 128,
            attention: AttentionConfig::new(32, 4, 4, 8).expect("valid default attention"),
            voting: VotingParams::for_resolution(theta),
            lr: 0.02,
            momentum: 0.9,
            warmup_fraction: 0.2,
            clip_norm: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::Shape(m));
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return bad(format!("voxel size must be positive, got {}", self.theta));
        }
        if self.coarse_factor < 2 {
            return bad(format!("coarse factor must be at least 2, got {}", self.coarse_factor));
        }
        self.heat.validate()?;
        self.attention.validate()?;
        self.weights.validate()?;
        if !(self.topk_ratio > 0.0 && self.topk_ratio <= 1.0) || self.topk_min > self.topk_max {
            return bad("topK ratio must lie in (0, 1] with k_min ≤ k_max".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warm-up fraction must lie in [0, 1], got {}", self.warmup_fraction));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.clip_norm < 0.0 {
            return bad("learning rate must be positive, momentum in [0, 1), clip norm non-negative".into());
        }
        if !(self.smooth_l1_delta > 0.0) || self.chamfer_points == 0 {
            return bad("Huber knee and chamfer sample count must be positive".into());
        }
        Ok(())
    }

    pub fn model_config(&self, num_classes: usize) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(FINE_CHANNELS, 2 * FINE_CHANNELS, num_classes, 10.0 * self.theta)?;
        cfg.attention = self.attention;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Maps class ids to classifier labels; label 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    ids: Vec<u32>,
}

impl ClassMap {
    pub fn new(library: &[ObjectModel]) -> Self {
        let mut ids: Vec<u32> = library.iter().map(|m| m.class_id).collect();
        ids.sort_unstable();
        ids.dedup();
        Self { ids }
    }

    pub fn num_classes(&self) -> usize {
        self.ids.len()
    }

    pub fn label(&self, class_id: u32) -> Option<usize> {
        self.ids.binary_search(&class_id).ok().map(|i| i + 1)
    }

    pub fn class_id(&self, label: usize) -> Option<u32> {
        label.checked_sub(1).and_then(|i| self.ids.get(i).copied())
    }
}

/// Fused cloud and the voxel grids derived from it.
#[derive(Clone, Debug)]
pub struct SceneInput {
    pub cloud: Vec<Vec3<f64>>,
    pub fine: SparseVoxelGrid<f64>,
    pub coarse: Coarsened<f64>,
    pub levels: UNetLevels,
    pub cameras: Vec<Camera<f64>>,
    pub depths: Vec<DepthImage<f64>>,
}

/// Fuses the views inside `workspace` and builds the fine and coarse grids.
/// The fine grid gains a height channel `(z − z_min) / (10ϑ)`.
pub fn prepare_scene(depths: &[DepthImage<f64>], cameras: &[Camera<f64>], workspace: &Aabb<f64>, params: &PipelineParams) -> Result<SceneInput> {
    let cloud = fuse_views(depths, cameras, workspace, &params.depth_range)?.points;
    let z_min = cloud.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
    let heights: Vec<f64> = cloud.iter().map(|p| (p.z - z_min) / (10.0 * params.theta)).collect();
    let fine = voxelize(&cloud, Some(&heights), params.theta, Vec3::zero())?;
    if fine.is_empty() {
        return Err(NnError::Core(sparsepose::Error::InvalidInput("the views contain no points inside the workspace".into())));
    }
    let coarse = coarsen(&fine, params.coarse_factor)?;
    let levels = UNetLevels::new(coarse.grid.indices());
    Ok(SceneInput { cloud, fine, coarse, levels, cameras: cameras.to_vec(), depths: depths.to_vec() })
}

/// Supervision derived once per scene from its ground truth.
#[derive(Clone, Debug)]
pub struct SceneTargets {
    pub roi: Vec<f64>,
    /// Classifier label of every fine voxel (0 = background).
    pub labels: Vec<usize>,
    pub offsets: Vec<Vec3<f64>>,
    pub rotations: Vec<Mat3<f64>>,
    /// Index into the class map's model list, per fine voxel.
    pub model_of: Vec<Option<usize>>,
}

pub fn scene_targets(input: &SceneInput, gt: &SceneGroundTruth<f64>, classes: &ClassMap, params: &PipelineParams) -> Result<SceneTargets> {
    let roi = roi_target(&input.coarse.grid, gt, &params.heat);
    let owners = voxel_owners(&input.fine, gt);
    let pose = pose_targets(&input.fine, gt);
    let labels = owners
        .iter()
        .map(|o| match o {
            Some(i) => {
                let c = gt.objects[*i].class_id;
                classes.label(c).ok_or_else(|| NnError::Core(sparsepose::Error::InvalidInput(format!("class id {c} missing from the model library"))))
            }
            None => Ok(0),
        })
        .collect::<Result<Vec<_>>>()?;
    let model_of = labels.iter().map(|&l| l.checked_sub(1)).collect();
    Ok(SceneTargets { roi, labels, offsets: pose.offsets, rotations: pose.rotations, model_of })
}

/// Chamfer losses for every class, over clouds scaled to unit diameter.
pub fn chamfer_models(library: &[ObjectModel], classes: &ClassMap, points: usize) -> Result<Vec<Arc<ChamferRotLoss<f64>>>> {
    (1..=classes.num_classes())
        .map(|label| {
            let id = classes.class_id(label).expect("labels enumerate the map");
            let m = library.iter().find(|m| m.class_id == id).expect("class map built from the library");
            let s = 1.0 / m.diameter();
            let cloud: Vec<Vec3<f64>> = m.cloud.iter().map(|p| p.scale(s)).collect();
            Ok(Arc::new(ChamferRotLoss::new(&cloud, points)?))
        })
        .collect()
}

/// Values of the five loss terms and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub roi: f64,
    pub objectness: f64,
    pub class: f64,
    pub translation: f64,
    pub rotation: f64,
    pub total: f64,
}

struct Staged {
    roi: Var,
    lifted: Lifted<f64>,
    attention: Vec<f64>,
}

fn run_roi(net: &Network, g: &mut Graph, p: &crate::params::Bound, input: &SceneInput, params: &PipelineParams) -> Result<Staged> {
    let xc = g.leaf(features_tensor(input.coarse.grid.features(), FINE_CHANNELS)?);
    let roi = net.roi.forward(g, p, xc, &input.levels)?;
    let sup = soft_suppress(g.value(roi).data(), params.heat.beta, params.heat.epsilon, params.heat.kappa);
    let kept: HashSet<VoxelIndex> = sup.kept.iter().map(|&r| input.coarse.grid.indices()[r]).collect();
    let lifted = lift_and_filter(&input.fine, &input.coarse.grid, &kept, params.coarse_factor)?;
    Ok(Staged { roi, lifted, attention: sup.attention })
}

fn lifted_features(staged: &Staged, rows: Option<&[usize]>, reweight: bool) -> Result<Tensor> {
    let c = staged.lifted.grid.channels();
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..staged.lifted.grid.len()).collect();
            &all
        }
    };
    let mut out = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        let f = staged.lifted.grid.feature(r);
        out.extend_from_slice(&f[..FINE_CHANNELS]);
        let a = if reweight { staged.attention[staged.lifted.coarse_rows[r]] } else { 1.0 };
        out.extend(f[FINE_CHANNELS..].iter().map(|v| v * a));
    }
    Tensor::matrix(rows.len(), c, out)
}

/// One scene, its targets and the per-class chamfer losses.
pub struct TrainingScene {
    pub input: SceneInput,
    pub targets: SceneTargets,
    pub models: Vec<Arc<ChamferRotLoss<f64>>>,
}

impl TrainingScene {
    pub fn new(input: SceneInput, gt: &SceneGroundTruth<f64>, library: &[ObjectModel], classes: &ClassMap, params: &PipelineParams) -> Result<Self> {
        let targets = scene_targets(&input, gt, classes, params)?;
        let models = chamfer_models(library, classes, params.chamfer_points)?;
        Ok(Self { input, targets, models })
    }
}

/// Forward pass with all five losses. The pose net runs on the ground-truth
/// foreground rows of the lifted set.
fn losses(net: &Network, g: &mut Graph, p: &crate::params::Bound, scene: &TrainingScene, params: &PipelineParams) -> Result<[Var; 5]> {
    let (input, t) = (&scene.input, &scene.targets);
    let staged = run_roi(net, g, p, input, params)?;
    let l_roi = gaussian_focal(g, staged.roi, &t.roi, params.heat.alpha, params.heat.gamma)?;
    let zero = || Tensor::scalar(0.0);
    let lifted = &staged.lifted;
    if lifted.grid.is_empty() {
        let z: [Var; 4] = std::array::from_fn(|_| g.leaf(zero()));
        return Ok([l_roi, z[0], z[1], z[2], z[3]]);
    }
    let labels: Vec<usize> = lifted.fine_rows.iter().map(|&r| t.labels[r]).collect();
    let y: Vec<f64> = labels.iter().map(|&l| (l > 0) as u8 as f64).collect();
    let x = g.leaf(lifted_features(&staged, None, params.reweight_features)?);
    let out = net.obj.forward(g, p, x, Arc::new(Rulebook::new(lifted.grid.indices())))?;
    let l_obj = focal(g, out.objectness, &y, params.focal_alpha, params.focal_gamma)?;
    let cw = class_weights(&labels, net.config.num_classes + 1);
    let l_cls = weighted_ce(g, out.logits, &labels, &cw)?;

    let fg: Vec<usize> = (0..labels.len()).filter(|&r| labels[r] > 0).collect();
    if fg.is_empty() {
        let z: [Var; 2] = std::array::from_fn(|_| g.leaf(zero()));
        return Ok([l_roi, l_obj, l_cls, z[0], z[1]]);
    }
    let indices: Vec<VoxelIndex> = fg.iter().map(|&r| lifted.grid.indices()[r]).collect();
    let ctx = net.pose.context(&indices)?;
    let xp = g.leaf(lifted_features(&staged, Some(&fg), params.reweight_features)?);
    let pose = net.pose.forward(g, p, xp, &ctx)?;
    let fine_rows: Vec<usize> = fg.iter().map(|&r| lifted.fine_rows[r]).collect();
    let off_t: Vec<f64> = fine_rows.iter().flat_map(|&r| t.offsets[r].to_array()).collect();
    let l_t = smooth_l1_loss(g, pose.offsets, &off_t, &vec![true; fg.len()], params.smooth_l1_delta)?;
    let rot = rot6d(g, pose.rot6d)?;
    let gt_rot: Vec<Mat3<f64>> = fine_rows.iter().map(|&r| t.rotations[r]).collect();
    let model_of: Vec<Option<usize>> = fine_rows.iter().map(|&r| t.model_of[r]).collect();
    let l_rot = chamfer_rotation(g, rot, &gt_rot, &model_of, &scene.models)?;
    Ok([l_roi, l_obj, l_cls, l_t, l_rot])
}

/// Owns the optimiser state of a training run.
pub struct Trainer {
    pub params: PipelineParams,
    sgd: Sgd,
    warmup_steps: usize,
    step: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub warmup: bool,
    pub parts: LossParts,
}

impl Trainer {
    pub fn new(params: PipelineParams, total_steps: usize) -> Result<Self> {
        params.validate()?;
        let warmup_steps = (params.warmup_fraction * total_steps as f64).round() as usize;
        Ok(Self { sgd: Sgd::new(params.lr, params.momentum), params, warmup_steps, step: 0 })
    }

    /// Losses at the current weights without an update.
    pub fn evaluate(&self, net: &Network, store: &ParamStore, scene: &TrainingScene) -> Result<LossParts> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let parts = losses(net, &mut g, &p, scene, &self.params)?;
        Ok(self.collect(&g, parts))
    }

    fn collect(&self, g: &Graph, parts: [Var; 5]) -> LossParts {
        let v = parts.map(|x| g.value(x).item());
        LossParts { roi: v[0], objectness: v[1], class: v[2], translation: v[3], rotation: v[4], total: multitask_value(v, &self.params.weights) }
    }

    /// One SGD step. During warm-up only the weighted RoI term is backpropagated;
    /// the record always carries the losses before the update.
    pub fn step(&mut self, net: &Network, store: &mut ParamStore, scene: &TrainingScene) -> Result<StepRecord> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let parts = losses(net, &mut g, &p, scene, &self.params)?;
        let record = self.collect(&g, parts);
        if !record.total.is_finite() {
            return Err(NnError::NonFinite(format!("loss at step {}", self.step)));
        }
        let warmup = self.step < self.warmup_steps;
        let root = if warmup {
            g.scale(parts[0], self.params.weights.roi)
        } else {
            g.weighted_sum(&parts, &self.params.weights.to_array())?
        };
        g.backward(root)?;
        let mut grads = store.grads(&g, &p);
        self.clip(&mut grads);
        self.sgd.step(store, &grads)?;
        let out = StepRecord { step: self.step, warmup, parts: record };
        self.step += 1;
        Ok(out)
    }

    fn clip(&self, grads: &mut [Vec<f64>]) {
        if self.params.clip_norm <= 0.0 {
            return;
        }
        let norm = grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if norm > self.params.clip_norm {
            let s = self.params.clip_norm / norm;
            grads.iter_mut().flatten().for_each(|v| *v *= s);
        }
    }
}

pub const TRACE_CSV_HEADER: &str = "step,phase,total,roi,objectness,class,translation,rotation";

pub fn trace_csv(records: &[StepRecord]) -> String {
    let mut s = String::from(TRACE_CSV_HEADER);
    s.push('\n');
    for r in records {
        let p = &r.parts;
        s.push_str(&format!(
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.step,
            if r.warmup { "warmup" } else { "joint" },
            p.total,
            p.roi,
            p.objectness,
            p.class,
            p.translation,
            p.rotation
        ));
    }
    s
}

/// Votes of the top-K objectness voxels that the classifier assigns to an object class.
pub fn predict_votes(net: &Network, store: &ParamStore, input: &SceneInput, classes: &ClassMap, params: &PipelineParams) -> Result<VoteSet<f64>> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let staged = run_roi(net, &mut g, &p, input, params)?;
    let lifted = &staged.lifted;
    let mut votes = VoteSet::default();
    if lifted.grid.is_empty() {
        return Ok(votes);
    }
    let x = g.leaf(lifted_features(&staged, None, params.reweight_features)?);
    let out = net.obj.forward(&mut g, &p, x, Arc::new(Rulebook::new(lifted.grid.indices())))?;
    let scores = g.value(out.objectness).data().to_vec();
    let top = adaptive_topk(&scores, lifted.grid.indices(), params.topk_ratio, params.topk_min, params.topk_max)?;
    let logits = g.value(out.logits);
    let rows: Vec<(usize, u32)> = top
        .into_iter()
        .filter_map(|r| {
            let l = logits.row(r);
            let best = (0..l.len()).fold(0, |b, k| if l[k] > l[b] { k } else { b });
            classes.class_id(best).map(|c| (r, c))
        })
        .collect();
    if rows.is_empty() {
        return Ok(votes);
    }
    let sel: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let indices: Vec<VoxelIndex> = sel.iter().map(|&r| lifted.grid.indices()[r]).collect();
    let ctx = net.pose.context(&indices)?;
    let xp = g.leaf(lifted_features(&staged, Some(&sel), params.reweight_features)?);
    let pose = net.pose.forward(&mut g, &p, xp, &ctx)?;
    let (off, r6) = (g.value(pose.offsets), g.value(pose.rot6d));
    for (i, &(r, class_id)) in rows.iter().enumerate() {
        let o = off.row(i);
        let raw: [f64; 6] = r6.row(i).try_into().expect("six rotation parameters");
        let Ok(rot) = rot6d_to_matrix(&raw) else { continue };
        votes.centers.push(lifted.grid.center(indices[i]));
        votes.offsets.push(Vec3::new(o[0], o[1], o[2]));
        votes.rotations.push(rot);
        votes.confidence.push(scores[r]);
        votes.class_ids.push(class_id);
    }
    Ok(votes)
}

fn model_lookup(library: &[ObjectModel]) -> impl Fn(u32) -> Option<Vec<Vec3<f64>>> + Sync + '_ {
    move |c| library.iter().find(|m| m.class_id == c).map(|m| m.cloud.clone())
}

/// Learned inference: votes, clustering, aggregation and visibility-restricted ICP.
pub fn estimate(net: &Network, store: &ParamStore, input: &SceneInput, library: &[ObjectModel], params: &PipelineParams) -> Result<Vec<PoseEstimate<f64>>> {
    let classes = ClassMap::new(library);
    let votes = predict_votes(net, store, input, &classes, params)?;
    recover(&votes, input, library, &params.voting)
}

/// Ground-truth targets standing in for the network predictions.
pub fn estimate_oracle(input: &SceneInput, gt: &SceneGroundTruth<f64>, library: &[ObjectModel], voting: &VotingParams<f64>) -> Result<Vec<PoseEstimate<f64>>> {
    let votes = oracle_votes(&input.fine, gt);
    recover(&votes, input, library, voting)
}

fn recover(votes: &VoteSet<f64>, input: &SceneInput, library: &[ObjectModel], voting: &VotingParams<f64>) -> Result<Vec<PoseEstimate<f64>>> {
    if votes.is_empty() {
        return Ok(Vec::new());
    }
    let views = ViewSet { cameras: &input.cameras, depths: &input.depths };
    Ok(recover_poses(votes, voting, model_lookup(library), &input.cloud, Some(&views))?)
}

/// Builds a network sized for `library` and the given parameters.
pub fn build_network(library: &[ObjectModel], params: &PipelineParams, seed: u64) -> Result<(Network, ParamStore)> {
    Network::new(params.model_config(ClassMap::new(library).num_classes())?, seed)
}
