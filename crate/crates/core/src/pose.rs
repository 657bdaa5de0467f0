//! Per-voxel pose voting: targets, losses, clustering, aggregation and ICP.

use std::collections::VecDeque;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{project, Camera, DepthImage};
use crate::error::{Error, Result};
use crate::ground_truth::SceneGroundTruth;
use crate::heatmap::voxel_owners;
use crate::linalg::{fit_rigid, nearest_rotation, Mat3, Rigid, Vec3};
use crate::scalar::{pairwise_sum, Real};
use crate::spatial::KdTree;
use crate::voxel::SparseVoxelGrid;

/// Per-voxel regression targets; background voxels have `object == None`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseTargets<T> {
    pub offsets: Vec<Vec3<T>>,
    pub rotations: Vec<Mat3<T>>,
    pub object: Vec<Option<usize>>,
}

impl<T: Real> PoseTargets<T> {
    pub fn mask(&self) -> Vec<bool> {
        self.object.iter().map(Option::is_some).collect()
    }
}

pub fn pose_targets<T: Real>(grid: &SparseVoxelGrid<T>, gt: &SceneGroundTruth<T>) -> PoseTargets<T> {
    let object = voxel_owners(grid, gt);
    let mut offsets = Vec::with_capacity(grid.len());
    let mut rotations = Vec::with_capacity(grid.len());
    for (&v, owner) in grid.indices().iter().zip(&object) {
        match owner {
            Some(i) => {
                let o = &gt.objects[*i];
                offsets.push(o.centroid - grid.center(v));
                rotations.push(o.pose.rotation);
            }
            None => {
                offsets.push(Vec3::zero());
                rotations.push(Mat3::identity());
            }
        }
    }
    PoseTargets { offsets, rotations, object }
}

/// Huber loss on row-major `n × 3` offsets, summed over coordinates and
/// averaged over valid rows.
pub fn smooth_l1<T: Real>(pred: &[T], target: &[T], mask: &[bool], delta: T) -> Result<(T, Vec<T>)> {
    if pred.len() != target.len() || pred.len() != mask.len() * 3 {
        return Err(Error::DimensionMismatch(format!("{} predictions, {} targets, {} mask rows", pred.len(), target.len(), mask.len())));
    }
    let valid = mask.iter().filter(|&&m| m).count();
    let mut grad = vec![T::zero(); pred.len()];
    if valid == 0 {
        return Ok((T::zero(), grad));
    }
    let n = T::from_usize(valid).unwrap();
    let mut terms = Vec::with_capacity(valid * 3);
    for (row, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for k in row * 3..row * 3 + 3 {
            let e = pred[k] - target[k];
            if e.abs() < delta {
                terms.push(T::lit(0.5) * e * e / delta);
                grad[k] = e / delta / n;
            } else {
                terms.push(e.abs() - T::lit(0.5) * delta);
                grad[k] = e.signum() / n;
            }
        }
    }
    Ok((pairwise_sum(&terms) / n, grad))
}

const RAW_EPS: f64 = 1e-9;

/// Gram–Schmidt map from the 6-D representation (two stacked 3-vectors)
/// to a rotation with columns (b₁, b₂, b₁ × b₂).
pub fn rot6d_to_matrix<T: Real>(r: &[T; 6]) -> Result<Mat3<T>> {
    let a1 = Vec3::new(r[0], r[1], r[2]);
    let a2 = Vec3::new(r[3], r[4], r[5]);
    let n1 = a1.norm();
    if !(n1 >= T::lit(RAW_EPS)) {
        return Err(Error::Degenerate("first 6-D rotation vector is zero".into()));
    }
    let b1 = a1.scale(T::one() / n1);
    let u = a2 - b1.scale(b1.dot(a2));
    let n2 = u.norm();
    if !(n2 >= T::lit(RAW_EPS)) {
        return Err(Error::Degenerate("6-D rotation vectors are parallel".into()));
    }
    let b2 = u.scale(T::one() / n2);
    Ok(Mat3::from_cols(b1, b2, b1.cross(b2)))
}

/// First two columns of `r`.
pub fn matrix_to_rot6d<T: Real>(r: &Mat3<T>) -> [T; 6] {
    let (c0, c1) = (r.col(0), r.col(1));
    [c0.x, c0.y, c0.z, c1.x, c1.y, c1.z]
}

/// Pulls a gradient w.r.t. the output matrix back to the 6-D input.
pub fn rot6d_backward<T: Real>(r: &[T; 6], grad: &Mat3<T>) -> Result<[T; 6]> {
    let a1 = Vec3::new(r[0], r[1], r[2]);
    let a2 = Vec3::new(r[3], r[4], r[5]);
    let m = rot6d_to_matrix(r)?;
    let (b1, b2) = (m.col(0), m.col(1));
    let n1 = a1.norm();
    let n2 = (a2 - b1.scale(b1.dot(a2))).norm();
    let (g1, g2, g3) = (grad.col(0), grad.col(1), grad.col(2));
    let mut gb1 = g1 + b2.cross(g3);
    let gb2 = g2 + g3.cross(b1);
    let gu = (gb2 - b2.scale(b2.dot(gb2))).scale(T::one() / n2);
    let ga2 = gu - b1.scale(b1.dot(gu));
    gb1 = gb1 - gu.scale(b1.dot(a2)) - a2.scale(b1.dot(gu));
    let ga1 = (gb1 - b1.scale(b1.dot(gb1))).scale(T::one() / n1);
    Ok([ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z])
}

/// Deterministic subsample of at most `n` points, evenly strided.
pub fn subsample<T: Copy>(points: &[T], n: usize) -> Vec<T> {
    if points.len() <= n {
        return points.to_vec();
    }
    (0..n).map(|i| points[i * points.len() / n]).collect()
}

/// Squared symmetric chamfer distance: mean nearest squared distance both ways.
pub fn chamfer_distance<T: Real>(a: &[Vec3<T>], b: &[Vec3<T>]) -> T {
    let one_way = |x: &[Vec3<T>], y: &[Vec3<T>]| {
        let tree = KdTree::new(y);
        let d: Vec<T> = x.iter().map(|&p| tree.nearest(p).map(|(_, d)| d).unwrap_or(T::zero())).collect();
        pairwise_sum(&d) / T::from_usize(x.len().max(1)).unwrap()
    };
    one_way(a, b) + one_way(b, a)
}

/// Rotation-only chamfer loss against a fixed model cloud.
///
/// Both clouds share the model, so the chamfer between `R̂·O` and `R·O` equals
/// the chamfer between `(RᵀR̂)·O` and `O`, and one k-d tree over `O` serves
/// every voxel.
pub struct ChamferRotLoss<T> {
    cloud: Vec<Vec3<T>>,
    tree: KdTree<T>,
}

impl<T: Real> ChamferRotLoss<T> {
    pub fn new(model: &[Vec3<T>], n_pts: usize) -> Result<Self> {
        if model.is_empty() {
            return Err(Error::InvalidInput("chamfer loss needs a nonempty model cloud".into()));
        }
        let cloud = subsample(model, n_pts);
        let tree = KdTree::new(&cloud);
        Ok(Self { cloud, tree })
    }

    pub fn cloud(&self) -> &[Vec3<T>] {
        &self.cloud
    }

    /// Chamfer value for one voxel and its gradient w.r.t. `pred`.
    pub fn eval(&self, pred: &Mat3<T>, gt: &Mat3<T>) -> (T, Mat3<T>) {
        let m = gt.transpose().mul_mat(pred);
        let mt = m.transpose();
        let n = T::from_usize(self.cloud.len()).unwrap();
        let two = T::lit(2.0);
        let mut gm = Mat3::zeros();
        let mut fwd = Vec::with_capacity(self.cloud.len());
        let mut bwd = Vec::with_capacity(self.cloud.len());
        for &o in &self.cloud {
            // R̂ o_i against its nearest target point
            let p = m.mul_vec(o);
            let (j, d) = self.tree.nearest(p).unwrap();
            fwd.push(d);
            add_outer(&mut gm, (p - self.cloud[j]).scale(two / n), o);
            // target o_j against its nearest predicted point M o_i
            // (the argmin is exact for orthogonal M, the only inputs used)
            let (i, _) = self.tree.nearest(mt.mul_vec(o)).unwrap();
            let oi = self.cloud[i];
            let r = o - m.mul_vec(oi);
            bwd.push(r.norm_squared());
            add_outer(&mut gm, r.scale(-two / n), oi);
        }
        let value = (pairwise_sum(&fwd) + pairwise_sum(&bwd)) / n;
        (value, gt.mul_mat(&gm))
    }

    /// Mean over valid voxels; gradient rows are zero for masked voxels.
    pub fn batch(&self, pred: &[Mat3<T>], gt: &[Mat3<T>], mask: &[bool]) -> Result<(T, Vec<Mat3<T>>)> {
        if pred.len() != gt.len() || pred.len() != mask.len() {
            return Err(Error::DimensionMismatch(format!("{} predictions, {} targets, {} mask rows", pred.len(), gt.len(), mask.len())));
        }
        let valid = mask.iter().filter(|&&m| m).count();
        if valid == 0 {
            return Ok((T::zero(), vec![Mat3::zeros(); pred.len()]));
        }
        let n = T::from_usize(valid).unwrap();
        let parts: Vec<(T, Mat3<T>)> = pred
            .par_iter()
            .zip(gt.par_iter())
            .zip(mask.par_iter())
            .map(|((p, g), &m)| if m { self.eval(p, g) } else { (T::zero(), Mat3::zeros()) })
            .collect();
        let values: Vec<T> = parts.iter().map(|p| p.0).collect();
        let grads = parts.into_iter().map(|(_, g)| g.scale(T::one() / n)).collect();
        Ok((pairwise_sum(&values) / n, grads))
    }
}

fn add_outer<T: Real>(m: &mut Mat3<T>, a: Vec3<T>, b: Vec3<T>) {
    for i in 0..3 {
        for j in 0..3 {
            m.m[i][j] = m.m[i][j] + a[i] * b[j];
        }
    }
}

/// Density-based clustering; `None` marks noise. Points are visited in input
/// order and neighborhoods include the point itself (`‖p − q‖ ≤ eps`).
pub fn dbscan<T: Real>(points: &[Vec3<T>], eps: T, min_pts: usize) -> Result<Vec<Option<usize>>> {
    if !(eps > T::zero()) || min_pts == 0 {
        return Err(Error::InvalidInput("DBSCAN needs eps > 0 and min_pts ≥ 1".into()));
    }
    let tree = KdTree::new(points);
    let mut labels: Vec<Option<usize>> = vec![None; points.len()];
    let mut visited = vec![false; points.len()];
    let mut cluster = 0;
    for start in 0..points.len() {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let seeds = tree.within_radius(points[start], eps);
        if seeds.len() < min_pts {
            continue;
        }
        labels[start] = Some(cluster);
        let mut queue: VecDeque<usize> = seeds.into_iter().collect();
        while let Some(q) = queue.pop_front() {
            if labels[q].is_none() {
                labels[q] = Some(cluster);
            }
            if visited[q] {
                continue;
            }
            visited[q] = true;
            let nb = tree.within_radius(points[q], eps);
            if nb.len() >= min_pts {
                queue.extend(nb.into_iter().filter(|&i| !visited[i] || labels[i].is_none()));
            }
        }
        cluster += 1;
    }
    Ok(labels)
}

/// Per-voxel votes; rotations are already mapped to SO(3).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VoteSet<T> {
    pub centers: Vec<Vec3<T>>,
    pub offsets: Vec<Vec3<T>>,
    pub rotations: Vec<Mat3<T>>,
    pub confidence: Vec<T>,
    pub class_ids: Vec<u32>,
}

impl<T: Real> VoteSet<T> {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.centers.len();
        if [self.offsets.len(), self.rotations.len(), self.confidence.len(), self.class_ids.len()].iter().any(|&l| l != n) {
            return Err(Error::DimensionMismatch("vote set columns differ in length".into()));
        }
        if !self.offsets.iter().all(|o| o.is_finite()) {
            return Err(Error::InvalidInput("non-finite vote offset".into()));
        }
        Ok(())
    }

    /// Predicted object centers (voxel center + offset).
    pub fn predicted_centers(&self) -> Vec<Vec3<T>> {
        self.centers.iter().zip(&self.offsets).map(|(&c, &o)| c + o).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseEstimate<T> {
    pub pose: Rigid<T>,
    pub class_id: u32,
    pub confidence: T,
    pub support: usize,
    pub refined: bool,
}

/// Projection of the arithmetic mean onto SO(3).
pub fn chordal_mean<T: Real>(rotations: &[Mat3<T>]) -> Option<Mat3<T>> {
    if rotations.is_empty() {
        return None;
    }
    let sum = rotations.iter().fold(Mat3::zeros(), |a, r| a.add_mat(r));
    Some(nearest_rotation(&sum.scale(T::one() / T::from_usize(rotations.len()).unwrap())))
}

/// One pose per cluster from its most confident `top_fraction` of votes.
/// Poses are ordered by cluster id.
pub fn aggregate_votes<T: Real>(votes: &VoteSet<T>, labels: &[Option<usize>], top_fraction: f64) -> Result<Vec<PoseEstimate<T>>> {
    votes.validate()?;
    if labels.len() != votes.len() {
        return Err(Error::DimensionMismatch(format!("{} labels for {} votes", labels.len(), votes.len())));
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::InvalidInput(format!("top fraction must lie in (0, 1], got {top_fraction}")));
    }
    let n_clusters = labels.iter().flatten().max().map_or(0, |&m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (row, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            members[*c].push(row);
        }
    }
    let mut out = Vec::new();
    for (cid, mut rows) in members.into_iter().enumerate() {
        rows.sort_by(|&a, &b| votes.confidence[b].partial_cmp(&votes.confidence[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        let keep = ((top_fraction * rows.len() as f64).ceil() as usize).min(rows.len());
        rows.truncate(keep);
        if rows.is_empty() {
            warn!("cluster {cid} is empty after confidence filtering; skipped");
            continue;
        }
        let n = T::from_usize(rows.len()).unwrap();
        let t = rows.iter().fold(Vec3::zero(), |a, &r| a + votes.centers[r] + votes.offsets[r]).scale(T::one() / n);
        let rots: Vec<Mat3<T>> = rows.iter().map(|&r| votes.rotations[r]).collect();
        let rotation = chordal_mean(&rots).unwrap();
        let mut tally: Vec<(u32, T)> = Vec::new();
        for &r in &rows {
            let c = votes.class_ids[r];
            match tally.iter_mut().find(|e| e.0 == c) {
                Some(e) => e.1 = e.1 + votes.confidence[r],
                None => tally.push((c, votes.confidence[r])),
            }
        }
        let class_id = tally
            .iter()
            .copied()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal).then(b.0.cmp(&a.0)))
            .unwrap()
            .0;
        let conf: Vec<T> = rows.iter().map(|&r| votes.confidence[r]).collect();
        out.push(PoseEstimate {
            pose: Rigid::new(rotation, t),
            class_id,
            confidence: pairwise_sum(&conf) / n,
            support: rows.len(),
            refined: false,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpParams<T> {
    pub max_iters: usize,
    /// Correspondences farther than this are rejected.
    pub corr_dist: T,
    /// Stop once the relative RMSE change drops below this.
    pub tol: T,
}

impl<T: Real> IcpParams<T> {
    /// 30 iterations, correspondence cap 4ϑ, tolerance 1e-5.
    pub fn for_resolution(theta: T) -> Self {
        Self { max_iters: 30, corr_dist: T::lit(4.0) * theta, tol: T::lit(1e-5) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult<T> {
    pub pose: Rigid<T>,
    /// RMSE over accepted correspondences at each iteration, before the update.
    pub rmse: Vec<T>,
    pub iterations: usize,
    /// False when too few correspondences were found to refine.
    pub refined: bool,
}

/// Point-to-point ICP of a canonical model cloud against a scene k-d tree.
pub fn icp<T: Real>(model: &[Vec3<T>], scene: &KdTree<T>, init: Rigid<T>, params: &IcpParams<T>) -> IcpResult<T> {
    let mut pose = init;
    let mut rmse = Vec::new();
    let max2 = params.corr_dist * params.corr_dist;
    let mut refined = false;
    let mut iterations = 0;
    for _ in 0..params.max_iters {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut d2 = Vec::new();
        for &m in model {
            if let Some((j, d)) = scene.nearest(pose.apply(m)) {
                if d <= max2 {
                    src.push(m);
                    dst.push(scene.points()[j]);
                    d2.push(d);
                }
            }
        }
        if src.len() < 3 {
            break;
        }
        let err = (pairwise_sum(&d2) / T::from_usize(d2.len()).unwrap()).sqrt();
        let converged = rmse.last().is_some_and(|&prev: &T| prev <= T::zero() || ((prev - err) / prev).abs() < params.tol);
        rmse.push(err);
        if converged || err <= T::zero() {
            refined = true;
            break;
        }
        match fit_rigid(&src, &dst) {
            Some(next) => {
                pose = next;
                refined = true;
                iterations += 1;
            }
            None => break,
        }
    }
    if !refined {
        pose = init;
    }
    IcpResult { pose, rmse, iterations, refined }
}

/// Refines every pose independently against one shared scene cloud.
pub fn batched_icp<T: Real, F>(poses: &[PoseEstimate<T>], model_of: F, scene: &[Vec3<T>], params: &IcpParams<T>) -> Vec<PoseEstimate<T>>
where
    F: Fn(u32) -> Option<Vec<Vec3<T>>> + Sync,
{
    let tree = KdTree::new(scene);
    poses
        .par_iter()
        .map(|p| {
            let Some(model) = model_of(p.class_id) else {
                return PoseEstimate { refined: false, ..*p };
            };
            let r = icp(&model, &tree, p.pose, params);
            PoseEstimate { pose: r.pose, refined: r.refined, ..*p }
        })
        .collect()
}

/// Depth views of the scene, used to restrict ICP to model points the views see.
#[derive(Clone, Copy, Debug)]
pub struct ViewSet<'a, T> {
    pub cameras: &'a [Camera<T>],
    pub depths: &'a [DepthImage<T>],
}

/// Model points that, placed at `pose`, land within `tol` of the observed depth
/// in at least one view. Hidden faces and occluded parts are dropped, so they
/// cannot pull the fit towards unrelated surfaces.
pub fn visible_points<T: Real>(model: &[Vec3<T>], pose: &Rigid<T>, views: &ViewSet<T>, tol: T) -> Vec<Vec3<T>> {
    model
        .iter()
        .copied()
        .filter(|&m| {
            let p = pose.apply(m);
            views.cameras.iter().zip(views.depths).any(|(cam, depth)| {
                let proj = project(p, &cam.intrinsics, &cam.extrinsics);
                if !proj.in_front {
                    return false;
                }
                let (u, v) = (proj.pixel.0.round(), proj.pixel.1.round());
                if !(u >= T::zero() && v >= T::zero()) {
                    return false;
                }
                let (u, v) = (u.to_usize().unwrap_or(usize::MAX), v.to_usize().unwrap_or(usize::MAX));
                if u >= depth.width() || v >= depth.height() {
                    return false;
                }
                let d = depth.get(u, v);
                d > T::zero() && (d - proj.depth).abs() <= tol
            })
        })
        .collect()
}

/// ICP on the visible part of the model, re-selected after each round.
pub fn icp_visible<T: Real>(model: &[Vec3<T>], scene: &KdTree<T>, init: Rigid<T>, params: &IcpParams<T>, views: &ViewSet<T>, visibility_tol: T, rounds: usize) -> IcpResult<T> {
    let mut result = IcpResult { pose: init, rmse: Vec::new(), iterations: 0, refined: false };
    for _ in 0..rounds.max(1) {
        let visible = visible_points(model, &result.pose, views, visibility_tol);
        let r = icp(&visible, scene, result.pose, params);
        if !r.refined {
            break;
        }
        result.rmse.extend(r.rmse);
        result.iterations += r.iterations;
        result.pose = r.pose;
        result.refined = true;
        if r.iterations == 0 {
            break;
        }
    }
    result
}

/// Clustering, aggregation and refinement settings of the voting stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VotingParams<T> {
    pub eps: T,
    pub min_pts: usize,
    pub top_fraction: f64,
    pub icp: IcpParams<T>,
    /// Depth agreement that marks a model point as seen by a view.
    pub visibility_tol: T,
    pub refine: bool,
}

impl<T: Real> VotingParams<T> {
    /// DBSCAN radius 5ϑ with 5 points, top half of each cluster, visibility band ϑ/2, ICP on.
    pub fn for_resolution(theta: T) -> Self {
        Self { eps: T::lit(5.0) * theta, min_pts: 5, top_fraction: 0.5, icp: IcpParams::for_resolution(theta), visibility_tol: T::lit(0.5) * theta, refine: true }
    }
}

/// Ground-truth targets of the foreground voxels presented as confident votes.
pub fn oracle_votes<T: Real>(grid: &SparseVoxelGrid<T>, gt: &SceneGroundTruth<T>) -> VoteSet<T> {
    let targets = pose_targets(grid, gt);
    let mut votes = VoteSet::default();
    for (row, owner) in targets.object.iter().enumerate() {
        if let Some(i) = owner {
            votes.centers.push(grid.center(grid.indices()[row]));
            votes.offsets.push(targets.offsets[row]);
            votes.rotations.push(targets.rotations[row]);
            votes.confidence.push(T::one());
            votes.class_ids.push(gt.objects[*i].class_id);
        }
    }
    votes
}

/// DBSCAN over predicted centers, per-cluster aggregation and optional ICP.
/// With `views`, ICP only uses model points consistent with the observed depth.
pub fn recover_poses<T: Real, F>(
    votes: &VoteSet<T>,
    params: &VotingParams<T>,
    model_of: F,
    scene: &[Vec3<T>],
    views: Option<&ViewSet<T>>,
) -> Result<Vec<PoseEstimate<T>>>
where
    F: Fn(u32) -> Option<Vec<Vec3<T>>> + Sync,
{
    votes.validate()?;
    if votes.is_empty() {
        return Ok(Vec::new());
    }
    let labels = dbscan(&votes.predicted_centers(), params.eps, params.min_pts)?;
    let poses = aggregate_votes(votes, &labels, params.top_fraction)?;
    if !params.refine || scene.is_empty() {
        return Ok(poses);
    }
    match views {
        None => Ok(batched_icp(&poses, model_of, scene, &params.icp)),
        Some(views) => {
            let tree = KdTree::new(scene);
            Ok(poses
                .par_iter()
                .map(|p| {
                    let Some(model) = model_of(p.class_id) else {
                        return PoseEstimate { refined: false, ..*p };
                    };
                    let r = icp_visible(&model, &tree, p.pose, &params.icp, views, params.visibility_tol, VISIBILITY_ROUNDS);
                    PoseEstimate { pose: r.pose, refined: r.refined, ..*p }
                })
                .collect())
        }
    }
}

const VISIBILITY_ROUNDS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRow {
    pub object_id: usize,
    pub class_id: u32,
    pub confidence: f64,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub refined: bool,
    pub support: usize,
}

impl PoseRow {
    pub fn from_estimate<T: Real>(object_id: usize, e: &PoseEstimate<T>) -> Self {
        let p = e.pose.cast::<f64>();
        Self {
            object_id,
            class_id: e.class_id,
            confidence: e.confidence.as_f64(),
            rotation: p.rotation.to_row_major(),
            translation: p.translation.to_array(),
            refined: e.refined,
            support: e.support,
        }
    }

    pub fn pose(&self) -> Rigid<f64> {
        Rigid::new(Mat3::from_row_major(&self.rotation), Vec3::from_array(self.translation))
    }
}

pub const POSE_CSV_HEADER: &str = "object_id,class,confidence,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz,refined";

pub fn poses_csv(rows: &[PoseRow]) -> String {
    let mut s = String::from(POSE_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let nums: Vec<String> = r.rotation.iter().chain(&r.translation).map(|v| format!("{v:?}")).collect();
        s.push_str(&format!("{},{},{:?},{},{}\n", r.object_id, r.class_id, r.confidence, nums.join(","), r.refined as u8));
    }
    s
}

/// Parses the CSV written by [`poses_csv`] (support is not stored and reads as 0).
/// Lines starting with `#` are comments.
pub fn parse_poses_csv(text: &str) -> Result<Vec<PoseRow>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    if lines.next() != Some(POSE_CSV_HEADER) {
        return Err(Error::InvalidInput("pose CSV header mismatch".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 16 {
                return Err(Error::InvalidInput(format!("pose CSV row has {} fields", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::InvalidInput(format!("bad number '{s}'")));
            let int = |s: &str| s.parse::<u64>().map_err(|_| Error::InvalidInput(format!("bad integer '{s}'")));
            let mut rotation = [0.0; 9];
            for (k, r) in rotation.iter_mut().enumerate() {
                *r = num(f[3 + k])?;
            }
            Ok(PoseRow {
                object_id: int(f[0])? as usize,
                class_id: int(f[1])? as u32,
                confidence: num(f[2])?,
                rotation,
                translation: [num(f[12])?, num(f[13])?, num(f[14])?],
                refined: int(f[15])? != 0,
                support: 0,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ground_truth::GtObject;
    use crate::linalg::rotation_distance;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Mat3<f64> {
        let axis = Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        Mat3::from_axis_angle(axis, rng.random::<f64>() * max_angle)
    }

    #[test]
    fn pose_targets_point_at_centroids() {
        let cloud: Vec<Vec3<f64>> = (0..10).map(|i| Vec3::new(0.01 * i as f64 + 0.005, 0.005, 0.005)).collect();
        let obj = GtObject { class_id: 2, pose: Rigid::new(Mat3::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), 0.3), Vec3::new(0.045, 0.005, 0.005)), centroid: Vec3::new(0.045, 0.005, 0.005), cloud };
        let gt = SceneGroundTruth { objects: vec![obj.clone()] };
        let grid = SparseVoxelGrid::from_parts(0.01, Vec3::zero(), vec![[0, 0, 0], [0, 5, 0], [4, 0, 0]], vec![0.0; 3], 1).unwrap();
        let t = pose_targets(&grid, &gt);
        assert_eq!(t.mask(), vec![true, false, true]);
        assert!((t.offsets[2]).norm() < 1e-15);
        assert!((t.offsets[0] - Vec3::new(0.04, 0.0, 0.0)).norm() < 1e-15);
        assert_eq!(t.rotations[0], obj.pose.rotation);
    }

    #[test]
    fn smooth_l1_values() {
        let (l, _) = smooth_l1::<f64>(&[0.005, 0.0, 0.0], &[0.0; 3], &[true], 0.01).unwrap();
        assert!((l - 0.00125).abs() < 1e-15);
        let (l, _) = smooth_l1::<f64>(&[0.02, 0.0, 0.0], &[0.0; 3], &[true], 0.01).unwrap();
        assert!((l - 0.015).abs() < 1e-15);
        let (l, g) = smooth_l1::<f64>(&[1.0, 2.0, 3.0, 0.1, 0.2, 0.3], &[0.0; 6], &[false, true], 0.01).unwrap();
        assert!((l - (0.6 - 0.015)).abs() < 1e-12);
        assert!(g[..3].iter().all(|&v| v == 0.0));
        assert_eq!(smooth_l1(&[0.0; 3], &[0.0; 3], &[true], 0.01).unwrap().0, 0.0);
    }

    #[test]
    fn rot6d_examples() {
        assert_eq!(rot6d_to_matrix(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(), Mat3::identity());
        assert_eq!(rot6d_to_matrix(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap(), Mat3::identity());
        assert!(rot6d_to_matrix(&[0.0; 6]).is_err());
        assert!(rot6d_to_matrix(&[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random_rotation(&mut rng, 3.0);
        let back = rot6d_to_matrix(&matrix_to_rot6d(&r)).unwrap();
        assert!(rotation_distance(&back, &r) < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn rot6d_is_always_a_rotation(r in proptest::array::uniform6(-10.0f64..10.0)) {
            if let Ok(m) = rot6d_to_matrix(&r) {
                prop_assert!(m.is_rotation(1e-9));
                prop_assert!((m.det() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rot6d_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let r: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let w = Mat3::new(std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))));
            let f = |x: &[f64; 6]| {
                let m = rot6d_to_matrix(x).unwrap();
                (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| m.m[i][j] * w.m[i][j]).sum::<f64>()
            };
            let g = rot6d_backward(&r, &w).unwrap();
            for k in 0..6 {
                let (mut a, mut b) = (r, r);
                a[k] += 1e-6;
                b[k] -= 1e-6;
                let num = (f(&a) - f(&b)) / 2e-6;
                assert!((num - g[k]).abs() < 1e-6 * num.abs().max(1.0), "{num} vs {}", g[k]);
            }
        }
    }

    fn brute_chamfer(a: &[Vec3<f64>], b: &[Vec3<f64>]) -> f64 {
        let one = |x: &[Vec3<f64>], y: &[Vec3<f64>]| x.iter().map(|p| y.iter().map(|q| (*p - *q).norm_squared()).fold(f64::INFINITY, f64::min)).sum::<f64>() / x.len() as f64;
        one(a, b) + one(b, a)
    }

    #[test]
    fn chamfer_rot_loss_oracles() {
        let lib = crate::synth::make_primitives();
        let bracket = &lib[1];
        let loss = ChamferRotLoss::new(&bracket.cloud, 256).unwrap();
        let r = Mat3::from_axis_angle(Vec3::new(0.2, 0.5, 0.1), 0.7);
        assert!(loss.eval(&r, &r).0 < 1e-30);
        let flip = r.mul_mat(&Mat3::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::PI));
        let pts = loss.cloud();
        let a: Vec<_> = pts.iter().map(|&p| flip.mul_vec(p)).collect();
        let b: Vec<_> = pts.iter().map(|&p| r.mul_vec(p)).collect();
        let want = brute_chamfer(&a, &b);
        assert!(want > 1e-5);
        assert!((loss.eval(&flip, &r).0 - want).abs() < 1e-12 * want.max(1.0));
        assert!((chamfer_distance(&a, &b) - want).abs() < 1e-15);

        let cyl = &lib[2];
        let loss = ChamferRotLoss::new(&cyl.cloud, 256).unwrap();
        let sym = r.mul_mat(&cyl.symmetries[7]);
        let tilt = r.mul_mat(&Mat3::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), std::f64::consts::FRAC_PI_2));
        // sampling tolerance: chamfer between two disjoint subsamples of the same surface
        let other: Vec<_> = cyl.cloud.iter().skip(3).step_by(8).copied().collect();
        let tolerance = chamfer_distance(loss.cloud(), &other);
        assert!(loss.eval(&sym, &r).0 < 2.0 * tolerance);
        assert!(loss.eval(&tilt, &r).0 > 4.0 * loss.eval(&sym, &r).0);
    }

    #[test]
    fn chamfer_gradient_matches_finite_differences() {
        let lib = crate::synth::make_primitives();
        let loss = ChamferRotLoss::new(&lib[1].cloud, 64).unwrap();
        let gt = Mat3::from_axis_angle(Vec3::new(0.3, -0.2, 0.9), 1.1);
        let pred = Mat3::from_axis_angle(Vec3::new(-0.5, 0.4, 0.2), 0.9);
        let brute = |m: &Mat3<f64>| {
            let a: Vec<_> = loss.cloud().iter().map(|&p| m.mul_vec(p)).collect();
            let b: Vec<_> = loss.cloud().iter().map(|&p| gt.mul_vec(p)).collect();
            brute_chamfer(&a, &b)
        };
        let (v, g) = loss.eval(&pred, &gt);
        assert!((v - brute(&pred)).abs() < 1e-15);
        for i in 0..3 {
            for j in 0..3 {
                let (mut a, mut b) = (pred, pred);
                a.m[i][j] += 1e-7;
                b.m[i][j] -= 1e-7;
                let num = (brute(&a) - brute(&b)) / 2e-7;
                assert!((num - g.m[i][j]).abs() < 1e-6 * num.abs().max(1e-3), "{num} vs {}", g.m[i][j]);
            }
        }
    }

    /// O(n²) reference with the same visiting order.
    pub(crate) fn reference_dbscan(points: &[Vec3<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
        let n = points.len();
        let nb = |i: usize| (0..n).filter(|&j| (points[i] - points[j]).norm() <= eps).collect::<Vec<_>>();
        let mut labels = vec![None; n];
        let mut visited = vec![false; n];
        let mut c = 0;
        for i in 0..n {
            if visited[i] {
                continue;
            }
            visited[i] = true;
            let seeds = nb(i);
            if seeds.len() < min_pts {
                continue;
            }
            labels[i] = Some(c);
            let mut k = 0;
            let mut queue = seeds;
            while k < queue.len() {
                let q = queue[k];
                k += 1;
                if labels[q].is_none() {
                    labels[q] = Some(c);
                }
                if visited[q] {
                    continue;
                }
                visited[q] = true;
                let more = nb(q);
                if more.len() >= min_pts {
                    queue.extend(more);
                }
            }
            c += 1;
        }
        labels
    }

    #[test]
    fn dbscan_examples() {
        let mut pts: Vec<Vec3<f64>> = (0..10).map(|i| Vec3::new(0.001 * i as f64, 0.0, 0.0)).collect();
        pts.extend((0..10).map(|i| Vec3::new(1.0 + 0.001 * i as f64, 0.0, 0.0)));
        let l = dbscan(&pts, 0.01, 5).unwrap();
        assert!(l[..10].iter().all(|&x| x == Some(0)));
        assert!(l[10..].iter().all(|&x| x == Some(1)));
        let iso: Vec<Vec3<f64>> = (0..4).map(|i| Vec3::splat(i as f64)).collect();
        assert!(dbscan(&iso, 0.5, 5).unwrap().iter().all(Option::is_none));
        assert!(dbscan(&iso, 0.0, 5).is_err());
    }

    #[test]
    fn dbscan_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let pts: Vec<Vec3<f64>> = (0..300).map(|_| Vec3::new(rng.random(), rng.random(), rng.random::<f64>() * 0.2)).collect();
            assert_eq!(dbscan(&pts, 0.08, 5).unwrap(), reference_dbscan(&pts, 0.08, 5));
        }
    }

    fn votes_for(rots: &[Mat3<f64>], centers: &[Vec3<f64>], offsets: &[Vec3<f64>]) -> VoteSet<f64> {
        VoteSet {
            centers: centers.to_vec(),
            offsets: offsets.to_vec(),
            rotations: rots.to_vec(),
            confidence: vec![1.0; rots.len()],
            class_ids: vec![3; rots.len()],
        }
    }

    #[test]
    fn aggregate_identical_and_midpoint() {
        let r = Mat3::from_axis_angle(Vec3::new(1.0, 2.0, 3.0), 0.4);
        let v = votes_for(&[r, r], &[Vec3::new(0.1, 0.0, 0.0); 2], &[Vec3::new(0.0, 0.01, 0.0), Vec3::new(0.0, -0.01, 0.0)]);
        let p = aggregate_votes(&v, &[Some(0), Some(0)], 1.0).unwrap();
        assert_eq!(p.len(), 1);
        assert!((p[0].pose.translation - Vec3::new(0.1, 0.0, 0.0)).norm() < 1e-15);
        assert!(rotation_distance(&p[0].pose.rotation, &r) < 1e-12);
        assert_eq!(p[0].class_id, 3);
        assert!(aggregate_votes(&v, &[None, None], 0.5).unwrap().is_empty());
    }

    #[test]
    fn aggregate_keeps_most_confident() {
        let mut v = votes_for(&[Mat3::identity(); 4], &[Vec3::zero(); 4], &[Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 3.0), Vec3::zero(), Vec3::zero()]);
        v.confidence = vec![0.9, 0.8, 0.1, 0.2];
        v.class_ids = vec![1, 2, 2, 2];
        let p = aggregate_votes(&v, &[Some(0); 4], 0.5).unwrap();
        assert!((p[0].pose.translation.z - 2.0).abs() < 1e-15);
        assert_eq!(p[0].class_id, 1);
        assert_eq!(p[0].support, 2);
        assert!((p[0].confidence - 0.85).abs() < 1e-15);
    }

    /// Grid search over rotations near the identity minimizing Σ‖R − R_k‖².
    pub(crate) fn grid_search_mean(rots: &[Mat3<f64>]) -> Mat3<f64> {
        let cost = |r: &Mat3<f64>| rots.iter().map(|k| r.frobenius_distance_squared(k)).sum::<f64>();
        let mut best = (f64::INFINITY, Mat3::identity());
        let step = 0.5f64.to_radians();
        let span = 24;
        for i in -span..=span {
            for j in -span..=span {
                for k in -span..=span {
                    let w = Vec3::new(i as f64, j as f64, k as f64).scale(step);
                    let r = if w.norm() == 0.0 { Mat3::identity() } else { Mat3::from_axis_angle(w, w.norm()) };
                    let c = cost(&r);
                    if c < best.0 {
                        best = (c, r);
                    }
                }
            }
        }
        best.1
    }

    #[test]
    fn chordal_mean_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2 {
            let rots: Vec<Mat3<f64>> = (0..8).map(|_| random_rotation(&mut rng, 0.15)).collect();
            let m = chordal_mean(&rots).unwrap();
            assert!(rotation_distance(&m, &grid_search_mean(&rots)).to_degrees() < 1.0);
        }
    }

    #[test]
    fn aggregate_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 12;
        let rots: Vec<_> = (0..n).map(|_| random_rotation(&mut rng, 0.3)).collect();
        let centers: Vec<_> = (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let offsets: Vec<_> = (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random()).scale(0.01)).collect();
        let mut v = votes_for(&rots, &centers, &offsets);
        v.confidence = (0..n).map(|_| rng.random()).collect();
        let labels: Vec<_> = (0..n).map(|i| Some(i % 2)).collect();
        let t = Rigid::new(random_rotation(&mut rng, 3.0), Vec3::new(0.3, -0.2, 0.5));
        let moved = VoteSet {
            centers: centers.iter().map(|&c| t.apply(c)).collect(),
            offsets: offsets.iter().map(|&o| t.rotation.mul_vec(o)).collect(),
            rotations: rots.iter().map(|r| t.rotation.mul_mat(r)).collect(),
            ..v.clone()
        };
        let a = aggregate_votes(&v, &labels, 0.5).unwrap();
        let b = aggregate_votes(&moved, &labels, 0.5).unwrap();
        for (p, q) in a.iter().zip(&b) {
            let want = t.compose(&p.pose);
            assert!((want.translation - q.pose.translation).norm() < 1e-9);
            assert!(want.rotation.frobenius_distance_squared(&q.pose.rotation).sqrt() < 1e-9);
        }
    }

    #[test]
    fn icp_fixed_point_and_recovery() {
        let lib = crate::synth::make_primitives();
        let model = &lib[1].cloud;
        let gt = Rigid::new(Mat3::from_axis_angle(Vec3::new(0.3, 0.1, 1.0), 0.8), Vec3::new(0.05, -0.02, 0.03));
        let scene: Vec<_> = model.iter().map(|&p| gt.apply(p)).collect();
        let tree = KdTree::new(&scene);
        let params = IcpParams::for_resolution(0.002);
        let r = icp(model, &tree, gt, &params);
        assert!(r.refined);
        assert!((r.pose.translation - gt.translation).norm() < 1e-9);
        assert!(rotation_distance(&r.pose.rotation, &gt.rotation) < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let axis = Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
            let dir = Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
            let delta = Rigid::new(Mat3::from_axis_angle(axis, 5f64.to_radians()), dir.scale(0.005 / dir.norm()));
            let init = gt.compose(&delta);
            let r = icp(model, &tree, init, &params);
            assert!((r.pose.translation - gt.translation).norm() < 5e-4);
            assert!(rotation_distance(&r.pose.rotation, &gt.rotation).to_degrees() < 0.5);
            assert!(r.rmse.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        }
    }

    #[test]
    fn icp_without_overlap_is_flagged() {
        let lib = crate::synth::make_primitives();
        let scene = vec![Vec3::new(5.0, 5.0, 5.0); 10];
        let init = Rigid::identity();
        let est = PoseEstimate { pose: init, class_id: 1, confidence: 1.0, support: 1, refined: false };
        let out = batched_icp(&[est], |c| crate::synth::find_model(&lib, c).map(|m| m.cloud.clone()), &scene, &IcpParams::for_resolution(0.002));
        assert!(!out[0].refined);
        assert_eq!(out[0].pose, init);
    }

    #[test]
    fn pose_csv_round_trip() {
        let e = PoseEstimate { pose: Rigid::new(Mat3::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), 0.25), Vec3::new(0.1, 0.2, 0.3)), class_id: 4, confidence: 0.75, support: 9, refined: true };
        let rows = vec![PoseRow::from_estimate(0, &e)];
        let back = parse_poses_csv(&poses_csv(&rows)).unwrap();
        assert_eq!(back[0], PoseRow { support: 0, ..rows[0].clone() });
        assert!(parse_poses_csv("bad\n").is_err());
    }
}
