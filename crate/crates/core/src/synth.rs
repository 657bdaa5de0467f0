//! Synthetic bin-picking scenes with exact ground truth.
//!
//! Primitive parts are placed resting on the floor of a box-shaped bin,
//! rendered into depth maps with a z-buffer rasterizer, and exported as a
//! bundle directory:
//!
//! ```text
//! scene.json      scene spec (bin, instances, cameras, noise, depth scale)
//! cam_XX.json     one camera record per view
//! depth_XX.png    16-bit depth, `depth_scale` meters per unit
//! gt.json         per-instance class, pose and world centroid
//! models/*.ply    primitive meshes (canonical frame)
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{load_depth_png, save_depth_png, Camera, CameraExtrinsics, CameraIntrinsics, CameraRecord, DepthImage};
use crate::error::{Error, Result};
use crate::fusion::Aabb;
use crate::ground_truth::{GtObject, PoseRecord, SceneGroundTruth};
use crate::linalg::{Mat3, Rigid, Vec3};
use crate::ply;

pub const MODEL_CLOUD_POINTS: usize = 2048;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3<f64>>,
    pub faces: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn triangle(&self, f: usize) -> [Vec3<f64>; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn transformed(&self, t: &Rigid<f64>) -> Mesh {
        Mesh { vertices: self.vertices.iter().map(|&v| t.apply(v)).collect(), faces: self.faces.clone() }
    }

    pub fn aabb(&self) -> Aabb<f64> {
        Aabb::from_points(&self.vertices).unwrap_or(Aabb { min: Vec3::zero(), max: Vec3::zero() })
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| tri_area(&self.triangle(f))).sum()
    }

    /// Area-weighted centroid of the surface.
    pub fn surface_centroid(&self) -> Vec3<f64> {
        let mut acc = Vec3::zero();
        let mut area = 0.0;
        for f in 0..self.faces.len() {
            let t = self.triangle(f);
            let a = tri_area(&t);
            acc += (t[0] + t[1] + t[2]).scale(a / 3.0);
            area += a;
        }
        acc.scale(1.0 / area)
    }

    fn append(&mut self, other: &Mesh) {
        let off = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.faces.extend(other.faces.iter().map(|f| [f[0] + off, f[1] + off, f[2] + off]));
    }

    /// Deterministic area-weighted surface sampling.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Vec<Vec3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cdf = Vec::with_capacity(self.faces.len());
        let mut total = 0.0;
        for f in 0..self.faces.len() {
            total += tri_area(&self.triangle(f));
            cdf.push(total);
        }
        (0..n)
            .map(|_| {
                let r = rng.random::<f64>() * total;
                let f = cdf.partition_point(|&c| c < r).min(self.faces.len() - 1);
                let [a, b, c] = self.triangle(f);
                let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                a + (b - a).scale(u) + (c - a).scale(v)
            })
            .collect()
    }
}

fn tri_area(t: &[Vec3<f64>; 3]) -> f64 {
    (t[1] - t[0]).cross(t[2] - t[0]).norm() * 0.5
}

/// Axis-aligned box centered at the origin.
pub fn box_mesh(size: Vec3<f64>) -> Mesh {
    let h = size.scale(0.5);
    let vertices = (0..8)
        .map(|i| Vec3::new(if i & 1 == 0 { -h.x } else { h.x }, if i & 2 == 0 { -h.y } else { h.y }, if i & 4 == 0 { -h.z } else { h.z }))
        .collect();
    let faces = vec![
        [0, 2, 1], [1, 2, 3], // -z
        [4, 5, 6], [5, 7, 6], // +z
        [0, 1, 4], [1, 5, 4], // -y
        [2, 6, 3], [3, 6, 7], // +y
        [0, 4, 2], [2, 4, 6], // -x
        [1, 3, 5], [3, 7, 5], // +x
    ];
    Mesh { vertices, faces }
}

/// Prism obtained by extruding a simple polygon (xy, counter-clockwise) along z.
pub fn extrude(polygon: &[(f64, f64)], height: f64) -> Mesh {
    let n = polygon.len();
    let mut m = Mesh::default();
    for &z in &[-height / 2.0, height / 2.0] {
        for &(x, y) in polygon {
            m.vertices.push(Vec3::new(x, y, z));
        }
    }
    for (a, b, c) in ear_clip(polygon) {
        m.faces.push([c as u32, b as u32, a as u32]);
        m.faces.push([(a + n) as u32, (b + n) as u32, (c + n) as u32]);
    }
    for i in 0..n {
        let j = (i + 1) % n;
        m.faces.push([i as u32, j as u32, (j + n) as u32]);
        m.faces.push([i as u32, (j + n) as u32, (i + n) as u32]);
    }
    m
}

fn ear_clip(poly: &[(f64, f64)]) -> Vec<(usize, usize, usize)> {
    let mut idx: Vec<usize> = (0..poly.len()).collect();
    let mut tris = Vec::new();
    let cross = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    let inside = |p: (f64, f64), a, b, c| cross(a, b, p) > 0.0 && cross(b, c, p) > 0.0 && cross(c, a, p) > 0.0;
    while idx.len() > 3 {
        let k = idx.len();
        let ear = (0..k)
            .find(|&i| {
                let (a, b, c) = (poly[idx[(i + k - 1) % k]], poly[idx[i]], poly[idx[(i + 1) % k]]);
                cross(a, b, c) > 0.0 && idx.iter().all(|&j| !inside(poly[j], a, b, c))
            })
            .expect("polygon must be simple and counter-clockwise");
        tris.push((idx[(ear + k - 1) % k], idx[ear], idx[(ear + 1) % k]));
        idx.remove(ear);
    }
    tris.push((idx[0], idx[1], idx[2]));
    tris
}

/// Surface of revolution about z from a closed (r, z) profile loop.
/// Profile vertices with r = 0 collapse onto the axis.
pub fn revolve(profile: &[(f64, f64)], segments: usize) -> Mesh {
    let mut m = Mesh::default();
    let mut ring_start = Vec::with_capacity(profile.len());
    for &(r, z) in profile {
        ring_start.push(m.vertices.len());
        if r == 0.0 {
            m.vertices.push(Vec3::new(0.0, 0.0, z));
        } else {
            for s in 0..segments {
                let a = 2.0 * PI * s as f64 / segments as f64;
                m.vertices.push(Vec3::new(r * a.cos(), r * a.sin(), z));
            }
        }
    }
    let vid = |p: usize, s: usize| -> u32 {
        if profile[p].0 == 0.0 {
            ring_start[p] as u32
        } else {
            (ring_start[p] + s % segments) as u32
        }
    };
    let n = profile.len();
    for p in 0..n {
        let q = (p + 1) % n;
        if profile[p].0 == 0.0 && profile[q].0 == 0.0 {
            continue;
        }
        for s in 0..segments {
            let (a, b, c, d) = (vid(p, s), vid(p, s + 1), vid(q, s + 1), vid(q, s));
            if a != b {
                m.faces.push([a, b, c]);
            }
            if c != d {
                m.faces.push([a, c, d]);
            }
        }
    }
    m
}

pub fn uv_sphere(radius: f64, rings: usize, segments: usize) -> Mesh {
    let profile: Vec<(f64, f64)> = (0..=rings)
        .map(|i| {
            let th = PI * i as f64 / rings as f64;
            let r = if i == 0 || i == rings { 0.0 } else { radius * th.sin() };
            (r, -radius * th.cos())
        })
        .collect();
    revolve(&profile, segments)
}

/// A known part: mesh, canonical sampled cloud, and its symmetry rotations.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectModel {
    pub class_id: u32,
    pub name: String,
    pub mesh: Mesh,
    pub cloud: Vec<Vec3<f64>>,
    /// Rotations S with S·model = model (always contains the identity).
    pub symmetries: Vec<Mat3<f64>>,
    /// Stable resting orientations on a horizontal floor.
    pub resting: Vec<Mat3<f64>>,
}

impl ObjectModel {
    /// Centers the mesh on its surface centroid and samples the canonical cloud.
    pub fn new(class_id: u32, name: &str, mesh: Mesh, symmetries: Vec<Mat3<f64>>, resting: Vec<Mat3<f64>>) -> Self {
        let c = mesh.surface_centroid();
        let mesh = mesh.transformed(&Rigid::new(Mat3::identity(), -c));
        let cloud = mesh.sample_surface(MODEL_CLOUD_POINTS, 0x5eed ^ class_id as u64);
        Self { class_id, name: name.to_string(), mesh, cloud, symmetries, resting }
    }

    /// Largest vertex-to-vertex distance.
    pub fn diameter(&self) -> f64 {
        let v = &self.mesh.vertices;
        let mut d: f64 = 0.0;
        for i in 0..v.len() {
            for j in (i + 1)..v.len() {
                d = d.max((v[i] - v[j]).norm_squared());
            }
        }
        d.sqrt()
    }
}

fn axial_symmetries(steps: usize) -> Vec<Mat3<f64>> {
    (0..steps).map(|k| Mat3::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), 2.0 * PI * k as f64 / steps as f64)).collect()
}

fn rx(a: f64) -> Mat3<f64> {
    Mat3::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), a)
}

/// Class ids: 1 box, 2 L-bracket, 3 notched cylinder, 4 tube (0 is background).
pub fn make_primitives() -> Vec<ObjectModel> {
    let mm = 0.001;
    let id = Mat3::identity();
    let box_syms = vec![id, rx(PI), Mat3::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), PI), Mat3::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), PI)];
    let boxm = ObjectModel::new(1, "box", box_mesh(Vec3::new(40.0 * mm, 30.0 * mm, 20.0 * mm)), box_syms, vec![id]);

    let l = [(0.0, 0.0), (40.0, 0.0), (40.0, 10.0), (10.0, 10.0), (10.0, 30.0), (0.0, 30.0)];
    let l: Vec<(f64, f64)> = l.iter().map(|&(x, y)| (x * mm, y * mm)).collect();
    let bracket = ObjectModel::new(2, "l_bracket", extrude(&l, 15.0 * mm), vec![id], vec![id]);

    // cylinder with an off-center circumferential groove: axial symmetry only
    let notched = [(0.0, -20.0), (15.0, -20.0), (15.0, 4.0), (11.0, 4.0), (11.0, 11.0), (15.0, 11.0), (15.0, 20.0), (0.0, 20.0)];
    let notched: Vec<(f64, f64)> = notched.iter().map(|&(r, z)| (r * mm, z * mm)).collect();
    let cyl = ObjectModel::new(3, "notched_cylinder", revolve(&notched, 72), axial_symmetries(36), vec![id, rx(PI / 2.0)]);

    let tube = [(8.0, -15.0), (12.0, -15.0), (12.0, 15.0), (8.0, 15.0)];
    let tube: Vec<(f64, f64)> = tube.iter().map(|&(r, z)| (r * mm, z * mm)).collect();
    let mut tube_syms = axial_symmetries(36);
    let flipped: Vec<Mat3<f64>> = tube_syms.iter().map(|s| s.mul_mat(&rx(PI))).collect();
    tube_syms.extend(flipped);
    let tubem = ObjectModel::new(4, "tube", revolve(&tube, 72), tube_syms, vec![id, rx(PI / 2.0)]);

    vec![boxm, bracket, cyl, tubem]
}

pub fn find_model(library: &[ObjectModel], class_id: u32) -> Option<&ObjectModel> {
    library.iter().find(|m| m.class_id == class_id)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    /// Interior: floor at `min[2]`, walls on the four vertical faces.
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub wall_height: f64,
    /// Render the floor and walls.
    pub render: bool,
}

impl BinSpec {
    pub fn new(min: Vec3<f64>, max: Vec3<f64>, wall_height: f64) -> Self {
        Self { min: min.to_array(), max: max.to_array(), wall_height, render: true }
    }

    /// 300 × 300 mm floor, 50 mm walls, 200 mm headroom.
    pub fn standard() -> Self {
        Self::new(Vec3::new(-0.15, -0.15, 0.0), Vec3::new(0.15, 0.15, 0.2), 0.05)
    }

    pub fn aabb(&self) -> Aabb<f64> {
        Aabb { min: Vec3::from_array(self.min), max: Vec3::from_array(self.max) }
    }

    pub fn mesh(&self) -> Mesh {
        let (lo, hi) = (Vec3::from_array(self.min), Vec3::from_array(self.max));
        let top = lo.z + self.wall_height;
        let quad = |a: Vec3<f64>, b: Vec3<f64>, c: Vec3<f64>, d: Vec3<f64>| Mesh { vertices: vec![a, b, c, d], faces: vec![[0, 1, 2], [0, 2, 3]] };
        let v = |x, y, z| Vec3::new(x, y, z);
        let mut m = quad(v(lo.x, lo.y, lo.z), v(hi.x, lo.y, lo.z), v(hi.x, hi.y, lo.z), v(lo.x, hi.y, lo.z));
        m.append(&quad(v(lo.x, lo.y, lo.z), v(lo.x, lo.y, top), v(hi.x, lo.y, top), v(hi.x, lo.y, lo.z)));
        m.append(&quad(v(lo.x, hi.y, lo.z), v(hi.x, hi.y, lo.z), v(hi.x, hi.y, top), v(lo.x, hi.y, top)));
        m.append(&quad(v(lo.x, lo.y, lo.z), v(lo.x, hi.y, lo.z), v(lo.x, hi.y, top), v(lo.x, lo.y, top)));
        m.append(&quad(v(hi.x, lo.y, lo.z), v(hi.x, lo.y, top), v(hi.x, hi.y, top), v(hi.x, hi.y, lo.z)));
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Additive Gaussian depth noise (m).
    pub sigma: f64,
    /// Fraction of valid pixels set to 0.
    pub dropout: f64,
}

impl NoiseParams {
    pub fn none() -> Self {
        Self { sigma: 0.0, dropout: 0.0 }
    }
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self { sigma: 0.001, dropout: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class_id: u32,
    pub name: String,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl Instance {
    pub fn pose(&self) -> Rigid<f64> {
        Rigid::new(Mat3::from_row_major(&self.rotation), Vec3::from_array(self.translation))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub bin: BinSpec,
    pub instances: Vec<Instance>,
    pub cameras: Vec<CameraRecord>,
    pub noise: NoiseParams,
    /// Meters per raw 16-bit depth unit.
    pub depth_scale: f64,
}

impl SceneSpec {
    pub fn cameras(&self) -> Result<Vec<Camera<f64>>> {
        self.cameras.iter().map(CameraRecord::to_camera).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraRig {
    pub views: usize,
    /// Total azimuth arc spanned by the views (radians).
    pub arc: f64,
    /// Elevation above the floor plane (radians).
    pub elevation: f64,
    pub distance: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
}

impl Default for CameraRig {
    /// Three views on a 60° arc, 55° elevation, 0.6 m from the bin center.
    fn default() -> Self {
        Self { views: 3, arc: PI / 3.0, elevation: 55f64.to_radians(), distance: 0.6, width: 640, height: 480, focal: 600.0 }
    }
}

pub fn rig_cameras(bin: &BinSpec, rig: &CameraRig) -> Result<Vec<Camera<f64>>> {
    let lo = Vec3::from_array(bin.min);
    let hi = Vec3::from_array(bin.max);
    let target = Vec3::new((lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0, lo.z);
    let intr = CameraIntrinsics::new(rig.focal, rig.focal, (rig.width as f64 - 1.0) / 2.0, (rig.height as f64 - 1.0) / 2.0, rig.width, rig.height)?;
    (0..rig.views)
        .map(|i| {
            let az = if rig.views == 1 { -PI / 2.0 } else { -PI / 2.0 - rig.arc / 2.0 + rig.arc * i as f64 / (rig.views - 1) as f64 };
            let dir = Vec3::new(rig.elevation.cos() * az.cos(), rig.elevation.cos() * az.sin(), rig.elevation.sin());
            let ext = CameraExtrinsics::look_at(target + dir.scale(rig.distance), target, Vec3::new(0.0, 0.0, 1.0))?;
            Ok(Camera::new(intr, ext))
        })
        .collect()
}

/// Rejection-samples resting poses on the bin floor, pairwise AABB gap ≥ 1 mm.
pub fn sample_scene(library: &[ObjectModel], bin: &BinSpec, n_objects: usize, seed: u64, rig: &CameraRig) -> Result<SceneSpec> {
    if n_objects == 0 {
        return Err(Error::InvalidInput("scenes need at least one object".into()));
    }
    if library.is_empty() {
        return Err(Error::InvalidInput("empty model library".into()));
    }
    const MAX_TRIALS: usize = 10_000;
    const MIN_GAP: f64 = 0.001;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = Vec3::from_array(bin.min);
    let hi = Vec3::from_array(bin.max);
    let mut placed: Vec<(Instance, Aabb<f64>)> = Vec::new();
    let mut trials = 0;
    while placed.len() < n_objects {
        let model = &library[(placed.len() + rng.random_range(0..library.len())) % library.len()];
        let rest = model.resting[rng.random_range(0..model.resting.len())];
        let yaw = rng.random::<f64>() * 2.0 * PI;
        let rot = Mat3::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), yaw).mul_mat(&rest);
        let local = model.mesh.transformed(&Rigid::new(rot, Vec3::zero())).aabb();
        let ext = local.extent();
        let x0 = lo.x - local.min.x;
        let x1 = hi.x - local.max.x;
        let y0 = lo.y - local.min.y;
        let y1 = hi.y - local.max.y;
        let ok_fit = x1 > x0 && y1 > y0 && ext.z <= hi.z - lo.z;
        loop {
            trials += 1;
            if trials > MAX_TRIALS {
                return Err(Error::SamplingFailed(MAX_TRIALS));
            }
            if !ok_fit {
                break;
            }
            let t = Vec3::new(rng.random_range(x0..x1), rng.random_range(y0..y1), lo.z - local.min.z);
            let world = Aabb { min: local.min + t, max: local.max + t };
            if placed.iter().all(|(_, b)| b.gap(&world) >= MIN_GAP) {
                let inst = Instance { class_id: model.class_id, name: model.name.clone(), rotation: rot.to_row_major(), translation: t.to_array() };
                placed.push((inst, world));
                break;
            }
            // retry with a new orientation every few positions
            if trials % 8 == 0 {
                break;
            }
        }
    }
    let cameras = rig_cameras(bin, rig)?.iter().map(CameraRecord::from_camera).collect();
    Ok(SceneSpec {
        seed,
        bin: bin.clone(),
        instances: placed.into_iter().map(|(i, _)| i).collect(),
        cameras,
        noise: NoiseParams::default(),
        depth_scale: 1e-4,
    })
}

/// World-frame triangles of every instance (and the bin when enabled).
pub fn scene_triangles(scene: &SceneSpec, library: &[ObjectModel]) -> Result<Vec<[Vec3<f64>; 3]>> {
    let mut tris = Vec::new();
    for inst in &scene.instances {
        let model = find_model(library, inst.class_id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown class id {}", inst.class_id)))?;
        let m = model.mesh.transformed(&inst.pose());
        tris.extend((0..m.faces.len()).map(|f| m.triangle(f)));
    }
    if scene.bin.render {
        let m = scene.bin.mesh();
        tris.extend((0..m.faces.len()).map(|f| m.triangle(f)));
    }
    Ok(tris)
}

/// Z-buffer rendering of world triangles; depth at each pixel center is the exact
/// ray–plane intersection with the closest covering triangle.
pub fn rasterize(triangles: &[[Vec3<f64>; 3]], cam: &Camera<f64>) -> DepthImage<f64> {
    let intr = &cam.intrinsics;
    let (w, h) = (intr.width, intr.height);
    let mut zbuf = vec![f64::INFINITY; w * h];
    let to_cam = cam.extrinsics.world_to_camera();
    for tri in triangles {
        let c = [to_cam.apply(tri[0]), to_cam.apply(tri[1]), to_cam.apply(tri[2])];
        if c.iter().any(|p| p.z <= 1e-6) {
            continue;
        }
        let n = (c[1] - c[0]).cross(c[2] - c[0]);
        let nd = n.dot(c[0]);
        if nd.abs() < 1e-18 {
            continue;
        }
        let px: Vec<(f64, f64)> = c.iter().map(|&p| intr.pixel_of(p)).collect();
        let umin = px.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let umax = px.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).floor().min(w as f64 - 1.0);
        let vmin = px.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let vmax = px.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).floor().min(h as f64 - 1.0);
        if umin > umax || vmin > vmax {
            continue;
        }
        let area = edge(px[0], px[1], px[2]);
        if area == 0.0 {
            continue;
        }
        for v in vmin as usize..=vmax as usize {
            for u in umin as usize..=umax as usize {
                let p = (u as f64, v as f64);
                let (w0, w1, w2) = (edge(px[1], px[2], p), edge(px[2], px[0], p), edge(px[0], px[1], p));
                let inside = if area > 0.0 { w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0 } else { w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0 };
                if !inside {
                    continue;
                }
                let dir = intr.unproject(p.0, p.1);
                let z = nd / n.dot(dir);
                if z > 0.0 && z < zbuf[v * w + u] {
                    zbuf[v * w + u] = z;
                }
            }
        }
    }
    let values = zbuf.into_iter().map(|z| if z.is_finite() { z } else { 0.0 }).collect();
    DepthImage::new(w, h, values).expect("rasterized depth is finite and non-negative")
}

#[inline]
fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Adds Gaussian noise and pixel dropout; deterministic per seed.
pub fn apply_noise(depth: &DepthImage<f64>, noise: &NoiseParams, seed: u64) -> DepthImage<f64> {
    if noise.sigma == 0.0 && noise.dropout == 0.0 {
        return depth.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.sigma.max(0.0)).expect("valid sigma");
    let values = depth
        .values()
        .iter()
        .map(|&d| {
            let drop = rng.random::<f64>() < noise.dropout;
            let n = normal.sample(&mut rng);
            if d <= 0.0 || drop {
                0.0
            } else {
                (d + n).max(0.0)
            }
        })
        .collect();
    DepthImage::new(depth.width(), depth.height(), values).expect("noisy depth stays valid")
}

/// Renders every camera of the scene (parallel per view), noise included.
pub fn render_scene(scene: &SceneSpec, library: &[ObjectModel]) -> Result<Vec<DepthImage<f64>>> {
    let tris = scene_triangles(scene, library)?;
    let cams = scene.cameras()?;
    Ok(cams
        .par_iter()
        .enumerate()
        .map(|(i, cam)| apply_noise(&rasterize(&tris, cam), &scene.noise, scene.seed.wrapping_mul(1000).wrapping_add(i as u64)))
        .collect())
}

pub fn render_depth(scene: &SceneSpec, library: &[ObjectModel], cam: &Camera<f64>, view_seed: u64) -> Result<DepthImage<f64>> {
    let tris = scene_triangles(scene, library)?;
    Ok(apply_noise(&rasterize(&tris, cam), &scene.noise, view_seed))
}

pub fn ground_truth(scene: &SceneSpec, library: &[ObjectModel]) -> Result<SceneGroundTruth<f64>> {
    let objects = scene
        .instances
        .iter()
        .map(|inst| {
            let model = find_model(library, inst.class_id)
                .ok_or_else(|| Error::InvalidInput(format!("unknown class id {}", inst.class_id)))?;
            let pose = inst.pose();
            Ok(GtObject {
                class_id: inst.class_id,
                pose,
                // canonical frames are centered on the model centroid
                centroid: pose.translation,
                cloud: model.cloud.iter().map(|&p| pose.apply(p)).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneGroundTruth { objects })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub object_id: usize,
    #[serde(flatten)]
    pub pose: PoseRecord,
    pub centroid: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub scene: SceneSpec,
    pub cameras: Vec<Camera<f64>>,
    pub depths: Vec<DepthImage<f64>>,
    pub library: Vec<ObjectModel>,
    pub gt: SceneGroundTruth<f64>,
}

pub fn write_bundle(dir: impl AsRef<Path>, scene: &SceneSpec, library: &[ObjectModel], depths: &[DepthImage<f64>]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("models"))?;
    fs::write(dir.join("scene.json"), serde_json::to_string_pretty(scene)?)?;
    for (i, (rec, d)) in scene.cameras.iter().zip(depths).enumerate() {
        fs::write(dir.join(format!("cam_{i:02}.json")), serde_json::to_string_pretty(rec)?)?;
        save_depth_png(d, dir.join(format!("depth_{i:02}.png")), scene.depth_scale)?;
    }
    let gt = ground_truth(scene, library)?;
    let records: Vec<GtRecord> = gt
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| GtRecord { object_id: i, pose: PoseRecord::new(o.class_id, &o.pose), centroid: o.centroid.to_array() })
        .collect();
    fs::write(dir.join("gt.json"), serde_json::to_string_pretty(&records)?)?;
    for m in library {
        ply::write_mesh(dir.join("models").join(format!("{}.ply", m.name)), &m.mesh.vertices, &m.mesh.faces)?;
    }
    Ok(())
}

/// Loads a bundle. Models are rebuilt from the primitive library by class id;
/// the PLY meshes are checked against it.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<SceneBundle> {
    let dir = dir.as_ref();
    let scene: SceneSpec = serde_json::from_str(&fs::read_to_string(dir.join("scene.json"))?)?;
    let cameras = scene.cameras()?;
    let depths = (0..cameras.len())
        .map(|i| load_depth_png(dir.join(format!("depth_{i:02}.png")), scene.depth_scale))
        .collect::<Result<Vec<_>>>()?;
    for (d, c) in depths.iter().zip(&cameras) {
        if d.width() != c.intrinsics.width || d.height() != c.intrinsics.height {
            return Err(Error::DimensionMismatch("depth PNG does not match its camera".into()));
        }
    }
    let library = make_primitives();
    for m in &library {
        let path = dir.join("models").join(format!("{}.ply", m.name));
        if path.exists() {
            let data = ply::read(&path)?;
            let same = data.vertices.len() == m.mesh.vertices.len()
                && data.vertices.iter().zip(&m.mesh.vertices).all(|(a, b)| (*a - *b).norm() < 1e-6);
            if !same {
                return Err(Error::Malformed { path: path.display().to_string(), reason: "mesh differs from the primitive library".into() });
            }
        }
    }
    let records: Vec<GtRecord> = serde_json::from_str(&fs::read_to_string(dir.join("gt.json"))?)?;
    let objects = records
        .iter()
        .map(|r| {
            let model = find_model(&library, r.pose.class_id)
                .ok_or_else(|| Error::InvalidInput(format!("unknown class id {}", r.pose.class_id)))?;
            let pose = r.pose.pose();
            Ok(GtObject {
                class_id: r.pose.class_id,
                pose,
                centroid: Vec3::from_array(r.centroid),
                cloud: model.cloud.iter().map(|&p| pose.apply(p)).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneBundle { scene, cameras, depths, library, gt: SceneGroundTruth { objects } })
}
