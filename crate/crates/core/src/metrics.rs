//! Pose error metrics: ADD, ADD-S, AUC, and the symmetry-aware MSSD / MSPD.

use serde::{Deserialize, Serialize};

use crate::camera::{project, Camera};
use crate::error::{Error, Result};
use crate::linalg::{Mat3, Rigid, Vec3};
use crate::scalar::{pairwise_sum, Real};
use crate::spatial::KdTree;

fn nonempty<T>(points: &[T]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::InvalidInput("metric needs a nonempty model".into()));
    }
    Ok(())
}

/// Mean distance between corresponding model points under both poses.
pub fn add<T: Real>(est: &Rigid<T>, gt: &Rigid<T>, points: &[Vec3<T>]) -> Result<T> {
    nonempty(points)?;
    let d: Vec<T> = points.iter().map(|&p| (est.apply(p) - gt.apply(p)).norm()).collect();
    Ok(pairwise_sum(&d) / T::from_usize(d.len()).unwrap())
}

/// Mean distance from each estimated point to the closest ground-truth point.
pub fn add_s<T: Real>(est: &Rigid<T>, gt: &Rigid<T>, points: &[Vec3<T>]) -> Result<T> {
    nonempty(points)?;
    let target: Vec<Vec3<T>> = points.iter().map(|&p| gt.apply(p)).collect();
    let tree = KdTree::new(&target);
    let d: Vec<T> = points.iter().map(|&p| tree.nearest(est.apply(p)).unwrap().1.sqrt()).collect();
    Ok(pairwise_sum(&d) / T::from_usize(d.len()).unwrap())
}

pub const AUC_STEPS: usize = 100;

/// Area under the accuracy–threshold curve over `(0, max_thresh]`,
/// sampled at 100 thresholds `k·max/100` (an error counts when strictly below).
pub fn auc<T: Real>(errors: &[T], max_thresh: T) -> T {
    if errors.is_empty() {
        return T::zero();
    }
    let n = T::from_usize(errors.len()).unwrap();
    let steps = T::from_usize(AUC_STEPS).unwrap();
    let acc: Vec<T> = (1..=AUC_STEPS)
        .map(|k| {
            let thr = max_thresh * T::from_usize(k).unwrap() / steps;
            T::from_usize(errors.iter().filter(|&&e| e < thr).count()).unwrap() / n
        })
        .collect();
    pairwise_sum(&acc) / steps
}

/// Max vertex distance between `est` and `gt ∘ s`, minimized over symmetries `s`.
pub fn mssd<T: Real>(est: &Rigid<T>, gt: &Rigid<T>, vertices: &[Vec3<T>], symmetries: &[Mat3<T>]) -> Result<T> {
    symmetric_min_max(vertices, symmetries, |v, sv| (est.apply(v) - gt.apply(sv)).norm())
}

/// As [`mssd`] with distances measured in pixels after projection.
pub fn mspd<T: Real>(est: &Rigid<T>, gt: &Rigid<T>, vertices: &[Vec3<T>], symmetries: &[Mat3<T>], camera: &Camera<T>) -> Result<T> {
    let px = |p: Vec3<T>| project(p, &camera.intrinsics, &camera.extrinsics).pixel;
    symmetric_min_max(vertices, symmetries, |v, sv| {
        let (a, b) = (px(est.apply(v)), px(gt.apply(sv)));
        ((a.0 - b.0) * (a.0 - b.0) + (a.1 - b.1) * (a.1 - b.1)).sqrt()
    })
}

fn symmetric_min_max<T: Real>(vertices: &[Vec3<T>], symmetries: &[Mat3<T>], dist: impl Fn(Vec3<T>, Vec3<T>) -> T) -> Result<T> {
    nonempty(vertices)?;
    if symmetries.is_empty() {
        return Err(Error::InvalidInput("symmetry set must contain at least the identity".into()));
    }
    Ok(symmetries
        .iter()
        .map(|s| vertices.iter().map(|&v| dist(v, s.mul_vec(v))).fold(T::zero(), T::max))
        .fold(T::infinity(), T::min))
}

/// Fraction of errors strictly below `threshold`.
pub fn recall<T: Real>(errors: &[T], threshold: T) -> T {
    if errors.is_empty() {
        return T::zero();
    }
    T::from_usize(errors.iter().filter(|&&e| e < threshold).count()).unwrap() / T::from_usize(errors.len()).unwrap()
}

/// Mean recall over a threshold grid.
pub fn average_recall<T: Real>(errors: &[T], thresholds: &[T]) -> T {
    if thresholds.is_empty() {
        return T::zero();
    }
    let r: Vec<T> = thresholds.iter().map(|&t| recall(errors, t)).collect();
    pairwise_sum(&r) / T::from_usize(r.len()).unwrap()
}

/// 0.05, 0.10, …, 0.50 of the object diameter.
pub fn diameter_thresholds<T: Real>(diameter: T) -> Vec<T> {
    (1..=10).map(|k| diameter * T::lit(0.05 * k as f64)).collect()
}

/// 5, 10, …, 50 px scaled by `width / 640`.
pub fn pixel_thresholds<T: Real>(image_width: usize) -> Vec<T> {
    let s = image_width as f64 / 640.0;
    (1..=10).map(|k| T::lit(5.0 * k as f64 * s)).collect()
}

/// 5, 10, …, 50 mm (in meters).
pub fn millimeter_thresholds<T: Real>() -> Vec<T> {
    (1..=10).map(|k| T::lit(0.005 * k as f64)).collect()
}

/// What the evaluator needs to know about one object class.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInfo<T> {
    pub class_id: u32,
    /// Sampled surface cloud used for ADD / ADD-S.
    pub points: Vec<Vec3<T>>,
    /// Mesh vertices used for MSSD / MSPD.
    pub vertices: Vec<Vec3<T>>,
    pub symmetries: Vec<Mat3<T>>,
    pub diameter: T,
}

/// One-to-one greedy matching of estimates to ground truth of the same class,
/// closest translations first. Returns the matched estimate per GT object.
pub fn match_poses<T: Real>(estimates: &[(u32, Rigid<T>)], gt: &[(u32, Rigid<T>)]) -> Vec<Option<usize>> {
    let mut pairs: Vec<(T, usize, usize)> = Vec::new();
    for (g, (gc, gp)) in gt.iter().enumerate() {
        for (e, (ec, ep)) in estimates.iter().enumerate() {
            if gc == ec {
                pairs.push(((gp.translation - ep.translation).norm(), g, e));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; gt.len()];
    let mut used = vec![false; estimates.len()];
    for (_, g, e) in pairs {
        if out[g].is_none() && !used[e] {
            out[g] = Some(e);
            used[e] = true;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub object_id: usize,
    pub class_id: u32,
    pub matched: Option<usize>,
    /// Translation error (m).
    pub te: f64,
    /// Rotation error (degrees).
    pub re_deg: f64,
    pub add: f64,
    pub add_s: f64,
    pub mssd: f64,
    pub mspd: f64,
    pub diameter: f64,
}

/// Per-object errors; unmatched objects get infinite errors.
pub fn evaluate_scene<T: Real>(
    estimates: &[(u32, Rigid<T>)],
    gt: &[(u32, Rigid<T>)],
    models: &[ModelInfo<T>],
    camera: &Camera<T>,
) -> Result<Vec<ObjectMetrics>> {
    let matches = match_poses(estimates, gt);
    gt.iter()
        .zip(matches)
        .enumerate()
        .map(|(i, ((class_id, gp), m))| {
            let model = models
                .iter()
                .find(|mi| mi.class_id == *class_id)
                .ok_or_else(|| Error::InvalidInput(format!("no model for class {class_id}")))?;
            let inf = f64::INFINITY;
            let mut row = ObjectMetrics {
                object_id: i,
                class_id: *class_id,
                matched: m,
                te: inf,
                re_deg: inf,
                add: inf,
                add_s: inf,
                mssd: inf,
                mspd: inf,
                diameter: model.diameter.as_f64(),
            };
            if let Some(e) = m {
                let ep = &estimates[e].1;
                row.te = (ep.translation - gp.translation).norm().as_f64();
                row.re_deg = crate::linalg::rotation_distance(&ep.rotation, &gp.rotation).as_f64().to_degrees();
                row.add = add(ep, gp, &model.points)?.as_f64();
                row.add_s = add_s(ep, gp, &model.points)?.as_f64();
                row.mssd = mssd(ep, gp, &model.vertices, &model.symmetries)?.as_f64();
                row.mspd = mspd(ep, gp, &model.vertices, &model.symmetries, camera)?.as_f64();
            }
            Ok(row)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    /// `None` for the all-classes row.
    pub class_id: Option<u32>,
    pub objects: usize,
    pub add_auc: f64,
    pub add_s_auc: f64,
    pub mssd_ar: f64,
    pub mspd_ar: f64,
    /// Present only when absolute millimeter MSSD thresholds were requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mssd_mm_ar: Option<f64>,
    /// Mean of the MSSD and MSPD average recalls.
    pub ap: f64,
}

pub fn summarize(rows: &[ObjectMetrics], image_width: usize, auc_max: f64, mssd_mm: bool) -> Vec<ClassSummary> {
    let mut classes: Vec<u32> = rows.iter().map(|r| r.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let one = |sel: Vec<&ObjectMetrics>, class_id: Option<u32>| {
        let col = |f: fn(&ObjectMetrics) -> f64| sel.iter().map(|r| f(r)).collect::<Vec<f64>>();
        let mssd_rec: Vec<f64> = sel.iter().map(|r| average_recall(&[r.mssd], &diameter_thresholds(r.diameter))).collect();
        let mssd_ar = mean(&mssd_rec);
        let mspd_ar = average_recall(&col(|r| r.mspd), &pixel_thresholds::<f64>(image_width));
        ClassSummary {
            class_id,
            objects: sel.len(),
            add_auc: auc(&col(|r| r.add), auc_max),
            add_s_auc: auc(&col(|r| r.add_s), auc_max),
            mssd_ar,
            mspd_ar,
            mssd_mm_ar: mssd_mm.then(|| average_recall(&col(|r| r.mssd), &millimeter_thresholds::<f64>())),
            ap: 0.5 * (mssd_ar + mspd_ar),
        }
    };
    let mut out: Vec<ClassSummary> = classes.iter().map(|&c| one(rows.iter().filter(|r| r.class_id == c).collect(), Some(c))).collect();
    out.push(one(rows.iter().collect(), None));
    out
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        pairwise_sum(v) / v.len() as f64
    }
}

pub const METRICS_CSV_HEADER: &str = "object_id,class,matched,te_m,re_deg,add_m,add_s_m,mssd_m,mspd_px";

pub fn metrics_csv(rows: &[ObjectMetrics]) -> String {
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let m = r.matched.map_or(String::from("-"), |e| e.to_string());
        s.push_str(&format!("{},{},{},{:?},{:?},{:?},{:?},{:?},{:?}\n", r.object_id, r.class_id, m, r.te, r.re_deg, r.add, r.add_s, r.mssd, r.mspd));
    }
    s
}
