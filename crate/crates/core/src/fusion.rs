//! Multi-view fusion of depth maps into a single world-frame point cloud.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{backproject, Camera, DepthImage, DepthRange};
use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::scalar::Real;

/// Axis-aligned box, inclusive on both faces.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb<T> {
    pub min: Vec3<T>,
    pub max: Vec3<T>,
}

impl<T: Real> Aabb<T> {
    pub fn new(min: Vec3<T>, max: Vec3<T>) -> Result<Self> {
        if !(min.x <= max.x && min.y <= max.y && min.z <= max.z) {
            return Err(Error::InvalidInput(format!("box min {min:?} exceeds max {max:?}")));
        }
        Ok(Self { min, max })
    }

    /// Smallest box containing every point (`None` for an empty set).
    pub fn from_points(points: &[Vec3<T>]) -> Option<Self> {
        let first = *points.first()?;
        let (min, max) = points.iter().fold((first, first), |(lo, hi), &p| (lo.min(p), hi.max(p)));
        Some(Self { min, max })
    }

    #[inline]
    pub fn contains(&self, p: Vec3<T>) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y && p.z >= self.min.z && p.z <= self.max.z
    }

    pub fn extent(&self) -> Vec3<T> {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3<T> {
        (self.min + self.max).scale(T::lit(0.5))
    }

    /// Signed gap to another box along the axis of largest separation; negative when they overlap.
    pub fn gap(&self, other: &Self) -> T {
        let gx = (other.min.x - self.max.x).max(self.min.x - other.max.x);
        let gy = (other.min.y - self.max.y).max(self.min.y - other.max.y);
        let gz = (other.min.z - self.max.z).max(self.min.z - other.max.z);
        gx.max(gy).max(gz)
    }

    pub fn cast<U: Real>(&self) -> Aabb<U> {
        Aabb { min: self.min.cast(), max: self.max.cast() }
    }
}

/// Union of per-view back-projections, view-major then row-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FusedPointCloud<T> {
    pub points: Vec<Vec3<T>>,
    pub source_view: Vec<u32>,
}

impl<T: Real> FusedPointCloud<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn fuse_views<T: Real>(
    depths: &[DepthImage<T>],
    cams: &[Camera<T>],
    workspace: &Aabb<T>,
    range: &DepthRange<T>,
) -> Result<FusedPointCloud<T>> {
    if depths.is_empty() || depths.len() != cams.len() {
        return Err(Error::DimensionMismatch(format!("{} depth maps for {} cameras", depths.len(), cams.len())));
    }
    let per_view = depths
        .par_iter()
        .zip(cams.par_iter())
        .map(|(d, c)| {
            backproject(d, &c.intrinsics, &c.extrinsics, range)
                .map(|pts| pts.into_iter().filter(|&p| workspace.contains(p)).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cloud = FusedPointCloud::default();
    for (view, pts) in per_view.into_iter().enumerate() {
        cloud.source_view.extend(std::iter::repeat_n(view as u32, pts.len()));
        cloud.points.extend(pts);
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{CameraExtrinsics, CameraIntrinsics};

    fn cam() -> Camera<f64> {
        Camera::new(CameraIntrinsics::new(100.0, 100.0, 8.0, 6.0, 16, 12).unwrap(), CameraExtrinsics::identity())
    }

    fn big_box() -> Aabb<f64> {
        Aabb::new(Vec3::splat(-10.0), Vec3::splat(10.0)).unwrap()
    }

    #[test]
    fn single_pixel_single_point() {
        let mut v = vec![0.0; 16 * 12];
        v[5] = 1.0;
        let d = DepthImage::new(16, 12, v).unwrap();
        let c = fuse_views(&[d], &[cam()], &big_box(), &DepthRange::default()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.source_view, vec![0]);
    }

    #[test]
    fn identical_views_duplicate_points() {
        let d = DepthImage::new(16, 12, vec![1.0; 16 * 12]).unwrap();
        let one = fuse_views(std::slice::from_ref(&d), &[cam()], &big_box(), &DepthRange::default()).unwrap();
        let two = fuse_views(&[d.clone(), d], &[cam(), cam()], &big_box(), &DepthRange::default()).unwrap();
        assert_eq!(two.len(), 2 * one.len());
        assert_eq!(&two.points[..one.len()], &one.points[..]);
        assert_eq!(&two.points[one.len()..], &one.points[..]);
    }

    #[test]
    fn workspace_crops_and_empty_is_not_error() {
        let d = DepthImage::new(16, 12, vec![1.0; 16 * 12]).unwrap();
        let ws = Aabb::new(Vec3::new(-1.0, -1.0, 2.0), Vec3::new(1.0, 1.0, 3.0)).unwrap();
        let c = fuse_views(&[d], &[cam()], &ws, &DepthRange::default()).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn mismatched_inputs_error() {
        let d = DepthImage::new(16, 12, vec![1.0; 16 * 12]).unwrap();
        assert!(fuse_views(&[d], &[], &big_box(), &DepthRange::default()).is_err());
    }

    #[test]
    fn aabb_gap() {
        let a = Aabb::new(Vec3::zero(), Vec3::splat(1.0)).unwrap();
        let b = Aabb::new(Vec3::new(1.5, 0.0, 0.0), Vec3::new(2.0, 1.0, 1.0)).unwrap();
        assert_eq!(a.gap(&b), 0.5);
        let c = Aabb::new(Vec3::splat(0.5), Vec3::splat(2.0)).unwrap();
        assert!(a.gap(&c) < 0.0);
    }
}
