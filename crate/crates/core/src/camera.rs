//! Pinhole cameras, depth images, and exact back-/forward-projection.
//!
//! Pixel `(u, v)` addresses the pixel center: `u = fx·x/z + cx` with no
//! half-pixel offset, so `project(backproject(ρ, d)) = (ρ, d)` exactly up
//! to rounding.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat3, Rigid, Vec3};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self> {
        let intr = Self { fx, fy, cx, cy, width, height };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(Error::InvalidCamera(format!("focal lengths must be positive, got ({}, {})", self.fx, self.fy)));
        }
        let w = T::from_usize(self.width).unwrap();
        let h = T::from_usize(self.height).unwrap();
        if !(self.cx >= T::zero() && self.cx < w && self.cy >= T::zero() && self.cy < h) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Ray direction through pixel center `(u, v)` with unit z component.
    #[inline]
    pub fn unproject(&self, u: T, v: T) -> Vec3<T> {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, T::one())
    }

    /// Pixel coordinates of a camera-frame point (z must be nonzero).
    #[inline]
    pub fn pixel_of(&self, p: Vec3<T>) -> (T, T) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    pub fn cast<U: Real>(&self) -> CameraIntrinsics<U> {
        CameraIntrinsics {
            fx: U::lit(self.fx.as_f64()),
            fy: U::lit(self.fy.as_f64()),
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            width: self.width,
            height: self.height,
        }
    }
}

/// Camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraExtrinsics<T> {
    pose: Rigid<T>,
    inverse: Rigid<T>,
}

impl<T: Real> CameraExtrinsics<T> {
    pub fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Result<Self> {
        if !rotation.is_rotation(T::geometry_tolerance()) {
            return Err(Error::InvalidCamera("extrinsic rotation is not orthonormal with det +1".into()));
        }
        let pose = Rigid::new(rotation, translation);
        Ok(Self { pose, inverse: pose.inverse() })
    }

    pub fn from_rigid(pose: Rigid<T>) -> Result<Self> {
        Self::new(pose.rotation, pose.translation)
    }

    pub fn identity() -> Self {
        Self { pose: Rigid::identity(), inverse: Rigid::identity() }
    }

    pub fn camera_to_world(&self) -> &Rigid<T> {
        &self.pose
    }

    pub fn world_to_camera(&self) -> &Rigid<T> {
        &self.inverse
    }

    /// Composition `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &Self) -> Result<Self> {
        Self::from_rigid(self.pose.compose(&other.pose))
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3<T> {
        self.pose.translation
    }

    /// Builds a camera at `eye` looking at `target`; image y axis points along -`up`.
    pub fn look_at(eye: Vec3<T>, target: Vec3<T>, up: Vec3<T>) -> Result<Self> {
        let z = target - eye;
        let zn = z.norm();
        if zn == T::zero() {
            return Err(Error::InvalidCamera("eye coincides with target".into()));
        }
        let z = z.scale(T::one() / zn);
        let x = z.cross(up);
        let xn = x.norm();
        if xn < T::lit(1e-9) {
            return Err(Error::InvalidCamera("up vector parallel to viewing direction".into()));
        }
        let x = x.scale(T::one() / xn);
        let y = z.cross(x);
        Self::new(Mat3::from_cols(x, y, z), eye)
    }
}

/// A single camera: intrinsics plus camera-to-world extrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera<T> {
    pub intrinsics: CameraIntrinsics<T>,
    pub extrinsics: CameraExtrinsics<T>,
}

impl<T: Real> Camera<T> {
    pub fn new(intrinsics: CameraIntrinsics<T>, extrinsics: CameraExtrinsics<T>) -> Self {
        Self { intrinsics, extrinsics }
    }
}

/// Valid depth interval; pixels outside are treated as invalid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRange<T> {
    pub near: T,
    pub far: T,
}

impl<T: Real> Default for DepthRange<T> {
    fn default() -> Self {
        Self { near: T::lit(0.05), far: T::lit(5.0) }
    }
}

impl<T: Real> DepthRange<T> {
    #[inline]
    pub fn contains(&self, d: T) -> bool {
        d > T::zero() && d >= self.near && d <= self.far
    }
}

/// Row-major depth map in meters; 0 marks an invalid pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage<T> {
    width: usize,
    height: usize,
    values: Vec<T>,
}

impl<T: Real> DepthImage<T> {
    pub fn new(width: usize, height: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "depth buffer has {} values, expected {}x{}",
                values.len(),
                width,
                height
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < T::zero()) {
            return Err(Error::InvalidInput(format!("depth values must be finite and non-negative, found {bad}")));
        }
        Ok(Self { width, height, values })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![T::zero(); width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> T {
        self.values[v * self.width + u]
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&d| d > T::zero()).count()
    }
}

/// Back-projects every valid pixel into world coordinates, row-major order.
pub fn backproject<T: Real>(
    depth: &DepthImage<T>,
    intr: &CameraIntrinsics<T>,
    extr: &CameraExtrinsics<T>,
    range: &DepthRange<T>,
) -> Result<Vec<Vec3<T>>> {
    if depth.width != intr.width || depth.height != intr.height {
        return Err(Error::DimensionMismatch(format!(
            "depth image {}x{} does not match intrinsics {}x{}",
            depth.width, depth.height, intr.width, intr.height
        )));
    }
    let pose = extr.camera_to_world();
    let mut out = Vec::with_capacity(depth.valid_count());
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.get(u, v);
            if !range.contains(d) {
                continue;
            }
            let ray = intr.unproject(T::from_usize(u).unwrap(), T::from_usize(v).unwrap());
            out.push(pose.apply(ray.scale(d)));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection<T> {
    pub pixel: (T, T),
    /// Camera-frame depth.
    pub depth: T,
    /// False when the point lies on or behind the image plane (z ≤ 0).
    pub in_front: bool,
}

pub fn project<T: Real>(point: Vec3<T>, intr: &CameraIntrinsics<T>, extr: &CameraExtrinsics<T>) -> Projection<T> {
    let pc = extr.world_to_camera().apply(point);
    let in_front = pc.z > T::zero();
    let pixel = if pc.z != T::zero() { intr.pixel_of(pc) } else { (T::nan(), T::nan()) };
    Projection { pixel, depth: pc.z, in_front }
}

/// Loads a 16-bit single-channel PNG; `scale` is meters per raw unit.
pub fn load_depth_png<T: Real>(path: impl AsRef<Path>, scale: T) -> Result<DepthImage<T>> {
    let path = path.as_ref();
    let malformed = |reason: String| Error::Malformed { path: path.display().to_string(), reason };
    let file = File::open(path)?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| malformed(e.to_string()))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Sixteen {
        return Err(malformed(format!("expected 16-bit depth, found {:?}", info.bit_depth)));
    }
    if info.color_type != png::ColorType::Grayscale {
        return Err(malformed(format!("expected single-channel grayscale, found {:?}", info.color_type)));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| malformed("image too large".into()))?];
    let frame = reader.next_frame(&mut buf).map_err(|e| malformed(e.to_string()))?;
    let bytes = &buf[..frame.buffer_size()];
    if bytes.len() != width * height * 2 {
        return Err(malformed("unexpected frame size".into()));
    }
    let values =
        bytes.chunks_exact(2).map(|c| T::from_u16(u16::from_be_bytes([c[0], c[1]])).unwrap() * scale).collect();
    DepthImage::new(width, height, values)
}

/// Writes a 16-bit single-channel PNG; values are rounded to the nearest raw unit.
pub fn save_depth_png<T: Real>(depth: &DepthImage<T>, path: impl AsRef<Path>, scale: T) -> Result<()> {
    let path = path.as_ref();
    let mut raw = Vec::with_capacity(depth.values.len() * 2);
    for &d in &depth.values {
        let units = (d / scale).round();
        if units > T::from_u16(u16::MAX).unwrap() {
            return Err(Error::InvalidInput(format!("depth {d} m exceeds 16-bit range at scale {scale}")));
        }
        raw.extend_from_slice(&units.to_u16().unwrap_or(0).to_be_bytes());
    }
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), depth.width as u32, depth.height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let to_err = |e: png::EncodingError| Error::Malformed { path: path.display().to_string(), reason: e.to_string() };
    let mut writer = encoder.write_header().map_err(to_err)?;
    writer.write_image_data(&raw).map_err(to_err)?;
    writer.finish().map_err(to_err)?;
    Ok(())
}

/// JSON form of one camera: intrinsics and row-major 4×4 camera-to-world matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub intrinsics: CameraIntrinsics<f64>,
    pub extrinsics: Vec<f64>,
}

impl CameraRecord {
    pub fn from_camera(cam: &Camera<f64>) -> Self {
        Self { intrinsics: cam.intrinsics, extrinsics: cam.extrinsics.camera_to_world().to_matrix4().to_vec() }
    }

    pub fn to_camera(&self) -> Result<Camera<f64>> {
        self.intrinsics.validate()?;
        if self.extrinsics.len() != 16 {
            return Err(Error::InvalidCamera(format!("extrinsics must have 16 entries, found {}", self.extrinsics.len())));
        }
        let pose = Rigid::from_matrix4(&self.extrinsics);
        Ok(Camera::new(self.intrinsics, CameraExtrinsics::from_rigid(pose)?))
    }
}
