//! Small fixed-size linear algebra: 3-vectors, 3×3 matrices, rigid transforms.

use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    #[inline]
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    #[inline]
    pub fn splat(v: T) -> Self {
        Self::new(v, v, v)
    }

    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn cast<U: Real>(self) -> Vec3<U> {
        Vec3::new(U::lit(self.x.as_f64()), U::lit(self.y.as_f64()), U::lit(self.z.as_f64()))
    }

    #[inline]
    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm_squared(self) -> T {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> T {
        self.norm_squared().sqrt()
    }

    #[inline]
    pub fn scale(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn component_mul(self, o: Self) -> Self {
        Self::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    pub fn min(self, o: Self) -> Self {
        Self::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Self) -> Self {
        Self::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Integer cell containing the point for a grid of spacing `cell` anchored at `origin`.
    /// Lower faces are inclusive.
    pub fn cell_index(self, origin: Self, cell: T) -> [i32; 3] {
        let d = self - origin;
        [floor_i32(d.x / cell), floor_i32(d.y / cell), floor_i32(d.z / cell)]
    }
}

#[inline]
fn floor_i32<T: Real>(q: T) -> i32 {
    let f = q.floor();
    f.to_i32().unwrap_or(if f > T::zero() { i32::MAX } else { i32::MIN })
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> AddAssign for Vec3<T> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> SubAssign for Vec3<T> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    #[inline]
    fn mul(self, s: T) -> Self {
        self.scale(s)
    }
}

impl<T: Real> Index<usize> for Vec3<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

/// Row-major 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat3<T> {
    pub m: [[T; 3]; 3],
}

impl<T: Real> Default for Mat3<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Mat3<T> {
    pub fn new(m: [[T; 3]; 3]) -> Self {
        Self { m }
    }

    pub fn zeros() -> Self {
        Self { m: [[T::zero(); 3]; 3] }
    }

    pub fn identity() -> Self {
        let mut m = Self::zeros();
        for i in 0..3 {
            m.m[i][i] = T::one();
        }
        m
    }

    pub fn from_cols(c0: Vec3<T>, c1: Vec3<T>, c2: Vec3<T>) -> Self {
        Self::new([[c0.x, c1.x, c2.x], [c0.y, c1.y, c2.y], [c0.z, c1.z, c2.z]])
    }

    pub fn from_row_major(v: &[T]) -> Self {
        assert!(v.len() >= 9);
        Self::new([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }

    pub fn to_row_major(&self) -> [T; 9] {
        let m = &self.m;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]]
    }

    pub fn col(&self, j: usize) -> Vec3<T> {
        Vec3::new(self.m[0][j], self.m[1][j], self.m[2][j])
    }

    pub fn row(&self, i: usize) -> Vec3<T> {
        Vec3::new(self.m[i][0], self.m[i][1], self.m[i][2])
    }

    pub fn cast<U: Real>(&self) -> Mat3<U> {
        let mut out = Mat3::<U>::zeros();
        for i in 0..3 {
            for j in 0..3 {
                out.m[i][j] = U::lit(self.m[i][j].as_f64());
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros();
        for i in 0..3 {
            for j in 0..3 {
                t.m[i][j] = self.m[j][i];
            }
        }
        t
    }

    pub fn det(&self) -> T {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn trace(&self) -> T {
        self.m[0][0] + self.m[1][1] + self.m[2][2]
    }

    pub fn mul_vec(&self, v: Vec3<T>) -> Vec3<T> {
        Vec3::new(self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v))
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let mut r = Self::zeros();
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] = self.m[i][0] * o.m[0][j] + self.m[i][1] * o.m[1][j] + self.m[i][2] * o.m[2][j];
            }
        }
        r
    }

    pub fn add_mat(&self, o: &Self) -> Self {
        let mut r = *self;
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] = r.m[i][j] + o.m[i][j];
            }
        }
        r
    }

    pub fn scale(&self, s: T) -> Self {
        let mut r = *self;
        for row in r.m.iter_mut() {
            for v in row.iter_mut() {
                *v = *v * s;
            }
        }
        r
    }

    pub fn frobenius_distance_squared(&self, o: &Self) -> T {
        let mut acc = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                let d = self.m[i][j] - o.m[i][j];
                acc = acc + d * d;
            }
        }
        acc
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3<T>, angle: T) -> Self {
        let n = axis.norm();
        if n == T::zero() {
            return Self::identity();
        }
        let k = axis.scale(T::one() / n);
        let (s, c) = angle.sin_cos();
        let v = T::one() - c;
        Self::new([
            [c + k.x * k.x * v, k.x * k.y * v - k.z * s, k.x * k.z * v + k.y * s],
            [k.y * k.x * v + k.z * s, c + k.y * k.y * v, k.y * k.z * v - k.x * s],
            [k.z * k.x * v - k.y * s, k.z * k.y * v + k.x * s, c + k.z * k.z * v],
        ])
    }

    /// Geodesic angle of a rotation matrix, radians in [0, π].
    pub fn rotation_angle(&self) -> T {
        let m = &self.m;
        let two = T::lit(2.0);
        let c = (self.trace() - T::one()) / two;
        let s = Vec3::new(m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]).norm() / two;
        s.atan2(c)
    }

    /// Checks RᵀR = I and det R = +1 within `tol`.
    pub fn is_rotation(&self, tol: T) -> bool {
        let rtr = self.transpose().mul_mat(self);
        rtr.frobenius_distance_squared(&Self::identity()).sqrt() <= tol * T::lit(3.0)
            && (self.det() - T::one()).abs() <= tol
            && self.m.iter().flatten().all(|v| v.is_finite())
    }
}

/// Angle between two rotations, radians.
pub fn rotation_distance<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> T {
    a.transpose().mul_mat(b).rotation_angle()
}

/// Rigid transform x ↦ R·x + t.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rigid<T> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> Default for Rigid<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Rigid<T> {
    pub fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Mat3::identity(), Vec3::zero())
    }

    #[inline]
    pub fn apply(&self, p: Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -rt.mul_vec(self.translation))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self::new(self.rotation.mul_mat(&other.rotation), self.apply(other.translation))
    }

    pub fn cast<U: Real>(&self) -> Rigid<U> {
        Rigid::new(self.rotation.cast(), self.translation.cast())
    }

    /// Row-major 4×4 homogeneous matrix.
    pub fn to_matrix4(&self) -> [T; 16] {
        let r = &self.rotation.m;
        let t = self.translation;
        let (z, o) = (T::zero(), T::one());
        [
            r[0][0], r[0][1], r[0][2], t.x, r[1][0], r[1][1], r[1][2], t.y, r[2][0], r[2][1], r[2][2], t.z, z, z,
            z, o,
        ]
    }

    pub fn from_matrix4(m: &[T]) -> Self {
        assert!(m.len() >= 12);
        Self::new(
            Mat3::new([[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]]),
            Vec3::new(m[3], m[7], m[11]),
        )
    }
}

/// Eigen-decomposition of a symmetric 4×4 matrix by cyclic Jacobi sweeps.
/// Returns (eigenvalues, eigenvectors as columns).
pub fn symmetric_eigen4<T: Real>(a: [[T; 4]; 4]) -> ([T; 4], [[T; 4]; 4]) {
    let mut a = a;
    let mut v = [[T::zero(); 4]; 4];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = T::one();
    }
    for _sweep in 0..64 {
        let mut off = T::zero();
        for i in 0..4 {
            for j in (i + 1)..4 {
                off = off + a[i][j] * a[i][j];
            }
        }
        let scale: T = (0..4).map(|i| a[i][i] * a[i][i]).sum::<T>() + off;
        if off <= T::epsilon() * T::epsilon() * scale.max(T::min_positive_value()) {
            break;
        }
        for p in 0..4 {
            for q in (p + 1)..4 {
                if a[p][q] == T::zero() {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (T::lit(2.0) * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..4 {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..4 {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ([a[0][0], a[1][1], a[2][2], a[3][3]], v)
}

/// Rotation matrix of a (not necessarily unit) quaternion (w, x, y, z).
pub fn quaternion_to_matrix<T: Real>(q: [T; 4]) -> Mat3<T> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let two = T::lit(2.0);
    let one = T::one();
    Mat3::new([
        [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
    ])
}

/// The rotation R maximizing tr(Rᵀ·M), i.e. the orthogonal polar factor of M
/// with the determinant forced to +1. Solved through the quaternion
/// eigenproblem, which yields a proper rotation directly.
pub fn nearest_rotation<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    // S_ab = Σ p_a q_b with tr(Rᵀ M) = Σ qᵀ R p  ⇒  S = Mᵀ.
    let s = m.transpose().m;
    let (sxx, sxy, sxz) = (s[0][0], s[0][1], s[0][2]);
    let (syx, syy, syz) = (s[1][0], s[1][1], s[1][2]);
    let (szx, szy, szz) = (s[2][0], s[2][1], s[2][2]);
    let n = [
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ];
    let (vals, vecs) = symmetric_eigen4(n);
    let mut best = 0;
    for i in 1..4 {
        if vals[i] > vals[best] {
            best = i;
        }
    }
    quaternion_to_matrix([vecs[0][best], vecs[1][best], vecs[2][best], vecs[3][best]])
}

/// Least-squares rigid transform mapping `src[i]` onto `dst[i]`.
pub fn fit_rigid<T: Real>(src: &[Vec3<T>], dst: &[Vec3<T>]) -> Option<Rigid<T>> {
    if src.len() != dst.len() || src.len() < 3 {
        return None;
    }
    let n = T::from_usize(src.len())?;
    let cs = src.iter().fold(Vec3::zero(), |a, &p| a + p).scale(T::one() / n);
    let cd = dst.iter().fold(Vec3::zero(), |a, &p| a + p).scale(T::one() / n);
    // M = Σ q pᵀ, maximize tr(Rᵀ M).
    let mut m = Mat3::<T>::zeros();
    for (&p, &q) in src.iter().zip(dst) {
        let p = p - cs;
        let q = q - cd;
        for i in 0..3 {
            for j in 0..3 {
                m.m[i][j] = m.m[i][j] + q[i] * p[j];
            }
        }
    }
    let r = nearest_rotation(&m);
    Some(Rigid::new(r, cd - r.mul_vec(cs)))
}
