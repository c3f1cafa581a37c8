//! Pinhole camera model.
//!
//! World points are in millimetres. A camera maps a world point `W` to the
//! camera frame as `R W + t`, projects it (perspective or orthographic) to a
//! normalized image point and applies the intrinsic matrix `K` to obtain
//! pixels. Relative (root-centred) poses are translation free, so moving
//! them from the camera frame back to the world frame only applies `Rᵀ`.

use std::ops::Mul;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub type Vec2<T> = [T; 2];
pub type Vec3<T> = [T; 3];

/// Depth below which perspective division is refused (mm).
pub const Z_EPSILON: f64 = 1e-6;

#[inline]
pub fn add3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale3<T: Real>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm3<T: Real>(a: Vec3<T>) -> T {
    dot3(a, a).sqrt()
}

pub fn normalize3<T: Real>(a: Vec3<T>) -> Vec3<T> {
    scale3(a, T::one() / norm3(a))
}

#[inline]
pub fn is_finite<T: Real, const N: usize>(v: &[T; N]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn check_finite<T: Real, const N: usize>(v: &[T; N], what: &str) -> Result<()> {
    if is_finite(v) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("non-finite {what}")))
    }
}

/// Row-major 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3<T>(pub [[T; 3]; 3]);

impl<T: Real> Mat3<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Mat3([[o, z, z], [z, o, z], [z, z, o]])
    }

    pub fn zeros() -> Self {
        Mat3([[T::zero(); 3]; 3])
    }

    pub fn from_row_major(v: &[T; 9]) -> Self {
        Mat3([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }

    pub fn to_row_major(&self) -> [T; 9] {
        let m = &self.0;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    pub fn from_rows(r0: Vec3<T>, r1: Vec3<T>, r2: Vec3<T>) -> Self {
        Mat3([r0, r1, r2])
    }

    pub fn row(&self, i: usize) -> Vec3<T> {
        self.0[i]
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_vec(&self, v: Vec3<T>) -> Vec3<T> {
        [dot3(self.0[0], v), dot3(self.0[1], v), dot3(self.0[2], v)]
    }

    /// `selfᵀ · v` without materializing the transpose.
    pub fn tr_mul_vec(&self, v: Vec3<T>) -> Vec3<T> {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
            m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
            m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn det(&self) -> T {
        let m = &self.0;
        dot3(m[0], cross3(m[1], m[2]))
    }

    /// Inverse through the adjugate; `None` when the determinant vanishes.
    pub fn inverse(&self) -> Option<Self> {
        let m = &self.0;
        let det = self.det();
        if det == T::zero() || !det.is_finite() {
            return None;
        }
        let c0 = cross3(m[1], m[2]);
        let c1 = cross3(m[2], m[0]);
        let c2 = cross3(m[0], m[1]);
        let inv = T::one() / det;
        // columns of the inverse are the cross products above
        Some(Mat3([
            [c0[0] * inv, c1[0] * inv, c2[0] * inv],
            [c0[1] * inv, c1[1] * inv, c2[1] * inv],
            [c0[2] * inv, c1[2] * inv, c2[2] * inv],
        ]))
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = *self;
        for i in 0..3 {
            for j in 0..3 {
                out.0[i][j] = out.0[i][j] + other.0[i][j];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(is_finite)
    }

    /// Rotation of `angle` radians about the unit `axis` (Rodrigues).
    pub fn rotation(axis: Vec3<T>, angle: T) -> Self {
        let [x, y, z] = normalize3(axis);
        let (s, c) = angle.sin_cos();
        let t = T::one() - c;
        Mat3([
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ])
    }

    /// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
    pub fn symmetric_eigenvalues(&self) -> [T; 3] {
        let mut a = self.0;
        let two = T::lit(2.0);
        for _sweep in 0..50 {
            let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
            let diag = a[0][0].abs() + a[1][1].abs() + a[2][2].abs();
            if off <= T::epsilon() * diag * T::lit(1e-3) || off == T::zero() {
                break;
            }
            for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
                if a[p][q] == T::zero() {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (two * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..3 {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..3 {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
        let mut ev = [a[0][0], a[1][1], a[2][2]];
        ev.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
        ev
    }

    pub fn cast<U: Real>(&self) -> Mat3<U> {
        let mut out = Mat3::<U>::zeros();
        for i in 0..3 {
            for j in 0..3 {
                out.0[i][j] = U::lit(self.0[i][j].as_f64());
            }
        }
        out
    }
}

impl<T: Real> Mul for Mat3<T> {
    type Output = Mat3<T>;

    fn mul(self, rhs: Mat3<T>) -> Mat3<T> {
        let mut out = Mat3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                out.0[i][j] =
                    self.0[i][0] * rhs.0[0][j] + self.0[i][1] * rhs.0[1][j] + self.0[i][2] * rhs.0[2][j];
            }
        }
        out
    }
}

/// Extrinsics and intrinsics of one calibrated view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraParams<T> {
    rotation: Mat3<T>,
    translation: Vec3<T>,
    intrinsics: Mat3<T>,
    id: String,
}

impl<T: Real> CameraParams<T> {
    /// Validates `R` (orthonormal, det 1) and `K` (upper triangular, `K[2][2] = 1`).
    pub fn new(
        id: impl Into<String>,
        rotation: Mat3<T>,
        translation: Vec3<T>,
        intrinsics: Mat3<T>,
    ) -> Result<Self> {
        let id = id.into();
        let bad = |reason: String| Error::InvalidCamera {
            cam_id: id.clone(),
            reason,
        };
        if !rotation.is_finite() || !intrinsics.is_finite() || !is_finite(&translation) {
            return Err(bad("non-finite entry".into()));
        }
        let tol = T::orthonormal_tol();
        let rtr = rotation.transpose() * rotation;
        let eye = Mat3::<T>::identity();
        for i in 0..3 {
            for j in 0..3 {
                let d = (rtr.0[i][j] - eye.0[i][j]).abs();
                if d > tol {
                    return Err(bad(format!("rotation not orthonormal (|RᵀR - I|[{i}][{j}] = {d})")));
                }
            }
        }
        let det = rotation.det();
        if (det - T::one()).abs() > tol {
            return Err(bad(format!("rotation determinant {det} != 1")));
        }
        let k = &intrinsics.0;
        if k[2][2] != T::one() {
            return Err(bad("K[2][2] must be 1".into()));
        }
        if k[1][0] != T::zero() || k[2][0] != T::zero() || k[2][1] != T::zero() {
            return Err(bad("K must be upper triangular".into()));
        }
        Ok(CameraParams {
            rotation,
            translation,
            intrinsics,
            id,
        })
    }

    pub fn rotation(&self) -> &Mat3<T> {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3<T> {
        self.translation
    }

    pub fn intrinsics(&self) -> &Mat3<T> {
        &self.intrinsics
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Camera centre in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vec3<T> {
        scale3(self.rotation.tr_mul_vec(self.translation), -T::one())
    }

    /// 2×2 linear part of the intrinsic map acting on normalized coordinates.
    pub fn pixel_jacobian(&self) -> [[T; 2]; 2] {
        let k = &self.intrinsics.0;
        [[k[0][0], k[0][1]], [T::zero(), k[1][1]]]
    }

    /// Full pixel projection under the given model.
    pub fn project(&self, world: Vec3<T>, projection: Projection) -> Result<Vec2<T>> {
        let cam = world_to_camera(world, self)?;
        let normalized = projection.apply(cam)?;
        Ok(apply_intrinsics(normalized, &self.intrinsics))
    }

    pub fn cast<U: Real>(&self) -> CameraParams<U> {
        CameraParams {
            rotation: self.rotation.cast(),
            translation: self.translation.map(|x| U::lit(x.as_f64())),
            intrinsics: self.intrinsics.cast(),
            id: self.id.clone(),
        }
    }
}

/// Projection model used to map camera-frame points to the image plane.
///
/// `ScaledOrthographic` is the weak-perspective camera: the orthographic
/// projection divided by a reference depth supplied by the caller (the depth
/// of the subject's root joint). It has the pixel scale of the perspective
/// camera but, like the orthographic one, ignores each point's own depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Perspective,
    Orthographic,
    ScaledOrthographic,
}

impl Projection {
    /// Projects `x`; fails for `ScaledOrthographic`, which needs a reference
    /// depth (see [`Projection::apply_about`]).
    pub fn apply<T: Real>(self, x: Vec3<T>) -> Result<Vec2<T>> {
        match self {
            Projection::Perspective => project_perspective(x),
            Projection::Orthographic => project_orthographic(x),
            Projection::ScaledOrthographic => Err(Error::InvalidInput(
                "scaled orthographic projection needs a reference depth".into(),
            )),
        }
    }

    /// 2×3 Jacobian of the projection at `x`; fails like [`Projection::apply`].
    pub fn jacobian<T: Real>(self, x: Vec3<T>) -> Result<[[T; 3]; 2]> {
        self.apply(x)?;
        self.jacobian_about(x, T::one())
    }

    /// Projection and Jacobian at `x`, with `reference_depth` used only by
    /// `ScaledOrthographic`.
    pub fn apply_about<T: Real>(self, x: Vec3<T>, reference_depth: T) -> Result<(Vec2<T>, [[T; 3]; 2])> {
        let p = match self {
            Projection::ScaledOrthographic => {
                check_depth(reference_depth)?;
                let o = project_orthographic(x)?;
                [o[0] / reference_depth, o[1] / reference_depth]
            }
            _ => self.apply(x)?,
        };
        Ok((p, self.jacobian_about(x, reference_depth)?))
    }

    fn jacobian_about<T: Real>(self, x: Vec3<T>, reference_depth: T) -> Result<[[T; 3]; 2]> {
        let diagonal = |s: T| {
            let z = T::zero();
            [[s, z, z], [z, s, z]]
        };
        match self {
            Projection::Perspective => perspective_jacobian(x),
            Projection::Orthographic => Ok(diagonal(T::one())),
            Projection::ScaledOrthographic => {
                check_depth(reference_depth)?;
                Ok(diagonal(T::one() / reference_depth))
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Perspective => "perspective",
            Projection::Orthographic => "orthographic",
            Projection::ScaledOrthographic => "scaled_orthographic",
        }
    }
}

impl std::fmt::Display for Projection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `R W + t`.
pub fn world_to_camera<T: Real>(world: Vec3<T>, cam: &CameraParams<T>) -> Result<Vec3<T>> {
    check_finite(&world, "world point")?;
    Ok(add3(cam.rotation.mul_vec(world), cam.translation))
}

/// `Rᵀ X` for a root-relative camera-frame point; the translation is not applied.
pub fn camera_to_world_relative<T: Real>(x: Vec3<T>, cam: &CameraParams<T>) -> Result<Vec3<T>> {
    check_finite(&x, "camera point")?;
    Ok(cam.rotation.tr_mul_vec(x))
}

fn check_depth<T: Real>(z: T) -> Result<()> {
    if z.abs() > T::lit(Z_EPSILON) {
        Ok(())
    } else {
        Err(Error::DegenerateDepth {
            depth: z.as_f64(),
            epsilon: Z_EPSILON,
        })
    }
}

pub fn project_perspective<T: Real>(x: Vec3<T>) -> Result<Vec2<T>> {
    check_finite(&x, "camera point")?;
    check_depth(x[2])?;
    Ok([x[0] / x[2], x[1] / x[2]])
}

pub fn project_orthographic<T: Real>(x: Vec3<T>) -> Result<Vec2<T>> {
    check_finite(&x, "camera point")?;
    Ok([x[0], x[1]])
}

/// Maps a normalized image point to pixels through `K`.
pub fn apply_intrinsics<T: Real>(p: Vec2<T>, k: &Mat3<T>) -> Vec2<T> {
    let k = &k.0;
    [
        k[0][0] * p[0] + k[0][1] * p[1] + k[0][2],
        k[1][1] * p[1] + k[1][2],
    ]
}

/// Jacobian of [`project_perspective`] with respect to the camera-frame point.
pub fn perspective_jacobian<T: Real>(x: Vec3<T>) -> Result<[[T; 3]; 2]> {
    check_finite(&x, "camera point")?;
    check_depth(x[2])?;
    let iz = T::one() / x[2];
    let iz2 = iz * iz;
    Ok([
        [iz, T::zero(), -x[0] * iz2],
        [T::zero(), iz, -x[1] * iz2],
    ])
}

/// Camera at `center` looking at `target`, image y pointing away from `up`.
pub fn look_at<T: Real>(
    id: impl Into<String>,
    center: Vec3<T>,
    target: Vec3<T>,
    up: Vec3<T>,
    intrinsics: Mat3<T>,
) -> Result<CameraParams<T>> {
    let forward = normalize3(sub3(target, center));
    let right = normalize3(cross3(forward, up));
    let down = cross3(forward, right);
    let rotation = Mat3::from_rows(right, down, forward);
    let translation = scale3(rotation.mul_vec(center), -T::one());
    CameraParams::new(id, rotation, translation, intrinsics)
}

/// Intrinsic matrix with zero skew.
pub fn intrinsics<T: Real>(fx: T, fy: T, cx: T, cy: T) -> Mat3<T> {
    let z = T::zero();
    Mat3([[fx, z, cx], [z, fy, cy], [z, z, T::one()]])
}
