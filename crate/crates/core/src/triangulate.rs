//! Multi-view point reconstruction: an affine closed form refined by
//! Gauss-Newton on the perspective pixel error.

use crate::dataio::{MultiViewFrame, View};
use crate::error::{Error, Result};
use crate::geometry::{dot3, norm3, perspective_jacobian, scale3, sub3, CameraParams, Mat3, Projection, Vec2, Vec3, Z_EPSILON};
use crate::pose::{CoordFrame, Flavor, Pose, Pose3};

pub const MAX_CONDITION: f64 = 1e8;
pub const MAX_ITERATIONS: usize = 50;
pub const STEP_TOLERANCE_MM: f64 = 1e-6;
pub const MAX_HALVINGS: usize = 10;

/// A single detection of a point by a calibrated camera.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub cam: &'a CameraParams<f64>,
    pub pixel: Vec2<f64>,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangulatedPoint {
    pub point: Vec3<f64>,
    /// Root-mean-square pixel residual over the contributing views.
    pub rms_residual: f64,
    /// Largest single-view pixel residual.
    pub max_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// 3x3 normal equations `A x = b`, accumulated row by row.
#[derive(Default)]
struct Normal3 {
    a: [[f64; 3]; 3],
    b: [f64; 3],
}

impl Normal3 {
    fn add_row(&mut self, row: Vec3<f64>, rhs: f64, w: f64) {
        for i in 0..3 {
            for j in 0..3 {
                self.a[i][j] += w * row[i] * row[j];
            }
            self.b[i] += w * row[i] * rhs;
        }
    }

    fn condition(&self) -> f64 {
        let ev = Mat3(self.a).symmetric_eigenvalues();
        if ev[0] <= 0.0 {
            f64::INFINITY
        } else {
            ev[2] / ev[0]
        }
    }

    /// Solution, or the condition number when the system is too ill-posed.
    fn solve(&self) -> std::result::Result<Vec3<f64>, f64> {
        let condition = self.condition();
        if !(condition < MAX_CONDITION) {
            return Err(condition);
        }
        let x = Mat3(self.a).inverse().ok_or(condition)?.mul_vec(self.b);
        if x.iter().all(|c| c.is_finite()) {
            Ok(x)
        } else {
            Err(condition)
        }
    }
}

/// Normalized image coordinates `K⁻¹ [u v 1]`.
fn normalized(obs: &Observation) -> Vec2<f64> {
    let k = obs.cam.intrinsics().0;
    let y = (obs.pixel[1] - k[1][2]) / k[1][1];
    let x = (obs.pixel[0] - k[0][2] - k[0][1] * y) / k[0][0];
    [x, y]
}

/// Weak-perspective solve with each camera's reference depth taken at the
/// world origin.
fn affine_estimate(obs: &[Observation]) -> Option<Vec3<f64>> {
    let mut ne = Normal3::default();
    for o in obs {
        let (r, t) = (o.cam.rotation(), o.cam.translation());
        let z0 = t[2];
        if z0 <= Z_EPSILON {
            return None;
        }
        let m = normalized(o);
        let w = o.confidence * o.confidence;
        ne.add_row(r.row(0), m[0] * z0 - t[0], w);
        ne.add_row(r.row(1), m[1] * z0 - t[1], w);
    }
    ne.solve().ok()
}

/// Linear inhomogeneous solve of `m (r3·X + t3) = r·X + t` per image axis.
fn linear_estimate(obs: &[Observation]) -> std::result::Result<Vec3<f64>, f64> {
    let mut ne = Normal3::default();
    for o in obs {
        let (r, t) = (o.cam.rotation(), o.cam.translation());
        let m = normalized(o);
        let w = o.confidence * o.confidence;
        for axis in 0..2 {
            let row = sub3(scale3(r.row(2), m[axis]), r.row(axis));
            ne.add_row(row, t[axis] - m[axis] * t[2], w);
        }
    }
    ne.solve()
}

/// Pixel residual vectors, or `None` when the point is at or behind a camera.
fn residuals(obs: &[Observation], x: Vec3<f64>) -> Option<Vec<Vec2<f64>>> {
    obs.iter()
        .map(|o| {
            let p = o.cam.project(x, Projection::Perspective).ok()?;
            let cam = o.cam.rotation().mul_vec(x)[2] + o.cam.translation()[2];
            (cam > Z_EPSILON).then_some([p[0] - o.pixel[0], p[1] - o.pixel[1]])
        })
        .collect()
}

fn weighted_cost(obs: &[Observation], x: Vec3<f64>) -> f64 {
    match residuals(obs, x) {
        Some(r) => obs
            .iter()
            .zip(r)
            .map(|(o, e)| o.confidence * o.confidence * (e[0] * e[0] + e[1] * e[1]))
            .sum(),
        None => f64::INFINITY,
    }
}

/// Gauss-Newton normal equations at `x`.
fn gauss_newton_system(obs: &[Observation], x: Vec3<f64>) -> Option<Normal3> {
    let mut ne = Normal3::default();
    for o in obs {
        let cam = o.cam.rotation().mul_vec(x);
        let xc = [cam[0] + o.cam.translation()[0], cam[1] + o.cam.translation()[1], cam[2] + o.cam.translation()[2]];
        let jp = perspective_jacobian(xc).ok()?;
        let kp = o.cam.pixel_jacobian();
        let r = o.cam.rotation();
        let p = o.cam.project(x, Projection::Perspective).ok()?;
        let e = [p[0] - o.pixel[0], p[1] - o.pixel[1]];
        let w = o.confidence * o.confidence;
        for a in 0..2 {
            // d pixel_a / d X = Σ_b K[a][b] · Jp[b] · R
            let mut row = [0.0; 3];
            for b in 0..2 {
                for c in 0..3 {
                    for d in 0..3 {
                        row[d] += kp[a][b] * jp[b][c] * r.0[c][d];
                    }
                }
            }
            ne.add_row(row, -e[a], w);
        }
    }
    Some(ne)
}

fn summarize(obs: &[Observation], x: Vec3<f64>, iterations: usize, converged: bool) -> TriangulatedPoint {
    let res = residuals(obs, x).unwrap_or_default();
    let sq: Vec<f64> = res.iter().map(|e| e[0] * e[0] + e[1] * e[1]).collect();
    let rms = if sq.is_empty() {
        f64::NAN
    } else {
        (sq.iter().sum::<f64>() / sq.len() as f64).sqrt()
    };
    TriangulatedPoint {
        point: x,
        rms_residual: rms,
        max_residual: sq.iter().fold(0.0f64, |m, &s| m.max(s.sqrt())),
        iterations,
        converged,
    }
}

/// Reconstructs one world point from two or more observations.
///
/// Observations with zero confidence are ignored; the others weight their
/// residual rows by confidence.
pub fn triangulate_point(observations: &[Observation]) -> Result<TriangulatedPoint> {
    let obs: Vec<Observation> = observations.iter().copied().filter(|o| o.confidence > 0.0).collect();
    if obs.len() < 2 {
        return Err(Error::InsufficientViews {
            found: obs.len(),
            needed: 2,
        });
    }
    if obs.iter().any(|o| !(o.pixel[0].is_finite() && o.pixel[1].is_finite())) {
        return Err(Error::InvalidInput("non-finite pixel observation".into()));
    }
    let mut x = match affine_estimate(&obs).filter(|&x| weighted_cost(&obs, x).is_finite()) {
        Some(x) => x,
        None => {
            let x = linear_estimate(&obs).map_err(|condition| Error::DegenerateConfiguration { condition })?;
            if !weighted_cost(&obs, x).is_finite() {
                return Err(Error::InvalidInput("point reconstructs behind a camera".into()));
            }
            x
        }
    };
    let mut cost = weighted_cost(&obs, x);
    for it in 0..MAX_ITERATIONS {
        let ne = gauss_newton_system(&obs, x).ok_or(Error::DegenerateConfiguration { condition: f64::INFINITY })?;
        let delta = ne.solve().map_err(|condition| Error::DegenerateConfiguration { condition })?;
        let mut step = delta;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = [x[0] + step[0], x[1] + step[1], x[2] + step[2]];
            let c = weighted_cost(&obs, cand);
            if c <= cost {
                accepted = Some((cand, c));
                break;
            }
            step = scale3(step, 0.5);
        }
        match accepted {
            Some((cand, c)) => {
                x = cand;
                cost = c;
                if norm3(step) < STEP_TOLERANCE_MM {
                    return Ok(summarize(&obs, x, it + 1, true));
                }
            }
            // No descent along the Gauss-Newton direction: at a minimum to
            // within rounding if the full step was already tiny.
            None => return Ok(summarize(&obs, x, it + 1, norm3(delta) < STEP_TOLERANCE_MM)),
        }
    }
    Ok(summarize(&obs, x, MAX_ITERATIONS, false))
}

/// Observations of joint `joint` in every view that detects it.
pub fn joint_observations<'a>(views: impl IntoIterator<Item = &'a View<f64>>, joint: usize) -> Vec<Observation<'a>> {
    views
        .into_iter()
        .filter(|v| v.detection.is_visible(joint))
        .map(|v| Observation {
            cam: &v.camera,
            pixel: v.detection.joints[joint],
            confidence: v.confidence[joint],
        })
        .collect()
}

/// Independent per-joint reconstruction of a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseReconstruction {
    /// Absolute world pose; joints that could not be reconstructed are masked.
    pub pose: Pose3<f64>,
    pub joints: Vec<Option<TriangulatedPoint>>,
}

impl PoseReconstruction {
    pub fn rms_residuals(&self) -> Vec<Option<f64>> {
        self.joints.iter().map(|j| j.map(|p| p.rms_residual)).collect()
    }
}

pub fn triangulate_views(views: &[&View<f64>]) -> Result<PoseReconstruction> {
    let nj = views.first().map_or(0, |v| v.detection.num_joints());
    let joints: Vec<Option<TriangulatedPoint>> = (0..nj)
        .map(|j| triangulate_point(&joint_observations(views.iter().copied(), j)).ok())
        .collect();
    if joints.iter().all(Option::is_none) {
        return Err(Error::EmptyReconstruction);
    }
    let points = joints.iter().map(|p| p.map_or([0.0; 3], |p| p.point)).collect();
    let mask = joints.iter().map(Option::is_some).collect();
    Ok(PoseReconstruction {
        pose: Pose::new(points, mask, Flavor::Absolute, CoordFrame::World)?,
        joints,
    })
}

pub fn triangulate_pose(frame: &MultiViewFrame<f64>) -> Result<PoseReconstruction> {
    let views: Vec<&View<f64>> = frame.views.iter().collect();
    triangulate_views(&views)
}

/// World position of the root joint from the views that detect it.
pub fn reconstruct_root(frame: &MultiViewFrame<f64>, root: usize) -> Result<TriangulatedPoint> {
    triangulate_point(&joint_observations(&frame.views, root))
}

/// Distance between two points; used by callers comparing reconstructions.
pub fn point_error(a: Vec3<f64>, b: Vec3<f64>) -> f64 {
    let d = sub3(a, b);
    dot3(d, d).sqrt()
}
