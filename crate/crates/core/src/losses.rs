//! Smooth-L1 primitive, multi-view consistency loss, re-projection loss and
//! their combination, each with analytic gradients.
//!
//! Every norm in the objective is evaluated as an elementwise Huber penalty
//! summed over coordinates. Joints masked in a view's detection contribute
//! nothing, whatever values sit in their slots.

use crate::dataio::View;
use crate::error::{Error, Result};
use crate::geometry::{add3, Projection, Vec3};
use crate::pose::{CoordFrame, Flavor, Pose, Pose3};
use crate::scalar::Real;

/// `½(a-b)²` if `|a-b| ≤ δ`, else `δ(|a-b| - ½δ)`.
#[inline]
pub fn huber<T: Real>(a: T, b: T, delta: T) -> T {
    let d = (a - b).abs();
    let half = T::lit(0.5);
    if d <= delta {
        half * d * d
    } else {
        delta * (d - half * delta)
    }
}

/// Derivative of [`huber`] with respect to `a`.
#[inline]
pub fn huber_grad<T: Real>(a: T, b: T, delta: T) -> T {
    let d = a - b;
    if d.abs() <= delta {
        d
    } else {
        delta * d.signum()
    }
}

/// Per joint, the mean over views where the joint is visible.
///
/// A joint visible in no view is returned as the origin with its mask cleared.
pub fn mean_world_pose<T: Real>(world_poses: &[Pose3<T>]) -> Result<Pose3<T>> {
    let first = world_poses
        .first()
        .ok_or_else(|| Error::InvalidFrame("mean pose of zero views".into()))?;
    let nj = first.num_joints();
    if world_poses.iter().any(|p| p.num_joints() != nj) {
        return Err(Error::InvalidFrame("views disagree on joint count".into()));
    }
    let mut joints = vec![[T::zero(); 3]; nj];
    let mut mask = vec![false; nj];
    for j in 0..nj {
        let mut n = 0usize;
        let mut sum = [T::zero(); 3];
        for pose in world_poses.iter().filter(|p| p.mask[j]) {
            sum = add3(sum, pose.joints[j]);
            n += 1;
        }
        if n > 0 {
            let inv = T::one() / T::lit(n as f64);
            joints[j] = sum.map(|v| v * inv);
            mask[j] = true;
        }
    }
    Pose::new(joints, mask, Flavor::Relative, CoordFrame::World)
}

#[derive(Debug, Clone)]
pub struct MultiviewLoss<T> {
    pub value: T,
    /// `∂L_M/∂Ŵ_i` for each view.
    pub grads: Vec<Vec<Vec3<T>>>,
    pub per_view_joint: Vec<Vec<T>>,
    pub mean: Pose3<T>,
}

/// Sum over views and visible joints of the Huber distance between the mean
/// world pose and each view's world-frame prediction.
///
/// With `detach_mean` the mean is treated as a constant target; otherwise the
/// gradient also flows through the mean estimator.
pub fn multiview_loss<T: Real>(world_poses: &[Pose3<T>], delta: T, detach_mean: bool) -> Result<MultiviewLoss<T>> {
    let mean = mean_world_pose(world_poses)?;
    let nj = mean.num_joints();
    let nv = world_poses.len();
    let mut value = T::zero();
    let mut grads = vec![vec![[T::zero(); 3]; nj]; nv];
    let mut per_view_joint = vec![vec![T::zero(); nj]; nv];
    for j in 0..nj {
        if !mean.mask[j] {
            continue;
        }
        let visible: Vec<usize> = (0..nv).filter(|&i| world_poses[i].mask[j]).collect();
        let inv_n = T::one() / T::lit(visible.len() as f64);
        // Σ_i ∂h/∂mean, shared by every visible view through the mean
        let mut through_mean = [T::zero(); 3];
        for &i in &visible {
            let w = world_poses[i].joints[j];
            for c in 0..3 {
                let l = huber(mean.joints[j][c], w[c], delta);
                value = value + l;
                per_view_joint[i][j] = per_view_joint[i][j] + l;
                let g = huber_grad(mean.joints[j][c], w[c], delta);
                grads[i][j][c] = grads[i][j][c] - g;
                through_mean[c] = through_mean[c] + g;
            }
        }
        if !detach_mean {
            for &i in &visible {
                for c in 0..3 {
                    grads[i][j][c] = grads[i][j][c] + through_mean[c] * inv_n;
                }
            }
        }
    }
    Ok(MultiviewLoss {
        value,
        grads,
        per_view_joint,
        mean,
    })
}

#[derive(Debug, Clone)]
pub struct ReprojectionLoss<T> {
    pub value: T,
    /// `∂L_R/∂W̄` per joint.
    pub grad_mean: Vec<Vec3<T>>,
    pub per_view_joint: Vec<Vec<T>>,
    /// Joint observations dropped because their depth failed the perspective guard.
    pub skipped: usize,
}

/// Re-projects `mean + root` into every view and compares it against the
/// detections with an elementwise Huber penalty in pixels. The scaled
/// orthographic projection uses the root's depth in each view.
pub fn reprojection_loss<T: Real>(
    mean: &Pose3<T>,
    root_world: Vec3<T>,
    views: &[View<T>],
    projection: Projection,
    delta: T,
) -> Result<ReprojectionLoss<T>> {
    if views.is_empty() {
        return Err(Error::InvalidFrame("re-projection over zero views".into()));
    }
    if root_world.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite root position".into()));
    }
    let nj = mean.num_joints();
    let mut value = T::zero();
    let mut grad_mean = vec![[T::zero(); 3]; nj];
    let mut per_view_joint = vec![vec![T::zero(); nj]; views.len()];
    let mut skipped = 0usize;
    for (i, view) in views.iter().enumerate() {
        if view.detection.num_joints() != nj {
            return Err(Error::JointCount {
                expected: nj,
                found: view.detection.num_joints(),
            });
        }
        let cam = &view.camera;
        let r = cam.rotation();
        let kj = cam.pixel_jacobian();
        let root_depth = add3(r.mul_vec(root_world), cam.translation())[2];
        for j in 0..nj {
            if !mean.mask[j] || !view.detection.mask[j] {
                continue;
            }
            let absolute = add3(mean.joints[j], root_world);
            let xc = add3(r.mul_vec(absolute), cam.translation());
            let (normalized, jac) = match projection.apply_about(xc, root_depth) {
                Ok(pj) => pj,
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            };
            let pixel = crate::geometry::apply_intrinsics(normalized, cam.intrinsics());
            let target = view.detection.joints[j];
            let mut g_pix = [T::zero(); 2];
            for c in 0..2 {
                let l = huber(pixel[c], target[c], delta);
                value = value + l;
                per_view_joint[i][j] = per_view_joint[i][j] + l;
                g_pix[c] = huber_grad(pixel[c], target[c], delta);
            }
            // pixel = K2 · Π(R W + t): chain through K, Π and R
            let g_norm = [kj[0][0] * g_pix[0], kj[0][1] * g_pix[0] + kj[1][1] * g_pix[1]];
            let g_cam: Vec3<T> = std::array::from_fn(|c| jac[0][c] * g_norm[0] + jac[1][c] * g_norm[1]);
            let g_world = r.tr_mul_vec(g_cam);
            grad_mean[j] = add3(grad_mean[j], g_world);
        }
    }
    Ok(ReprojectionLoss {
        value,
        grad_mean,
        per_view_joint,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig<T> {
    pub lambda: T,
    pub delta: T,
    pub projection: Projection,
    pub detach_mean: bool,
}

impl<T: Real> LossConfig<T> {
    pub fn new(lambda: T, delta: T, projection: Projection) -> Self {
        LossConfig {
            lambda,
            delta,
            projection,
            detach_mean: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossBreakdown<T> {
    pub multiview: T,
    pub reprojection: T,
    pub total: T,
    pub per_view_joint_multiview: Vec<Vec<T>>,
    pub per_view_joint_reprojection: Vec<Vec<T>>,
    pub skipped_depth: usize,
}

/// `λ L_M + (1-λ) L_R` for one multi-view frame.
///
/// `predictions[i]` is view `i`'s root-relative camera-frame output (mm). The
/// returned gradients are with respect to those outputs.
pub fn total_loss<T: Real>(
    views: &[View<T>],
    predictions: &[Pose3<T>],
    cfg: &LossConfig<T>,
    root_world: Vec3<T>,
) -> Result<(LossBreakdown<T>, Vec<Vec<Vec3<T>>>)> {
    if !(T::zero()..=T::one()).contains(&cfg.lambda) {
        return Err(Error::Config(format!("lambda {} outside [0, 1]", cfg.lambda)));
    }
    if views.len() != predictions.len() {
        return Err(Error::Shape(format!(
            "{} views but {} predictions",
            views.len(),
            predictions.len()
        )));
    }
    if views.is_empty() {
        return Err(Error::InvalidFrame("frame without views".into()));
    }
    let world: Vec<Pose3<T>> = views
        .iter()
        .zip(predictions)
        .map(|(view, pred)| {
            if pred.num_joints() != view.detection.num_joints() {
                return Err(Error::JointCount {
                    expected: view.detection.num_joints(),
                    found: pred.num_joints(),
                });
            }
            let r = view.camera.rotation();
            let joints = pred.joints.iter().map(|&x| r.tr_mul_vec(x)).collect();
            Pose::new(joints, view.detection.mask.clone(), Flavor::Relative, CoordFrame::World)
        })
        .collect::<Result<_>>()?;

    let lm = multiview_loss(&world, cfg.delta, cfg.detach_mean)?;
    let lr = reprojection_loss(&lm.mean, root_world, views, cfg.projection, cfg.delta)?;
    let lambda = cfg.lambda;
    let rest = T::one() - lambda;
    let total = lambda * lm.value + rest * lr.value;

    let nj = lm.mean.num_joints();
    let counts: Vec<usize> = (0..nj).map(|j| world.iter().filter(|p| p.mask[j]).count()).collect();
    let grads = views
        .iter()
        .enumerate()
        .map(|(i, view)| {
            let r = view.camera.rotation();
            (0..nj)
                .map(|j| {
                    let mut g = lm.grads[i][j].map(|v| v * lambda);
                    if world[i].mask[j] {
                        let share = rest / T::lit(counts[j] as f64);
                        for c in 0..3 {
                            g[c] = g[c] + lr.grad_mean[j][c] * share;
                        }
                    }
                    // W = Rᵀ X, so ∂L/∂X = R ∂L/∂W
                    r.mul_vec(g)
                })
                .collect()
        })
        .collect();

    Ok((
        LossBreakdown {
            multiview: lm.value,
            reprojection: lr.value,
            total,
            per_view_joint_multiview: lm.per_view_joint,
            per_view_joint_reprojection: lr.per_view_joint,
            skipped_depth: lr.skipped,
        },
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraParams, Mat3};
    use crate::pose::Pose2;

    fn wpose(joints: Vec<[f64; 3]>, mask: Vec<bool>) -> Pose3<f64> {
        Pose::new(joints, mask, Flavor::Relative, CoordFrame::World).unwrap()
    }

    fn identity_view(detection: Vec<[f64; 2]>) -> View<f64> {
        let cam = CameraParams::new("id", Mat3::identity(), [0.0; 3], Mat3::identity()).unwrap();
        let n = detection.len();
        View {
            camera: cam,
            detection: Pose2::visible(detection, Flavor::Absolute, CoordFrame::Image),
            confidence: vec![1.0; n],
        }
    }

    #[test]
    fn huber_values() {
        assert_eq!(huber(0.5, 0.0, 1.0), 0.125);
        assert_eq!(huber(2.0, 0.0, 1.0), 1.5);
        assert_eq!(huber(1.0, 0.0, 1.0), 0.5);
        let lin = 1.0 * (1.0 - 0.5 * 1.0);
        assert_eq!(lin, 0.5);
        assert_eq!(huber_grad(1.0, 0.0, 1.0), 1.0);
        assert_eq!(huber_grad(-3.0, 0.0, 1.0), -1.0);
        assert_eq!(huber_grad(0.25, 0.0, 1.0), 0.25);
    }

    #[test]
    fn mean_pose_examples() {
        let m = mean_world_pose(&[wpose(vec![[0.0; 3]], vec![true]), wpose(vec![[1.0, 0.0, 0.0]], vec![true])]).unwrap();
        assert_eq!(m.joints[0], [0.5, 0.0, 0.0]);

        let m = mean_world_pose(&[
            wpose(vec![[2.0, 3.0, 4.0]], vec![true]),
            wpose(vec![[50.0, 50.0, 50.0]], vec![false]),
        ])
        .unwrap();
        assert_eq!(m.joints[0], [2.0, 3.0, 4.0]);

        let p = wpose(vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], vec![true, true]);
        assert_eq!(mean_world_pose(&[p.clone(), p.clone(), p.clone()]).unwrap().joints, p.joints);

        let m = mean_world_pose(&[wpose(vec![[9.0; 3]], vec![false])]).unwrap();
        assert_eq!((m.joints[0], m.mask[0]), ([0.0; 3], false));
        assert!(matches!(mean_world_pose::<f64>(&[]), Err(Error::InvalidFrame(_))));
    }

    #[test]
    fn multiview_examples() {
        let a = wpose(vec![[0.0; 3]], vec![true]);
        let b = wpose(vec![[1.0, 0.0, 0.0]], vec![true]);
        let lm = multiview_loss(&[a.clone(), b], 1.0, false).unwrap();
        assert!((lm.value - 0.25).abs() < 1e-15);
        // symmetric pull towards each other, net zero
        assert!((lm.grads[0][0][0] + lm.grads[1][0][0]).abs() < 1e-15);

        let lm = multiview_loss(&[a.clone(), a.clone(), a], 1.0, false).unwrap();
        assert_eq!(lm.value, 0.0);
        assert!(lm.grads.iter().flatten().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn detached_mean_gradient() {
        let a = wpose(vec![[0.0; 3]], vec![true]);
        let b = wpose(vec![[1.0, 0.0, 0.0]], vec![true]);
        let lm = multiview_loss(&[a, b], 1.0, true).unwrap();
        // d/dŴ of ½(mean - Ŵ)² with mean fixed: -(mean - Ŵ)
        assert_eq!(lm.grads[0][0][0], -0.5);
        assert_eq!(lm.grads[1][0][0], 0.5);
    }

    #[test]
    fn reprojection_examples() {
        let mean = wpose(vec![[0.0; 3], [1000.0, 0.0, 0.0]], vec![true, true]);
        let root = [0.0, 0.0, 2000.0];
        let exact = identity_view(vec![[0.0, 0.0], [0.5, 0.0]]);
        let lr = reprojection_loss(&mean, root, &[exact], Projection::Perspective, 1.0).unwrap();
        assert_eq!(lr.value, 0.0);

        let off = identity_view(vec![[0.0, 0.0], [1.0, 0.0]]);
        let lr = reprojection_loss(&mean, root, &[off], Projection::Perspective, 1.0).unwrap();
        assert!((lr.value - 0.125).abs() < 1e-15);

        let ortho = identity_view(vec![[0.0, 0.0], [1000.0, 0.0]]);
        for depth in [10.0, 2000.0, -500.0] {
            let lr = reprojection_loss(&mean, [0.0, 0.0, depth], &[ortho.clone()], Projection::Orthographic, 1.0).unwrap();
            assert_eq!(lr.value, 0.0);
        }
        assert!(reprojection_loss(&mean, root, &[], Projection::Perspective, 1.0).is_err());
    }

    #[test]
    fn scaled_orthographic_divides_by_root_depth() {
        let root = [0.0, 0.0, 2000.0];
        let v = identity_view(vec![[0.0, 0.0], [0.5, 0.0]]);
        for z in [-300.0, 0.0, 700.0] {
            let mean = wpose(vec![[0.0; 3], [1000.0, 0.0, z]], vec![true, true]);
            let lr = reprojection_loss(&mean, root, &[v.clone()], Projection::ScaledOrthographic, 1.0).unwrap();
            assert_eq!(lr.value, 0.0);
            assert_eq!(lr.skipped, 0);
        }
        let mean = wpose(vec![[0.0; 3], [1000.0, 0.0, 0.0]], vec![true, true]);
        let lr = reprojection_loss(&mean, [0.0; 3], &[v], Projection::ScaledOrthographic, 1.0).unwrap();
        assert_eq!((lr.value, lr.skipped), (0.0, 2));
    }

    #[test]
    fn reprojection_skips_degenerate_depth() {
        let mean = wpose(vec![[0.0; 3], [0.0, 0.0, -2000.0]], vec![true, true]);
        let v = identity_view(vec![[0.0, 0.0], [0.0, 0.0]]);
        let lr = reprojection_loss(&mean, [0.0, 0.0, 2000.0], &[v], Projection::Perspective, 1.0).unwrap();
        assert_eq!(lr.skipped, 1);
    }

    #[test]
    fn total_loss_lambda_boundaries() {
        let views = vec![
            identity_view(vec![[0.0, 0.0], [0.3, 0.1]]),
            identity_view(vec![[0.0, 0.0], [0.2, -0.1]]),
        ];
        let preds = vec![
            Pose::visible(vec![[0.0; 3], [500.0, 100.0, 30.0]], Flavor::Relative, CoordFrame::Camera),
            Pose::visible(vec![[0.0; 3], [400.0, 150.0, -20.0]], Flavor::Relative, CoordFrame::Camera),
        ];
        let root = [0.0, 0.0, 2000.0];
        let run = |lambda| total_loss(&views, &preds, &LossConfig::new(lambda, 1.0, Projection::Perspective), root).unwrap().0;
        let one = run(1.0);
        assert_eq!(one.total, one.multiview);
        let zero = run(0.0);
        assert_eq!(zero.total, zero.reprojection);
        let mixed = run(0.8);
        let expect = 0.8 * mixed.multiview + 0.2 * mixed.reprojection;
        assert!((mixed.total - expect).abs() <= 1e-12 * expect.abs());
        assert!((0.8f64 * 0.25 + 0.2 * 0.125 - 0.225).abs() < 1e-15);
        assert!(total_loss(&views, &preds, &LossConfig::new(1.5, 1.0, Projection::Perspective), root).is_err());
    }
}

#[cfg(test)]
mod synthetic_tests {
    use super::*;
    use crate::dataio::{synth_generate, SynthConfig};
    use crate::triangulate::reconstruct_root;

    #[test]
    fn true_pose_has_zero_loss_on_noise_free_data() {
        let frames = synth_generate(&SynthConfig {
            frames: 20,
            seed: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let root = 1;
        for f in &frames {
            let gt = f.gt3d.as_ref().unwrap();
            let root_world = reconstruct_root(f, root).unwrap().point;
            assert!(crate::geometry::norm3(crate::geometry::sub3(root_world, gt.joints[root])) < 1e-6);
            let preds: Vec<Pose3<f64>> = f
                .views
                .iter()
                .map(|v| {
                    let r = v.camera.rotation();
                    let joints = gt.joints.iter().map(|&p| r.mul_vec(crate::geometry::sub3(p, gt.joints[root]))).collect();
                    Pose::new(joints, v.detection.mask.clone(), Flavor::Relative, CoordFrame::Camera).unwrap()
                })
                .collect();
            let (loss, grads) =
                total_loss(&f.views, &preds, &LossConfig::new(0.8, 1.0, Projection::Perspective), gt.joints[root]).unwrap();
            assert!(loss.multiview < 1e-10 && loss.reprojection < 1e-10, "{loss:?}");
            assert!(grads.iter().flatten().flatten().all(|g| g.abs() < 1e-6));
        }
    }
}
