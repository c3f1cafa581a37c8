//! Shared helpers for integration tests.

use mvlift::geometry::{apply_intrinsics, project_perspective, world_to_camera, CameraParams, Vec2, Vec3};

/// Sum of squared pixel residuals of `x` over `observations`; infinite when
/// `x` is not in front of every camera.
pub fn reprojection_cost(observations: &[(CameraParams<f64>, Vec2<f64>)], x: Vec3<f64>) -> f64 {
    let mut cost = 0.0;
    for (cam, pixel) in observations {
        let Ok(xc) = world_to_camera(x, cam) else { return f64::INFINITY };
        if xc[2] <= 1e-6 {
            return f64::INFINITY;
        }
        let Ok(n) = project_perspective(xc) else { return f64::INFINITY };
        let p = apply_intrinsics(n, cam.intrinsics());
        cost += (p[0] - pixel[0]).powi(2) + (p[1] - pixel[1]).powi(2);
    }
    cost
}

/// Exhaustive grid search over a cube of half-width `half_mm` centred on the
/// origin, refined by compass search over the 26 neighbour directions.
pub fn brute_force_triangulate(observations: &[(CameraParams<f64>, Vec2<f64>)], half_mm: f64, grid_mm: f64) -> Vec3<f64> {
    let cost = |x: Vec3<f64>| reprojection_cost(observations, x);
    let n = (2.0 * half_mm / grid_mm).round() as i64;
    let mut best = ([0.0; 3], f64::INFINITY);
    for i in 0..=n {
        for j in 0..=n {
            for k in 0..=n {
                let x = [
                    -half_mm + i as f64 * grid_mm,
                    -half_mm + j as f64 * grid_mm,
                    -half_mm + k as f64 * grid_mm,
                ];
                let c = cost(x);
                if c < best.1 {
                    best = (x, c);
                }
            }
        }
    }
    let directions: Vec<Vec3<f64>> = (0..27)
        .map(|d| [(d % 3) as f64 - 1.0, ((d / 3) % 3) as f64 - 1.0, (d / 9) as f64 - 1.0])
        .filter(|d| d.iter().any(|&v| v != 0.0))
        .collect();
    let (mut x, mut c) = best;
    let mut step = grid_mm;
    while step > 1e-12 {
        let mut improved = false;
        for d in &directions {
            let cand = [x[0] + step * d[0], x[1] + step * d[1], x[2] + step * d[2]];
            let cc = cost(cand);
            if cc < c {
                x = cand;
                c = cc;
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    x
}
