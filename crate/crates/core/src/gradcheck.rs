//! Central finite-difference checks of the analytic gradients: the network
//! backward pass on its own, and the full weak objective (network, output
//! unnormalization, camera-to-world rotation, multi-view and re-projection
//! losses) under each projection.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataio::{synth_generate, Batch, BatchFrame, MultiViewFrame, SynthConfig, View};
use crate::error::{Error, Result};
use crate::geometry::{norm3, CameraParams, Projection};
use crate::net::{Architecture, MlpParams};
use crate::trainer::{Objective, TrainConfig, Weak};

pub const TOLERANCE: f64 = 1e-4;
pub const SAMPLES_PER_CASE: usize = 20;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckCase {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub cases: Vec<GradcheckCase>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.checked == SAMPLES_PER_CASE) && self.max_rel_error() < TOLERANCE
    }
}

/// `|a - n| / max(|a|, |n|)`, zero when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// `(tensor, element)` of parameters eligible for checking. Biases of layers
/// feeding a batch norm are skipped: the normalization cancels them, so their
/// true gradient is zero and finite differences only measure rounding.
fn eligible(params: &mut MlpParams<f64>) -> Vec<(usize, usize)> {
    let units = params.arch.num_units();
    let mut out = Vec::new();
    for (k, t) in params.tensors_mut().iter().enumerate() {
        let bn_fed_bias = (0..units).any(|i| t.name == format!("linear{i}.bias"));
        if !bn_fed_bias {
            out.extend((0..t.values.len()).map(|e| (k, e)));
        }
    }
    out
}

fn perturbed(params: &MlpParams<f64>, at: (usize, usize), delta: f64) -> MlpParams<f64> {
    let mut p = params.clone();
    p.tensors_mut()[at.0].values[at.1] += delta;
    p
}

/// Compares `grads` with central differences of `loss` at randomly drawn
/// parameters. A draw whose probes change the ReLU activation pattern is
/// replaced, since the difference quotient then straddles a kink.
fn check<F>(
    name: &str,
    params: &MlpParams<f64>,
    grads: &[&[f64]],
    pool: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
    loss: F,
) -> Result<GradcheckCase>
where
    F: Fn(&MlpParams<f64>) -> Result<(f64, Vec<bool>)>,
{
    let (_, pattern) = loss(params)?;
    let mut order = pool.to_vec();
    order.shuffle(rng);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, e) in order {
        if checked == SAMPLES_PER_CASE {
            break;
        }
        let mut probe = params.clone();
        let h = STEP * probe.tensors_mut()[k].values[e].abs().max(1.0);
        let (up, up_pattern) = loss(&perturbed(params, (k, e), h))?;
        let (down, down_pattern) = loss(&perturbed(params, (k, e), -h))?;
        if up_pattern != pattern || down_pattern != pattern {
            continue;
        }
        worst = worst.max(relative_error(grads[k][e], (up - down) / (2.0 * h)));
        checked += 1;
    }
    Ok(GradcheckCase {
        name: name.into(),
        max_rel_error: worst,
        checked,
    })
}

/// The same camera with its focal lengths divided by its distance to the
/// world origin: an affine camera of the same pixel scale. Orthographic
/// re-projections through the original intrinsics are metres times the focal
/// length, large enough that rounding dominates the difference quotients.
fn affine_camera(v: &View<f64>) -> Result<View<f64>> {
    let c = &v.camera;
    let mut k = *c.intrinsics();
    let depth = norm3(c.center());
    for (r, col) in [(0, 0), (0, 1), (1, 1)] {
        k.0[r][col] /= depth;
    }
    Ok(View {
        camera: CameraParams::new(c.id(), *c.rotation(), c.translation(), k)?,
        ..v.clone()
    })
}

fn all_views(frames: &[MultiViewFrame<f64>]) -> Batch {
    Batch {
        frames: frames
            .iter()
            .enumerate()
            .map(|(i, f)| BatchFrame {
                index: i,
                views: (0..f.views.len()).collect(),
            })
            .collect(),
    }
}

/// Runs every case on a small random network and synthetic batch.
pub fn gradcheck(seed: u64) -> Result<GradcheckReport> {
    let frames = synth_generate(&SynthConfig {
        frames: 4,
        frames_per_sequence: 4,
        cameras: 4,
        noise_px: 2.0,
        drop_prob: 0.1,
        seed,
        ..SynthConfig::default()
    })?;
    let cfg = TrainConfig {
        hidden_dim: 32,
        dropout: 0.2,
        seed,
        cache_root: true,
        ..TrainConfig::default()
    };
    let perspective = Weak::<f64>::new(&frames, &frames, &cfg)?;
    let mut orthographic = Weak::<f64>::new(&frames, &frames, &cfg)?;
    orthographic.map_cameras(affine_camera)?;
    let assembled = perspective.assemble(&all_views(&frames))?;
    if assembled.groups.is_empty() {
        return Err(Error::Training("gradient check batch has no usable frame".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Architecture::for_joints(perspective.stats.num_joints(), cfg.hidden_dim, cfg.dropout);
    let mut params = MlpParams::<f64>::init_xavier(arch, seed)?;
    // Move batch-norm parameters off their identity initialization.
    for t in params.tensors_mut().into_iter().filter(|t| t.name.starts_with("bn")) {
        for v in t.values.iter_mut() {
            *v += 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
    }
    let (out, cache) = params.forward_train(assembled.input.view(), &mut rng)?;
    let masks = cache.dropout_masks();
    let pool = eligible(&mut params);
    let forward = |p: &MlpParams<f64>| -> Result<(Array2<f64>, Vec<bool>)> {
        let (o, c) = p.forward_train_masked(assembled.input.view(), &masks)?;
        Ok((o, c.relu_pattern()))
    };

    let mut cases = Vec::new();
    let weights: Array2<f64> =
        Array2::from_shape_simple_fn(out.raw_dim(), || Distribution::<f64>::sample(&StandardNormal, &mut rng));
    let (g, _) = params.backward(&cache, weights.view())?;
    cases.push(check("network backward", &params, &g.tensors(), &pool, &mut rng, |p| {
        let (o, pattern) = forward(p)?;
        Ok(((&o * &weights).sum(), pattern))
    })?);

    let n = assembled.groups.len() as f64;
    for (name, objective, projection) in [
        ("weak loss, perspective", &perspective, Projection::Perspective),
        ("weak loss, orthographic", &orthographic, Projection::Orthographic),
        ("weak loss, scaled orthographic", &perspective, Projection::ScaledOrthographic),
    ] {
        let (_, grad_out) = objective.loss_grad(&assembled, &out, projection)?;
        let (g, _) = params.backward(&cache, grad_out.view())?;
        cases.push(check(name, &params, &g.tensors(), &pool, &mut rng, |p| {
            let (o, pattern) = forward(p)?;
            Ok((objective.loss_grad(&assembled, &o, projection)?.0.total / n, pattern))
        })?);
    }
    Ok(GradcheckReport { seed, cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_edges() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, 0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let report = gradcheck(7).unwrap();
        assert_eq!(report.cases.len(), 4);
        for c in &report.cases {
            assert_eq!(c.checked, SAMPLES_PER_CASE);
            assert!(c.max_rel_error < TOLERANCE, "{}: {:e}", c.name, c.max_rel_error);
        }
        assert!(report.passed());
    }
}
