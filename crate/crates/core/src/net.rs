//! Residual lifting MLP with batch normalization, ReLU and dropout.
//!
//! Topology (six linear layers for the default two blocks):
//!
//! ```text
//! x ─ Linear(in→H) ─ BN ─ ReLU ─ Dropout ─┬─ [Linear ─ BN ─ ReLU ─ Dropout] ×2 ─(+)─ ... ─ Linear(H→out)
//!                                          └───────────────────────────────────────┘
//! ```
//!
//! Activations are batch-major: one row per sample. Weights are stored
//! `in × out` so a layer computes `X W + b`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const DEFAULT_HIDDEN: usize = 1024;
pub const DEFAULT_DROPOUT: f64 = 0.5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub num_blocks: usize,
    pub dropout: f64,
    pub bn_eps: f64,
}

impl Architecture {
    /// `2·N_J` inputs, `3·N_J` outputs, two residual blocks.
    pub fn for_joints(num_joints: usize, hidden_dim: usize, dropout: f64) -> Self {
        Architecture {
            input_dim: 2 * num_joints,
            hidden_dim,
            output_dim: 3 * num_joints,
            num_blocks: 2,
            dropout,
            bn_eps: BN_EPS,
        }
    }

    /// Linear + BN + ReLU + dropout units before the output layer.
    pub fn num_units(&self) -> usize {
        1 + 2 * self.num_blocks
    }

    pub fn num_linear(&self) -> usize {
        self.num_units() + 1
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Shape("all layer dimensions must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
}

/// All trainable parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub arch: Architecture,
    pub linears: Vec<Linear<T>>,
    pub norms: Vec<BatchNorm<T>>,
}

/// Gradients, laid out like [`MlpParams`] without running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T> {
    pub linears: Vec<Linear<T>>,
    pub gammas: Vec<Array1<T>>,
    pub betas: Vec<Array1<T>>,
}

/// Mutable view of one parameter tensor.
pub struct ParamTensor<'a, T> {
    pub name: String,
    pub values: &'a mut [T],
    /// Batch-norm scale and shift are exempt from weight decay.
    pub decay: bool,
}

#[derive(Debug, Clone)]
struct UnitCache<T> {
    input: Array2<T>,
    xhat: Array2<T>,
    inv_std: Array1<T>,
    batch_mean: Array1<T>,
    batch_var: Array1<T>,
    /// Batch-norm output, before ReLU.
    bn_out: Array2<T>,
    /// Inverted-dropout multipliers: 0 or 1/(1-p).
    drop: Array2<T>,
}

/// Intermediate values of a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    units: Vec<UnitCache<T>>,
    last_hidden: Array2<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn batch_size(&self) -> usize {
        self.last_hidden.nrows()
    }

    /// Dropout multipliers, one matrix per unit; feed back into
    /// [`MlpParams::forward_train_masked`] to replay the same pass.
    pub fn dropout_masks(&self) -> Vec<Array2<T>> {
        self.units.iter().map(|u| u.drop.clone()).collect()
    }

    /// Which kept activations are positive, over every unit in order. Two
    /// passes with equal patterns lie on the same linear piece of the ReLUs.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.units
            .iter()
            .flat_map(|u| Zip::from(&u.bn_out).and(&u.drop).map_collect(|&y, &d| d != T::zero() && y > T::zero()))
            .collect()
    }

    /// Per-unit batch (mean, biased variance).
    pub fn batch_stats(&self) -> Vec<(Array1<T>, Array1<T>)> {
        self.units
            .iter()
            .map(|u| (u.batch_mean.clone(), u.batch_var.clone()))
            .collect()
    }
}

enum Dropout<'a, T, R> {
    Off,
    Sample(&'a mut R),
    Replay(&'a [Array2<T>]),
}

impl<T: Real> MlpParams<T> {
    /// Xavier-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases,
    /// `γ = 1`, `β = 0`, running mean 0 and running variance 1.
    pub fn init_xavier(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![(arch.input_dim, arch.hidden_dim)];
        dims.extend(std::iter::repeat((arch.hidden_dim, arch.hidden_dim)).take(2 * arch.num_blocks));
        dims.push((arch.hidden_dim, arch.output_dim));
        let linears = dims
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                    T::lit(rng.gen_range(-limit..=limit))
                });
                Linear {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        let h = arch.hidden_dim;
        let norms = (0..arch.num_units())
            .map(|_| BatchNorm {
                gamma: Array1::ones(h),
                beta: Array1::zeros(h),
                running_mean: Array1::zeros(h),
                running_var: Array1::ones(h),
            })
            .collect();
        Ok(MlpParams { arch, linears, norms })
    }

    /// Zero every weight and bias; batch-norm state is reset to its initial values.
    pub fn zeroed(arch: Architecture) -> Result<Self> {
        let mut p = Self::init_xavier(arch, 0)?;
        for l in &mut p.linears {
            l.weight.fill(T::zero());
        }
        Ok(p)
    }

    pub fn num_parameters(&self) -> usize {
        self.linears.iter().map(|l| l.weight.len() + l.bias.len()).sum::<usize>()
            + self.norms.iter().map(|n| n.gamma.len() + n.beta.len()).sum::<usize>()
    }

    /// Names and shapes of every trainable tensor.
    pub fn shape_manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, l) in self.linears.iter().enumerate() {
            out.push((format!("linear{i}.weight"), l.weight.shape().to_vec()));
            out.push((format!("linear{i}.bias"), l.bias.shape().to_vec()));
        }
        for (i, n) in self.norms.iter().enumerate() {
            out.push((format!("bn{i}.gamma"), n.gamma.shape().to_vec()));
            out.push((format!("bn{i}.beta"), n.beta.shape().to_vec()));
        }
        out
    }

    /// Trainable tensors in a fixed order matching [`MlpGrads::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<ParamTensor<'_, T>> {
        let mut out = Vec::new();
        for (i, l) in self.linears.iter_mut().enumerate() {
            out.push(ParamTensor {
                name: format!("linear{i}.weight"),
                values: l.weight.as_slice_mut().expect("standard layout"),
                decay: true,
            });
            out.push(ParamTensor {
                name: format!("linear{i}.bias"),
                values: l.bias.as_slice_mut().expect("standard layout"),
                decay: true,
            });
        }
        for (i, n) in self.norms.iter_mut().enumerate() {
            out.push(ParamTensor {
                name: format!("bn{i}.gamma"),
                values: n.gamma.as_slice_mut().expect("standard layout"),
                decay: false,
            });
            out.push(ParamTensor {
                name: format!("bn{i}.beta"),
                values: n.beta.as_slice_mut().expect("standard layout"),
                decay: false,
            });
        }
        out
    }

    fn check_input(&self, x: &ArrayView2<T>) -> Result<()> {
        if x.ncols() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.arch.input_dim,
                x.ncols()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(())
    }

    /// Inference: running batch-norm statistics, no dropout.
    pub fn forward_eval(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(&x)?;
        let eps = T::lit(self.arch.bn_eps);
        let unit = |i: usize, input: &Array2<T>| -> Array2<T> {
            let lin = &self.linears[i];
            let bn = &self.norms[i];
            let mut z = input.dot(&lin.weight) + &lin.bias;
            let scale = Zip::from(&bn.gamma)
                .and(&bn.running_var)
                .map_collect(|&g, &v| g / (v + eps).sqrt());
            let shift = Zip::from(&bn.beta)
                .and(&bn.running_mean)
                .and(&scale)
                .map_collect(|&b, &m, &s| b - m * s);
            z *= &scale;
            z += &shift;
            z.mapv_inplace(|v| v.max(T::zero()));
            z
        };
        let mut a = unit(0, &x.to_owned());
        for b in 0..self.arch.num_blocks {
            let h = unit(1 + 2 * b, &a);
            let h = unit(2 + 2 * b, &h);
            a += &h;
        }
        let out = self.linears.last().expect("output layer");
        Ok(a.dot(&out.weight) + &out.bias)
    }

    /// Single-sample inference.
    pub fn predict(&self, input: &[T]) -> Result<Vec<T>> {
        let x = ArrayView2::from_shape((1, input.len()), input).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.forward_eval(x)?.into_raw_vec_and_offset().0)
    }

    /// Training pass: batch statistics and freshly sampled dropout masks.
    pub fn forward_train<R: Rng>(&self, x: ArrayView2<T>, rng: &mut R) -> Result<(Array2<T>, ForwardCache<T>)> {
        let dropout = if self.arch.dropout > 0.0 {
            Dropout::Sample(rng)
        } else {
            Dropout::Off
        };
        self.forward_train_impl(x, dropout)
    }

    /// Training pass replaying previously drawn dropout masks.
    pub fn forward_train_masked(
        &self,
        x: ArrayView2<T>,
        masks: &[Array2<T>],
    ) -> Result<(Array2<T>, ForwardCache<T>)> {
        if masks.len() != self.arch.num_units() {
            return Err(Error::State(format!(
                "{} dropout masks for {} units",
                masks.len(),
                self.arch.num_units()
            )));
        }
        self.forward_train_impl::<ChaCha8Rng>(x, Dropout::Replay(masks))
    }

    fn forward_train_impl<R: Rng>(
        &self,
        x: ArrayView2<T>,
        mut dropout: Dropout<'_, T, R>,
    ) -> Result<(Array2<T>, ForwardCache<T>)> {
        self.check_input(&x)?;
        let n = x.nrows();
        let h = self.arch.hidden_dim;
        let eps = T::lit(self.arch.bn_eps);
        let p = self.arch.dropout;
        let keep_scale = T::lit(1.0 / (1.0 - p));
        let mut units = Vec::with_capacity(self.arch.num_units());

        let mut run_unit = |i: usize, input: Array2<T>, dropout: &mut Dropout<'_, T, R>| -> Result<Array2<T>> {
            let lin = &self.linears[i];
            let bn = &self.norms[i];
            let z = input.dot(&lin.weight) + &lin.bias;
            let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
            let centered = &z - &mean;
            let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
            let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
            let xhat = centered * &inv_std;
            let bn_out = &xhat * &bn.gamma + &bn.beta;
            let drop = match dropout {
                Dropout::Off => Array2::ones((n, h)),
                Dropout::Sample(rng) => {
                    Array2::from_shape_simple_fn((n, h), || if rng.gen::<f64>() < p { T::zero() } else { keep_scale })
                }
                Dropout::Replay(masks) => {
                    let m = &masks[i];
                    if m.dim() != (n, h) {
                        return Err(Error::State(format!("dropout mask {i} has shape {:?}", m.dim())));
                    }
                    m.clone()
                }
            };
            let out = Zip::from(&bn_out)
                .and(&drop)
                .map_collect(|&y, &d| y.max(T::zero()) * d);
            units.push(UnitCache {
                input,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                bn_out,
                drop,
            });
            Ok(out)
        };

        let mut a = run_unit(0, x.to_owned(), &mut dropout)?;
        for b in 0..self.arch.num_blocks {
            let t = run_unit(1 + 2 * b, a.clone(), &mut dropout)?;
            let t = run_unit(2 + 2 * b, t, &mut dropout)?;
            a += &t;
        }
        let out_layer = self.linears.last().expect("output layer");
        let out = a.dot(&out_layer.weight) + &out_layer.bias;
        Ok((out, ForwardCache { units, last_hidden: a }))
    }

    /// Exact gradients of a train-mode forward pass given `∂L/∂output`.
    ///
    /// Returns parameter gradients and the gradient with respect to the input batch.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_output: ArrayView2<T>) -> Result<(MlpGrads<T>, Array2<T>)> {
        let n = cache.batch_size();
        if cache.units.len() != self.arch.num_units()
            || cache.last_hidden.ncols() != self.arch.hidden_dim
        {
            return Err(Error::State("forward cache does not match parameters".into()));
        }
        if grad_output.dim() != (n, self.arch.output_dim) {
            return Err(Error::Shape(format!(
                "grad_output shape {:?}, expected ({n}, {})",
                grad_output.dim(),
                self.arch.output_dim
            )));
        }
        let nu = self.arch.num_units();
        let mut lin_grads: Vec<Option<Linear<T>>> = vec![None; self.arch.num_linear()];
        let mut gammas: Vec<Option<Array1<T>>> = vec![None; nu];
        let mut betas: Vec<Option<Array1<T>>> = vec![None; nu];

        let out_layer = self.linears.last().expect("output layer");
        lin_grads[nu] = Some(Linear {
            weight: cache.last_hidden.t().dot(&grad_output),
            bias: grad_output.sum_axis(Axis(0)),
        });
        let mut g = grad_output.dot(&out_layer.weight.t());

        let n_t = T::lit(n as f64);
        let mut unit_back = |i: usize, g_out: Array2<T>| -> Array2<T> {
            let c = &cache.units[i];
            let gamma = &self.norms[i].gamma;
            let g_bn = Zip::from(&g_out)
                .and(&c.drop)
                .and(&c.bn_out)
                .map_collect(|&g, &d, &y| if y > T::zero() { g * d } else { T::zero() });
            gammas[i] = Some((&g_bn * &c.xhat).sum_axis(Axis(0)));
            betas[i] = Some(g_bn.sum_axis(Axis(0)));
            let dxhat = g_bn * gamma;
            let sum_dxhat = dxhat.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&dxhat * &c.xhat).sum_axis(Axis(0));
            // dz = inv_std / N * (N dxhat - Σ dxhat - xhat Σ(dxhat xhat))
            let mut dz = dxhat * n_t - &sum_dxhat - &(&c.xhat * &sum_dxhat_xhat);
            dz *= &c.inv_std.mapv(|s| s / n_t);
            lin_grads[i] = Some(Linear {
                weight: c.input.t().dot(&dz),
                bias: dz.sum_axis(Axis(0)),
            });
            dz.dot(&self.linears[i].weight.t())
        };

        for b in (0..self.arch.num_blocks).rev() {
            let inner = unit_back(2 + 2 * b, g.clone());
            let inner = unit_back(1 + 2 * b, inner);
            g += &inner;
        }
        let grad_input = unit_back(0, g);

        let grads = MlpGrads {
            linears: lin_grads.into_iter().map(|l| l.expect("every layer visited")).collect(),
            gammas: gammas.into_iter().map(|v| v.expect("every unit visited")).collect(),
            betas: betas.into_iter().map(|v| v.expect("every unit visited")).collect(),
        };
        Ok((grads, grad_input))
    }

    /// `running ← (1 - momentum) running + momentum batch` for every batch-norm layer.
    pub fn update_running_stats(&mut self, batch_stats: &[(Array1<T>, Array1<T>)], momentum: T) -> Result<()> {
        if batch_stats.len() != self.norms.len() {
            return Err(Error::State(format!(
                "{} batch statistics for {} batch-norm layers",
                batch_stats.len(),
                self.norms.len()
            )));
        }
        let keep = T::one() - momentum;
        for (bn, (mean, var)) in self.norms.iter_mut().zip(batch_stats) {
            Zip::from(&mut bn.running_mean)
                .and(mean)
                .for_each(|r, &b| *r = keep * *r + momentum * b);
            Zip::from(&mut bn.running_var)
                .and(var)
                .for_each(|r, &b| *r = keep * *r + momentum * b);
        }
        Ok(())
    }
}

impl<T: Real> MlpGrads<T> {
    pub fn zeros_like(params: &MlpParams<T>) -> Self {
        MlpGrads {
            linears: params
                .linears
                .iter()
                .map(|l| Linear {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
            gammas: params.norms.iter().map(|n| Array1::zeros(n.gamma.len())).collect(),
            betas: params.norms.iter().map(|n| Array1::zeros(n.beta.len())).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for l in &self.linears {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        for (g, b) in self.gammas.iter().zip(&self.betas) {
            out.push(g.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn max_abs(&self) -> T {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.iter())
            .fold(T::zero(), |m, &v| m.max(v.abs()))
    }
}
