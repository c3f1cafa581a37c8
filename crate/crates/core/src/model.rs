//! Trained model: network parameters, normalization statistics and the
//! configuration they were trained with, persisted as a JSON document.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dataio::View;
use crate::error::{Error, Result};
use crate::net::{Architecture, BatchNorm, Linear, MlpParams};
use crate::pose::{NormStats, Pose3};
use crate::scalar::Real;
use crate::trainer::TrainConfig;

pub const FORMAT: &str = "mvlift-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: TrainConfig,
    pub params: MlpParams<T>,
    pub stats: NormStats<T>,
    /// Epoch whose parameters these are (0-based), if chosen by validation.
    pub best_epoch: Option<usize>,
    pub val_metric: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLinear {
    /// `in × out`, row-major.
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNorm {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStats {
    root: usize,
    mean_2d: Vec<[f64; 2]>,
    std_2d: Vec<[f64; 2]>,
    mean_3d: Vec<[f64; 3]>,
    std_3d: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    format: String,
    version: u32,
    config: TrainConfig,
    arch: Architecture,
    linears: Vec<RawLinear>,
    norms: Vec<RawNorm>,
    stats: RawStats,
    best_epoch: Option<usize>,
    val_metric: Option<f64>,
}

fn to_f64<T: Real>(v: &Array1<T>) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn from_f64<T: Real>(v: &[f64]) -> Array1<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

fn stats_to_raw<T: Real>(s: &NormStats<T>) -> RawStats {
    let s = s.cast::<f64>();
    RawStats {
        root: s.root,
        mean_2d: s.mean_2d,
        std_2d: s.std_2d,
        mean_3d: s.mean_3d,
        std_3d: s.std_3d,
    }
}

impl<T: Real> Model<T> {
    fn to_raw(&self) -> RawModel {
        RawModel {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            config: self.config.clone(),
            arch: self.params.arch,
            linears: self
                .params
                .linears
                .iter()
                .map(|l| RawLinear {
                    weight: l.weight.rows().into_iter().map(|r| r.iter().map(|x| x.as_f64()).collect()).collect(),
                    bias: to_f64(&l.bias),
                })
                .collect(),
            norms: self
                .params
                .norms
                .iter()
                .map(|n| RawNorm {
                    gamma: to_f64(&n.gamma),
                    beta: to_f64(&n.beta),
                    running_mean: to_f64(&n.running_mean),
                    running_var: to_f64(&n.running_var),
                })
                .collect(),
            stats: stats_to_raw(&self.stats),
            best_epoch: self.best_epoch,
            val_metric: self.val_metric,
        }
    }

    fn from_raw(raw: RawModel) -> Result<Self> {
        if raw.format != FORMAT || raw.version != FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported model file `{}` version {}",
                raw.format, raw.version
            )));
        }
        let arch = raw.arch;
        let mut expected = MlpParams::<T>::zeroed(arch)?;
        if raw.linears.len() != expected.linears.len() || raw.norms.len() != expected.norms.len() {
            return Err(Error::Shape("layer count does not match the architecture".into()));
        }
        for (dst, src) in expected.linears.iter_mut().zip(&raw.linears) {
            let (rows, cols) = dst.weight.dim();
            if src.weight.len() != rows || src.weight.iter().any(|r| r.len() != cols) || src.bias.len() != cols {
                return Err(Error::Shape(format!("linear layer is not {rows}×{cols}")));
            }
            *dst = Linear {
                weight: Array2::from_shape_fn((rows, cols), |(i, j)| T::lit(src.weight[i][j])),
                bias: from_f64(&src.bias),
            };
        }
        for (dst, src) in expected.norms.iter_mut().zip(&raw.norms) {
            let h = dst.gamma.len();
            if [&src.gamma, &src.beta, &src.running_mean, &src.running_var].iter().any(|v| v.len() != h) {
                return Err(Error::Shape(format!("batch-norm layer is not of width {h}")));
            }
            *dst = BatchNorm {
                gamma: from_f64(&src.gamma),
                beta: from_f64(&src.beta),
                running_mean: from_f64(&src.running_mean),
                running_var: from_f64(&src.running_var),
            };
        }
        let s = raw.stats;
        let nj = s.mean_2d.len();
        if [s.std_2d.len(), s.mean_3d.len(), s.std_3d.len()].iter().any(|&n| n != nj)
            || 2 * nj != arch.input_dim
            || 3 * nj != arch.output_dim
            || s.root >= nj
        {
            return Err(Error::Shape("normalization statistics do not match the network".into()));
        }
        let stats = NormStats {
            root: s.root,
            mean_2d: s.mean_2d,
            std_2d: s.std_2d,
            mean_3d: s.mean_3d,
            std_3d: s.std_3d,
            unseen_2d: Vec::new(),
            unseen_3d: Vec::new(),
        }
        .cast();
        Ok(Model {
            config: raw.config,
            params: expected,
            stats,
            best_epoch: raw.best_epoch,
            val_metric: raw.val_metric,
        })
    }

    pub fn write<W: Write>(&self, mut writer: W) -> Result<()> {
        serde_json::to_writer(&mut writer, &self.to_raw())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(reader: R) -> Result<Self> {
        Self::from_raw(serde_json::from_reader(reader)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }

    pub fn num_joints(&self) -> usize {
        self.stats.num_joints()
    }

    /// Root-relative camera-frame prediction for every view whose root joint
    /// is detected; `None` for the others.
    pub fn predict_views(&self, views: &[View<T>]) -> Result<Vec<Option<Pose3<T>>>> {
        let root = self.stats.root;
        let inputs: Vec<Option<Vec<T>>> = views
            .iter()
            .map(|v| {
                if v.detection.is_visible(root) {
                    self.stats.network_input(&v.detection.to_relative(root)?).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        let rows: Vec<&Vec<T>> = inputs.iter().flatten().collect();
        if rows.is_empty() {
            return Ok(vec![None; views.len()]);
        }
        let width = self.params.arch.input_dim;
        let flat: Vec<T> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let x = Array2::from_shape_vec((rows.len(), width), flat).map_err(|e| Error::Shape(e.to_string()))?;
        let out = self.params.forward_eval(x.view())?;
        let mut next = 0;
        inputs
            .iter()
            .map(|inp| match inp {
                Some(_) => {
                    let row = out.row(next);
                    next += 1;
                    self.stats.unnormalize_3d(row.as_slice().expect("standard layout")).map(Some)
                }
                None => Ok(None),
            })
            .collect()
    }
}
