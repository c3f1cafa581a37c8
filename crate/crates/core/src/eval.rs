//! Mean per-joint position error and per-joint reports.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::dataio::MultiViewFrame;
use crate::error::{Error, Result};
use crate::geometry::{norm3, sub3};
use crate::model::Model;
use crate::pose::Pose3;
use crate::scalar::Real;
use crate::skeleton::joint_name;

/// Mean Euclidean distance over joints visible in `gt`, excluding `root`.
pub fn mpjpe<T: Real>(pred: &Pose3<T>, gt: &Pose3<T>, root: usize) -> Result<f64> {
    if pred.num_joints() != gt.num_joints() {
        return Err(Error::JointCount {
            expected: gt.num_joints(),
            found: pred.num_joints(),
        });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for j in (0..gt.num_joints()).filter(|&j| j != root && gt.mask[j]) {
        sum += norm3(sub3(pred.joints[j], gt.joints[j])).as_f64();
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no visible non-root joint".into()));
    }
    Ok(sum / n as f64)
}

/// A per-joint cell: a value (millimetres in evaluation reports), or `"-"`
/// for the root and joints never observed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum JointCell {
    Value(f64),
    Dash(Dash),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dash {
    #[serde(rename = "-")]
    Dash,
}

impl JointCell {
    pub const DASH: JointCell = JointCell::Dash(Dash::Dash);

    pub fn value(&self) -> Option<f64> {
        match self {
            JointCell::Value(v) => Some(*v),
            JointCell::Dash(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ReportMeta {
    pub model: Option<String>,
    pub data: Option<String>,
    pub mode: Option<String>,
    pub seed: Option<u64>,
    /// Samples in which each joint was visible in the ground truth.
    pub joint_counts: IndexMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub avg_mm: f64,
    pub per_joint_mm: IndexMap<String, JointCell>,
    pub n_samples: usize,
    pub meta: ReportMeta,
}

impl EvalReport {
    /// Builds a report from `(prediction, ground truth)` pairs.
    pub fn from_pairs<T: Real>(pairs: &[(Pose3<T>, Pose3<T>)], root: usize) -> Result<Self> {
        let nj = pairs.first().map(|p| p.1.num_joints()).ok_or_else(|| {
            Error::UndefinedMetric("no evaluable samples".into())
        })?;
        let mut total = 0.0;
        let mut sums = vec![0.0; nj];
        let mut counts = vec![0usize; nj];
        for (pred, gt) in pairs {
            total += mpjpe(pred, gt, root)?;
            for j in (0..nj).filter(|&j| j != root && gt.mask[j]) {
                sums[j] += norm3(sub3(pred.joints[j], gt.joints[j])).as_f64();
                counts[j] += 1;
            }
        }
        let per_joint_mm = (0..nj)
            .map(|j| {
                let cell = if j == root || counts[j] == 0 {
                    JointCell::DASH
                } else {
                    JointCell::Value(sums[j] / counts[j] as f64)
                };
                (joint_name(j, nj), cell)
            })
            .collect();
        Ok(EvalReport {
            avg_mm: total / pairs.len() as f64,
            per_joint_mm,
            n_samples: pairs.len(),
            meta: ReportMeta {
                joint_counts: (0..nj).map(|j| (joint_name(j, nj), counts[j])).collect(),
                ..ReportMeta::default()
            },
        })
    }

    /// Aligned text table: one row per joint, then the average.
    pub fn table(&self) -> String {
        let width = self.per_joint_mm.keys().map(String::len).max().unwrap_or(5).max("Average".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$} | {:>10}", "Joint", "Error (mm)");
        let _ = writeln!(out, "{}-+-{}", "-".repeat(width), "-".repeat(10));
        for (name, cell) in &self.per_joint_mm {
            match cell.value() {
                Some(v) => {
                    let _ = writeln!(out, "{name:<width$} | {v:>10.3}");
                }
                None => {
                    let _ = writeln!(out, "{name:<width$} | {:>10}", "-");
                }
            }
        }
        let _ = writeln!(out, "{}-+-{}", "-".repeat(width), "-".repeat(10));
        let _ = writeln!(out, "{:<width$} | {:>10.3}", "Average", self.avg_mm);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Prediction/ground-truth pairs for every view whose root joint is both
/// detected and present in `gt3d`. Ground truth is taken root-relative in
/// that view's camera frame.
pub fn evaluation_pairs<T: Real>(
    model: &Model<T>,
    frames: &[MultiViewFrame<f64>],
) -> Result<Vec<(Pose3<T>, Pose3<T>)>> {
    let root = model.stats.root;
    let mut pairs = Vec::new();
    for f in frames {
        let Some(gt) = f.gt3d.as_ref() else { continue };
        if !gt.is_visible(root) {
            continue;
        }
        let views: Vec<_> = f.views.iter().map(|v| v.cast()).collect();
        let preds = model.predict_views(&views)?;
        for (v, pred) in f.views.iter().zip(preds) {
            let Some(pred) = pred else { continue };
            let r = v.camera.rotation();
            let origin = gt.joints[root];
            let joints = gt.joints.iter().map(|&p| r.mul_vec(sub3(p, origin)).map(T::lit)).collect();
            let mut rel = Pose3::new(joints, gt.mask.clone(), crate::pose::Flavor::Relative, crate::pose::CoordFrame::Camera)?;
            rel.joints[root] = [T::zero(); 3];
            pairs.push((pred, rel));
        }
    }
    Ok(pairs)
}

/// Per-joint errors of `model` over every evaluable view of `frames`.
pub fn per_joint_report<T: Real>(model: &Model<T>, frames: &[MultiViewFrame<f64>]) -> Result<EvalReport> {
    let pairs = evaluation_pairs(model, frames)?;
    let mut report = EvalReport::from_pairs(&pairs, model.stats.root)?;
    report.meta.mode = Some(format!("{:?}", model.config.mode).to_lowercase());
    report.meta.seed = Some(model.config.seed);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{CoordFrame, Flavor};

    fn rel(joints: Vec<[f64; 3]>) -> Pose3<f64> {
        Pose3::visible(joints, Flavor::Relative, CoordFrame::Camera)
    }

    #[test]
    fn identical_poses_score_zero() {
        let p = rel(vec![[1.0, 2.0, 3.0], [0.0; 3], [-4.0, 5.0, 6.0]]);
        assert_eq!(mpjpe(&p, &p, 1).unwrap(), 0.0);
    }

    #[test]
    fn uniform_offset() {
        let gt = rel(vec![[1.0, 2.0, 3.0], [0.0; 3], [-4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]);
        let mut pred = gt.clone();
        for (j, p) in pred.joints.iter_mut().enumerate() {
            if j != 1 {
                p[0] += 3.0;
            }
        }
        assert!((mpjpe(&pred, &gt, 1).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn arithmetic_mean_of_joint_errors() {
        let gt = rel(vec![[0.0; 3], [0.0; 3], [0.0; 3]]);
        let pred = rel(vec![[1.0, 0.0, 0.0], [0.0; 3], [0.0, 3.0, 0.0]]);
        assert_eq!(mpjpe(&pred, &gt, 1).unwrap(), 2.0);
    }

    #[test]
    fn masked_gt_joints_ignored_and_empty_is_undefined() {
        let mut gt = rel(vec![[0.0; 3], [0.0; 3], [0.0; 3]]);
        gt.mask[2] = false;
        let pred = rel(vec![[1.0, 0.0, 0.0], [0.0; 3], [100.0, 0.0, 0.0]]);
        assert_eq!(mpjpe(&pred, &gt, 1).unwrap(), 1.0);
        gt.mask[0] = false;
        assert!(matches!(mpjpe(&pred, &gt, 1), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn report_average_matches_sample_mean() {
        let gt = rel(vec![[0.0; 3]; 18]);
        let pairs: Vec<_> = (0..5)
            .map(|k| {
                let mut pred = gt.clone();
                for (j, p) in pred.joints.iter_mut().enumerate() {
                    if j != 1 {
                        p[2] = (k * j) as f64;
                    }
                }
                (pred, gt.clone())
            })
            .collect();
        let report = EvalReport::from_pairs(&pairs, 1).unwrap();
        let mean: f64 = pairs.iter().map(|(p, g)| mpjpe(p, g, 1).unwrap()).sum::<f64>() / 5.0;
        assert!((report.avg_mm - mean).abs() < 1e-9);
        assert_eq!(report.per_joint_mm["Neck"], JointCell::DASH);
        assert_eq!(report.per_joint_mm["Nose"], JointCell::Value(0.0));
        assert_eq!(report.n_samples, 5);
        assert!(report.table().contains("Neck"));
    }

    #[test]
    fn report_json_round_trip() {
        let gt = rel(vec![[0.0; 3]; 18]);
        let mut pred = gt.clone();
        pred.joints[4] = [0.1, 0.2, 1.0 / 3.0];
        let mut report = EvalReport::from_pairs(&[(pred, gt)], 1).unwrap();
        report.meta.model = Some("m.json".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        report.save(&path).unwrap();
        assert_eq!(EvalReport::load(&path).unwrap(), report);
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["per_joint_mm"]["Neck"], "-");
    }
}
