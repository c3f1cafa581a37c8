//! Multi-view frame datasets.
//!
//! On disk a dataset is JSON Lines, one frame per line:
//!
//! ```json
//! {"seq":"s0","frame":0,
//!  "views":[{"cam":"c0","R":[9 row-major],"t":[3],"K":[9 row-major],
//!            "joints2d":[[x,y] | null, ...],"conf":[...]}],
//!  "gt3d":[[x,y,z] | null, ...]}
//! ```
//!
//! Millimetres for 3D points and translations, pixels for detections and `K`.
//! `null` marks a missing joint; `gt3d` is optional.

mod batch;
pub mod synth;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraParams, Mat3};
use crate::pose::{CoordFrame, Flavor, Pose, Pose2, Pose3};
use crate::scalar::Real;

pub use batch::{batch_iter, split_dataset, Batch, BatchFrame, Split};
pub use synth::{synth_generate, SynthConfig};

pub const MAX_VIEWS: usize = 512;

/// One calibrated camera and its absolute 2D detection.
#[derive(Debug, Clone, PartialEq)]
pub struct View<T> {
    pub camera: CameraParams<T>,
    pub detection: Pose2<T>,
    pub confidence: Vec<T>,
}

impl<T: Real> View<T> {
    pub fn cast<U: Real>(&self) -> View<U> {
        View {
            camera: self.camera.cast(),
            detection: self.detection.cast(),
            confidence: self.confidence.iter().map(|c| U::lit(c.as_f64())).collect(),
        }
    }
}

/// All views of one time instant, with an optional absolute world pose.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewFrame<T> {
    pub seq: String,
    pub frame: u64,
    pub views: Vec<View<T>>,
    pub gt3d: Option<Pose3<T>>,
}

impl<T: Real> MultiViewFrame<T> {
    pub fn num_joints(&self) -> usize {
        self.views.first().map_or(0, |v| v.detection.num_joints())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::FrameInvariant {
            seq: self.seq.clone(),
            frame: self.frame,
            reason,
        };
        if self.views.is_empty() || self.views.len() > MAX_VIEWS {
            return Err(fail(format!("{} views (allowed 1..={MAX_VIEWS})", self.views.len())));
        }
        let nj = self.num_joints();
        let mut ids = HashSet::new();
        for v in &self.views {
            if v.detection.num_joints() != nj || v.confidence.len() != nj {
                return Err(fail(format!("view `{}` does not have {nj} joints", v.camera.id())));
            }
            if !ids.insert(v.camera.id()) {
                return Err(fail(format!("duplicate camera id `{}`", v.camera.id())));
            }
            for (j, p) in v.detection.joints.iter().enumerate() {
                if v.detection.mask[j] && !p.iter().all(|c| c.is_finite()) {
                    return Err(fail(format!("non-finite detection for joint {j}")));
                }
            }
            if v.confidence.iter().any(|&c| !(c >= T::zero() && c <= T::one())) {
                return Err(fail("confidence outside [0, 1]".into()));
            }
        }
        if let Some(gt) = &self.gt3d {
            if gt.num_joints() != nj {
                return Err(fail(format!("gt3d has {} joints, detections {nj}", gt.num_joints())));
            }
            if gt.joints.iter().zip(&gt.mask).any(|(p, &m)| m && !p.iter().all(|c| c.is_finite())) {
                return Err(fail("non-finite gt3d".into()));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> MultiViewFrame<U> {
        MultiViewFrame {
            seq: self.seq.clone(),
            frame: self.frame,
            views: self.views.iter().map(View::cast).collect(),
            gt3d: self.gt3d.as_ref().map(Pose::cast),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawView {
    cam: String,
    #[serde(rename = "R")]
    rotation: [f64; 9],
    t: [f64; 3],
    #[serde(rename = "K")]
    intrinsics: [f64; 9],
    joints2d: Vec<Option<[f64; 2]>>,
    conf: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrame {
    seq: String,
    frame: u64,
    views: Vec<RawView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt3d: Option<Vec<Option<[f64; 3]>>>,
}

fn masked<const D: usize>(joints: &[Option<[f64; D]>]) -> (Vec<[f64; D]>, Vec<bool>) {
    joints
        .iter()
        .map(|j| match j {
            Some(p) => (*p, true),
            None => ([0.0; D], false),
        })
        .unzip()
}

fn to_options<const D: usize>(pose: &Pose<f64, D>) -> Vec<Option<[f64; D]>> {
    pose.joints
        .iter()
        .zip(&pose.mask)
        .map(|(p, &m)| m.then_some(*p))
        .collect()
}

impl RawFrame {
    fn into_frame(self) -> Result<MultiViewFrame<f64>> {
        let (seq, frame_id) = (self.seq.clone(), self.frame);
        let views = self
            .views
            .into_iter()
            .map(|v| {
                let camera = CameraParams::new(
                    v.cam,
                    Mat3::from_row_major(&v.rotation),
                    v.t,
                    Mat3::from_row_major(&v.intrinsics),
                )
                .map_err(|e| Error::FrameInvariant {
                    seq: seq.clone(),
                    frame: frame_id,
                    reason: e.to_string(),
                })?;
                let (joints, mask) = masked(&v.joints2d);
                Ok(View {
                    camera,
                    detection: Pose::new(joints, mask, Flavor::Absolute, CoordFrame::Image)?,
                    confidence: v.conf,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let gt3d = match self.gt3d {
            Some(g) => {
                let (joints, mask) = masked(&g);
                Some(Pose::new(joints, mask, Flavor::Absolute, CoordFrame::World)?)
            }
            None => None,
        };
        let frame = MultiViewFrame {
            seq: self.seq,
            frame: self.frame,
            views,
            gt3d,
        };
        frame.validate()?;
        Ok(frame)
    }

    fn from_frame(frame: &MultiViewFrame<f64>) -> Self {
        RawFrame {
            seq: frame.seq.clone(),
            frame: frame.frame,
            views: frame
                .views
                .iter()
                .map(|v| RawView {
                    cam: v.camera.id().to_string(),
                    rotation: v.camera.rotation().to_row_major(),
                    t: v.camera.translation(),
                    intrinsics: v.camera.intrinsics().to_row_major(),
                    joints2d: to_options(&v.detection),
                    conf: v.confidence.clone(),
                })
                .collect(),
            gt3d: frame.gt3d.as_ref().map(to_options),
        }
    }
}

/// Parses and validates a JSONL dataset from any reader.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<Vec<MultiViewFrame<f64>>> {
    let mut frames = Vec::new();
    let mut num_joints: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let raw: RawFrame = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let frame = raw.into_frame()?;
        let nj = frame.num_joints();
        match num_joints {
            None => num_joints = Some(nj),
            Some(expected) if expected != nj => {
                return Err(Error::JointCount { expected, found: nj });
            }
            Some(_) => {}
        }
        frames.push(frame);
    }
    if frames.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(frames)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<MultiViewFrame<f64>>> {
    read_dataset(BufReader::new(File::open(path)?))
}

pub fn write_dataset<W: Write>(mut writer: W, frames: &[MultiViewFrame<f64>]) -> Result<()> {
    for frame in frames {
        serde_json::to_writer(&mut writer, &RawFrame::from_frame(frame))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, frames: &[MultiViewFrame<f64>]) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), frames)
}
