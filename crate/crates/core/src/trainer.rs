//! Weakly- and strongly-supervised training loops.
//!
//! Both modes share the network, optimizer, learning-rate schedule, batching
//! and early stopping; they differ only in the per-batch objective and the
//! validation metric. The weak path is built from views alone: frames are
//! stripped of their 3D annotation before anything else touches them.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{batch_iter, Batch, MultiViewFrame, View};
use crate::error::{Error, Result};
use crate::geometry::{sub3, Projection, Vec3};
use crate::losses::{huber, huber_grad, total_loss, LossConfig};
use crate::model::Model;
use crate::net::{Architecture, MlpParams, BN_MOMENTUM};
use crate::optim::{lr_at_epoch, AdamState};
use crate::pose::{compute_norm_stats, CoordFrame, Flavor, NormStats, Pose, Pose2, Pose3};
use crate::scalar::Real;
use crate::triangulate::{reconstruct_root, triangulate_pose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Weak,
    Strong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lambda: f64,
    pub alpha0: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub frames_per_batch: usize,
    pub views_per_frame: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    pub huber_delta: f64,
    pub warmup_epochs: usize,
    /// Projection used during warm-up: `scaled_orthographic` or `orthographic`.
    pub warmup_projection: Projection,
    pub patience: usize,
    pub root_index: usize,
    pub seed: u64,
    /// Treat the mean pose as a constant target in the multi-view loss.
    pub detach_mean: bool,
    /// Triangulate each frame's root once instead of every time it is batched.
    pub cache_root: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Weak,
            lambda: 0.8,
            alpha0: 5e-4,
            gamma: 0.96,
            epochs: 100,
            frames_per_batch: 8,
            views_per_frame: 16,
            hidden_dim: crate::net::DEFAULT_HIDDEN,
            num_blocks: 2,
            dropout: crate::net::DEFAULT_DROPOUT,
            weight_decay: 1e-4,
            huber_delta: 1.0,
            warmup_epochs: 5,
            warmup_projection: Projection::ScaledOrthographic,
            patience: 10,
            root_index: crate::pose::DEFAULT_ROOT,
            seed: 0,
            detach_mean: false,
            cache_root: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) {
            return Err(Error::Config("huber_delta must be positive".into()));
        }
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) || !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("alpha0 must be positive and gamma in (0, 1]".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        for (name, n) in [
            ("epochs", self.epochs),
            ("frames_per_batch", self.frames_per_batch),
            ("views_per_frame", self.views_per_frame),
            ("hidden_dim", self.hidden_dim),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.warmup_projection == Projection::Perspective {
            return Err(Error::Config("warmup_projection must be depth independent".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn architecture(&self, num_joints: usize) -> Architecture {
        Architecture {
            num_blocks: self.num_blocks,
            ..Architecture::for_joints(num_joints, self.hidden_dim, self.dropout)
        }
    }
}

/// `warmup` for the first `warmup_epochs` epochs, perspective afterwards.
pub fn projection_for_epoch(epoch: usize, warmup_epochs: usize, warmup: Projection) -> Projection {
    if epoch < warmup_epochs {
        warmup
    } else {
        Projection::Perspective
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub stop: bool,
    pub best_epoch: usize,
}

/// Stop once the best (lowest, earliest on ties) validation value is
/// `max(patience, 1)` epochs old. `None` for an empty history.
pub fn early_stop(metrics: &[f64], patience: usize) -> Option<StopDecision> {
    let last = metrics.len().checked_sub(1)?;
    let mut best_epoch = 0;
    for (e, &m) in metrics.iter().enumerate() {
        if m < metrics[best_epoch] || (metrics[best_epoch].is_nan() && !m.is_nan()) {
            best_epoch = e;
        }
    }
    Some(StopDecision {
        stop: last - best_epoch >= patience.max(1),
        best_epoch,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 0-based index of the epoch.
    pub epoch: usize,
    pub lr: f64,
    pub projection: Projection,
    /// Mean over frames (weak) or view samples (strong) of the training objective.
    pub train_total: f64,
    /// Multi-view and re-projection parts; NaN in strong mode.
    pub train_lm: f64,
    pub train_lr: f64,
    /// Weak: mean re-projection loss (pixels) over validation frames.
    /// Strong: mean MPJPE (mm) over validation samples.
    pub val_metric: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn val_metrics(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.val_metric).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,lr,proj,train_total,train_LM,train_LR,val_metric")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.epoch, r.lr, r.projection, r.train_total, r.train_lm, r.train_lr, r.val_metric
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Callbacks into the training loop.
#[derive(Default)]
pub struct TrainHooks<'a, T> {
    /// Runs once on the freshly initialized parameters.
    pub init: Option<Box<dyn FnMut(&mut MlpParams<T>, &NormStats<T>) + 'a>>,
    /// Runs after every epoch with the parameters at that point.
    pub on_epoch: Option<Box<dyn FnMut(&EpochRecord, &MlpParams<T>) + 'a>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Best-validation checkpoint.
    pub model: Model<T>,
    pub initial_params: MlpParams<T>,
    pub final_params: MlpParams<T>,
    pub history: TrainHistory,
}

/// Camera-frame root-relative pose `R (W - W_root)`; `None` without a root.
fn camera_relative(world: &Pose3<f64>, view: &View<f64>, root: usize) -> Option<Pose3<f64>> {
    if !world.is_visible(root) {
        return None;
    }
    let r = view.camera.rotation();
    let origin = world.joints[root];
    let joints = world
        .joints
        .iter()
        .enumerate()
        .map(|(j, &p)| if j == root { [0.0; 3] } else { r.mul_vec(sub3(p, origin)) })
        .collect();
    Pose::new(joints, world.mask.clone(), Flavor::Relative, CoordFrame::Camera).ok()
}

fn relative_detection(view: &View<f64>, root: usize) -> Option<Pose2<f64>> {
    view.detection.is_visible(root).then(|| view.detection.to_relative(root).ok()).flatten()
}

/// Normalization statistics from 2D detections and per-frame world poses.
fn stats_from(frames: &[MultiViewFrame<f64>], worlds: &[Option<Pose3<f64>>], root: usize) -> Result<NormStats<f64>> {
    let mut p2 = Vec::new();
    let mut p3 = Vec::new();
    for (f, world) in frames.iter().zip(worlds) {
        for v in &f.views {
            if let Some(d) = relative_detection(v, root) {
                p2.push(d);
            }
            if let Some(x) = world.as_ref().and_then(|w| camera_relative(w, v, root)) {
                p3.push(x);
            }
        }
    }
    let nj = frames.first().map_or(0, |f| f.num_joints());
    if root >= nj {
        return Err(Error::MissingRoot { root });
    }
    compute_norm_stats(&p2.iter().collect::<Vec<_>>(), &p3.iter().collect::<Vec<_>>(), root)
}

fn input_row<T: Real>(stats: &NormStats<T>, view: &View<f64>, root: usize) -> Result<Option<Vec<T>>> {
    match relative_detection(view, root) {
        Some(d) => stats.network_input(&d.cast()).map(Some),
        None => Ok(None),
    }
}

pub(crate) struct Group<T> {
    frame: usize,
    views: Vec<usize>,
    rows: Range<usize>,
    root: Option<Vec3<T>>,
}

pub(crate) struct Assembled<T> {
    pub(crate) input: Array2<T>,
    pub(crate) groups: Vec<Group<T>>,
    skipped: usize,
}

#[derive(Default)]
pub(crate) struct BatchLoss {
    pub(crate) total: f64,
    lm: f64,
    lr: f64,
    count: usize,
    skipped: usize,
}

pub(crate) trait Objective<T: Real> {
    fn assemble(&self, batch: &Batch) -> Result<Assembled<T>>;
    /// Loss sums and the gradient with respect to the normalized outputs,
    /// already divided by the number of loss units.
    fn loss_grad(
        &self,
        assembled: &Assembled<T>,
        output: &Array2<T>,
        projection: Projection,
    ) -> Result<(BatchLoss, Array2<T>)>;
    fn validate(&self, params: &MlpParams<T>) -> Result<f64>;
}

fn stack_rows<T: Real>(rows: &[&[T]], width: usize) -> Result<Array2<T>> {
    let flat: Vec<T> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Array2::from_shape_vec((rows.len(), width), flat).map_err(|e| Error::Shape(e.to_string()))
}

/// Scales `∂L/∂X` (mm, per joint) into `∂L/∂X_N` for one output row; the
/// root channel carries no gradient because its output is overwritten.
fn output_grad_row<T: Real>(stats: &NormStats<T>, grads: &[Vec3<T>], scale: T, out: &mut [T]) {
    for (j, g) in grads.iter().enumerate() {
        for c in 0..3 {
            out[3 * j + c] = if j == stats.root {
                T::zero()
            } else {
                g[c] * stats.std_3d[j][c] * scale
            };
        }
    }
}

pub(crate) struct Weak<'a, T> {
    cfg: &'a TrainConfig,
    frames: Vec<MultiViewFrame<f64>>,
    views_t: Vec<Vec<View<T>>>,
    inputs: Vec<Vec<Option<Vec<T>>>>,
    cached_roots: Vec<Option<Vec3<T>>>,
    pub(crate) stats: NormStats<T>,
    val: WeakValidation<T>,
}

struct WeakValidation<T> {
    views: Vec<Vec<View<T>>>,
    roots: Vec<Vec3<T>>,
    /// Rows of `input` for each frame.
    rows: Vec<Range<usize>>,
    input: Array2<T>,
}

fn strip_annotations(frames: &[MultiViewFrame<f64>]) -> Vec<MultiViewFrame<f64>> {
    frames
        .iter()
        .map(|f| MultiViewFrame {
            seq: f.seq.clone(),
            frame: f.frame,
            views: f.views.clone(),
            gt3d: None,
        })
        .collect()
}

fn weak_validation<T: Real>(frames: &[MultiViewFrame<f64>], stats: &NormStats<T>, root: usize) -> Result<WeakValidation<T>> {
    let mut views = Vec::new();
    let mut roots = Vec::new();
    let mut rows = Vec::new();
    let mut flat: Vec<Vec<T>> = Vec::new();
    for f in frames {
        let Ok(r) = reconstruct_root(f, root) else { continue };
        let usable: Vec<&View<f64>> = f.views.iter().filter(|v| v.detection.is_visible(root)).collect();
        if usable.is_empty() {
            continue;
        }
        let start = flat.len();
        for v in &usable {
            flat.push(input_row(stats, v, root)?.expect("root visible"));
        }
        rows.push(start..flat.len());
        views.push(usable.iter().map(|v| v.cast()).collect());
        roots.push(r.point.map(T::lit));
    }
    if rows.is_empty() {
        return Err(Error::Training("no validation frame has a reconstructable root".into()));
    }
    let width = stats.num_joints() * 2;
    let refs: Vec<&[T]> = flat.iter().map(Vec::as_slice).collect();
    Ok(WeakValidation {
        views,
        roots,
        rows,
        input: stack_rows(&refs, width)?,
    })
}

impl<'a, T: Real> Weak<'a, T> {
    pub(crate) fn new(train: &[MultiViewFrame<f64>], val: &[MultiViewFrame<f64>], cfg: &'a TrainConfig) -> Result<Self> {
        let root = cfg.root_index;
        let frames = strip_annotations(train);
        let val = strip_annotations(val);
        let worlds: Vec<Option<Pose3<f64>>> = frames.iter().map(|f| triangulate_pose(f).ok().map(|r| r.pose)).collect();
        let stats: NormStats<T> = stats_from(&frames, &worlds, root)?.cast();
        let inputs = frames
            .iter()
            .map(|f| f.views.iter().map(|v| input_row(&stats, v, root)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let cached_roots = if cfg.cache_root {
            frames
                .iter()
                .map(|f| reconstruct_root(f, root).ok().map(|p| p.point.map(T::lit)))
                .collect()
        } else {
            Vec::new()
        };
        let views_t = frames.iter().map(|f| f.views.iter().map(View::cast).collect()).collect();
        let val = weak_validation(&val, &stats, root)?;
        Ok(Weak {
            cfg,
            frames,
            views_t,
            inputs,
            cached_roots,
            stats,
            val,
        })
    }

    /// Replaces the calibration the loss sees; inputs, statistics and roots
    /// keep the calibration they were built from.
    pub(crate) fn map_cameras(&mut self, f: impl Fn(&View<T>) -> Result<View<T>>) -> Result<()> {
        for views in &mut self.views_t {
            for v in views.iter_mut() {
                *v = f(v)?;
            }
        }
        Ok(())
    }

    fn root_of(&self, frame: usize) -> Option<Vec3<T>> {
        if self.cfg.cache_root {
            self.cached_roots[frame]
        } else {
            reconstruct_root(&self.frames[frame], self.cfg.root_index)
                .ok()
                .map(|p| p.point.map(T::lit))
        }
    }
}

impl<T: Real> Objective<T> for Weak<'_, T> {
    fn assemble(&self, batch: &Batch) -> Result<Assembled<T>> {
        let mut rows: Vec<&[T]> = Vec::new();
        let mut groups = Vec::new();
        let mut skipped = 0;
        for bf in &batch.frames {
            let views: Vec<usize> = bf
                .views
                .iter()
                .copied()
                .filter(|&v| self.inputs[bf.index][v].is_some())
                .collect();
            if views.len() < 2 {
                skipped += 1;
                continue;
            }
            let Some(root) = self.root_of(bf.index) else {
                skipped += 1;
                continue;
            };
            let start = rows.len();
            rows.extend(views.iter().map(|&v| self.inputs[bf.index][v].as_deref().expect("usable view")));
            groups.push(Group {
                frame: bf.index,
                views,
                rows: start..rows.len(),
                root: Some(root),
            });
        }
        Ok(Assembled {
            input: stack_rows(&rows, self.stats.num_joints() * 2)?,
            groups,
            skipped,
        })
    }

    fn loss_grad(&self, a: &Assembled<T>, output: &Array2<T>, projection: Projection) -> Result<(BatchLoss, Array2<T>)> {
        let loss_cfg = LossConfig {
            lambda: T::lit(self.cfg.lambda),
            delta: T::lit(self.cfg.huber_delta),
            projection,
            detach_mean: self.cfg.detach_mean,
        };
        let mut grad = Array2::zeros(output.raw_dim());
        let mut acc = BatchLoss {
            skipped: a.skipped,
            ..BatchLoss::default()
        };
        let scale = T::one() / T::lit(a.groups.len() as f64);
        for g in &a.groups {
            let views: Vec<View<T>> = g.views.iter().map(|&v| self.views_t[g.frame][v].clone()).collect();
            let preds = g
                .rows
                .clone()
                .map(|r| self.stats.unnormalize_3d(output.row(r).as_slice().expect("standard layout")))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = total_loss(&views, &preds, &loss_cfg, g.root.expect("weak group root"))?;
            acc.total += loss.total.as_f64();
            acc.lm += loss.multiview.as_f64();
            acc.lr += loss.reprojection.as_f64();
            acc.count += 1;
            for (k, r) in g.rows.clone().enumerate() {
                let mut row = grad.row_mut(r);
                output_grad_row(&self.stats, &grads[k], scale, row.as_slice_mut().expect("standard layout"));
            }
        }
        Ok((acc, grad))
    }

    fn validate(&self, params: &MlpParams<T>) -> Result<f64> {
        let out = params.forward_eval(self.val.input.view())?;
        let cfg = LossConfig {
            lambda: T::zero(),
            delta: T::lit(self.cfg.huber_delta),
            projection: Projection::Perspective,
            detach_mean: false,
        };
        let mut sum = 0.0;
        for ((views, rows), root) in self.val.views.iter().zip(&self.val.rows).zip(&self.val.roots) {
            let preds = rows
                .clone()
                .map(|r| self.stats.unnormalize_3d(out.row(r).as_slice().expect("standard layout")))
                .collect::<Result<Vec<_>>>()?;
            sum += total_loss(views, &preds, &cfg, *root)?.0.reprojection.as_f64();
        }
        Ok(sum / self.val.rows.len() as f64)
    }
}

/// A view sample with its normalized input and camera-frame target.
struct StrongSample<T> {
    input: Vec<T>,
    target: Vec<T>,
    target_mm: Pose3<T>,
}

struct Strong<'a, T> {
    cfg: &'a TrainConfig,
    /// Per frame, per view.
    samples: Vec<Vec<Option<StrongSample<T>>>>,
    frame_has_gt: Vec<bool>,
    stats: NormStats<T>,
    val_samples: Vec<StrongSample<T>>,
    val_input: Array2<T>,
}

fn strong_samples<T: Real>(frame: &MultiViewFrame<f64>, stats: &NormStats<T>, root: usize) -> Result<Vec<Option<StrongSample<T>>>> {
    frame
        .views
        .iter()
        .map(|v| {
            let Some(gt) = frame.gt3d.as_ref().and_then(|g| camera_relative(g, v, root)) else {
                return Ok(None);
            };
            let Some(input) = input_row(stats, v, root)? else {
                return Ok(None);
            };
            let gt = gt.cast::<T>();
            let target = stats.normalize_3d(&gt)?.joints.iter().flatten().copied().collect();
            Ok(Some(StrongSample {
                input,
                target,
                target_mm: gt,
            }))
        })
        .collect()
}

impl<'a, T: Real> Strong<'a, T> {
    fn new(train: &[MultiViewFrame<f64>], val: &[MultiViewFrame<f64>], cfg: &'a TrainConfig) -> Result<Self> {
        let root = cfg.root_index;
        let worlds: Vec<Option<Pose3<f64>>> = train.iter().map(|f| f.gt3d.clone()).collect();
        let stats: NormStats<T> = stats_from(train, &worlds, root)?.cast();
        let samples = train
            .iter()
            .map(|f| strong_samples(f, &stats, root))
            .collect::<Result<Vec<_>>>()?;
        let frame_has_gt = train.iter().map(|f| f.gt3d.is_some()).collect();
        let mut val_samples = Vec::new();
        for f in val {
            val_samples.extend(strong_samples(f, &stats, root)?.into_iter().flatten());
        }
        if val_samples.is_empty() {
            return Err(Error::Training("no validation view has 3D targets".into()));
        }
        let refs: Vec<&[T]> = val_samples.iter().map(|s| s.input.as_slice()).collect();
        let val_input = stack_rows(&refs, stats.num_joints() * 2)?;
        Ok(Strong {
            cfg,
            samples,
            frame_has_gt,
            stats,
            val_samples,
            val_input,
        })
    }
}

impl<T: Real> Objective<T> for Strong<'_, T> {
    fn assemble(&self, batch: &Batch) -> Result<Assembled<T>> {
        let mut rows: Vec<&[T]> = Vec::new();
        let mut groups = Vec::new();
        let mut skipped = 0;
        for bf in &batch.frames {
            let views: Vec<usize> = bf
                .views
                .iter()
                .copied()
                .filter(|&v| self.samples[bf.index][v].is_some())
                .collect();
            if !self.frame_has_gt[bf.index] || views.is_empty() {
                skipped += 1;
                continue;
            }
            let start = rows.len();
            rows.extend(
                views
                    .iter()
                    .map(|&v| self.samples[bf.index][v].as_ref().expect("sample").input.as_slice()),
            );
            groups.push(Group {
                frame: bf.index,
                views,
                rows: start..rows.len(),
                root: None,
            });
        }
        Ok(Assembled {
            input: stack_rows(&rows, self.stats.num_joints() * 2)?,
            groups,
            skipped,
        })
    }

    fn loss_grad(&self, a: &Assembled<T>, output: &Array2<T>, _projection: Projection) -> Result<(BatchLoss, Array2<T>)> {
        let delta = T::lit(self.cfg.huber_delta);
        let root = self.stats.root;
        let mut grad = Array2::zeros(output.raw_dim());
        let mut acc = BatchLoss {
            skipped: a.skipped,
            ..BatchLoss::default()
        };
        let scale = T::one() / T::lit(output.nrows() as f64);
        for g in &a.groups {
            for (k, r) in g.rows.clone().enumerate() {
                let s = self.samples[g.frame][g.views[k]].as_ref().expect("sample");
                let mut loss = T::zero();
                for j in (0..self.stats.num_joints()).filter(|&j| j != root && s.target_mm.mask[j]) {
                    for c in 0..3 {
                        let (o, t) = (output[[r, 3 * j + c]], s.target[3 * j + c]);
                        loss += huber(o, t, delta);
                        grad[[r, 3 * j + c]] = huber_grad(o, t, delta) * scale;
                    }
                }
                acc.total += loss.as_f64();
                acc.count += 1;
            }
        }
        acc.lm = f64::NAN;
        acc.lr = f64::NAN;
        Ok((acc, grad))
    }

    fn validate(&self, params: &MlpParams<T>) -> Result<f64> {
        let out = params.forward_eval(self.val_input.view())?;
        let mut sum = 0.0;
        for (i, s) in self.val_samples.iter().enumerate() {
            let pred = self.stats.unnormalize_3d(out.row(i).as_slice().expect("standard layout"))?;
            sum += crate::eval::mpjpe(&pred, &s.target_mm, self.stats.root)?;
        }
        Ok(sum / self.val_samples.len() as f64)
    }
}

fn run<T: Real>(
    objective: &dyn Objective<T>,
    stats: &NormStats<T>,
    frames_for_batching: &[MultiViewFrame<f64>],
    cfg: &TrainConfig,
    hooks: &mut TrainHooks<'_, T>,
) -> Result<TrainOutcome<T>> {
    let arch = cfg.architecture(stats.num_joints());
    let mut params = MlpParams::<T>::init_xavier(arch, cfg.seed)?;
    if let Some(init) = hooks.init.as_mut() {
        init(&mut params, stats);
    }
    let initial_params = params.clone();
    let sizes: Vec<usize> = params.tensors_mut().iter().map(|t| t.values.len()).collect();
    let mut adam = AdamState::<T>::new(&sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let momentum = T::lit(BN_MOMENTUM);
    let weight_decay = T::lit(cfg.weight_decay);

    let mut history = TrainHistory::default();
    let mut best: Option<(usize, f64, MlpParams<T>)> = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg.alpha0, cfg.gamma, epoch);
        let projection = projection_for_epoch(epoch, cfg.warmup_epochs, cfg.warmup_projection);
        let mut sums = BatchLoss::default();
        for batch in batch_iter(frames_for_batching, cfg.frames_per_batch, cfg.views_per_frame, cfg.seed, epoch) {
            let assembled = objective.assemble(&batch)?;
            sums.skipped += assembled.skipped;
            if assembled.groups.is_empty() {
                continue;
            }
            let (out, cache) = params.forward_train(assembled.input.view(), &mut rng)?;
            let (loss, grad_out) = objective.loss_grad(&assembled, &out, projection)?;
            let (grads, _) = params.backward(&cache, grad_out.view())?;
            let grad_refs = grads.tensors();
            adam.step(&mut params.tensors_mut(), &grad_refs, T::lit(lr), weight_decay)?;
            params.update_running_stats(&cache.batch_stats(), momentum)?;
            sums.total += loss.total;
            sums.lm += loss.lm;
            sums.lr += loss.lr;
            sums.count += loss.count;
        }
        if sums.count == 0 {
            return Err(Error::Training(format!("epoch {epoch}: every frame was skipped")));
        }
        if sums.skipped > 0 {
            log::debug!("epoch {epoch}: skipped {} frames", sums.skipped);
        }
        let n = sums.count as f64;
        let val_metric = objective.validate(&params)?;
        let record = EpochRecord {
            epoch,
            lr,
            projection,
            train_total: sums.total / n,
            train_lm: sums.lm / n,
            train_lr: sums.lr / n,
            val_metric,
            skipped: sums.skipped,
        };
        log::info!(
            "epoch {epoch} lr {lr:.3e} {projection} loss {:.4} val {val_metric:.4}",
            record.train_total
        );
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(&record, &params);
        }
        if best.as_ref().map_or(!val_metric.is_nan(), |b| val_metric < b.1) {
            best = Some((epoch, val_metric, params.clone()));
        }
        history.records.push(record);
        if let Some(d) = early_stop(&history.val_metrics(), cfg.patience) {
            if d.stop && epoch + 1 < cfg.epochs {
                history.stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_metric, best_params) = match best {
        Some((e, m, p)) => (Some(e), Some(m), p),
        None => (None, None, params.clone()),
    };
    history.best_epoch = best_epoch;
    Ok(TrainOutcome {
        model: Model {
            config: cfg.clone(),
            params: best_params,
            stats: stats.clone(),
            best_epoch,
            val_metric: best_metric,
        },
        initial_params,
        final_params: params,
        history,
    })
}

fn check_inputs(train: &[MultiViewFrame<f64>], val: &[MultiViewFrame<f64>], cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let nj = train[0].num_joints();
    if let Some(f) = train.iter().chain(val).find(|f| f.num_joints() != nj) {
        return Err(Error::JointCount {
            expected: nj,
            found: f.num_joints(),
        });
    }
    if cfg.root_index >= nj {
        return Err(Error::MissingRoot { root: cfg.root_index });
    }
    Ok(())
}

/// Trains from 2D detections and calibration only. `gt3d` is discarded on entry.
pub fn train_weak<T: Real>(
    train: &[MultiViewFrame<f64>],
    val: &[MultiViewFrame<f64>],
    cfg: &TrainConfig,
    hooks: &mut TrainHooks<'_, T>,
) -> Result<TrainOutcome<T>> {
    check_inputs(train, val, cfg)?;
    let objective = Weak::<T>::new(train, val, cfg)?;
    let stats = objective.stats.clone();
    let frames = objective.frames.clone();
    run(&objective, &stats, &frames, cfg, hooks)
}

/// Trains against the frames' `gt3d` poses (typically triangulated).
pub fn train_strong<T: Real>(
    train: &[MultiViewFrame<f64>],
    val: &[MultiViewFrame<f64>],
    cfg: &TrainConfig,
    hooks: &mut TrainHooks<'_, T>,
) -> Result<TrainOutcome<T>> {
    check_inputs(train, val, cfg)?;
    let objective = Strong::<T>::new(train, val, cfg)?;
    let stats = objective.stats.clone();
    run(&objective, &stats, train, cfg, hooks)
}

/// Dispatches on `cfg.mode`.
pub fn train<T: Real>(
    train: &[MultiViewFrame<f64>],
    val: &[MultiViewFrame<f64>],
    cfg: &TrainConfig,
    hooks: &mut TrainHooks<'_, T>,
) -> Result<TrainOutcome<T>> {
    match cfg.mode {
        Mode::Weak => train_weak(train, val, cfg, hooks),
        Mode::Strong => train_strong(train, val, cfg, hooks),
    }
}

/// Recomputes the validation metric the trainer would record for `model`.
pub fn validation_metric<T: Real>(model: &Model<T>, val: &[MultiViewFrame<f64>]) -> Result<f64> {
    let cfg = &model.config;
    match cfg.mode {
        Mode::Weak => {
            let v = weak_validation(&strip_annotations(val), &model.stats, cfg.root_index)?;
            let objective = Weak {
                cfg,
                frames: Vec::new(),
                views_t: Vec::new(),
                inputs: Vec::new(),
                cached_roots: Vec::new(),
                stats: model.stats.clone(),
                val: v,
            };
            objective.validate(&model.params)
        }
        Mode::Strong => {
            let mut val_samples = Vec::new();
            for f in val {
                val_samples.extend(strong_samples(f, &model.stats, cfg.root_index)?.into_iter().flatten());
            }
            if val_samples.is_empty() {
                return Err(Error::Training("no validation view has 3D targets".into()));
            }
            let refs: Vec<&[T]> = val_samples.iter().map(|s| s.input.as_slice()).collect();
            let objective = Strong {
                cfg,
                samples: Vec::new(),
                frame_has_gt: Vec::new(),
                stats: model.stats.clone(),
                val_input: stack_rows(&refs, model.stats.num_joints() * 2)?,
                val_samples,
            };
            objective.validate(&model.params)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{split_dataset, synth_generate, SynthConfig};

    fn dataset(frames: usize, seed: u64) -> (Vec<MultiViewFrame<f64>>, Vec<MultiViewFrame<f64>>) {
        let data = synth_generate(&SynthConfig {
            frames,
            frames_per_sequence: 10,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let (tr, va, _) = split_dataset(&data, [0.8, 0.1, 0.1]).unwrap().select(&data);
        (tr, va)
    }

    fn small(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: 3,
            hidden_dim: 32,
            dropout: 0.2,
            warmup_epochs: 1,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn csv(h: &TrainHistory) -> Vec<u8> {
        let mut out = Vec::new();
        h.write_csv(&mut out).unwrap();
        out
    }

    fn model_bytes(m: &Model<f64>) -> Vec<u8> {
        let mut out = Vec::new();
        m.write(&mut out).unwrap();
        out
    }

    #[test]
    fn warmup_schedule() {
        for warm in [Projection::Orthographic, Projection::ScaledOrthographic] {
            assert_eq!(projection_for_epoch(0, 5, warm), warm);
            assert_eq!(projection_for_epoch(4, 5, warm), warm);
            assert_eq!(projection_for_epoch(5, 5, warm), Projection::Perspective);
            for k in [0, 1, 50] {
                assert_eq!(projection_for_epoch(k, 0, warm), Projection::Perspective);
            }
        }
    }

    #[test]
    fn early_stop_rules() {
        assert_eq!(early_stop(&[], 2), None);
        assert_eq!(
            early_stop(&[5.0, 4.0, 4.1], 2),
            Some(StopDecision { stop: false, best_epoch: 1 })
        );
        assert_eq!(
            early_stop(&[5.0, 4.0, 4.1, 4.2], 2),
            Some(StopDecision { stop: true, best_epoch: 1 })
        );
        let decreasing: Vec<f64> = (0..50).map(|i| 100.0 - i as f64).collect();
        for n in 1..=decreasing.len() {
            assert!(!early_stop(&decreasing[..n], 3).unwrap().stop);
        }
        assert!(!early_stop(&[3.0, 2.0], 0).unwrap().stop);
        assert!(early_stop(&[3.0, 2.0, 2.0], 0).unwrap().stop);
        // ties keep the earliest epoch
        assert_eq!(early_stop(&[3.0, 1.0, 1.0, 1.0], 5).unwrap().best_epoch, 1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lambda: 1.5, ..TrainConfig::default() },
            TrainConfig { dropout: 1.0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { gamma: 0.0, ..TrainConfig::default() },
            TrainConfig { warmup_projection: Projection::Perspective, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        let parsed: TrainConfig = serde_json::from_str(r#"{"mode": "strong", "epochs": 7}"#).unwrap();
        assert_eq!((parsed.mode, parsed.epochs, parsed.lambda), (Mode::Strong, 7, 0.8));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 7}"#).is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"warmup_projection": "orthographic"}"#).unwrap();
        assert_eq!(parsed.warmup_projection, Projection::Orthographic);
    }

    #[test]
    fn same_seed_same_result() {
        let (tr, va) = dataset(60, 1);
        for mode in [Mode::Weak, Mode::Strong] {
            let mut tr = tr.clone();
            let mut va = va.clone();
            if mode == Mode::Strong {
                for f in tr.iter_mut().chain(va.iter_mut()) {
                    f.gt3d = Some(triangulate_pose(f).unwrap().pose);
                }
            }
            let cfg = small(mode);
            let a = train::<f64>(&tr, &va, &cfg, &mut TrainHooks::default()).unwrap();
            let b = train::<f64>(&tr, &va, &cfg, &mut TrainHooks::default()).unwrap();
            assert_eq!(csv(&a.history), csv(&b.history));
            assert_eq!(model_bytes(&a.model), model_bytes(&b.model));
            let c = train::<f64>(&tr, &va, &TrainConfig { seed: 6, ..cfg }, &mut TrainHooks::default()).unwrap();
            assert_ne!(model_bytes(&a.model), model_bytes(&c.model));
        }
    }

    #[test]
    fn weak_training_ignores_ground_truth() {
        let (tr, va) = dataset(60, 2);
        let cfg = small(Mode::Weak);
        let base = train::<f64>(&tr, &va, &cfg, &mut TrainHooks::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let scramble = |frames: &[MultiViewFrame<f64>], rng: &mut ChaCha8Rng| -> Vec<MultiViewFrame<f64>> {
            use rand::Rng;
            frames
                .iter()
                .map(|f| {
                    let mut f = f.clone();
                    if let Some(g) = f.gt3d.as_mut() {
                        for p in g.joints.iter_mut() {
                            *p = std::array::from_fn(|_| rng.gen_range(-1e4..1e4));
                        }
                    }
                    f
                })
                .collect()
        };
        let tr2 = scramble(&tr, &mut rng);
        let va2 = scramble(&va, &mut rng);
        let other = train::<f64>(&tr2, &va2, &cfg, &mut TrainHooks::default()).unwrap();
        assert_eq!(csv(&base.history), csv(&other.history));
        assert_eq!(model_bytes(&base.model), model_bytes(&other.model));
    }

    #[test]
    fn learning_rate_follows_schedule() {
        let (tr, va) = dataset(40, 3);
        let cfg = TrainConfig { epochs: 4, gamma: 0.9, ..small(Mode::Weak) };
        let out = train::<f64>(&tr, &va, &cfg, &mut TrainHooks::default()).unwrap();
        for r in &out.history.records {
            assert_eq!(r.lr, lr_at_epoch(cfg.alpha0, cfg.gamma, r.epoch));
            assert_eq!(r.projection, projection_for_epoch(r.epoch, cfg.warmup_epochs, cfg.warmup_projection));
        }
    }

    #[test]
    fn both_modes_share_the_architecture() {
        let (mut tr, mut va) = dataset(40, 4);
        let weak = train::<f64>(&tr, &va, &small(Mode::Weak), &mut TrainHooks::default()).unwrap();
        for f in tr.iter_mut().chain(va.iter_mut()) {
            f.gt3d = Some(triangulate_pose(f).unwrap().pose);
        }
        let strong = train::<f64>(&tr, &va, &small(Mode::Strong), &mut TrainHooks::default()).unwrap();
        assert_eq!(weak.model.params.shape_manifest(), strong.model.params.shape_manifest());
    }

    #[test]
    fn checkpoint_reload_reproduces_validation_metric() {
        let (tr, va) = dataset(60, 5);
        let dir = tempfile::tempdir().unwrap();
        for mode in [Mode::Weak, Mode::Strong] {
            let out = train::<f64>(&tr, &va, &small(mode), &mut TrainHooks::default()).unwrap();
            let path = dir.path().join("m.json");
            out.model.save(&path).unwrap();
            let loaded = Model::<f64>::load(&path).unwrap();
            assert_eq!(loaded, out.model);
            let recorded = out.model.val_metric.unwrap();
            assert_eq!(recorded, out.history.records[out.model.best_epoch.unwrap()].val_metric);
            assert!((validation_metric(&loaded, &va).unwrap() - recorded).abs() <= 1e-9 * recorded.max(1.0));
        }
    }

    #[test]
    fn early_stopping_keeps_best_checkpoint() {
        let (tr, va) = dataset(40, 6);
        let cfg = TrainConfig { epochs: 30, patience: 0, alpha0: 0.05, ..small(Mode::Weak) };
        let out = train::<f64>(&tr, &va, &cfg, &mut TrainHooks::default()).unwrap();
        let metrics = out.history.val_metrics();
        assert!(out.history.stopped_early);
        assert!(metrics.len() < 30);
        let best = out.model.best_epoch.unwrap();
        assert!(metrics.iter().all(|&m| m >= metrics[best]));
        assert_eq!(out.model.val_metric, Some(metrics[best]));
    }

    #[test]
    fn missing_inputs_are_errors() {
        let (tr, va) = dataset(40, 7);
        let cfg = small(Mode::Weak);
        assert!(matches!(train::<f64>(&[], &va, &cfg, &mut TrainHooks::default()), Err(Error::EmptyDataset)));
        // strong mode without any 3D annotation
        let stripped: Vec<_> = tr.iter().map(|f| MultiViewFrame { gt3d: None, ..f.clone() }).collect();
        let val: Vec<_> = va.iter().map(|f| MultiViewFrame { gt3d: None, ..f.clone() }).collect();
        assert!(train::<f64>(&stripped, &val, &small(Mode::Strong), &mut TrainHooks::default()).is_err());
        let bad_root = TrainConfig { root_index: 40, ..cfg };
        assert!(matches!(
            train::<f64>(&tr, &va, &bad_root, &mut TrainHooks::default()),
            Err(Error::MissingRoot { .. })
        ));
    }
}
