//! Pose containers, root-relative conversion, missing-joint handling and
//! input/output normalization statistics.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Smallest standard deviation kept in [`NormStats`].
pub const SIGMA_FLOOR: f64 = 1e-6;

/// COCO "Neck".
pub const DEFAULT_ROOT: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    Absolute,
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordFrame {
    Image,
    Camera,
    World,
}

/// `N_J` joints of dimension `D` with a visibility mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose<T, const D: usize> {
    pub joints: Vec<[T; D]>,
    pub mask: Vec<bool>,
    pub flavor: Flavor,
    pub frame: CoordFrame,
}

pub type Pose2<T> = Pose<T, 2>;
pub type Pose3<T> = Pose<T, 3>;

impl<T: Real, const D: usize> Pose<T, D> {
    pub fn new(joints: Vec<[T; D]>, mask: Vec<bool>, flavor: Flavor, frame: CoordFrame) -> Result<Self> {
        if joints.len() != mask.len() {
            return Err(Error::Shape(format!(
                "{} joints but {} mask entries",
                joints.len(),
                mask.len()
            )));
        }
        Ok(Pose {
            joints,
            mask,
            flavor,
            frame,
        })
    }

    /// All joints visible.
    pub fn visible(joints: Vec<[T; D]>, flavor: Flavor, frame: CoordFrame) -> Self {
        let mask = vec![true; joints.len()];
        Pose {
            joints,
            mask,
            flavor,
            frame,
        }
    }

    pub fn zeros(num_joints: usize, flavor: Flavor, frame: CoordFrame) -> Self {
        Pose {
            joints: vec![[T::zero(); D]; num_joints],
            mask: vec![true; num_joints],
            flavor,
            frame,
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn is_visible(&self, j: usize) -> bool {
        self.mask[j]
    }

    pub fn visible_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Subtracts the root joint from every visible joint.
    ///
    /// Masked joints are set to zero. Applying it to an already relative pose
    /// is a no-op because the root is already at the origin.
    pub fn to_relative(&self, root: usize) -> Result<Self> {
        if root >= self.num_joints() || !self.mask[root] {
            return Err(Error::MissingRoot { root });
        }
        let origin = self.joints[root];
        let joints = self
            .joints
            .iter()
            .zip(&self.mask)
            .enumerate()
            .map(|(j, (p, &vis))| {
                if j == root || !vis {
                    [T::zero(); D]
                } else {
                    std::array::from_fn(|c| p[c] - origin[c])
                }
            })
            .collect();
        Ok(Pose {
            joints,
            mask: self.mask.clone(),
            flavor: Flavor::Relative,
            frame: self.frame,
        })
    }

    /// Writes the sentinel 0 into every masked joint; the mask is kept.
    pub fn fill_missing(&self) -> Self {
        let mut out = self.clone();
        for (p, &vis) in out.joints.iter_mut().zip(&self.mask) {
            if !vis {
                *p = [T::zero(); D];
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Pose<U, D> {
        Pose {
            joints: self
                .joints
                .iter()
                .map(|p| std::array::from_fn(|c| U::lit(p[c].as_f64())))
                .collect(),
            mask: self.mask.clone(),
            flavor: self.flavor,
            frame: self.frame,
        }
    }
}

/// Per-joint, per-coordinate mean and standard deviation of network inputs
/// (2D, pixels) and outputs (3D, mm), computed over the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats<T> {
    pub root: usize,
    pub mean_2d: Vec<[T; 2]>,
    pub std_2d: Vec<[T; 2]>,
    pub mean_3d: Vec<[T; 3]>,
    pub std_3d: Vec<[T; 3]>,
    /// Joints never visible in the 2D or 3D collections (their stats default to μ=0, σ=1).
    pub unseen_2d: Vec<usize>,
    pub unseen_3d: Vec<usize>,
}

fn moments<T: Real, const D: usize>(
    poses: &[&Pose<T, D>],
    num_joints: usize,
) -> (Vec<[T; D]>, Vec<[T; D]>, Vec<usize>) {
    let mut sum = vec![[0.0f64; D]; num_joints];
    let mut count = vec![0usize; num_joints];
    for pose in poses {
        for j in 0..num_joints {
            if pose.mask[j] {
                count[j] += 1;
                for c in 0..D {
                    sum[j][c] += pose.joints[j][c].as_f64();
                }
            }
        }
    }
    let mean: Vec<[f64; D]> = sum
        .iter()
        .zip(&count)
        .map(|(s, &n)| std::array::from_fn(|c| if n > 0 { s[c] / n as f64 } else { 0.0 }))
        .collect();
    let mut sq = vec![[0.0f64; D]; num_joints];
    for pose in poses {
        for j in 0..num_joints {
            if pose.mask[j] {
                for c in 0..D {
                    let d = pose.joints[j][c].as_f64() - mean[j][c];
                    sq[j][c] += d * d;
                }
            }
        }
    }
    let mut unseen = Vec::new();
    let mut mu = Vec::with_capacity(num_joints);
    let mut sigma = Vec::with_capacity(num_joints);
    for j in 0..num_joints {
        if count[j] == 0 {
            unseen.push(j);
            mu.push([T::zero(); D]);
            sigma.push([T::one(); D]);
        } else {
            let n = count[j] as f64;
            mu.push(std::array::from_fn(|c| T::lit(mean[j][c])));
            sigma.push(std::array::from_fn(|c| T::lit((sq[j][c] / n).sqrt().max(SIGMA_FLOOR))));
        }
    }
    (mu, sigma, unseen)
}

/// Population mean and standard deviation over visible entries only.
///
/// Accumulation is done in `f64` irrespective of `T`.
pub fn compute_norm_stats<T: Real>(
    poses2d: &[&Pose2<T>],
    poses3d: &[&Pose3<T>],
    root: usize,
) -> Result<NormStats<T>> {
    if poses2d.is_empty() || poses3d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let nj = poses2d[0].num_joints();
    if let Some(p) = poses2d.iter().find(|p| p.num_joints() != nj) {
        return Err(Error::JointCount {
            expected: nj,
            found: p.num_joints(),
        });
    }
    if let Some(p) = poses3d.iter().find(|p| p.num_joints() != nj) {
        return Err(Error::JointCount {
            expected: nj,
            found: p.num_joints(),
        });
    }
    if root >= nj {
        return Err(Error::MissingRoot { root });
    }
    let (mean_2d, std_2d, unseen_2d) = moments(poses2d, nj);
    let (mean_3d, std_3d, unseen_3d) = moments(poses3d, nj);
    if !unseen_2d.is_empty() || !unseen_3d.is_empty() {
        log::warn!("joints never visible: 2d {unseen_2d:?}, 3d {unseen_3d:?}");
    }
    Ok(NormStats {
        root,
        mean_2d,
        std_2d,
        mean_3d,
        std_3d,
        unseen_2d,
        unseen_3d,
    })
}

impl<T: Real> NormStats<T> {
    pub fn num_joints(&self) -> usize {
        self.mean_2d.len()
    }

    /// Unit statistics (identity normalization).
    pub fn identity(num_joints: usize, root: usize) -> Self {
        NormStats {
            root,
            mean_2d: vec![[T::zero(); 2]; num_joints],
            std_2d: vec![[T::one(); 2]; num_joints],
            mean_3d: vec![[T::zero(); 3]; num_joints],
            std_3d: vec![[T::one(); 3]; num_joints],
            unseen_2d: Vec::new(),
            unseen_3d: Vec::new(),
        }
    }

    /// `(x - μ_x) / σ_x` on visible joints, 0 on masked ones.
    pub fn normalize_2d(&self, x: &Pose2<T>) -> Result<Pose2<T>> {
        if x.flavor != Flavor::Relative {
            return Err(Error::InvalidInput("normalize_2d expects a relative pose".into()));
        }
        self.check_joints(x.num_joints())?;
        let joints = (0..x.num_joints())
            .map(|j| {
                if x.mask[j] {
                    std::array::from_fn(|c| (x.joints[j][c] - self.mean_2d[j][c]) / self.std_2d[j][c])
                } else {
                    [T::zero(); 2]
                }
            })
            .collect();
        Ok(Pose {
            joints,
            mask: x.mask.clone(),
            flavor: Flavor::Relative,
            frame: x.frame,
        })
    }

    /// Flattened network input for a relative 2D pose.
    pub fn network_input(&self, x: &Pose2<T>) -> Result<Vec<T>> {
        Ok(self.normalize_2d(x)?.joints.iter().flatten().copied().collect())
    }

    /// `(X - μ_X) / σ_X` on visible joints, 0 on masked ones.
    pub fn normalize_3d(&self, x: &Pose3<T>) -> Result<Pose3<T>> {
        self.check_joints(x.num_joints())?;
        let joints = (0..x.num_joints())
            .map(|j| {
                if x.mask[j] {
                    std::array::from_fn(|c| (x.joints[j][c] - self.mean_3d[j][c]) / self.std_3d[j][c])
                } else {
                    [T::zero(); 3]
                }
            })
            .collect();
        Ok(Pose {
            joints,
            mask: x.mask.clone(),
            flavor: Flavor::Relative,
            frame: x.frame,
        })
    }

    /// `X_N σ_X + μ_X` for a flattened network output; the root is forced to the origin.
    pub fn unnormalize_3d(&self, output: &[T]) -> Result<Pose3<T>> {
        let nj = self.num_joints();
        if output.len() != 3 * nj {
            return Err(Error::Shape(format!("expected {} outputs, got {}", 3 * nj, output.len())));
        }
        let mut joints: Vec<[T; 3]> = (0..nj)
            .map(|j| std::array::from_fn(|c| output[3 * j + c] * self.std_3d[j][c] + self.mean_3d[j][c]))
            .collect();
        joints[self.root] = [T::zero(); 3];
        Ok(Pose::visible(joints, Flavor::Relative, CoordFrame::Camera))
    }

    fn check_joints(&self, n: usize) -> Result<()> {
        if n == self.num_joints() {
            Ok(())
        } else {
            Err(Error::JointCount {
                expected: self.num_joints(),
                found: n,
            })
        }
    }

    pub fn cast<U: Real>(&self) -> NormStats<U> {
        fn c<T: Real, U: Real, const D: usize>(v: &[[T; D]]) -> Vec<[U; D]> {
            v.iter().map(|p| std::array::from_fn(|i| U::lit(p[i].as_f64()))).collect()
        }
        NormStats {
            root: self.root,
            mean_2d: c(&self.mean_2d),
            std_2d: c(&self.std_2d),
            mean_3d: c(&self.mean_3d),
            std_3d: c(&self.std_3d),
            unseen_2d: self.unseen_2d.clone(),
            unseen_3d: self.unseen_3d.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p2(joints: Vec<[f64; 2]>) -> Pose2<f64> {
        Pose::visible(joints, Flavor::Absolute, CoordFrame::Image)
    }

    fn stats_2d(mu: [f64; 2], sigma: [f64; 2]) -> NormStats<f64> {
        let mut s = NormStats::identity(1, 0);
        s.mean_2d[0] = mu;
        s.std_2d[0] = sigma;
        s
    }

    #[test]
    fn to_relative_examples() {
        let p = p2(vec![[1.0, 1.0], [3.0, 4.0]]);
        let r = p.to_relative(0).unwrap();
        assert_eq!(r.joints, vec![[0.0, 0.0], [2.0, 3.0]]);
        assert_eq!(r.flavor, Flavor::Relative);

        let centered = p2(vec![[0.0, 0.0], [3.0, 4.0]]);
        assert_eq!(centered.to_relative(0).unwrap().joints, centered.joints);

        assert_eq!(r.to_relative(0).unwrap(), r);

        let mut missing = p.clone();
        missing.mask[0] = false;
        assert!(matches!(missing.to_relative(0), Err(Error::MissingRoot { root: 0 })));
    }

    #[test]
    fn normalize_2d_examples() {
        let s = stats_2d([5.0, 5.0], [2.0, 2.0]);
        let rel = |v| Pose::visible(vec![v], Flavor::Relative, CoordFrame::Image);
        assert_eq!(s.normalize_2d(&rel([5.0, 5.0])).unwrap().joints[0], [0.0, 0.0]);
        assert_eq!(s.normalize_2d(&rel([7.0, 3.0])).unwrap().joints[0], [1.0, -1.0]);
        let mut masked = rel([999.0, 999.0]);
        masked.mask[0] = false;
        assert_eq!(s.normalize_2d(&masked).unwrap().joints[0], [0.0, 0.0]);
        assert!(s.normalize_2d(&p2(vec![[1.0, 1.0]])).is_err());
    }

    #[test]
    fn unnormalize_examples() {
        let mut s = NormStats::<f64>::identity(3, 1);
        s.mean_3d = vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]];
        s.std_3d = vec![[2.0; 3]; 3];
        let x = s.unnormalize_3d(&[0.0; 9]).unwrap();
        assert_eq!(x.joints, vec![[1.0, 2.0, 3.0], [0.0; 3], [7.0, 8.0, 9.0]]);

        let unit = NormStats::<f64>::identity(2, 0);
        let y = unit.unnormalize_3d(&[0.0, 0.0, 0.0, 4.0, -5.0, 6.0]).unwrap();
        assert_eq!(y.joints, vec![[0.0; 3], [4.0, -5.0, 6.0]]);
        assert!(unit.unnormalize_3d(&[0.0; 5]).is_err());
    }

    #[test]
    fn normalize_unnormalize_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let nj = 18;
        let mut s = NormStats::<f64>::identity(nj, DEFAULT_ROOT);
        for j in 0..nj {
            s.mean_3d[j] = std::array::from_fn(|_| rng.gen_range(-300.0..300.0));
            s.std_3d[j] = std::array::from_fn(|_| rng.gen_range(1.0..200.0));
        }
        for _ in 0..200 {
            let mut joints: Vec<[f64; 3]> =
                (0..nj).map(|_| std::array::from_fn(|_| rng.gen_range(-900.0..900.0))).collect();
            joints[DEFAULT_ROOT] = [0.0; 3];
            let pose = Pose::visible(joints, Flavor::Relative, CoordFrame::Camera);
            let n = s.normalize_3d(&pose).unwrap();
            let flat: Vec<f64> = n.joints.iter().flatten().copied().collect();
            let back = s.unnormalize_3d(&flat).unwrap();
            for j in 0..nj {
                for c in 0..3 {
                    assert!((back.joints[j][c] - pose.joints[j][c]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn stats_examples() {
        let rel2 = |v: f64, vis: bool| Pose {
            joints: vec![[0.0, 0.0], [v, v]],
            mask: vec![true, vis],
            flavor: Flavor::Relative,
            frame: CoordFrame::Image,
        };
        let rel3 = |v: f64| Pose::visible(vec![[0.0; 3], [v; 3]], Flavor::Relative, CoordFrame::Camera);

        let a = [rel2(1.0, true), rel2(3.0, true)];
        let b = [rel3(1.0), rel3(3.0)];
        let s = compute_norm_stats(&[&a[0], &a[1]], &[&b[0], &b[1]], 0).unwrap();
        assert_eq!(s.mean_2d[1], [2.0, 2.0]);
        assert_eq!(s.std_2d[1], [1.0, 1.0]);
        assert_eq!(s.std_3d[1], [1.0; 3]);
        // root never varies
        assert_eq!(s.std_2d[0], [SIGMA_FLOOR; 2]);

        let single = compute_norm_stats(&[&a[0]], &[&b[0]], 0).unwrap();
        assert_eq!(single.std_2d[1], [SIGMA_FLOOR; 2]);
        assert_eq!(single.std_3d[1], [SIGMA_FLOOR; 3]);

        let c = [rel2(1.0, true), rel2(999.0, false), rel2(3.0, true)];
        let s = compute_norm_stats(&[&c[0], &c[1], &c[2]], &[&b[0]], 0).unwrap();
        assert_eq!(s.mean_2d[1], [2.0, 2.0]);

        let never = [rel2(5.0, false)];
        let s = compute_norm_stats(&[&never[0]], &[&b[0]], 0).unwrap();
        assert_eq!(s.unseen_2d, vec![1]);
        assert_eq!((s.mean_2d[1], s.std_2d[1]), ([0.0; 2], [1.0; 2]));

        assert!(matches!(
            compute_norm_stats::<f64>(&[], &[&b[0]], 0),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn fill_missing_examples() {
        let full = p2(vec![[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(full.fill_missing(), full);
        let mut none = full.clone();
        none.mask = vec![false, false];
        let filled = none.fill_missing();
        assert_eq!(filled.joints, vec![[0.0; 2]; 2]);
        assert_eq!(filled.mask, vec![false, false]);
    }

    proptest! {
        #[test]
        fn fill_missing_ignores_masked_values(
            values in prop::collection::vec((-1e4f64..1e4, -1e4f64..1e4), 6),
            junk in prop::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 6),
            mask in prop::collection::vec(any::<bool>(), 6),
        ) {
            let a = Pose { joints: values.iter().map(|&(x, y)| [x, y]).collect(), mask: mask.clone(),
                           flavor: Flavor::Absolute, frame: CoordFrame::Image };
            let mut b = a.clone();
            for j in 0..6 {
                if !mask[j] { b.joints[j] = [junk[j].0, junk[j].1]; }
            }
            prop_assert_eq!(a.fill_missing(), b.fill_missing());
        }

        #[test]
        fn stats_permutation_invariant(
            values in prop::collection::vec((-100.0f64..100.0, any::<bool>()), 2..12),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let poses: Vec<Pose2<f64>> = values.iter().map(|&(v, vis)| Pose {
                joints: vec![[0.0, 0.0], [v, -v]], mask: vec![true, vis],
                flavor: Flavor::Relative, frame: CoordFrame::Image }).collect();
            let p3: Vec<Pose3<f64>> = values.iter().map(|&(v, _)|
                Pose::visible(vec![[0.0; 3], [v, 2.0 * v, -v]], Flavor::Relative, CoordFrame::Camera)).collect();
            let mut order: Vec<usize> = (0..poses.len()).collect();
            let s1 = compute_norm_stats(&poses.iter().collect::<Vec<_>>(), &p3.iter().collect::<Vec<_>>(), 0).unwrap();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let r2: Vec<&Pose2<f64>> = order.iter().map(|&i| &poses[i]).collect();
            let r3: Vec<&Pose3<f64>> = order.iter().map(|&i| &p3[i]).collect();
            let s2 = compute_norm_stats(&r2, &r3, 0).unwrap();
            for j in 0..2 {
                for c in 0..2 {
                    prop_assert!((s1.mean_2d[j][c] - s2.mean_2d[j][c]).abs() < 1e-9);
                    prop_assert!((s1.std_2d[j][c] - s2.std_2d[j][c]).abs() < 1e-9);
                }
                for c in 0..3 {
                    prop_assert!((s1.mean_3d[j][c] - s2.mean_3d[j][c]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn to_relative_root_is_exact_zero(
            values in prop::collection::vec((-1e4f64..1e4, -1e4f64..1e4), 2..20),
            root_pick in any::<prop::sample::Index>(),
        ) {
            let p = p2(values.iter().map(|&(x, y)| [x, y]).collect());
            let root = root_pick.index(values.len());
            let r = p.to_relative(root).unwrap();
            prop_assert_eq!(r.joints[root], [0.0, 0.0]);
        }
    }
}
