//! 18-joint COCO body model used by the synthetic generator and reports.

pub const COCO_JOINTS: [&str; 18] = [
    "Nose",
    "Neck",
    "R. Shoulder",
    "R. Elbow",
    "R. Wrist",
    "L. Shoulder",
    "L. Elbow",
    "L. Wrist",
    "R. Hip",
    "R. Knee",
    "R. Ankle",
    "L. Hip",
    "L. Knee",
    "L. Ankle",
    "R. Eye",
    "L. Eye",
    "R. Ear",
    "L. Ear",
];

/// One rigid segment of the kinematic tree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bone {
    pub parent: usize,
    pub child: usize,
    /// Rest direction in the body frame (x right, y forward, z up).
    pub rest_dir: [f64; 3],
    pub length_mm: f64,
    /// Largest random deviation from the rest direction (radians).
    pub max_angle: f64,
}

const fn bone(parent: usize, child: usize, rest_dir: [f64; 3], length_mm: f64, max_angle: f64) -> Bone {
    Bone {
        parent,
        child,
        rest_dir,
        length_mm,
        max_angle,
    }
}

/// Adult anthropometric segment lengths, listed parent-before-child from the neck.
pub const COCO_BONES: [Bone; 17] = [
    bone(1, 0, [0.0, 0.35, 1.0], 190.0, 0.25),
    bone(0, 14, [0.6, 0.1, 0.5], 45.0, 0.1),
    bone(0, 15, [-0.6, 0.1, 0.5], 45.0, 0.1),
    bone(14, 16, [0.8, -0.6, 0.0], 90.0, 0.1),
    bone(15, 17, [-0.8, -0.6, 0.0], 90.0, 0.1),
    bone(1, 2, [1.0, 0.0, -0.1], 180.0, 0.15),
    bone(2, 3, [0.15, 0.0, -1.0], 290.0, 0.9),
    bone(3, 4, [0.0, 0.1, -1.0], 260.0, 0.9),
    bone(1, 5, [-1.0, 0.0, -0.1], 180.0, 0.15),
    bone(5, 6, [-0.15, 0.0, -1.0], 290.0, 0.9),
    bone(6, 7, [0.0, 0.1, -1.0], 260.0, 0.9),
    bone(1, 8, [0.2, 0.0, -1.0], 520.0, 0.1),
    bone(8, 9, [0.0, 0.05, -1.0], 440.0, 0.5),
    bone(9, 10, [0.0, -0.05, -1.0], 420.0, 0.5),
    bone(1, 11, [-0.2, 0.0, -1.0], 520.0, 0.1),
    bone(11, 12, [0.0, 0.05, -1.0], 440.0, 0.5),
    bone(12, 13, [0.0, -0.05, -1.0], 420.0, 0.5),
];

/// Display name for joint `j` of an `n`-joint model.
pub fn joint_name(j: usize, n: usize) -> String {
    if n == COCO_JOINTS.len() {
        COCO_JOINTS[j].to_string()
    } else {
        format!("joint_{j}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_reaches_every_joint_from_neck() {
        let mut reached = [false; 18];
        reached[1] = true;
        for b in COCO_BONES {
            assert!(reached[b.parent], "bone {}→{} listed before its parent", b.parent, b.child);
            assert!(!reached[b.child]);
            reached[b.child] = true;
        }
        assert!(reached.iter().all(|&r| r));
    }
}
