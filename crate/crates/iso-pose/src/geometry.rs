//! Pose geometry: skeleton topology, perspective projection, random view
//! sampling, horizontal flip, bone vectors, 2D normalization, Procrustes
//! and global-scale alignment, and limb-ratio statistics.
//!
//! 3D poses are root-relative in millimeters; 2D poses are in normalized
//! image units (root-centered, mean non-root distance 1 after
//! [`normalize2d`]). All functions here are pure.

use crate::autodiff::{NodeId, Tape, TapeError};
use crate::real::Real;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("joint behind camera: joint {joint}, depth {depth}")]
    BehindCamera { joint: usize, depth: f64 },
    #[error("degenerate pose: all joints coincide with the root")]
    DegeneratePose,
    #[error("alignment failed: {0}")]
    Alignment(String),
    #[error("zero-length lower limb for {0}")]
    ZeroLimb(&'static str),
    #[error("topology has no joint named {0}")]
    MissingJoint(String),
    #[error("pose has {got} joints, topology expects {expected}")]
    JointCount { got: usize, expected: usize },
}

/// Kinematic tree plus the symmetry and grouping metadata the pipeline
/// needs: left/right pairing for flips, named part groups for per-part PCK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonTopology {
    joint_names: Vec<String>,
    parent: Vec<usize>,
    lr_pairs: Vec<(usize, usize)>,
    part_groups: Vec<(String, Vec<usize>)>,
}

impl SkeletonTopology {
    pub fn new(
        joint_names: Vec<String>,
        parent: Vec<usize>,
        lr_pairs: Vec<(usize, usize)>,
        part_groups: Vec<(String, Vec<usize>)>,
    ) -> Result<Self, GeometryError> {
        let j = joint_names.len();
        if parent.len() != j {
            return Err(GeometryError::InvalidTopology(format!(
                "{} names but {} parent entries",
                j,
                parent.len()
            )));
        }
        let roots: Vec<usize> = (0..j).filter(|&i| parent[i] == i).collect();
        if roots.len() != 1 {
            return Err(GeometryError::InvalidTopology(format!("{} roots, expected 1", roots.len())));
        }
        // every joint must reach the root (tree, no cycles)
        for mut i in 0..j {
            let mut steps = 0;
            while parent[i] != i {
                i = parent[i];
                steps += 1;
                if steps > j {
                    return Err(GeometryError::InvalidTopology("parent edges contain a cycle".into()));
                }
            }
        }
        let mut partner: Vec<usize> = (0..j).collect();
        for &(a, b) in &lr_pairs {
            if a >= j || b >= j || a == b {
                return Err(GeometryError::InvalidTopology(format!("bad lr pair ({}, {})", a, b)));
            }
            partner[a] = b;
            partner[b] = a;
        }
        for i in 0..j {
            if partner[partner[i]] != i {
                return Err(GeometryError::InvalidTopology("lr pairs are not an involution".into()));
            }
        }
        let mut seen = vec![false; j];
        for (name, group) in &part_groups {
            if group.is_empty() {
                return Err(GeometryError::InvalidTopology(format!("empty part group {}", name)));
            }
            for &i in group {
                if i >= j {
                    return Err(GeometryError::InvalidTopology(format!(
                        "part group {} references joint {}",
                        name, i
                    )));
                }
                if seen[i] {
                    return Err(GeometryError::InvalidTopology(format!(
                        "joint {} appears in more than one part group",
                        i
                    )));
                }
                seen[i] = true;
            }
        }
        Ok(SkeletonTopology { joint_names, parent, lr_pairs, part_groups })
    }

    /// 16-joint skeleton used throughout: pelvis-rooted tree with 15 bones
    /// and the 8 named part groups.
    pub fn default_16() -> Self {
        let names = [
            "pelvis",
            "spine",
            "neck",
            "head",
            "left_hip",
            "left_knee",
            "left_ankle",
            "right_hip",
            "right_knee",
            "right_ankle",
            "left_shoulder",
            "left_elbow",
            "left_wrist",
            "right_shoulder",
            "right_elbow",
            "right_wrist",
        ];
        let parent = vec![0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 2, 10, 11, 2, 13, 14];
        let lr_pairs = vec![(4, 7), (5, 8), (6, 9), (10, 13), (11, 14), (12, 15)];
        let part_groups = vec![
            ("Hip".to_string(), vec![4, 7]),
            ("Spine".to_string(), vec![1]),
            ("Shoulder".to_string(), vec![10, 13]),
            ("Head".to_string(), vec![3]),
            ("Elbow".to_string(), vec![11, 14]),
            ("Wrist".to_string(), vec![12, 15]),
            ("Knee".to_string(), vec![5, 8]),
            ("Ankle".to_string(), vec![6, 9]),
        ];
        SkeletonTopology::new(names.iter().map(|s| s.to_string()).collect(), parent, lr_pairs, part_groups)
            .expect("default topology is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn parent(&self) -> &[usize] {
        &self.parent
    }

    pub fn root(&self) -> usize {
        (0..self.parent.len()).find(|&i| self.parent[i] == i).unwrap()
    }

    /// (child, parent) edges in child order, skipping the root. |bones| = J-1.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        (0..self.parent.len()).filter(|&i| self.parent[i] != i).map(|i| (i, self.parent[i])).collect()
    }

    pub fn lr_pairs(&self) -> &[(usize, usize)] {
        &self.lr_pairs
    }

    pub fn part_groups(&self) -> &[(String, Vec<usize>)] {
        &self.part_groups
    }

    /// Flip partner of a joint (identity for joints on the symmetry axis).
    pub fn partner(&self, i: usize) -> usize {
        for &(a, b) in &self.lr_pairs {
            if a == i {
                return b;
            }
            if b == i {
                return a;
            }
        }
        i
    }

    pub fn joint_index(&self, name: &str) -> Result<usize, GeometryError> {
        self.joint_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| GeometryError::MissingJoint(name.to_string()))
    }

    /// Children of each joint in index order.
    pub fn children(&self, of: usize) -> Vec<usize> {
        (0..self.parent.len()).filter(|&i| i != of && self.parent[i] == of).collect()
    }
}

/// Fixed-depth perspective camera: the subject is translated to
/// `root_depth` mm in front of the camera and projected with a
/// dimensionless focal length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel<R: Real> {
    pub focal: R,
    pub root_depth: R,
}

impl<R: Real> Default for CameraModel<R> {
    fn default() -> Self {
        CameraModel { focal: R::one(), root_depth: R::from_f64(5500.0) }
    }
}

/// Random view: azimuth about the vertical axis, then elevation about the
/// horizontal axis, both about the root.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewRotation<R: Real> {
    pub azimuth: R,
    pub elevation: R,
}

pub const ELEVATION_BOUND: f64 = std::f64::consts::PI / 9.0;

impl<R: Real> ViewRotation<R> {
    pub fn identity() -> Self {
        ViewRotation { azimuth: R::zero(), elevation: R::zero() }
    }

    /// Rotation matrix: elevation (about x) composed after azimuth (about y).
    pub fn matrix(&self) -> [[R; 3]; 3] {
        let (sa, ca) = (self.azimuth.sin(), self.azimuth.cos());
        let (se, ce) = (self.elevation.sin(), self.elevation.cos());
        let z = R::zero();
        // Rx(elev) * Ry(azim)
        let ry = [[ca, z, sa], [z, R::one(), z], [-sa, z, ca]];
        let rx = [[R::one(), z, z], [z, ce, -se], [z, se, ce]];
        mat3_mul(&rx, &ry)
    }

    pub fn matrix_inv(&self) -> [[R; 3]; 3] {
        transpose3(&self.matrix())
    }
}

pub fn mat3_mul<R: Real>(a: &[[R; 3]; 3], b: &[[R; 3]; 3]) -> [[R; 3]; 3] {
    let mut out = [[R::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn transpose3<R: Real>(m: &[[R; 3]; 3]) -> [[R; 3]; 3] {
    let mut out = [[R::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

/// J x 2 pose in normalized image units.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose2D<R: Real = f32> {
    pub joints: Vec<[R; 2]>,
}

/// J x 3 root-relative pose in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D<R: Real = f32> {
    pub joints: Vec<[R; 3]>,
}

impl<R: Real> Pose2D<R> {
    pub fn from_flat(flat: &[R]) -> Self {
        Pose2D { joints: flat.chunks(2).map(|c| [c[0], c[1]]).collect() }
    }

    pub fn flatten(&self) -> Vec<R> {
        self.joints.iter().flat_map(|j| j.iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }
}

impl<R: Real> Pose3D<R> {
    pub fn from_flat(flat: &[R]) -> Self {
        Pose3D { joints: flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect() }
    }

    pub fn flatten(&self) -> Vec<R> {
        self.joints.iter().flat_map(|j| j.iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    /// Subtract the root joint from every joint.
    pub fn root_centered(&self, root: usize) -> Pose3D<R> {
        let r = self.joints[root];
        Pose3D {
            joints: self.joints.iter().map(|j| [j[0] - r[0], j[1] - r[1], j[2] - r[2]]).collect(),
        }
    }
}

/// Perspective projection followed by root-centering of the 2D result.
pub fn project<R: Real>(pose: &Pose3D<R>, cam: &CameraModel<R>, root: usize) -> Result<Pose2D<R>, GeometryError> {
    let mut joints = Vec::with_capacity(pose.len());
    for (i, p) in pose.joints.iter().enumerate() {
        let z = p[2] + cam.root_depth;
        if z <= R::zero() {
            return Err(GeometryError::BehindCamera { joint: i, depth: z.to_f64() });
        }
        joints.push([cam.focal * p[0] / z, cam.focal * p[1] / z]);
    }
    let r = joints[root];
    for j in joints.iter_mut() {
        j[0] -= r[0];
        j[1] -= r[1];
    }
    Ok(Pose2D { joints })
}

/// Azimuth ~ U[-pi, pi], elevation ~ U[-pi/9, pi/9], independent.
pub fn sample_random_view<R: Real>(rng: &mut ChaCha8Rng) -> ViewRotation<R> {
    sample_view_in(
        rng,
        (-std::f64::consts::PI, std::f64::consts::PI),
        (-ELEVATION_BOUND, ELEVATION_BOUND),
    )
}

pub fn sample_view_in<R: Real>(
    rng: &mut ChaCha8Rng,
    azimuth: (f64, f64),
    elevation: (f64, f64),
) -> ViewRotation<R> {
    let az = R::sample_uniform(rng, R::from_f64(azimuth.0), R::from_f64(azimuth.1));
    let el = R::sample_uniform(rng, R::from_f64(elevation.0), R::from_f64(elevation.1));
    ViewRotation { azimuth: az, elevation: el }
}

fn apply_mat3<R: Real>(pose: &Pose3D<R>, m: &[[R; 3]; 3]) -> Pose3D<R> {
    Pose3D {
        joints: pose
            .joints
            .iter()
            .map(|p| {
                [
                    m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
                    m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
                    m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
                ]
            })
            .collect(),
    }
}

pub fn rotate<R: Real>(pose: &Pose3D<R>, r: &ViewRotation<R>) -> Pose3D<R> {
    apply_mat3(pose, &r.matrix())
}

pub fn inverse_rotate<R: Real>(pose: &Pose3D<R>, r: &ViewRotation<R>) -> Pose3D<R> {
    apply_mat3(pose, &r.matrix_inv())
}

/// Root-center then scale so the mean Euclidean distance of non-root joints
/// from the root is 1.
pub fn normalize2d<R: Real>(pose: &Pose2D<R>, root: usize) -> Result<Pose2D<R>, GeometryError> {
    let r = pose.joints[root];
    let centered: Vec<[R; 2]> = pose.joints.iter().map(|j| [j[0] - r[0], j[1] - r[1]]).collect();
    let mut acc = R::zero();
    let mut count = 0usize;
    for (i, j) in centered.iter().enumerate() {
        if i == root {
            continue;
        }
        acc += (j[0] * j[0] + j[1] * j[1]).sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(GeometryError::DegeneratePose);
    }
    let mean = acc / R::from_usize(count);
    if !(mean > R::zero()) {
        return Err(GeometryError::DegeneratePose);
    }
    Ok(Pose2D { joints: centered.iter().map(|j| [j[0] / mean, j[1] / mean]).collect() })
}

/// Rotate into a random view, project and normalize: produces the
/// "synthetic" 2D poses fed to the discriminator.
pub fn reproject_random<R: Real>(
    pose: &Pose3D<R>,
    r: &ViewRotation<R>,
    cam: &CameraModel<R>,
    root: usize,
) -> Result<Pose2D<R>, GeometryError> {
    let rotated = rotate(pose, r);
    let projected = project(&rotated, cam, root)?;
    normalize2d(&projected, root)
}

/// Mirror about the vertical axis: negate x and swap left/right joints.
pub fn hflip2d<R: Real>(pose: &Pose2D<R>, topo: &SkeletonTopology) -> Pose2D<R> {
    Pose2D {
        joints: (0..pose.len())
            .map(|i| {
                let src = pose.joints[topo.partner(i)];
                [-src[0], src[1]]
            })
            .collect(),
    }
}

pub fn hflip3d<R: Real>(pose: &Pose3D<R>, topo: &SkeletonTopology) -> Pose3D<R> {
    Pose3D {
        joints: (0..pose.len())
            .map(|i| {
                let src = pose.joints[topo.partner(i)];
                [-src[0], src[1], src[2]]
            })
            .collect(),
    }
}

/// Child-minus-parent displacement per bone, in `topo.bones()` order.
pub fn bone_vectors<R: Real>(pose: &Pose3D<R>, topo: &SkeletonTopology) -> Vec<[R; 3]> {
    topo.bones()
        .iter()
        .map(|&(c, p)| {
            let a = pose.joints[c];
            let b = pose.joints[p];
            [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
        })
        .collect()
}

/// Best similarity transform (s, R, t) with det(R) = +1 mapping `pred`
/// onto `gt` in the least-squares sense; returns the transformed `pred`.
pub fn procrustes_align<R: Real>(pred: &Pose3D<R>, gt: &Pose3D<R>) -> Result<Pose3D<R>, GeometryError> {
    if pred.len() != gt.len() {
        return Err(GeometryError::JointCount { got: pred.len(), expected: gt.len() });
    }
    let n = pred.len() as f64;
    let to64 = |p: &Pose3D<R>| -> Vec<[f64; 3]> {
        p.joints.iter().map(|j| [j[0].to_f64(), j[1].to_f64(), j[2].to_f64()]).collect()
    };
    let p = to64(pred);
    let g = to64(gt);
    let mean = |v: &[[f64; 3]]| {
        let mut m = [0.0f64; 3];
        for j in v {
            for k in 0..3 {
                m[k] += j[k];
            }
        }
        for k in 0..3 {
            m[k] /= n;
        }
        m
    };
    let pm = mean(&p);
    let gm = mean(&g);
    let pc: Vec<[f64; 3]> = p.iter().map(|j| [j[0] - pm[0], j[1] - pm[1], j[2] - pm[2]]).collect();
    let gc: Vec<[f64; 3]> = g.iter().map(|j| [j[0] - gm[0], j[1] - gm[1], j[2] - gm[2]]).collect();
    let pred_norm: f64 = pc.iter().map(|j| j[0] * j[0] + j[1] * j[1] + j[2] * j[2]).sum();
    if pred_norm <= 0.0 {
        return Err(GeometryError::Alignment("prediction has zero centered norm".into()));
    }
    let gt_norm: f64 = gc.iter().map(|j| j[0] * j[0] + j[1] * j[1] + j[2] * j[2]).sum();
    if gt_norm <= 0.0 {
        return Err(GeometryError::Alignment("ground truth has zero centered norm".into()));
    }
    // cross-covariance H = sum gc_i pc_i^T  (maps pred frame into gt frame)
    let mut h = nalgebra::Matrix3::<f64>::zeros();
    for (a, b) in gc.iter().zip(&pc) {
        for i in 0..3 {
            for j in 0..3 {
                h[(i, j)] += a[i] * b[j];
            }
        }
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| GeometryError::Alignment("svd failed".into()))?;
    let vt = svd.v_t.ok_or_else(|| GeometryError::Alignment("svd failed".into()))?;
    let mut d = nalgebra::Matrix3::<f64>::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = u * d * vt;
    let trace_ds = svd.singular_values[0] + svd.singular_values[1] + d[(2, 2)] * svd.singular_values[2];
    let s = trace_ds / pred_norm;
    let joints = pc
        .iter()
        .map(|j| {
            let v = nalgebra::Vector3::new(j[0], j[1], j[2]);
            let r = rot * v * s;
            [
                R::from_f64(r[0] + gm[0]),
                R::from_f64(r[1] + gm[1]),
                R::from_f64(r[2] + gm[2]),
            ]
        })
        .collect();
    Ok(Pose3D { joints })
}

/// Least-squares scalar rescale of `pred` toward `gt`.
pub fn optimal_global_scale<R: Real>(pred: &Pose3D<R>, gt: &Pose3D<R>) -> Result<Pose3D<R>, GeometryError> {
    if pred.len() != gt.len() {
        return Err(GeometryError::JointCount { got: pred.len(), expected: gt.len() });
    }
    let mut dot = R::zero();
    let mut norm = R::zero();
    for (p, g) in pred.joints.iter().zip(&gt.joints) {
        for k in 0..3 {
            dot += p[k] * g[k];
            norm += p[k] * p[k];
        }
    }
    if !(norm > R::zero()) {
        return Err(GeometryError::Alignment("prediction is identically zero".into()));
    }
    let s = dot / norm;
    Ok(Pose3D { joints: pred.joints.iter().map(|j| [j[0] * s, j[1] * s, j[2] * s]).collect() })
}

/// Upper/lower length ratios per limb plus the torso ratio
/// (neck-spine over spine-pelvis).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimbRatios<R: Real> {
    pub arm_l: R,
    pub arm_r: R,
    pub leg_l: R,
    pub leg_r: R,
    pub torso: R,
}

impl<R: Real> LimbRatios<R> {
    pub fn as_array(&self) -> [R; 5] {
        [self.arm_l, self.arm_r, self.leg_l, self.leg_r, self.torso]
    }

    pub const NAMES: [&'static str; 5] = ["arm_L", "arm_R", "leg_L", "leg_R", "torso"];
}

fn seg_len<R: Real>(pose: &Pose3D<R>, a: usize, b: usize) -> R {
    let (p, q) = (pose.joints[a], pose.joints[b]);
    let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

pub fn limb_ratios<R: Real>(pose: &Pose3D<R>, topo: &SkeletonTopology) -> Result<LimbRatios<R>, GeometryError> {
    let ji = |n: &str| topo.joint_index(n);
    let ratio = |upper: (usize, usize), lower: (usize, usize), what: &'static str| -> Result<R, GeometryError> {
        let lo = seg_len(pose, lower.0, lower.1);
        if !(lo > R::zero()) {
            return Err(GeometryError::ZeroLimb(what));
        }
        Ok(seg_len(pose, upper.0, upper.1) / lo)
    };
    let arm_l = ratio((ji("left_shoulder")?, ji("left_elbow")?), (ji("left_elbow")?, ji("left_wrist")?), "arm_L")?;
    let arm_r = ratio((ji("right_shoulder")?, ji("right_elbow")?), (ji("right_elbow")?, ji("right_wrist")?), "arm_R")?;
    let leg_l = ratio((ji("left_hip")?, ji("left_knee")?), (ji("left_knee")?, ji("left_ankle")?), "leg_L")?;
    let leg_r = ratio((ji("right_hip")?, ji("right_knee")?), (ji("right_knee")?, ji("right_ankle")?), "leg_R")?;
    let torso = ratio((ji("neck")?, ji("spine")?), (ji("spine")?, ji("pelvis")?), "torso")?;
    Ok(LimbRatios { arm_l, arm_r, leg_l, leg_r, torso })
}

/// Differentiable counterparts of the projection pipeline, expressed as
/// tape primitives so gradients flow through lift-project-lift cycles.
pub mod diff {
    use super::*;

    /// Constant matrix that root-centers flattened poses with `dims`
    /// coordinates per joint.
    fn root_center_matrix<R: Real>(joints: usize, dims: usize, root: usize) -> Vec<R> {
        let n = joints * dims;
        let mut m = vec![R::zero(); n * n];
        for i in 0..n {
            m[i * n + i] = R::one();
            let coord = i % dims;
            m[(root * dims + coord) * n + i] -= R::one();
        }
        m
    }

    pub fn root_center_3d<R: Real>(
        tape: &mut Tape<R>,
        x: NodeId,
        joints: usize,
        root: usize,
    ) -> Result<NodeId, TapeError> {
        let m = root_center_matrix(joints, 3, root);
        let w = tape.constant(joints * 3, joints * 3, m);
        tape.linear(x, w, None)
    }

    pub fn root_center_2d<R: Real>(
        tape: &mut Tape<R>,
        x: NodeId,
        joints: usize,
        root: usize,
    ) -> Result<NodeId, TapeError> {
        let m = root_center_matrix(joints, 2, root);
        let w = tape.constant(joints * 2, joints * 2, m);
        tape.linear(x, w, None)
    }

    /// Differentiable [`normalize2d`]: root-center then divide by the mean
    /// non-root distance from the root.
    pub fn normalize2d<R: Real>(
        tape: &mut Tape<R>,
        x: NodeId,
        joints: usize,
        root: usize,
    ) -> Result<NodeId, TapeError> {
        let centered = root_center_2d(tape, x, joints, root)?;
        let sq = tape.mul(centered, centered)?;
        // pair-sum u^2+v^2 of every non-root joint
        let nonroot = joints - 1;
        let mut pool = vec![R::zero(); (joints * 2) * nonroot];
        let mut k = 0;
        for j in 0..joints {
            if j == root {
                continue;
            }
            pool[(j * 2) * nonroot + k] = R::one();
            pool[(j * 2 + 1) * nonroot + k] = R::one();
            k += 1;
        }
        let pool_w = tape.constant(joints * 2, nonroot, pool);
        let dist_sq = tape.linear(sq, pool_w, None)?;
        let dist = tape.sqrt_guard(dist_sq);
        let avg_w = tape.constant(nonroot, 1, vec![R::one() / R::from_usize(nonroot); nonroot]);
        let mean_dist = tape.linear(dist, avg_w, None)?;
        tape.row_div(centered, mean_dist)
    }

    /// Differentiable projection: perspective divide then root-centering.
    pub fn project<R: Real>(
        tape: &mut Tape<R>,
        x: NodeId,
        cam: &CameraModel<R>,
        joints: usize,
        root: usize,
    ) -> Result<NodeId, TapeError> {
        let projected = tape.project(x, cam.focal, cam.root_depth)?;
        root_center_2d(tape, projected, joints, root)
    }

    /// Differentiable [`reproject_random`]: per-row rotation, projection,
    /// root-centering and normalization.
    pub fn reproject<R: Real>(
        tape: &mut Tape<R>,
        x3d: NodeId,
        rots: &[[[R; 3]; 3]],
        cam: &CameraModel<R>,
        joints: usize,
        root: usize,
    ) -> Result<NodeId, TapeError> {
        let rotated = tape.rotate_joints(x3d, rots)?;
        let projected = project(tape, rotated, cam, joints, root)?;
        normalize2d(tape, projected, joints, root)
    }
}
