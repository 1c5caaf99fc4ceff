//! Procedural skeleton data: forward-kinematics pose sampling from
//! configurable pose/viewpoint distributions, paired (3D, 2D) dataset
//! generation, pixel-frame noise injection and dataset file I/O.
//!
//! File layout (magic `ISODATA1`): a self-describing header with the
//! topology and the generating config, then per record J x 3 ground-truth
//! 3D (mm, root-relative, view frame) and J x 2 normalized 2D, all 32-bit
//! LE floats.

use crate::geometry::{
    self, CameraModel, GeometryError, Pose2D, Pose3D, SkeletonTopology,
};
use crate::real::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"ISODATA1";
pub const FORMAT_VERSION: u32 = 1;

/// Reference person height in the pixel frame used for noise calibration.
pub const PIXEL_PERSON_HEIGHT: f64 = 200.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a dataset file: bad magic bytes at offset 0")]
    MagicMismatch,
    #[error("unsupported dataset format version {got} (expected {FORMAT_VERSION})")]
    VersionMismatch { got: u32 },
    #[error("corrupt dataset at byte offset {offset}{}: {detail}", record.map(|r| format!(" (record {})", r)).unwrap_or_default())]
    Parse { offset: u64, record: Option<u64>, detail: String },
    #[error("invalid distribution config: {0}")]
    Config(String),
    #[error("dataset incompatible: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Pose/viewpoint distribution: a forward-kinematics skeleton with
/// per-joint articulation ranges and a camera viewpoint range.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionConfig {
    /// Bone length (mm) from each joint's parent; ignored for the root.
    pub bone_lengths: Vec<f32>,
    /// Canonical unit direction of each bone, in the parent's frame.
    pub bone_dirs: Vec<[f32; 3]>,
    /// Per-joint articulation half-range (radians) applied to each of the
    /// three rotation axes; ignored for the root.
    pub articulation: Vec<f32>,
    /// Global body-scale range per sample.
    pub scale_range: (f32, f32),
    pub azimuth_range: (f32, f32),
    pub elevation_range: (f32, f32),
    pub count: usize,
    pub seed: u64,
}

impl DistributionConfig {
    pub fn validate(&self, topo: &SkeletonTopology) -> Result<(), DataError> {
        let j = topo.joint_count();
        if self.bone_lengths.len() != j || self.bone_dirs.len() != j || self.articulation.len() != j {
            return Err(DataError::Config(format!(
                "per-joint tables sized {}/{}/{} for {} joints",
                self.bone_lengths.len(),
                self.bone_dirs.len(),
                self.articulation.len(),
                j
            )));
        }
        for (i, &len) in self.bone_lengths.iter().enumerate() {
            if i != topo.root() && !(len > 0.0) {
                return Err(DataError::Config(format!("bone length {} for joint {}", len, i)));
            }
        }
        for (name, (lo, hi)) in [
            ("scale", self.scale_range),
            ("azimuth", self.azimuth_range),
            ("elevation", self.elevation_range),
        ] {
            if !(lo <= hi) {
                return Err(DataError::Config(format!("{} range [{}, {}] is not ordered", name, lo, hi)));
            }
        }
        if !(self.scale_range.0 > 0.0) {
            return Err(DataError::Config(format!("scale lower bound {}", self.scale_range.0)));
        }
        if self.articulation.iter().any(|&a| a < 0.0) {
            return Err(DataError::Config("negative articulation range".into()));
        }
        Ok(())
    }
}

/// Canonical standing-pose bone table for the default 16-joint skeleton.
/// Upper/lower arm and leg length ratios are 1.3, the torso ratio is 1.0.
fn canonical_bones(topo: &SkeletonTopology) -> (Vec<f32>, Vec<[f32; 3]>) {
    let j = topo.joint_count();
    let mut lengths = vec![0.0f32; j];
    let mut dirs = vec![[0.0f32, 0.0, 0.0]; j];
    // y points down (image convention): the head is at negative y.
    let table: &[(&str, f32, [f32; 3])] = &[
        ("spine", 250.0, [0.0, -1.0, 0.0]),
        ("neck", 250.0, [0.0, -1.0, 0.0]),
        ("head", 150.0, [0.0, -1.0, 0.0]),
        ("left_hip", 100.0, [1.0, 0.0, 0.0]),
        ("right_hip", 100.0, [-1.0, 0.0, 0.0]),
        ("left_knee", 455.0, [0.0, 1.0, 0.0]),
        ("right_knee", 455.0, [0.0, 1.0, 0.0]),
        ("left_ankle", 350.0, [0.0, 1.0, 0.0]),
        ("right_ankle", 350.0, [0.0, 1.0, 0.0]),
        ("left_shoulder", 180.0, [1.0, 0.0, 0.0]),
        ("right_shoulder", 180.0, [-1.0, 0.0, 0.0]),
        ("left_elbow", 325.0, [0.0, 1.0, 0.0]),
        ("right_elbow", 325.0, [0.0, 1.0, 0.0]),
        ("left_wrist", 250.0, [0.0, 1.0, 0.0]),
        ("right_wrist", 250.0, [0.0, 1.0, 0.0]),
    ];
    for &(name, len, dir) in table {
        let i = topo.joint_index(name).expect("canonical table requires default joint names");
        lengths[i] = len;
        dirs[i] = dir;
    }
    (lengths, dirs)
}

fn uniform_articulation(topo: &SkeletonTopology, limbs: f32) -> Vec<f32> {
    // torso chain articulates less than the limbs
    let mut art = vec![limbs; topo.joint_count()];
    for name in ["spine", "neck", "head"] {
        if let Ok(i) = topo.joint_index(name) {
            art[i] = limbs * 0.3;
        }
    }
    art[topo.root()] = 0.0;
    art
}

/// Narrow-viewpoint source distribution of the shipped "desk-shift"
/// profile.
pub fn desk_source(topo: &SkeletonTopology, count: usize, seed: u64) -> DistributionConfig {
    let (bone_lengths, bone_dirs) = canonical_bones(topo);
    DistributionConfig {
        bone_lengths,
        bone_dirs,
        articulation: uniform_articulation(topo, 0.35),
        scale_range: (1.0, 1.0),
        azimuth_range: (-(std::f32::consts::PI) / 12.0, std::f32::consts::PI / 12.0),
        elevation_range: (-(std::f32::consts::PI) / 36.0, std::f32::consts::PI / 36.0),
        count,
        seed,
    }
}

/// Wide-viewpoint, wider-articulation target distribution of the
/// "desk-shift" profile.
pub fn desk_target(topo: &SkeletonTopology, count: usize, seed: u64) -> DistributionConfig {
    let (bone_lengths, bone_dirs) = canonical_bones(topo);
    DistributionConfig {
        bone_lengths,
        bone_dirs,
        articulation: uniform_articulation(topo, 0.7),
        scale_range: (0.9, 1.1),
        azimuth_range: (-std::f32::consts::PI, std::f32::consts::PI),
        elevation_range: (-(std::f32::consts::PI) / 9.0, std::f32::consts::PI / 9.0),
        count,
        seed,
    }
}

fn rot_xyz<R: Real>(ax: R, ay: R, az: R) -> [[R; 3]; 3] {
    let (sx, cx) = (ax.sin(), ax.cos());
    let (sy, cy) = (ay.sin(), ay.cos());
    let (sz, cz) = (az.sin(), az.cos());
    let rx = [
        [R::one(), R::zero(), R::zero()],
        [R::zero(), cx, -sx],
        [R::zero(), sx, cx],
    ];
    let ry = [
        [cy, R::zero(), sy],
        [R::zero(), R::one(), R::zero()],
        [-sy, R::zero(), cy],
    ];
    let rz = [
        [cz, -sz, R::zero()],
        [sz, cz, R::zero()],
        [R::zero(), R::zero(), R::one()],
    ];
    geometry::mat3_mul(&rz, &geometry::mat3_mul(&ry, &rx))
}

fn apply3<R: Real>(m: &[[R; 3]; 3], v: [R; 3]) -> [R; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Forward-kinematics sample: global scale times the bone table, joint
/// rotations uniform within the per-joint articulation ranges, root at the
/// origin. Works in any precision; the config is stored in `f32` and
/// widened exactly.
pub fn sample_pose3d<R: Real>(
    cfg: &DistributionConfig,
    topo: &SkeletonTopology,
    rng: &mut ChaCha8Rng,
) -> Pose3D<R> {
    let j = topo.joint_count();
    let scale = R::sample_uniform(
        rng,
        R::from_f64(cfg.scale_range.0 as f64),
        R::from_f64(cfg.scale_range.1 as f64),
    );
    let ident = [
        [R::one(), R::zero(), R::zero()],
        [R::zero(), R::one(), R::zero()],
        [R::zero(), R::zero(), R::one()],
    ];
    let mut frames = vec![ident; j];
    let mut joints = vec![[R::zero(); 3]; j];
    // parents precede children in index order (validated topology)
    for i in 0..j {
        if i == topo.root() {
            continue;
        }
        let half = R::from_f64(cfg.articulation[i] as f64);
        let ax = R::sample_uniform(rng, -half, half);
        let ay = R::sample_uniform(rng, -half, half);
        let az = R::sample_uniform(rng, -half, half);
        let p = topo.parent()[i];
        frames[i] = geometry::mat3_mul(&frames[p], &rot_xyz(ax, ay, az));
        let dir = [
            R::from_f64(cfg.bone_dirs[i][0] as f64),
            R::from_f64(cfg.bone_dirs[i][1] as f64),
            R::from_f64(cfg.bone_dirs[i][2] as f64),
        ];
        let world_dir = apply3(&frames[i], dir);
        let len = scale * R::from_f64(cfg.bone_lengths[i] as f64);
        joints[i] = [
            joints[p][0] + len * world_dir[0],
            joints[p][1] + len * world_dir[1],
            joints[p][2] + len * world_dir[2],
        ];
    }
    Pose3D { joints }
}

/// One dataset record: view-frame root-relative 3D (mm) and its normalized
/// projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub pose3d: Vec<f32>,
    pub pose2d: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub topo: SkeletonTopology,
    pub cam: CameraModel<f32>,
    pub config: DistributionConfig,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn joint_count(&self) -> usize {
        self.topo.joint_count()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn pose3d(&self, i: usize) -> Pose3D<f32> {
        Pose3D::from_flat(&self.records[i].pose3d)
    }

    pub fn pose2d(&self, i: usize) -> Pose2D<f32> {
        Pose2D::from_flat(&self.records[i].pose2d)
    }
}

/// Generate `config.count` paired records: draw a pose and a view, store
/// the view-frame 3D and its normalized 2D projection.
pub fn make_dataset(
    config: &DistributionConfig,
    topo: &SkeletonTopology,
    cam: &CameraModel<f32>,
) -> Result<Dataset, DataError> {
    config.validate(topo)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let root = topo.root();
    let mut records = Vec::with_capacity(config.count);
    for _ in 0..config.count {
        let pose: Pose3D<f32> = sample_pose3d(config, topo, &mut rng);
        let view = geometry::sample_view_in(
            &mut rng,
            (config.azimuth_range.0 as f64, config.azimuth_range.1 as f64),
            (config.elevation_range.0 as f64, config.elevation_range.1 as f64),
        );
        let rotated = geometry::rotate(&pose, &view).root_centered(root);
        let projected = geometry::project(&rotated, cam, root)?;
        let normalized = geometry::normalize2d(&projected, root)?;
        records.push(Record { pose3d: rotated.flatten(), pose2d: normalized.flatten() });
    }
    Ok(Dataset { topo: topo.clone(), cam: *cam, config: config.clone(), records })
}

/// Verify every record satisfies the projection-consistency contract.
pub fn validate_dataset(ds: &Dataset, tol: f32) -> Result<(), DataError> {
    let root = ds.topo.root();
    for (i, rec) in ds.records.iter().enumerate() {
        let pose = Pose3D::from_flat(&rec.pose3d);
        let projected = geometry::project(&pose, &ds.cam, root)?;
        let normalized = geometry::normalize2d(&projected, root)?;
        for (a, b) in normalized.flatten().iter().zip(&rec.pose2d) {
            if (a - b).abs() > tol {
                return Err(DataError::Incompatible(format!(
                    "record {} violates projection consistency: {} vs {}",
                    i, a, b
                )));
            }
        }
    }
    Ok(())
}

/// Normalized-units person height (head to foot extent along y).
fn pose_height<R: Real>(x: &Pose2D<R>) -> R {
    let mut lo = x.joints[0][1];
    let mut hi = lo;
    for j in &x.joints {
        lo = lo.min(j[1]);
        hi = hi.max(j[1]);
    }
    hi - lo
}

/// Noisy pose before re-normalization; exposed so the injected noise is
/// measurable in pixel units.
pub fn add_noise2d_raw<R: Real>(x: &Pose2D<R>, sigma_px: R, rng: &mut ChaCha8Rng) -> Pose2D<R> {
    let h = pose_height(x);
    // sigma in normalized units: person height maps to ~200 px
    let s = sigma_px * h / R::from_f64(PIXEL_PERSON_HEIGHT);
    Pose2D {
        joints: x
            .joints
            .iter()
            .map(|j| [j[0] + R::sample_normal(rng) * s, j[1] + R::sample_normal(rng) * s])
            .collect(),
    }
}

/// Add pixel-frame Gaussian noise to a normalized 2D pose and re-normalize.
pub fn add_noise2d<R: Real>(
    x: &Pose2D<R>,
    sigma_px: R,
    root: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Pose2D<R>, GeometryError> {
    if sigma_px == R::zero() {
        return Ok(x.clone());
    }
    let noisy = add_noise2d_raw(x, sigma_px, rng);
    geometry::normalize2d(&noisy, root)
}

// ---- file I/O ----

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    record: Option<u64>,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.data.len() {
            return Err(DataError::Parse {
                offset: self.pos as u64,
                record: self.record,
                detail: format!("file truncated while reading {} ({} bytes needed)", what, n),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32, DataError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, DataError> {
        let raw = self.take(4 * n, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn string(&mut self, what: &str) -> Result<String, DataError> {
        let len = self.u32(what)? as usize;
        let off = self.pos as u64;
        std::str::from_utf8(self.take(len, what)?)
            .map(|s| s.to_string())
            .map_err(|e| DataError::Parse {
                offset: off,
                record: self.record,
                detail: format!("{} is not UTF-8: {}", what, e),
            })
    }
}

fn put_string(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    let j = ds.topo.joint_count();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(j as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.records.len() as u64).to_le_bytes());
    // topology
    for i in 0..j {
        put_string(&mut buf, &ds.topo.joint_names()[i]);
        buf.extend_from_slice(&(ds.topo.parent()[i] as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(ds.topo.lr_pairs().len() as u32).to_le_bytes());
    for &(l, r) in ds.topo.lr_pairs() {
        buf.extend_from_slice(&(l as u32).to_le_bytes());
        buf.extend_from_slice(&(r as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(ds.topo.part_groups().len() as u32).to_le_bytes());
    for (name, joints) in ds.topo.part_groups() {
        put_string(&mut buf, name);
        buf.extend_from_slice(&(joints.len() as u32).to_le_bytes());
        for &ji in joints {
            buf.extend_from_slice(&(ji as u32).to_le_bytes());
        }
    }
    // camera + config echo
    put_f32s(&mut buf, &[ds.cam.focal, ds.cam.root_depth]);
    let c = &ds.config;
    put_f32s(&mut buf, &c.bone_lengths);
    for d in &c.bone_dirs {
        put_f32s(&mut buf, d);
    }
    put_f32s(&mut buf, &c.articulation);
    put_f32s(
        &mut buf,
        &[
            c.scale_range.0,
            c.scale_range.1,
            c.azimuth_range.0,
            c.azimuth_range.1,
            c.elevation_range.0,
            c.elevation_range.1,
        ],
    );
    buf.extend_from_slice(&(c.count as u64).to_le_bytes());
    buf.extend_from_slice(&c.seed.to_le_bytes());
    // records
    for rec in &ds.records {
        debug_assert_eq!(rec.pose3d.len(), 3 * j);
        debug_assert_eq!(rec.pose2d.len(), 2 * j);
        put_f32s(&mut buf, &rec.pose3d);
        put_f32s(&mut buf, &rec.pose2d);
    }
    let io_err = |source| DataError::Io { path: path.display().to_string(), source };
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let io_err = |source| DataError::Io { path: path.display().to_string(), source };
    let mut data = Vec::new();
    std::fs::File::open(path).map_err(io_err)?.read_to_end(&mut data).map_err(io_err)?;
    let mut cur = Cursor { data: &data, pos: 0, record: None };
    if cur.take(8, "magic")? != MAGIC {
        return Err(DataError::MagicMismatch);
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(DataError::VersionMismatch { got: version });
    }
    let j = cur.u32("joint count")? as usize;
    let count = cur.u64("record count")?;
    let mut names = Vec::with_capacity(j);
    let mut parent = Vec::with_capacity(j);
    for i in 0..j {
        names.push(cur.string(&format!("joint {} name", i))?);
        parent.push(cur.u32("parent index")? as usize);
    }
    let n_pairs = cur.u32("pair count")? as usize;
    let mut lr_pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let l = cur.u32("pair")? as usize;
        let r = cur.u32("pair")? as usize;
        lr_pairs.push((l, r));
    }
    let n_groups = cur.u32("group count")? as usize;
    let mut part_groups = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let name = cur.string("group name")?;
        let n = cur.u32("group size")? as usize;
        let mut joints = Vec::with_capacity(n);
        for _ in 0..n {
            joints.push(cur.u32("group joint")? as usize);
        }
        part_groups.push((name, joints));
    }
    let topo_off = cur.pos as u64;
    let topo = SkeletonTopology::new(names, parent, lr_pairs, part_groups).map_err(|e| {
        DataError::Parse { offset: topo_off, record: None, detail: format!("invalid topology: {}", e) }
    })?;
    let cam = CameraModel { focal: cur.f32("focal")?, root_depth: cur.f32("root depth")? };
    let bone_lengths = cur.f32s(j, "bone lengths")?;
    let mut bone_dirs = Vec::with_capacity(j);
    for _ in 0..j {
        let d = cur.f32s(3, "bone dirs")?;
        bone_dirs.push([d[0], d[1], d[2]]);
    }
    let articulation = cur.f32s(j, "articulation")?;
    let r = cur.f32s(6, "ranges")?;
    let cfg_count = cur.u64("config count")? as usize;
    let seed = cur.u64("config seed")?;
    let config = DistributionConfig {
        bone_lengths,
        bone_dirs,
        articulation,
        scale_range: (r[0], r[1]),
        azimuth_range: (r[2], r[3]),
        elevation_range: (r[4], r[5]),
        count: cfg_count,
        seed,
    };
    let mut records = Vec::with_capacity(count as usize);
    for i in 0..count {
        cur.record = Some(i);
        let pose3d = cur.f32s(3 * j, "3d pose")?;
        let pose2d = cur.f32s(2 * j, "2d pose")?;
        records.push(Record { pose3d, pose2d });
    }
    cur.record = None;
    if cur.pos != data.len() {
        return Err(DataError::Parse {
            offset: cur.pos as u64,
            record: None,
            detail: format!("{} trailing bytes after last record", data.len() - cur.pos),
        });
    }
    Ok(Dataset { topo, cam, config, records })
}

/// Human-readable export: one record per line, 3D then 2D coordinates,
/// tab-separated.
pub fn export_tsv(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    let io_err = |source| DataError::Io { path: path.display().to_string(), source };
    let mut out = String::new();
    let j = ds.topo.joint_count();
    let mut header: Vec<String> = Vec::new();
    for name in ds.topo.joint_names() {
        for c in ["X", "Y", "Z"] {
            header.push(format!("{}_{}", name, c));
        }
    }
    for name in ds.topo.joint_names() {
        for c in ["u", "v"] {
            header.push(format!("{}_{}", name, c));
        }
    }
    out.push_str(&header.join("\t"));
    out.push('\n');
    for rec in &ds.records {
        let mut fields = Vec::with_capacity(5 * j);
        fields.extend(rec.pose3d.iter().map(|v| format!("{}", v)));
        fields.extend(rec.pose2d.iter().map(|v| format!("{}", v)));
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo() -> SkeletonTopology {
        SkeletonTopology::default_16()
    }

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    #[test]
    fn collapsed_ranges_give_canonical_pose() {
        let topo = topo();
        let mut cfg = desk_source(&topo, 4, 1);
        cfg.articulation = vec![0.0; 16];
        cfg.scale_range = (1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Pose3D<f64> = sample_pose3d(&cfg, &topo, &mut rng);
        let b: Pose3D<f64> = sample_pose3d(&cfg, &topo, &mut rng);
        assert_eq!(a.joints, b.joints);
        // canonical: head above pelvis, ankles below
        let head = topo.joint_index("head").unwrap();
        let ankle = topo.joint_index("left_ankle").unwrap();
        assert!(a.joints[head][1] < 0.0 && a.joints[ankle][1] > 0.0);
        assert_eq!(a.joints[topo.root()], [0.0; 3]);
    }

    #[test]
    fn bone_lengths_match_table_times_scale() {
        let topo = topo();
        let mut cfg = desk_target(&topo, 1, 9);
        cfg.scale_range = (0.8, 1.2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let pose: Pose3D<f64> = sample_pose3d(&cfg, &topo, &mut rng);
            // infer the sampled scale from the spine bone, check all others
            let spine = topo.joint_index("spine").unwrap();
            let d = |a: [f64; 3], b: [f64; 3]| {
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            };
            let scale =
                d(pose.joints[spine], pose.joints[topo.parent()[spine]]) / cfg.bone_lengths[spine] as f64;
            for (c, p) in topo.bones() {
                let len = d(pose.joints[c], pose.joints[p]);
                assert!((len - scale * cfg.bone_lengths[c] as f64).abs() < 1e-6, "bone {}", c);
            }
        }
    }

    #[test]
    fn limb_ratios_match_construction() {
        let topo = topo();
        let cfg = desk_target(&topo, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let pose: Pose3D<f64> = sample_pose3d(&cfg, &topo, &mut rng);
            let r = geometry::limb_ratios(&pose, &topo).unwrap();
            for (v, expect) in r.as_array().iter().zip([1.3, 1.3, 1.3, 1.3, 1.0]) {
                assert!((v - expect).abs() < 1e-6, "ratio {} vs {}", v, expect);
            }
        }
    }

    #[test]
    fn dataset_projection_consistency() {
        let topo = topo();
        let cam = CameraModel::default();
        let ds = make_dataset(&desk_target(&topo, 50, 7), &topo, &cam).unwrap();
        assert_eq!(ds.len(), 50);
        validate_dataset(&ds, 1e-5).unwrap();
    }

    #[test]
    fn same_seed_bit_identical_dataset() {
        let topo = topo();
        let cam = CameraModel::default();
        let a = make_dataset(&desk_source(&topo, 20, 42), &topo, &cam).unwrap();
        let b = make_dataset(&desk_source(&topo, 20, 42), &topo, &cam).unwrap();
        assert_eq!(a, b);
        let c = make_dataset(&desk_source(&topo, 20, 43), &topo, &cam).unwrap();
        assert_ne!(a.records[0], c.records[0]);
    }

    #[test]
    fn disjoint_elevation_ranges_are_distinguishable() {
        let topo = topo();
        let cam = CameraModel::default();
        let n = 10_000;
        let mut lo_cfg = desk_source(&topo, n, 100);
        lo_cfg.elevation_range = (-0.3, -0.2);
        let mut hi_cfg = desk_source(&topo, n, 101);
        hi_cfg.elevation_range = (0.2, 0.3);
        let mean_head_v = |ds: &Dataset| {
            let head = ds.topo.joint_index("head").unwrap();
            let mut vs: Vec<f64> = Vec::new();
            for rec in &ds.records {
                vs.push(rec.pose2d[head * 2 + 1] as f64);
            }
            let mean = vs.iter().sum::<f64>() / vs.len() as f64;
            let var = vs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vs.len() - 1) as f64;
            (mean, (var / vs.len() as f64).sqrt())
        };
        let a = mean_head_v(&make_dataset(&lo_cfg, &topo, &cam).unwrap());
        let b = mean_head_v(&make_dataset(&hi_cfg, &topo, &cam).unwrap());
        let sigma = (a.1.powi(2) + b.1.powi(2)).sqrt();
        assert!(
            (a.0 - b.0).abs() > 5.0 * sigma,
            "means {} vs {} with sigma {}",
            a.0,
            b.0,
            sigma
        );
    }

    #[test]
    fn noise_sigma_zero_is_identity() {
        let topo = topo();
        let cam = CameraModel::default();
        let ds = make_dataset(&desk_source(&topo, 3, 5), &topo, &cam).unwrap();
        let x = ds.pose2d(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = add_noise2d(&x, 0.0f32, topo.root(), &mut rng).unwrap();
        assert_eq!(x.joints, y.joints);
    }

    #[test]
    fn injected_noise_std_matches_sigma() {
        let topo = topo();
        let cam = CameraModel::default();
        let ds = make_dataset(&desk_source(&topo, 200, 6), &topo, &cam).unwrap();
        let sigma = 10.0f64;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut px_noise: Vec<f64> = Vec::new();
        for i in 0..ds.len() {
            let x: Pose2D<f64> =
                Pose2D { joints: ds.pose2d(i).joints.iter().map(|j| [j[0] as f64, j[1] as f64]).collect() };
            let h = pose_height(&x);
            for _ in 0..5 {
                let noisy = add_noise2d_raw(&x, sigma, &mut rng);
                for (a, b) in noisy.joints.iter().zip(&x.joints) {
                    px_noise.push((a[0] - b[0]) * PIXEL_PERSON_HEIGHT / h);
                    px_noise.push((a[1] - b[1]) * PIXEL_PERSON_HEIGHT / h);
                }
            }
        }
        let n = px_noise.len() as f64;
        let mean = px_noise.iter().sum::<f64>() / n;
        let std = (px_noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - sigma).abs() / sigma < 0.02, "std {} vs {}", std, sigma);
    }

    #[test]
    fn noisy_pose_stays_normalized() {
        let topo = topo();
        let cam = CameraModel::default();
        let ds = make_dataset(&desk_source(&topo, 5, 8), &topo, &cam).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..ds.len() {
            let y = add_noise2d(&ds.pose2d(i), 10.0f32, topo.root(), &mut rng).unwrap();
            let root = topo.root();
            assert_eq!(y.joints[root], [0.0, 0.0]);
            let mut mean = 0.0f64;
            for (j, p) in y.joints.iter().enumerate() {
                if j != root {
                    mean += ((p[0] as f64).powi(2) + (p[1] as f64).powi(2)).sqrt();
                }
            }
            mean /= (y.joints.len() - 1) as f64;
            assert!((mean - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn file_round_trip_bit_exact() {
        let topo = topo();
        let cam = CameraModel::default();
        let ds = make_dataset(&desk_target(&topo, 25, 77), &topo, &cam).unwrap();
        let path = tmpfile("d.ds");
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds, back);
        // write again: byte-identical
        let path2 = tmpfile("d2.ds");
        write_dataset(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_record_names_index() {
        let topo = topo();
        let cam = CameraModel::default();
        let ds = make_dataset(&desk_source(&topo, 10, 3), &topo, &cam).unwrap();
        let path = tmpfile("t.ds");
        write_dataset(&path, &ds).unwrap();
        let data = std::fs::read(&path).unwrap();
        // cut inside record 7
        let rec_bytes = 4 * 5 * 16;
        std::fs::write(&path, &data[..data.len() - 3 * rec_bytes + 10]).unwrap();
        match read_dataset(&path) {
            Err(DataError::Parse { record: Some(i), .. }) => assert_eq!(i, 7),
            other => panic!("expected record-indexed parse error, got {:?}", other.err()),
        }
    }

    #[test]
    fn magic_and_version_gates() {
        let topo = topo();
        let cam = CameraModel::default();
        let ds = make_dataset(&desk_source(&topo, 2, 3), &topo, &cam).unwrap();
        let path = tmpfile("m.ds");
        write_dataset(&path, &ds).unwrap();
        let good = std::fs::read(&path).unwrap();
        let mut bad = good.clone();
        bad[0] = b'Z';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_dataset(&path), Err(DataError::MagicMismatch)));
        let mut bad = good.clone();
        bad[8] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_dataset(&path), Err(DataError::VersionMismatch { got: 9 })));
    }

    #[test]
    fn tsv_export_line_count() {
        let topo = topo();
        let cam = CameraModel::default();
        let ds = make_dataset(&desk_source(&topo, 4, 3), &topo, &cam).unwrap();
        let path = tmpfile("e.tsv");
        export_tsv(&path, &ds).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1].split('\t').count(), 5 * 16);
    }

    #[test]
    fn invalid_configs_rejected() {
        let topo = topo();
        let mut cfg = desk_source(&topo, 1, 0);
        cfg.bone_lengths[3] = 0.0;
        assert!(cfg.validate(&topo).is_err());
        let mut cfg = desk_source(&topo, 1, 0);
        cfg.scale_range = (1.2, 0.8);
        assert!(cfg.validate(&topo).is_err());
        let mut cfg = desk_source(&topo, 1, 0);
        cfg.articulation.pop();
        assert!(cfg.validate(&topo).is_err());
    }
}
