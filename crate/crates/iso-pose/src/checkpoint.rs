//! Binary checkpoint container and the full-model save/load built on it.
//!
//! Container layout: magic `ISOCKPT1`, format version (u32 LE), entry count
//! (u32 LE), then per entry: name length (u32 LE), UTF-8 name, rank
//! (u32 LE), dims (u64 LE each), raw 32-bit LE values. Everything
//! round-trips bit-exact; non-float metadata rides in f32 slots via
//! `from_bits`/`to_bits`.

use crate::geometry::SkeletonTopology;
use crate::losses::SslKind;
use crate::nn::{
    build_discriminator, build_lifter, ArchConfig, Discriminator, LifterNetwork, NnError, ParamGroup,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"ISOCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file: bad magic bytes at offset 0")]
    MagicMismatch,
    #[error("unsupported checkpoint format version {got} (expected {FORMAT_VERSION})")]
    VersionMismatch { got: u32 },
    #[error("corrupt checkpoint at byte offset {offset}: {detail}")]
    Parse { offset: u64, detail: String },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Net(#[from] NnError),
}

/// One named tensor in the container.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u64>,
    pub values: Vec<f32>,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, values: Vec<f32>) -> Self {
        Entry { name: name.into(), dims, values }
    }

    fn numel(&self) -> u64 {
        self.dims.iter().product::<u64>()
    }
}

// ---- container I/O ----

pub fn write_container(path: &Path, entries: &[Entry]) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        debug_assert_eq!(e.numel() as usize, e.values.len(), "entry {} dims/values mismatch", e.name);
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for &d in &e.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &e.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.data.len() {
            return Err(CheckpointError::Parse {
                offset: self.pos as u64,
                detail: format!("file truncated while reading {} ({} bytes needed)", what, n),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_container(path: &Path) -> Result<Vec<Entry>, CheckpointError> {
    let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let mut data = Vec::new();
    std::fs::File::open(path).map_err(io_err)?.read_to_end(&mut data).map_err(io_err)?;
    let mut cur = Cursor { data: &data, pos: 0 };
    if cur.take(8, "magic")? != MAGIC {
        return Err(CheckpointError::MagicMismatch);
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { got: version });
    }
    let count = cur.u32("entry count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name_off = cur.pos as u64;
        let name = std::str::from_utf8(cur.take(name_len, "entry name")?)
            .map_err(|e| CheckpointError::Parse {
                offset: name_off,
                detail: format!("entry {} name is not UTF-8: {}", i, e),
            })?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u64("dim")?);
        }
        let numel = dims.iter().product::<u64>() as usize;
        let raw = cur.take(4 * numel, "values")?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        entries.push(Entry { name, dims, values });
    }
    if cur.pos != data.len() {
        return Err(CheckpointError::Parse {
            offset: cur.pos as u64,
            detail: format!("{} trailing bytes after last entry", data.len() - cur.pos),
        });
    }
    Ok(entries)
}

// ---- metadata encoding ----

fn push_u32(v: &mut Vec<f32>, x: u32) {
    v.push(f32::from_bits(x));
}

fn push_u64(v: &mut Vec<f32>, x: u64) {
    push_u32(v, (x >> 32) as u32);
    push_u32(v, x as u32);
}

fn push_f64(v: &mut Vec<f32>, x: f64) {
    push_u64(v, x.to_bits());
}

struct BitReader<'a> {
    v: &'a [f32],
    pos: usize,
    name: &'a str,
}

impl BitReader<'_> {
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let x = self.v.get(self.pos).ok_or_else(|| CheckpointError::Parse {
            offset: 0,
            detail: format!("entry {} too short", self.name),
        })?;
        self.pos += 1;
        Ok(x.to_bits())
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let hi = self.u32()? as u64;
        let lo = self.u32()? as u64;
        Ok((hi << 32) | lo)
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_bits(self.u64()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub seed: u64,
    pub ssl: SslKind,
}

fn ssl_code(k: SslKind) -> u32 {
    match k {
        SslKind::None => 0,
        SslKind::Adversary => 1,
        SslKind::Cycle => 2,
    }
}

fn ssl_from_code(c: u32) -> Result<SslKind, CheckpointError> {
    match c {
        0 => Ok(SslKind::None),
        1 => Ok(SslKind::Adversary),
        2 => Ok(SslKind::Cycle),
        _ => Err(CheckpointError::Parse { offset: 0, detail: format!("unknown ssl kind code {}", c) }),
    }
}

fn arch_entry(cfg: &ArchConfig) -> Entry {
    let mut v = Vec::new();
    push_u32(&mut v, cfg.joints as u32);
    push_u32(&mut v, cfg.width as u32);
    push_u32(&mut v, cfg.shared_blocks as u32);
    push_u32(&mut v, cfg.head_blocks as u32);
    push_u32(&mut v, cfg.disc_blocks as u32);
    push_f64(&mut v, cfg.dropout);
    push_f64(&mut v, cfg.leaky_slope);
    push_f64(&mut v, cfg.bn_momentum);
    push_f64(&mut v, cfg.bn_eps);
    push_u32(&mut v, cfg.root_joint as u32);
    Entry::new("arch/config", vec![v.len() as u64], v)
}

fn arch_from_entry(e: &Entry) -> Result<ArchConfig, CheckpointError> {
    let mut r = BitReader { v: &e.values, pos: 0, name: &e.name };
    Ok(ArchConfig {
        joints: r.u32()? as usize,
        width: r.u32()? as usize,
        shared_blocks: r.u32()? as usize,
        head_blocks: r.u32()? as usize,
        disc_blocks: r.u32()? as usize,
        dropout: r.f64()?,
        leaky_slope: r.f64()?,
        bn_momentum: r.f64()?,
        bn_eps: r.f64()?,
        root_joint: r.u32()? as usize,
    })
}

fn meta_entry(meta: &CheckpointMeta) -> Entry {
    let mut v = Vec::new();
    push_u64(&mut v, meta.epoch);
    push_u64(&mut v, meta.seed);
    push_u32(&mut v, ssl_code(meta.ssl));
    Entry::new("meta/info", vec![v.len() as u64], v)
}

fn meta_from_entry(e: &Entry) -> Result<CheckpointMeta, CheckpointError> {
    let mut r = BitReader { v: &e.values, pos: 0, name: &e.name };
    Ok(CheckpointMeta { epoch: r.u64()?, seed: r.u64()?, ssl: ssl_from_code(r.u32()?)? })
}

/// Topology entries: one per joint carrying its name and parent, one for
/// the left/right pairs, one per part group.
pub fn topology_entries(topo: &SkeletonTopology) -> Vec<Entry> {
    let mut out = Vec::new();
    for (i, name) in topo.joint_names().iter().enumerate() {
        out.push(Entry::new(
            format!("topo/joint/{:03}/{}", i, name),
            vec![1],
            vec![topo.parent()[i] as f32],
        ));
    }
    let mut pairs = Vec::new();
    for &(l, r) in topo.lr_pairs() {
        pairs.push(l as f32);
        pairs.push(r as f32);
    }
    out.push(Entry::new("topo/lr_pairs", vec![topo.lr_pairs().len() as u64, 2], pairs));
    for (i, (name, joints)) in topo.part_groups().iter().enumerate() {
        out.push(Entry::new(
            format!("topo/group/{:03}/{}", i, name),
            vec![joints.len() as u64],
            joints.iter().map(|&j| j as f32).collect(),
        ));
    }
    out
}

pub fn topology_from_entries(entries: &[Entry]) -> Result<SkeletonTopology, CheckpointError> {
    let mut joints: Vec<(usize, String, usize)> = Vec::new();
    let mut lr_pairs = Vec::new();
    let mut groups: Vec<(usize, String, Vec<usize>)> = Vec::new();
    for e in entries {
        if let Some(rest) = e.name.strip_prefix("topo/joint/") {
            let (idx, name) = rest.split_once('/').ok_or_else(|| CheckpointError::Parse {
                offset: 0,
                detail: format!("malformed topology entry name {}", e.name),
            })?;
            let idx: usize = idx.parse().map_err(|_| CheckpointError::Parse {
                offset: 0,
                detail: format!("bad joint index in {}", e.name),
            })?;
            joints.push((idx, name.to_string(), e.values[0] as usize));
        } else if e.name == "topo/lr_pairs" {
            for p in e.values.chunks_exact(2) {
                lr_pairs.push((p[0] as usize, p[1] as usize));
            }
        } else if let Some(rest) = e.name.strip_prefix("topo/group/") {
            let (idx, name) = rest.split_once('/').ok_or_else(|| CheckpointError::Parse {
                offset: 0,
                detail: format!("malformed topology entry name {}", e.name),
            })?;
            let idx: usize = idx.parse().map_err(|_| CheckpointError::Parse {
                offset: 0,
                detail: format!("bad group index in {}", e.name),
            })?;
            groups.push((idx, name.to_string(), e.values.iter().map(|&v| v as usize).collect()));
        }
    }
    joints.sort_by_key(|(i, _, _)| *i);
    groups.sort_by_key(|(i, _, _)| *i);
    if joints.is_empty() {
        return Err(CheckpointError::Parse { offset: 0, detail: "no topology joints found".into() });
    }
    for (k, (i, _, _)) in joints.iter().enumerate() {
        if *i != k {
            return Err(CheckpointError::Parse {
                offset: 0,
                detail: format!("topology joint indices not contiguous at {}", k),
            });
        }
    }
    let names: Vec<String> = joints.iter().map(|(_, n, _)| n.clone()).collect();
    let parent: Vec<usize> = joints.iter().map(|(_, _, p)| *p).collect();
    let part_groups: Vec<(String, Vec<usize>)> =
        groups.into_iter().map(|(_, n, js)| (n, js)).collect();
    SkeletonTopology::new(names, parent, lr_pairs, part_groups)
        .map_err(|e| CheckpointError::Parse { offset: 0, detail: format!("invalid topology: {}", e) })
}

// ---- full model save/load ----

/// A loaded checkpoint. `disc` is present only for joint-training
/// checkpoints (those that carry the SSL head and discriminator).
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub topo: SkeletonTopology,
    pub meta: CheckpointMeta,
    pub lifter: LifterNetwork<f32>,
    pub disc: Option<Discriminator<f32>>,
}

impl Checkpoint {
    /// Whether this checkpoint can seed inference-stage adaptation.
    pub fn has_ssl(&self) -> bool {
        self.disc.is_some()
    }
}

/// Save lifter (+ discriminator for joint checkpoints) with topology and
/// metadata. Baseline checkpoints (no discriminator) carry only the shared
/// extractor and FSL head.
pub fn save_checkpoint(
    path: &Path,
    lifter: &LifterNetwork<f32>,
    disc: Option<&Discriminator<f32>>,
    topo: &SkeletonTopology,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    let mut entries = vec![arch_entry(&lifter.config), meta_entry(meta)];
    entries.extend(topology_entries(topo));
    let groups: &[ParamGroup] = if disc.is_some() {
        &[ParamGroup::Extractor, ParamGroup::FslHead, ParamGroup::SslHead]
    } else {
        &[ParamGroup::Extractor, ParamGroup::FslHead]
    };
    for (name, shape, data) in lifter.entries_for(groups) {
        entries.push(Entry::new(name, shape.iter().map(|&d| d as u64).collect(), data));
    }
    if let Some(d) = disc {
        for (name, shape, data) in d.entries() {
            entries.push(Entry::new(name, shape.iter().map(|&d| d as u64).collect(), data));
        }
    }
    write_container(path, &entries)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let entries = read_container(path)?;
    let mut map: HashMap<&str, &Entry> = HashMap::new();
    for e in &entries {
        if map.insert(e.name.as_str(), e).is_some() {
            return Err(CheckpointError::Parse {
                offset: 0,
                detail: format!("duplicate entry {}", e.name),
            });
        }
    }
    let arch = arch_from_entry(map.get("arch/config").copied().ok_or_else(|| {
        CheckpointError::Parse { offset: 0, detail: "missing arch/config entry".into() }
    })?)?;
    let meta = meta_from_entry(map.get("meta/info").copied().ok_or_else(|| {
        CheckpointError::Parse { offset: 0, detail: "missing meta/info entry".into() }
    })?)?;
    let topo = topology_from_entries(&entries)?;
    if topo.joint_count() != arch.joints {
        return Err(CheckpointError::Incompatible(format!(
            "topology has {} joints but the architecture expects {}",
            topo.joint_count(),
            arch.joints
        )));
    }
    let has_ssl = map.contains_key("lifter/theta_s/p000");
    // deterministic scaffold; every stored group is overwritten below
    let mut scaffold_rng = ChaCha8Rng::seed_from_u64(0);
    let mut lifter = build_lifter::<f32>(&arch, &mut scaffold_rng)?;
    let mut lookup = |name: &str| -> Option<(Vec<usize>, Vec<f32>)> {
        map.get(name)
            .map(|e| (e.dims.iter().map(|&d| d as usize).collect(), e.values.clone()))
    };
    let groups: &[ParamGroup] = if has_ssl {
        &[ParamGroup::Extractor, ParamGroup::FslHead, ParamGroup::SslHead]
    } else {
        &[ParamGroup::Extractor, ParamGroup::FslHead]
    };
    lifter.load_entries(groups, &mut lookup)?;
    let disc = if has_ssl {
        let mut d = build_discriminator::<f32>(&arch, &mut scaffold_rng)?;
        d.load_entries(&mut lookup)?;
        Some(d)
    } else {
        if map.contains_key("disc/theta_d/p000") {
            return Err(CheckpointError::Incompatible(
                "discriminator present without an SSL head".into(),
            ));
        }
        None
    };
    Ok(Checkpoint { arch, topo, meta, lifter, disc })
}
