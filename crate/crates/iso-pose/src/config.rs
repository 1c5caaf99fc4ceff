//! Declarative experiment files: a flat `section.key = value` text format
//! covering data generation, architecture, training, inference adaptation
//! and evaluation. Unknown keys are rejected; relative paths resolve
//! against the config file's directory; the `ISO_SEED` environment
//! variable overrides every seed in the file.

use crate::eval::Protocol;
use crate::iso::{IsoConfig, IsoMode};
use crate::losses::SslKind;
use crate::nn::ArchConfig;
use crate::train::TrainConfig;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: {detail}")]
    Syntax { line: usize, detail: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("config key '{key}': {detail}")]
    BadValue { key: String, detail: String },
}

/// Whether and how inference adapts per instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptMode {
    Off,
    Vanilla,
    Online,
}

impl AdaptMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "off" => Some(AdaptMode::Off),
            "vanilla" => Some(AdaptMode::Vanilla),
            "online" => Some(AdaptMode::Online),
            _ => None,
        }
    }
}

/// Fully-resolved experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source_count: usize,
    pub target_count: usize,
    pub data_seed: u64,
    pub source_path: PathBuf,
    pub target_path: PathBuf,
    pub sigma: f32,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub adapt: AdaptMode,
    pub iso: IsoConfig,
    pub protocol: Protocol,
    pub eval_full: bool,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            source_count: 20_000,
            target_count: 2_000,
            data_seed: 0,
            source_path: PathBuf::from("source.ds"),
            target_path: PathBuf::from("target.ds"),
            sigma: 0.0,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            adapt: AdaptMode::Off,
            iso: IsoConfig::vanilla(SslKind::Cycle),
            protocol: Protocol::Unscaled,
            eval_full: false,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        detail: format!("cannot parse '{}'", v),
    })
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::BadValue { key: key.to_string(), detail: format!("not a boolean: '{}'", v) }),
    }
}

fn parse_ssl(key: &str, v: &str) -> Result<SslKind, ConfigError> {
    match v {
        "none" => Ok(SslKind::None),
        "adversary" => Ok(SslKind::Adversary),
        "cycle" => Ok(SslKind::Cycle),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            detail: format!("expected none|adversary|cycle, got '{}'", v),
        }),
    }
}

impl RunConfig {
    /// Parse a config file; relative paths inside resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut cfg = Self::from_str(&text, &base)?;
        if let Ok(seed) = std::env::var("ISO_SEED") {
            let seed: u64 = parse_num("ISO_SEED", &seed)?;
            cfg.override_seeds(seed);
        }
        Ok(cfg)
    }

    /// Apply one seed to every stage (used by the `ISO_SEED` override and
    /// by multi-seed sweeps).
    pub fn override_seeds(&mut self, seed: u64) {
        self.data_seed = seed;
        self.train.seed = seed;
        self.iso.seed = seed;
    }

    pub fn from_str(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let resolve = |v: &str| -> PathBuf {
            let p = PathBuf::from(v);
            if p.is_absolute() { p } else { base.join(p) }
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: lineno + 1,
                    detail: format!("expected key = value, got '{}'", line),
                });
            };
            let key = key.trim();
            let v = value.trim();
            match key {
                "data.source_count" => cfg.source_count = parse_num(key, v)?,
                "data.target_count" => cfg.target_count = parse_num(key, v)?,
                "data.seed" => cfg.data_seed = parse_num(key, v)?,
                "data.source_path" => cfg.source_path = resolve(v),
                "data.target_path" => cfg.target_path = resolve(v),
                "data.sigma" => cfg.sigma = parse_num(key, v)?,
                "arch.width" => cfg.arch.width = parse_num(key, v)?,
                "arch.shared_blocks" => cfg.arch.shared_blocks = parse_num(key, v)?,
                "arch.head_blocks" => cfg.arch.head_blocks = parse_num(key, v)?,
                "arch.disc_blocks" => cfg.arch.disc_blocks = parse_num(key, v)?,
                "arch.dropout" => cfg.arch.dropout = parse_num(key, v)?,
                "train.epochs" => cfg.train.epochs = parse_num(key, v)?,
                "train.batch_size" => cfg.train.batch_size = parse_num(key, v)?,
                "train.lr" => cfg.train.initial_lr = parse_num(key, v)?,
                "train.gamma" => cfg.train.gamma = parse_num(key, v)?,
                "train.ssl" => cfg.train.ssl = parse_ssl(key, v)?,
                "train.lambda" => cfg.train.weights.lambda_joint = parse_num(key, v)?,
                "train.lambda_2d" => cfg.train.weights.lambda_2d = parse_num(key, v)?,
                "train.lambda_3d" => cfg.train.weights.lambda_3d = parse_num(key, v)?,
                "train.seed" => cfg.train.seed = parse_num(key, v)?,
                "train.flip" => cfg.train.flip_augment = parse_bool(key, v)?,
                "train.disc_lr" => cfg.train.disc_lr = Some(parse_num(key, v)?),
                "iso.mode" => {
                    cfg.adapt = AdaptMode::parse(v).ok_or_else(|| ConfigError::BadValue {
                        key: key.to_string(),
                        detail: format!("expected off|vanilla|online, got '{}'", v),
                    })?;
                    match cfg.adapt {
                        AdaptMode::Vanilla => cfg.iso.mode = IsoMode::Vanilla,
                        AdaptMode::Online => {
                            cfg.iso.mode = IsoMode::Online;
                            cfg.iso.t = 1;
                        }
                        AdaptMode::Off => {}
                    }
                }
                "iso.t" => cfg.iso.t = parse_num(key, v)?,
                "iso.alpha" => cfg.iso.alpha = parse_num(key, v)?,
                "iso.copies" => cfg.iso.copies = parse_num(key, v)?,
                "iso.skip" => cfg.iso.skip = parse_num(key, v)?,
                "iso.ssl" => {
                    let kind = parse_ssl(key, v)?;
                    if kind == SslKind::None {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            detail: "adaptation needs adversary or cycle".into(),
                        });
                    }
                    cfg.iso.ssl = kind;
                }
                "iso.seed" => cfg.iso.seed = parse_num(key, v)?,
                "eval.protocol" => {
                    cfg.protocol = match v {
                        "us" => Protocol::Unscaled,
                        "gs" => Protocol::GlobalScale,
                        "pa" => Protocol::Procrustes,
                        _ => {
                            return Err(ConfigError::BadValue {
                                key: key.to_string(),
                                detail: format!("expected us|gs|pa, got '{}'", v),
                            })
                        }
                    }
                }
                "eval.full" => cfg.eval_full = parse_bool(key, v)?,
                "out.dir" => cfg.out_dir = resolve(v),
                _ => return Err(ConfigError::UnknownKey(key.to_string())),
            }
        }
        Ok(cfg)
    }

    /// Echo the fully-resolved config as key=value lines (the manifest
    /// written next to every command's outputs).
    pub fn manifest(&self) -> String {
        let ssl = |k: SslKind| match k {
            SslKind::None => "none",
            SslKind::Adversary => "adversary",
            SslKind::Cycle => "cycle",
        };
        let mode = match self.adapt {
            AdaptMode::Off => "off",
            AdaptMode::Vanilla => "vanilla",
            AdaptMode::Online => "online",
        };
        format!(
            "data.source_count = {}\ndata.target_count = {}\ndata.seed = {}\n\
             data.source_path = {}\ndata.target_path = {}\ndata.sigma = {}\n\
             arch.width = {}\narch.shared_blocks = {}\narch.head_blocks = {}\n\
             arch.disc_blocks = {}\narch.dropout = {}\n\
             train.epochs = {}\ntrain.batch_size = {}\ntrain.lr = {}\ntrain.gamma = {}\n\
             train.ssl = {}\ntrain.lambda = {}\ntrain.lambda_2d = {}\ntrain.lambda_3d = {}\n\
             train.seed = {}\ntrain.flip = {}\n{}\
             iso.mode = {}\niso.t = {}\niso.alpha = {}\niso.copies = {}\niso.skip = {}\n\
             iso.ssl = {}\niso.seed = {}\n\
             eval.protocol = {}\neval.full = {}\nout.dir = {}\n",
            self.source_count,
            self.target_count,
            self.data_seed,
            self.source_path.display(),
            self.target_path.display(),
            self.sigma,
            self.arch.width,
            self.arch.shared_blocks,
            self.arch.head_blocks,
            self.arch.disc_blocks,
            self.arch.dropout,
            self.train.epochs,
            self.train.batch_size,
            self.train.initial_lr,
            self.train.gamma,
            ssl(self.train.ssl),
            self.train.weights.lambda_joint,
            self.train.weights.lambda_2d,
            self.train.weights.lambda_3d,
            self.train.seed,
            self.train.flip_augment,
            self.train
                .disc_lr
                .map(|v| format!("train.disc_lr = {}\n", v))
                .unwrap_or_default(),
            mode,
            self.iso.t,
            self.iso.alpha,
            self.iso.copies,
            self.iso.skip,
            ssl(self.iso.ssl),
            self.iso.seed,
            self.protocol.tag().to_lowercase(),
            self.eval_full,
            self.out_dir.display(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_resolves_paths() {
        let text = "\
# experiment
data.source_count = 100
data.source_path = data/src.ds
train.epochs = 5
train.ssl = cycle
iso.mode = online
iso.alpha = 2e-5
eval.protocol = pa
out.dir = results
";
        let cfg = RunConfig::from_str(text, Path::new("/exp")).unwrap();
        assert_eq!(cfg.source_count, 100);
        assert_eq!(cfg.source_path, PathBuf::from("/exp/data/src.ds"));
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.ssl, SslKind::Cycle);
        assert_eq!(cfg.adapt, AdaptMode::Online);
        assert_eq!(cfg.iso.t, 1);
        assert_eq!(cfg.iso.alpha, 2e-5);
        assert_eq!(cfg.protocol, Protocol::Procrustes);
        assert_eq!(cfg.out_dir, PathBuf::from("/exp/results"));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            RunConfig::from_str("mystery.key = 1\n", Path::new(".")),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            RunConfig::from_str("train.epochs = many\n", Path::new(".")),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            RunConfig::from_str("no equals sign\n", Path::new(".")),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::from_str("iso.ssl = none\n", Path::new(".")),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn manifest_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.epochs = 7;
        cfg.train.disc_lr = Some(1e-3);
        cfg.adapt = AdaptMode::Vanilla;
        cfg.iso.mode = IsoMode::Vanilla;
        let text = cfg.manifest();
        let back = RunConfig::from_str(&text, Path::new("")).unwrap();
        assert_eq!(back.train.epochs, 7);
        assert_eq!(back.train.disc_lr, Some(1e-3));
        assert_eq!(back.adapt, AdaptMode::Vanilla);
        // a manifest re-parse is a fixed point
        assert_eq!(back.manifest(), text);
    }

    #[test]
    fn seed_override_applies_everywhere() {
        let mut cfg = RunConfig::default();
        cfg.override_seeds(42);
        assert_eq!(cfg.data_seed, 42);
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.iso.seed, 42);
    }
}
