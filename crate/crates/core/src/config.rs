//! Experiment configuration: profile defaults, a TOML file, then `key=value` overrides.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{DomainSpec, GeometrySpec};
use crate::error::{Error, Result};
use crate::segnet::ArchConfig;
use crate::teacher::EmaConfig;
use crate::trainer::{Flags, SourceConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Published hyper-parameters, unchanged.
    Paper,
    /// Tuned to finish on one CPU core in seconds per run.
    #[default]
    Desk,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected paper or desk)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub size: usize,
    pub num_classes: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub n_eval: usize,
    pub seed: u64,
    pub geometry: GeometrySpec,
    pub source_domain: DomainSpec,
    pub target_domain: DomainSpec,
    /// Directory datasets replace the generator when set.
    pub source_dir: Option<PathBuf>,
    pub target_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub mapping: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            size: 64,
            num_classes: 6,
            n_source: 200,
            n_target: 400,
            n_eval: 100,
            seed: 0,
            geometry: GeometrySpec::default(),
            source_domain: DomainSpec::source(),
            target_domain: DomainSpec::target(),
            source_dir: None,
            target_dir: None,
            eval_dir: None,
            mapping: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Iterations between metric rows; 0 writes only the final row.
    pub interval: u64,
    pub silhouette_pixels: usize,
    pub mst: bool,
    pub mst_scales: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            interval: 0,
            silhouette_pixels: 256,
            mst: false,
            mst_scales: vec![0.75, 1.0, 1.25],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub output_dir: PathBuf,
    /// Iterations between run-state checkpoints; 0 saves only at the end.
    pub checkpoint_interval: u64,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Desk)
    }
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self {
                profile,
                output_dir: PathBuf::from("runs/paper"),
                checkpoint_interval: 500,
                arch: ArchConfig::default(),
                train: TrainConfig {
                    batch_size: 2,
                    crop_size: Some(512),
                    ..TrainConfig::default()
                },
                data: DataConfig::default(),
                eval: EvalConfig {
                    interval: 200,
                    ..EvalConfig::default()
                },
            },
            Profile::Desk => Self {
                profile,
                output_dir: PathBuf::from("runs/desk"),
                checkpoint_interval: 0,
                arch: desk_arch(),
                train: desk_train(),
                data: desk_data(),
                eval: EvalConfig::default(),
            },
        }
    }

    /// Profile defaults, then `file`, then `key.path=value` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let file_doc = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let doc: toml::Table = toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                Some(doc)
            }
            None => None,
        };
        let parsed: Vec<(Vec<String>, toml::Value)> = overrides.iter().map(|o| parse_override(o)).collect::<Result<_>>()?;

        let mut profile = Profile::default();
        if let Some(p) = file_doc.as_ref().and_then(|d| d.get("profile")).and_then(|v| v.as_str()) {
            profile = p.parse()?;
        }
        for (path, value) in &parsed {
            if path.len() == 1 && path[0] == "profile" {
                profile = value
                    .as_str()
                    .ok_or_else(|| Error::Config("profile must be a string".into()))?
                    .parse()?;
            }
        }

        let mut doc = toml::Table::try_from(Self::for_profile(profile))
            .map_err(|e| Error::Config(format!("profile defaults: {e}")))?;
        if let Some(file_doc) = file_doc {
            merge(&mut doc, file_doc);
        }
        for (path, value) in parsed {
            set_path(&mut doc, &path, value)?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        self.data.source_domain.validate()?;
        self.data.target_domain.validate()?;
        if self.arch.num_classes != self.data.num_classes {
            return Err(Error::Config(format!(
                "arch.num_classes {} differs from data.num_classes {}",
                self.arch.num_classes, self.data.num_classes
            )));
        }
        if self.data.size % self.arch.stride() != 0 {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of the network stride {}",
                self.data.size,
                self.arch.stride()
            )));
        }
        if self.eval.mst_scales.is_empty() || self.eval.mst_scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("mst_scales must be non-empty and positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Writes the fully resolved configuration next to the run outputs.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved_config.toml");
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn mst_scales(&self) -> Option<&[f64]> {
        self.eval.mst.then_some(self.eval.mst_scales.as_slice())
    }
}

/// Keeps the second block at stride 1: output stride 2 on 64 px frames.
fn desk_arch() -> ArchConfig {
    let mut arch = ArchConfig::default();
    arch.blocks[1].stride = 1;
    arch
}

/// Larger, fewer shapes and a target domain 70% of the way to the full shift.
fn desk_data() -> DataConfig {
    DataConfig {
        geometry: GeometrySpec {
            max_shapes: 3,
            half_range: (0.15, 0.26),
            ..GeometrySpec::default()
        },
        target_domain: DomainSpec::source().blend(&DomainSpec::target(), 0.7),
        ..DataConfig::default()
    }
}

fn desk_train() -> TrainConfig {
    TrainConfig {
        flags: Flags::ALL,
        samples_per_class: 64,
        lr_feature: 3e-4,
        lr_classifier: 3e-3,
        lr_metric: 3e-3,
        ema: EmaConfig {
            smoothing: 0.01,
            update_period: 1,
        },
        iterations: 300,
        batch_size: 2,
        n_mocm: 2,
        tau_mocm: 1.0,
        buffer_capacity: 20,
        source: SourceConfig {
            iterations: 400,
            batch_size: 4,
            lr_feature: 1e-2,
            lr_classifier: 1e-1,
            ..SourceConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets a dotted path inside a TOML table, creating intermediate tables.
pub fn set_path(doc: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` is not a table")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// Returns a copy of `cfg` with one dotted field replaced.
pub fn with_override<T: Serialize + for<'de> Deserialize<'de>>(cfg: &T, key: &str, value: &str) -> Result<T> {
    let (path, value) = parse_override(&format!("{key}={value}"))?;
    let mut doc = toml::Table::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?;
    set_path(&mut doc, &path, value)?;
    toml::Value::Table(doc)
        .try_into()
        .map_err(|e| Error::Config(format!("override {key}: {e}")))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
    _file: File,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::Config(format!("{} is locked by another run", dir.display()))
                } else {
                    Error::io(&path, e)
                }
            })?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_profile_file_override() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("exp.toml");
        fs::write(&file, "[train]\nalpha = 4.0\nbeta = 0.5\n").unwrap();
        let cfg = ExperimentConfig::resolve(Some(&file), &["train.beta=0.7".into()]).unwrap();
        assert_eq!(cfg.profile, Profile::Desk);
        assert_eq!(cfg.train.alpha, 4.0);
        assert_eq!(cfg.train.beta, 0.7);
        assert_eq!(cfg.train.iterations, desk_train().iterations);
    }

    #[test]
    fn paper_profile_keeps_published_rates() {
        let cfg = ExperimentConfig::resolve(None, &["profile=paper".into()]).unwrap();
        assert_eq!(cfg.train.lr_feature, 2.5e-4);
        assert_eq!(cfg.train.lr_classifier, 2.5e-3);
        assert_eq!(cfg.train.lr_metric, 3e-4);
        assert_eq!(cfg.train.temperature, 0.25);
        assert_eq!(cfg.train.metric_quantile, 0.2);
        assert_eq!(cfg.arch.metric_dim, 128);
        assert_eq!(cfg.train.buffer_capacity, 50);
        assert_eq!((cfg.train.alpha, cfg.train.beta, cfg.train.tau_mocm), (2.0, 0.6, 0.8));
        assert_eq!(cfg.train.n_mocm, 10);
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_inputs_are_config_errors() {
        assert!(matches!(
            ExperimentConfig::resolve(None, &["train.alpha".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::resolve(None, &["train.flags.mocm=true".into(), "train.flags.mgs=false".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::resolve(None, &["profile=huge".into()]),
            Err(Error::Config(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("bad.toml");
        fs::write(&file, "train = [").unwrap();
        assert!(matches!(ExperimentConfig::resolve(Some(&file), &[]), Err(Error::Config(_))));
    }

    #[test]
    fn with_override_sets_nested_field() {
        let cfg = with_override(&TrainConfig::default(), "ema.smoothing", "0.5").unwrap();
        assert_eq!(cfg.ema.smoothing, 0.5);
    }

    #[test]
    fn output_lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutputLock::acquire(dir.path()).unwrap();
        assert!(OutputLock::acquire(dir.path()).is_err());
        drop(lock);
        OutputLock::acquire(dir.path()).unwrap();
    }
}
