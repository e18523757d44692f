//! Run configuration: built-in defaults, optional named presets, a TOML file
//! and `section.key = value` overrides, applied in that order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::data::PrepConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalOptions, Protocol};
use crate::model::{ModelConfig, ModelKind};
use crate::probes::{BenchConfig, SmoothingOptions};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Raw TSV log read by `prep`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Dataset snapshot read by `train`, `eval` and the probes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<PathBuf>,
    /// Checkpoint read by `eval` and the probes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub max_malformed_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub protocol: Protocol,
    /// Also report metrics per activity bucket.
    pub buckets: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ks: vec![10, 20],
            protocol: Protocol::Full,
            buckets: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub sample_size: usize,
    pub include_diagonal: bool,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            sample_size: 1000,
            include_diagonal: true,
        }
    }
}

/// Every setting a command can read. All fields have defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds initialization, negative sampling, evaluation draws, probe
    /// sampling and benchmark fixtures. The synthetic generator has its own.
    pub seed: u64,
    pub kind: ModelKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub prep: PrepConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub probe: ProbeSection,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 42;
        Self {
            seed,
            kind: ModelKind::Star,
            preset: None,
            out_dir: PathBuf::from("out"),
            data: DataSection {
                max_malformed_fraction: 0.01,
                ..DataSection::default()
            },
            prep: PrepConfig::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            eval: EvalSection::default(),
            probe: ProbeSection::default(),
            bench: BenchConfig {
                seed,
                ..BenchConfig::default()
            },
        }
    }
}

/// Published per-dataset settings: `(d, n, heads, blocks)` for each model
/// and the count thresholds used when preparing that dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Preset {
    pub name: &'static str,
    pub star: (usize, usize, usize, usize),
    pub baseline: (usize, usize, usize, usize),
    pub min_user: usize,
    pub min_item: usize,
}

pub const PRESETS: &[Preset] = &[
    Preset { name: "beauty", star: (256, 75, 16, 3), baseline: (128, 75, 4, 2), min_user: 5, min_item: 5 },
    Preset { name: "toys", star: (256, 50, 8, 4), baseline: (128, 50, 2, 3), min_user: 5, min_item: 5 },
    Preset { name: "children", star: (512, 100, 1, 1), baseline: (256, 175, 2, 1), min_user: 10, min_item: 5 },
    Preset { name: "comics", star: (512, 200, 1, 1), baseline: (256, 200, 1, 1), min_user: 10, min_item: 5 },
    Preset { name: "ml-1m", star: (512, 200, 4, 4), baseline: (256, 150, 4, 3), min_user: 5, min_item: 5 },
    Preset { name: "ml-20m", star: (256, 100, 4, 4), baseline: (256, 150, 2, 3), min_user: 10, min_item: 5 },
];

pub fn preset(name: &str) -> Result<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
        let known: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
        Error::Config(format!("unknown preset '{name}' (known: {})", known.join(", ")))
    })
}

fn preset_table(p: &Preset, kind: ModelKind) -> Table {
    let (d, n, heads, blocks) = match kind {
        ModelKind::Star => p.star,
        ModelKind::Baseline => p.baseline,
    };
    let mut model = Table::new();
    for (k, v) in [("d", d), ("n", n), ("heads", heads), ("blocks", blocks)] {
        model.insert(k.into(), Value::Integer(v as i64));
    }
    let mut prep = Table::new();
    prep.insert("min_user".into(), Value::Integer(p.min_user as i64));
    prep.insert("min_item".into(), Value::Integer(p.min_item as i64));
    let mut t = Table::new();
    t.insert("model".into(), Value::Table(model));
    t.insert("prep".into(), Value::Table(prep));
    t
}

/// Recursively writes `overlay` into `base`; tables merge, anything else
/// replaces.
fn merge(base: &mut Table, overlay: Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Turns `a.b.c=value` into a nested table. The value is read as a TOML
/// literal when it parses as one and as a bare string otherwise.
pub fn parse_override(arg: &str) -> Result<Table> {
    let (path, raw) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{arg}' is not key=value")))?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override '{arg}' has an empty key")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    };
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys.pop().unwrap_or_default();
    let mut t = Table::new();
    t.insert(last.into(), value);
    for k in keys.into_iter().rev() {
        let mut outer = Table::new();
        outer.insert(k.into(), Value::Table(t));
        t = outer;
    }
    Ok(t)
}

fn lookup_str<'a>(t: &'a Table, key: &str) -> Option<&'a str> {
    t.get(key).and_then(Value::as_str)
}

impl RunConfig {
    /// Builds the effective configuration. `file` is TOML text, `overrides`
    /// are already parsed and applied last.
    pub fn resolve(file: Option<&str>, overrides: Vec<Table>) -> Result<Self> {
        let file: Table = match file {
            Some(text) => text
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(format!("config file: {}", e.message())))?,
            None => Table::new(),
        };
        let mut user = file;
        for o in overrides {
            merge(&mut user, o);
        }
        // Derived seeds may be spelled out (an echoed config does) but must
        // agree with the top-level one.
        let seed = user.get("seed").cloned().unwrap_or(Value::Integer(RunConfig::default().seed as i64));
        for section in ["train", "bench"] {
            if let Some(Value::Table(t)) = user.get(section) {
                if t.get("seed").is_some_and(|v| *v != seed) {
                    return Err(Error::Config(format!(
                        "{section}.seed is derived from the top-level seed and must match it"
                    )));
                }
            }
        }
        let mut base = Table::try_from(RunConfig::default())
            .map_err(|e| Error::Config(format!("default config: {e}")))?;
        // The preset depends on the model kind, which may itself be set by
        // the user, so both are read before merging.
        let kind: ModelKind = match lookup_str(&user, "kind") {
            Some(k) => k.parse()?,
            None => ModelKind::Star,
        };
        if let Some(name) = lookup_str(&user, "preset") {
            merge(&mut base, preset_table(preset(name)?, kind));
        }
        merge(&mut base, user);
        let mut cfg: RunConfig = Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.bench.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: Vec<Table>) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.prep.validate()?;
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.bench.validate()?;
        if !(0.0..=1.0).contains(&self.data.max_malformed_fraction) {
            return Err(Error::Config("data.max_malformed_fraction must lie in [0, 1]".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be non-empty and positive".into()));
        }
        if self.probe.sample_size == 0 {
            return Err(Error::Config("probe.sample_size must be at least 1".into()));
        }
        Ok(())
    }

    /// The effective configuration as TOML, echoed into every artifact.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot echo config: {e}")))
    }

    /// SHA-256 of [`RunConfig::to_toml`], hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            ks: self.eval.ks.clone(),
            protocol: self.eval.protocol,
            seed: self.seed,
        }
    }

    pub fn smoothing_options(&self) -> SmoothingOptions {
        SmoothingOptions {
            sample_size: self.probe.sample_size,
            seed: self.seed,
            include_diagonal: self.probe.include_diagonal,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
