//! Layered configuration: built-in defaults, then a TOML file, then flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};
use trajdiff_core::blursim::SynthConfig;
use trajdiff_core::cep::TrialConfig;
use trajdiff_core::deblur::DeconvParams;
use trajdiff_net::{ModelConfig, TrainConfig, Variant};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    #[default]
    Heldout,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateSection {
    /// Number of procedural sharp scenes; ignored when `sharp_dir` is set.
    pub sharps: usize,
    pub sharp_size: usize,
    /// Directory of sharp PNG images; empty selects procedural scenes.
    pub sharp_dir: String,
    /// Fraction of trajectories, taken from the end, held out from training.
    pub heldout_fraction: f64,
    #[serde(flatten)]
    pub synth: SynthConfig,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { sharps: 10, sharp_size: 128, sharp_dir: String::new(), heldout_fraction: 0.1, synth: SynthConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub variant: Variant,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { variant: Variant::Full, train: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateSection {
    /// Reverse diffusion steps.
    pub steps: usize,
    pub seed: u64,
    pub split: Split,
}

impl Default for EstimateSection {
    fn default() -> Self {
        Self { steps: 20, seed: 0, split: Split::Heldout }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CepSection {
    pub seed: u64,
    pub split: Split,
    /// Number of entries to evaluate, 0 for all.
    pub count: usize,
    #[serde(flatten)]
    pub trial: TrialConfig,
}

impl Default for CepSection {
    fn default() -> Self {
        Self { seed: 0, split: Split::All, count: 0, trial: TrialConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Seed of the random-trajectory baseline.
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotSection {
    /// Side of one square panel in pixels.
    pub panel: usize,
}

impl Default for PlotSection {
    fn default() -> Self {
        Self { panel: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    pub simulate: SimulateSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub estimate: EstimateSection,
    pub deblur: DeconvParams,
    pub cep: CepSection,
    pub eval: EvalSection,
    pub plot: PlotSection,
}

impl Config {
    /// Defaults, overlaid with `file`, overlaid with `key=value` pairs.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut tree = Value::try_from(Config::default()).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let user: Table = text.parse().map_err(|e: toml::de::Error| CliError::input(path, e.message()))?;
            check_known(&tree, &Value::Table(user.clone()), "").map_err(|m| CliError::input(path, m))?;
            merge(&mut tree, Value::Table(user));
        }
        for (key, raw) in overrides {
            set_key(&mut tree, key, parse_value(raw))?;
        }
        tree.try_into().map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))
    }
}

/// Parses a flag value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}").parse::<Table>().ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| Value::String(raw.to_string()))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() && !v.as_table().is_some_and(|t| t.contains_key("kind")) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Rejects keys the default tree does not have. Tagged enums (tables with a
/// `kind` key) and non-table defaults accept any value.
fn check_known(default: &Value, user: &Value, prefix: &str) -> std::result::Result<(), String> {
    let (Some(d), Some(u)) = (default.as_table(), user.as_table()) else { return Ok(()) };
    if d.contains_key("kind") {
        return Ok(());
    }
    for (k, v) in u {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match d.get(k) {
            Some(dv) => check_known(dv, v, &path)?,
            None => return Err(format!("unknown key `{path}`")),
        }
    }
    Ok(())
}

fn set_key(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = tree;
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| CliError::Config(format!("`{key}`: `{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            if !table.contains_key(*part) && !table.contains_key("kind") {
                return Err(CliError::Config(format!("unknown key `{key}`")));
            }
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table.get_mut(*part).ok_or_else(|| CliError::Config(format!("unknown key `{key}`")))?;
    }
    unreachable!("split yields at least one part")
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Snapshot of one run: the config sections it depends on plus the
/// fingerprints of its inputs.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    table: Table,
}

impl Snapshot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn section<T: Serialize>(mut self, name: &str, value: &T) -> Result<Self> {
        let v = Value::try_from(value).map_err(|e| CliError::Config(e.to_string()))?;
        self.table.insert(name.to_string(), v);
        Ok(self)
    }

    pub fn input(mut self, name: &str, value: impl Into<String>) -> Self {
        let inputs = self.table.entry("inputs").or_insert_with(|| Value::Table(Table::new()));
        inputs.as_table_mut().expect("inputs is a table").insert(name.to_string(), Value::String(value.into()));
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.table).expect("snapshot tables serialize")
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }
}

pub const SNAPSHOT_FILE: &str = "config.toml";
pub const DONE_FILE: &str = "done.json";

/// A content-addressed output directory `<root>/<kind>/<hash>`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
    pub id: String,
}

impl RunDir {
    pub fn new(root: &Path, kind: &str, snapshot: &Snapshot) -> Self {
        let id = snapshot.digest()[..16].to_string();
        Self { path: root.join(kind).join(&id), id }
    }

    pub fn is_complete(&self) -> bool {
        self.path.join(DONE_FILE).is_file()
    }

    /// Creates the directory and writes the snapshot. An existing snapshot
    /// must match byte for byte.
    pub fn prepare(&self, snapshot: &Snapshot) -> Result<()> {
        std::fs::create_dir_all(&self.path).map_err(|e| CliError::io(&self.path, e))?;
        let file = self.path.join(SNAPSHOT_FILE);
        let text = snapshot.to_toml();
        if file.exists() {
            let old = std::fs::read_to_string(&file).map_err(|e| CliError::io(&file, e))?;
            if old != text {
                return Err(CliError::input(&file, "run directory holds a different configuration"));
            }
            return Ok(());
        }
        std::fs::write(&file, text).map_err(|e| CliError::io(&file, e))
    }

    pub fn finish(&self, summary: &serde_json::Value) -> Result<()> {
        let file = self.path.join(DONE_FILE);
        let text = serde_json::to_string_pretty(summary).expect("json values serialize");
        std::fs::write(&file, text).map_err(|e| CliError::io(&file, e))
    }

    pub fn summary(&self) -> Result<serde_json::Value> {
        let file = self.path.join(DONE_FILE);
        let text = std::fs::read_to_string(&file).map_err(|e| CliError::io(&file, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::input(&file, e))
    }
}
