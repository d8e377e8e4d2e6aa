//! Resolved run configuration: built-in defaults, then the JSON config
//! file, then command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use incepformer::baselines::{FbccaParams, Method};
use incepformer::eval::TrainSchedule;
use incepformer::model::ModelConfig;
use incepformer::signal::filter::FilterSpec;
use incepformer::signal::synth::SynthConfig;
use incepformer::signal::{Window, DEFAULT_BANDS, OCCIPITAL_CHANNELS, TD_BENCHMARK};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Visual latency in seconds.
    pub td: f64,
    /// Epoch length in seconds.
    pub tw: f64,
    pub bands: Vec<FilterSpec>,
    pub channels: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            td: TD_BENCHMARK,
            tw: 1.0,
            bands: DEFAULT_BANDS.to_vec(),
            channels: OCCIPITAL_CHANNELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl PipelineConfig {
    pub fn window(&self) -> Window {
        Window {
            td: self.td,
            tw: self.tw,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub method: Method,
    pub fbcca: FbccaParams,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            method: Method::Fbcca,
            fbcca: FbccaParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub n_blocks: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            n_blocks: (1..=6).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub outdir: PathBuf,
    pub workers: usize,
    /// Archive read by the command (raw for `preprocess`, epochs otherwise).
    pub input: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Training arithmetic; checkpoints are always stored as f32.
    pub precision: Precision,
    pub pipeline: PipelineConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub baseline: BaselineConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            outdir: PathBuf::from("runs"),
            workers: 1,
            input: None,
            checkpoint: None,
            precision: Precision::F32,
            pipeline: PipelineConfig::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            schedule: TrainSchedule::default(),
            baseline: BaselineConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Keys that only affect where and how fast a run happens, not its results.
const UNHASHED: [&str; 2] = ["outdir", "workers"];

impl RunConfig {
    /// SHA-256 over the canonical JSON form, without `outdir` and `workers`.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        for k in UNHASHED {
            obj.remove(k);
        }
        let digest = Sha256::digest(serde_json::to_string(&v).expect("config serializes").as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.synth.validate()?;
        if !(self.pipeline.tw > 0.0 && self.pipeline.td >= 0.0) {
            return Err(CliError::Usage(format!(
                "window needs tw > 0 and td >= 0, got tw {} td {}",
                self.pipeline.tw, self.pipeline.td
            )));
        }
        if self.workers == 0 {
            return Err(CliError::Usage("workers must be at least 1".into()));
        }
        Ok(())
    }
}

/// Recursively overlays `top` onto `base`; objects merge, anything else replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `a.b.c` in `root`, creating objects along the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("malformed key `{path}`")));
    }
    for p in &parts[..parts.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("`{path}` descends into a non-object")))?;
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| CliError::Usage(format!("`{path}` descends into a non-object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// `key=value`, where the value is read as JSON and falls back to a string.
pub fn parse_assignment(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("expected KEY=VALUE, got `{s}`")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Builds the run configuration: defaults < `file` < `overrides` (applied in order).
pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig, CliError> {
    let mut v = serde_json::to_value(RunConfig::default()).expect("config serializes");
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| incepformer::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let top: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        if !top.is_object() {
            return Err(CliError::Usage(format!("config {} must hold a JSON object", path.display())));
        }
        merge(&mut v, top);
    }
    for (k, val) in overrides {
        set_path(&mut v, k, val.clone())?;
    }
    let cfg: RunConfig = serde_json::from_value(v).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}
