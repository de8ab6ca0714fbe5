//! Run configuration as flat `section.key = value` text.
//!
//! Every key has a default; a file only lists what it overrides. Rendering
//! writes every key, so the effective configuration can be stored next to
//! the run and parsed back unchanged.

use std::path::PathBuf;

use modalfuse::data::DataConfig;
use modalfuse::eval::{toy_model_config, AblationConfig, BaseConfig, EvalConfig};
use modalfuse::model::ModelConfig;
use modalfuse::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub id: String,
    pub out_dir: PathBuf,
    /// Checkpoint period in steps; `0` keeps only the first and last.
    pub checkpoint_every: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            id: "toy".into(),
            out_dir: PathBuf::from("runs/toy"),
            checkpoint_every: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub base: BaseConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSection::default(),
            model: toy_model_config(),
            train: TrainConfig::desk(3000),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            base: BaseConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

fn insert(root: &mut Map<String, Value>, key: &str, v: Value) {
    match key.split_once('.') {
        Some((head, rest)) => {
            let child = root
                .entry(head.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            if let Value::Object(m) = child {
                insert(m, rest, v);
            }
        }
        None => {
            root.insert(key.to_string(), v);
        }
    }
}

fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render_value).collect::<Vec<_>>().join(", "),
        other => other.to_string(),
    }
}

/// Parses `raw` with the type of the default value `like`.
fn parse_value(raw: &str, like: &Value) -> Result<Value, String> {
    let raw = raw.trim();
    match like {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| format!("expected true or false, got `{raw}`")),
        Value::Number(n) if n.is_u64() => raw
            .parse::<u64>()
            .map(Value::from)
            .map_err(|_| format!("expected a nonnegative integer, got `{raw}`")),
        Value::Number(_) => match raw.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(Value::from(x)),
            _ => Err(format!("expected a finite number, got `{raw}`")),
        },
        Value::Array(items) => {
            let elem = items.first().cloned().unwrap_or(Value::String(String::new()));
            if raw.is_empty() {
                return Ok(Value::Array(Vec::new()));
            }
            raw.split(',').map(|part| parse_value(part, &elem)).collect::<Result<_, _>>().map(Value::Array)
        }
        _ => Ok(Value::String(raw.trim_matches('"').to_string())),
    }
}

impl RunConfig {
    fn entries(&self) -> Vec<(String, Value)> {
        let mut out = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Parses overrides on top of the defaults. `origin` names the source
    /// in diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<RunConfig, CliError> {
        let defaults = RunConfig::default().entries();
        let mut values = defaults.clone();
        let mut seen: Vec<(String, usize)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let n = n + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| CliError::Config(format!("{origin}:{n}: {msg}"));
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `section.key = value`, got `{line}`")))?;
            let key = key.trim();
            let Some(slot) = values.iter_mut().find(|(k, _)| k == key) else {
                return Err(err(format!("unknown key `{key}`")));
            };
            if let Some((_, first)) = seen.iter().find(|(k, _)| k == key) {
                return Err(err(format!("`{key}` already set on line {first}")));
            }
            seen.push((key.to_string(), n));
            slot.1 = parse_value(raw, &slot.1).map_err(|m| err(format!("{key}: {m}")))?;
        }
        let mut root = Map::new();
        for (k, v) in values {
            insert(&mut root, &k, v);
        }
        let cfg: RunConfig = serde_json::from_value(Value::Object(root))
            .map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
        cfg.validate()
            .map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> modalfuse::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        self.eval.validate()?;
        self.ablation.validate()?;
        let g = &self.data.geometry;
        if g.patches_per_image() != self.model.patches_per_image || g.patch_dim() != self.model.patch_dim {
            return Err(modalfuse::Error::Config(format!(
                "data geometry gives {} patches of {} values, model expects {} of {}",
                g.patches_per_image(),
                g.patch_dim(),
                self.model.patches_per_image,
                self.model.patch_dim
            )));
        }
        Ok(())
    }

    /// Every key, one per line, in declaration order.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s += &format!("{k} = {}\n", render_value(&v));
        }
        s
    }

    /// The same config without its output location, as stored in
    /// checkpoints so that identical runs give identical bytes anywhere.
    pub fn portable(&self) -> RunConfig {
        let mut c = self.clone();
        c.run.out_dir = PathBuf::new();
        c
    }

    /// Hash of everything that affects results; the `run.*` keys are
    /// bookkeeping and left out.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !k.starts_with("run.") {
                h.update(format!("{k}={}\n", render_value(&v)));
            }
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
