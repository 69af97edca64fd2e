//! Run configuration: a JSON file plus `section.key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fairmap_core::data::{generate_lipton, load_csv, AttributeSpec, Dataset, Role};
use fairmap_core::eval::{EvalConfig, SweepConfig};
use fairmap_core::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Generator {
    Lipton { n: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// CSV file; exclusive with `generator`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<Generator>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub schema: Vec<AttributeSpec>,
    /// Overrides the sensitive roles of `schema`. Several names are merged
    /// into one attribute.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sensitive: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    /// `train.seed` is the root seed of the whole run.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("run")
}

/// Sets `path` (dot separated) in `root`, creating objects on the way.
/// The value is parsed as JSON, falling back to a plain string.
fn set_path(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("malformed override key `{path}`");
    }
    for key in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .with_context(|| format!("override `{path}`: `{key}` is not a section"))?;
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .with_context(|| format!("override `{path}` does not point into an object"))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Reads `path` (or starts from an empty object) and applies the
    /// `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut root: Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("override `{o}` is not key=value"))?;
            set_path(&mut root, k.trim(), v.trim())?;
        }
        if let Some(s) = seed {
            set_path(&mut root, "train.seed", &s.to_string())?;
        }
        let cfg: RunConfig = serde_json::from_value(root).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.path, &self.dataset.generator) {
            (Some(_), Some(_)) => bail!("dataset: give either `path` or `generator`, not both"),
            (None, None) => bail!("dataset: one of `path` or `generator` is required"),
            (Some(_), None) if self.dataset.schema.is_empty() => {
                bail!("dataset: a CSV `path` needs a `schema`")
            }
            _ => {}
        }
        self.sweep.validate()?;
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Schema with the `sensitive`/`decision` overrides applied.
    fn schema(&self) -> Result<Vec<AttributeSpec>> {
        let mut schema = self.dataset.schema.clone();
        let has = |schema: &[AttributeSpec], n: &str| schema.iter().any(|a| a.name == n);
        if !self.dataset.sensitive.is_empty() {
            for n in &self.dataset.sensitive {
                if !has(&schema, n) {
                    bail!("dataset.sensitive names unknown column `{n}`");
                }
            }
            for a in schema.iter_mut() {
                if self.dataset.sensitive.contains(&a.name) {
                    a.role = Role::Sensitive;
                } else if a.role == Role::Sensitive {
                    a.role = Role::Other;
                }
            }
        }
        if let Some(d) = &self.dataset.decision {
            if !has(&schema, d) {
                bail!("dataset.decision names unknown column `{d}`");
            }
            for a in schema.iter_mut() {
                if &a.name == d {
                    a.role = Role::Decision;
                } else if a.role == Role::Decision {
                    a.role = Role::Other;
                }
            }
        }
        Ok(schema)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match (&self.dataset.path, &self.dataset.generator) {
            (Some(path), _) => {
                let schema = self.schema()?;
                load_csv(path, &schema).with_context(|| format!("{}", path.display()))
            }
            (None, Some(Generator::Lipton { n })) => Ok(generate_lipton(
                *n,
                fairmap_core::rng::derive_seed(self.seed(), "dataset"),
            )?),
            (None, None) => bail!("no dataset configured"),
        }
    }
}
