//! Effective configuration for every subcommand.
//!
//! Precedence, lowest first: built-in defaults, the `--config` TOML file,
//! dedicated flags (`--seed`, `--subjects`, ...), then `--set key=value`
//! overrides. The merged result is written to `{out}/config.toml` and can be
//! passed back through `--config` to reproduce a run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use refcat::charis::{Backends, Scorer, SubprocessBackend};
use refcat::dit::ModelConfig;
use refcat::synthdata::{Context, CorpusConfig, Pose};
use refcat::train::{EvalConfig, TrainConfig};
use refcat::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sample: SampleConfig,
    pub gradcheck: GradcheckConfig,
    pub backends: BackendsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub pose: Pose,
    pub context: Context,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            pose: Pose::Run,
            context: Context::Plain,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            model: ModelConfig::gradcheck(),
            seed: 0,
        }
    }
}

/// Scorers not listed in `commands` use the deterministic metadata stub.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendsConfig {
    /// Scorer name (`vlm_id`, `clip`, ...) to program and arguments.
    pub commands: BTreeMap<String, Vec<String>>,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        BackendsConfig {
            commands: BTreeMap::new(),
            max_in_flight: 4,
            timeout_secs: 60,
        }
    }
}

impl BackendsConfig {
    pub fn build(&self) -> Result<Backends> {
        let mut backends = Backends::stub();
        for (name, argv) in &self.commands {
            let scorer: Scorer = name.parse()?;
            let (program, args) = argv
                .split_first()
                .ok_or_else(|| Error::Config(format!("backends.commands.{name} is empty")))?;
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            let client = SubprocessBackend::spawn(
                program,
                &args,
                self.max_in_flight,
                Duration::from_secs(self.timeout_secs),
            )?;
            backends.register(scorer, Arc::new(client));
        }
        Ok(backends)
    }
}

impl RunConfig {
    /// Defaults merged with an optional TOML file.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key=value` overrides; `key` is a dotted path that must
    /// already exist in the effective config.
    pub fn apply_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut tree = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for raw in overrides {
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{raw}` is not key=value")))?;
            set_path(&mut tree, key.trim(), parse_value(value.trim()))?;
        }
        tree.try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Seeds every stage that draws random numbers.
    pub fn set_seed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.train.seed = seed;
        self.eval.sampler.seed = seed;
        self.gradcheck.seed = seed;
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }
}

/// TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Probe {
        v: toml::Value,
    }
    match toml::from_str::<Probe>(&format!("v = {raw}")) {
        Ok(p) => p.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(tree: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut node = tree;
    for (depth, part) in parents.iter().enumerate() {
        node = node
            .as_table_mut()
            .and_then(|t| t.get_mut(*part))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown config key `{}`",
                    parts[..=depth].join(".")
                ))
            })?;
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{key}` does not name a config field")))?;
    // Maps such as `backends.commands` accept new keys; structs do not.
    let open = parents.last().is_some_and(|p| *p == "commands");
    if !open && !table.contains_key(*last) {
        return Err(Error::Config(format!("unknown config key `{key}`")));
    }
    table.insert(last.to_string(), value);
    Ok(())
}
