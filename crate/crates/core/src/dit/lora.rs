use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{ModelParams, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Which weight matrices receive low-rank adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LoraPolicy {
    /// Attention projections `W_q, W_k, W_v, W_o`.
    A,
    /// Attention plus both FFN matrices.
    B,
    /// Attention, FFN and the timestep modulation projection.
    C,
}

impl LoraPolicy {
    pub const ALL: [LoraPolicy; 3] = [LoraPolicy::A, LoraPolicy::B, LoraPolicy::C];

    fn layer_matrices(self) -> &'static [&'static str] {
        match self {
            LoraPolicy::A => &["wq", "wk", "wv", "wo"],
            LoraPolicy::B => &["wq", "wk", "wv", "wo", "ffn1.weight", "ffn2.weight"],
            LoraPolicy::C => &[
                "wq",
                "wk",
                "wv",
                "wo",
                "ffn1.weight",
                "ffn2.weight",
                "mod.weight",
            ],
        }
    }
}

impl fmt::Display for LoraPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LoraPolicy::A => "A",
            LoraPolicy::B => "B",
            LoraPolicy::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for LoraPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" | "attention" => Ok(LoraPolicy::A),
            "B" | "b" | "attention+ffn" => Ok(LoraPolicy::B),
            "C" | "c" | "attention+ffn+modulation" => Ok(LoraPolicy::C),
            other => Err(Error::Config(format!("unknown LoRA policy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    /// Adapter output is multiplied by `alpha / rank`.
    pub alpha: f64,
    pub policy: LoraPolicy,
    pub include_embedder: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            alpha: 16.0,
            policy: LoraPolicy::B,
            include_embedder: true,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora.rank must be at least 1".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("lora.alpha must be finite".into()));
        }
        Ok(())
    }

    pub fn multiplier(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Names of the base matrices this policy adapts, in a fixed order.
    pub fn target_names(&self, layers: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.include_embedder {
            out.push("embed.weight".to_string());
        }
        for n in 0..layers {
            for m in self.policy.layer_matrices() {
                out.push(format!("layer.{n}.{m}"));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LoraTarget {
    pub base: usize,
    pub down: usize,
    pub up: usize,
}

/// Adapter factors for every targeted matrix: `W + (α/r)·D·U` with
/// `D: d_in × r` and `U: r × d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapters {
    config: LoraConfig,
    set: ParamSet,
    targets: Vec<LoraTarget>,
    by_base: HashMap<usize, usize>,
}

impl LoraAdapters {
    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn set(&self) -> &ParamSet {
        &self.set
    }

    pub fn set_mut(&mut self) -> &mut ParamSet {
        &mut self.set
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Names of the adapted base matrices.
    pub fn target_names<'a>(
        &'a self,
        params: &'a ModelParams,
    ) -> impl Iterator<Item = &'a str> + 'a {
        self.targets.iter().map(move |t| params.set().name(t.base))
    }

    pub(crate) fn for_base(&self, base: usize) -> Option<&LoraTarget> {
        self.by_base.get(&base).map(|&i| &self.targets[i])
    }

    pub fn trainable_params(&self) -> usize {
        self.set.numel()
    }

    /// Rebuilds adapters from a named set (`lora.<target>.down|up`).
    pub fn from_set(params: &ModelParams, config: LoraConfig, set: ParamSet) -> Result<Self> {
        config.validate()?;
        let names = config.target_names(params.config().layers);
        let mut targets = Vec::with_capacity(names.len());
        for name in names {
            let base = params
                .set()
                .index_of(&name)
                .ok_or_else(|| Error::Config(format!("LoRA target `{name}` missing")))?;
            let down = set
                .index_of(&format!("lora.{name}.down"))
                .ok_or_else(|| Error::Config(format!("adapter for `{name}` missing")))?;
            let up = set
                .index_of(&format!("lora.{name}.up"))
                .ok_or_else(|| Error::Config(format!("adapter for `{name}` missing")))?;
            let (din, dout) = params.set().get(base).shape();
            if set.get(down).shape() != (din, config.rank)
                || set.get(up).shape() != (config.rank, dout)
            {
                return Err(Error::Dimension(format!(
                    "adapter for `{name}` has wrong shape"
                )));
            }
            targets.push(LoraTarget { base, down, up });
        }
        if set.len() != 2 * targets.len() {
            return Err(Error::Config("unexpected extra adapter tensors".into()));
        }
        let by_base = targets
            .iter()
            .enumerate()
            .map(|(i, t)| (t.base, i))
            .collect();
        Ok(LoraAdapters {
            config,
            set,
            targets,
            by_base,
        })
    }
}

/// Creates adapters for the matrices selected by `config.policy`; down
/// factors are Gaussian, up factors zero, so the adapted model starts equal
/// to the base.
pub fn apply_lora(params: &ModelParams, config: &LoraConfig, seed: u64) -> Result<LoraAdapters> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    for name in config.target_names(params.config().layers) {
        let base = params
            .set()
            .index_of(&name)
            .ok_or_else(|| Error::Config(format!("LoRA target `{name}` missing")))?;
        let (din, dout) = params.set().get(base).shape();
        let normal = Normal::new(0.0, 1.0 / (din as f64).sqrt()).expect("valid std");
        set.push(
            format!("lora.{name}.down"),
            Matrix::from_fn(din, config.rank, |_, _| normal.sample(&mut rng)),
        );
        set.push(format!("lora.{name}.up"), Matrix::zeros(config.rank, dout));
    }
    LoraAdapters::from_set(params, config.clone(), set)
}
