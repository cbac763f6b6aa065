use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::rope::check_head_dim;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Shape of the toy transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channels per latent cell.
    pub latent_dim: usize,
    /// Side of the square patch mapping latent cells to one token.
    pub patch: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    /// Number of condition tokens `M`.
    pub text_tokens: usize,
    pub vocab: usize,
    /// Latent cells per half, used for validation and bookkeeping.
    pub grid_height: usize,
    pub grid_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 4,
            patch: 2,
            model_dim: 64,
            heads: 4,
            layers: 4,
            ffn_mult: 4,
            text_tokens: 8,
            vocab: 16,
            grid_height: 16,
            grid_width: 16,
        }
    }
}

impl ModelConfig {
    /// Two layers, `d = 16`, 4×4 tokens per half: the gradient-check model.
    pub fn gradcheck() -> Self {
        ModelConfig {
            latent_dim: 4,
            patch: 2,
            model_dim: 16,
            heads: 2,
            layers: 2,
            ffn_mult: 2,
            text_tokens: 4,
            vocab: 16,
            grid_height: 8,
            grid_width: 8,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads.max(1)
    }

    pub fn patch_features(&self) -> usize {
        self.patch * self.patch * self.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("patch", self.patch),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn_mult", self.ffn_mult),
            ("text_tokens", self.text_tokens),
            ("vocab", self.vocab),
            ("grid_height", self.grid_height),
            ("grid_width", self.grid_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::Config("model_dim must be even".into()));
        }
        check_head_dim(self.head_dim())?;
        if self.grid_height % self.patch != 0 || self.grid_width % self.patch != 0 {
            return Err(Error::Config(format!(
                "grid {}x{} not divisible by patch {}",
                self.grid_height, self.grid_width, self.patch
            )));
        }
        Ok(())
    }
}

/// Named, ordered collection of parameter matrices.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, i: usize) -> &Matrix {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.iter() {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for x in m.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.values
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayerLayout {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn1_w: usize,
    pub ffn1_b: usize,
    pub ffn2_w: usize,
    pub ffn2_b: usize,
    pub mod_w: usize,
    pub mod_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub embed_w: usize,
    pub embed_b: usize,
    pub text_table: usize,
    pub layers: Vec<LayerLayout>,
    pub head_w: usize,
    pub head_b: usize,
}

/// Base-model initialisation scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Modulation and output head start at zero, so every block begins as a
    /// plain pre-norm residual block and the model predicts zero velocity.
    Standard,
    /// Every matrix random; used for gradient checks where zero-initialised
    /// paths would hide errors.
    Dense,
}

/// Base transformer weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    set: ParamSet,
    pub(crate) layout: Layout,
}

fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = cfg.model_dim;
    let f = cfg.ffn_mult * d;
    let mut v = vec![
        ("embed.weight".to_string(), cfg.patch_features(), d),
        ("embed.bias".to_string(), 1, d),
        ("text.table".to_string(), cfg.vocab, d),
    ];
    for n in 0..cfg.layers {
        let p = |s: &str| format!("layer.{n}.{s}");
        v.extend([
            (p("wq"), d, d),
            (p("wk"), d, d),
            (p("wv"), d, d),
            (p("wo"), d, d),
            (p("ffn1.weight"), d, f),
            (p("ffn1.bias"), 1, f),
            (p("ffn2.weight"), f, d),
            (p("ffn2.bias"), 1, d),
            (p("mod.weight"), d, 6 * d),
            (p("mod.bias"), 1, 6 * d),
        ]);
    }
    v.push(("head.weight".to_string(), d, cfg.patch_features()));
    v.push(("head.bias".to_string(), 1, cfg.patch_features()));
    v
}

fn build_layout(cfg: &ModelConfig, set: &ParamSet) -> Result<Layout> {
    let find = |name: String| {
        set.index_of(&name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    };
    let layers = (0..cfg.layers)
        .map(|n| {
            let p = |s: &str| format!("layer.{n}.{s}");
            Ok(LayerLayout {
                wq: find(p("wq"))?,
                wk: find(p("wk"))?,
                wv: find(p("wv"))?,
                wo: find(p("wo"))?,
                ffn1_w: find(p("ffn1.weight"))?,
                ffn1_b: find(p("ffn1.bias"))?,
                ffn2_w: find(p("ffn2.weight"))?,
                ffn2_b: find(p("ffn2.bias"))?,
                mod_w: find(p("mod.weight"))?,
                mod_b: find(p("mod.bias"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Layout {
        embed_w: find("embed.weight".into())?,
        embed_b: find("embed.bias".into())?,
        text_table: find("text.table".into())?,
        layers,
        head_w: find("head.weight".into())?,
        head_b: find("head.bias".into())?,
    })
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64, init: Init) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        for (name, rows, cols) in expected_shapes(config) {
            let zero_in_standard = name.starts_with("head.") || name.contains(".mod.");
            let std = if name.ends_with("bias") {
                if init == Init::Dense {
                    0.1
                } else {
                    0.0
                }
            } else if name == "text.table" {
                1.0
            } else if zero_in_standard && init == Init::Standard {
                0.0
            } else if zero_in_standard {
                0.2 / (rows as f64).sqrt()
            } else {
                1.0 / (rows as f64).sqrt()
            };
            let m = if std == 0.0 {
                Matrix::zeros(rows, cols)
            } else {
                let normal = Normal::new(0.0, std).expect("valid std");
                Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
            };
            set.push(name, m);
        }
        let layout = build_layout(config, &set)?;
        Ok(ModelParams {
            config: config.clone(),
            set,
            layout,
        })
    }

    /// Reassembles parameters from a named set, checking every shape.
    pub fn from_set(config: ModelConfig, set: ParamSet) -> Result<Self> {
        config.validate()?;
        let shapes = expected_shapes(&config);
        if shapes.len() != set.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                shapes.len(),
                set.len()
            )));
        }
        for (name, rows, cols) in &shapes {
            let i = set
                .index_of(name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
            if set.get(i).shape() != (*rows, *cols) {
                return Err(Error::Dimension(format!(
                    "`{name}` is {:?}, expected {:?}",
                    set.get(i).shape(),
                    (rows, cols)
                )));
            }
            if !set.get(i).is_finite() {
                return Err(Error::Numeric(format!("`{name}` has non-finite entries")));
            }
        }
        let layout = build_layout(&config, &set)?;
        Ok(ModelParams {
            config,
            set,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set(&self) -> &ParamSet {
        &self.set
    }

    pub fn set_mut(&mut self) -> &mut ParamSet {
        &mut self.set
    }

    pub(crate) fn m(&self, i: usize) -> &Matrix {
        self.set.get(i)
    }
}
