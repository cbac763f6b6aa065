//! Miniature diffusion transformer: patch embedding, axial 2D RoPE,
//! joint image+text attention, FFN and timestep modulation, with optional
//! low-rank adapters.

mod checkpoint;
pub(crate) mod graph;
mod lora;
mod params;
mod rope;

use std::sync::Arc;

pub use checkpoint::Checkpoint;
pub use graph::Trainable;
pub use lora::{apply_lora, LoraAdapters, LoraConfig, LoraPolicy};
pub use params::{Init, ModelConfig, ModelParams, ParamSet};
pub use rope::{rope_apply, ROPE_BASE};

use graph::{Graph, NodeId, ParamSlot};
use rope::RopeTable;

use crate::error::{Error, Result};
use crate::latents::LatentGrid;
use crate::tensor::Matrix;

/// Condition tokens: either vocabulary ids looked up in the learned table,
/// or an explicit `M × d` embedding.
#[derive(Clone, Debug, PartialEq)]
pub enum TextCondition {
    Tokens(Vec<usize>),
    Embedding(Matrix),
}

/// Joint sequence of image tokens followed by `M` text tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Matrix,
    pub positions: Vec<(usize, usize)>,
    pub text_count: usize,
}

impl TokenSequence {
    /// Image tokens in row-major grid order get their `(i, j)`; every text
    /// token sits at `(0, 0)`.
    pub fn new(image: &Matrix, grid: (usize, usize), text: &Matrix) -> Result<Self> {
        if image.rows() != grid.0 * grid.1 {
            return Err(Error::Dimension(format!(
                "{} image tokens for a {}x{} grid",
                image.rows(),
                grid.0,
                grid.1
            )));
        }
        if image.cols() != text.cols() {
            return Err(Error::Dimension(format!(
                "image tokens have dim {}, text tokens {}",
                image.cols(),
                text.cols()
            )));
        }
        let mut data = image.data().to_vec();
        data.extend_from_slice(text.data());
        let tokens = Matrix::from_vec(image.rows() + text.rows(), image.cols(), data)?;
        Ok(TokenSequence {
            tokens,
            positions: token_positions(grid, text.rows()),
            text_count: text.rows(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

fn token_positions(grid: (usize, usize), text: usize) -> Vec<(usize, usize)> {
    let mut pos: Vec<(usize, usize)> = (0..grid.0 * grid.1)
        .map(|k| (k / grid.1, k % grid.1))
        .collect();
    pos.extend(std::iter::repeat((0, 0)).take(text));
    pos
}

/// Sinusoidal embedding of `t ∈ [0, 1]` (scaled by 1000) into `dim` features.
pub fn timestep_embedding(t: f64, dim: usize) -> Matrix {
    let half = dim / 2;
    let mut out = Matrix::zeros(1, dim);
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out.set(0, k, arg.cos());
        out.set(0, half + k, arg.sin());
    }
    out
}

/// Flattens an `H × W × c` grid into `(H/p)(W/p)` tokens of `p·p·c`
/// features ordered `(di, dj, c)`.
pub fn patchify(grid: &LatentGrid, patch: usize) -> Result<Matrix> {
    let (h, w, c) = grid.shape();
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Dimension(format!(
            "grid {h}x{w} not divisible by patch {patch}"
        )));
    }
    let (th, tw) = (h / patch, w / patch);
    let f = patch * patch * c;
    let mut m = Matrix::zeros(th * tw, f);
    for ti in 0..th {
        for tj in 0..tw {
            let row = m.row_mut(ti * tw + tj);
            for di in 0..patch {
                for dj in 0..patch {
                    let off = (di * patch + dj) * c;
                    row[off..off + c].copy_from_slice(grid.cell(ti * patch + di, tj * patch + dj));
                }
            }
        }
    }
    Ok(m)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    tokens: &Matrix,
    height: usize,
    width: usize,
    dim: usize,
    patch: usize,
) -> Result<LatentGrid> {
    let (th, tw) = (height / patch, width / patch);
    if tokens.rows() != th * tw || tokens.cols() != patch * patch * dim {
        return Err(Error::Dimension(format!(
            "{}x{} tokens do not tile a {height}x{width}x{dim} grid",
            tokens.rows(),
            tokens.cols()
        )));
    }
    let mut g = LatentGrid::zeros(height, width, dim);
    for ti in 0..th {
        for tj in 0..tw {
            let row = tokens.row(ti * tw + tj);
            for di in 0..patch {
                for dj in 0..patch {
                    let off = (di * patch + dj) * dim;
                    for ch in 0..dim {
                        g.set(ti * patch + di, tj * patch + dj, ch, row[off + ch]);
                    }
                }
            }
        }
    }
    Ok(g)
}

/// Per-layer modulation values: each sublayer input becomes
/// `LN(x) ⊙ scale + shift` and its output is multiplied by `gate` before
/// the residual add.
#[derive(Clone, Debug, PartialEq)]
pub struct Modulation {
    pub attn_shift: Vec<f64>,
    pub attn_scale: Vec<f64>,
    pub attn_gate: Vec<f64>,
    pub ffn_shift: Vec<f64>,
    pub ffn_scale: Vec<f64>,
    pub ffn_gate: Vec<f64>,
}

impl Modulation {
    /// `tokens ⊙ scale + shift` for the attention (`ffn = false`) or FFN input.
    pub fn apply_pre(&self, tokens: &Matrix, ffn: bool) -> Matrix {
        let (shift, scale) = if ffn {
            (&self.ffn_shift, &self.ffn_scale)
        } else {
            (&self.attn_shift, &self.attn_scale)
        };
        Matrix::from_fn(tokens.rows(), tokens.cols(), |r, c| {
            tokens.get(r, c) * scale[c] + shift[c]
        })
    }
}

/// Computes layer `layer`'s modulation for timestep `t`.
pub fn modulate(
    t: f64,
    layer: usize,
    params: &ModelParams,
    lora: Option<&LoraAdapters>,
) -> Result<Modulation> {
    check_t(t)?;
    let dit = Dit::new(params, lora)?;
    let lay = params
        .layout
        .layers
        .get(layer)
        .ok_or_else(|| Error::Argument(format!("layer {layer} out of range")))?;
    let d = params.config().model_dim;
    let mut g = Graph::new(Trainable::Nothing);
    let temb = g.input(timestep_embedding(t, d));
    let m = dit.linear(&mut g, temb, lay.mod_w, Some(lay.mod_b));
    let v = g.value(m).data();
    let part = |k: usize| v[k * d..(k + 1) * d].to_vec();
    let one_plus = |k: usize| part(k).into_iter().map(|x| 1.0 + x).collect();
    Ok(Modulation {
        attn_shift: part(0),
        attn_scale: one_plus(1),
        attn_gate: one_plus(2),
        ffn_shift: part(3),
        ffn_scale: one_plus(4),
        ffn_gate: one_plus(5),
    })
}

/// Output of a bare multimodal-attention sublayer.
#[derive(Clone, Debug)]
pub struct MmaOutput {
    pub sequence: TokenSequence,
    /// One `N × N` row-stochastic matrix per head.
    pub probs: Vec<Matrix>,
}

/// Layer `layer`'s attention sublayer alone: `softmax(QKᵀ/√d_h)V·W_o` with
/// rotary Q/K, no normalisation or modulation.
pub fn mma(
    seq: &TokenSequence,
    layer: usize,
    params: &ModelParams,
    lora: Option<&LoraAdapters>,
) -> Result<MmaOutput> {
    let dit = Dit::new(params, lora)?;
    let cfg = params.config();
    if seq.tokens.cols() != cfg.model_dim || seq.positions.len() != seq.len() {
        return Err(Error::Dimension(
            "token sequence does not match model".into(),
        ));
    }
    let lay = params
        .layout
        .layers
        .get(layer)
        .ok_or_else(|| Error::Argument(format!("layer {layer} out of range")))?;
    let rope = Arc::new(RopeTable::new(cfg.head_dim(), &seq.positions)?);
    let mut g = Graph::new(Trainable::Nothing);
    let x = g.input_ref(&seq.tokens);
    let q = dit.linear(&mut g, x, lay.wq, None);
    let k = dit.linear(&mut g, x, lay.wk, None);
    let v = dit.linear(&mut g, x, lay.wv, None);
    let a = g.attention(q, k, v, cfg.heads, rope);
    let o = dit.linear(&mut g, a, lay.wo, None);
    Ok(MmaOutput {
        sequence: TokenSequence {
            tokens: g.value(o).clone(),
            positions: seq.positions.clone(),
            text_count: seq.text_count,
        },
        probs: g.attention_probs(a).expect("attention node").to_vec(),
    })
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Argument(format!("t must lie in [0, 1], got {t}")));
    }
    Ok(())
}

/// A base model with optional adapters; the velocity field `v_θ(z_t; t; c)`.
#[derive(Clone, Copy, Debug)]
pub struct Dit<'a> {
    params: &'a ModelParams,
    lora: Option<&'a LoraAdapters>,
}

/// Gradients for the trainable parameter store, aligned with its [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    pub trainable: Trainable,
    pub grads: Vec<Matrix>,
}

impl GradSet {
    pub fn zeros_for(
        trainable: Trainable,
        params: &ModelParams,
        lora: Option<&LoraAdapters>,
    ) -> Self {
        let grads = match trainable {
            Trainable::Nothing => Vec::new(),
            Trainable::Base => params.set().zeros_like(),
            Trainable::Lora => lora.map(|l| l.set().zeros_like()).unwrap_or_default(),
        };
        GradSet { trainable, grads }
    }

    pub fn add_assign(&mut self, other: &GradSet) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.iter_mut().for_each(|g| g.scale_assign(s));
    }
}

pub(crate) struct ForwardTrace<'g> {
    graph: Graph<'g>,
    output: NodeId,
    shape: (usize, usize, usize),
    patch: usize,
}

impl<'g> ForwardTrace<'g> {
    pub fn velocity(&self) -> Result<LatentGrid> {
        let (h, w, c) = self.shape;
        unpatchify(self.graph.value(self.output), h, w, c, self.patch())
    }

    fn patch(&self) -> usize {
        self.patch
    }

    /// Back-propagates `∂L/∂v` (a grid shaped like the input latent).
    pub fn backward(
        &self,
        dv: &LatentGrid,
        params: &ModelParams,
        lora: Option<&LoraAdapters>,
    ) -> Result<GradSet> {
        let seed = patchify(dv, self.patch())?;
        let leaves = self.graph.backward(self.output, seed);
        let trainable = self.graph.trainable();
        let mut out = GradSet::zeros_for(trainable, params, lora);
        for (slot, g) in leaves {
            match (trainable, slot) {
                (Trainable::Base, ParamSlot::Base(i)) | (Trainable::Lora, ParamSlot::Lora(i)) => {
                    out.grads[i] = g
                }
                _ => {}
            }
        }
        Ok(out)
    }
}

impl<'a> Dit<'a> {
    pub fn new(params: &'a ModelParams, lora: Option<&'a LoraAdapters>) -> Result<Self> {
        if let Some(l) = lora {
            let expected = l.config().target_names(params.config().layers);
            let actual: Vec<&str> = l.target_names(params).collect();
            if expected != actual {
                return Err(Error::Config(
                    "adapters were built for a different model".into(),
                ));
            }
        }
        Ok(Dit { params, lora })
    }

    pub fn params(&self) -> &'a ModelParams {
        self.params
    }

    pub fn lora(&self) -> Option<&'a LoraAdapters> {
        self.lora
    }

    /// `x·W (+ α/r · x·D·U) (+ b)`.
    fn linear<'g>(&self, g: &mut Graph<'g>, x: NodeId, w: usize, b: Option<usize>) -> NodeId
    where
        'a: 'g,
    {
        let wn = g.param(ParamSlot::Base(w), self.params.m(w));
        let mut y = g.matmul(x, wn);
        if let Some(t) = self.lora.and_then(|l| l.for_base(w)) {
            let lora = self.lora.expect("checked above");
            let dn = g.param(ParamSlot::Lora(t.down), lora.set().get(t.down));
            let un = g.param(ParamSlot::Lora(t.up), lora.set().get(t.up));
            let xd = g.matmul(x, dn);
            let xdu = g.matmul(xd, un);
            let delta = g.scale(xdu, lora.config().multiplier());
            y = g.add(y, delta);
        }
        if let Some(b) = b {
            let bn = g.param(ParamSlot::Base(b), self.params.m(b));
            y = g.add_row(y, bn);
        }
        y
    }

    pub(crate) fn trace<'g>(
        &self,
        z_t: &LatentGrid,
        text: &'g TextCondition,
        t: f64,
        trainable: Trainable,
    ) -> Result<ForwardTrace<'g>>
    where
        'a: 'g,
    {
        check_t(t)?;
        let cfg = self.params.config();
        let (h, w, c) = z_t.shape();
        if c != cfg.latent_dim {
            return Err(Error::Dimension(format!(
                "latent has {c} channels, model expects {}",
                cfg.latent_dim
            )));
        }
        if h == 0 || w == 0 || h % cfg.patch != 0 || w % cfg.patch != 0 {
            return Err(Error::Dimension(format!(
                "latent {h}x{w} not tileable by patch {}",
                cfg.patch
            )));
        }
        let lay = &self.params.layout;
        let d = cfg.model_dim;
        let grid = (h / cfg.patch, w / cfg.patch);
        let n_img = grid.0 * grid.1;

        let mut g = Graph::new(trainable);
        let patches = g.input(patchify(z_t, cfg.patch)?);
        let x_img = self.linear(&mut g, patches, lay.embed_w, Some(lay.embed_b));
        let text_node = match text {
            TextCondition::Tokens(ids) => {
                if let Some(bad) = ids.iter().find(|&&i| i >= cfg.vocab) {
                    return Err(Error::Argument(format!(
                        "text token id {bad} outside vocabulary"
                    )));
                }
                let table = g.param(
                    ParamSlot::Base(lay.text_table),
                    self.params.m(lay.text_table),
                );
                g.gather(table, ids.clone())
            }
            TextCondition::Embedding(m) => {
                if m.cols() != d {
                    return Err(Error::Dimension(format!(
                        "text embedding has dim {}, model expects {d}",
                        m.cols()
                    )));
                }
                g.input_ref(m)
            }
        };
        let m_text = g.value(text_node).rows();
        let mut x = g.concat_rows(x_img, text_node);
        let rope = Arc::new(RopeTable::new(
            cfg.head_dim(),
            &token_positions(grid, m_text),
        )?);
        let temb = g.input(timestep_embedding(t, d));

        for (n, l) in lay.layers.iter().enumerate() {
            let m = self.linear(&mut g, temb, l.mod_w, Some(l.mod_b));
            let part: Vec<NodeId> = (0..6).map(|k| g.slice_cols(m, k * d, d)).collect();

            let normed = g.layer_norm(x);
            let hin = g.modulate(normed, part[0], part[1]);
            let q = self.linear(&mut g, hin, l.wq, None);
            let k = self.linear(&mut g, hin, l.wk, None);
            let v = self.linear(&mut g, hin, l.wv, None);
            let a = g.attention(q, k, v, cfg.heads, rope.clone());
            let o = self.linear(&mut g, a, l.wo, None);
            x = g.gated_add(x, o, part[2]);

            let normed = g.layer_norm(x);
            let fin = g.modulate(normed, part[3], part[4]);
            let f1 = self.linear(&mut g, fin, l.ffn1_w, Some(l.ffn1_b));
            let act = g.gelu(f1);
            let f2 = self.linear(&mut g, act, l.ffn2_w, Some(l.ffn2_b));
            x = g.gated_add(x, f2, part[5]);

            if !g.value(x).is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite activations after layer {n}"
                )));
            }
        }
        let img = g.slice_rows(x, 0, n_img);
        let normed = g.layer_norm(img);
        let out = self.linear(&mut g, normed, lay.head_w, Some(lay.head_b));
        if !g.value(out).is_finite() {
            return Err(Error::Numeric(
                "non-finite activations in output head".into(),
            ));
        }
        Ok(ForwardTrace {
            graph: g,
            output: out,
            shape: (h, w, c),
            patch: cfg.patch,
        })
    }

    /// Predicted velocity, shaped like `z_t`.
    pub fn forward(&self, z_t: &LatentGrid, text: &TextCondition, t: f64) -> Result<LatentGrid> {
        self.trace(z_t, text, t, Trainable::Nothing)?.velocity()
    }
}

/// Predicted velocity for `z_t` under `params` and optional adapters.
pub fn forward(
    z_t: &LatentGrid,
    text: &TextCondition,
    t: f64,
    params: &ModelParams,
    lora: Option<&LoraAdapters>,
) -> Result<LatentGrid> {
    Dit::new(params, lora)?.forward(z_t, text, t)
}
