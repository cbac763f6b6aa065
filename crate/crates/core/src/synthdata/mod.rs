//! Procedural subjects, sprite rendering, character sheets and filtered
//! reference/target corpora.
//!
//! Sprites are drawn on a 16×16 grid of square cells, so every ground-truth
//! region is a union of whole latent cells.

mod corpus;
mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use corpus::{
    build_corpus, encode_pairs, load_images, load_manifest, read_subject, rescore, write_corpus,
    Corpus, CorpusConfig, FilterConfig, PairRecord, PairScores, CANDIDATES_FILE, MANIFEST_FILE,
};
pub use render::{
    decode_latent, encode_latent, gen_sheet, render, LayoutRegion, RegionalLayout, Rendered, CELLS,
    IMAGE_SIZE, LATENT_CHANNELS,
};

use crate::charis::{quantized_code, rgb_to_hsv};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pose {
    Stand,
    Sit,
    Run,
    Wave,
}

impl Pose {
    pub const ALL: [Pose; 4] = [Pose::Stand, Pose::Sit, Pose::Run, Pose::Wave];

    pub fn name(self) -> &'static str {
        match self {
            Pose::Stand => "stand",
            Pose::Sit => "sit",
            Pose::Run => "run",
            Pose::Wave => "wave",
        }
    }
}

impl std::str::FromStr for Pose {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pose::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown pose `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Context {
    Plain,
    Gradient,
    Patterned,
}

impl Context {
    pub const ALL: [Context; 3] = [Context::Plain, Context::Gradient, Context::Patterned];

    pub fn name(self) -> &'static str {
        match self {
            Context::Plain => "plain",
            Context::Gradient => "gradient",
            Context::Patterned => "patterned",
        }
    }
}

impl std::str::FromStr for Context {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Context::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown context `{s}`")))
    }
}

/// Prompt vocabulary: padding, start, four poses, three contexts.
pub const TOKEN_PAD: usize = 0;
pub const TOKEN_BOS: usize = 1;
pub const VOCAB_SIZE: usize = 9;

pub fn pose_token(p: Pose) -> usize {
    2 + p as usize
}

pub fn context_token(c: Context) -> usize {
    6 + c as usize
}

/// `[BOS, pose, context, PAD, …]` of length `len` (at least 3).
pub fn prompt_tokens(pose: Pose, context: Context, len: usize) -> Result<Vec<usize>> {
    if len < 3 {
        return Err(Error::Config(format!(
            "prompts need at least 3 tokens, got {len}"
        )));
    }
    let mut t = vec![TOKEN_PAD; len];
    t[0] = TOKEN_BOS;
    t[1] = pose_token(pose);
    t[2] = context_token(context);
    Ok(t)
}

pub fn prompt_text(pose: Pose, context: Context) -> String {
    format!(
        "the character, {} pose, {} background",
        pose.name(),
        context.name()
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    /// Square head.
    Boxy,
    /// Head with the corner cells cut.
    Round,
    /// Narrow head, longer torso.
    Tall,
}

/// Palette region names, in mask order.
pub const REGION_NAMES: [&str; 3] = ["body", "head", "accent"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Palette {
    pub body: [u8; 3],
    pub head: [u8; 3],
    pub accent: [u8; 3],
}

impl Palette {
    pub fn colors(&self) -> [[u8; 3]; 3] {
        [self.body, self.head, self.accent]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub subject_id: String,
    pub shape: ShapeFamily,
    pub palette: Palette,
    /// Torso width in cells (6 or 8).
    pub scale: u8,
    pub hat: bool,
}

/// Minimum RGB distance between palette colours.
pub const MIN_PALETTE_SEPARATION: f64 = 40.0;
const QUANT_LEVELS: u32 = 8;

fn rgb_distance(a: [u8; 3], b: [u8; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Whether `palette` is segmentable: pairwise ≥ 40 apart, in distinct
/// quantisation bins, none shared with any background pixel.
pub fn palette_is_valid(palette: &Palette) -> bool {
    let cols = palette.colors();
    let bg = render::background_codes(QUANT_LEVELS);
    for i in 0..3 {
        let code = quantized_code(cols[i], QUANT_LEVELS);
        if bg.contains(&code) {
            return false;
        }
        for j in 0..i {
            if rgb_distance(cols[i], cols[j]) < MIN_PALETTE_SEPARATION
                || code == quantized_code(cols[j], QUANT_LEVELS)
            {
                return false;
            }
        }
    }
    true
}

fn sample_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    let h = rng.random_range(0.0..360.0);
    let s = rng.random_range(0.6..1.0);
    let v = rng.random_range(0.55..1.0);
    hsv_to_rgb(h, s, v)
}

/// Rejection-samples a valid palette.
pub(crate) fn sample_palette(rng: &mut ChaCha8Rng, accept: impl Fn(&Palette) -> bool) -> Palette {
    loop {
        let p = Palette {
            body: sample_color(rng),
            head: sample_color(rng),
            accent: sample_color(rng),
        };
        if palette_is_valid(&p) && accept(&p) {
            return p;
        }
    }
}

/// A deterministic subject for `seed`.
pub fn gen_subject(seed: u64) -> SubjectSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[0x5B]));
    let shape = [ShapeFamily::Boxy, ShapeFamily::Round, ShapeFamily::Tall][rng.random_range(0..3)];
    let palette = sample_palette(&mut rng, |_| true);
    SubjectSpec {
        // `mix` is a bijection, so distinct seeds give distinct ids.
        subject_id: format!("s{:016x}", seed::mix(seed)),
        shape,
        palette,
        scale: if rng.random_bool(0.5) { 6 } else { 8 },
        hat: rng.random_bool(0.4),
    }
}

impl SubjectSpec {
    pub fn validate(&self) -> Result<()> {
        if !palette_is_valid(&self.palette) {
            return Err(Error::Argument(format!(
                "subject {} has an unsegmentable palette",
                self.subject_id
            )));
        }
        if self.scale != 6 && self.scale != 8 {
            return Err(Error::Argument(format!(
                "subject scale must be 6 or 8, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Saturation of the least saturated palette colour.
    pub fn min_saturation(&self) -> f64 {
        self.palette
            .colors()
            .iter()
            .map(|c| rgb_to_hsv(c.map(f64::from))[1])
            .fold(f64::INFINITY, f64::min)
    }
}
