//! Axis scores and their weighted geometric mean.

use std::collections::BTreeMap;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backend::{Backends, ScoreRequest, Scorer};
use super::score::{color_score, ColorScoreReport, ColorThresholds};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Id,
    Prompt,
    Color,
    Quality,
    Diversity,
}

impl Axis {
    pub const ALL: [Axis; 5] = [
        Axis::Id,
        Axis::Prompt,
        Axis::Color,
        Axis::Quality,
        Axis::Diversity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Id => "id",
            Axis::Prompt => "prompt",
            Axis::Color => "color",
            Axis::Quality => "quality",
            Axis::Diversity => "diversity",
        }
    }

    /// Backend scorers consulted for this axis.
    pub fn scorers(self) -> &'static [Scorer] {
        match self {
            Axis::Id => &[Scorer::VlmId],
            Axis::Prompt => &[Scorer::VlmPrompt, Scorer::Clip],
            Axis::Color => &[],
            Axis::Quality => &[Scorer::ClipIqa],
            Axis::Diversity => &[Scorer::VlmDiversity],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CharisMode {
    /// Comparing methods: identity, prompt, colour, quality.
    #[default]
    Benchmarking,
    /// Curating training pairs: identity, colour, quality, diversity.
    Filtering,
}

impl CharisMode {
    pub fn axes(self) -> [Axis; 4] {
        match self {
            CharisMode::Benchmarking => [Axis::Id, Axis::Prompt, Axis::Color, Axis::Quality],
            CharisMode::Filtering => [Axis::Id, Axis::Color, Axis::Quality, Axis::Diversity],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharisWeights {
    pub id: f64,
    pub prompt: f64,
    pub color: f64,
    pub quality: f64,
    pub diversity: f64,
}

impl CharisWeights {
    pub fn benchmarking() -> Self {
        CharisWeights {
            id: 0.25,
            prompt: 0.25,
            color: 0.25,
            quality: 0.25,
            diversity: 0.0,
        }
    }

    pub fn filtering() -> Self {
        CharisWeights {
            id: 0.4,
            prompt: 0.0,
            color: 0.3,
            quality: 0.1,
            diversity: 0.2,
        }
    }

    pub fn for_mode(mode: CharisMode) -> Self {
        match mode {
            CharisMode::Benchmarking => Self::benchmarking(),
            CharisMode::Filtering => Self::filtering(),
        }
    }

    pub fn get(&self, axis: Axis) -> f64 {
        match axis {
            Axis::Id => self.id,
            Axis::Prompt => self.prompt,
            Axis::Color => self.color,
            Axis::Quality => self.quality,
            Axis::Diversity => self.diversity,
        }
    }

    pub fn validate(&self, mode: CharisMode) -> Result<()> {
        for a in Axis::ALL {
            let w = self.get(a);
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!(
                    "weight for `{}` must be finite and ≥ 0, got {w}",
                    a.name()
                )));
            }
        }
        if mode.axes().iter().map(|&a| self.get(a)).sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("{mode:?} weights sum to zero")));
        }
        Ok(())
    }
}

/// `(Π s_a^{w_a})^{1/Σw}`, evaluated in log space. Any axis at 0 with
/// positive weight gives 0.
pub fn weighted_geometric_mean(scores: &[f64], weights: &[f64]) -> Result<f64> {
    if scores.len() != weights.len() || scores.is_empty() {
        return Err(Error::Argument(format!(
            "{} scores for {} weights",
            scores.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Config("weights must be finite and ≥ 0".into()));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Argument(format!("axis score {s} outside [0, 1]")));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config("weights sum to zero".into()));
    }
    let mut log_sum = 0.0;
    for (&s, &w) in scores.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        if s == 0.0 {
            return Ok(0.0);
        }
        log_sum += w * s.ln();
    }
    Ok((log_sum / total).exp().min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharisReport {
    pub mode: CharisMode,
    pub weights: CharisWeights,
    /// Axis scores in `[0, 1]`; axes outside the mode are `None`.
    pub id: Option<f64>,
    pub prompt: Option<f64>,
    pub color: Option<f64>,
    pub quality: Option<f64>,
    pub diversity: Option<f64>,
    pub composite: f64,
    pub color_detail: ColorScoreReport,
}

impl CharisReport {
    pub fn axis(&self, a: Axis) -> Option<f64> {
        match a {
            Axis::Id => self.id,
            Axis::Prompt => self.prompt,
            Axis::Color => self.color,
            Axis::Quality => self.quality,
            Axis::Diversity => self.diversity,
        }
    }

    /// The composite recomputed from the stored axis scores and weights.
    pub fn recompute(&self) -> Result<f64> {
        let axes = self.mode.axes();
        let scores: Vec<f64> = axes
            .iter()
            .map(|&a| {
                self.axis(a)
                    .ok_or_else(|| Error::Argument(format!("missing axis {}", a.name())))
            })
            .collect::<Result<_>>()?;
        let weights: Vec<f64> = axes.iter().map(|&a| self.weights.get(a)).collect();
        weighted_geometric_mean(&scores, &weights)
    }
}

/// One evaluated pair.
#[derive(Clone, Debug)]
pub struct CharisInput<'a> {
    pub reference: &'a RgbImage,
    pub generated: &'a RgbImage,
    /// Identifiers forwarded to backends (paths or ids).
    pub reference_ref: String,
    pub generated_ref: String,
    pub prompt: String,
    pub metadata: BTreeMap<String, String>,
}

impl CharisInput<'_> {
    fn request(&self, scorer: Scorer) -> ScoreRequest {
        ScoreRequest {
            scorer,
            reference: self.reference_ref.clone(),
            generated: self.generated_ref.clone(),
            prompt: self.prompt.clone(),
            metadata: self.metadata.clone(),
        }
    }
}

/// Scores every axis of `mode` (backend calls run concurrently) and
/// combines them.
pub fn charis_score(
    input: &CharisInput<'_>,
    mode: CharisMode,
    weights: &CharisWeights,
    thresholds: &ColorThresholds,
    backends: &Backends,
) -> Result<CharisReport> {
    weights.validate(mode)?;
    thresholds.validate()?;
    let axes = mode.axes();
    let scorers: Vec<Scorer> = axes
        .iter()
        .flat_map(|a| a.scorers().iter().copied())
        .collect();
    for &s in &scorers {
        backends.get(s)?;
    }
    let raw: Vec<f64> = scorers
        .par_iter()
        .map(|&s| backends.query(&input.request(s)))
        .collect::<Result<_>>()?;
    let got: BTreeMap<Scorer, f64> = scorers.into_iter().zip(raw).collect();
    let color_detail = color_score(input.reference, input.generated, thresholds)?;

    let value = |a: Axis| -> f64 {
        match a {
            Axis::Id => got[&Scorer::VlmId],
            Axis::Prompt => ((got[&Scorer::VlmPrompt] + got[&Scorer::Clip]) / 2.0).clamp(0.0, 1.0),
            Axis::Color => color_detail.score,
            Axis::Quality => got[&Scorer::ClipIqa],
            Axis::Diversity => got[&Scorer::VlmDiversity],
        }
    };
    let in_mode = |a: Axis| axes.contains(&a).then(|| value(a));
    let scores: Vec<f64> = axes.iter().map(|&a| value(a)).collect();
    let w: Vec<f64> = axes.iter().map(|&a| weights.get(a)).collect();
    Ok(CharisReport {
        mode,
        weights: weights.clone(),
        id: in_mode(Axis::Id),
        prompt: in_mode(Axis::Prompt),
        color: in_mode(Axis::Color),
        quality: in_mode(Axis::Quality),
        diversity: in_mode(Axis::Diversity),
        composite: weighted_geometric_mean(&scores, &w)?,
        color_detail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        let c = weighted_geometric_mean(&[1.0, 0.5, 1.0, 1.0], &[0.25; 4]).unwrap();
        assert!((c - 0.5f64.powf(0.25)).abs() < 1e-15);
        assert!((c - 0.8409).abs() < 1e-4);
        assert!((weighted_geometric_mean(&[0.7; 4], &[0.25; 4]).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(
            weighted_geometric_mean(&[1.0, 0.0, 1.0, 1.0], &[0.25; 4]).unwrap(),
            0.0
        );
        assert_eq!(
            weighted_geometric_mean(&[1.0, 0.0], &[1.0, 0.0]).unwrap(),
            1.0
        );
    }

    #[test]
    fn weight_errors() {
        assert!(matches!(
            weighted_geometric_mean(&[0.5, 0.5], &[-1.0, 2.0]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            weighted_geometric_mean(&[0.5, 0.5], &[0.0, 0.0]),
            Err(Error::Config(_))
        ));
        let mut w = CharisWeights::benchmarking();
        w.color = -0.1;
        assert!(w.validate(CharisMode::Benchmarking).is_err());
        assert!(CharisWeights::filtering()
            .validate(CharisMode::Filtering)
            .is_ok());
        // prompt-only weights cannot drive a Filtering composite
        let p = CharisWeights {
            id: 0.0,
            prompt: 1.0,
            color: 0.0,
            quality: 0.0,
            diversity: 0.0,
        };
        assert!(p.validate(CharisMode::Filtering).is_err());
    }

    #[test]
    fn mode_axis_sets() {
        assert_eq!(
            CharisMode::Benchmarking.axes(),
            [Axis::Id, Axis::Prompt, Axis::Color, Axis::Quality]
        );
        assert_eq!(
            CharisMode::Filtering.axes(),
            [Axis::Id, Axis::Color, Axis::Quality, Axis::Diversity]
        );
    }
}
