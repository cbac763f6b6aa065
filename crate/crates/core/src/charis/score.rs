//! Region-matched, three-space tiered colour fidelity.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::color::{distance, ColorSpace};
use super::matching::match_regions;
use super::segment::{Region, SegmentConfig, Segmenter};
use crate::error::{Error, Result};

/// Number of colour spaces scored.
pub const SPACES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tier {
    pub t1: f64,
    pub t2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColorThresholds {
    pub rgb: Tier,
    pub hsv: Tier,
    pub lab: Tier,
}

impl Default for ColorThresholds {
    fn default() -> Self {
        ColorThresholds {
            rgb: Tier { t1: 10.0, t2: 40.0 },
            hsv: Tier { t1: 0.08, t2: 0.3 },
            lab: Tier { t1: 5.0, t2: 20.0 },
        }
    }
}

impl ColorThresholds {
    pub fn get(&self, space: ColorSpace) -> Tier {
        match space {
            ColorSpace::Rgb => self.rgb,
            ColorSpace::Hsv => self.hsv,
            ColorSpace::Lab => self.lab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in ColorSpace::ALL {
            let t = self.get(s);
            if !(t.t1 > 0.0 && t.t1 < t.t2 && t.t2.is_finite()) {
                return Err(Error::Config(format!(
                    "{s:?} thresholds need 0 < t1 < t2, got {t:?}"
                )));
            }
        }
        Ok(())
    }
}

/// 2 below `t1`, 1 below `t2`, else 0.
pub fn tier(delta: f64, t: Tier) -> u8 {
    if delta < t.t1 {
        2
    } else if delta < t.t2 {
        1
    } else {
        0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDetail {
    pub reference: usize,
    pub generated: usize,
    pub match_cost: f64,
    /// Distances in RGB, HSV, LAB order.
    pub deltas: [f64; SPACES],
    pub tiers: [u8; SPACES],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorScoreReport {
    pub score: f64,
    pub pairs: Vec<PairDetail>,
    pub unmatched_reference: usize,
    pub unmatched_generated: usize,
    /// Set when nothing could be matched; `score` is then 0.
    pub empty_matching: bool,
}

/// `Σ tiers / (2·|M|·3)`; 0 for an empty matching.
pub fn score_from_tiers(tiers: &[[u8; SPACES]]) -> f64 {
    if tiers.is_empty() {
        return 0.0;
    }
    let total: u32 = tiers.iter().flatten().map(|&t| u32::from(t)).sum();
    f64::from(total) / (2.0 * tiers.len() as f64 * SPACES as f64)
}

/// Scores pre-segmented regions matched by minimum cost.
pub fn color_score_regions(
    reference: &[Region],
    generated: &[Region],
    thresholds: &ColorThresholds,
) -> Result<ColorScoreReport> {
    let m = match_regions(reference, generated);
    color_score_matched(reference, generated, &m.pairs, thresholds)
}

/// Scores an explicit matching `(ref index, gen index, cost)`.
pub fn color_score_matched(
    reference: &[Region],
    generated: &[Region],
    matching: &[(usize, usize, f64)],
    thresholds: &ColorThresholds,
) -> Result<ColorScoreReport> {
    thresholds.validate()?;
    if let Some(&(i, j, _)) = matching
        .iter()
        .find(|&&(i, j, _)| i >= reference.len() || j >= generated.len())
    {
        return Err(Error::Argument(format!(
            "matching pair ({i}, {j}) out of range"
        )));
    }
    let pairs: Vec<PairDetail> = matching
        .iter()
        .map(|&(i, j, cost)| {
            let (r, g) = (&reference[i], &generated[j]);
            let deltas = ColorSpace::ALL.map(|s| distance(r.mean[s.index()], g.mean[s.index()], s));
            let tiers =
                std::array::from_fn(|k| tier(deltas[k], thresholds.get(ColorSpace::ALL[k])));
            PairDetail {
                reference: i,
                generated: j,
                match_cost: cost,
                deltas,
                tiers,
            }
        })
        .collect();
    let tiers: Vec<[u8; SPACES]> = pairs.iter().map(|p| p.tiers).collect();
    Ok(ColorScoreReport {
        score: score_from_tiers(&tiers),
        empty_matching: pairs.is_empty(),
        unmatched_reference: reference.len() - pairs.len(),
        unmatched_generated: generated.len() - pairs.len(),
        pairs,
    })
}

/// Segments both images (foreground only) and scores the matched regions.
pub fn color_score(
    reference: &RgbImage,
    generated: &RgbImage,
    thresholds: &ColorThresholds,
) -> Result<ColorScoreReport> {
    color_score_with(
        reference,
        generated,
        thresholds,
        &SegmentConfig::foreground(),
    )
}

pub fn color_score_with(
    reference: &RgbImage,
    generated: &RgbImage,
    thresholds: &ColorThresholds,
    segmenter: &dyn Segmenter,
) -> Result<ColorScoreReport> {
    let r = segmenter.segment(reference)?;
    let g = segmenter.segment(generated)?;
    color_score_regions(&r, &g, thresholds)
}
