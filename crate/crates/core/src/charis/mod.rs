//! Attribute-level evaluation: segmentation, region matching, tiered
//! colour fidelity across RGB/HSV/LAB, pluggable axis scorers and the
//! weighted-geometric-mean composite.

mod backend;
pub mod color;
mod composite;
mod matching;
mod score;
mod segment;

pub use backend::{
    Backends, FixedBackend, MetadataStub, ScoreBackend, ScoreRequest, Scorer, SubprocessBackend,
};
pub use color::{convert, distance, mean_colors, rgb_to_hsv, rgb_to_lab, ColorSpace};
pub use composite::{
    charis_score, weighted_geometric_mean, Axis, CharisInput, CharisMode, CharisReport,
    CharisWeights,
};
pub use matching::{cost_matrix, hungarian, match_regions, Matching, MATCH_ALPHA};
pub use score::{
    color_score, color_score_matched, color_score_regions, color_score_with, score_from_tiers,
    tier, ColorScoreReport, ColorThresholds, PairDetail, Tier, SPACES,
};
pub use segment::{quantized_code, segment, BBox, Background, Region, SegmentConfig, Segmenter};

#[doc(hidden)]
pub use segment::segment_in_order;
