//! Sampling targets for held-out references and scoring them.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::charis::{
    charis_score, color_score_matched, Backends, CharisInput, CharisMode, CharisReport,
    CharisWeights, ColorScoreReport, ColorThresholds, Region,
};
use crate::dit::{Checkpoint, Dit, TextCondition};
use crate::error::{Error, Result};
use crate::flow::{sample, SamplerConfig};
use crate::seed;
use crate::synthdata::{
    decode_latent, encode_latent, load_images, read_subject, render, Context, Corpus, PairRecord,
    Pose, SubjectSpec, IMAGE_SIZE, REGION_NAMES,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub sampler: SamplerConfig,
    pub mode: CharisMode,
    pub weights: CharisWeights,
    pub thresholds: ColorThresholds,
    /// Evaluate at most this many pairs; 0 means all.
    pub max_pairs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sampler: SamplerConfig::default(),
            mode: CharisMode::Benchmarking,
            weights: CharisWeights::benchmarking(),
            thresholds: ColorThresholds::default(),
            max_pairs: 16,
        }
    }
}

/// What evaluation needs about one held-out pair.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub pair_id: String,
    pub subject: SubjectSpec,
    pub reference_pose: Pose,
    pub reference_context: Context,
    pub target_pose: Pose,
    pub target_context: Context,
    pub prompt: String,
    pub tokens: Vec<usize>,
    pub reference: RgbImage,
}

impl EvalItem {
    fn from_parts(r: &PairRecord, subject: SubjectSpec, reference: RgbImage) -> Self {
        EvalItem {
            pair_id: r.pair_id.clone(),
            subject,
            reference_pose: r.reference_pose,
            reference_context: r.reference_context,
            target_pose: r.target_pose,
            target_context: r.target_context,
            prompt: r.prompt.clone(),
            tokens: r.tokens.clone(),
            reference,
        }
    }

    pub fn from_record(root: &Path, r: &PairRecord) -> Result<Self> {
        let subject = read_subject(root, &r.subject_id)?;
        let (reference, _) = load_images(root, r)?;
        Ok(Self::from_parts(r, subject, reference))
    }

    /// Retained pairs of an in-memory corpus.
    pub fn from_corpus(corpus: &Corpus) -> Vec<Self> {
        corpus
            .candidates
            .iter()
            .zip(&corpus.images)
            .filter(|(r, _)| r.retained)
            .map(|(r, (a, _))| {
                let subject = corpus
                    .subjects
                    .iter()
                    .find(|s| s.subject_id == r.subject_id)
                    .expect("record subject exists")
                    .clone();
                Self::from_parts(r, subject, a.clone())
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pair_id: String,
    pub subject_id: String,
    pub charis: CharisReport,
    /// Colour fidelity on ground-truth masks, regions matched by name.
    pub color_gt: ColorScoreReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub pairs: usize,
    pub mode: CharisMode,
    pub id: Option<f64>,
    pub prompt: Option<f64>,
    pub color: Option<f64>,
    pub quality: Option<f64>,
    pub diversity: Option<f64>,
    pub composite: f64,
    pub color_gt: f64,
}

fn gt_regions(
    image: &RgbImage,
    spec: &SubjectSpec,
    pose: Pose,
    context: Context,
) -> Result<Vec<Region>> {
    let truth = render(spec, pose, context, image.width())?;
    truth
        .masks
        .iter()
        .zip(REGION_NAMES)
        .map(|(m, name)| Region::from_mask(image, m, Some(name.to_string())))
        .collect()
}

/// ColorScore of `generated` against the item's reference, each measured on
/// its own ground-truth region masks.
pub fn color_score_gt(
    item: &EvalItem,
    generated: &RgbImage,
    thresholds: &ColorThresholds,
) -> Result<ColorScoreReport> {
    let r = gt_regions(
        &item.reference,
        &item.subject,
        item.reference_pose,
        item.reference_context,
    )?;
    let g = gt_regions(
        generated,
        &item.subject,
        item.target_pose,
        item.target_context,
    )?;
    let pairs: Vec<(usize, usize, f64)> = (0..r.len()).map(|k| (k, k, 0.0)).collect();
    color_score_matched(&r, &g, &pairs, thresholds)
}

fn evaluate_one(
    idx: usize,
    item: &EvalItem,
    dit: &Dit<'_>,
    cfg: &EvalConfig,
    backends: &Backends,
) -> Result<EvalRecord> {
    let z_ref = encode_latent(&item.reference)?;
    let sampler = SamplerConfig {
        seed: seed::derive(cfg.sampler.seed, &[idx as u64]),
        ..cfg.sampler.clone()
    };
    let z = sample(
        &z_ref,
        &TextCondition::Tokens(item.tokens.clone()),
        dit,
        &sampler,
    )?;
    let generated = decode_latent(&z, IMAGE_SIZE)?;
    let id = &item.subject.subject_id;
    let metadata: BTreeMap<String, String> = [
        ("ref_subject", id.as_str()),
        ("gen_subject", id.as_str()),
        ("ref_pose", item.reference_pose.name()),
        ("gen_pose", item.target_pose.name()),
        ("ref_context", item.reference_context.name()),
        ("gen_context", item.target_context.name()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    let input = CharisInput {
        reference: &item.reference,
        generated: &generated,
        reference_ref: format!("{}.ref", item.pair_id),
        generated_ref: format!("{}.gen", item.pair_id),
        prompt: item.prompt.clone(),
        metadata,
    };
    let charis = match charis_score(&input, cfg.mode, &cfg.weights, &cfg.thresholds, backends) {
        Ok(c) => c,
        // A generated image with no segmentable foreground scores zero colour.
        Err(Error::EmptySegmentation { .. }) => zero_color_report(&input, cfg, backends)?,
        Err(e) => return Err(e),
    };
    Ok(EvalRecord {
        pair_id: item.pair_id.clone(),
        subject_id: id.clone(),
        color_gt: color_score_gt(item, &generated, &cfg.thresholds)?,
        charis,
    })
}

fn zero_color_report(
    input: &CharisInput<'_>,
    cfg: &EvalConfig,
    backends: &Backends,
) -> Result<CharisReport> {
    // Score against the reference itself for the non-colour axes, then
    // zero the colour axis.
    let self_input = CharisInput {
        generated: input.reference,
        ..input.clone()
    };
    let mut rep = charis_score(
        &self_input,
        cfg.mode,
        &cfg.weights,
        &cfg.thresholds,
        backends,
    )?;
    rep.color_detail = ColorScoreReport {
        score: 0.0,
        pairs: Vec::new(),
        unmatched_reference: rep.color_detail.pairs.len() + rep.color_detail.unmatched_reference,
        unmatched_generated: 0,
        empty_matching: true,
    };
    if rep.color.is_some() {
        rep.color = Some(0.0);
    }
    rep.composite = rep.recompute()?;
    Ok(rep)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn summarize(mode: CharisMode, records: &[EvalRecord]) -> EvalSummary {
    let axis = |f: fn(&CharisReport) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = records.iter().filter_map(|r| f(&r.charis)).collect();
        (!vals.is_empty()).then(|| mean(vals.into_iter()))
    };
    EvalSummary {
        pairs: records.len(),
        mode,
        id: axis(|c| c.id),
        prompt: axis(|c| c.prompt),
        color: axis(|c| c.color),
        quality: axis(|c| c.quality),
        diversity: axis(|c| c.diversity),
        composite: mean(records.iter().map(|r| r.charis.composite)),
        color_gt: mean(records.iter().map(|r| r.color_gt.score)),
    }
}

/// Samples a target for each item with `checkpoint` and scores it.
pub fn evaluate(
    items: &[EvalItem],
    checkpoint: &Checkpoint,
    cfg: &EvalConfig,
    backends: &Backends,
    workers: usize,
) -> Result<(Vec<EvalRecord>, EvalSummary)> {
    cfg.sampler.validate()?;
    cfg.weights.validate(cfg.mode)?;
    if items.is_empty() {
        return Err(Error::Argument("no pairs to evaluate".into()));
    }
    let n = if cfg.max_pairs == 0 {
        items.len()
    } else {
        cfg.max_pairs.min(items.len())
    };
    let dit = Dit::new(&checkpoint.params, checkpoint.lora.as_ref())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start workers: {e}")))?;
    let records: Vec<EvalRecord> = pool.install(|| {
        items[..n]
            .par_iter()
            .enumerate()
            .map(|(i, item)| evaluate_one(i, item, &dit, cfg, backends))
            .collect::<Result<_>>()
    })?;
    let summary = summarize(cfg.mode, &records);
    Ok((records, summary))
}
