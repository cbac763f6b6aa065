//! Candidate pair generation, CHARIS filtering and the on-disk corpus.
//!
//! Layout under a corpus root:
//!
//! ```text
//! manifest.jsonl                       retained pairs, one JSON record per line
//! candidates.jsonl                     every candidate with scores and `retained`
//! corpus/{subject_id}/subject.json     SubjectSpec
//! corpus/{subject_id}/{pair_id}.ref.png
//! corpus/{subject_id}/{pair_id}.tgt.png
//! ```
//!
//! Record fields, in order: `pair_id, subject_id, reference, target,
//! reference_pose, reference_context, target_pose, target_context, prompt,
//! tokens, tags, scores{id, color, quality, diversity, composite},
//! retained`. Paths are relative to the root.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::render::{encode_latent, render, IMAGE_SIZE};
use super::{gen_subject, prompt_text, prompt_tokens, sample_palette, Context, Pose, SubjectSpec};
use crate::charis::{
    charis_score, convert, distance, Backends, CharisInput, CharisMode, CharisWeights, ColorSpace,
    ColorThresholds,
};
use crate::error::{Error, Result};
use crate::latents::LatentPair;
use crate::seed;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";

const TAG_SUBJECT: u64 = 11;
const TAG_PAIR: u64 = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Minimum Filtering-mode composite.
    pub min_composite: f64,
    /// Minimum colour-fidelity axis score.
    pub min_color: f64,
    pub weights: CharisWeights,
    pub thresholds: ColorThresholds,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_composite: 0.5,
            min_color: 0.8,
            weights: CharisWeights::filtering(),
            thresholds: ColorThresholds::default(),
        }
    }
}

impl FilterConfig {
    /// Retains everything.
    pub fn vacuous() -> Self {
        FilterConfig {
            min_composite: 0.0,
            min_color: 0.0,
            ..FilterConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub subjects: usize,
    pub pairs_per_subject: usize,
    pub seed: u64,
    pub filter: FilterConfig,
    /// Probability that a candidate's target is re-coloured with a far
    /// palette.
    pub adversarial_fraction: f64,
    pub text_tokens: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            subjects: 32,
            pairs_per_subject: 16,
            seed: 0,
            filter: FilterConfig::default(),
            adversarial_fraction: 0.0,
            text_tokens: 8,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.pairs_per_subject == 0 {
            return Err(Error::Config(
                "subjects and pairs_per_subject must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.adversarial_fraction) {
            return Err(Error::Config(
                "adversarial_fraction must lie in [0, 1]".into(),
            ));
        }
        self.filter.weights.validate(CharisMode::Filtering)?;
        self.filter.thresholds.validate()?;
        prompt_tokens(Pose::Stand, Context::Plain, self.text_tokens).map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub id: f64,
    pub color: f64,
    pub quality: f64,
    pub diversity: f64,
    pub composite: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub subject_id: String,
    pub reference: String,
    pub target: String,
    pub reference_pose: Pose,
    pub reference_context: Context,
    pub target_pose: Pose,
    pub target_context: Context,
    pub prompt: String,
    pub tokens: Vec<usize>,
    pub tags: Vec<String>,
    pub scores: PairScores,
    pub retained: bool,
}

/// Generated candidates with their pixels.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub subjects: Vec<SubjectSpec>,
    /// All candidates in `pair_id` order.
    pub candidates: Vec<PairRecord>,
    /// `(reference, target)` per candidate.
    pub images: Vec<(RgbImage, RgbImage)>,
}

impl Corpus {
    pub fn retained(&self) -> impl Iterator<Item = &PairRecord> {
        self.candidates.iter().filter(|r| r.retained)
    }

    pub fn retained_count(&self) -> usize {
        self.retained().count()
    }

    /// Retained pairs as training latents.
    pub fn latent_pairs(&self) -> Result<Vec<LatentPair>> {
        self.candidates
            .iter()
            .zip(&self.images)
            .filter(|(r, _)| r.retained)
            .map(|(r, (a, b))| to_latent_pair(r, a, b))
            .collect()
    }
}

fn to_latent_pair(r: &PairRecord, reference: &RgbImage, target: &RgbImage) -> Result<LatentPair> {
    Ok(LatentPair {
        pair_id: r.pair_id.clone(),
        subject_id: r.subject_id.clone(),
        reference: encode_latent(reference)?,
        target: encode_latent(target)?,
        tokens: r.tokens.clone(),
    })
}

/// Every palette colour is beyond `t2` from every original colour in every
/// space, so any region matching lands in the inconsistency tier.
fn far_from(original: &[[u8; 3]; 3], candidate: &[[u8; 3]; 3], thr: &ColorThresholds) -> bool {
    candidate.iter().all(|c| {
        original.iter().all(|o| {
            ColorSpace::ALL.iter().all(|&s| {
                let (a, b) = (convert(c.map(f64::from), s), convert(o.map(f64::from), s));
                distance(a, b, s) >= thr.get(s).t2
            })
        })
    })
}

fn metadata(r: &PairRecord) -> BTreeMap<String, String> {
    [
        ("ref_subject", r.subject_id.clone()),
        ("gen_subject", r.subject_id.clone()),
        ("ref_pose", r.reference_pose.name().to_string()),
        ("gen_pose", r.target_pose.name().to_string()),
        ("ref_context", r.reference_context.name().to_string()),
        ("gen_context", r.target_context.name().to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn score_pair(
    r: &PairRecord,
    reference: &RgbImage,
    target: &RgbImage,
    filter: &FilterConfig,
    backends: &Backends,
) -> Result<PairScores> {
    let input = CharisInput {
        reference,
        generated: target,
        reference_ref: r.reference.clone(),
        generated_ref: r.target.clone(),
        prompt: r.prompt.clone(),
        metadata: metadata(r),
    };
    let rep = charis_score(
        &input,
        CharisMode::Filtering,
        &filter.weights,
        &filter.thresholds,
        backends,
    )?;
    let axis = |v: Option<f64>| v.expect("filtering axis present");
    Ok(PairScores {
        id: axis(rep.id),
        color: axis(rep.color),
        quality: axis(rep.quality),
        diversity: axis(rep.diversity),
        composite: rep.composite,
    })
}

fn subject_dir(subject_id: &str) -> String {
    format!("corpus/{subject_id}")
}

fn candidate(
    cfg: &CorpusConfig,
    subject: &SubjectSpec,
    si: usize,
    k: usize,
    backends: &Backends,
) -> Result<(PairRecord, RgbImage, RgbImage)> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[TAG_PAIR, si as u64, k as u64]));
    let pick = |rng: &mut ChaCha8Rng| {
        (
            Pose::ALL[rng.random_range(0..4)],
            Context::ALL[rng.random_range(0..3)],
        )
    };
    let (rp, rc) = pick(&mut rng);
    let (tp, tc) = loop {
        let t = pick(&mut rng);
        if t != (rp, rc) {
            break t;
        }
    };
    let corrupted = cfg.adversarial_fraction > 0.0 && rng.random_bool(cfg.adversarial_fraction);
    let reference = render(subject, rp, rc, IMAGE_SIZE)?.image;
    let target_spec = if corrupted {
        let original = subject.palette.colors();
        let palette = sample_palette(&mut rng, |p| {
            far_from(&original, &p.colors(), &cfg.filter.thresholds)
        });
        SubjectSpec {
            palette,
            ..subject.clone()
        }
    } else {
        subject.clone()
    };
    let target = render(&target_spec, tp, tc, IMAGE_SIZE)?.image;
    let pair_id = format!("p{:05}", si * cfg.pairs_per_subject + k);
    let dir = subject_dir(&subject.subject_id);
    let mut tags = Vec::new();
    if rp != tp {
        tags.push("pose".to_string());
    }
    if rc != tc {
        tags.push("context".to_string());
    }
    if corrupted {
        tags.push("palette_swap".to_string());
    }
    let mut record = PairRecord {
        reference: format!("{dir}/{pair_id}.ref.png"),
        target: format!("{dir}/{pair_id}.tgt.png"),
        pair_id,
        subject_id: subject.subject_id.clone(),
        reference_pose: rp,
        reference_context: rc,
        target_pose: tp,
        target_context: tc,
        prompt: prompt_text(tp, tc),
        tokens: prompt_tokens(tp, tc, cfg.text_tokens)?,
        tags,
        scores: PairScores {
            id: 0.0,
            color: 0.0,
            quality: 0.0,
            diversity: 0.0,
            composite: 0.0,
        },
        retained: false,
    };
    record.scores = score_pair(&record, &reference, &target, &cfg.filter, backends)?;
    record.retained = record.scores.composite >= cfg.filter.min_composite
        && record.scores.color >= cfg.filter.min_color;
    Ok((record, reference, target))
}

fn histogram(scores: &[f64]) -> Vec<usize> {
    let mut h = vec![0; 10];
    for &s in scores {
        h[((s * 10.0) as usize).min(9)] += 1;
    }
    h
}

/// Generates, scores and filters `subjects × pairs_per_subject` candidates.
pub fn build_corpus(cfg: &CorpusConfig, backends: &Backends, workers: usize) -> Result<Corpus> {
    cfg.validate()?;
    let subjects: Vec<SubjectSpec> = (0..cfg.subjects)
        .map(|si| gen_subject(seed::derive(cfg.seed, &[TAG_SUBJECT, si as u64])))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..cfg.subjects)
        .flat_map(|si| (0..cfg.pairs_per_subject).map(move |k| (si, k)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start workers: {e}")))?;
    let made: Vec<(PairRecord, RgbImage, RgbImage)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(si, k)| candidate(cfg, &subjects[si], si, k, backends))
            .collect::<Result<_>>()
    })?;
    let mut candidates = Vec::with_capacity(made.len());
    let mut images = Vec::with_capacity(made.len());
    for (r, a, b) in made {
        candidates.push(r);
        images.push((a, b));
    }
    if !candidates.iter().any(|r| r.retained) {
        let comp: Vec<f64> = candidates.iter().map(|r| r.scores.composite).collect();
        return Err(Error::EmptyCorpus {
            candidates: candidates.len(),
            histogram: histogram(&comp),
        });
    }
    Ok(Corpus {
        config: cfg.clone(),
        subjects,
        candidates,
        images,
    })
}

fn write_jsonl<'a>(path: &Path, records: impl Iterator<Item = &'a PairRecord>) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serialises"));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e))
}

/// Writes the manifests, subject specs and retained pairs' images.
pub fn write_corpus(root: &Path, corpus: &Corpus) -> Result<()> {
    for s in &corpus.subjects {
        let dir = root.join(subject_dir(&s.subject_id));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("subject.json");
        fs::write(
            &path,
            serde_json::to_string_pretty(s).expect("spec serialises"),
        )
        .map_err(|e| Error::io(&path, e))?;
    }
    for (r, (a, b)) in corpus.candidates.iter().zip(&corpus.images) {
        if r.retained {
            save_png(&root.join(&r.reference), a)?;
            save_png(&root.join(&r.target), b)?;
        }
    }
    write_jsonl(&root.join(CANDIDATES_FILE), corpus.candidates.iter())?;
    write_jsonl(&root.join(MANIFEST_FILE), corpus.retained())
}

/// Reads `manifest.jsonl`, checking that every referenced image exists.
pub fn load_manifest(root: &Path) -> Result<Vec<PairRecord>> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let r: PairRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(&path, format!("line {}: {e}", n + 1)))?;
        for p in [&r.reference, &r.target] {
            if !root.join(p).is_file() {
                return Err(Error::io(
                    root.join(p),
                    std::io::Error::from(std::io::ErrorKind::NotFound),
                ));
            }
        }
        out.push(r);
    }
    if out.is_empty() {
        return Err(Error::format(&path, "manifest has no records"));
    }
    Ok(out)
}

fn load_png(path: PathBuf) -> Result<RgbImage> {
    Ok(image::open(&path)
        .map_err(|e| Error::format(&path, e))?
        .to_rgb8())
}

pub fn load_images(root: &Path, r: &PairRecord) -> Result<(RgbImage, RgbImage)> {
    Ok((
        load_png(root.join(&r.reference))?,
        load_png(root.join(&r.target))?,
    ))
}

pub fn read_subject(root: &Path, subject_id: &str) -> Result<SubjectSpec> {
    let path = root.join(subject_dir(subject_id)).join("subject.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e))
}

/// Manifest records as training latents.
pub fn encode_pairs(root: &Path, records: &[PairRecord]) -> Result<Vec<LatentPair>> {
    records
        .iter()
        .map(|r| {
            let (a, b) = load_images(root, r)?;
            to_latent_pair(r, &a, &b)
        })
        .collect()
}

/// Recomputes a record's scores from the files on disk.
pub fn rescore(
    root: &Path,
    record: &PairRecord,
    filter: &FilterConfig,
    backends: &Backends,
) -> Result<PairScores> {
    let (a, b) = load_images(root, record)?;
    score_pair(record, &a, &b, filter, backends)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_bins() {
        assert_eq!(
            histogram(&[0.0, 0.05, 0.95, 1.0, 0.5]),
            vec![2, 0, 0, 0, 0, 1, 0, 0, 0, 2]
        );
    }

    #[test]
    fn bad_counts_rejected() {
        let cfg = CorpusConfig {
            subjects: 0,
            ..CorpusConfig::default()
        };
        assert!(matches!(
            build_corpus(&cfg, &Backends::stub(), 1),
            Err(Error::Config(_))
        ));
    }
}
