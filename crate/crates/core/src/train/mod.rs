//! Two-phase training: a full-parameter toy base, then low-rank adapters
//! on reference/target pairs with the base frozen.
//!
//! Every random draw is keyed by `(seed, phase, step, slot)` and per-sample
//! gradients are summed in slot order, so results do not depend on the
//! worker count.

mod ablate;
mod adamw;
mod eval;
mod gradcheck;

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ablate::{ablate, AblationAxis, AblationResult, AblationRow};
pub use adamw::{AdamW, AdamWConfig};
pub use eval::{
    color_score_gt, evaluate, summarize, EvalConfig, EvalItem, EvalRecord, EvalSummary,
};
pub use gradcheck::{gradcheck, GradcheckReport, GroupCheck, GRADCHECK_EPS, GRADCHECK_TOL};

use crate::dit::{
    apply_lora, Checkpoint, Dit, GradSet, Init, LoraAdapters, LoraConfig, ModelConfig, ModelParams,
    TextCondition, Trainable,
};
use crate::error::{Error, Result};
use crate::flow::{loss_gradients, masked_cfm_loss, LossConfig, LossMode, LossReport};
use crate::latents::{
    build_mask, concat_width, sample_noise, LatentGrid, LatentPair, ReferenceNoising, SpatialMask,
};
use crate::seed;

const TAG_BASE: u64 = 1;
const TAG_ADAPT: u64 = 2;
const TAG_PROBE: u64 = 3;
const TAG_INIT: u64 = 4;
const TAG_PARTNER: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Adapter-phase learning rate.
    pub lr: f64,
    /// Adapter-phase steps.
    pub steps: usize,
    pub batch_size: usize,
    pub lora: LoraConfig,
    pub loss_mode: LossMode,
    pub reference_noising: ReferenceNoising,
    pub seed: u64,
    pub adamw: AdamWConfig,
    /// Emit a checkpoint every this many adapter steps; 0 disables.
    pub checkpoint_every: usize,
    /// Full-parameter steps before adapters are attached.
    pub base_steps: usize,
    pub base_lr: f64,
    /// Probability that a base-phase reference shows the target's own
    /// subject rather than another one. 0 gives a base with no notion of
    /// identity; 1 trains the base on the adapter task itself.
    pub base_same_subject: f64,
    /// Fixed draws used to measure loss before and after the adapter phase.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 1e-4,
            steps: 2000,
            batch_size: 16,
            lora: LoraConfig::default(),
            loss_mode: LossMode::Masked,
            reference_noising: ReferenceNoising::Clean,
            seed: 0,
            adamw: AdamWConfig::default(),
            checkpoint_every: 0,
            base_steps: 800,
            base_lr: 1e-3,
            base_same_subject: 0.0,
            probe_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lora.validate()?;
        self.adamw.validate()?;
        // lr = 0 is accepted as a null optimizer.
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be ≥ 0, got {}", self.lr)));
        }
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!(
                "base_lr must be ≥ 0, got {}",
                self.base_lr
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.base_same_subject) {
            return Err(Error::Config(format!(
                "base_same_subject must lie in [0, 1], got {}",
                self.base_same_subject
            )));
        }
        if self.probe_size == 0 {
            return Err(Error::Config("probe_size must be at least 1".into()));
        }
        Ok(())
    }

    fn loss(&self) -> LossConfig {
        LossConfig {
            mode: self.loss_mode,
            reference_noising: self.reference_noising,
        }
    }
}

/// Batch-mean losses at one optimizer step (recorded before the update).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// The optimised objective.
    pub loss: f64,
    pub masked_loss: f64,
    pub unmasked_loss: f64,
    pub target_half: f64,
    pub reference_half: f64,
}

impl CurvePoint {
    fn mean(step: usize, reports: &[LossReport]) -> Self {
        let n = reports.len() as f64;
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        CurvePoint {
            step,
            loss: avg(LossReport::objective),
            masked_loss: avg(|r| r.masked_loss),
            unmasked_loss: avg(|r| r.unmasked_loss),
            target_half: avg(|r| r.target_half),
            reference_half: avg(|r| r.reference_half),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub base_curve: Vec<CurvePoint>,
    /// One point per adapter step.
    pub curve: Vec<CurvePoint>,
    /// Probe loss of the freshly initialised model, before either phase.
    pub probe_untrained: CurvePoint,
    /// Probe loss when the adapter phase starts.
    pub probe_initial: CurvePoint,
    pub probe_final: CurvePoint,
    pub base_digest: String,
    /// Digest of the final adapter weights.
    pub final_checkpoint: String,
    pub eval: Option<EvalSummary>,
    /// Excluded from serialisation so artifacts are reproducible.
    #[serde(skip)]
    pub wall_clock: Duration,
}

/// Result of phase 1.
#[derive(Clone, Debug)]
pub struct BaseModel {
    pub params: ModelParams,
    pub curve: Vec<CurvePoint>,
    pub probe_untrained: CurvePoint,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub checkpoint: Checkpoint,
}

/// Options that change speed or side effects but never results.
pub struct Runtime<'h> {
    pub workers: usize,
    pub on_checkpoint: Option<&'h mut dyn FnMut(usize, &Checkpoint) -> Result<()>>,
}

impl Default for Runtime<'_> {
    fn default() -> Self {
        Runtime {
            workers: 1,
            on_checkpoint: None,
        }
    }
}

impl Runtime<'_> {
    pub fn with_workers(workers: usize) -> Self {
        Runtime {
            workers,
            on_checkpoint: None,
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", self.workers)))
    }
}

/// One draw: clean grid `z0` (target ‖ reference), prompt and `t`.
struct Draw {
    z0: LatentGrid,
    z1: LatentGrid,
    tokens: Vec<usize>,
    t: f64,
}

fn draw_noise(z0: &LatentGrid, key: u64) -> Result<LatentGrid> {
    let (h, w, c) = z0.shape();
    sample_noise(h, w, c, key)
}

/// Visits pairs in a fresh permutation each epoch.
struct Order {
    n: usize,
    seed: u64,
    epoch: usize,
    perm: Vec<usize>,
}

impl Order {
    fn new(n: usize, seed: u64) -> Self {
        Order {
            n,
            seed,
            epoch: usize::MAX,
            perm: Vec::new(),
        }
    }

    fn at(&mut self, global: usize) -> usize {
        let epoch = global / self.n;
        if epoch != self.epoch {
            self.perm = (0..self.n).collect();
            self.perm
                .shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(
                    self.seed,
                    &[epoch as u64],
                )));
            self.epoch = epoch;
        }
        self.perm[global % self.n]
    }
}

fn check_dataset(data: &[LatentPair], model: &ModelConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let want = (model.grid_height, model.grid_width, model.latent_dim);
    for p in data {
        if p.reference.shape() != want || p.target.shape() != want {
            return Err(Error::Dimension(format!(
                "pair {} has latents {:?}/{:?}, model expects {want:?}",
                p.pair_id,
                p.reference.shape(),
                p.target.shape()
            )));
        }
        if p.tokens.len() != model.text_tokens || p.tokens.iter().any(|&t| t >= model.vocab) {
            return Err(Error::Dimension(format!(
                "pair {} has invalid prompt tokens",
                p.pair_id
            )));
        }
    }
    Ok(())
}

/// Mean report over per-sample results, summing gradients in slot order.
fn reduce(step: usize, results: Vec<(LossReport, GradSet)>) -> (CurvePoint, GradSet) {
    let reports: Vec<LossReport> = results.iter().map(|r| r.0).collect();
    let mut it = results.into_iter().map(|r| r.1);
    let mut acc = it.next().expect("batch is non-empty");
    for g in it {
        acc.add_assign(&g);
    }
    acc.scale(1.0 / reports.len() as f64);
    (CurvePoint::mean(step, &reports), acc)
}

fn diverged(step: usize, params: &ModelParams, lora: Option<&LoraAdapters>) -> Error {
    Error::Diverged {
        step,
        last_good: Box::new(Checkpoint {
            params: params.clone(),
            lora: lora.cloned(),
        }),
    }
}

fn batch_gradients(
    pool: &rayon::ThreadPool,
    draws: &[Draw],
    dit: &Dit<'_>,
    mask: &SpatialMask,
    loss: LossConfig,
    trainable: Trainable,
) -> Result<Vec<(LossReport, GradSet)>> {
    pool.install(|| {
        draws
            .par_iter()
            .map(|d| {
                let text = TextCondition::Tokens(d.tokens.clone());
                loss_gradients(&d.z0, &d.z1, d.t, &text, mask, dit, loss, trainable)
            })
            .collect()
    })
}

fn finite_grads(g: &GradSet) -> bool {
    g.grads.iter().all(|m| m.is_finite())
}

/// Phase 1: every parameter trained with the masked objective. Each target
/// sits next to a reference of its own subject with probability
/// `base_same_subject`, otherwise next to an unrelated subject, so the base
/// follows prompts with at most a partial, drifting sense of identity.
pub fn train_base(data: &[LatentPair], cfg: &TrainConfig, rt: &Runtime<'_>) -> Result<BaseModel> {
    cfg.validate()?;
    check_dataset(data, &cfg.model)?;
    let mut params = ModelParams::init(
        &cfg.model,
        seed::derive(cfg.seed, &[TAG_INIT]),
        Init::Standard,
    )?;
    let probe_untrained = probe_loss(data, &params, None, cfg)?;
    let mask = build_mask(cfg.model.grid_height, cfg.model.grid_width)?;
    let loss = LossConfig {
        mode: LossMode::Masked,
        reference_noising: cfg.reference_noising,
    };
    let pool = rt.pool()?;
    let mut opt = AdamW::new(cfg.adamw.clone(), cfg.base_lr, params.set().values());
    let mut order = Order::new(data.len(), seed::derive(cfg.seed, &[TAG_BASE]));
    let mut curve = Vec::with_capacity(cfg.base_steps);
    for step in 0..cfg.base_steps {
        let mut draws = Vec::with_capacity(cfg.batch_size);
        for slot in 0..cfg.batch_size {
            let key = seed::derive(cfg.seed, &[TAG_BASE, step as u64, slot as u64]);
            let a = &data[order.at(step * cfg.batch_size + slot)];
            let b = &data[partner(
                data,
                a,
                cfg.base_same_subject,
                seed::derive(key, &[TAG_PARTNER]),
            )];
            let z0 = concat_width(&a.target, &b.reference)?;
            let z1 = draw_noise(&z0, key)?;
            let t = ChaCha8Rng::seed_from_u64(seed::derive(key, &[0])).random::<f64>();
            draws.push(Draw {
                z0,
                z1,
                tokens: a.tokens.clone(),
                t,
            });
        }
        let dit = Dit::new(&params, None)?;
        let results = match batch_gradients(&pool, &draws, &dit, &mask, loss, Trainable::Base) {
            Ok(r) => r,
            Err(e) if e.is_numeric() => return Err(diverged(step, &params, None)),
            Err(e) => return Err(e),
        };
        let (point, grads) = reduce(step, results);
        if !point.loss.is_finite() || !finite_grads(&grads) {
            return Err(diverged(step, &params, None));
        }
        curve.push(point);
        opt.step(params.set_mut().values_mut(), &grads.grads);
    }
    Ok(BaseModel {
        params,
        curve,
        probe_untrained,
    })
}

/// A pair of the same subject with probability `same`, otherwise one of a
/// different subject when one exists.
fn partner(data: &[LatentPair], a: &LatentPair, same: f64, key: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let want_same = rng.random::<f64>() < same;
    let pool: Vec<usize> = (0..data.len())
        .filter(|&i| (data[i].subject_id == a.subject_id) == want_same)
        .collect();
    if pool.is_empty() {
        return rng.random_range(0..data.len());
    }
    pool[rng.random_range(0..pool.len())]
}

fn pair_grid(p: &LatentPair) -> Result<LatentGrid> {
    concat_width(&p.target, &p.reference)
}

/// Mean loss over a fixed, stratified set of `(pair, t, noise)` draws.
pub fn probe_loss(
    data: &[LatentPair],
    params: &ModelParams,
    lora: Option<&LoraAdapters>,
    cfg: &TrainConfig,
) -> Result<CurvePoint> {
    let dit = Dit::new(params, lora)?;
    let mask = build_mask(cfg.model.grid_height, cfg.model.grid_width)?;
    let mut reports = Vec::with_capacity(cfg.probe_size);
    for i in 0..cfg.probe_size {
        let p = &data[(i * 7919) % data.len()];
        let z0 = pair_grid(p)?;
        let z1 = draw_noise(&z0, seed::derive(cfg.seed, &[TAG_PROBE, i as u64]))?;
        let t = (i as f64 + 0.5) / cfg.probe_size as f64;
        let text = TextCondition::Tokens(p.tokens.clone());
        reports.push(masked_cfm_loss(
            &z0,
            &z1,
            t,
            &text,
            &mask,
            &dit,
            cfg.loss(),
        )?);
    }
    Ok(CurvePoint::mean(0, &reports))
}

/// Phase 2: adapters on a frozen base.
pub fn train_adapters(
    data: &[LatentPair],
    base_model: &BaseModel,
    cfg: &TrainConfig,
    rt: &mut Runtime<'_>,
) -> Result<TrainOutcome> {
    let base = &base_model.params;
    cfg.validate()?;
    check_dataset(data, &cfg.model)?;
    if base.config() != &cfg.model {
        return Err(Error::Config(
            "base model does not match model config".into(),
        ));
    }
    let started = Instant::now();
    let mut lora = apply_lora(base, &cfg.lora, seed::derive(cfg.seed, &[TAG_INIT, 1]))?;
    let mask = build_mask(cfg.model.grid_height, cfg.model.grid_width)?;
    let pool = rt.pool()?;
    let probe_initial = probe_loss(data, base, Some(&lora), cfg)?;
    let mut opt = AdamW::new(cfg.adamw.clone(), cfg.lr, lora.set().values());
    let mut order = Order::new(data.len(), seed::derive(cfg.seed, &[TAG_ADAPT]));
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut last_good = lora.clone();
    for step in 0..cfg.steps {
        let mut draws = Vec::with_capacity(cfg.batch_size);
        for slot in 0..cfg.batch_size {
            let key = seed::derive(cfg.seed, &[TAG_ADAPT, step as u64, slot as u64]);
            let p = &data[order.at(step * cfg.batch_size + slot)];
            let z0 = pair_grid(p)?;
            let z1 = draw_noise(&z0, key)?;
            let t = ChaCha8Rng::seed_from_u64(seed::derive(key, &[0])).random::<f64>();
            draws.push(Draw {
                z0,
                z1,
                tokens: p.tokens.clone(),
                t,
            });
        }
        let dit = Dit::new(base, Some(&lora))?;
        let results = match batch_gradients(&pool, &draws, &dit, &mask, cfg.loss(), Trainable::Lora)
        {
            Ok(r) => r,
            Err(e) if e.is_numeric() => return Err(diverged(step, base, Some(&last_good))),
            Err(e) => return Err(e),
        };
        let (point, grads) = reduce(step, results);
        if !point.loss.is_finite() || !finite_grads(&grads) {
            return Err(diverged(step, base, Some(&last_good)));
        }
        curve.push(point);
        last_good.clone_from(&lora);
        opt.step(lora.set_mut().values_mut(), &grads.grads);
        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            if let Some(cb) = rt.on_checkpoint.as_mut() {
                cb(
                    done,
                    &Checkpoint {
                        params: base.clone(),
                        lora: Some(lora.clone()),
                    },
                )?;
            }
        }
    }
    let probe_final = probe_loss(data, base, Some(&lora), cfg)?;
    if !probe_final.loss.is_finite() {
        return Err(diverged(cfg.steps, base, Some(&last_good)));
    }
    let record = RunRecord {
        config: cfg.clone(),
        base_curve: base_model.curve.clone(),
        curve,
        probe_untrained: base_model.probe_untrained,
        probe_initial,
        probe_final,
        base_digest: base.set().digest(),
        final_checkpoint: lora.set().digest(),
        eval: None,
        wall_clock: started.elapsed(),
    };
    Ok(TrainOutcome {
        record,
        checkpoint: Checkpoint {
            params: base.clone(),
            lora: Some(lora),
        },
    })
}

/// Both phases.
pub fn train(data: &[LatentPair], cfg: &TrainConfig, rt: &mut Runtime<'_>) -> Result<TrainOutcome> {
    let started = Instant::now();
    let base = train_base(data, cfg, rt)?;
    let mut out = train_adapters(data, &base, cfg, rt)?;
    out.record.wall_clock = started.elapsed();
    Ok(out)
}

/// `step,loss,unmasked_loss` rows for plotting.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("step,loss,unmasked_loss\n");
    for p in curve {
        s.push_str(&format!("{},{},{}\n", p.step, p.loss, p.unmasked_loss));
    }
    s
}
