use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dit::{
    apply_lora, Dit, GradSet, Init, LoraAdapters, LoraConfig, LoraPolicy, ModelConfig, ModelParams,
    TextCondition, Trainable,
};
use crate::error::{Error, Result};
use crate::flow::{loss_gradients, masked_cfm_loss, LossConfig};
use crate::latents::{build_mask, sample_noise, LatentGrid, SpatialMask};
use crate::seed;

pub const GRADCHECK_EPS: f64 = 1e-4;
pub const GRADCHECK_TOL: f64 = 1e-3;
/// Denominator floor so entries whose true gradient is ~0 are judged by
/// absolute error.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub numel: usize,
    pub max_abs_grad: f64,
    pub max_abs_err: f64,
    /// `max |a − n| / max(|a|, |n|, 1e-6)` over the group's entries.
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub base: Vec<GroupCheck>,
    pub lora: Vec<GroupCheck>,
    /// Base groups present in the adapter-only gradient set (must be 0).
    pub base_groups_in_lora_grads: usize,
    pub passed: bool,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&GroupCheck> {
        self.base
            .iter()
            .chain(&self.lora)
            .filter(|g| !g.passed)
            .collect()
    }

    /// `Err(Numeric)` naming every failing group.
    pub fn ensure(&self) -> Result<()> {
        let bad: Vec<String> = self
            .failures()
            .iter()
            .map(|g| format!("{} (rel {:.3e})", g.name, g.max_rel_err))
            .collect();
        if bad.is_empty() && self.base_groups_in_lora_grads == 0 {
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "gradient check failed: {}",
                bad.join(", ")
            )))
        }
    }
}

struct Problem {
    z0: LatentGrid,
    z1: LatentGrid,
    t: f64,
    text: TextCondition,
    mask: SpatialMask,
}

impl Problem {
    fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let (h, w, c) = (cfg.grid_height, 2 * cfg.grid_width, cfg.latent_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[7]));
        Ok(Problem {
            z0: sample_noise(h, w, c, seed::derive(seed, &[1]))?,
            z1: sample_noise(h, w, c, seed::derive(seed, &[2]))?,
            t: 0.37,
            text: TextCondition::Tokens(
                (0..cfg.text_tokens)
                    .map(|_| rng.random_range(0..cfg.vocab))
                    .collect(),
            ),
            mask: build_mask(cfg.grid_height, cfg.grid_width)?,
        })
    }

    fn loss(&self, params: &ModelParams, lora: Option<&LoraAdapters>) -> Result<f64> {
        let dit = Dit::new(params, lora)?;
        let r = masked_cfm_loss(
            &self.z0,
            &self.z1,
            self.t,
            &self.text,
            &self.mask,
            &dit,
            LossConfig::default(),
        )?;
        Ok(r.objective())
    }
}

fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> GroupCheck {
    let mut g = GroupCheck {
        name: name.to_string(),
        numel: analytic.len(),
        max_abs_grad: 0.0,
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        passed: true,
    };
    for (&a, &n) in analytic.iter().zip(numeric) {
        if !a.is_finite() || !n.is_finite() {
            g.max_rel_err = f64::INFINITY;
            g.max_abs_err = f64::INFINITY;
            continue;
        }
        let err = (a - n).abs();
        g.max_abs_grad = g.max_abs_grad.max(a.abs());
        g.max_abs_err = g.max_abs_err.max(err);
        g.max_rel_err = g.max_rel_err.max(err / a.abs().max(n.abs()).max(REL_FLOOR));
    }
    g.passed = g.max_rel_err < GRADCHECK_TOL && g.max_rel_err.is_finite();
    g
}

/// Central difference of `f` around every entry of `values[k]`.
fn numeric<T>(
    state: &mut T,
    k: usize,
    values: fn(&mut T) -> &mut [crate::tensor::Matrix],
    f: &dyn Fn(&T) -> Result<f64>,
) -> Result<Vec<f64>> {
    let n = values(state)[k].len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = values(state)[k].data()[i];
        values(state)[k].data_mut()[i] = orig + GRADCHECK_EPS;
        let up = f(state)?;
        values(state)[k].data_mut()[i] = orig - GRADCHECK_EPS;
        let down = f(state)?;
        values(state)[k].data_mut()[i] = orig;
        out.push((up - down) / (2.0 * GRADCHECK_EPS));
    }
    Ok(out)
}

/// Compares analytic gradients of the masked objective against central
/// finite differences for every base parameter and, with adapters attached
/// to every eligible matrix, every adapter factor.
pub fn gradcheck(cfg: &ModelConfig, seed: u64) -> Result<GradcheckReport> {
    let started = Instant::now();
    cfg.validate()?;
    let problem = Problem::new(cfg, seed)?;
    let mut params = ModelParams::init(cfg, seed, Init::Dense)?;

    let dit = Dit::new(&params, None)?;
    let (_, grads) = loss_gradients(
        &problem.z0,
        &problem.z1,
        problem.t,
        &problem.text,
        &problem.mask,
        &dit,
        LossConfig::default(),
        Trainable::Base,
    )?;
    let mut base = Vec::new();
    for k in 0..params.set().len() {
        let num = numeric(&mut params, k, |p| p.set_mut().values_mut(), &|p| {
            problem.loss(p, None)
        })?;
        base.push(compare(params.set().name(k), grads.grads[k].data(), &num));
    }

    let lcfg = LoraConfig {
        rank: 2,
        alpha: 2.0,
        policy: LoraPolicy::C,
        include_embedder: true,
    };
    let mut lora = apply_lora(&params, &lcfg, seed::derive(seed, &[3]))?;
    // Non-zero up factors so the down factors receive gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[4]));
    for k in 0..lora.set().len() {
        if lora.set().name(k).ends_with(".up") {
            for x in lora.set_mut().get_mut(k).data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = 0.3 * z;
            }
        }
    }
    let dit = Dit::new(&params, Some(&lora))?;
    let (_, lgrads): (_, GradSet) = loss_gradients(
        &problem.z0,
        &problem.z1,
        problem.t,
        &problem.text,
        &problem.mask,
        &dit,
        LossConfig::default(),
        Trainable::Lora,
    )?;
    let base_groups_in_lora_grads = lgrads.grads.len().saturating_sub(lora.set().len());
    let mut lora_checks = Vec::new();
    for k in 0..lora.set().len() {
        let num = numeric(&mut lora, k, |l| l.set_mut().values_mut(), &|l| {
            problem.loss(&params, Some(l))
        })?;
        lora_checks.push(compare(lora.set().name(k), lgrads.grads[k].data(), &num));
    }

    let passed =
        base.iter().chain(&lora_checks).all(|g| g.passed) && base_groups_in_lora_grads == 0;
    Ok(GradcheckReport {
        eps: GRADCHECK_EPS,
        tolerance: GRADCHECK_TOL,
        base,
        lora: lora_checks,
        base_groups_in_lora_grads,
        passed,
        elapsed: started.elapsed(),
    })
}
