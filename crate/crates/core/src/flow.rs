//! Masked conditional flow matching and the reference-clamped Euler sampler.
//!
//! The path is `z_t = (1 − t)·z1 + t·z0` with `t = 0` at noise, so the
//! regression target `z0 − z1` is the exact path derivative. The loss is
//! normalised by the number of selected entries.

use serde::{Deserialize, Serialize};

use crate::dit::{Dit, GradSet, TextCondition, Trainable};
use crate::error::{Error, Result};
use crate::latents::{
    clamp_reference_in_place, concat_width, interpolate, sample_noise, LatentGrid,
    ReferenceNoising, SpatialMask,
};
use crate::seed;

/// Anything that predicts a velocity for a concatenated latent.
pub trait VelocityField: Sync {
    fn velocity(&self, z_t: &LatentGrid, t: f64, text: &TextCondition) -> Result<LatentGrid>;
}

impl VelocityField for Dit<'_> {
    fn velocity(&self, z_t: &LatentGrid, t: f64, text: &TextCondition) -> Result<LatentGrid> {
        self.forward(z_t, text, t)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Residuals only where the mask is set.
    #[default]
    Masked,
    /// Residuals over the whole concatenated grid.
    Full,
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Masked => "masked",
            LossMode::Full => "full",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mode: LossMode,
    pub reference_noising: ReferenceNoising,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mode: LossMode,
    /// Mean squared residual over entries selected by the mask.
    pub masked_loss: f64,
    /// Mean squared residual over every entry.
    pub unmasked_loss: f64,
    /// Mean squared residual over the left (target) half.
    pub target_half: f64,
    /// Mean squared residual over the right (reference) half.
    pub reference_half: f64,
}

impl LossReport {
    /// The value being minimised under `mode`.
    pub fn objective(&self) -> f64 {
        match self.mode {
            LossMode::Masked => self.masked_loss,
            LossMode::Full => self.unmasked_loss,
        }
    }
}

fn check_pair(z0: &LatentGrid, z1: &LatentGrid, mask: &SpatialMask) -> Result<()> {
    if z0.shape() != z1.shape() {
        return Err(Error::Dimension(format!(
            "z0 {:?} vs z1 {:?}",
            z0.shape(),
            z1.shape()
        )));
    }
    if z0.width() % 2 != 0 {
        return Err(Error::Dimension(format!("width {} is not 2W", z0.width())));
    }
    if mask.height() != z0.height() || mask.width() != z0.width() {
        return Err(Error::Dimension(format!(
            "mask {}x{} vs latent {}x{}",
            mask.height(),
            mask.width(),
            z0.height(),
            z0.width()
        )));
    }
    Ok(())
}

/// The model input for a training example: the interpolated grid, with the
/// right half reset to the clean reference under [`ReferenceNoising::Clean`].
pub fn training_input(
    z0: &LatentGrid,
    z1: &LatentGrid,
    t: f64,
    noising: ReferenceNoising,
) -> Result<LatentGrid> {
    let mut z_t = interpolate(z0, z1, t)?.z_t;
    if noising == ReferenceNoising::Clean {
        clamp_reference_in_place(&mut z_t, &z0.reference_half()?)?;
    }
    Ok(z_t)
}

/// Loss report and `∂objective/∂v` for a velocity prediction `v`.
pub fn residual_loss(
    z0: &LatentGrid,
    z1: &LatentGrid,
    v: &LatentGrid,
    mask: &SpatialMask,
    mode: LossMode,
) -> Result<(LossReport, LatentGrid)> {
    check_pair(z0, z1, mask)?;
    if v.shape() != z0.shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs latent {:?}",
            v.shape(),
            z0.shape()
        )));
    }
    let (h, w2, c) = z0.shape();
    let w = w2 / 2;
    let mut residual = LatentGrid::zeros(h, w2, c);
    let (mut masked_sum, mut all_sum, mut tgt_sum, mut ref_sum) = (0.0, 0.0, 0.0, 0.0);
    let mut masked_count = 0usize;
    for i in 0..h {
        for j in 0..w2 {
            let mu = if mask.get(i, j) { 1.0 } else { 0.0 };
            masked_count += mask.get(i, j) as usize;
            for ch in 0..c {
                let k = z0.index(i, j, ch);
                let r = z0.data()[k] - z1.data()[k] - v.data()[k];
                residual.data_mut()[k] = r;
                let sq = r * r;
                masked_sum += mu * sq;
                all_sum += sq;
                if j < w {
                    tgt_sum += sq;
                } else {
                    ref_sum += sq;
                }
            }
        }
    }
    let half = (h * w * c) as f64;
    let masked_n = (masked_count * c) as f64;
    let all_n = (h * w2 * c) as f64;
    let report = LossReport {
        mode,
        masked_loss: if masked_count == 0 {
            0.0
        } else {
            masked_sum / masked_n
        },
        unmasked_loss: all_sum / all_n,
        target_half: tgt_sum / half,
        reference_half: ref_sum / half,
    };
    // d/dv of mean(μ r²) = −2 μ r / n
    let mut grad = residual;
    match mode {
        LossMode::Masked => {
            let s = if masked_count == 0 {
                0.0
            } else {
                -2.0 / masked_n
            };
            for i in 0..h {
                for j in 0..w2 {
                    let mu = if mask.get(i, j) { s } else { 0.0 };
                    for ch in 0..c {
                        let k = grad.index(i, j, ch);
                        grad.data_mut()[k] *= mu;
                    }
                }
            }
        }
        LossMode::Full => grad.data_mut().iter_mut().for_each(|r| *r *= -2.0 / all_n),
    }
    Ok((report, grad))
}

/// Evaluates the flow-matching objective for one `(z0, z1, t)` draw.
pub fn masked_cfm_loss(
    z0: &LatentGrid,
    z1: &LatentGrid,
    t: f64,
    text: &TextCondition,
    mask: &SpatialMask,
    model: &impl VelocityField,
    cfg: LossConfig,
) -> Result<LossReport> {
    check_pair(z0, z1, mask)?;
    let z_t = training_input(z0, z1, t, cfg.reference_noising)?;
    let v = model.velocity(&z_t, t, text)?;
    Ok(residual_loss(z0, z1, &v, mask, cfg.mode)?.0)
}

/// Loss and gradients of the objective w.r.t. the `trainable` parameters.
#[allow(clippy::too_many_arguments)]
pub fn loss_gradients(
    z0: &LatentGrid,
    z1: &LatentGrid,
    t: f64,
    text: &TextCondition,
    mask: &SpatialMask,
    model: &Dit<'_>,
    cfg: LossConfig,
    trainable: Trainable,
) -> Result<(LossReport, GradSet)> {
    check_pair(z0, z1, mask)?;
    let z_t = training_input(z0, z1, t, cfg.reference_noising)?;
    let trace = model.trace(&z_t, text, t, trainable)?;
    let v = trace.velocity()?;
    let (report, dv) = residual_loss(z0, z1, &v, mask, cfg.mode)?;
    let grads = trace.backward(&dv, model.params(), model.lora())?;
    Ok((report, grads))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub reference_noising: ReferenceNoising,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 32,
            reference_noising: ReferenceNoising::Clean,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler.steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Noise the sampler starts the target half from.
pub fn initial_noise(reference: &LatentGrid, seed: u64) -> Result<LatentGrid> {
    let (h, w, c) = reference.shape();
    sample_noise(h, w, c, seed)
}

fn reference_at(
    reference: &LatentGrid,
    ref_noise: Option<&LatentGrid>,
    t: f64,
) -> Result<LatentGrid> {
    match ref_noise {
        None => Ok(reference.clone()),
        Some(n) => Ok(interpolate(reference, n, t)?.z_t),
    }
}

/// Generates a target for `reference` by forward Euler from `t = 0` to 1.
pub fn sample(
    reference: &LatentGrid,
    text: &TextCondition,
    model: &impl VelocityField,
    cfg: &SamplerConfig,
) -> Result<LatentGrid> {
    sample_traced(reference, text, model, cfg, |_, _, _| {})
}

/// [`sample`], calling `observe(step, t, z)` on the initial state and after
/// every step (post-clamp).
pub fn sample_traced(
    reference: &LatentGrid,
    text: &TextCondition,
    model: &impl VelocityField,
    cfg: &SamplerConfig,
    mut observe: impl FnMut(usize, f64, &LatentGrid),
) -> Result<LatentGrid> {
    cfg.validate()?;
    if !reference.is_finite() {
        return Err(Error::Numeric(
            "reference contains non-finite values".into(),
        ));
    }
    let target_noise = initial_noise(reference, cfg.seed)?;
    let ref_noise = match cfg.reference_noising {
        ReferenceNoising::Clean => None,
        ReferenceNoising::Noised => {
            let (h, w, c) = reference.shape();
            Some(sample_noise(
                h,
                w,
                c,
                seed::derive(cfg.seed, &[0x5245_4621]),
            )?)
        }
    };
    let mut z = concat_width(
        &target_noise,
        &reference_at(reference, ref_noise.as_ref(), 0.0)?,
    )?;
    observe(0, 0.0, &z);
    let n = cfg.steps;
    let dt = 1.0 / n as f64;
    for k in 0..n {
        let t = k as f64 / n as f64;
        let v = model.velocity(&z, t, text).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("sampler step {k}: {m}")),
            other => other,
        })?;
        z.axpy(dt, &v);
        let t_next = (k + 1) as f64 / n as f64;
        clamp_reference_in_place(
            &mut z,
            &reference_at(reference, ref_noise.as_ref(), t_next)?,
        )?;
        if !z.is_finite() {
            return Err(Error::Numeric(format!(
                "sampler step {k}: non-finite state"
            )));
        }
        observe(k + 1, t_next, &z);
    }
    z.target_half()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latents::build_mask;

    struct Fixed(LatentGrid);

    impl VelocityField for Fixed {
        fn velocity(&self, _: &LatentGrid, _: f64, _: &TextCondition) -> Result<LatentGrid> {
            Ok(self.0.clone())
        }
    }

    fn text() -> TextCondition {
        TextCondition::Tokens(vec![0; 4])
    }

    fn pair() -> (LatentGrid, LatentGrid) {
        let z0 = sample_noise(3, 4, 2, 1).unwrap();
        let z1 = sample_noise(3, 4, 2, 2).unwrap();
        (z0, z1)
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let (z0, z1) = pair();
        let m = build_mask(3, 2).unwrap();
        let model = Fixed(z0.sub(&z1));
        for mode in [LossMode::Masked, LossMode::Full] {
            let cfg = LossConfig {
                mode,
                reference_noising: ReferenceNoising::Noised,
            };
            let r = masked_cfm_loss(&z0, &z1, 0.4, &text(), &m, &model, cfg).unwrap();
            assert_eq!(r.objective(), 0.0);
        }
    }

    #[test]
    fn wrong_reference_half_only_hurts_full_loss() {
        let (z0, z1) = pair();
        let m = build_mask(3, 2).unwrap();
        let mut v = z0.sub(&z1);
        for i in 0..3 {
            for j in 2..4 {
                v.set(i, j, 0, 5.0);
            }
        }
        let r =
            masked_cfm_loss(&z0, &z1, 0.4, &text(), &m, &Fixed(v), LossConfig::default()).unwrap();
        assert_eq!(r.masked_loss, 0.0);
        assert!(r.unmasked_loss > 0.0);
        assert_eq!(r.masked_loss, r.target_half);
    }

    #[test]
    fn all_ones_mask_equals_full_loss_bitwise() {
        let (z0, z1) = pair();
        let v = sample_noise(3, 4, 2, 3).unwrap();
        let (r, _) =
            residual_loss(&z0, &z1, &v, &SpatialMask::ones(3, 4), LossMode::Masked).unwrap();
        assert_eq!(r.masked_loss.to_bits(), r.unmasked_loss.to_bits());
    }

    #[test]
    fn full_loss_decomposes_into_halves() {
        let (z0, z1) = pair();
        let v = sample_noise(3, 4, 2, 3).unwrap();
        let (r, _) =
            residual_loss(&z0, &z1, &v, &build_mask(3, 2).unwrap(), LossMode::Full).unwrap();
        assert!((r.unmasked_loss - 0.5 * (r.target_half + r.reference_half)).abs() < 1e-12);
    }

    #[test]
    fn masked_gradient_is_zero_on_reference_half() {
        let (z0, z1) = pair();
        let v = sample_noise(3, 4, 2, 3).unwrap();
        let (_, g) =
            residual_loss(&z0, &z1, &v, &build_mask(3, 2).unwrap(), LossMode::Masked).unwrap();
        assert!(g.reference_half().unwrap().data().iter().all(|x| *x == 0.0));
        assert!(g.target_half().unwrap().data().iter().any(|x| *x != 0.0));
    }

    #[test]
    fn mask_shape_checked() {
        let (z0, z1) = pair();
        let v = z0.clone();
        assert!(residual_loss(&z0, &z1, &v, &build_mask(3, 3).unwrap(), LossMode::Masked).is_err());
    }

    #[test]
    fn constant_field_sampler_is_exact_and_clamps() {
        let reference = sample_noise(2, 3, 2, 10).unwrap();
        let target = sample_noise(2, 3, 2, 11).unwrap();
        let cfg = SamplerConfig {
            steps: 7,
            seed: 5,
            ..SamplerConfig::default()
        };
        let z1 = concat_width(&initial_noise(&reference, cfg.seed).unwrap(), &reference).unwrap();
        let z0 = concat_width(&target, &reference).unwrap();
        let model = Fixed(z0.sub(&z1));
        let mut worst = 0.0f64;
        let out = sample_traced(&reference, &text(), &model, &cfg, |_, _, z| {
            worst = worst.max(z.reference_half().unwrap().max_abs_diff(&reference));
        })
        .unwrap();
        assert_eq!(worst, 0.0);
        assert!(out.max_abs_diff(&target) < 1e-12);
        assert!(sample(
            &reference,
            &text(),
            &model,
            &SamplerConfig { steps: 0, ..cfg }
        )
        .is_err());
    }

    #[test]
    fn noised_sampler_ends_on_clean_reference() {
        let reference = sample_noise(2, 2, 1, 1).unwrap();
        let model = Fixed(LatentGrid::zeros(2, 4, 1));
        let cfg = SamplerConfig {
            steps: 4,
            reference_noising: ReferenceNoising::Noised,
            seed: 2,
        };
        let mut last = None;
        sample_traced(&reference, &text(), &model, &cfg, |k, _, z| {
            if k == 4 {
                last = Some(z.reference_half().unwrap());
            }
        })
        .unwrap();
        assert!(last.unwrap().max_abs_diff(&reference) < 1e-15);
    }
}
