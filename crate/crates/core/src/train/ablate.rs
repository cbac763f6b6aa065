use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalConfig, EvalItem};
use super::{train_adapters, train_base, RunRecord, Runtime, TrainConfig};
use crate::charis::Backends;
use crate::dit::LoraPolicy;
use crate::error::Result;
use crate::flow::LossMode;
use crate::latents::LatentPair;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    LossMode,
    LoraPolicy,
}

impl std::str::FromStr for AblationAxis {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss_mode" | "loss-mode" => Ok(AblationAxis::LossMode),
            "lora_policy" | "lora-policy" => Ok(AblationAxis::LoraPolicy),
            other => Err(crate::Error::Config(format!(
                "unknown ablation axis `{other}`"
            ))),
        }
    }
}

impl AblationAxis {
    /// `(variant name, config)` for each setting along the axis.
    pub fn variants(self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        match self {
            AblationAxis::LossMode => [LossMode::Masked, LossMode::Full]
                .into_iter()
                .map(|m| {
                    (
                        m.to_string(),
                        TrainConfig {
                            loss_mode: m,
                            ..base.clone()
                        },
                    )
                })
                .collect(),
            AblationAxis::LoraPolicy => LoraPolicy::ALL
                .into_iter()
                .map(|p| {
                    let mut c = base.clone();
                    c.lora.policy = p;
                    (p.to_string(), c)
                })
                .collect(),
        }
    }
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub id: Option<f64>,
    pub prompt: Option<f64>,
    pub color: Option<f64>,
    pub quality: Option<f64>,
    pub charis: f64,
    pub color_gt: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub reference_half_initial: f64,
    pub reference_half_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub axis: AblationAxis,
    pub runs: Vec<(String, RunRecord)>,
    pub rows: Vec<AblationRow>,
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_default()
}

impl AblationResult {
    pub const CSV_HEADER: &'static str =
        "variant,s_id,s_prompt,s_color,s_quality,charis,color_gt,initial_loss,final_loss,reference_half_initial,reference_half_final";

    pub fn table_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{:.4},{:.4},{:.6},{:.6},{:.6},{:.6}\n",
                r.variant,
                cell(r.id),
                cell(r.prompt),
                cell(r.color),
                cell(r.quality),
                r.charis,
                r.color_gt,
                r.initial_loss,
                r.final_loss,
                r.reference_half_initial,
                r.reference_half_final
            ));
        }
        s
    }
}

/// Trains every variant along `axis` from one shared base (identical
/// seeds and data order) and scores each on `eval_items`.
pub fn ablate(
    data: &[LatentPair],
    eval_items: &[EvalItem],
    base_cfg: &TrainConfig,
    axis: AblationAxis,
    eval_cfg: &EvalConfig,
    backends: &Backends,
    workers: usize,
) -> Result<AblationResult> {
    let variants = axis.variants(base_cfg);
    for (_, c) in &variants {
        c.validate()?;
    }
    let rt = Runtime::with_workers(workers);
    let base = train_base(data, base_cfg, &rt)?;
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for (name, cfg) in variants {
        let mut rt = Runtime::with_workers(workers);
        let mut out = train_adapters(data, &base, &cfg, &mut rt)?;
        let eval_cfg = EvalConfig {
            sampler: crate::flow::SamplerConfig {
                reference_noising: cfg.reference_noising,
                ..eval_cfg.sampler.clone()
            },
            ..eval_cfg.clone()
        };
        let (_, summary) = evaluate(eval_items, &out.checkpoint, &eval_cfg, backends, workers)?;
        let rec = &out.record;
        rows.push(AblationRow {
            variant: name.clone(),
            id: summary.id,
            prompt: summary.prompt,
            color: summary.color,
            quality: summary.quality,
            charis: summary.composite,
            color_gt: summary.color_gt,
            initial_loss: rec.probe_initial.loss,
            final_loss: rec.probe_final.loss,
            reference_half_initial: rec.probe_initial.reference_half,
            reference_half_final: rec.probe_final.reference_half,
        });
        out.record.eval = Some(summary);
        runs.push((name, out.record));
    }
    Ok(AblationResult { axis, runs, rows })
}
