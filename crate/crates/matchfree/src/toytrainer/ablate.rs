//! Hyper-parameter sweeps mirroring the published ablation grids:
//! α ∈ {0.5, 1, 2} for the correspondence loss weight and the three
//! normalization modes {none, sum1, max}. A ρ sweep is included as well.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, Assigner};
use super::scene::{eval_scene_seed, generate_scene, PrototypePool};
use super::train::{train, Objective};
use super::ToyConfig;
use crate::error::{Error, Result};
use crate::gtprobe::ProbeConfig;
use crate::losses::LossConfig;
use crate::scg::NormMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateParam {
    Alpha,
    Rho,
    Norm,
}

impl FromStr for AblateParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(AblateParam::Alpha),
            "rho" => Ok(AblateParam::Rho),
            "norm" => Ok(AblateParam::Norm),
            other => Err(Error::validation(format!(
                "unknown ablation parameter '{other}' (expected alpha, rho, or norm)"
            ))),
        }
    }
}

impl fmt::Display for AblateParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblateParam::Alpha => "alpha",
            AblateParam::Rho => "rho",
            AblateParam::Norm => "norm",
        })
    }
}

pub const ALPHA_GRID: [f64; 3] = [0.5, 1.0, 2.0];
pub const RHO_GRID: [f64; 3] = [0.3, 0.5, 0.7];
pub const NORM_GRID: [NormMode; 3] = [NormMode::None, NormMode::Sum1, NormMode::Max];

/// One metric row per (setting, seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub param: String,
    pub value: String,
    pub seed: u64,
    pub purity: f64,
    pub mean_matched_iou: f64,
    pub class_accuracy: f64,
    pub mean_surviving_per_gt: f64,
    pub final_l_total: f64,
}

/// Run a match-free training per sweep value per seed and evaluate on a
/// held-out scene set.
pub fn run_ablation(
    param: AblateParam,
    toy: &ToyConfig,
    base_loss: &LossConfig,
    probe_cfg: &ProbeConfig,
    seeds: &[u64],
    eval_scenes: usize,
) -> Result<Vec<AblationRow>> {
    let values: Vec<(String, LossConfig)> = match param {
        AblateParam::Alpha => ALPHA_GRID
            .iter()
            .map(|&a| (format!("{a}"), LossConfig { alpha: a, ..base_loss.clone() }))
            .collect(),
        AblateParam::Rho => RHO_GRID
            .iter()
            .map(|&r| {
                let mut cfg = base_loss.clone();
                cfg.scg.rho = r;
                (format!("{r}"), cfg)
            })
            .collect(),
        AblateParam::Norm => NORM_GRID
            .iter()
            .map(|&mode| {
                let mut cfg = base_loss.clone();
                cfg.scg.norm_mode = mode;
                let name = match mode {
                    NormMode::None => "none",
                    NormMode::Sum1 => "sum1",
                    NormMode::Max => "max",
                };
                (name.to_string(), cfg)
            })
            .collect(),
    };

    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for (value_name, loss_cfg) in &values {
        for &seed in seeds {
            let outcome = train(Objective::MatchFree, toy, loss_cfg, probe_cfg, seed)?;
            let pool = PrototypePool::generate(toy)?;
            let held_out: Vec<_> = (0..eval_scenes as u64)
                .map(|i| generate_scene(toy, &pool, eval_scene_seed(seed ^ 0xAB1A_7E00, i)))
                .collect::<Result<_>>()?;
            let metrics = evaluate(
                &outcome.state.model,
                &held_out,
                &Assigner::Probe {
                    params: outcome.state.probe.as_ref().unwrap(),
                    scg: &loss_cfg.scg,
                },
            )?;
            rows.push(AblationRow {
                param: param.to_string(),
                value: value_name.clone(),
                seed,
                purity: metrics.purity,
                mean_matched_iou: metrics.mean_matched_iou,
                class_accuracy: metrics.class_accuracy,
                mean_surviving_per_gt: metrics.mean_surviving_per_gt,
                final_l_total: outcome.log.last().map(|r| r.l_total).unwrap_or(0.0),
            });
        }
    }
    Ok(rows)
}

/// CSV with one row per sweep cell.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "param,value,seed,purity,mean_matched_iou,class_accuracy,mean_surviving_per_gt,final_l_total\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.param,
            r.value,
            r.seed,
            r.purity,
            r.mean_matched_iou,
            r.class_accuracy,
            r.mean_surviving_per_gt,
            r.final_l_total
        ));
    }
    out
}
