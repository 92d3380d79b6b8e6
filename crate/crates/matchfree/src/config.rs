//! Top-level JSON configuration document.
//!
//! Strict parsing: unknown keys are rejected at every level so a typo in an
//! ablation sweep cannot silently fall back to a default. Every section can
//! be omitted entirely, in which case its documented defaults apply
//! (cost weights λ_cls=2, λ_L1=5, λ_iou=2; sparsity ρ=0.5; loss balance
//! α=β=1).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::BenchSpec;
use crate::cost::{ClassificationMode, CostWeights, GroundTruthSet};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::gtprobe::ProbeConfig;
use crate::losses::LossConfig;
use crate::scg::ScgConfig;
use crate::toytrainer::ToyConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Loss-balance and gradient-routing knobs (the cost weights and SCG
/// settings live in their own sections).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    pub detach_cost_in_lw: bool,
    pub detach_corr_in_lq: bool,
    pub detach_preds_in_probe: bool,
    pub per_gt_mean: bool,
    pub classification: ClassificationMode,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossConfig::default();
        LossSection {
            alpha: d.alpha,
            beta: d.beta,
            detach_cost_in_lw: d.detach_cost_in_lw,
            detach_corr_in_lq: d.detach_corr_in_lq,
            detach_preds_in_probe: d.detach_preds_in_probe,
            per_gt_mean: d.per_gt_mean,
            classification: d.classification,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub version: u32,
    pub cost: CostWeights,
    pub scg: ScgConfig,
    pub loss: LossSection,
    pub probe: ProbeConfig,
    pub toy: ToyConfig,
    pub bench: BenchSpec,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {})",
                self.version, CONFIG_VERSION
            )));
        }
        self.cost.validate()?;
        self.scg.validate()?;
        self.probe.validate()?;
        self.toy.validate()?;
        self.bench.validate()?;
        self.loss_config().validate()?;
        if self.toy.num_classes != self.bench.num_classes {
            // allowed: the bench sizes itself independently
        }
        Ok(())
    }

    /// Assemble the runtime loss configuration from its sections.
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.loss.alpha,
            beta: self.loss.beta,
            detach_cost_in_lw: self.loss.detach_cost_in_lw,
            detach_corr_in_lq: self.loss.detach_corr_in_lq,
            detach_preds_in_probe: self.loss.detach_preds_in_probe,
            per_gt_mean: self.loss.per_gt_mean,
            weights: self.cost,
            classification: self.loss.classification,
            scg: self.scg,
        }
    }
}

/// On-disk scene file: `{"gts": [{"label": 0, "box": [cx, cy, w, h]}, ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub gts: Vec<SceneEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub label: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

impl SceneFile {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_ground_truths(&self) -> Result<GroundTruthSet> {
        let labels = self.gts.iter().map(|e| e.label).collect();
        let boxes = self
            .gts
            .iter()
            .map(|e| BBox::new(e.bbox[0], e.bbox[1], e.bbox[2], e.bbox[3]))
            .collect::<Result<Vec<_>>>()?;
        GroundTruthSet::new(labels, boxes)
    }

    pub fn from_ground_truths(gts: &GroundTruthSet) -> Self {
        SceneFile {
            gts: gts
                .labels()
                .iter()
                .zip(gts.boxes())
                .map(|(&label, b)| SceneEntry { label, bbox: b.as_array() })
                .collect(),
        }
    }
}
