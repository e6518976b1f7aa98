use std::path::Path;

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};
use trustkit_core::data::{ScenarioConfig, SplitRatios, DEFAULT_CAL_SIZE, DEFAULT_MODELS, DEFAULT_RESPLITS};
use trustkit_core::pipeline::ModelConfig;
use trustkit_core::trust::{OodScoreKind, ThresholdPolicy, DEFAULT_DELTA, DEFAULT_DOMINANCE_CUTOFF, DEFAULT_EAT_K};

/// Everything a run reads from `--config`. Every section and key is
/// optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub split: SplitConfig,
    pub eat: EatConfig,
    pub ood: OodConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig {
                n_patients: 600,
                ..ScenarioConfig::default()
            },
            model: ModelConfig::default(),
            split: SplitConfig::default(),
            eat: EatConfig::default(),
            ood: OodConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: SplitRatios,
    pub n_models: usize,
    pub n_resplits: usize,
    pub cal_size: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: SplitRatios::default(),
            n_models: DEFAULT_MODELS,
            n_resplits: DEFAULT_RESPLITS,
            cal_size: DEFAULT_CAL_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EatMode {
    Cluster,
    Threshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EatConfig {
    pub mode: EatMode,
    pub k: usize,
    pub dominance_cutoff: f64,
    /// Target elimination rate in threshold mode.
    pub rate: f64,
}

impl Default for EatConfig {
    fn default() -> Self {
        Self {
            mode: EatMode::Cluster,
            k: DEFAULT_EAT_K,
            dominance_cutoff: DEFAULT_DOMINANCE_CUTOFF,
            rate: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodConfig {
    pub ratios: Vec<f64>,
    pub n_seeds: usize,
    pub n_resplits: usize,
    pub cal_size: usize,
    pub split: SplitRatios,
    pub score_kind: OodScoreKind,
    pub delta: usize,
    pub gate_policy: ThresholdPolicy,
    pub n_tune_ood: usize,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.25, 0.5, 1.0, 2.0],
            n_seeds: 5,
            n_resplits: 100,
            cal_size: DEFAULT_CAL_SIZE,
            split: SplitRatios {
                train: 4.0 / 7.0,
                val: 1.0 / 7.0,
                caltest: 2.0 / 7.0,
            },
            score_kind: OodScoreKind::Uncertainty,
            delta: DEFAULT_DELTA,
            gate_policy: ThresholdPolicy::TargetTpr(1.0),
            n_tune_ood: 100,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: Self = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("config: reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("config: parsing {}", p.display()))?
            }
            None => Self::default(),
        };
        cfg.scenario.validate().context("config: scenario")?;
        cfg.split.ratios.validate().context("config: split")?;
        ensure!(cfg.split.n_models >= 1, "config: split.n_models must be at least 1");
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_tables_keep_defaults() {
        let cfg: RunConfig = toml::from_str("[eat]\nmode = \"threshold\"\n[ood]\nratios = [0.5]\n").unwrap();
        assert_eq!(cfg.eat.mode, EatMode::Threshold);
        assert_eq!(cfg.eat.k, DEFAULT_EAT_K);
        assert_eq!(cfg.ood.ratios, vec![0.5]);
        assert_eq!(cfg.scenario.n_patients, 600);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[split]\ncal = 3\n").is_err());
    }
}
