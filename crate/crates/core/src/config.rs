//! Scenario configuration: a single JSON document describing the bundle,
//! grid, conformal preset, flow controls and outputs. Unknown keys are
//! rejected and every validation violation is reported at once.

use crate::bundle::{FlatBundleSpec, JordanBlock};
use crate::error::{Error, Result};
use crate::flow::{FlowOptions, InitialData, Strategy};
use crate::grid::ConformalPreset;
use crate::linalg::C64;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub bundle: BundleConfig,
    pub grid: GridConfig,
    pub conformal: ConformalPreset,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleConfig {
    pub rank: usize,
    pub punctures: PuncturesConfig,
    pub weights: WeightsConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PuncturesConfig {
    pub zero: BlocksConfig,
    pub infinity: BlocksConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlocksConfig {
    pub blocks: Vec<BlockConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub kappa_re: f64,
    pub kappa_im: f64,
    pub dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    pub zero: Vec<f64>,
    pub infinity: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Cylinder half-length X; alternatively an increasing schedule for
    /// continuation runs (the largest X is used by single-domain commands).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_half: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_schedule: Option<Vec<f64>>,
    pub nx: usize,
    pub ny: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub tol: f64,
    pub t_max: f64,
    pub max_steps: usize,
    pub kappa_cfl: f64,
    pub det_renormalize: bool,
    pub strategy: StrategyConfig,
    pub record_every: usize,
    pub sigma_schedule: Vec<f64>,
    pub round_threshold: f64,
    pub plateau_threshold: f64,
    pub initial: InitialConfig,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            tol: 1e-8,
            t_max: 1e4,
            max_steps: 2_000_000,
            kappa_cfl: 0.2,
            det_renormalize: false,
            strategy: StrategyConfig::Auto,
            record_every: 25,
            sigma_schedule: vec![1.0, 0.5, 0.25, 0.1, 0.05],
            round_threshold: 0.5,
            plateau_threshold: 0.01,
            initial: InitialConfig::Identity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyConfig {
    Explicit,
    Accelerated,
    Auto,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialConfig {
    Identity,
    SeededPerturbation { seed: u64, amplitude: f64 },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<String>,
    /// Which artifact families to write (empty = all the command's default).
    pub reports: Vec<String>,
}

impl ScenarioConfig {
    pub fn from_path(path: &Path) -> Result<ScenarioConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    pub fn from_str(text: &str) -> Result<ScenarioConfig> {
        let cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Collects every violation instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.bundle.rank == 0 {
            problems.push("bundle.rank: must be positive".into());
        }
        let zdims: usize = self.bundle.punctures.zero.blocks.iter().map(|b| b.dim).sum();
        let idims: usize = self
            .bundle
            .punctures
            .infinity
            .blocks
            .iter()
            .map(|b| b.dim)
            .sum();
        if zdims != self.bundle.rank {
            problems.push(format!(
                "bundle.punctures.zero: block dims sum to {zdims}, expected rank {}",
                self.bundle.rank
            ));
        }
        if idims != self.bundle.rank {
            problems.push(format!(
                "bundle.punctures.infinity: block dims sum to {idims}, expected rank {}",
                self.bundle.rank
            ));
        }
        if self.bundle.weights.zero.len() != self.bundle.punctures.zero.blocks.len() {
            problems.push(format!(
                "bundle.weights.zero: {} entries for {} blocks",
                self.bundle.weights.zero.len(),
                self.bundle.punctures.zero.blocks.len()
            ));
        }
        if self.bundle.weights.infinity.len() != self.bundle.punctures.infinity.blocks.len() {
            problems.push(format!(
                "bundle.weights.infinity: {} entries for {} blocks",
                self.bundle.weights.infinity.len(),
                self.bundle.punctures.infinity.blocks.len()
            ));
        }
        match (&self.grid.x_half, &self.grid.x_schedule) {
            (None, None) => {
                problems.push("grid: one of x_half or x_schedule is required".into())
            }
            (Some(x), _) if *x <= 1.0 => {
                problems.push(format!("grid.x_half: must be > 1, got {x}"))
            }
            (_, Some(s)) if s.len() < 3 || s.windows(2).any(|w| w[1] <= w[0]) => {
                problems.push("grid.x_schedule: needs at least 3 increasing values".into())
            }
            _ => {}
        }
        if self.grid.nx < 8 {
            problems.push(format!("grid.nx: must be >= 8, got {}", self.grid.nx));
        }
        if self.grid.ny < 8 || self.grid.ny % 2 != 0 {
            problems.push(format!("grid.ny: must be even and >= 8, got {}", self.grid.ny));
        }
        if let ConformalPreset::LoftinType { q } = &self.conformal {
            if *q < 0.0 {
                problems.push(format!("conformal.q: must be >= 0, got {q}"));
            }
        }
        if !(self.flow.tol > 0.0) {
            problems.push(format!("flow.tol: must be positive, got {}", self.flow.tol));
        }
        if !(self.flow.kappa_cfl > 0.0 && self.flow.kappa_cfl <= 1.0) {
            problems.push(format!(
                "flow.kappa_cfl: must lie in (0, 1], got {}",
                self.flow.kappa_cfl
            ));
        }
        if self.flow.sigma_schedule.is_empty()
            || self
                .flow
                .sigma_schedule
                .iter()
                .any(|s| !(*s > 0.0 && *s <= 1.0))
            || self.flow.sigma_schedule.windows(2).any(|w| w[1] >= w[0])
        {
            problems.push("flow.sigma_schedule: must be a decreasing list in (0, 1]".into());
        }
        if !(self.flow.round_threshold > 0.0 && self.flow.round_threshold < 1.0) {
            problems.push("flow.round_threshold: must lie in (0, 1)".into());
        }
        if !(self.flow.plateau_threshold > 0.0) {
            problems.push("flow.plateau_threshold: must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn to_bundle(&self) -> Result<FlatBundleSpec> {
        let mk = |blocks: &[BlockConfig]| -> Vec<JordanBlock> {
            blocks
                .iter()
                .map(|b| JordanBlock::new(C64::new(b.kappa_re, b.kappa_im), b.dim))
                .collect()
        };
        FlatBundleSpec::new(
            self.bundle.rank,
            mk(&self.bundle.punctures.zero.blocks),
            mk(&self.bundle.punctures.infinity.blocks),
            self.bundle.weights.zero.clone(),
            self.bundle.weights.infinity.clone(),
        )
    }

    /// The single-domain half-length (largest of a schedule).
    pub fn x_half(&self) -> f64 {
        match (&self.grid.x_half, &self.grid.x_schedule) {
            (Some(x), _) => *x,
            (None, Some(s)) => *s.last().unwrap(),
            (None, None) => unreachable!("validated"),
        }
    }

    pub fn flow_options(&self) -> FlowOptions {
        FlowOptions {
            kappa_cfl: self.flow.kappa_cfl,
            tol: self.flow.tol,
            t_max: self.flow.t_max,
            max_steps: self.flow.max_steps,
            det_renormalize: self.flow.det_renormalize,
            strategy: match self.flow.strategy {
                StrategyConfig::Explicit => Strategy::Explicit,
                StrategyConfig::Accelerated => Strategy::Accelerated,
                StrategyConfig::Auto => Strategy::Auto,
            },
            record_every: self.flow.record_every,
            initial: match &self.flow.initial {
                InitialConfig::Identity => InitialData::Identity,
                InitialConfig::SeededPerturbation { seed, amplitude } => {
                    InitialData::SeededPerturbation {
                        seed: *seed,
                        amplitude: *amplitude,
                    }
                }
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "bundle": {
            "rank": 1,
            "punctures": {
                "zero": {"blocks": [{"kappa_re": 0.0, "kappa_im": 0.0, "dim": 1}]},
                "infinity": {"blocks": [{"kappa_re": 0.0, "kappa_im": 0.0, "dim": 1}]}
            },
            "weights": {"zero": [0.25], "infinity": [0.25]}
        },
        "grid": {"x_half": 5.0, "nx": 64, "ny": 16},
        "conformal": {"kind": "fubini-study"}
    }"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = ScenarioConfig::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.bundle.rank, 1);
        let b = cfg.to_bundle().unwrap();
        assert_eq!(b.rank, 1);
        assert_eq!(cfg.flow.sigma_schedule, vec![1.0, 0.5, 0.25, 0.1, 0.05]);
    }

    #[test]
    fn odd_ny_rejected_naming_the_field() {
        let text = MINIMAL.replace("\"ny\": 16", "\"ny\": 15");
        match ScenarioConfig::from_str(&text) {
            Err(Error::Validation(problems)) => {
                assert!(problems.iter().any(|p| p.contains("grid.ny")), "{problems:?}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn weight_length_mismatch_rejected() {
        let text = MINIMAL.replace("\"zero\": [0.25]", "\"zero\": [0.25, 0.5]");
        match ScenarioConfig::from_str(&text) {
            Err(Error::Validation(problems)) => {
                assert!(problems.iter().any(|p| p.contains("weights.zero")));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = MINIMAL.replace("\"grid\":", "\"surprise\": 1, \"grid\":");
        assert!(matches!(ScenarioConfig::from_str(&text), Err(Error::Parse(_))));
    }
}
