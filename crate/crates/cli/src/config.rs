// SPDX-License-Identifier: MIT OR Apache-2.0

//! TOML run configuration. Unknown keys are rejected and every seed must be
//! written out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use moesteer::analysis::{SweepGrid, DEFAULT_DEGENERACY_THRESHOLD};
use moesteer::moe::CircuitSpec;
use moesteer::steering::OptimizeConfig;
use moesteer::surrogate::SurrogateConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub fixture: FixtureSection,
    pub collect: CollectSection,
    pub surrogate: SurrogateSection,
    pub steering: SteeringSection,
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

/// Artifact locations. Relative paths resolve against the config file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub model: PathBuf,
    pub traces: PathBuf,
    pub surrogate: PathBuf,
    pub mask: PathBuf,
    pub apply_report: PathBuf,
    pub sweep_csv: PathBuf,
    pub heatmap_csv: PathBuf,
    pub utility_report: PathBuf,
}

/// Planted-circuit geometry. Optional fields fall back to the rotating
/// circuit's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSection {
    pub layers: usize,
    pub experts: usize,
    pub top_k: usize,
    pub seed: u64,
    pub content_tokens: Option<usize>,
    pub margin: Option<f64>,
    pub query_gain: Option<f64>,
    pub utility_gain: Option<f64>,
    pub gate_noise: Option<f64>,
    pub junk_bias: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectSection {
    pub prompts_per_class: usize,
    /// Drop surplus traces of the larger class.
    #[serde(default)]
    pub balance: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringSection {
    /// Behavior label to steer toward.
    pub target: u8,
    pub lambda: f64,
    pub tau: f64,
    pub alpha: f64,
    pub steps: usize,
    pub lr: f64,
    /// Non-target traces used for optimization (all if absent).
    pub optimize_traces: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub flip_prompts: usize,
    pub utility_samples: usize,
    #[serde(default = "default_threshold")]
    pub degeneracy_threshold: f64,
    pub seed: u64,
}

fn default_threshold() -> f64 {
    DEFAULT_DEGENERACY_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub taus: Vec<f64>,
    pub tau_fixed: f64,
    pub collapse_factor: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        let g = SweepGrid::default();
        Self {
            lambdas: g.lambdas,
            alphas: g.alphas,
            taus: g.taus,
            tau_fixed: g.tau_fixed,
            collapse_factor: g.collapse_factor,
        }
    }
}

impl RunConfig {
    /// Reads and validates a config file; paths are made absolute.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::read(path, e))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.paths.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Format(m));
        if self.steering.target > 1 {
            return bad(format!("steering.target must be 0 or 1, got {}", self.steering.target));
        }
        if !(self.steering.lambda >= 0.0 && self.steering.tau >= 0.0 && self.steering.alpha.is_finite()) {
            return bad("steering.lambda and steering.tau must be non-negative, alpha finite".into());
        }
        if self.eval.flip_prompts == 0 || self.eval.utility_samples == 0 {
            return bad("eval.flip_prompts and eval.utility_samples must be positive".into());
        }
        self.surrogate_config()
            .validate()
            .map_err(|e| CliError::Format(format!("surrogate section: {e}")))
    }

    /// Overrides every seed with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.fixture.seed = seed;
        self.collect.seed = seed;
        self.surrogate.seed = seed;
        self.steering.seed = seed;
        self.eval.seed = seed;
    }

    pub fn seeds(&self) -> serde_json::Value {
        serde_json::json!({
            "fixture": self.fixture.seed,
            "collect": self.collect.seed,
            "surrogate": self.surrogate.seed,
            "steering": self.steering.seed,
            "eval": self.eval.seed,
        })
    }

    pub fn circuit(&self) -> Result<CircuitSpec, CliError> {
        let f = &self.fixture;
        let mut spec = CircuitSpec::rotating(f.layers, f.experts, f.top_k)?;
        if let Some(n) = f.content_tokens {
            spec.content_tokens = n;
        }
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut spec.margin, f.margin);
        set(&mut spec.query_gain, f.query_gain);
        set(&mut spec.utility_gain, f.utility_gain);
        set(&mut spec.gate_noise, f.gate_noise);
        set(&mut spec.junk_bias, f.junk_bias);
        Ok(spec)
    }

    pub fn surrogate_config(&self) -> SurrogateConfig {
        let s = &self.surrogate;
        SurrogateConfig {
            embed_dim: s.embed_dim,
            hidden_dim: s.hidden_dim,
            epochs: s.epochs,
            lr: s.lr,
            batch_size: s.batch_size,
            train_fraction: s.train_fraction,
            seed: s.seed,
        }
    }

    pub fn optimize_config(&self) -> OptimizeConfig {
        let s = &self.steering;
        OptimizeConfig {
            lambda: s.lambda,
            steps: s.steps,
            lr: s.lr,
            seed: s.seed,
        }
    }

    pub fn grid(&self) -> SweepGrid {
        let s = &self.sweep;
        SweepGrid {
            lambdas: s.lambdas.clone(),
            alphas: s.alphas.clone(),
            taus: s.taus.clone(),
            tau_fixed: s.tau_fixed,
            collapse_factor: s.collapse_factor,
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.model,
            &mut self.traces,
            &mut self.surrogate,
            &mut self.mask,
            &mut self.apply_report,
            &mut self.sweep_csv,
            &mut self.heatmap_csv,
            &mut self.utility_report,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
