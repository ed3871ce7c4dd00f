// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::toynet::{EnvKind, NetConfig};

/// Where logits come from: a toy network built in-process, or a dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSourceConfig {
    Toy(NetConfig),
    Dump(PathBuf),
}

/// How the `v′` arm is built from `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// Uniform unit direction orthogonal to `v`.
    #[default]
    RandomOrthogonal,
    /// Unit direction orthogonal to `v` inside the common Jacobian null
    /// space of the evaluation prompts.
    ExactNull,
    /// `v′ = v`.
    Identity,
}

fn d_pairs() -> usize {
    50
}
fn d_eval() -> usize {
    100
}
fn d_samples() -> usize {
    10
}
fn d_gen_len() -> usize {
    16
}
fn d_alpha() -> f64 {
    1.0
}
fn d_seeds() -> usize {
    5
}
fn d_eps() -> f64 {
    crate::jacobian::DEFAULT_EPS
}
fn d_sigma() -> f64 {
    1.0
}
fn d_noise() -> f64 {
    0.1
}
fn d_boot() -> usize {
    1000
}
fn d_grid() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0]
}
fn d_envs() -> Vec<EnvKind> {
    EnvKind::ALL.to_vec()
}
fn d_cap() -> f64 {
    100.0
}
fn d_gauge_trials() -> usize {
    20
}
fn d_prompts() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model_source: ModelSourceConfig,
    #[serde(rename = "trait")]
    pub trait_label: String,
    /// Extra traits for the multi-environment protocol.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub traits: Vec<String>,
    #[serde(default = "d_pairs")]
    pub n_pairs: usize,
    #[serde(default = "d_eval")]
    pub n_eval_prompts: usize,
    #[serde(default = "d_samples")]
    pub samples_per_prompt: usize,
    /// Tokens drawn per toy generation.
    #[serde(default = "d_gen_len")]
    pub gen_len: usize,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_seeds")]
    pub n_seeds: usize,
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// Observation-noise scale for Fisher diagnostics.
    #[serde(default = "d_sigma")]
    pub sigma_probe: f64,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub perturbation: Perturbation,
    #[serde(default = "default_env")]
    pub env: EnvKind,
    #[serde(default = "d_noise")]
    pub noise_sigma: f64,
    /// Planted marker tokens per side; `max(1, V/8)` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub markers_per_side: Option<usize>,
    /// Marker file; toy runs plant markers when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<PathBuf>,
    #[serde(default = "d_boot")]
    pub n_boot: usize,
    #[serde(default = "d_grid")]
    pub alpha_grid: Vec<f64>,
    #[serde(default = "d_envs")]
    pub environments: Vec<EnvKind>,
    #[serde(default = "d_cap")]
    pub condition_cap: f64,
    /// Random `(x, v, α)` triples per gauge in the gauge check.
    #[serde(default = "d_gauge_trials")]
    pub gauge_trials: usize,
    /// Prompts analyzed by the null-space summary.
    #[serde(default = "d_prompts")]
    pub nullspace_prompts: usize,
}

fn default_env() -> EnvKind {
    EnvKind::Id
}

impl ExperimentConfig {
    /// Defaults around a toy network.
    pub fn toy(net: NetConfig, trait_label: &str) -> Self {
        Self {
            model_source: ModelSourceConfig::Toy(net),
            trait_label: trait_label.to_string(),
            traits: Vec::new(),
            n_pairs: d_pairs(),
            n_eval_prompts: d_eval(),
            samples_per_prompt: d_samples(),
            gen_len: d_gen_len(),
            alpha: d_alpha(),
            n_seeds: d_seeds(),
            eps: d_eps(),
            sigma_probe: d_sigma(),
            master_seed: 0,
            perturbation: Perturbation::default(),
            env: EnvKind::Id,
            noise_sigma: d_noise(),
            markers_per_side: None,
            probe: None,
            n_boot: d_boot(),
            alpha_grid: d_grid(),
            environments: d_envs(),
            condition_cap: d_cap(),
            gauge_trials: d_gauge_trials(),
            nullspace_prompts: d_prompts(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // dump and probe paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new("."));
        if let ModelSourceConfig::Dump(p) = &mut cfg.model_source {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = &mut cfg.probe {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_pairs", self.n_pairs),
            ("n_eval_prompts", self.n_eval_prompts),
            ("samples_per_prompt", self.samples_per_prompt),
            ("gen_len", self.gen_len),
            ("n_seeds", self.n_seeds),
            ("gauge_trials", self.gauge_trials),
            ("nullspace_prompts", self.nullspace_prompts),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::Config(format!("eps {} outside (0, 1)", self.eps)));
        }
        if !(self.sigma_probe > 0.0) {
            return Err(Error::Config("sigma_probe must be positive".into()));
        }
        if !self.alpha.is_finite() || self.alpha_grid.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config("steering strengths must be finite".into()));
        }
        if self.alpha_grid.is_empty() {
            return Err(Error::Config("alpha_grid must be nonempty".into()));
        }
        if self.environments.is_empty() {
            return Err(Error::Config("environments must be nonempty".into()));
        }
        if !(self.condition_cap > 1.0) {
            return Err(Error::Config("condition_cap must exceed 1".into()));
        }
        if self.n_boot < 100 {
            return Err(Error::Config("n_boot must be at least 100".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        if let ModelSourceConfig::Toy(net) = &self.model_source {
            net.validate()?;
        }
        Ok(())
    }

    /// Traits for multi-trait protocols: `traits` if given, else `[trait]`.
    pub fn trait_list(&self) -> Vec<String> {
        if self.traits.is_empty() {
            vec![self.trait_label.clone()]
        } else {
            self.traits.clone()
        }
    }

    /// First 16 hex digits of SHA-256 over the compact JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> NetConfig {
        serde_json::from_str(r#"{"seed":1,"d":8,"vocab":5,"layers":3,"inject_layer":1}"#).unwrap()
    }

    #[test]
    fn defaults_mirror_protocol() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"model_source":{"toy":{"seed":1,"d":8,"vocab":5,"layers":3,"inject_layer":1}},"trait":"formality"}"#)
                .unwrap();
        assert_eq!(cfg, ExperimentConfig::toy(net(), "formality"));
        assert_eq!((cfg.n_pairs, cfg.n_eval_prompts, cfg.samples_per_prompt), (50, 100, 10));
        assert_eq!(cfg.alpha, 1.0);
        assert_eq!(cfg.alpha_grid, vec![0.0, 0.5, 1.0, 2.0]);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg = ExperimentConfig::toy(net(), "t");
        cfg.n_seeds = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::toy(net(), "t");
        cfg.alpha_grid.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::toy(net(), "t");
        cfg.eps = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_fields_and_envs_rejected() {
        let bad = r#"{"model_source":{"toy":{"seed":1,"d":8,"vocab":5,"layers":3,"inject_layer":1}},"trait":"t","bogus":1}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(bad).is_err());
        let bad_env = r#"{"model_source":{"toy":{"seed":1,"d":8,"vocab":5,"layers":3,"inject_layer":1}},"trait":"t","env":"weather"}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(bad_env).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::toy(net(), "t");
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.master_seed = 9;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
