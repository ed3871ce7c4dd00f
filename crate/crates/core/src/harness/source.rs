// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit providers for the protocols.
//!
//! Protocols only see per-prompt logits for a fixed set of arms, so the same
//! statistics run on an in-process toy network ([`ToySource`]) or on a
//! tensor dump exported from a real model ([`crate::dumpio::DumpSource`]).

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dumpio;
use crate::error::{Error, Result};
use crate::jacobian::{self, JacobianAnalysis};
use crate::probes::TraitProbe;
use crate::seeds::{self, Stream};
use crate::steering::{self, Provenance, SteeringVector};
use crate::toynet::{generate_environment, EnvKind, EnvSample, EnvSpec, NetConfig, PromptInput, ToyNet};

use super::config::{ExperimentConfig, Perturbation};

/// One protocol arm. Seeded arms carry the perturbation seed index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    Baseline,
    V,
    VPrime(usize),
    VPerp(usize),
    Random(usize),
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::V => "v",
            Arm::VPrime(_) => "v_prime",
            Arm::VPerp(_) => "v_perp",
            Arm::Random(_) => "random",
        }
    }

    pub fn seed(self) -> Option<usize> {
        match self {
            Arm::Baseline | Arm::V => None,
            Arm::VPrime(s) | Arm::VPerp(s) | Arm::Random(s) => Some(s),
        }
    }

    pub fn parse(name: &str, seed: Option<usize>) -> Result<Self> {
        let need_seed = || seed.ok_or_else(|| Error::InvalidDump(format!("arm `{name}` needs a seed")));
        Ok(match name {
            "baseline" => Arm::Baseline,
            "v" => Arm::V,
            "v_prime" => Arm::VPrime(need_seed()?),
            "v_perp" => Arm::VPerp(need_seed()?),
            "random" => Arm::Random(need_seed()?),
            other => return Err(Error::InvalidDump(format!("unknown arm `{other}`"))),
        })
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.seed() {
            Some(s) => write!(f, "{}[{s}]", self.name()),
            None => f.write_str(self.name()),
        }
    }
}

/// Per-prompt logits for every arm.
pub trait ModelSource: Sync {
    fn trait_label(&self) -> &str;
    fn env_label(&self) -> &str;
    fn n_prompts(&self) -> usize;
    fn n_seeds(&self) -> usize;
    fn vocab(&self) -> usize;
    fn logits(&self, arm: Arm, prompt: usize) -> Result<Vec<f64>>;
    /// Construction label per arm name.
    fn provenance(&self) -> BTreeMap<String, String>;
}

/// Vectors for one perturbation seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedArms {
    /// Unit direction orthogonal to `v`, shared by `v′` and the perp-only arm.
    pub v_perp_unit: DVector<f64>,
    pub v_prime: SteeringVector<f64>,
    /// `‖v‖·v_⊥`.
    pub perp_only: SteeringVector<f64>,
    /// Norm-matched uniform random direction.
    pub random: SteeringVector<f64>,
}

/// Everything a toy protocol run needs for one (trait, environment).
#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub net_config: NetConfig,
    pub net: ToyNet<f64>,
    pub env: EnvSpec,
    pub sample: EnvSample<f64>,
    pub probe: TraitProbe,
    pub v: SteeringVector<f64>,
}

impl ToyWorld {
    pub fn build(cfg: &ExperimentConfig, net_cfg: &NetConfig, trait_label: &str, env: EnvKind) -> Result<Self> {
        let net = ToyNet::from_config(net_cfg)?;
        let sample = Self::sample_env(cfg, net.d(), trait_label, env)?;
        let v = steering::extract(&sample.pairs, &net, trait_label)?;
        let probe = match &cfg.probe {
            Some(path) => TraitProbe::load(path)?,
            None => plant_probe(cfg, &net, trait_label)?,
        };
        Ok(Self {
            net_config: net_cfg.clone(),
            env: Self::env_spec(cfg, net.d(), trait_label, env),
            net,
            sample,
            probe,
            v,
        })
    }

    fn env_spec(cfg: &ExperimentConfig, d: usize, trait_label: &str, env: EnvKind) -> EnvSpec {
        let mut spec = EnvSpec::standard(env, trait_label, d, cfg.master_seed);
        spec.noise_sigma = cfg.noise_sigma;
        spec.n_eval = cfg.n_eval_prompts;
        spec
    }

    fn sample_env(cfg: &ExperimentConfig, d: usize, trait_label: &str, env: EnvKind) -> Result<EnvSample<f64>> {
        generate_environment(&Self::env_spec(cfg, d, trait_label, env), cfg.n_pairs, cfg.master_seed)
    }

    pub fn eval(&self) -> &[PromptInput<f64>] {
        &self.sample.eval
    }

    /// A world sharing this one's network, probe and `v`, evaluated on `other`'s prompts.
    pub fn with_eval_from(&self, other: &ToyWorld) -> ToyWorld {
        let mut w = self.clone();
        w.sample.eval = other.sample.eval.clone();
        w.env = other.env.clone();
        w
    }

    /// Jacobian analyses at every evaluation prompt.
    pub fn eval_analyses(&self, eps: f64) -> Result<Vec<JacobianAnalysis<f64>>> {
        self.eval()
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let j = jacobian::jacobian_at(&self.net, x).map_err(|e| e.at_prompt(i))?;
                jacobian::analyze(&j, eps)
            })
            .collect()
    }
}

/// Markers from the unsteered response to the trait direction, measured on
/// in-distribution evaluation prompts.
pub fn plant_probe(cfg: &ExperimentConfig, net: &ToyNet<f64>, trait_label: &str) -> Result<TraitProbe> {
    let mut spec = EnvSpec::standard(EnvKind::Id, trait_label, net.d(), cfg.master_seed);
    spec.noise_sigma = cfg.noise_sigma;
    spec.n_eval = cfg.n_eval_prompts;
    let sample: EnvSample<f64> = generate_environment(&spec, 1, cfg.master_seed)?;
    let mut response = DVector::zeros(net.vocab());
    for x in &sample.eval {
        let mut up = x.clone();
        up.x += &spec.trait_direction;
        let mut down = x.clone();
        down.x -= &spec.trait_direction;
        response += net.forward(&up, None, 0.0)?.logits - net.forward(&down, None, 0.0)?.logits;
    }
    let k = cfg.markers_per_side.unwrap_or((net.vocab() / 8).max(1));
    TraitProbe::planted(trait_label, response.as_slice(), k)
}

fn seed_key(trait_label: &str, env: EnvKind, seed: usize) -> [u64; 3] {
    [seeds::label_key(trait_label), seeds::label_key(env.label()), seed as u64]
}

/// Unit vector orthogonal to `v` inside `span(null_basis)`.
fn null_orthogonal(null_basis: &DMatrix<f64>, v: &DVector<f64>, seed: u64) -> Result<DVector<f64>> {
    let k = null_basis.ncols();
    if k == 0 {
        return Err(Error::DegenerateVector(
            "no common null direction across evaluation prompts".into(),
        ));
    }
    let coords = null_basis.transpose() * v;
    for attempt in 0..8u64 {
        let mut rng = seeds::rng(seed, Stream::NullCoefficients, &[attempt]);
        let raw: DVector<f64> = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut rng));
        let a = if coords.norm() > 0.0 {
            match steering::orthogonalize_sample(&raw, &coords) {
                Some(a) => a,
                None => continue,
            }
        } else {
            raw.normalize()
        };
        // a ⟂ Nᵀv and N orthonormal, so u ⟂ v and ‖u‖ = 1
        let u = null_basis * a;
        let n = u.norm();
        if n > 1e-8 {
            return Ok(u / n);
        }
    }
    Err(Error::DegenerateVector(
        "common null space has no direction orthogonal to v".into(),
    ))
}

/// Build the per-seed arm vectors for a world.
pub fn build_arms(cfg: &ExperimentConfig, world: &ToyWorld) -> Result<Vec<SeedArms>> {
    let v = &world.v;
    let null_basis = match cfg.perturbation {
        Perturbation::ExactNull => Some(jacobian::stacked_nullspace(&world.eval_analyses(cfg.eps)?)?),
        _ => None,
    };
    (0..cfg.n_seeds)
        .map(|s| {
            let key = seed_key(&v.trait_label, world.env.kind, s);
            let ortho_seed = seeds::derive(cfg.master_seed, Stream::Orthogonal, &key);
            let rand_seed = seeds::derive(cfg.master_seed, Stream::RandomArm, &key);
            let v_perp_unit = match (&cfg.perturbation, &null_basis) {
                (Perturbation::ExactNull, Some(n)) => null_orthogonal(n, &v.v, ortho_seed)?,
                _ => steering::orthogonalize(ortho_seed, &v.v)?,
            };
            let v_prime = match cfg.perturbation {
                Perturbation::Identity => v.clone(),
                // v + ‖v‖u stays in [v]; the √2 mix would rescale Jv
                Perturbation::ExactNull => v.derive(&v.v + &v_perp_unit * v.norm, Provenance::NullAugmented)?,
                Perturbation::RandomOrthogonal => steering::perturb_norm_matched(v, &v_perp_unit)?,
            };
            let perp_only = v.derive(&v_perp_unit * v.norm, Provenance::OrthogonalComponent)?;
            let dir: DVector<f64> = steering::random_direction(rand_seed, Stream::RandomArm, 0, v.d());
            let random = SteeringVector::new(dir * v.norm, v.layer, v.trait_label.clone(), Provenance::Random)?;
            Ok(SeedArms {
                v_perp_unit,
                v_prime,
                perp_only,
                random,
            })
        })
        .collect()
}

/// In-process logits from a toy world at a fixed steering strength.
pub struct ToySource<'a> {
    pub world: &'a ToyWorld,
    pub arms: &'a [SeedArms],
    pub alpha: f64,
}

impl ModelSource for ToySource<'_> {
    fn trait_label(&self) -> &str {
        &self.world.v.trait_label
    }

    fn env_label(&self) -> &str {
        self.world.env.kind.label()
    }

    fn n_prompts(&self) -> usize {
        self.world.eval().len()
    }

    fn n_seeds(&self) -> usize {
        self.arms.len()
    }

    fn vocab(&self) -> usize {
        self.world.net.vocab()
    }

    fn provenance(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        out.insert(Arm::V.name().to_string(), dumpio::provenance_label(&self.world.v));
        if let Some(a) = self.arms.first() {
            out.insert(Arm::VPrime(0).name().to_string(), dumpio::provenance_label(&a.v_prime));
            out.insert(Arm::VPerp(0).name().to_string(), dumpio::provenance_label(&a.perp_only));
            out.insert(Arm::Random(0).name().to_string(), dumpio::provenance_label(&a.random));
        }
        out
    }

    fn logits(&self, arm: Arm, prompt: usize) -> Result<Vec<f64>> {
        let x = self
            .world
            .eval()
            .get(prompt)
            .ok_or_else(|| Error::InvalidArgument(format!("prompt {prompt} out of range")))?;
        let seed_arms = |s: usize| {
            self.arms
                .get(s)
                .ok_or_else(|| Error::InvalidArgument(format!("seed {s} out of range")))
        };
        let v = match arm {
            Arm::Baseline => None,
            Arm::V => Some(&self.world.v.v),
            Arm::VPrime(s) => Some(&seed_arms(s)?.v_prime.v),
            Arm::VPerp(s) => Some(&seed_arms(s)?.perp_only.v),
            Arm::Random(s) => Some(&seed_arms(s)?.random.v),
        };
        let out = self
            .world
            .net
            .forward(x, v, self.alpha)
            .map_err(|e| e.at_prompt(prompt))?;
        Ok(out.logits.iter().copied().collect())
    }
}
