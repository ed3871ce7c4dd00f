// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic prompt environments driven by a latent trait variable.
//!
//! Inputs are `x = base(env) + content + z·t + ε`, where `t` is the trait
//! direction, `content` is a per-prompt vector shared by both members of a
//! contrastive pair, and `ε ~ N(0, σ²I)` is drawn independently per input.
//! Positive and negative members carry `+|z|` and `-|z|`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::seeds::{self, Stream};

use super::PromptInput;

/// Prompt environment: in-distribution or one of three shifts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Id,
    Topic,
    Genre,
    Safety,
}

impl EnvKind {
    pub const ALL: [EnvKind; 4] = [EnvKind::Id, EnvKind::Topic, EnvKind::Genre, EnvKind::Safety];

    pub fn label(self) -> &'static str {
        match self {
            EnvKind::Id => "id",
            EnvKind::Topic => "topic",
            EnvKind::Genre => "genre",
            EnvKind::Safety => "safety",
        }
    }

    /// Short column header (`ID`, `Top`, `Gen`, `Saf`).
    pub fn short(self) -> &'static str {
        match self {
            EnvKind::Id => "ID",
            EnvKind::Topic => "Top",
            EnvKind::Genre => "Gen",
            EnvKind::Safety => "Saf",
        }
    }

    fn shift_magnitude(self) -> f64 {
        match self {
            EnvKind::Id => 0.0,
            EnvKind::Topic => 1.0,
            EnvKind::Genre => 1.5,
            EnvKind::Safety => 2.0,
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "id" | "in-distribution" => Ok(EnvKind::Id),
            "topic" | "top" => Ok(EnvKind::Topic),
            "genre" | "gen" => Ok(EnvKind::Genre),
            "safety" | "saf" => Ok(EnvKind::Safety),
            _ => Err(Error::UnknownEnvironment(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentPrior {
    /// `z ∈ {+m, -m}`.
    TwoPoint { magnitude: f64 },
    /// `|z|` with `z ~ N(mean, std²)`.
    Gaussian { mean: f64, std: f64 },
}

impl Default for LatentPrior {
    fn default() -> Self {
        LatentPrior::TwoPoint { magnitude: 1.0 }
    }
}

impl LatentPrior {
    fn magnitude(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            LatentPrior::TwoPoint { magnitude } => magnitude.abs(),
            LatentPrior::Gaussian { mean, std } => {
                let z: f64 = StandardNormal.sample(rng);
                (mean + std * z).abs()
            }
        }
    }
}

/// Full description of one environment for one trait.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub trait_label: String,
    pub trait_direction: DVector<f64>,
    pub base_shift: DVector<f64>,
    pub noise_sigma: f64,
    pub content_scale: f64,
    pub prior: LatentPrior,
    pub n_eval: usize,
}

fn random_unit(rng: &mut impl Rng, d: usize) -> DVector<f64> {
    let v: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
    let n = v.norm();
    v / n
}

impl EnvSpec {
    /// Standard environment: unit trait direction keyed by `(world_seed,
    /// trait)` and a base shift keyed by `(world_seed, kind)`, so every
    /// environment of a world shares the same trait direction.
    pub fn standard(kind: EnvKind, trait_label: &str, d: usize, world_seed: u64) -> Self {
        let mut trng = seeds::rng(world_seed, Stream::TraitDirection, &[seeds::label_key(trait_label)]);
        let trait_direction = random_unit(&mut trng, d);
        let base_shift = if kind == EnvKind::Id {
            DVector::zeros(d)
        } else {
            let mut srng = seeds::rng(world_seed, Stream::EnvShift, &[seeds::label_key(kind.label())]);
            random_unit(&mut srng, d) * kind.shift_magnitude()
        };
        Self {
            kind,
            trait_label: trait_label.to_string(),
            trait_direction,
            base_shift,
            noise_sigma: 0.1,
            content_scale: 1.0,
            prior: LatentPrior::default(),
            n_eval: 100,
        }
    }

    pub fn d(&self) -> usize {
        self.trait_direction.len()
    }

    fn validate(&self) -> Result<()> {
        if self.base_shift.len() != self.d() {
            return Err(Error::dim("environment base shift", self.d(), self.base_shift.len()));
        }
        if !(self.noise_sigma >= 0.0 && self.content_scale >= 0.0) {
            return Err(Error::InvalidArgument("noise and content scales must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Contrastive pairs plus held-out evaluation prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSample<T: Real> {
    pub pairs: Vec<(PromptInput<T>, PromptInput<T>)>,
    pub eval: Vec<PromptInput<T>>,
}

pub fn generate_environment<T: Real>(spec: &EnvSpec, n_pairs: usize, seed: u64) -> Result<EnvSample<T>> {
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("n_pairs must be at least 1".into()));
    }
    spec.validate()?;
    let d = spec.d();
    let key = [seeds::label_key(spec.kind.label()), seeds::label_key(&spec.trait_label)];
    let gauss = |rng: &mut rand_chacha::ChaCha8Rng, scale: f64| -> DVector<f64> {
        if scale == 0.0 {
            DVector::zeros(d)
        } else {
            DVector::from_fn(d, |_, _| {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            })
        }
    };
    let to_input = |x: DVector<f64>, z: f64| PromptInput {
        x: x.map(T::lit),
        env: spec.kind,
        latent_z: Some(T::lit(z)),
    };

    let mut rng = seeds::rng(seed, Stream::Environment, &[key[0], key[1], 0]);
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let z = spec.prior.magnitude(&mut rng);
        let content = &spec.base_shift + gauss(&mut rng, spec.content_scale);
        let pos = &content + &spec.trait_direction * z + gauss(&mut rng, spec.noise_sigma);
        let neg = &content - &spec.trait_direction * z + gauss(&mut rng, spec.noise_sigma);
        pairs.push((to_input(pos, z), to_input(neg, -z)));
    }

    let mut rng = seeds::rng(seed, Stream::Environment, &[key[0], key[1], 1]);
    let eval = (0..spec.n_eval)
        .map(|_| {
            let x = &spec.base_shift + gauss(&mut rng, spec.content_scale) + gauss(&mut rng, spec.noise_sigma);
            to_input(x, 0.0)
        })
        .collect();
    Ok(EnvSample { pairs, eval })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(d: usize) -> EnvSpec {
        EnvSpec::standard(EnvKind::Id, "formality", d, 11)
    }

    #[test]
    fn noise_free_contrast_is_twice_the_trait_direction() {
        let mut s = spec(5);
        s.noise_sigma = 0.0;
        s.trait_direction = DVector::from_vec(vec![0.0, 1.0, 0.0, 0.0, 0.0]);
        let sample: EnvSample<f64> = generate_environment(&s, 4, 1).unwrap();
        for (p, n) in &sample.pairs {
            let diff = &p.x - &n.x;
            assert_eq!(diff, DVector::from_vec(vec![0.0, 2.0, 0.0, 0.0, 0.0]));
        }
    }

    #[test]
    fn fifty_pair_environment_is_supported() {
        let sample: EnvSample<f64> = generate_environment(&spec(8), 50, 3).unwrap();
        assert_eq!(sample.pairs.len(), 50);
        assert_eq!(sample.eval.len(), 100);
    }

    #[test]
    fn monte_carlo_contrast_concentrates() {
        let d = 6;
        let s = spec(d);
        let n = 10_000;
        let sample: EnvSample<f64> = generate_environment(&s, n, 5).unwrap();
        let mut mean = DVector::zeros(d);
        for (p, q) in &sample.pairs {
            mean += &p.x - &q.x;
        }
        mean /= n as f64;
        // each coordinate of x⁺ − x⁻ has standard deviation σ·√2
        let se = s.noise_sigma * 2f64.sqrt() / (n as f64).sqrt();
        for i in 0..d {
            assert!((mean[i] - 2.0 * s.trait_direction[i]).abs() <= 3.0 * se, "coord {i}");
        }
    }

    #[test]
    fn determinism_and_env_labels() {
        let a: EnvSample<f64> = generate_environment(&spec(4), 3, 9).unwrap();
        let b: EnvSample<f64> = generate_environment(&spec(4), 3, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.pairs.iter().all(|(p, _)| p.env == EnvKind::Id));
        assert!("topic".parse::<EnvKind>().is_ok());
        assert!(matches!("weather".parse::<EnvKind>(), Err(Error::UnknownEnvironment(_))));
    }

    #[test]
    fn shifted_environments_share_the_trait_direction() {
        let a = EnvSpec::standard(EnvKind::Id, "humor", 8, 2);
        let b = EnvSpec::standard(EnvKind::Safety, "humor", 8, 2);
        assert_eq!(a.trait_direction, b.trait_direction);
        assert!((b.base_shift.norm() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_pairs_rejected() {
        assert!(generate_environment::<f64>(&spec(4), 0, 0).is_err());
    }
}
