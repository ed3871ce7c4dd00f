// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small differentiable networks with a single steering injection site.
//!
//! A [`ToyNet`] is a stack of `L` square affine layers followed by a linear
//! unembedding. Writing `h₋₁ = x`, layer `i` computes
//!
//! ```text
//! pre_i = W_i · h_{i-1} + b_i
//! h_i   = σ(pre_i)        for i ≠ ℓ
//! h_ℓ   = pre_ℓ + α·v     (injection site, kept in affine coordinates)
//! logits = U · h_{L-1}
//! ```
//!
//! The injection layer `ℓ` keeps its affine output so that a linear
//! re-coordinatization `h ↦ A·h` can be absorbed exactly into `W_ℓ, b_ℓ`
//! and `W_{ℓ+1}` (see [`crate::steering::reparameterize`]). Every other
//! layer applies `tanh`.

mod env;

pub use env::{generate_environment, EnvKind, EnvSample, EnvSpec, LatentPrior};

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{ForwardScalar, Real};
use crate::seeds::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    Tanh,
}

impl Nonlinearity {
    #[inline]
    fn apply<T: Real, S: ForwardScalar<T>>(self, x: S) -> S {
        match self {
            Nonlinearity::Tanh => x.tanh(),
        }
    }
}

fn default_weight_scale() -> f64 {
    1.0
}

fn default_bias_scale() -> f64 {
    0.1
}

/// Serialized network description; construction is deterministic in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub seed: u64,
    /// Hidden width.
    pub d: usize,
    pub vocab: usize,
    pub layers: usize,
    pub inject_layer: usize,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    #[serde(default = "default_weight_scale")]
    pub weight_scale: f64,
    #[serde(default = "default_bias_scale")]
    pub bias_scale: f64,
    /// Rank of the weight consuming the injection site (`W_{ℓ+1}`, or the
    /// unembedding when `ℓ` is the last layer).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bottleneck_rank: Option<usize>,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.vocab == 0 || self.layers == 0 {
            return Err(Error::Config("d, vocab and layers must be positive".into()));
        }
        if self.inject_layer >= self.layers {
            return Err(Error::Config(format!(
                "inject_layer {} outside [0, {})",
                self.inject_layer, self.layers
            )));
        }
        if let Some(r) = self.bottleneck_rank {
            if r == 0 || r > self.d {
                return Err(Error::Config(format!("bottleneck_rank {r} outside [1, {}]", self.d)));
            }
        }
        if !(self.weight_scale.is_finite() && self.bias_scale.is_finite()) {
            return Err(Error::Config("non-finite init scale".into()));
        }
        Ok(())
    }

    /// Whether the network is affine in the injected state.
    pub fn linear_readout(&self) -> bool {
        self.inject_layer + 1 == self.layers
    }
}

/// One affine layer `W·h + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T: Real> {
    pub weight: DMatrix<T>,
    pub bias: DVector<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet<T: Real> {
    layers: Vec<Layer<T>>,
    unembed: DMatrix<T>,
    inject_layer: usize,
    nonlinearity: Nonlinearity,
}

/// A toy prompt: the input feature vector plus its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptInput<T: Real> {
    pub x: DVector<T>,
    pub env: EnvKind,
    pub latent_z: Option<T>,
}

impl<T: Real> PromptInput<T> {
    pub fn new(x: DVector<T>, env: EnvKind) -> Self {
        Self { x, env, latent_z: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeredOutput<T: Real> {
    pub logits: DVector<T>,
    pub probe_scores: BTreeMap<String, T>,
    pub sampled_tokens: Option<Vec<usize>>,
}

fn gaussian_matrix(rng: &mut impl rand::Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

fn low_rank_matrix(rng: &mut impl rand::Rng, rows: usize, cols: usize, rank: usize, std: f64) -> DMatrix<f64> {
    // entries of A·B have variance `rank` before rescaling
    let a = gaussian_matrix(rng, rows, rank, 1.0);
    let b = gaussian_matrix(rng, rank, cols, 1.0);
    (a * b) * (std / (rank as f64).sqrt())
}

impl<T: Real> ToyNet<T> {
    /// Assemble a network from explicit parameters, checking every shape.
    pub fn from_parts(
        layers: Vec<Layer<T>>,
        unembed: DMatrix<T>,
        inject_layer: usize,
        nonlinearity: Nonlinearity,
    ) -> Result<Self> {
        let first = layers.first().ok_or(Error::Empty("layers"))?;
        let d = first.weight.nrows();
        for layer in &layers {
            if layer.weight.shape() != (d, d) {
                return Err(Error::dim("layer weight", format!("{d}x{d}"), format!("{:?}", layer.weight.shape())));
            }
            if layer.bias.len() != d {
                return Err(Error::dim("layer bias", d, layer.bias.len()));
            }
        }
        if unembed.ncols() != d || unembed.nrows() == 0 {
            return Err(Error::dim("unembed", format!("Vx{d}"), format!("{:?}", unembed.shape())));
        }
        if inject_layer >= layers.len() {
            return Err(Error::InvalidArgument(format!(
                "inject_layer {inject_layer} outside [0, {})",
                layers.len()
            )));
        }
        Ok(Self {
            layers,
            unembed,
            inject_layer,
            nonlinearity,
        })
    }

    /// Deterministic construction from a config (weights drawn in `f64`).
    pub fn from_config(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeds::rng(cfg.seed, Stream::NetWeights, &[]);
        let d = cfg.d;
        let w_std = cfg.weight_scale / (d as f64).sqrt();
        let bottleneck_at = cfg.inject_layer + 1;
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let w = match cfg.bottleneck_rank {
                Some(r) if i == bottleneck_at => low_rank_matrix(&mut rng, d, d, r, w_std),
                _ => gaussian_matrix(&mut rng, d, d, w_std),
            };
            let b = gaussian_matrix(&mut rng, d, 1, cfg.bias_scale);
            layers.push(Layer {
                weight: w.map(T::lit),
                bias: DVector::from_iterator(d, b.iter().map(|&x| T::lit(x))),
            });
        }
        let u_std = 1.0 / (d as f64).sqrt();
        let unembed = match cfg.bottleneck_rank {
            Some(r) if bottleneck_at == cfg.layers => low_rank_matrix(&mut rng, cfg.vocab, d, r, u_std),
            _ => gaussian_matrix(&mut rng, cfg.vocab, d, u_std),
        };
        Self::from_parts(layers, unembed.map(T::lit), cfg.inject_layer, cfg.nonlinearity)
    }

    pub fn d(&self) -> usize {
        self.unembed.ncols()
    }

    pub fn vocab(&self) -> usize {
        self.unembed.nrows()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn inject_layer(&self) -> usize {
        self.inject_layer
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn unembed(&self) -> &DMatrix<T> {
        &self.unembed
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [Layer<T>], &mut DMatrix<T>) {
        (&mut self.layers, &mut self.unembed)
    }

    fn affine<S: ForwardScalar<T>>(w: &DMatrix<T>, b: Option<&DVector<T>>, h: &[S]) -> Vec<S> {
        (0..w.nrows())
            .map(|i| {
                let init = b.map_or(S::zero(), |b| S::constant(b[i]));
                h.iter()
                    .enumerate()
                    .fold(init, |acc, (j, &hj)| acc + hj.scale(w[(i, j)]))
            })
            .collect()
    }

    fn check_finite<S: ForwardScalar<T>>(h: &[S], layer: usize) -> Result<()> {
        if h.iter().all(|s| s.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { layer })
        }
    }

    fn check_len(&self, tensor: &'static str, got: usize) -> Result<()> {
        if got == self.d() {
            Ok(())
        } else {
            Err(Error::dim(tensor, self.d(), got))
        }
    }

    /// Hidden state `h_ℓ(x)` at the injection site, before any steering.
    pub fn hidden_at_injection(&self, x: &PromptInput<T>) -> Result<DVector<T>> {
        self.check_len("prompt input x", x.x.len())?;
        let mut h: Vec<T> = x.x.iter().copied().collect();
        for (i, layer) in self.layers[..=self.inject_layer].iter().enumerate() {
            h = Self::affine(&layer.weight, Some(&layer.bias), &h);
            Self::check_finite(&h, i)?;
            if i != self.inject_layer {
                h.iter_mut().for_each(|s| *s = self.nonlinearity.apply(*s));
            }
        }
        Ok(DVector::from_vec(h))
    }

    /// Downstream map from the (possibly steered) injection state to logits.
    pub fn downstream<S: ForwardScalar<T>>(&self, h_inject: Vec<S>) -> Result<Vec<S>> {
        if h_inject.len() != self.d() {
            return Err(Error::dim("injected hidden state", self.d(), h_inject.len()));
        }
        let mut h = h_inject;
        for (offset, layer) in self.layers[self.inject_layer + 1..].iter().enumerate() {
            h = Self::affine(&layer.weight, Some(&layer.bias), &h);
            // tanh saturates, so test the pre-activation
            Self::check_finite(&h, self.inject_layer + 1 + offset)?;
            h.iter_mut().for_each(|s| *s = self.nonlinearity.apply(*s));
        }
        let logits = Self::affine(&self.unembed, None, &h);
        Self::check_finite(&logits, self.layers.len())?;
        Ok(logits)
    }

    pub fn logits_from_injection(&self, h_inject: &DVector<T>) -> Result<DVector<T>> {
        let out = self.downstream(h_inject.iter().copied().collect::<Vec<T>>())?;
        Ok(DVector::from_vec(out))
    }

    /// Steered forward pass `o(x, v, α)`.
    pub fn forward(&self, x: &PromptInput<T>, v: Option<&DVector<T>>, alpha: T) -> Result<SteeredOutput<T>> {
        if let Some(v) = v {
            self.check_len("steering vector v", v.len())?;
        }
        let mut h = self.hidden_at_injection(x)?;
        if let Some(v) = v {
            if alpha != T::zero() {
                h.axpy(alpha, v, T::one());
            }
        }
        Ok(SteeredOutput {
            logits: self.logits_from_injection(&h)?,
            probe_scores: BTreeMap::new(),
            sampled_tokens: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_net(d: usize, inject: usize, depth: usize) -> ToyNet<f64> {
        let layers = (0..depth)
            .map(|_| Layer {
                weight: DMatrix::identity(d, d),
                bias: DVector::zeros(d),
            })
            .collect();
        ToyNet::from_parts(layers, DMatrix::identity(d, d), inject, Nonlinearity::Tanh).unwrap()
    }

    #[test]
    fn zero_input_is_a_fixed_point() {
        let net = identity_net(4, 1, 3);
        let x = PromptInput::new(DVector::zeros(4), EnvKind::Id);
        let out = net.forward(&x, Some(&DVector::zeros(4)), 0.0).unwrap();
        assert_eq!(out.logits, DVector::zeros(4));
    }

    #[test]
    fn injection_at_last_layer_reads_out_directly() {
        let net = identity_net(3, 2, 3);
        let x = PromptInput::new(DVector::zeros(3), EnvKind::Id);
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let out = net.forward(&x, Some(&e1), 1.0).unwrap();
        assert_eq!(out.logits, e1);
    }

    #[test]
    fn dimension_errors_name_the_tensor() {
        let net = identity_net(3, 0, 2);
        let x = PromptInput::new(DVector::zeros(3), EnvKind::Id);
        let err = net.forward(&x, Some(&DVector::zeros(2)), 1.0).unwrap_err();
        assert!(err.to_string().contains("steering vector v"), "{err}");
        let bad = PromptInput::new(DVector::zeros(5), EnvKind::Id);
        let err = net.forward(&bad, None, 0.0).unwrap_err();
        assert!(err.to_string().contains("prompt input x"), "{err}");
    }

    #[test]
    fn from_parts_rejects_ragged_shapes() {
        let layers = vec![Layer {
            weight: DMatrix::<f64>::identity(3, 3),
            bias: DVector::zeros(2),
        }];
        assert!(ToyNet::from_parts(layers, DMatrix::identity(3, 3), 0, Nonlinearity::Tanh).is_err());
    }

    #[test]
    fn non_finite_reports_layer() {
        let mut net = identity_net(2, 0, 2);
        net.parts_mut().0[1].weight[(0, 0)] = f64::INFINITY;
        let x = PromptInput::new(DVector::from_vec(vec![1.0, 1.0]), EnvKind::Id);
        match net.forward(&x, None, 0.0) {
            Err(Error::NonFinite { layer }) => assert_eq!(layer, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bottleneck_config_has_requested_rank() {
        let cfg = NetConfig {
            seed: 3,
            d: 16,
            vocab: 16,
            layers: 3,
            inject_layer: 1,
            nonlinearity: Nonlinearity::Tanh,
            weight_scale: 1.0,
            bias_scale: 0.1,
            bottleneck_rank: Some(5),
        };
        let net: ToyNet<f64> = ToyNet::from_config(&cfg).unwrap();
        let sv = net.layers()[2].weight.clone().singular_values();
        let max = sv.max();
        assert_eq!(sv.iter().filter(|&&s| s > 1e-10 * max).count(), 5);
    }

    #[test]
    fn config_validation() {
        let mut cfg = NetConfig {
            seed: 0,
            d: 4,
            vocab: 3,
            layers: 2,
            inject_layer: 2,
            nonlinearity: Nonlinearity::Tanh,
            weight_scale: 1.0,
            bias_scale: 0.1,
            bottleneck_rank: None,
        };
        assert!(cfg.validate().is_err());
        cfg.inject_layer = 1;
        assert!(cfg.validate().is_ok());
        assert!(cfg.linear_readout());
        cfg.bottleneck_rank = Some(9);
        assert!(cfg.validate().is_err());
    }
}
