// SPDX-License-Identifier: MIT OR Apache-2.0

//! Helpers shared by the integration tests: desk configs, seeded inputs and
//! a straight-line forward pass written without the library's code path.

#![allow(dead_code)]

use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use steerid::harness::{ExperimentConfig, ModelSourceConfig};
use steerid::toynet::{EnvKind, NetConfig, PromptInput, ToyNet};

pub const DESK_CONFIGS: [&str; 4] = ["small.json", "v48.json", "linear-readout.json", "bottleneck.json"];

pub fn experiment(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)).unwrap()
}

pub fn net_config(name: &str) -> NetConfig {
    match experiment(name).model_source {
        ModelSourceConfig::Toy(n) => n,
        ModelSourceConfig::Dump(_) => panic!("{name} is not a toy config"),
    }
}

pub fn net(name: &str) -> ToyNet<f64> {
    ToyNet::from_config(&net_config(name)).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| StandardNormal.sample(rng))
}

pub fn prompt(rng: &mut ChaCha8Rng, d: usize) -> PromptInput<f64> {
    PromptInput::new(gaussian(rng, d), EnvKind::Id)
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Forward pass with explicit loops over the raw parameters.
pub fn straight_line_logits(net: &ToyNet<f64>, x: &[f64], v: Option<&[f64]>, alpha: f64) -> Vec<f64> {
    let ell = net.inject_layer();
    let mut h: Vec<f64> = x.to_vec();
    for (i, layer) in net.layers().iter().enumerate() {
        let d = h.len();
        let mut next = vec![0.0; d];
        for r in 0..d {
            let mut acc = layer.bias[r];
            for c in 0..d {
                acc += layer.weight[(r, c)] * h[c];
            }
            next[r] = acc;
        }
        if i == ell {
            if let Some(v) = v {
                for r in 0..d {
                    next[r] += alpha * v[r];
                }
            }
        } else {
            for s in next.iter_mut() {
                *s = s.tanh();
            }
        }
        h = next;
    }
    let u = net.unembed();
    (0..u.nrows())
        .map(|t| (0..u.ncols()).map(|c| u[(t, c)] * h[c]).sum())
        .collect()
}
