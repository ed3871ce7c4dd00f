// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{gaussian, max_abs, net, prompt, rng, straight_line_logits, DESK_CONFIGS};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use steerid::jacobian::{analyze, jacobian_at};
use steerid::steering::{
    angle, extract, make_gauge, null_augment, orthogonalize, perturb_norm_matched, reparameterize, GaugeMap,
    Provenance, SteeringVector,
};
use steerid::toynet::{generate_environment, EnvKind, EnvSpec};

fn sv(v: DVector<f64>) -> SteeringVector<f64> {
    SteeringVector::new(v, 1, "synthetic", Provenance::Extracted).unwrap()
}

#[test]
fn orthogonal_components_over_ten_thousand_seeds() {
    let d = 64;
    let v = gaussian(&mut rng(20), d) * 3.0;
    let v_hat = v.normalize();
    let n = 10_000;
    let mut sum = DVector::<f64>::zeros(d);
    let mut sum_sq = DVector::<f64>::zeros(d);
    let mut worst_inner: f64 = 0.0;
    for seed in 0..n {
        let u = orthogonalize(seed, &v).unwrap();
        worst_inner = worst_inner.max(u.dot(&v_hat).abs());
        assert!((u.norm() - 1.0).abs() <= 1e-12);
        sum += &u;
        sum_sq += u.component_mul(&u);
    }
    assert!(worst_inner <= 1e-10, "{worst_inner:e}");
    // the empirical mean sits at the origin of the sphere
    let nf = n as f64;
    for k in 0..d {
        let mean = sum[k] / nf;
        let sd = ((sum_sq[k] / nf - mean * mean) * nf / (nf - 1.0)).sqrt();
        assert!(mean.abs() <= 3.0 * sd / nf.sqrt(), "coord {k}: mean {mean} sd {sd}");
    }
}

#[test]
fn norm_matched_perturbations_preserve_norm_and_angle() {
    let mut r = rng(21);
    for i in 0..1000 {
        let d = r.random_range(2..=96);
        let v = sv(gaussian(&mut r, d) * r.random_range(0.1..10.0));
        let u = orthogonalize(i, &v.v).unwrap();
        let p = perturb_norm_matched(&v, &u).unwrap();
        assert!((p.norm / v.norm - 1.0).abs() <= 1e-12);
        let cos = p.v.dot(&v.v) / (p.norm * v.norm);
        assert!((cos - std::f64::consts::FRAC_1_SQRT_2).abs() <= 1e-12);
        assert_eq!(p.provenance, Provenance::OrthogonalPerturbed);
        assert_eq!(p.lineage, vec![Provenance::Extracted]);
    }
}

#[test]
fn null_augmentation_leaves_the_linearized_output_fixed() {
    let mut r = rng(22);
    for name in ["v48.json", "bottleneck.json", "small.json"] {
        let net = net(name);
        let a = analyze(&jacobian_at(&net, &prompt(&mut r, net.d())).unwrap(), 1e-4).unwrap();
        let v = sv(gaussian(&mut r, net.d()));
        assert_eq!(null_augment(&v, &a, &vec![0.0; a.null_dim()]).unwrap().v, v.v);
        for _ in 0..100 {
            let c: Vec<f64> = (0..a.null_dim()).map(|_| r.random_range(-5.0..5.0)).collect();
            let aug = null_augment(&v, &a, &c).unwrap();
            let shift = a.null_combination(&c).unwrap();
            let lhs = (&a.jacobian * &aug.v - &a.jacobian * &v.v).norm();
            assert!(lhs <= 1e-4 * a.sigma_max() * shift.norm() + 1e-12, "{name}");
            assert_eq!(aug.provenance, Provenance::NullAugmented);
        }
    }
}

#[test]
fn projection_example_augmentation() {
    let j = DMatrix::<f64>::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let a = analyze(&j, 1e-4).unwrap();
    let v = sv(DVector::from_vec(vec![1.0, 1.0, 0.0]));
    let sign: f64 = a.null_basis[(2, 0)].signum();
    let aug = null_augment(&v, &a, &[5.0 * sign]).unwrap();
    assert!((&aug.v - DVector::from_vec(vec![1.0, 1.0, 5.0])).amax() <= 1e-14);
    assert!((&j * &aug.v - &j * &v.v).amax() <= 1e-14);
}

#[test]
fn generated_gauges_respect_the_condition_cap() {
    for cap in [10.0, 100.0] {
        for seed in 0..100 {
            let d = 2 + (seed as usize % 40);
            let g = make_gauge::<f64>(seed, d, cap).unwrap();
            assert!(g.condition_number <= cap);
            let residual = (&g.a * &g.a_inv - DMatrix::<f64>::identity(d, d)).norm();
            assert!(residual <= 1e-8 * d as f64);
            let mean_diag = g.a.trace() / d as f64;
            assert!((&g.a - DMatrix::<f64>::identity(d, d) * mean_diag).norm() > 1e-6);
        }
    }
    assert!(GaugeMap::new(DMatrix::<f64>::identity(4, 4) * 3.0, 100.0).is_err());
    assert!(GaugeMap::new(DMatrix::<f64>::from_diagonal(&DVector::from_vec(vec![2.0, 1.0])), 100.0).is_ok());
}

#[test]
fn gauge_equivalence_twenty_by_twenty() {
    for name in DESK_CONFIGS {
        let net = net(name);
        let d = net.d();
        let mut r = rng(23);
        let mut worst: f64 = 0.0;
        for g in 0..20 {
            let gauge = make_gauge::<f64>(1000 + g, d, 10.0).unwrap();
            assert!(gauge.condition_number <= 10.0);
            let net2 = reparameterize(&net, &gauge).unwrap();
            for _ in 0..20 {
                let x = prompt(&mut r, d);
                let v = sv(gaussian(&mut r, d));
                let alpha = r.random_range(-2.0..2.0);
                let av = gauge.map_vector(&v).unwrap();
                assert!(angle(&av.v, &v.v) > 0.0);
                let a = net.forward(&x, Some(&v.v), alpha).unwrap().logits;
                let b = net2.forward(&x, Some(&av.v), alpha).unwrap().logits;
                worst = worst.max(max_abs(a.as_slice(), b.as_slice()));
            }
        }
        assert!(worst <= 1e-9, "{name}: {worst:e}");
    }
}

#[test]
fn identity_gauge_is_bitwise_neutral() {
    let net = net("v48.json");
    let d = net.d();
    let a = DMatrix::from_diagonal(&DVector::from_fn(d, |i, _| if i == 0 { 1.0 + 1e-3 } else { 1.0 }));
    let near = GaugeMap::new(a, 100.0).unwrap();
    let mut id = near.clone();
    id.a = DMatrix::identity(d, d);
    id.a_inv = DMatrix::identity(d, d);
    assert_eq!(reparameterize(&net, &id).unwrap(), net);
}

#[test]
fn extraction_matches_independent_averaging() {
    let net = net("v48.json");
    let mut spec = EnvSpec::standard(EnvKind::Id, "formality", 64, 7);
    spec.noise_sigma = 0.0;
    let sample = generate_environment::<f64>(&spec, 50, 3).unwrap();
    let v = extract(&sample.pairs, &net, "formality").unwrap();

    // hidden state at the injection layer, coded directly from the weights
    let hidden = |x: &[f64]| -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, layer) in net.layers()[..=net.inject_layer()].iter().enumerate() {
            h = (0..64)
                .map(|r| layer.bias[r] + (0..64).map(|c| layer.weight[(r, c)] * h[c]).sum::<f64>())
                .collect();
            if i != net.inject_layer() {
                h.iter_mut().for_each(|s| *s = s.tanh());
            }
        }
        h
    };
    let mut mean = vec![0.0; 64];
    for (p, m) in &sample.pairs {
        let (hp, hm) = (hidden(p.x.as_slice()), hidden(m.x.as_slice()));
        for k in 0..64 {
            mean[k] += (hp[k] - hm[k]) / 50.0;
        }
    }
    assert!(max_abs(v.v.as_slice(), &mean) <= 1e-12);
    assert_eq!(v.provenance, Provenance::Extracted);
    assert_eq!(v.layer, net.inject_layer());

    // permutation invariance and mean of means
    let mut reversed = sample.pairs.clone();
    reversed.reverse();
    let v_rev = extract(&reversed, &net, "formality").unwrap();
    assert!((&v_rev.v - &v.v).amax() <= 1e-14);
    let first = extract(&sample.pairs[..25], &net, "formality").unwrap();
    let second = extract(&sample.pairs[25..], &net, "formality").unwrap();
    assert!(((&first.v + &second.v) * 0.5 - &v.v).amax() <= 1e-14);
}

#[test]
fn injection_oracle_agrees_after_gauge() {
    // the reparameterized net is checked against the straight-line pass too
    let net = net("small.json");
    let gauge = make_gauge::<f64>(5, 8, 10.0).unwrap();
    let net2 = reparameterize(&net, &gauge).unwrap();
    let mut r = rng(24);
    let x = prompt(&mut r, 8);
    let v = gaussian(&mut r, 8);
    let av = &gauge.a * &v;
    let a = straight_line_logits(&net, x.x.as_slice(), Some(v.as_slice()), 0.7);
    let b = straight_line_logits(&net2, x.x.as_slice(), Some(av.as_slice()), 0.7);
    assert!(max_abs(&a, &b) <= 1e-9);
}
