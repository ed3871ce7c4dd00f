// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{gaussian, net, prompt, rng, DESK_CONFIGS};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use steerid::jacobian::{analyze, decompose, finite_diff_jacobian, jacobian_at, stack, stacked_nullspace, NullRegime};
use steerid::steering::orthogonalize;
use steerid::toynet::{Layer, NetConfig, ToyNet};

const EPS: f64 = 1e-4;

fn max_abs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

#[test]
fn forward_mode_agrees_with_central_differences_on_desk_configs() {
    for name in DESK_CONFIGS {
        let net = net(name);
        let mut r = rng(10);
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let x = prompt(&mut r, net.d());
            let exact = jacobian_at(&net, &x).unwrap();
            let fd = finite_diff_jacobian(&net, &x, 1e-6).unwrap();
            worst = worst.max(max_abs(&exact, &fd));
        }
        assert!(worst <= 1e-5, "{name}: {worst:e}");
    }
}

#[test]
fn linear_readout_differences_are_exact_up_to_roundoff() {
    let net = net("linear-readout.json");
    let x = prompt(&mut rng(11), net.d());
    assert_eq!(&jacobian_at(&net, &x).unwrap(), net.unembed());
    let fd = finite_diff_jacobian(&net, &x, 1e-3).unwrap();
    assert!(max_abs(&fd, net.unembed()) <= 1e-10);
}

#[test]
fn halving_the_step_quarters_the_error() {
    let net = net("small.json");
    let mut r = rng(12);
    for _ in 0..5 {
        let x = prompt(&mut r, net.d());
        let exact = jacobian_at(&net, &x).unwrap();
        let e1 = max_abs(&finite_diff_jacobian(&net, &x, 2e-2).unwrap(), &exact);
        let e2 = max_abs(&finite_diff_jacobian(&net, &x, 1e-2).unwrap(), &exact);
        let ratio = e1 / e2;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }
}

fn random_config(r: &mut impl Rng, seed: u64) -> NetConfig {
    let d = r.random_range(3..=24);
    let layers = r.random_range(1..=4);
    let inject_layer = r.random_range(0..layers);
    let bottleneck_rank = if r.random_bool(0.3) { Some(r.random_range(1..=d)) } else { None };
    NetConfig {
        seed,
        d,
        vocab: r.random_range(2..=32),
        layers,
        inject_layer,
        nonlinearity: Default::default(),
        weight_scale: 1.0,
        bias_scale: 0.1,
        bottleneck_rank,
    }
}

#[test]
fn rank_nullity_and_basis_invariants_over_random_nets() {
    let mut r = rng(13);
    for seed in 0..100 {
        let cfg = random_config(&mut r, seed);
        let net = ToyNet::<f64>::from_config(&cfg).unwrap();
        let x = prompt(&mut r, cfg.d);
        let a = analyze(&jacobian_at(&net, &x).unwrap(), EPS).unwrap();
        let d = cfg.d;
        assert_eq!(a.rank + a.null_dim(), d, "{cfg:?}");
        assert_eq!(a.rank, a.singular_values.iter().filter(|&&s| s > EPS * a.sigma_max()).count());
        assert!(a.rank <= cfg.vocab.min(d));
        if let Some(k) = cfg.bottleneck_rank {
            assert!(a.rank <= k);
        }
        let i_null = DMatrix::<f64>::identity(a.null_dim(), a.null_dim());
        let i_row = DMatrix::<f64>::identity(a.rank, a.rank);
        assert!(max_abs(&(a.null_basis.transpose() * &a.null_basis), &i_null) <= 1e-10);
        assert!(max_abs(&(a.row_basis.transpose() * &a.row_basis), &i_row) <= 1e-10);
        assert!((a.null_basis.transpose() * &a.row_basis).amax() <= 1e-10);
        let complete = a.null_projector() + a.row_projector();
        for _ in 0..3 {
            let y = gaussian(&mut r, d);
            assert!((&complete * &y - &y).amax() <= 1e-10);
        }
        for u in a.null_basis.column_iter() {
            assert!((&a.jacobian * u).norm() <= EPS * a.sigma_max() * u.norm() + 1e-15);
        }
        let recon = (&a.jacobian - a.truncated_reconstruction()).norm();
        assert!(recon <= EPS * a.sigma_max() * (d as f64).sqrt() + 1e-12, "{cfg:?}: {recon:e}");
        for u in a.null_basis.column_iter() {
            let v = gaussian(&mut r, d);
            let lhs = (&a.jacobian * (&v + u) - &a.jacobian * &v).norm();
            assert!(lhs <= EPS * a.sigma_max() * (1.0 + u.norm()) + 1e-12);
        }
    }
}

#[test]
fn wide_config_always_has_a_sixteen_dimensional_kernel() {
    let net = net("v48.json");
    let mut r = rng(14);
    for _ in 0..20 {
        let a = analyze(&jacobian_at(&net, &prompt(&mut r, 64)).unwrap(), EPS).unwrap();
        assert!(a.null_dim() >= 16);
        assert_eq!(a.singular_values.len(), 48);
    }
}

#[test]
fn bottleneck_kernel_is_exact() {
    let net = net("bottleneck.json");
    let a = analyze(&jacobian_at(&net, &prompt(&mut rng(15), net.d())).unwrap(), EPS).unwrap();
    assert!(a.null_dim() >= 32);
    assert_eq!(a.regime, NullRegime::Exact);
}

#[test]
fn projection_example_kernel_is_the_third_axis() {
    let j = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let a = analyze(&j, EPS).unwrap();
    assert_eq!(a.rank, 2);
    let u = a.null_basis.column(0);
    assert!((u[2].abs() - 1.0).abs() <= 1e-15 && u[0] == 0.0 && u[1] == 0.0);
}

/// Replace `W_{ℓ+1}` by `W_{ℓ+1}(I − uuᵀ)` so `u` is annihilated at every prompt.
fn plant_common_null(net: &ToyNet<f64>, u: &DVector<f64>) -> ToyNet<f64> {
    let d = net.d();
    let p = DMatrix::identity(d, d) - u * u.transpose();
    let ell = net.inject_layer();
    let mut layers: Vec<Layer<f64>> = net.layers().to_vec();
    let mut unembed = net.unembed().clone();
    if ell + 1 < layers.len() {
        layers[ell + 1].weight = &layers[ell + 1].weight * &p;
    } else {
        unembed = unembed * &p;
    }
    ToyNet::from_parts(layers, unembed, ell, net.nonlinearity()).unwrap()
}

#[test]
fn planted_common_direction_survives_stacking() {
    let mut r = rng(16);
    for name in ["small.json", "v48.json"] {
        let base = net(name);
        let d = base.d();
        let u = gaussian(&mut r, d).normalize();
        let net = plant_common_null(&base, &u);
        let analyses: Vec<_> = (0..20)
            .map(|_| analyze(&jacobian_at(&net, &prompt(&mut r, d)).unwrap(), EPS).unwrap())
            .collect();
        let basis = stacked_nullspace(&analyses).unwrap();
        assert!(basis.ncols() >= 1);
        assert!(basis.ncols() <= analyses.iter().map(|a| a.null_dim()).min().unwrap());
        let residual = (&basis * (basis.transpose() * &u) - &u).norm();
        assert!(residual <= 1e-10, "{name}: {residual:e}");
    }
}

#[test]
fn generic_prompts_have_no_common_kernel_on_the_small_net() {
    let net = net("small.json");
    let mut r = rng(17);
    let analyses: Vec<_> = (0..20)
        .map(|_| analyze(&jacobian_at(&net, &prompt(&mut r, 8)).unwrap(), EPS).unwrap())
        .collect();
    assert!(analyses.iter().all(|a| a.null_dim() >= 3));
    assert_eq!(stack(&analyses).unwrap().null_dim(), 0);
}

#[test]
fn hand_intersection_is_the_zero_space() {
    let j1 = analyze(&DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]), EPS).unwrap();
    let j2 = analyze(&DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]), EPS).unwrap();
    assert_eq!(stacked_nullspace(&[j1.clone(), j1.clone()]).unwrap().ncols(), 1);
    assert_eq!(stacked_nullspace(&[j1, j2]).unwrap().ncols(), 0);
}

#[test]
fn orthogonal_perturbations_split_energy_by_dimension() {
    let net = net("v48.json");
    let mut r = rng(18);
    let a = analyze(&jacobian_at(&net, &prompt(&mut r, 64)).unwrap(), EPS).unwrap();
    let v = gaussian(&mut r, 64);
    let n = 10_000;
    let mean = (0..n)
        .map(|s| decompose(&orthogonalize(s, &v).unwrap(), &a).unwrap().null_energy_fraction)
        .sum::<f64>()
        / n as f64;
    let expected = a.null_dim() as f64 / 64.0;
    assert!(((mean - expected) / expected).abs() <= 0.10, "{mean} vs {expected}");
}

#[test]
fn decomposition_reassembles_the_vector() {
    let net = net("bottleneck.json");
    let mut r = rng(19);
    let a = analyze(&jacobian_at(&net, &prompt(&mut r, net.d())).unwrap(), EPS).unwrap();
    for _ in 0..20 {
        let v = gaussian(&mut r, net.d());
        let dec = decompose(&v, &a).unwrap();
        assert!((&dec.row_component + &dec.null_component - &v).amax() <= 1e-12);
        assert!(dec.row_component.dot(&dec.null_component).abs() <= 1e-10);
        let f = dec.null_component.norm_squared() / v.norm_squared();
        assert!((f - dec.null_energy_fraction).abs() <= 1e-12);
    }
}
