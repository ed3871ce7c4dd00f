// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steering vectors and the constructions that produce equivalent ones.
//!
//! - contrastive extraction as a mean hidden-state difference,
//! - random orthogonal components and norm-matched perturbations,
//! - null-space augmentation `v + Σ cᵢuᵢ`,
//! - gauge maps `A` with the compensating weight change on the network.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jacobian::JacobianAnalysis;
use crate::scalar::Real;
use crate::seeds::{self, Stream};
use crate::toynet::{PromptInput, ToyNet};

const ORTHO_RETRIES: usize = 8;
const GAUGE_RETRIES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Extracted,
    OrthogonalPerturbed,
    /// The unit orthogonal component rescaled to `‖v‖`.
    OrthogonalComponent,
    NullAugmented,
    GaugeMapped,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector<T: Real> {
    pub v: DVector<T>,
    pub layer: usize,
    pub trait_label: String,
    pub provenance: Provenance,
    /// Earlier constructions this vector was derived from, oldest first.
    pub lineage: Vec<Provenance>,
    pub norm: T,
}

impl<T: Real> SteeringVector<T> {
    pub fn new(v: DVector<T>, layer: usize, trait_label: impl Into<String>, provenance: Provenance) -> Result<Self> {
        if v.iter().any(|x| !x.finite()) {
            return Err(Error::DegenerateVector("steering vector has non-finite entries".into()));
        }
        let norm = v.norm();
        Ok(Self {
            v,
            layer,
            trait_label: trait_label.into(),
            provenance,
            lineage: Vec::new(),
            norm,
        })
    }

    pub fn d(&self) -> usize {
        self.v.len()
    }

    /// A new vector derived from `self` by the construction `provenance`.
    pub fn derive(&self, v: DVector<T>, provenance: Provenance) -> Result<Self> {
        let mut out = Self::new(v, self.layer, self.trait_label.clone(), provenance)?;
        out.lineage = self.lineage.clone();
        out.lineage.push(self.provenance);
        Ok(out)
    }
}

/// Mean of `h⁺ − h⁻` over precomputed hidden-state pairs.
pub fn extract_from_states<T: Real>(
    pairs: &[(DVector<T>, DVector<T>)],
    layer: usize,
    trait_label: &str,
) -> Result<SteeringVector<T>> {
    let (first, _) = pairs.first().ok_or(Error::Empty("contrastive pairs"))?;
    let d = first.len();
    let mut sum = DVector::zeros(d);
    for (pos, neg) in pairs {
        if pos.len() != d || neg.len() != d {
            return Err(Error::dim("contrastive hidden state", d, pos.len().max(neg.len())));
        }
        sum += pos - neg;
    }
    let v = sum / T::lit(pairs.len() as f64);
    if v.iter().all(|x| *x == T::zero()) {
        return Err(Error::DegenerateVector("contrastive pairs produce a zero mean difference".into()));
    }
    SteeringVector::new(v, layer, trait_label, Provenance::Extracted)
}

/// Contrastive extraction at the network's injection layer.
pub fn extract<T: Real>(
    pairs: &[(PromptInput<T>, PromptInput<T>)],
    net: &ToyNet<T>,
    trait_label: &str,
) -> Result<SteeringVector<T>> {
    let states = pairs
        .iter()
        .enumerate()
        .map(|(i, (p, n))| {
            Ok((
                net.hidden_at_injection(p).map_err(|e| e.at_prompt(i))?,
                net.hidden_at_injection(n).map_err(|e| e.at_prompt(i))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    extract_from_states(&states, net.inject_layer(), trait_label)
}

/// Gram-Schmidt `raw` against `v` and normalize. `None` if `raw ∥ v`.
pub fn orthogonalize_sample<T: Real>(raw: &DVector<T>, v: &DVector<T>) -> Option<DVector<T>> {
    let v_hat = v.normalize();
    let raw_norm = raw.norm();
    let mut u = raw.clone();
    // two passes keep |<u, v̂>| at roundoff
    for _ in 0..2 {
        let proj = u.dot(&v_hat);
        u.axpy(-proj, &v_hat, T::one());
    }
    let n = u.norm();
    if !(n > raw_norm * T::lit(1e-8)) {
        return None;
    }
    Some(u / n)
}

/// Uniform random unit vector on the sphere, orthogonalized against `v`.
pub fn orthogonalize<T: Real>(seed: u64, v: &DVector<T>) -> Result<DVector<T>> {
    if !(v.norm() > T::zero()) {
        return Err(Error::DegenerateVector("cannot orthogonalize against the zero vector".into()));
    }
    for attempt in 0..ORTHO_RETRIES {
        let raw = random_direction(seed, Stream::Orthogonal, attempt as u64, v.len());
        if let Some(u) = orthogonalize_sample(&raw, v) {
            return Ok(u);
        }
    }
    Err(Error::DegenerateVector(format!(
        "orthogonal sample stayed parallel to v after {ORTHO_RETRIES} attempts"
    )))
}

/// Isotropic Gaussian direction normalized to unit length.
pub fn random_direction<T: Real>(seed: u64, stream: Stream, attempt: u64, d: usize) -> DVector<T> {
    let mut rng = seeds::rng(seed, stream, &[attempt]);
    let raw: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
    let n = raw.norm();
    raw.map(|x| T::lit(x / n))
}

/// `v′ = (v + ‖v‖·v_⊥)/√2`: same norm as `v`, half its energy along `v_⊥`.
pub fn perturb_norm_matched<T: Real>(v: &SteeringVector<T>, v_perp: &DVector<T>) -> Result<SteeringVector<T>> {
    if v_perp.len() != v.d() {
        return Err(Error::dim("orthogonal component", v.d(), v_perp.len()));
    }
    let tol = T::lit(1e-8);
    let unit_err = (v_perp.norm() - T::one()).abs();
    if unit_err > tol {
        return Err(Error::InvalidArgument(format!("orthogonal component is not unit length (off by {unit_err})")));
    }
    let inner = v_perp.dot(&v.v).abs();
    if inner > tol * v.norm {
        return Err(Error::NotOrthogonal {
            inner: inner.to_f64_lossy(),
            tol: (tol * v.norm).to_f64_lossy(),
        });
    }
    let mixed = (&v.v + v_perp * v.norm) / T::lit(2.0).sqrt();
    v.derive(mixed, Provenance::OrthogonalPerturbed)
}

/// `v + Σ cᵢuᵢ` over the analysis' null basis.
pub fn null_augment<T: Real>(
    v: &SteeringVector<T>,
    analysis: &JacobianAnalysis<T>,
    coefficients: &[T],
) -> Result<SteeringVector<T>> {
    if v.d() != analysis.d() {
        return Err(Error::dim("steering vector", analysis.d(), v.d()));
    }
    let shift = analysis.null_combination(coefficients)?;
    v.derive(&v.v + shift, Provenance::NullAugmented)
}

/// Invertible linear re-coordinatization of the injection space.
#[derive(Debug, Clone, PartialEq)]
pub struct GaugeMap<T: Real> {
    pub a: DMatrix<T>,
    pub a_inv: DMatrix<T>,
    pub condition_number: T,
}

fn condition_number<T: Real>(a: &DMatrix<T>) -> T {
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > T::zero() {
        max / min
    } else {
        T::max_value().expect("real field has a maximum")
    }
}

impl<T: Real> GaugeMap<T> {
    pub fn new(a: DMatrix<T>, condition_cap: T) -> Result<Self> {
        let d = a.nrows();
        if d == 0 || a.ncols() != d {
            return Err(Error::dim("gauge matrix", "square", format!("{:?}", a.shape())));
        }
        let mean_diag = a.trace() / T::lit(d as f64);
        let off_scalar = (&a - DMatrix::identity(d, d) * mean_diag).norm();
        if !(off_scalar > T::lit(1e-12) * a.norm()) {
            return Err(Error::Gauge("scalar multiples of the identity leave directions unchanged".into()));
        }
        let condition_number = condition_number(&a);
        if !(condition_number <= condition_cap) {
            return Err(Error::Gauge(format!(
                "condition number {condition_number} exceeds cap {condition_cap}"
            )));
        }
        let a_inv = a.clone().try_inverse().ok_or_else(|| Error::Gauge("matrix is singular".into()))?;
        let residual = (&a * &a_inv - DMatrix::identity(d, d)).norm();
        if residual > T::lit(1e-8 * d as f64) {
            return Err(Error::Gauge(format!("inverse residual {residual} too large")));
        }
        Ok(Self {
            a,
            a_inv,
            condition_number,
        })
    }

    pub fn d(&self) -> usize {
        self.a.nrows()
    }

    pub fn map_vector(&self, v: &SteeringVector<T>) -> Result<SteeringVector<T>> {
        if v.d() != self.d() {
            return Err(Error::dim("steering vector", self.d(), v.d()));
        }
        v.derive(&self.a * &v.v, Provenance::GaugeMapped)
    }
}

/// Random gauge `A = Q₁·diag(s)·Q₂ᵀ` with log-uniform singular values.
pub fn make_gauge<T: Real>(seed: u64, d: usize, condition_cap: f64) -> Result<GaugeMap<T>> {
    if !(condition_cap > 1.0) {
        return Err(Error::InvalidArgument("condition cap must exceed 1".into()));
    }
    if d < 2 {
        return Err(Error::Gauge("every 1x1 gauge is a scalar multiple of the identity".into()));
    }
    let spread = condition_cap.min(10.0).ln();
    let mut last_err = None;
    for attempt in 0..GAUGE_RETRIES {
        let mut rng = seeds::rng(seed, Stream::Gauge, &[d as u64, attempt as u64]);
        let mut orthogonal = || {
            let g: DMatrix<f64> = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
            g.qr().q()
        };
        let q1 = orthogonal();
        let q2 = orthogonal();
        let s = DVector::from_fn(d, |_, _| {
            let u: f64 = rand::Rng::random(&mut rng);
            (u * spread).exp()
        });
        let a = q1 * DMatrix::from_diagonal(&s) * q2.transpose();
        match GaugeMap::new(a.map(T::lit), T::lit(condition_cap)) {
            Ok(g) => return Ok(g),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Gauge("no gauge produced".into())))
}

/// Re-express the injection state as `h′ = A·h`.
///
/// `W′_ℓ = A·W_ℓ`, `b′_ℓ = A·b_ℓ`, and the consumer of the injection state
/// (`W_{ℓ+1}` or the unembedding) becomes `W·A⁻¹`. Steering the result with
/// `A·v` reproduces the original logits.
pub fn reparameterize<T: Real>(net: &ToyNet<T>, gauge: &GaugeMap<T>) -> Result<ToyNet<T>> {
    if gauge.d() != net.d() {
        return Err(Error::dim("gauge matrix", net.d(), gauge.d()));
    }
    let l = net.inject_layer();
    let mut out = net.clone();
    let (layers, unembed) = out.parts_mut();
    layers[l].weight = &gauge.a * &layers[l].weight;
    layers[l].bias = &gauge.a * &layers[l].bias;
    match layers.get_mut(l + 1) {
        Some(next) => next.weight = &next.weight * &gauge.a_inv,
        None => *unembed = &*unembed * &gauge.a_inv,
    }
    Ok(out)
}

/// Angle in radians between two vectors.
pub fn angle<T: Real>(a: &DVector<T>, b: &DVector<T>) -> T {
    let c = a.dot(b) / (a.norm() * b.norm());
    c.clamp(-T::one(), T::one()).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jacobian::analyze;
    use crate::toynet::{Layer, Nonlinearity};

    fn dv(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn sv(x: &[f64]) -> SteeringVector<f64> {
        SteeringVector::new(dv(x), 0, "synthetic", Provenance::Extracted).unwrap()
    }

    #[test]
    fn single_pair_extraction() {
        let v = extract_from_states(&[(dv(&[1.0, 0.0]), dv(&[0.0, 1.0]))], 0, "formality").unwrap();
        assert_eq!(v.v, dv(&[1.0, -1.0]));
        assert_eq!(v.provenance, Provenance::Extracted);
    }

    #[test]
    fn identical_pairs_are_degenerate() {
        let h = dv(&[0.3, 0.2]);
        let err = extract_from_states(&[(h.clone(), h)], 0, "t").unwrap_err();
        assert!(matches!(err, Error::DegenerateVector(_)));
        assert!(extract_from_states::<f64>(&[], 0, "t").is_err());
    }

    #[test]
    fn orthogonalize_hand_case() {
        let u = orthogonalize_sample(&dv(&[1.0, 1.0, 0.0]), &dv(&[1.0, 0.0, 0.0])).unwrap();
        assert!((u - dv(&[0.0, 1.0, 0.0])).amax() < 1e-15);
        assert!(orthogonalize_sample(&dv(&[2.0, 0.0, 0.0]), &dv(&[1.0, 0.0, 0.0])).is_none());
        assert!(orthogonalize(0, &dv(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn norm_matched_hand_case() {
        let v = sv(&[2.0, 0.0]);
        let p = perturb_norm_matched(&v, &dv(&[0.0, 1.0])).unwrap();
        let r = 2f64.sqrt();
        assert!((p.v - dv(&[r, r])).amax() < 1e-15);
        assert!((p.norm - 2.0).abs() < 1e-15);
        assert_eq!(p.provenance, Provenance::OrthogonalPerturbed);
        assert_eq!(p.lineage, vec![Provenance::Extracted]);
    }

    #[test]
    fn norm_matched_rejects_bad_inputs() {
        let v = sv(&[2.0, 0.0]);
        assert!(matches!(
            perturb_norm_matched(&v, &dv(&[0.6, 0.8])),
            Err(Error::NotOrthogonal { .. })
        ));
        assert!(perturb_norm_matched(&v, &dv(&[0.0, 2.0])).is_err());
    }

    #[test]
    fn null_augment_projection_example() {
        let a = analyze(&DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]), 1e-4).unwrap();
        let v = sv(&[1.0, 1.0, 0.0]);
        let unchanged = null_augment(&v, &a, &[0.0]).unwrap();
        assert_eq!(unchanged.v, v.v);
        // the SVD may return either sign of the kernel vector
        let sign = a.null_basis[(2, 0)].signum();
        let out = null_augment(&v, &a, &[5.0 * sign]).unwrap();
        assert!((&out.v - dv(&[1.0, 1.0, 5.0])).amax() < 1e-12);
        let jv = &a.jacobian * &v.v;
        let jv2 = &a.jacobian * &out.v;
        assert!((jv2 - &jv).amax() < 1e-12);
        assert_eq!(jv, dv(&[1.0, 1.0]));
        assert!(null_augment(&v, &a, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn gauge_validation() {
        let diag = DMatrix::from_diagonal(&dv(&[2.0, 1.0]));
        let g = GaugeMap::new(diag, 100.0).unwrap();
        assert!((g.condition_number - 2.0).abs() < 1e-12);
        let scalar = DMatrix::identity(3, 3) * 3.0;
        assert!(matches!(GaugeMap::new(scalar, 100.0), Err(Error::Gauge(_))));
        let ill = DMatrix::from_diagonal(&dv(&[1000.0, 1.0]));
        assert!(GaugeMap::new(ill, 100.0).is_err());
        assert!(make_gauge::<f64>(0, 1, 10.0).is_err());
        assert!(make_gauge::<f64>(0, 4, 1.0).is_err());
    }

    #[test]
    fn two_layer_linear_gauge_hand_computation() {
        // layer 0 is the injection site (affine), layer 1 applies tanh
        let w0 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let w1 = DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 2.0, 1.0]);
        let b0 = dv(&[1.0, -1.0]);
        let net = ToyNet::from_parts(
            vec![
                Layer { weight: w0, bias: b0 },
                Layer { weight: w1, bias: dv(&[0.0, 0.0]) },
            ],
            DMatrix::identity(2, 2),
            0,
            Nonlinearity::Tanh,
        )
        .unwrap();
        let g = GaugeMap::new(DMatrix::from_diagonal(&dv(&[2.0, 1.0])), 100.0).unwrap();
        let net2 = reparameterize(&net, &g).unwrap();
        assert_eq!(net2.layers()[0].weight, DMatrix::from_row_slice(2, 2, &[2.0, 4.0, 3.0, 4.0]));
        assert_eq!(net2.layers()[0].bias, dv(&[2.0, -1.0]));
        assert_eq!(net2.layers()[1].weight, DMatrix::from_row_slice(2, 2, &[0.25, -1.0, 1.0, 1.0]));
        assert_eq!(net2.unembed(), net.unembed());
    }

    #[test]
    fn angle_of_gauge_image_is_positive() {
        let g = make_gauge::<f64>(5, 6, 100.0).unwrap();
        let v = sv(&[0.3, -1.0, 0.2, 0.9, 0.1, -0.4]);
        let av = g.map_vector(&v).unwrap();
        assert!(angle(&v.v, &av.v) > 1e-3);
        assert_eq!(av.provenance, Provenance::GaugeMapped);
    }
}
