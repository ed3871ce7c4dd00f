// SPDX-License-Identifier: MIT OR Apache-2.0

//! Output Jacobians with respect to the injected hidden state, and their
//! spectral analysis: effective rank, null/row-space bases, intersections
//! across prompts, and orthogonal decompositions of perturbations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Dual, Real};
use crate::toynet::{PromptInput, ToyNet};

/// Default relative singular-value threshold.
pub const DEFAULT_EPS: f64 = 1e-4;

/// Exact Jacobian `∂o/∂h_ℓ` at prompt `x`, by forward-mode differentiation.
pub fn jacobian_at<T: Real>(net: &ToyNet<T>, x: &PromptInput<T>) -> Result<DMatrix<T>> {
    let h = net.hidden_at_injection(x)?;
    jacobian_at_state(net, &h)
}

/// Jacobian of the downstream map at an arbitrary injection state.
///
/// One dual-number pass per hidden coordinate.
pub fn jacobian_at_state<T: Real>(net: &ToyNet<T>, h: &DVector<T>) -> Result<DMatrix<T>> {
    let (d, vocab) = (net.d(), net.vocab());
    if h.len() != d {
        return Err(Error::dim("injected hidden state", d, h.len()));
    }
    let mut jac = DMatrix::zeros(vocab, d);
    for j in 0..d {
        let seeded: Vec<Dual<T>> = h
            .iter()
            .enumerate()
            .map(|(k, &hk)| Dual::new(hk, if k == j { T::one() } else { T::zero() }))
            .collect();
        let out = net.downstream(seeded)?;
        for (i, o) in out.iter().enumerate() {
            jac[(i, j)] = o.eps;
        }
    }
    Ok(jac)
}

/// Central finite-difference Jacobian, `O(step²)` accurate.
pub fn finite_diff_jacobian<T: Real>(net: &ToyNet<T>, x: &PromptInput<T>, step: T) -> Result<DMatrix<T>> {
    if !(step > T::zero()) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let h = net.hidden_at_injection(x)?;
    let two = T::lit(2.0);
    let mut jac = DMatrix::zeros(net.vocab(), net.d());
    for j in 0..net.d() {
        let mut plus = h.clone();
        plus[j] += step;
        let mut minus = h.clone();
        minus[j] -= step;
        let diff = net.logits_from_injection(&plus)? - net.logits_from_injection(&minus)?;
        jac.set_column(j, &(diff / (two * step)));
    }
    Ok(jac)
}

/// Whether the discarded spectrum is numerically zero or merely small.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullRegime {
    /// No direction was discarded.
    Trivial,
    /// Every discarded singular value is at roundoff level.
    Exact,
    /// Some discarded singular value lies between roundoff and `ε·σ_max`.
    Approximate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianAnalysis<T: Real> {
    pub jacobian: DMatrix<T>,
    /// Descending, length `min(V, d)`.
    pub singular_values: Vec<T>,
    pub eps: T,
    pub rank: usize,
    /// `d × (d − rank)`, orthonormal columns.
    pub null_basis: DMatrix<T>,
    /// `d × rank`, orthonormal columns.
    pub row_basis: DMatrix<T>,
    /// `V × rank` left singular vectors matching `row_basis`.
    pub left_basis: DMatrix<T>,
    pub regime: NullRegime,
}

impl<T: Real> JacobianAnalysis<T> {
    pub fn d(&self) -> usize {
        self.jacobian.ncols()
    }

    pub fn null_dim(&self) -> usize {
        self.null_basis.ncols()
    }

    pub fn sigma_max(&self) -> T {
        self.singular_values.first().copied().unwrap_or_else(T::zero)
    }

    /// Rank zero violates the non-degeneracy assumption; kept as a valid state.
    pub fn is_degenerate(&self) -> bool {
        self.rank == 0
    }

    pub fn null_projector(&self) -> DMatrix<T> {
        &self.null_basis * self.null_basis.transpose()
    }

    pub fn row_projector(&self) -> DMatrix<T> {
        &self.row_basis * self.row_basis.transpose()
    }

    /// `U_r Σ_r V_rᵀ`.
    pub fn truncated_reconstruction(&self) -> DMatrix<T> {
        let sigma = DMatrix::from_diagonal(&DVector::from_iterator(
            self.rank,
            self.singular_values[..self.rank].iter().copied(),
        ));
        &self.left_basis * sigma * self.row_basis.transpose()
    }

    /// Linear combination `Σ cᵢ uᵢ` of null-basis columns.
    pub fn null_combination(&self, coefficients: &[T]) -> Result<DVector<T>> {
        if coefficients.len() != self.null_dim() {
            return Err(Error::dim("null-space coefficients", self.null_dim(), coefficients.len()));
        }
        Ok(&self.null_basis * DVector::from_column_slice(coefficients))
    }
}

/// Singular value decomposition with effective rank `#{σᵢ > ε·σ_max}`.
pub fn analyze<T: Real>(jacobian: &DMatrix<T>, eps: T) -> Result<JacobianAnalysis<T>> {
    if !(eps > T::zero() && eps < T::one()) {
        return Err(Error::InvalidArgument(format!("eps must lie in (0, 1), got {eps}")));
    }
    let (vocab, d) = jacobian.shape();
    if d == 0 || vocab == 0 {
        return Err(Error::Empty("jacobian"));
    }
    if jacobian.iter().any(|x| !x.finite()) {
        return Err(Error::InvalidArgument("jacobian has non-finite entries".into()));
    }
    // full SVD in f64; nalgebra's solver mis-factors exactly rank-deficient inputs
    let m = faer::Mat::<f64>::from_fn(vocab, d, |r, c| jacobian[(r, c)].to_f64_lossy());
    let svd = m
        .svd()
        .map_err(|e| Error::InvalidArgument(format!("SVD did not converge: {e:?}")))?;
    let (u, v, s) = (svd.U(), svd.V(), svd.S().column_vector());
    let keep = vocab.min(d);
    let singular_values: Vec<T> = (0..keep).map(|i| T::lit(s[i])).collect();
    let sigma_max = singular_values[0];
    let cutoff = eps * sigma_max;
    let rank = singular_values.iter().filter(|&&s| s > cutoff).count();
    let row_basis = DMatrix::from_fn(d, rank, |r, c| T::lit(v[(r, c)]));
    let null_basis = DMatrix::from_fn(d, d - rank, |r, c| T::lit(v[(r, rank + c)]));
    let left_basis = DMatrix::from_fn(vocab, rank, |r, c| T::lit(u[(r, c)]));
    let roundoff = T::default_epsilon() * T::lit((vocab.max(d) * 64) as f64) * sigma_max;
    let regime = if rank == d {
        NullRegime::Trivial
    } else if singular_values[rank..].iter().all(|&s| s <= roundoff) {
        NullRegime::Exact
    } else {
        NullRegime::Approximate
    };

    Ok(JacobianAnalysis {
        jacobian: jacobian.clone(),
        singular_values,
        eps,
        rank,
        null_basis,
        row_basis,
        left_basis,
        regime,
    })
}

/// Stack the rows of several Jacobians and re-analyze.
pub fn stack<T: Real>(analyses: &[JacobianAnalysis<T>]) -> Result<JacobianAnalysis<T>> {
    let first = analyses.first().ok_or(Error::Empty("analyses"))?;
    let d = first.d();
    let mut rows_total = 0;
    for a in analyses {
        if a.d() != d {
            return Err(Error::dim("stacked jacobian columns", d, a.d()));
        }
        rows_total += a.jacobian.nrows();
    }
    let mut stacked = DMatrix::zeros(rows_total, d);
    let mut offset = 0;
    for a in analyses {
        let rows = a.jacobian.nrows();
        stacked.view_mut((offset, 0), (rows, d)).copy_from(&a.jacobian);
        offset += rows;
    }
    analyze(&stacked, first.eps)
}

/// Orthonormal basis of `⋂ᵢ ker_ε(Jᵢ)`.
pub fn stacked_nullspace<T: Real>(analyses: &[JacobianAnalysis<T>]) -> Result<DMatrix<T>> {
    Ok(stack(analyses)?.null_basis)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition<T: Real> {
    pub row_component: DVector<T>,
    pub null_component: DVector<T>,
    /// `‖null‖² / ‖v‖²`.
    pub null_energy_fraction: T,
}

pub fn decompose<T: Real>(v: &DVector<T>, analysis: &JacobianAnalysis<T>) -> Result<Decomposition<T>> {
    if v.len() != analysis.d() {
        return Err(Error::dim("perturbation", analysis.d(), v.len()));
    }
    let energy = v.norm_squared();
    if energy == T::zero() {
        return Err(Error::DegenerateVector("cannot decompose the zero vector".into()));
    }
    let row_component = &analysis.row_basis * (analysis.row_basis.transpose() * v);
    let null_coords = analysis.null_basis.transpose() * v;
    let null_component = &analysis.null_basis * &null_coords;
    Ok(Decomposition {
        row_component,
        null_energy_fraction: null_coords.norm_squared() / energy,
        null_component,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toynet::{EnvKind, Layer, Nonlinearity};

    fn projection_3d() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }

    #[test]
    fn linear_network_jacobian_is_the_unembedding() {
        let u = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let layer = Layer {
            weight: DMatrix::identity(3, 3),
            bias: DVector::zeros(3),
        };
        let net = ToyNet::from_parts(vec![layer], u.clone(), 0, Nonlinearity::Tanh).unwrap();
        let x = PromptInput::new(DVector::from_vec(vec![0.3, -0.2, 0.9]), EnvKind::Id);
        assert_eq!(jacobian_at(&net, &x).unwrap(), u);
        let fd = finite_diff_jacobian(&net, &x, 1e-3).unwrap();
        assert!((fd - &u).amax() < 1e-12);
    }

    #[test]
    fn projection_example_kernel() {
        let a = analyze(&projection_3d(), 1e-4).unwrap();
        assert_eq!(a.rank, 2);
        assert_eq!(a.null_dim(), 1);
        assert_eq!(a.regime, NullRegime::Exact);
        let u = a.null_basis.column(0);
        assert!((u[2].abs() - 1.0).abs() < 1e-12);
        assert!(u[0].abs() < 1e-12 && u[1].abs() < 1e-12);
    }

    #[test]
    fn rank_threshold_is_strict() {
        let j = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5, 1e-9]));
        let a = analyze(&j, 1e-4).unwrap();
        assert_eq!(a.rank, 2);
        assert_eq!(a.regime, NullRegime::Approximate);
        // σ exactly at the cutoff is excluded
        let j = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.25]));
        assert_eq!(analyze(&j, 0.25).unwrap().rank, 1);
    }

    #[test]
    fn zero_jacobian_is_degenerate_not_an_error() {
        let a = analyze(&DMatrix::<f64>::zeros(2, 3), 1e-4).unwrap();
        assert_eq!(a.rank, 0);
        assert!(a.is_degenerate());
        assert!((a.null_projector() - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn eps_must_be_in_unit_interval() {
        assert!(analyze(&projection_3d(), 0.0).is_err());
        assert!(analyze(&projection_3d(), 1.0).is_err());
    }

    #[test]
    fn stacking_identical_is_idempotent() {
        let a = analyze(&projection_3d(), 1e-4).unwrap();
        let s = stacked_nullspace(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(s.ncols(), 1);
        assert!((s.column(0).dot(&a.null_basis.column(0)).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_intersection_is_trivial() {
        let j1 = analyze(&projection_3d(), 1e-4).unwrap();
        let j2 = analyze(&DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]), 1e-4).unwrap();
        assert_eq!(stacked_nullspace(&[j1, j2]).unwrap().ncols(), 0);
        assert!(stacked_nullspace::<f64>(&[]).is_err());
    }

    #[test]
    fn decompose_extremes() {
        let a = analyze(&projection_3d(), 1e-4).unwrap();
        let inside = decompose(&DVector::from_vec(vec![0.0, 0.0, 2.0]), &a).unwrap();
        assert!((inside.null_energy_fraction - 1.0).abs() < 1e-12);
        let outside = decompose(&DVector::from_vec(vec![1.0, -3.0, 0.0]), &a).unwrap();
        assert!(outside.null_energy_fraction.abs() < 1e-12);
        assert!(decompose(&DVector::zeros(3), &a).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let j = DMatrix::<f32>::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let a = analyze(&j, 1e-4).unwrap();
        assert_eq!(a.rank + a.null_dim(), 3);
    }
}
