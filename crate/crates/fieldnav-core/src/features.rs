//! Temporal feature sequences and their closed-form smoothing projection.
//!
//! A feature sequence is a `T x D` matrix `Z` whose rows are per-frame feature
//! vectors. Refinement balances three quadratic terms — fidelity to the raw
//! sequence, temporal smoothness under a second-difference operator `L`, and
//! attraction toward a motion-salience context vector `z_c` — and has the
//! closed-form minimizer
//!
//! ```text
//!   Z~ = (2I + L'L)^-1 (Z + 1 z_c')
//! ```
//!
//! where `z_c = sum_t w_t z_t` with `w = softmax(v)` and `v_t` the frame-to-
//! frame feature displacement norm (`v_0 = 0`).

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Raw per-frame features, rows = frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    data: DMatrix<f64>,
}

impl FeatureSequence {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::invalid("feature sequence must be non-empty"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature sequence"));
        }
        Ok(Self { data })
    }

    /// Frame count `T`.
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    /// Feature dimension `D`.
    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }
}

/// Output of [`refine`]: the smoothed sequence plus the context vector and
/// softmax weights that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedFeatures {
    pub data: DMatrix<f64>,
    pub context: DVector<f64>,
    pub weights: DVector<f64>,
}

/// Second-difference temporal operator with one-sided boundary rows.
///
/// Interior rows are `[-1, 2, -1]`; the first and last rows are the one-sided
/// differences `[1, -1]` and `[-1, 1]`, so `L * 1 = 0` exactly and `L` is the
/// (symmetric, PSD) path-graph Laplacian. `T = 1` yields the 1x1 zero matrix.
pub fn temporal_laplacian(t: usize) -> DMatrix<f64> {
    assert!(t >= 1, "need at least one frame");
    let mut l = DMatrix::zeros(t, t);
    if t == 1 {
        return l;
    }
    l[(0, 0)] = 1.0;
    l[(0, 1)] = -1.0;
    l[(t - 1, t - 1)] = 1.0;
    l[(t - 1, t - 2)] = -1.0;
    for i in 1..t - 1 {
        l[(i, i - 1)] = -1.0;
        l[(i, i)] = 2.0;
        l[(i, i + 1)] = -1.0;
    }
    l
}

/// Motion-salience context: `z_c = sum_t w_t z_t`, `w = softmax(v)`,
/// `v_t = |z_t - z_{t-1}|` with `v_0 = 0`.
///
/// Returns `(z_c, w)`. The softmax is computed with max-subtraction, so the
/// weights are positive and sum to one up to rounding.
pub fn context_vector(z: &FeatureSequence) -> (DVector<f64>, DVector<f64>) {
    let t = z.frames();
    let mut v = DVector::zeros(t);
    for i in 1..t {
        v[i] = (z.data.row(i) - z.data.row(i - 1)).norm();
    }
    let w = softmax(&v);
    let zc = z.data.transpose() * &w;
    (zc, w)
}

/// Numerically stable softmax.
pub fn softmax(v: &DVector<f64>) -> DVector<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w = v.map(|x| (x - max).exp());
    let sum: f64 = w.iter().sum();
    w /= sum;
    w
}

/// The quadratic objective minimized by [`refine`]:
///
/// `|Z' - Z|_F^2 + |L Z'|_F^2 + |Z' - 1 z_c'|_F^2`.
pub fn smoothing_objective(
    candidate: &DMatrix<f64>,
    raw: &DMatrix<f64>,
    context: &DVector<f64>,
) -> f64 {
    let l = temporal_laplacian(raw.nrows());
    let ones = DVector::from_element(raw.nrows(), 1.0);
    let pull = candidate - &ones * context.transpose();
    (candidate - raw).norm_squared() + (&l * candidate).norm_squared() + pull.norm_squared()
}

/// Smooths a feature sequence by the closed-form projection.
///
/// Solves `(2I + L'L) Z~ = Z + 1 z_c'` by Cholesky factorization (the system
/// matrix is symmetric positive definite) and verifies the residual.
/// Fixed points: constant sequences and any single-frame sequence.
pub fn refine(z: &FeatureSequence) -> Result<RefinedFeatures> {
    let t = z.frames();
    let (context, weights) = context_vector(z);
    let l = temporal_laplacian(t);
    let a = DMatrix::identity(t, t) * 2.0 + l.transpose() * &l;
    let ones = DVector::from_element(t, 1.0);
    let b = &z.data + &ones * context.transpose();
    let chol = nalgebra::Cholesky::new(a.clone())
        .ok_or(Error::NonFinite("feature projection system"))?;
    let solution = chol.solve(&b);
    let residual = (&a * &solution - &b).abs().max();
    if !residual.is_finite() || residual > 1e-10 {
        return Err(Error::SolverDiverged {
            residual,
            iterations: 0,
            tol: 1e-10,
        });
    }
    Ok(RefinedFeatures {
        data: solution,
        context,
        weights,
    })
}
