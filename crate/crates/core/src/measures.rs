//! Reduced states, coherence, purity and entanglement measures.

use nalgebra::{DMatrix, Matrix2};
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::evolve::DensityMatrix;

/// Eigenvalues above this magnitude count as negative.
pub const NEGATIVE_CUTOFF: f64 = 1e-10;

/// Observables recorded along a run.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObservableRecord {
    pub t: f64,
    pub coherence: f64,
    pub purity: f64,
    pub negativity: f64,
    pub pop_e: f64,
    pub pop_photon: f64,
    /// Population of `|g,0⟩`, which absorbs any excitation lost to the bath.
    pub pop_bath_proxy: f64,
}

impl ObservableRecord {
    pub const FIELDS: [&'static str; 6] =
        ["coherence", "purity", "negativity", "pop_e", "pop_photon", "pop_bath_proxy"];

    pub fn from_state(rho: &DensityMatrix) -> Result<Self> {
        let m = &rho.entries;
        let ra = partial_trace_cavity(m)?;
        let nc = m.nrows() / 2;
        let pop_photon = (0..m.nrows()).map(|k| (k % nc) as f64 * m[(k, k)].re).sum();
        Ok(Self {
            t: rho.t,
            coherence: coherence(&ra),
            purity: purity(&ra),
            negativity: negativity(m)?,
            pop_e: ra[(0, 0)].re,
            pop_photon,
            pop_bath_proxy: m[(nc, nc)].re,
        })
    }

    pub fn values(&self) -> [f64; 6] {
        [self.coherence, self.purity, self.negativity, self.pop_e, self.pop_photon, self.pop_bath_proxy]
    }

    pub fn from_values(t: f64, v: [f64; 6]) -> Self {
        Self {
            t,
            coherence: v[0],
            purity: v[1],
            negativity: v[2],
            pop_e: v[3],
            pop_photon: v[4],
            pop_bath_proxy: v[5],
        }
    }
}

fn split_dim(rho: &DMatrix<C64>) -> Result<usize> {
    let (r, c) = rho.shape();
    if r != c || r < 2 || r % 2 != 0 {
        return Err(Error::Shape(format!("expected a square 2(n+1) matrix, got {r}x{c}")));
    }
    Ok(r / 2)
}

/// `Tr_c ρ` as a 2×2 matrix in the `(e, g)` basis.
pub fn partial_trace_cavity(rho: &DMatrix<C64>) -> Result<Matrix2<C64>> {
    let nc = split_dim(rho)?;
    let mut out = Matrix2::zeros();
    for i in 0..2 {
        for j in 0..2 {
            out[(i, j)] = (0..nc).map(|n| rho[(i * nc + n, j * nc + n)]).sum();
        }
    }
    Ok(out)
}

/// `|⟨e|ρ_a|g⟩|`.
pub fn coherence(rho_a: &Matrix2<C64>) -> f64 {
    rho_a[(0, 1)].norm()
}

/// `Tr ρ_a²`.
pub fn purity(rho_a: &Matrix2<C64>) -> f64 {
    (rho_a * rho_a).trace().re
}

fn check_hermitian(rho: &DMatrix<C64>, tol: f64) -> Result<()> {
    let n = rho.nrows();
    for i in 0..n {
        for j in i..n {
            let d = (rho[(i, j)] - rho[(j, i)].conj()).norm();
            if d > tol {
                return Err(Error::Validation(format!(
                    "matrix is not Hermitian: |ρ[{i},{j}] - ρ[{j},{i}]*| = {d:e}"
                )));
            }
        }
    }
    Ok(())
}

/// Partial transpose on the atom index.
pub fn partial_transpose_atom(rho: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    let nc = split_dim(rho)?;
    Ok(DMatrix::from_fn(rho.nrows(), rho.ncols(), |r, c| {
        let (i, n) = (r / nc, r % nc);
        let (j, m) = (c / nc, c % nc);
        rho[(j * nc + n, i * nc + m)]
    }))
}

/// Sum of the magnitudes of the negative eigenvalues of `ρ^{T_A}`.
pub fn negativity(rho: &DMatrix<C64>) -> Result<f64> {
    check_hermitian(rho, 1e-6)?;
    let mut pt = partial_transpose_atom(rho)?;
    // remove the sub-tolerance anti-Hermitian part before the Hermitian solver
    let adj = pt.adjoint();
    pt = (pt + adj) * C64::new(0.5, 0.0);
    Ok(pt
        .symmetric_eigenvalues()
        .iter()
        .filter(|&&l| l < -NEGATIVE_CUTOFF)
        .map(|l| -l)
        .sum())
}

/// Wootters concurrence of a two-qubit state, from the singular values of
/// `Wᵀ (σ_y ⊗ σ_y) W` where `ρ = W W†`.
pub fn concurrence_2x2(rho: &DMatrix<C64>) -> Result<f64> {
    if rho.shape() != (4, 4) {
        return Err(Error::Shape(format!("concurrence needs a 4x4 matrix, got {:?}", rho.shape())));
    }
    check_hermitian(rho, 1e-6)?;
    let herm = (rho + rho.adjoint()) * C64::new(0.5, 0.0);
    let eig = herm.symmetric_eigen();
    let cols: Vec<_> = (0..4)
        .filter(|&k| eig.eigenvalues[k] > 1e-14)
        .map(|k| eig.eigenvectors.column(k) * C64::new(eig.eigenvalues[k].sqrt(), 0.0))
        .collect();
    if cols.is_empty() {
        return Ok(0.0);
    }
    let w = DMatrix::from_columns(&cols);
    // σ_y ⊗ σ_y is real, with ±1 on the anti-diagonal
    let mut yy = DMatrix::<C64>::zeros(4, 4);
    for (r, c, v) in [(0, 3, -1.0), (1, 2, 1.0), (2, 1, 1.0), (3, 0, -1.0)] {
        yy[(r, c)] = C64::new(v, 0.0);
    }
    let tau = w.transpose() * yy * &w;
    let mut l: Vec<f64> = tau.singular_values().iter().copied().collect();
    l.resize(4, 0.0);
    l.sort_by(|a, b| b.total_cmp(a));
    Ok((l[0] - l[1] - l[2] - l[3]).max(0.0))
}

/// Pearson correlation of two equally long series; NaN when either is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return f64::NAN;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x[..n].iter().zip(&y[..n]) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}
