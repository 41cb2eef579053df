//! Finite-dimensional statistical operators on the product space
//! `H_q ⊗ H_t`.
//!
//! Only the span of the retained eigenvectors is represented. There both
//! the energy generator `ŝ` and the time generator `t̂` act diagonally on the
//! second factor, so the commutation relation between them cannot hold and
//! is never asserted. What survives truncation exactly is that the canonical
//! state commutes with either generator and is invariant under the unitary
//! flow each one generates (ħ = 1).
//!
//! Index layout: basis vector `|i⟩ ⊗ |j⟩` sits at position `i·n₂ + j`.

use std::fmt;

use nalgebra::{Complex, DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::ensemble::{boltzmann_weights, EnsembleError};
use crate::spectra::Spectrum;

pub type C64 = Complex<f64>;
pub type CMatrix = DMatrix<C64>;

/// Largest operator dimension built unless a caller raises the cap.
pub const DEFAULT_MAX_DIM: usize = 4096;
pub const HERMITIAN_TOL: f64 = 1e-12;
pub const TRACE_TOL: f64 = 1e-12;
pub const PSD_TOL: f64 = 1e-12;

const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITER: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error("matrix is {rows}x{cols}, expected a non-empty square matrix")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not Hermitian (max deviation {0:e})")]
    NotHermitian(f64),
    #[error("trace is {0}, expected 1")]
    TraceNotOne(f64),
    #[error("matrix has eigenvalue {0:e} below zero")]
    NotPositive(f64),
    #[error("projector index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("dimension must be at least 1")]
    ZeroDim,
    #[error("dimension {dim} exceeds the cap of {max}")]
    DimensionCap { dim: usize, max: usize },
    #[error("canonical state requires non-degenerate levels")]
    DegenerateLevels,
    #[error("layout second factor has dimension {layout}, spectrum has {levels} levels")]
    LayoutMismatch { layout: usize, levels: usize },
    #[error("operator dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("Hermitian eigendecomposition did not converge")]
    EigenFailure,
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

/// Largest entry modulus.
pub fn max_norm(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn check_square(m: &CMatrix) -> Result<(), OperatorError> {
    if m.nrows() == 0 || m.nrows() != m.ncols() {
        return Err(OperatorError::NotSquare { rows: m.nrows(), cols: m.ncols() });
    }
    Ok(())
}

fn hermitian_deviation(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut dev: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            dev = dev.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    dev
}

fn is_diagonal(m: &CMatrix) -> bool {
    let n = m.nrows();
    (0..n).all(|i| (0..n).all(|j| i == j || m[(i, j)] == C64::new(0.0, 0.0)))
}

/// Eigenvalues of a Hermitian matrix, ascending.
fn hermitian_eigenvalues(m: &CMatrix) -> Result<Vec<f64>, OperatorError> {
    let mut vals: Vec<f64> = if is_diagonal(m) {
        m.diagonal().iter().map(|z| z.re).collect()
    } else {
        SymmetricEigen::try_new(m.clone(), EIGEN_EPS, EIGEN_MAX_ITER)
            .ok_or(OperatorError::EigenFailure)?
            .eigenvalues
            .iter()
            .copied()
            .collect()
    };
    vals.sort_by(f64::total_cmp);
    Ok(vals)
}

/// Square matrix equal to its conjugate transpose within [`HERMITIAN_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianOperator {
    entries: CMatrix,
}

impl HermitianOperator {
    pub fn new(entries: CMatrix) -> Result<Self, OperatorError> {
        check_square(&entries)?;
        let dev = hermitian_deviation(&entries);
        if !(dev <= HERMITIAN_TOL) {
            return Err(OperatorError::NotHermitian(dev));
        }
        Ok(HermitianOperator { entries })
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Result<Self, OperatorError> {
        if diag.is_empty() {
            return Err(OperatorError::ZeroDim);
        }
        let v: Vec<C64> = diag.iter().map(|&x| C64::new(x, 0.0)).collect();
        Ok(HermitianOperator { entries: CMatrix::from_diagonal(&nalgebra::DVector::from_vec(v)) })
    }

    pub fn identity(dim: usize) -> Result<Self, OperatorError> {
        if dim == 0 {
            return Err(OperatorError::ZeroDim);
        }
        Ok(HermitianOperator { entries: CMatrix::identity(dim, dim) })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace().re
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>, OperatorError> {
        hermitian_eigenvalues(&self.entries)
    }
}

impl AsRef<CMatrix> for HermitianOperator {
    fn as_ref(&self) -> &CMatrix {
        &self.entries
    }
}

/// Hermitian, unit-trace, positive semi-definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator {
    entries: CMatrix,
}

impl DensityOperator {
    pub fn new(entries: CMatrix) -> Result<Self, OperatorError> {
        let h = HermitianOperator::new(entries)?;
        let tr = h.entries.trace();
        if !((tr.re - 1.0).abs() <= TRACE_TOL && tr.im.abs() <= TRACE_TOL) {
            return Err(OperatorError::TraceNotOne(tr.re));
        }
        let min = h.eigenvalues()?[0];
        if !(min >= -PSD_TOL) {
            return Err(OperatorError::NotPositive(min));
        }
        Ok(DensityOperator { entries: h.entries })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace().re
    }

    /// Real parts of the diagonal.
    pub fn diagonal(&self) -> Vec<f64> {
        self.entries.diagonal().iter().map(|z| z.re).collect()
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>, OperatorError> {
        hermitian_eigenvalues(&self.entries)
    }
}

impl AsRef<CMatrix> for DensityOperator {
    fn as_ref(&self) -> &CMatrix {
        &self.entries
    }
}

/// Factor dimensions of `H_q ⊗ H_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorLayout {
    pub first: usize,
    pub second: usize,
}

impl TensorLayout {
    /// One retained eigenvector per level in each factor.
    pub fn for_spectrum(spectrum: &Spectrum) -> Self {
        TensorLayout { first: spectrum.len(), second: spectrum.len() }
    }

    pub fn dim(&self) -> usize {
        self.first * self.second
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.second + j
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    /// Energy operator; generates time translations.
    SHat,
    /// Time operator; generates energy translations.
    THat,
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Generator::SHat => f.write_str("s_hat"),
            Generator::THat => f.write_str("t_hat"),
        }
    }
}

/// `|index⟩⟨index|` in dimension `dim`.
pub fn projector(index: usize, dim: usize) -> Result<HermitianOperator, OperatorError> {
    if dim == 0 {
        return Err(OperatorError::ZeroDim);
    }
    if index >= dim {
        return Err(OperatorError::IndexOutOfRange { index, dim });
    }
    let mut m = CMatrix::zeros(dim, dim);
    m[(index, index)] = C64::new(1.0, 0.0);
    Ok(HermitianOperator { entries: m })
}

pub fn tensor(a: &HermitianOperator, b: &HermitianOperator) -> Result<HermitianOperator, OperatorError> {
    tensor_with_cap(a, b, DEFAULT_MAX_DIM)
}

/// Kronecker product `a ⊗ b`, refusing results larger than `max_dim`.
pub fn tensor_with_cap(
    a: &HermitianOperator,
    b: &HermitianOperator,
    max_dim: usize,
) -> Result<HermitianOperator, OperatorError> {
    let dim = a
        .dim()
        .checked_mul(b.dim())
        .ok_or(OperatorError::DimensionCap { dim: usize::MAX, max: max_dim })?;
    if dim > max_dim {
        return Err(OperatorError::DimensionCap { dim, max: max_dim });
    }
    Ok(HermitianOperator { entries: a.entries.kronecker(&b.entries) })
}

pub fn assemble_canonical_state(spectrum: &Spectrum, rate: f64) -> Result<DensityOperator, OperatorError> {
    assemble_canonical_state_with_cap(spectrum, rate, DEFAULT_MAX_DIM)
}

/// `(1/Z)·Σ_i e^{-rate·x_i}·|i⟩⟨i| ⊗ |i⟩⟨i|` on the `n·n` product space.
pub fn assemble_canonical_state_with_cap(
    spectrum: &Spectrum,
    rate: f64,
    max_dim: usize,
) -> Result<DensityOperator, OperatorError> {
    if !spectrum.has_unit_degeneracies() {
        return Err(OperatorError::DegenerateLevels);
    }
    let layout = TensorLayout::for_spectrum(spectrum);
    let dim = spectrum
        .len()
        .checked_mul(spectrum.len())
        .filter(|&d| d <= max_dim)
        .ok_or(OperatorError::DimensionCap { dim: layout.dim(), max: max_dim })?;
    let weights = boltzmann_weights(spectrum, rate)?;
    let mut m = CMatrix::zeros(dim, dim);
    for (i, &p) in weights.probs().iter().enumerate() {
        let k = layout.index(i, i);
        m[(k, k)] = C64::new(p, 0.0);
    }
    DensityOperator::new(m)
}

/// `I ⊗ diag(x_1..x_n)`: the generator restricted to the retained
/// eigenvectors, where it is diagonal for either choice of `which`.
pub fn generator_operator(
    spectrum: &Spectrum,
    which: Generator,
    layout: TensorLayout,
) -> Result<HermitianOperator, OperatorError> {
    let _ = which;
    if layout.second != spectrum.len() {
        return Err(OperatorError::LayoutMismatch { layout: layout.second, levels: spectrum.len() });
    }
    if layout.first == 0 {
        return Err(OperatorError::ZeroDim);
    }
    let values: Vec<f64> = spectrum.values().collect();
    let diag: Vec<f64> = (0..layout.first).flat_map(|_| values.iter().copied()).collect();
    HermitianOperator::from_real_diagonal(&diag)
}

/// `ab - ba`.
pub fn commutator(a: &impl AsRef<CMatrix>, b: &impl AsRef<CMatrix>) -> Result<CMatrix, OperatorError> {
    let (a, b) = (a.as_ref(), b.as_ref());
    if a.nrows() != b.nrows() {
        return Err(OperatorError::DimMismatch(a.nrows(), b.nrows()));
    }
    Ok(a * b - b * a)
}

/// `U·ρ·U†` with `U = exp(-i·generator·τ)`.
pub fn conjugate_by_generated_unitary(
    rho: &DensityOperator,
    generator: &HermitianOperator,
    tau: f64,
) -> Result<DensityOperator, OperatorError> {
    if rho.dim() != generator.dim() {
        return Err(OperatorError::DimMismatch(rho.dim(), generator.dim()));
    }
    if tau == 0.0 {
        return Ok(rho.clone());
    }
    let n = rho.dim();
    let g = generator.entries();
    let out = if is_diagonal(g) {
        // U is diagonal: (UρU†)_jk = e^{-i(h_j - h_k)τ}·ρ_jk
        let h: Vec<f64> = g.diagonal().iter().map(|z| z.re).collect();
        CMatrix::from_fn(n, n, |j, k| {
            if j == k {
                rho.entries[(j, k)]
            } else {
                let phase = C64::from_polar(1.0, -(h[j] - h[k]) * tau);
                phase * rho.entries[(j, k)]
            }
        })
    } else {
        let eig = SymmetricEigen::try_new(g.clone(), EIGEN_EPS, EIGEN_MAX_ITER)
            .ok_or(OperatorError::EigenFailure)?;
        let phases = nalgebra::DVector::from_iterator(
            n,
            eig.eigenvalues.iter().map(|&e| C64::from_polar(1.0, -e * tau)),
        );
        let v = &eig.eigenvectors;
        let u = v * CMatrix::from_diagonal(&phases) * v.adjoint();
        let raw = &u * &rho.entries * u.adjoint();
        (&raw + raw.adjoint()).map(|z| z * 0.5)
    };
    DensityOperator::new(out)
}
