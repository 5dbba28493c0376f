//! Truncated Fock-space linear algebra for two bosonic modes and an optional
//! spectator qubit.
//!
//! Basis ordering is row-major with the qubit slowest, then the axial mode
//! `a`, then the radial mode `b` fastest:
//!
//! ```text
//! index = (q * (n_a_max + 1) + n_a) * (n_b_max + 1) + n_b
//! ```
//!
//! with `q = 0` for `|down>` and `q = 1` for `|up>`. Single-mode operators
//! (used for radial state preparation) live on a plain `n_max + 1`
//! dimensional space and use the same ladder conventions.

use std::collections::BTreeMap;
use std::ops::{Add, Mul, Sub};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

const HERMITIAN_TOL: f64 = 1e-12;
const NORM_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Qubit {
    Down,
    Up,
}

impl Qubit {
    fn index(self) -> usize {
        match self {
            Qubit::Down => 0,
            Qubit::Up => 1,
        }
    }
}

/// Truncation of the two oscillator spaces (`n_max + 1` levels each).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FockCutoff {
    pub n_a_max: usize,
    pub n_b_max: usize,
    pub with_qubit: bool,
}

impl Default for FockCutoff {
    fn default() -> Self {
        Self {
            n_a_max: 6,
            n_b_max: 20,
            with_qubit: false,
        }
    }
}

impl FockCutoff {
    pub fn new(n_a_max: usize, n_b_max: usize, with_qubit: bool) -> Result<Self> {
        let cutoff = Self {
            n_a_max,
            n_b_max,
            with_qubit,
        };
        cutoff.validate()?;
        Ok(cutoff)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_a_max < 1 {
            return Err(Error::InvalidCutoff(format!(
                "n_a_max = {} but at least 1 is required",
                self.n_a_max
            )));
        }
        // the trilinear coupling moves radial quanta in pairs
        if self.n_b_max < 2 {
            return Err(Error::InvalidCutoff(format!(
                "n_b_max = {} but at least 2 is required",
                self.n_b_max
            )));
        }
        Ok(())
    }

    pub fn with_qubit(self, with_qubit: bool) -> Self {
        Self { with_qubit, ..self }
    }

    pub fn dim_a(&self) -> usize {
        self.n_a_max + 1
    }

    pub fn dim_b(&self) -> usize {
        self.n_b_max + 1
    }

    pub fn dim_qubit(&self) -> usize {
        if self.with_qubit {
            2
        } else {
            1
        }
    }

    pub fn dim(&self) -> usize {
        self.dim_a() * self.dim_b() * self.dim_qubit()
    }

    /// Linear index of `|q, n_a, n_b>`. Without a qubit factor the qubit label
    /// must be `None` or `Some(Down)`.
    pub fn index(&self, n_a: usize, n_b: usize, qubit: Option<Qubit>) -> Result<usize> {
        if n_a > self.n_a_max {
            return Err(Error::IndexOutOfRange {
                name: "n_a",
                value: n_a,
                max: self.n_a_max,
            });
        }
        if n_b > self.n_b_max {
            return Err(Error::IndexOutOfRange {
                name: "n_b",
                value: n_b,
                max: self.n_b_max,
            });
        }
        let q = match qubit {
            None => 0,
            Some(q) if self.with_qubit => q.index(),
            Some(Qubit::Down) => 0,
            Some(Qubit::Up) => return Err(Error::MissingQubit),
        };
        Ok((q * self.dim_a() + n_a) * self.dim_b() + n_b)
    }

    /// Inverse of [`FockCutoff::index`].
    pub fn labels(&self, index: usize) -> BasisLabel {
        let n_b = index % self.dim_b();
        let rest = index / self.dim_b();
        let n_a = rest % self.dim_a();
        let qubit = if rest / self.dim_a() == 0 {
            Qubit::Down
        } else {
            Qubit::Up
        };
        BasisLabel { qubit, n_a, n_b }
    }

    pub fn basis(&self) -> impl Iterator<Item = BasisLabel> + '_ {
        (0..self.dim()).map(move |k| self.labels(k))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BasisLabel {
    pub qubit: Qubit,
    pub n_a: usize,
    pub n_b: usize,
}

/// Square complex matrix on a truncated Fock space. Hamiltonians are stored
/// divided by hbar, i.e. in rad/s.
#[derive(Clone, Debug, PartialEq)]
pub struct FockOperator {
    matrix: CMatrix,
    hermitian: bool,
}

impl FockOperator {
    pub fn new(matrix: CMatrix) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::NotSquare {
                rows: matrix.nrows(),
                cols: matrix.ncols(),
            });
        }
        Ok(Self {
            matrix,
            hermitian: false,
        })
    }

    /// Wraps `matrix` and verifies `max|M - M^dag| < 1e-12 max|M|`.
    pub fn hermitian(matrix: CMatrix) -> Result<Self> {
        let mut op = Self::new(matrix)?;
        op.check_hermitian()?;
        op.hermitian = true;
        Ok(op)
    }

    pub fn from_real(matrix: DMatrix<f64>) -> Result<Self> {
        Self::new(matrix.map(|x| C64::new(x, 0.0)))
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: CMatrix::identity(dim, dim),
            hermitian: true,
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            matrix: CMatrix::zeros(dim, dim),
            hermitian: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn max_abs(&self) -> f64 {
        self.matrix.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn asymmetry(&self) -> f64 {
        let n = self.dim();
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in i..n {
                let d = (self.matrix[(i, j)] - self.matrix[(j, i)].conj()).norm();
                worst = worst.max(d);
            }
        }
        worst
    }

    pub fn check_hermitian(&self) -> Result<()> {
        let asymmetry = self.asymmetry();
        let scale = self.max_abs();
        if asymmetry > HERMITIAN_TOL * scale {
            return Err(Error::NotHermitian { asymmetry, scale });
        }
        Ok(())
    }

    /// Marks the operator Hermitian after verification.
    pub fn into_hermitian(mut self) -> Result<Self> {
        self.check_hermitian()?;
        self.hermitian = true;
        Ok(self)
    }

    pub fn adjoint(&self) -> Self {
        Self {
            matrix: self.matrix.adjoint(),
            hermitian: self.hermitian,
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            matrix: &self.matrix * C64::new(factor, 0.0),
            hermitian: self.hermitian,
        }
    }

    pub fn commutator(&self, other: &Self) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Self::new(&self.matrix * &other.matrix - &other.matrix * &self.matrix)
    }

    pub fn apply(&self, v: &CVector) -> Result<CVector> {
        check_dim(self.dim(), v.len())?;
        Ok(&self.matrix * v)
    }

    /// Extracts the principal sub-block spanned by `indices`.
    pub fn submatrix(&self, indices: &[usize]) -> CMatrix {
        CMatrix::from_fn(indices.len(), indices.len(), |i, j| {
            self.matrix[(indices[i], indices[j])]
        })
    }
}

impl<'a> Add<&'a FockOperator> for &'a FockOperator {
    type Output = FockOperator;

    fn add(self, rhs: &'a FockOperator) -> FockOperator {
        FockOperator {
            matrix: &self.matrix + &rhs.matrix,
            hermitian: self.hermitian && rhs.hermitian,
        }
    }
}

impl<'a> Sub<&'a FockOperator> for &'a FockOperator {
    type Output = FockOperator;

    fn sub(self, rhs: &'a FockOperator) -> FockOperator {
        FockOperator {
            matrix: &self.matrix - &rhs.matrix,
            hermitian: self.hermitian && rhs.hermitian,
        }
    }
}

impl<'a> Mul<&'a FockOperator> for &'a FockOperator {
    type Output = FockOperator;

    fn mul(self, rhs: &'a FockOperator) -> FockOperator {
        FockOperator {
            matrix: &self.matrix * &rhs.matrix,
            hermitian: false,
        }
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Single-mode annihilation operator on `dim` levels: `<n-1|b|n> = sqrt(n)`.
pub fn ladder(dim: usize) -> CMatrix {
    let mut m = CMatrix::zeros(dim, dim);
    for n in 1..dim {
        m[(n - 1, n)] = C64::new((n as f64).sqrt(), 0.0);
    }
    m
}

/// Single-mode number operator on `dim` levels.
pub fn number(dim: usize) -> CMatrix {
    CMatrix::from_diagonal(&CVector::from_fn(dim, |n, _| C64::new(n as f64, 0.0)))
}

/// Annihilation operator of `mode` embedded in the full (qubit x a x b) space.
pub fn annihilation_op(cutoff: &FockCutoff, mode: Mode) -> Result<FockOperator> {
    cutoff.validate()?;
    let dim = cutoff.dim();
    let mut m = CMatrix::zeros(dim, dim);
    for (col, label) in cutoff.basis().enumerate() {
        let (n, lowered) = match mode {
            Mode::A if label.n_a > 0 => (label.n_a, (label.n_a - 1, label.n_b)),
            Mode::B if label.n_b > 0 => (label.n_b, (label.n_a, label.n_b - 1)),
            _ => continue,
        };
        let row = cutoff.index(lowered.0, lowered.1, Some(label.qubit))?;
        m[(row, col)] = C64::new((n as f64).sqrt(), 0.0);
    }
    FockOperator::new(m)
}

pub fn creation_op(cutoff: &FockCutoff, mode: Mode) -> Result<FockOperator> {
    Ok(annihilation_op(cutoff, mode)?.adjoint())
}

/// Diagonal number operator of `mode`.
pub fn number_op(cutoff: &FockCutoff, mode: Mode) -> Result<FockOperator> {
    cutoff.validate()?;
    Ok(diagonal_op(cutoff, |l| match mode {
        Mode::A => l.n_a as f64,
        Mode::B => l.n_b as f64,
    }))
}

/// `sigma_+ = |up><down|` on the qubit factor.
pub fn sigma_plus(cutoff: &FockCutoff) -> Result<FockOperator> {
    if !cutoff.with_qubit {
        return Err(Error::MissingQubit);
    }
    let dim = cutoff.dim();
    let half = dim / 2;
    let mut m = CMatrix::zeros(dim, dim);
    for k in 0..half {
        m[(k + half, k)] = C64::new(1.0, 0.0);
    }
    FockOperator::new(m)
}

/// Projector onto the qubit `|up>` subspace.
pub fn qubit_up_projector(cutoff: &FockCutoff) -> Result<FockOperator> {
    if !cutoff.with_qubit {
        return Err(Error::MissingQubit);
    }
    Ok(diagonal_op(cutoff, |l| match l.qubit {
        Qubit::Up => 1.0,
        Qubit::Down => 0.0,
    }))
}

/// Diagonal operator with entries `f(label)`.
pub fn diagonal_op(cutoff: &FockCutoff, f: impl Fn(BasisLabel) -> f64) -> FockOperator {
    let diag = CVector::from_iterator(cutoff.dim(), cutoff.basis().map(|l| C64::new(f(l), 0.0)));
    FockOperator {
        matrix: CMatrix::from_diagonal(&diag),
        hermitian: true,
    }
}

/// Pure or mixed state on a truncated space.
#[derive(Clone, Debug, PartialEq)]
pub enum FockState {
    Pure(CVector),
    Mixed(CMatrix),
}

impl FockState {
    pub fn pure(psi: CVector) -> Result<Self> {
        let norm = psi.norm();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::InvalidState(format!(
                "pure state norm {norm:.12} differs from 1"
            )));
        }
        Ok(Self::Pure(psi))
    }

    /// Normalizes `psi`; fails on the zero vector.
    pub fn pure_normalized(psi: CVector) -> Result<Self> {
        let norm = psi.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidState("cannot normalize zero vector".into()));
        }
        Ok(Self::Pure(psi / C64::new(norm, 0.0)))
    }

    pub fn mixed(rho: CMatrix) -> Result<Self> {
        let op = FockOperator::hermitian(rho)?;
        let trace = op.matrix.trace();
        if (trace.re - 1.0).abs() > NORM_TOL || trace.im.abs() > NORM_TOL {
            return Err(Error::InvalidState(format!(
                "density matrix trace {trace} differs from 1"
            )));
        }
        let eig = eigh(&op)?;
        let lowest = eig.values.first().copied().unwrap_or(0.0);
        if lowest < -NORM_TOL {
            return Err(Error::InvalidState(format!(
                "density matrix has negative eigenvalue {lowest:.3e}"
            )));
        }
        Ok(Self::Mixed(op.matrix))
    }

    /// Diagonal density matrix from (already normalized) populations.
    pub fn from_populations(p: &[f64]) -> Result<Self> {
        let sum: f64 = p.iter().sum();
        if p.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > NORM_TOL {
            return Err(Error::InvalidState(format!(
                "populations must be non-negative and sum to 1 (sum = {sum:.12})"
            )));
        }
        let diag = CVector::from_iterator(p.len(), p.iter().map(|&x| C64::new(x, 0.0)));
        Ok(Self::Mixed(CMatrix::from_diagonal(&diag)))
    }

    pub fn basis(dim: usize, index: usize) -> Result<Self> {
        if index >= dim {
            return Err(Error::IndexOutOfRange {
                name: "basis index",
                value: index,
                max: dim.saturating_sub(1),
            });
        }
        let mut v = CVector::zeros(dim);
        v[index] = C64::new(1.0, 0.0);
        Ok(Self::Pure(v))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Pure(v) => v.len(),
            Self::Mixed(m) => m.nrows(),
        }
    }

    pub fn is_pure(&self) -> bool {
        matches!(self, Self::Pure(_))
    }

    pub fn density(&self) -> CMatrix {
        match self {
            Self::Pure(v) => v * v.adjoint(),
            Self::Mixed(m) => m.clone(),
        }
    }

    /// Diagonal of the density matrix in the Fock basis.
    pub fn populations(&self) -> Vec<f64> {
        match self {
            Self::Pure(v) => v.iter().map(|z| z.norm_sqr()).collect(),
            Self::Mixed(m) => (0..m.nrows()).map(|k| m[(k, k)].re).collect(),
        }
    }

    /// `<psi|psi>` or `Tr(rho)`.
    pub fn trace(&self) -> f64 {
        match self {
            Self::Pure(v) => v.norm_squared(),
            Self::Mixed(m) => m.trace().re,
        }
    }
}

/// Eigendecomposition `H V = V diag(values)` with ascending eigenvalues.
#[derive(Clone, Debug)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: CMatrix,
}

impl Eigen {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `exp(-i H t)`.
    pub fn propagator(&self, t: f64) -> CMatrix {
        let phases = CVector::from_iterator(
            self.values.len(),
            self.values.iter().map(|&e| C64::from_polar(1.0, -e * t)),
        );
        let mut vp = self.vectors.clone();
        for (j, mut col) in vp.column_iter_mut().enumerate() {
            col *= phases[j];
        }
        vp * self.vectors.adjoint()
    }

    pub fn evolve(&self, state: &FockState, t: f64) -> Result<FockState> {
        check_dim(self.dim(), state.dim())?;
        Ok(match state {
            FockState::Pure(psi) => {
                // rotate into the eigenbasis, apply phases, rotate back
                let mut c = self.vectors.ad_mul(psi);
                for (k, ck) in c.iter_mut().enumerate() {
                    *ck *= C64::from_polar(1.0, -self.values[k] * t);
                }
                FockState::Pure(&self.vectors * c)
            }
            FockState::Mixed(rho) => {
                let u = self.propagator(t);
                FockState::Mixed(&u * rho * u.adjoint())
            }
        })
    }

    pub fn reconstruct(&self) -> CMatrix {
        let mut vl = self.vectors.clone();
        for (j, mut col) in vl.column_iter_mut().enumerate() {
            col *= C64::new(self.values[j], 0.0);
        }
        vl * self.vectors.adjoint()
    }
}

fn is_real(m: &CMatrix) -> bool {
    m.iter().all(|z| z.im == 0.0)
}

/// Dense Hermitian eigensolver. Real symmetric input takes the real path.
fn eigh_matrix(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), CMatrix::zeros(0, 0));
    }
    let (values, vectors): (Vec<f64>, CMatrix) = if is_real(m) {
        let re = m.map(|z| z.re);
        let eig = re.symmetric_eigen();
        (
            eig.eigenvalues.iter().copied().collect(),
            eig.eigenvectors.map(|x| C64::new(x, 0.0)),
        )
    } else {
        let eig = m.clone().symmetric_eigen();
        (eig.eigenvalues.iter().copied().collect(), eig.eigenvectors)
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let sorted_values = order.iter().map(|&k| values[k]).collect();
    let sorted_vectors = CMatrix::from_fn(n, n, |i, j| vectors[(i, order[j])]);
    (sorted_values, sorted_vectors)
}

/// Eigenvalues (ascending) and orthonormal eigenvectors of a Hermitian
/// operator.
pub fn eigh(h: &FockOperator) -> Result<Eigen> {
    h.check_hermitian()?;
    let (values, vectors) = eigh_matrix(&h.matrix);
    Ok(Eigen { values, vectors })
}

/// Diagonalization of one symmetry block.
#[derive(Clone, Debug)]
pub struct BlockEigen {
    pub charge: i64,
    /// Full-space basis indices spanning the block.
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    /// Columns are eigenvectors in block coordinates.
    pub vectors: CMatrix,
}

impl BlockEigen {
    /// `|<indices[local]|eigenvector j>|^2`.
    pub fn weight(&self, local: usize, j: usize) -> f64 {
        self.vectors[(local, j)].norm_sqr()
    }
}

/// Diagonalizes `h` block by block, where `charges[k]` is the conserved
/// quantum number of basis state `k`. Fails if `h` couples different charges.
pub fn eigh_blocks(h: &FockOperator, charges: &[i64]) -> Result<Vec<BlockEigen>> {
    h.check_hermitian()?;
    check_dim(h.dim(), charges.len())?;
    let scale = h.max_abs();
    let m = h.matrix();
    for i in 0..h.dim() {
        for j in 0..h.dim() {
            if charges[i] != charges[j] && m[(i, j)].norm() > HERMITIAN_TOL * scale {
                return Err(Error::InvalidParameter(format!(
                    "operator couples charges {} and {} (element {:.3e})",
                    charges[i],
                    charges[j],
                    m[(i, j)].norm()
                )));
            }
        }
    }
    let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (k, &c) in charges.iter().enumerate() {
        groups.entry(c).or_default().push(k);
    }
    Ok(groups
        .into_iter()
        .map(|(charge, indices)| {
            let (values, vectors) = eigh_matrix(&h.submatrix(&indices));
            BlockEigen {
                charge,
                indices,
                values,
                vectors,
            }
        })
        .collect())
}

/// Assembles block eigendecompositions into a full-space [`Eigen`].
pub fn assemble_blocks(dim: usize, blocks: &[BlockEigen]) -> Eigen {
    let mut entries: Vec<(f64, usize, usize)> = blocks
        .iter()
        .enumerate()
        .flat_map(|(b, blk)| blk.values.iter().enumerate().map(move |(j, &e)| (e, b, j)))
        .collect();
    entries.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut vectors = CMatrix::zeros(dim, dim);
    for (col, &(_, b, j)) in entries.iter().enumerate() {
        let blk = &blocks[b];
        for (local, &row) in blk.indices.iter().enumerate() {
            vectors[(row, col)] = blk.vectors[(local, j)];
        }
    }
    Eigen {
        values: entries.iter().map(|e| e.0).collect(),
        vectors,
    }
}

/// `exp(-i H t) state`; mixed states evolve as `U rho U^dag`.
pub fn evolve(state: &FockState, h: &FockOperator, t: f64) -> Result<FockState> {
    check_dim(h.dim(), state.dim())?;
    if !(t >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "evolution time must be >= 0, got {t}"
        )));
    }
    eigh(h)?.evolve(state, t)
}

/// `<psi|O|psi>` or `Tr(rho O)`.
pub fn expectation(state: &FockState, op: &FockOperator) -> Result<C64> {
    check_dim(op.dim(), state.dim())?;
    Ok(match state {
        FockState::Pure(psi) => psi.dotc(&(op.matrix() * psi)),
        FockState::Mixed(rho) => (rho * op.matrix()).trace(),
    })
}

/// Fidelity `|<phi|psi>|^2` between pure states.
pub fn overlap_sqr(a: &CVector, b: &CVector) -> f64 {
    a.dotc(b).norm_sqr()
}
