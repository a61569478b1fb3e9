//! Single-qubit simulation substrate.
//!
//! Everything here is exact double-precision linear algebra on `C^2`:
//! 2x2 unitaries, pure states, and the Pauli-Z expectation. Global phase is
//! never tracked; only expectation values carry meaning.
//!
//! [`StateBatch`] stores a `(B, N, M, 2)` block of states flat in row-major
//! order, one state per (batch element, output node, input node) edge.

use std::ops::Mul;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, QkanError, Result};

pub type ComplexScalar = Complex64;

const ZERO: ComplexScalar = Complex64::new(0.0, 0.0);
const ONE: ComplexScalar = Complex64::new(1.0, 0.0);

/// A 2x2 complex matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitaryMat {
    pub entries: [[ComplexScalar; 2]; 2],
}

impl UnitaryMat {
    pub const fn new(entries: [[ComplexScalar; 2]; 2]) -> Self {
        UnitaryMat { entries }
    }

    pub const fn identity() -> Self {
        UnitaryMat::new([[ONE, ZERO], [ZERO, ONE]])
    }

    pub fn adjoint(&self) -> Self {
        let e = &self.entries;
        UnitaryMat::new([[e[0][0].conj(), e[1][0].conj()], [e[0][1].conj(), e[1][1].conj()]])
    }

    pub fn det(&self) -> ComplexScalar {
        let e = &self.entries;
        e[0][0] * e[1][1] - e[0][1] * e[1][0]
    }

    /// Largest entrywise modulus of `U^dagger U - I`.
    pub fn unitarity_defect(&self) -> f64 {
        let p = self.adjoint() * *self;
        let id = UnitaryMat::identity();
        let mut worst = 0.0f64;
        for i in 0..2 {
            for j in 0..2 {
                worst = worst.max((p.entries[i][j] - id.entries[i][j]).norm());
            }
        }
        worst
    }

    /// Largest entrywise modulus of `self - other`.
    pub fn max_abs_diff(&self, other: &UnitaryMat) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..2 {
            for j in 0..2 {
                worst = worst.max((self.entries[i][j] - other.entries[i][j]).norm());
            }
        }
        worst
    }
}

impl Mul for UnitaryMat {
    type Output = UnitaryMat;

    fn mul(self, rhs: UnitaryMat) -> UnitaryMat {
        let a = &self.entries;
        let b = &rhs.entries;
        let mut out = [[ZERO; 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        UnitaryMat::new(out)
    }
}

/// `(1/sqrt 2) [[1, 1], [1, -1]]`.
pub fn hadamard() -> UnitaryMat {
    let h = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    UnitaryMat::new([[h, h], [h, -h]])
}

/// `exp(-i angle sigma_z / 2)`.
pub fn rz(angle: f64) -> Result<UnitaryMat> {
    check_finite(angle, "rz angle")?;
    Ok(rz_unchecked(angle))
}

/// `exp(-i angle sigma_y / 2)`.
pub fn ry(angle: f64) -> Result<UnitaryMat> {
    check_finite(angle, "ry angle")?;
    Ok(ry_unchecked(angle))
}

/// `rz(gamma) * ry(beta) * rz(alpha)`; covers SU(2) up to global phase.
pub fn euler_unitary(alpha: f64, beta: f64, gamma: f64) -> Result<UnitaryMat> {
    check_finite(alpha, "euler alpha")?;
    check_finite(beta, "euler beta")?;
    check_finite(gamma, "euler gamma")?;
    Ok(rz_unchecked(gamma) * ry_unchecked(beta) * rz_unchecked(alpha))
}

pub(crate) fn rz_unchecked(angle: f64) -> UnitaryMat {
    let (s, c) = (0.5 * angle).sin_cos();
    UnitaryMat::new([[Complex64::new(c, -s), ZERO], [ZERO, Complex64::new(c, s)]])
}

pub(crate) fn ry_unchecked(angle: f64) -> UnitaryMat {
    let (s, c) = (0.5 * angle).sin_cos();
    UnitaryMat::new([
        [Complex64::new(c, 0.0), Complex64::new(-s, 0.0)],
        [Complex64::new(s, 0.0), Complex64::new(c, 0.0)],
    ])
}

/// Pure single-qubit state `amp0 |0> + amp1 |1>`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PureState {
    pub amp0: ComplexScalar,
    pub amp1: ComplexScalar,
}

impl PureState {
    pub const fn new(amp0: ComplexScalar, amp1: ComplexScalar) -> Self {
        PureState { amp0, amp1 }
    }

    pub const fn zero() -> Self {
        PureState::new(ONE, ZERO)
    }

    pub const fn one() -> Self {
        PureState::new(ZERO, ONE)
    }

    /// `H|0>`, the equal superposition every activation circuit starts from.
    pub fn plus() -> Self {
        let h = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        PureState::new(h, h)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amp0.norm_sqr() + self.amp1.norm_sqr()
    }

    /// In-place `rz(angle)`; avoids building the matrix on hot paths.
    #[inline]
    pub(crate) fn rotate_z(&mut self, angle: f64) {
        let (s, c) = (0.5 * angle).sin_cos();
        self.amp0 *= Complex64::new(c, -s);
        self.amp1 *= Complex64::new(c, s);
    }

    /// In-place `ry(angle)`.
    #[inline]
    pub(crate) fn rotate_y(&mut self, angle: f64) {
        let (s, c) = (0.5 * angle).sin_cos();
        let a0 = self.amp0;
        let a1 = self.amp1;
        self.amp0 = a0 * c - a1 * s;
        self.amp1 = a0 * s + a1 * c;
    }

    /// `<self | other>`.
    pub fn inner(&self, other: &PureState) -> ComplexScalar {
        self.amp0.conj() * other.amp0 + self.amp1.conj() * other.amp1
    }
}

/// Matrix-vector product `gate |state>`.
pub fn apply(state: &PureState, gate: &UnitaryMat) -> PureState {
    let e = &gate.entries;
    PureState::new(
        e[0][0] * state.amp0 + e[0][1] * state.amp1,
        e[1][0] * state.amp0 + e[1][1] * state.amp1,
    )
}

/// `<state| sigma_z |state> = |amp0|^2 - |amp1|^2`.
pub fn expect_z(state: &PureState) -> f64 {
    state.amp0.norm_sqr() - state.amp1.norm_sqr()
}

/// A `(B, N, M)` block of single-qubit states stored flat as `(B, N, M, 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBatch {
    dims: (usize, usize, usize),
    amps: Vec<ComplexScalar>,
}

impl StateBatch {
    /// Every slot initialised to `H|0>`.
    pub fn new_plus(batch: usize, n_out: usize, n_in: usize) -> Self {
        let plus = PureState::plus();
        let count = batch * n_out * n_in;
        let mut amps = Vec::with_capacity(2 * count);
        for _ in 0..count {
            amps.push(plus.amp0);
            amps.push(plus.amp1);
        }
        StateBatch {
            dims: (batch, n_out, n_in),
            amps,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Raw amplitudes in `(B, N, M, 2)` row-major order.
    pub fn amplitudes(&self) -> &[ComplexScalar] {
        &self.amps
    }

    fn flat_index(&self, b: usize, n: usize, m: usize) -> usize {
        let (_, nn, mm) = self.dims;
        (b * nn + n) * mm + m
    }

    pub fn state(&self, b: usize, n: usize, m: usize) -> PureState {
        let k = 2 * self.flat_index(b, n, m);
        PureState::new(self.amps[k], self.amps[k + 1])
    }

    /// Applies `gate_for(b, n, m)` to every slot. Slots are independent, so
    /// the sweep runs in parallel.
    pub fn apply_each<F>(&mut self, gate_for: F)
    where
        F: Fn(usize, usize, usize) -> UnitaryMat + Sync,
    {
        let (_, nn, mm) = self.dims;
        self.amps
            .par_chunks_mut(2)
            .enumerate()
            .for_each(|(k, pair)| {
                let m = k % mm;
                let n = (k / mm) % nn;
                let b = k / (mm * nn);
                let out = apply(&PureState::new(pair[0], pair[1]), &gate_for(b, n, m));
                pair[0] = out.amp0;
                pair[1] = out.amp1;
            });
    }

    /// Pauli-Z expectation of every slot, in `(B, N, M)` order.
    pub fn expect_z(&self) -> Vec<f64> {
        self.amps
            .chunks(2)
            .map(|pair| pair[0].norm_sqr() - pair[1].norm_sqr())
            .collect()
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        for (k, pair) in self.amps.chunks(2).enumerate() {
            let n = pair[0].norm_sqr() + pair[1].norm_sqr();
            if (n - 1.0).abs() > tol {
                return Err(QkanError::Numerical(format!(
                    "state slot {k} has squared norm {n}"
                )));
            }
        }
        Ok(())
    }
}
