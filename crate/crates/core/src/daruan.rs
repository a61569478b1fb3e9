//! A single trainable activation edge.
//!
//! The edge evaluates
//!
//! ```text
//! phi(x) = w_base * silu(x) + w_quant * <Z>_{U(x)|+>} + out_bias
//! U(x)   = W(r+1) S(w_r x + b_r) W(r) ... S(w_1 x + b_1) W(1)
//! ```
//!
//! with `S(u) = rz(u)` and every `W` an `rz(gamma) ry(beta) rz(alpha)` Euler
//! triple. Gradients come from a reverse (adjoint) sweep over the gate chain,
//! so one backward call costs about two forward calls regardless of `r`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QkanError, Result};
use crate::statevector::PureState;

/// All trainable scalars of one edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaruanParams {
    pub r: usize,
    pub enc_w: Vec<f64>,
    pub enc_b: Vec<f64>,
    /// `(alpha, beta, gamma)` of `W(1) .. W(r+1)`.
    pub angles: Vec<[f64; 3]>,
    pub w_base: f64,
    pub w_quant: f64,
    pub out_bias: f64,
}

/// Gradient of `upstream * phi(x)`; mirrors [`DaruanParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct DaruanGrad {
    pub enc_w: Vec<f64>,
    pub enc_b: Vec<f64>,
    pub angles: Vec<[f64; 3]>,
    pub w_base: f64,
    pub w_quant: f64,
    pub out_bias: f64,
    pub d_input: f64,
}

/// Addresses one scalar of a [`DaruanParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamIndex {
    EncW(usize),
    EncB(usize),
    /// `(unitary block, 0 = alpha | 1 = beta | 2 = gamma)`
    Angle(usize, usize),
    WBase,
    WQuant,
    OutBias,
}

/// How encoding weights are initialised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum EncWeightInit {
    /// `w_l = 2^(l-1)`.
    Geometric,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaruanInit {
    /// Euler angles are drawn from `uniform(-angle_range, angle_range)`.
    pub angle_range: f64,
    pub enc_w: EncWeightInit,
    pub enc_b: f64,
    pub w_base: f64,
    pub w_quant: f64,
    pub out_bias: f64,
}

impl Default for DaruanInit {
    fn default() -> Self {
        DaruanInit {
            angle_range: 0.1,
            enc_w: EncWeightInit::Geometric,
            enc_b: 0.0,
            w_base: 1.0,
            w_quant: 1.0,
            out_bias: 0.0,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Axis {
    Y,
    Z,
}

impl DaruanParams {
    /// Identity circuit with unit encoding weights and a pure quantum output.
    pub fn identity(r: usize) -> Self {
        DaruanParams {
            r,
            enc_w: vec![1.0; r],
            enc_b: vec![0.0; r],
            angles: vec![[0.0; 3]; r + 1],
            w_base: 0.0,
            w_quant: 1.0,
            out_bias: 0.0,
        }
    }

    pub fn init<R: Rng + ?Sized>(r: usize, init: &DaruanInit, rng: &mut R) -> Result<Self> {
        if r == 0 {
            return Err(QkanError::InvalidArgument("repetition count r must be >= 1".into()));
        }
        let enc_w = (0..r)
            .map(|l| match init.enc_w {
                EncWeightInit::Geometric => (1u64 << l.min(62)) as f64,
                EncWeightInit::Constant(c) => c,
            })
            .collect();
        let range = init.angle_range;
        let mut draw = || {
            if range > 0.0 {
                rng.random_range(-range..range)
            } else {
                0.0
            }
        };
        let angles = (0..=r).map(|_| [draw(), draw(), draw()]).collect();
        let p = DaruanParams {
            r,
            enc_w,
            enc_b: vec![init.enc_b; r],
            angles,
            w_base: init.w_base,
            w_quant: init.w_quant,
            out_bias: init.out_bias,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(QkanError::InvalidArgument("repetition count r must be >= 1".into()));
        }
        if self.enc_w.len() != self.r || self.enc_b.len() != self.r || self.angles.len() != self.r + 1 {
            return Err(QkanError::InvalidArgument(format!(
                "inconsistent edge shape: r = {}, enc_w {}, enc_b {}, angles {}",
                self.r,
                self.enc_w.len(),
                self.enc_b.len(),
                self.angles.len()
            )));
        }
        if self.flat().iter().any(|v| !v.is_finite()) {
            return Err(QkanError::InvalidArgument("edge parameters must be finite".into()));
        }
        Ok(())
    }

    /// Number of trainable scalars, `5r + 6`.
    pub fn param_count(&self) -> usize {
        Self::count_for(self.r)
    }

    pub fn count_for(r: usize) -> usize {
        5 * r + 6
    }

    /// Flat order: `enc_w, enc_b, angles (row-major), w_base, w_quant, out_bias`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.write_flat(&mut out);
        out
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.enc_w);
        out.extend_from_slice(&self.enc_b);
        for a in &self.angles {
            out.extend_from_slice(a);
        }
        out.push(self.w_base);
        out.push(self.w_quant);
        out.push(self.out_bias);
    }

    /// Inverse of [`DaruanParams::flat`]; returns the number of values consumed.
    pub fn read_flat(&mut self, values: &[f64]) -> Result<usize> {
        let n = self.param_count();
        if values.len() < n {
            return Err(QkanError::DimensionMismatch {
                expected: n,
                actual: values.len(),
                context: "edge parameter slice",
            });
        }
        let r = self.r;
        self.enc_w.copy_from_slice(&values[..r]);
        self.enc_b.copy_from_slice(&values[r..2 * r]);
        for (i, a) in self.angles.iter_mut().enumerate() {
            a.copy_from_slice(&values[2 * r + 3 * i..2 * r + 3 * i + 3]);
        }
        self.w_base = values[n - 3];
        self.w_quant = values[n - 2];
        self.out_bias = values[n - 1];
        Ok(n)
    }

    pub fn flat_index(&self, which: ParamIndex) -> Result<usize> {
        let r = self.r;
        let idx = match which {
            ParamIndex::EncW(l) if l < r => l,
            ParamIndex::EncB(l) if l < r => r + l,
            ParamIndex::Angle(b, k) if b <= r && k < 3 => 2 * r + 3 * b + k,
            ParamIndex::WBase => 5 * r + 3,
            ParamIndex::WQuant => 5 * r + 4,
            ParamIndex::OutBias => 5 * r + 5,
            other => {
                return Err(QkanError::InvalidArgument(format!(
                    "{other:?} out of range for r = {r}"
                )))
            }
        };
        Ok(idx)
    }

    /// Every addressable scalar, in flat order.
    pub fn all_indices(&self) -> Vec<ParamIndex> {
        let r = self.r;
        let mut out: Vec<ParamIndex> = (0..r).map(ParamIndex::EncW).collect();
        out.extend((0..r).map(ParamIndex::EncB));
        for b in 0..=r {
            out.extend((0..3).map(|k| ParamIndex::Angle(b, k)));
        }
        out.extend([ParamIndex::WBase, ParamIndex::WQuant, ParamIndex::OutBias]);
        out
    }

    fn gate_count(&self) -> usize {
        4 * self.r + 3
    }

    /// Gate `k` of the chain in application order. Each of the first `r`
    /// blocks is `rz(alpha), ry(beta), rz(gamma), rz(w x + b)`; the last
    /// block stops after the Euler triple.
    #[inline]
    fn gate(&self, k: usize, x: f64) -> (Axis, f64) {
        let block = k / 4;
        match k % 4 {
            0 => (Axis::Z, self.angles[block][0]),
            1 => (Axis::Y, self.angles[block][1]),
            2 => (Axis::Z, self.angles[block][2]),
            _ => (Axis::Z, self.enc_w[block] * x + self.enc_b[block]),
        }
    }

    fn run_chain(&self, x: f64, shift: Option<(usize, f64)>) -> PureState {
        let mut state = PureState::plus();
        for k in 0..self.gate_count() {
            let (axis, mut angle) = self.gate(k, x);
            if let Some((target, delta)) = shift {
                if target == k {
                    angle += delta;
                }
            }
            match axis {
                Axis::Z => state.rotate_z(angle),
                Axis::Y => state.rotate_y(angle),
            }
        }
        state
    }

    /// Extends to `new_r` repetitions with identity blocks appended after the
    /// existing final unitary. Output is unchanged for every `x`.
    pub fn extend(&self, new_r: usize) -> Result<DaruanParams> {
        if new_r <= self.r {
            return Err(QkanError::InvalidArgument(format!(
                "extension target r = {new_r} must exceed current r = {}",
                self.r
            )));
        }
        let extra = new_r - self.r;
        let mut out = self.clone();
        out.r = new_r;
        out.enc_w.extend(std::iter::repeat_n(0.0, extra));
        out.enc_b.extend(std::iter::repeat_n(0.0, extra));
        out.angles.extend(std::iter::repeat_n([0.0; 3], extra));
        Ok(out)
    }
}

/// Pauli-Z expectation of the circuit at `x`; always in `[-1, 1]`.
pub fn raw_expectation(p: &DaruanParams, x: f64) -> f64 {
    let s = p.run_chain(x, None);
    s.amp0.norm_sqr() - s.amp1.norm_sqr()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x * sigmoid(x)`.
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn forward(p: &DaruanParams, x: f64) -> f64 {
    let quantum = if p.w_quant != 0.0 { raw_expectation(p, x) } else { 0.0 };
    p.w_base * silu(x) + p.w_quant * quantum + p.out_bias
}

/// Exact gradient of `upstream * forward(p, x)`.
pub fn backward(p: &DaruanParams, x: f64, upstream: f64) -> DaruanGrad {
    let mut flat = vec![0.0; p.param_count()];
    let d_input = backward_accumulate(p, x, upstream, &mut flat);
    let mut grad = DaruanGrad {
        enc_w: Vec::new(),
        enc_b: Vec::new(),
        angles: Vec::new(),
        w_base: 0.0,
        w_quant: 0.0,
        out_bias: 0.0,
        d_input,
    };
    let r = p.r;
    grad.enc_w = flat[..r].to_vec();
    grad.enc_b = flat[r..2 * r].to_vec();
    grad.angles = flat[2 * r..5 * r + 3]
        .chunks(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    grad.w_base = flat[5 * r + 3];
    grad.w_quant = flat[5 * r + 4];
    grad.out_bias = flat[5 * r + 5];
    grad
}

/// Adds the gradient of `upstream * forward(p, x)` into `acc` (flat order,
/// length `5r + 6`) and returns `d forward / dx` scaled by `upstream`.
pub fn backward_accumulate(p: &DaruanParams, x: f64, upstream: f64, acc: &mut [f64]) -> f64 {
    let r = p.r;
    debug_assert_eq!(acc.len(), p.param_count());
    let mut d_input = upstream * p.w_base * silu_derivative(x);
    acc[5 * r + 3] += upstream * silu(x);
    acc[5 * r + 5] += upstream;
    if upstream == 0.0 {
        return d_input;
    }

    let mut psi = p.run_chain(x, None);
    acc[5 * r + 4] += upstream * (psi.amp0.norm_sqr() - psi.amp1.norm_sqr());

    let scale = upstream * p.w_quant;
    if scale == 0.0 {
        return d_input;
    }

    // lambda = (gates after k)^dagger Z (gates after k) psi_k, swept backwards
    // alongside psi; d<Z>/d theta_k = Im <lambda | P_k | psi_k>.
    let mut lambda = PureState::new(psi.amp0, -psi.amp1);
    for k in (0..p.gate_count()).rev() {
        let (axis, angle) = p.gate(k, x);
        let d = match axis {
            Axis::Z => (lambda.amp0.conj() * psi.amp0 - lambda.amp1.conj() * psi.amp1).im,
            // Y|psi> = (-i psi1, i psi0), so Im<lambda|Y|psi> = Re(l1* p0 - l0* p1)
            Axis::Y => (lambda.amp1.conj() * psi.amp0 - lambda.amp0.conj() * psi.amp1).re,
        };
        let block = k / 4;
        match k % 4 {
            3 => {
                let g = scale * d;
                acc[block] += g * x;
                acc[r + block] += g;
                d_input += g * p.enc_w[block];
            }
            slot => acc[2 * r + 3 * block + slot] += scale * d,
        }
        match axis {
            Axis::Z => {
                psi.rotate_z(-angle);
                lambda.rotate_z(-angle);
            }
            Axis::Y => {
                psi.rotate_y(-angle);
                lambda.rotate_y(-angle);
            }
        }
    }
    d_input
}

impl DaruanGrad {
    /// Same flat order as [`DaruanParams::flat`].
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.enc_w);
        out.extend_from_slice(&self.enc_b);
        for a in &self.angles {
            out.extend_from_slice(a);
        }
        out.push(self.w_base);
        out.push(self.w_quant);
        out.push(self.out_bias);
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.write_flat(&mut out);
        out
    }
}

/// Parameter-shift derivative of `forward` with respect to a
/// rotation-generated scalar. Encoding weights pick up the chain factor `x`.
pub fn parameter_shift_grad(p: &DaruanParams, x: f64, which: ParamIndex) -> Result<f64> {
    let (gate, chain) = match which {
        ParamIndex::Angle(b, k) if b <= p.r && k < 3 => (4 * b + k, 1.0),
        ParamIndex::EncB(l) if l < p.r => (4 * l + 3, 1.0),
        ParamIndex::EncW(l) if l < p.r => (4 * l + 3, x),
        ParamIndex::WBase | ParamIndex::WQuant | ParamIndex::OutBias => {
            return Err(QkanError::InvalidArgument(format!(
                "{which:?} is not rotation-generated"
            )))
        }
        other => {
            return Err(QkanError::InvalidArgument(format!(
                "{other:?} out of range for r = {}",
                p.r
            )))
        }
    };
    let shifted = |delta: f64| {
        let s = p.run_chain(x, Some((gate, delta)));
        p.w_quant * (s.amp0.norm_sqr() - s.amp1.norm_sqr())
    };
    let half_pi = std::f64::consts::FRAC_PI_2;
    Ok(chain * 0.5 * (shifted(half_pi) - shifted(-half_pi)))
}
