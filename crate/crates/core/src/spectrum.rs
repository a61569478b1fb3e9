//! Frequency-spectrum analysis of an activation circuit.
//!
//! With encoding weights `w_1..w_r`, the circuit output is a trigonometric
//! sum over frequencies `{ sum_l m_l w_l : m_l in {-1, 0, 1} }`. This module
//! enumerates that set, samples the circuit, and least-squares fits the
//! samples onto the enumerated basis. A residual at machine precision means
//! the enumerated set really contains the support of the output.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::daruan::{raw_expectation, DaruanParams};
use crate::error::{QkanError, Result};
use crate::statevector::ComplexScalar;

/// Sums closer than this are treated as the same frequency.
pub const FREQ_TOL: f64 = 1e-9;
/// Fits whose design matrix is worse conditioned than this are rejected.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub frequency: f64,
    /// `[re, im]` of `c_omega`.
    pub value: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub weights: Vec<f64>,
    /// Sorted, closed under negation, contains 0.
    pub frequencies: Vec<f64>,
    pub nonzero_count: usize,
    /// `sum_l |w_l|`.
    pub max_frequency: f64,
    /// One entry per fitted frequency, ascending.
    pub coefficients: Vec<Coefficient>,
    /// RMS of the fit residual over the sample grid.
    pub residual_l2: f64,
    pub sample_count: usize,
    /// Interval `[0, period]` the samples cover.
    pub period: f64,
    pub condition_number: f64,
}

impl SpectrumReport {
    pub fn coefficient(&self, frequency: f64) -> Option<ComplexScalar> {
        self.coefficients
            .iter()
            .find(|c| (c.frequency - frequency).abs() < FREQ_TOL)
            .map(|c| ComplexScalar::new(c.value[0], c.value[1]))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }
}

/// All signed sums `sum_l m_l w_l`, `m_l in {-1, 0, 1}`, deduplicated.
pub fn enumerate_frequencies(weights: &[f64]) -> Vec<f64> {
    let mut sums = vec![0.0f64];
    for &w in weights {
        let mut next = Vec::with_capacity(sums.len() * 3);
        for &s in &sums {
            next.extend([s - w, s, s + w]);
        }
        sums = dedup_sorted(next);
    }
    // Mirror the non-negative half so the set is exactly symmetric.
    let mut half: Vec<f64> = sums
        .into_iter()
        .filter(|v| *v > -FREQ_TOL)
        .map(|v| if v.abs() < FREQ_TOL { 0.0 } else { v })
        .collect();
    half = dedup_sorted(half);
    let mut out: Vec<f64> = half.iter().rev().filter(|v| **v > 0.0).map(|v| -v).collect();
    out.extend(half);
    out
}

fn dedup_sorted(mut values: Vec<f64>) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = Vec::with_capacity(values.len());
    for v in values {
        match out.last() {
            Some(last) if (v - last).abs() < FREQ_TOL => {}
            _ => out.push(v),
        }
    }
    out
}

/// `4 (2 |Omega| + 1)` samples.
pub fn default_sample_count(frequencies: &[f64]) -> usize {
    4 * (2 * frequencies.len() + 1)
}

fn all_integer(weights: &[f64]) -> bool {
    weights.iter().all(|w| (w - w.round()).abs() < FREQ_TOL)
}

/// Sampling window: one period for integer frequencies, otherwise four
/// beat periods of the closest pair.
fn sample_period(frequencies: &[f64], integer: bool) -> f64 {
    let tau = 2.0 * std::f64::consts::PI;
    if integer {
        return tau;
    }
    let min_gap = frequencies
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    if min_gap.is_finite() && min_gap > 0.0 {
        4.0 * tau / min_gap
    } else {
        tau
    }
}

/// Least-squares projection of `raw_expectation(p, .)` onto
/// `{exp(i omega x) : omega in frequencies}`. `frequencies` must be closed
/// under negation; only the non-negative half drives the real design matrix.
pub fn fit_on_frequencies(
    p: &DaruanParams,
    frequencies: &[f64],
    sample_count: usize,
) -> Result<SpectrumReport> {
    p.validate()?;
    let positive: Vec<f64> = frequencies.iter().copied().filter(|w| *w > FREQ_TOL).collect();
    let has_zero = frequencies.iter().any(|w| w.abs() < FREQ_TOL);
    let columns = positive.len() * 2 + usize::from(has_zero);
    if columns == 0 {
        return Err(QkanError::InvalidArgument("empty frequency set".into()));
    }
    if sample_count < 2 * frequencies.len() + 1 {
        return Err(QkanError::InvalidArgument(format!(
            "sample_count {sample_count} below 2|Omega|+1 = {}",
            2 * frequencies.len() + 1
        )));
    }

    let integer = all_integer(frequencies);
    let period = sample_period(&dedup_sorted(frequencies.to_vec()), integer);
    let xs: Vec<f64> = (0..sample_count)
        .map(|k| period * k as f64 / sample_count as f64)
        .collect();
    let ys = DVector::from_iterator(sample_count, xs.iter().map(|&x| raw_expectation(p, x)));

    let design = DMatrix::from_fn(sample_count, columns, |row, col| {
        let x = xs[row];
        let col = if has_zero { col } else { col + 1 };
        if col == 0 {
            1.0
        } else {
            let w = positive[(col - 1) / 2];
            if (col - 1) % 2 == 0 {
                (w * x).cos()
            } else {
                (w * x).sin()
            }
        }
    });

    let svd = design.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    let condition = if s_min > 0.0 { s_max / s_min } else { f64::INFINITY };
    if condition > MAX_CONDITION {
        return Err(QkanError::DegenerateSpectrum {
            condition,
            limit: MAX_CONDITION,
        });
    }
    let solution = svd
        .solve(&ys, 0.0)
        .map_err(|e| QkanError::Numerical(format!("spectrum least squares failed: {e}")))?;
    let resid = &design * &solution - &ys;
    let residual_l2 = (resid.norm_squared() / sample_count as f64).sqrt();

    let mut coefficients = Vec::with_capacity(2 * positive.len() + 1);
    let offset = usize::from(has_zero);
    for (k, &w) in positive.iter().enumerate() {
        let a = solution[offset + 2 * k];
        let b = solution[offset + 2 * k + 1];
        coefficients.push(Coefficient {
            frequency: -w,
            value: [0.5 * a, 0.5 * b],
        });
        coefficients.push(Coefficient {
            frequency: w,
            value: [0.5 * a, -0.5 * b],
        });
    }
    if has_zero {
        coefficients.push(Coefficient {
            frequency: 0.0,
            value: [solution[0], 0.0],
        });
    }
    coefficients.sort_by(|a, b| a.frequency.total_cmp(&b.frequency));

    let mut freq_sorted = dedup_sorted(frequencies.to_vec());
    for f in freq_sorted.iter_mut() {
        if f.abs() < FREQ_TOL {
            *f = 0.0;
        }
    }
    Ok(SpectrumReport {
        weights: p.enc_w.clone(),
        nonzero_count: freq_sorted.iter().filter(|w| **w != 0.0).count(),
        frequencies: freq_sorted,
        max_frequency: p.enc_w.iter().map(|w| w.abs()).sum(),
        coefficients,
        residual_l2,
        sample_count,
        period,
        condition_number: condition,
    })
}

/// Fit onto the frequency set predicted from the encoding weights.
pub fn empirical_spectrum(p: &DaruanParams, sample_count: usize) -> Result<SpectrumReport> {
    let freqs = enumerate_frequencies(&p.enc_w);
    fit_on_frequencies(p, &freqs, sample_count)
}

/// `true` when the predicted basis reproduces the circuit to `tol` (RMS).
pub fn verify_spectrum(p: &DaruanParams, tol: f64) -> Result<(bool, SpectrumReport)> {
    if !(tol > 0.0) {
        return Err(QkanError::InvalidArgument(format!("tolerance must be > 0, got {tol}")));
    }
    let freqs = enumerate_frequencies(&p.enc_w);
    let report = fit_on_frequencies(p, &freqs, default_sample_count(&freqs))?;
    Ok((report.residual_l2 < tol, report))
}
