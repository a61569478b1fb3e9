//! Distillation of trained activation edges into classical B-splines.
//!
//! Each edge is sampled on a grid over its calibrated input range and the
//! quantum part of its output (`w_quant <Z> + out_bias`) is refit by least
//! squares onto a clamped B-spline basis. The `w_base * silu(x)` residual is
//! carried over unchanged, so a distilled edge evaluates as
//! `w_base * silu(x) + spline(clamp(x))`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::daruan::{self, silu, DaruanParams};
use crate::error::{QkanError, Result};
use crate::qkan::{LinearLayer, QkanNetwork};

/// Open uniform knot vector: `degree` repeated copies of each endpoint around
/// `grid + 1` evenly spaced breakpoints.
pub fn open_uniform_knots(lo: f64, hi: f64, grid: usize, degree: usize) -> Vec<f64> {
    let mut knots = Vec::with_capacity(grid + 1 + 2 * degree);
    knots.extend(std::iter::repeat_n(lo, degree));
    for i in 0..=grid {
        knots.push(if i == grid { hi } else { lo + (hi - lo) * i as f64 / grid as f64 });
    }
    knots.extend(std::iter::repeat_n(hi, degree));
    knots
}

/// Values of all `knots.len() - degree - 1` basis functions at `x`.
///
/// Uses the triangular Cox-de Boor scheme on the single non-zero span. The
/// right endpoint belongs to the last non-degenerate span, so the basis
/// sums to one on the closed domain.
pub fn bspline_basis(knots: &[f64], degree: usize, x: f64) -> Result<Vec<f64>> {
    if knots.len() < 2 * degree + 2 {
        return Err(QkanError::InvalidArgument(format!(
            "{} knots cannot carry a degree-{degree} basis",
            knots.len()
        )));
    }
    let n_basis = knots.len() - degree - 1;
    let lo = knots[degree];
    let hi = knots[n_basis];
    if !(x >= lo && x <= hi) {
        return Err(QkanError::Domain { x, lo, hi });
    }

    let span = find_span(knots, degree, n_basis, x);
    let mut local = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    local[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom != 0.0 { local[r] / denom } else { 0.0 };
            local[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        local[j] = saved;
    }

    let mut out = vec![0.0; n_basis];
    out[span - degree..=span].copy_from_slice(&local);
    Ok(out)
}

fn find_span(knots: &[f64], degree: usize, n_basis: usize, x: f64) -> usize {
    if x >= knots[n_basis] {
        // last span with positive width
        let mut s = n_basis - 1;
        while s > degree && knots[s] >= knots[s + 1] {
            s -= 1;
        }
        return s;
    }
    // knots[span] <= x < knots[span + 1]
    let upper = knots[degree..=n_basis].partition_point(|k| *k <= x) + degree;
    upper - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualBase {
    pub w_base: f64,
    /// Copied from the source edge for provenance; already folded into the
    /// spline coefficients, never added again.
    pub out_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineModel {
    pub degree: usize,
    pub grid: usize,
    pub knots: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub domain: (f64, f64),
    pub residual_base: ResidualBase,
    pub max_error: f64,
    pub rms_error: f64,
}

impl SplineModel {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.degree == 0 {
            return Err(QkanError::InvalidArgument("spline grid and degree must be >= 1".into()));
        }
        if self.coefficients.len() != self.grid + self.degree {
            return Err(QkanError::DimensionMismatch {
                expected: self.grid + self.degree,
                actual: self.coefficients.len(),
                context: "spline coefficients",
            });
        }
        if self.knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(QkanError::InvalidArgument("knots must be nondecreasing".into()));
        }
        Ok(())
    }

    /// Spline part only, with `x` clamped into the domain.
    pub fn eval_spline_part(&self, x: f64) -> f64 {
        let (lo, hi) = self.domain;
        let xc = x.clamp(lo, hi);
        let basis = bspline_basis(&self.knots, self.degree, xc).expect("clamped into domain");
        basis.iter().zip(&self.coefficients).map(|(b, c)| b * c).sum()
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.residual_base.w_base * silu(x) + self.eval_spline_part(x)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.domain.0 && x <= self.domain.1
    }
}

pub fn eval_spline(m: &SplineModel, x: f64) -> f64 {
    m.eval(x)
}

/// `count` evenly spaced points on `[lo, hi]` with the edge output minus its
/// `w_base * silu` term.
pub fn sample_activation(p: &DaruanParams, lo: f64, hi: f64, count: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if count < 2 || !(lo < hi) {
        return Err(QkanError::InvalidArgument(format!(
            "need count >= 2 and lo < hi, got {count} on [{lo}, {hi}]"
        )));
    }
    let xs: Vec<f64> = (0..count)
        .map(|i| {
            if i == count - 1 {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (count - 1) as f64
            }
        })
        .collect();
    let ys = xs
        .iter()
        .map(|&x| daruan::forward(p, x) - p.w_base * silu(x))
        .collect();
    Ok((xs, ys))
}

/// Least-squares spline through `(xs, ys)` on `[min xs, max xs]`.
pub fn fit_spline(xs: &[f64], ys: &[f64], grid: usize, degree: usize) -> Result<SplineModel> {
    if xs.len() != ys.len() {
        return Err(QkanError::DimensionMismatch {
            expected: xs.len(),
            actual: ys.len(),
            context: "spline fit targets",
        });
    }
    if grid == 0 || degree == 0 {
        return Err(QkanError::InvalidArgument("spline grid and degree must be >= 1".into()));
    }
    let n_coef = grid + degree;
    if xs.len() < n_coef {
        return Err(QkanError::Fit(format!(
            "{} samples cannot determine {n_coef} coefficients",
            xs.len()
        )));
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo < hi) {
        return Err(QkanError::Fit(format!("degenerate sample range [{lo}, {hi}]")));
    }
    let knots = open_uniform_knots(lo, hi, grid, degree);
    let mut design = DMatrix::zeros(xs.len(), n_coef);
    for (row, &x) in xs.iter().enumerate() {
        for (col, v) in bspline_basis(&knots, degree, x)?.into_iter().enumerate() {
            design[(row, col)] = v;
        }
    }
    let svd = design.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    if !(s_min > 1e-12 * s_max) {
        return Err(QkanError::Fit(format!(
            "rank-deficient design matrix (singular values {s_min:.3e} / {s_max:.3e})"
        )));
    }
    let target = DVector::from_column_slice(ys);
    let coef = svd
        .solve(&target, 0.0)
        .map_err(|e| QkanError::Fit(e.to_string()))?;
    let resid = &design * &coef - &target;
    let max_error = resid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rms_error = (resid.norm_squared() / xs.len() as f64).sqrt();
    Ok(SplineModel {
        degree,
        grid,
        knots,
        coefficients: coef.iter().copied().collect(),
        domain: (lo, hi),
        residual_base: ResidualBase {
            w_base: 0.0,
            out_bias: 0.0,
        },
        max_error,
        rms_error,
    })
}

/// Spline replacement for one edge over `[lo, hi]`.
pub fn distill_edge(
    p: &DaruanParams,
    lo: f64,
    hi: f64,
    grid: usize,
    degree: usize,
    samples: usize,
) -> Result<SplineModel> {
    let (xs, ys) = sample_activation(p, lo, hi, samples)?;
    let mut model = fit_spline(&xs, &ys, grid, degree)?;
    model.residual_base = ResidualBase {
        w_base: p.w_base,
        out_bias: p.out_bias,
    };
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineLayer {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `[n_out][n_in]`.
    pub edges: Vec<SplineModel>,
}

impl SplineLayer {
    fn forward(&self, x: &[f64], clamped: &mut usize) -> Vec<f64> {
        self.edges
            .chunks(self.n_in)
            .map(|row| {
                row.iter()
                    .zip(x)
                    .map(|(m, &xi)| {
                        if !m.contains(xi) {
                            *clamped += 1;
                        }
                        m.eval(xi)
                    })
                    .sum()
            })
            .collect()
    }
}

/// Classical network with the same topology as its source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineNetwork {
    pub shape: Vec<usize>,
    pub layers: Vec<SplineLayer>,
    pub encoder: Option<LinearLayer>,
    pub decoder: Option<LinearLayer>,
}

impl SplineNetwork {
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_counting_clamps(x).map(|(y, _)| y)
    }

    /// Output plus the number of edge evaluations that fell outside their
    /// spline domain and were clamped.
    pub fn forward_counting_clamps(&self, x: &[f64]) -> Result<(Vec<f64>, usize)> {
        let mut h = match &self.encoder {
            Some(enc) => enc.forward(x)?,
            None => {
                if x.len() != self.shape[0] {
                    return Err(QkanError::DimensionMismatch {
                        expected: self.shape[0],
                        actual: x.len(),
                        context: "spline network input",
                    });
                }
                x.to_vec()
            }
        };
        let mut clamped = 0;
        for layer in &self.layers {
            h = layer.forward(&h, &mut clamped);
        }
        let out = match &self.decoder {
            Some(dec) => dec.forward(&h)?,
            None => h,
        };
        Ok((out, clamped))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spline network is always serializable")
    }
}

/// Input interval per edge, indexed `[layer][out * n_in + in]`.
pub type EdgeDomains = Vec<Vec<(f64, f64)>>;

/// Observed per-edge input range over `inputs`, widened by 10% of its span
/// (5% on each side).
pub fn calibrate_domains<'a, I>(net: &QkanNetwork, inputs: I) -> Result<EdgeDomains>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut node_lo: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![f64::INFINITY; l.n_in]).collect();
    let mut node_hi: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![f64::NEG_INFINITY; l.n_in]).collect();
    let mut seen = 0usize;
    for x in inputs {
        let acts = net.layer_activations(x)?;
        for (l, layer_in) in acts.iter().take(net.layers.len()).enumerate() {
            for (i, &v) in layer_in.iter().enumerate() {
                node_lo[l][i] = node_lo[l][i].min(v);
                node_hi[l][i] = node_hi[l][i].max(v);
            }
        }
        seen += 1;
    }
    if seen == 0 {
        return Err(QkanError::InvalidArgument("calibration needs at least one input".into()));
    }
    Ok(net
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            (0..layer.n_out * layer.n_in)
                .map(|k| widen(node_lo[l][k % layer.n_in], node_hi[l][k % layer.n_in]))
                .collect()
        })
        .collect())
}

fn widen(lo: f64, hi: f64) -> (f64, f64) {
    let span = hi - lo;
    let pad = if span > 1e-9 { 0.05 * span } else { 0.05 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub grid: usize,
    pub degree: usize,
    pub samples_per_edge: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            grid: 20,
            degree: 3,
            samples_per_edge: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeFitReport {
    pub layer: usize,
    pub out_node: usize,
    pub in_node: usize,
    pub domain: (f64, f64),
    pub max_error: f64,
    pub rms_error: f64,
}

pub fn distill_network(
    net: &QkanNetwork,
    domains: &EdgeDomains,
    config: &DistillConfig,
) -> Result<(SplineNetwork, Vec<EdgeFitReport>)> {
    net.validate()?;
    if domains.len() != net.layers.len() {
        return Err(QkanError::DimensionMismatch {
            expected: net.layers.len(),
            actual: domains.len(),
            context: "per-layer edge domains",
        });
    }
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut report = Vec::new();
    for (l, (layer, doms)) in net.layers.iter().zip(domains).enumerate() {
        if doms.len() != layer.edges.len() {
            return Err(QkanError::DimensionMismatch {
                expected: layer.edges.len(),
                actual: doms.len(),
                context: "edge domains in layer",
            });
        }
        let mut edges = Vec::with_capacity(layer.edges.len());
        for (k, (edge, &(lo, hi))) in layer.edges.iter().zip(doms).enumerate() {
            let (j, i) = (k / layer.n_in, k % layer.n_in);
            let model = distill_edge(edge, lo, hi, config.grid, config.degree, config.samples_per_edge)
                .map_err(|e| QkanError::Fit(format!("layer {l} edge ({j}, {i}): {e}")))?;
            report.push(EdgeFitReport {
                layer: l,
                out_node: j,
                in_node: i,
                domain: (lo, hi),
                max_error: model.max_error,
                rms_error: model.rms_error,
            });
            edges.push(model);
        }
        layers.push(SplineLayer {
            n_in: layer.n_in,
            n_out: layer.n_out,
            edges,
        });
    }
    Ok((
        SplineNetwork {
            shape: net.shape.clone(),
            layers,
            encoder: net.encoder.clone(),
            decoder: net.decoder.clone(),
        },
        report,
    ))
}
