//! Dimensionless Feynman benchmark formulas and the sinc target.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, DatasetMeta};
use crate::error::{QkanError, Result};
use crate::rng::{stream, Purpose};

pub const DEFAULT_TRAIN: usize = 1000;
pub const DEFAULT_TEST: usize = 1000;

#[derive(Debug, Clone, Copy)]
pub struct FeynmanSpec {
    pub id: &'static str,
    pub arity: usize,
    pub formula: fn(&[f64]) -> f64,
    pub default_shape: &'static [usize],
}

impl FeynmanSpec {
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.formula)(x)
    }
}

fn i_12_11(v: &[f64]) -> f64 {
    let (a, theta) = (v[0], v[1]);
    1.0 + a * theta.sin()
}

fn i_29_16(v: &[f64]) -> f64 {
    let (a, t1, t2) = (v[0], v[1], v[2]);
    (1.0 + a * a - 2.0 * a * (t1 - t2).cos()).sqrt()
}

fn i_40_1(v: &[f64]) -> f64 {
    let (n0, a) = (v[0], v[1]);
    n0 * (-a).exp()
}

fn i_50_26(v: &[f64]) -> f64 {
    let (a, alpha) = (v[0], v[1]);
    let c = a.cos();
    c + alpha * c * c
}

fn ii_2_42(v: &[f64]) -> f64 {
    (v[0] - 1.0) * v[1]
}

fn ii_6_15a(v: &[f64]) -> f64 {
    let (a, b, c) = (v[0], v[1], v[2]);
    c * (a * a + b * b).sqrt() / (4.0 * std::f64::consts::PI)
}

fn ii_35_18(v: &[f64]) -> f64 {
    let (n0, a) = (v[0], v[1]);
    n0 / (a.exp() + (-a).exp())
}

fn ii_36_38(v: &[f64]) -> f64 {
    let (a, b, alpha) = (v[0], v[1], v[2]);
    a + alpha * b
}

fn iii_10_19(v: &[f64]) -> f64 {
    (1.0 + v[0] * v[0] + v[1] * v[1]).sqrt()
}

fn iii_17_37(v: &[f64]) -> f64 {
    let (alpha, beta, theta) = (v[0], v[1], v[2]);
    beta * (1.0 + alpha * theta.cos())
}

static SPECS: [FeynmanSpec; 10] = [
    FeynmanSpec { id: "I.12.11", arity: 2, formula: i_12_11, default_shape: &[2, 2, 1] },
    FeynmanSpec { id: "I.29.16", arity: 3, formula: i_29_16, default_shape: &[3, 2, 3, 1] },
    FeynmanSpec { id: "I.40.1", arity: 2, formula: i_40_1, default_shape: &[2, 2, 1, 1, 1, 2, 1] },
    FeynmanSpec { id: "I.50.26", arity: 2, formula: i_50_26, default_shape: &[2, 2, 3, 1] },
    FeynmanSpec { id: "II.2.42", arity: 2, formula: ii_2_42, default_shape: &[2, 2, 1] },
    FeynmanSpec { id: "II.6.15a", arity: 3, formula: ii_6_15a, default_shape: &[3, 2, 1, 1] },
    FeynmanSpec { id: "II.35.18", arity: 2, formula: ii_35_18, default_shape: &[2, 1, 1] },
    FeynmanSpec { id: "II.36.38", arity: 3, formula: ii_36_38, default_shape: &[3, 2, 1] },
    FeynmanSpec { id: "III.10.19", arity: 2, formula: iii_10_19, default_shape: &[2, 1, 1] },
    FeynmanSpec { id: "III.17.37", arity: 3, formula: iii_17_37, default_shape: &[3, 3, 1] },
];

pub fn feynman_specs() -> &'static [FeynmanSpec] {
    &SPECS
}

pub fn feynman_spec(id: &str) -> Result<&'static FeynmanSpec> {
    SPECS
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| QkanError::InvalidArgument(format!("unknown equation id `{id}`")))
}

/// Noisy regression splits on `[0, 1]^d`.
pub fn gen_regression(
    spec: &FeynmanSpec,
    n_train: usize,
    n_test: usize,
    noise_frac: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    gen_regression_in(spec, n_train, n_test, noise_frac, seed, (0.0, 1.0))
}

/// Uniform inputs on `range^d`; both splits get Gaussian label noise with
/// standard deviation `noise_frac * mean(|f|)`, the mean taken over the
/// training inputs.
pub fn gen_regression_in(
    spec: &FeynmanSpec,
    n_train: usize,
    n_test: usize,
    noise_frac: f64,
    seed: u64,
    range: (f64, f64),
) -> Result<(Dataset, Dataset)> {
    if !(noise_frac >= 0.0) || !noise_frac.is_finite() {
        return Err(QkanError::InvalidArgument(format!("noise_frac must be >= 0, got {noise_frac}")));
    }
    if !(range.0 < range.1) {
        return Err(QkanError::InvalidArgument(format!("empty input range {range:?}")));
    }
    let mut data_rng = stream(seed, Purpose::Data);
    let mut draw_inputs = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..spec.arity).map(|_| data_rng.random_range(range.0..range.1)).collect())
            .collect()
    };
    let train_x = draw_inputs(n_train);
    let test_x = draw_inputs(n_test);
    let train_clean: Vec<f64> = train_x.iter().map(|x| spec.eval(x)).collect();
    let test_clean: Vec<f64> = test_x.iter().map(|x| spec.eval(x)).collect();

    let mu = if train_clean.is_empty() {
        0.0
    } else {
        train_clean.iter().map(|v| v.abs()).sum::<f64>() / train_clean.len() as f64
    };
    let std = noise_frac * mu;
    let mut noise_rng = stream(seed, Purpose::Noise);
    let mut noisy = |clean: Vec<f64>| -> Result<Vec<Vec<f64>>> {
        if std == 0.0 {
            return Ok(clean.into_iter().map(|v| vec![v]).collect());
        }
        let normal = Normal::new(0.0, std).map_err(|e| QkanError::InvalidArgument(e.to_string()))?;
        Ok(clean
            .into_iter()
            .map(|v| vec![v + normal.sample(&mut noise_rng)])
            .collect())
    };
    let train_y = noisy(train_clean)?;
    let test_y = noisy(test_clean)?;

    let meta = DatasetMeta {
        equation: spec.id.to_string(),
        seed,
        noise_frac,
        range,
    };
    Ok((
        Dataset::new(train_x, train_y, meta.clone())?,
        Dataset::new(test_x, test_y, meta)?,
    ))
}

/// `sin(20 x) / (20 x)`, equal to 1 at the removable singularity.
pub fn sinc_target(x: f64) -> f64 {
    let u = 20.0 * x;
    if u == 0.0 {
        1.0
    } else {
        u.sin() / u
    }
}

/// Sinc splits on `[0, 1]` with absolute Gaussian label noise.
pub fn gen_sinc(n_train: usize, n_test: usize, noise_std: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(QkanError::InvalidArgument(format!("noise_std must be >= 0, got {noise_std}")));
    }
    let mut data_rng = stream(seed, Purpose::Data);
    let train_x: Vec<f64> = (0..n_train).map(|_| data_rng.random_range(0.0..1.0)).collect();
    let test_x: Vec<f64> = (0..n_test).map(|_| data_rng.random_range(0.0..1.0)).collect();
    let mut noise_rng = stream(seed, Purpose::Noise);
    let normal = Normal::new(0.0, noise_std).map_err(|e| QkanError::InvalidArgument(e.to_string()))?;
    let mut label = |x: &f64| vec![sinc_target(*x) + if noise_std > 0.0 { normal.sample(&mut noise_rng) } else { 0.0 }];
    let train_y: Vec<Vec<f64>> = train_x.iter().map(&mut label).collect();
    let test_y: Vec<Vec<f64>> = test_x.iter().map(&mut label).collect();
    let meta = DatasetMeta {
        equation: "sinc".to_string(),
        seed,
        noise_frac: noise_std,
        range: (0.0, 1.0),
    };
    Ok((
        Dataset::new(train_x.into_iter().map(|x| vec![x]).collect(), train_y, meta.clone())?,
        Dataset::new(test_x.into_iter().map(|x| vec![x]).collect(), test_y, meta)?,
    ))
}
