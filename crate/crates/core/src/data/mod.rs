//! Benchmark datasets and their on-disk formats.

mod csv_io;
mod feynman;
mod idx;

use serde::{Deserialize, Serialize};

use crate::error::{QkanError, Result};

pub use csv_io::{read_csv, to_csv_string, write_csv};
pub use feynman::{
    feynman_spec, feynman_specs, gen_regression, gen_regression_in, gen_sinc, sinc_target, FeynmanSpec,
    DEFAULT_TEST, DEFAULT_TRAIN,
};
pub use idx::{parse_idx, read_idx, IdxData, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub equation: String,
    pub seed: u64,
    pub noise_frac: f64,
    pub range: (f64, f64),
}

impl Default for DatasetMeta {
    fn default() -> Self {
        DatasetMeta {
            equation: String::new(),
            seed: 0,
            noise_frac: 0.0,
            range: (0.0, 1.0),
        }
    }
}

/// Paired input and target rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, meta: DatasetMeta) -> Result<Self> {
        let d = Dataset { inputs, targets, meta };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.targets.len() {
            return Err(QkanError::DimensionMismatch {
                expected: self.inputs.len(),
                actual: self.targets.len(),
                context: "dataset target rows",
            });
        }
        let (nf, nt) = (self.n_features(), self.n_targets());
        for (row, (x, y)) in self.inputs.iter().zip(&self.targets).enumerate() {
            if x.len() != nf || y.len() != nt {
                return Err(QkanError::InvalidArgument(format!("ragged dataset row {row}")));
            }
            if x.iter().chain(y).any(|v| !v.is_finite()) {
                return Err(QkanError::InvalidArgument(format!("non-finite value in dataset row {row}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn n_targets(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    pub fn meta_json(&self) -> String {
        serde_json::to_string_pretty(&self.meta).expect("metadata is always serializable")
    }
}
