//! Versioned JSON checkpoints.
//!
//! `params` follows [`QkanNetwork::params_flat`]: encoder weights (row-major)
//! and biases, then every edge of every layer in row-major `[out][in]` order
//! as `enc_w, enc_b, angles (alpha, beta, gamma per block), w_base, w_quant,
//! out_bias`, then decoder weights and biases.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::daruan::DaruanParams;
use crate::error::{QkanError, Result};
use crate::fsio::write_atomic;
use crate::qkan::{LinearLayer, QkanLayer, QkanNetwork};
use crate::train::OptimizerState;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub shape: Vec<usize>,
    /// Repetition count of each activation layer.
    pub r: Vec<usize>,
    /// `[n_in, n_out]` of the linear compressor, if any.
    pub encoder: Option<[usize; 2]>,
    pub decoder: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub epoch: usize,
    pub best_test_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub topology: Topology,
    pub params: Vec<f64>,
    #[serde(default)]
    pub optimizer: Option<OptimizerState>,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn from_network(net: &QkanNetwork, provenance: Provenance) -> Self {
        let dims = |l: &LinearLayer| [l.n_in, l.n_out];
        Checkpoint {
            format_version: FORMAT_VERSION,
            topology: Topology {
                shape: net.shape.clone(),
                r: net.layers.iter().map(QkanLayer::r).collect(),
                encoder: net.encoder.as_ref().map(dims),
                decoder: net.decoder.as_ref().map(dims),
            },
            params: net.params_flat(),
            optimizer: None,
            provenance,
        }
    }

    pub fn network(&self) -> Result<QkanNetwork> {
        let t = &self.topology;
        if t.shape.len() < 2 || t.r.len() != t.shape.len() - 1 {
            return Err(QkanError::InvalidArgument(format!(
                "topology shape {:?} does not match {} repetition counts",
                t.shape,
                t.r.len()
            )));
        }
        let layers = t
            .shape
            .windows(2)
            .zip(&t.r)
            .map(|(w, &r)| QkanLayer::from_edges(w[0], w[1], vec![DaruanParams::identity(r); w[0] * w[1]]))
            .collect::<Result<Vec<_>>>()?;
        let linear = |d: [usize; 2]| LinearLayer {
            n_in: d[0],
            n_out: d[1],
            weight: vec![0.0; d[0] * d[1]],
            bias: vec![0.0; d[1]],
        };
        let mut net = QkanNetwork {
            shape: t.shape.clone(),
            layers,
            encoder: t.encoder.map(linear),
            decoder: t.decoder.map(linear),
        };
        net.validate()?;
        net.set_params_flat(&self.params)?;
        net.validate()?;
        Ok(net)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint is always serializable") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let parse = |message: String| QkanError::Parse {
            path: path.to_path_buf(),
            message,
        };
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| parse(e.to_string()))?;
        match value.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(parse(format!(
                    "unsupported format_version {v} (this build reads {FORMAT_VERSION})"
                )))
            }
            None => return Err(parse("missing format_version".into())),
        }
        serde_json::from_value(value).map_err(|e| parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| QkanError::io(path, e))?;
        Self::from_json(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::daruan::DaruanInit;
    use crate::qkan::make_hqkan;
    use crate::rng::{stream, Purpose};

    fn provenance() -> Provenance {
        Provenance {
            seed: 3,
            config_hash: "abc".into(),
            epoch: 7,
            best_test_rmse: Some(0.125),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = stream(1, Purpose::Init);
        let init = DaruanInit {
            angle_range: 3.0,
            ..Default::default()
        };
        for net in [
            QkanNetwork::new(&[2, 3, 1], 2, &init, &mut rng).unwrap(),
            make_hqkan(12, 3, 2, &[2], &init, &mut rng).unwrap(),
        ] {
            let ck = Checkpoint::from_network(&net, provenance());
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.json");
            ck.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            assert_eq!(back, ck);
            let restored = back.network().unwrap();
            assert_eq!(restored, net);
            let x: Vec<f64> = (0..net.input_dim()).map(|i| 0.1 * i as f64 - 0.3).collect();
            let (a, b) = (net.forward(&x).unwrap(), restored.forward(&x).unwrap());
            assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let net = QkanNetwork::new(&[1, 1], 1, &DaruanInit::default(), &mut stream(0, Purpose::Init)).unwrap();
        let mut ck = Checkpoint::from_network(&net, provenance());
        ck.format_version = 2;
        let err = Checkpoint::from_json(&ck.to_json(), Path::new("v2.json")).unwrap_err();
        assert!(err.to_string().contains("format_version 2"), "{err}");
        assert_eq!(err.exit_code(), 3);
        let err = Checkpoint::from_json("{\"params\": []}", Path::new("none.json")).unwrap_err();
        assert!(err.to_string().contains("missing format_version"));
    }

    #[test]
    fn wrong_parameter_count_is_rejected() {
        let net = QkanNetwork::new(&[1, 1], 1, &DaruanInit::default(), &mut stream(0, Purpose::Init)).unwrap();
        let mut ck = Checkpoint::from_network(&net, provenance());
        ck.params.pop();
        assert!(ck.network().is_err());
    }
}
