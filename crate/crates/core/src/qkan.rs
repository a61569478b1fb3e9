//! Layers and networks of activation edges.
//!
//! A layer maps `n_in` nodes to `n_out` nodes with one [`DaruanParams`] edge
//! per pair; node `j` of the output is the sum of its incoming edge
//! activations. A network stacks layers and may be wrapped by an affine
//! encoder and decoder (the hybrid, autoencoder-shaped variant).
//!
//! Flat parameter order, used by checkpoints and optimizers: encoder weight
//! (row-major) and bias, then every layer's edges row-major by `(out, in)`
//! in [`DaruanParams::flat`] order, then decoder weight and bias.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::daruan::{self, DaruanInit, DaruanParams};
use crate::error::{QkanError, Result};
use crate::statevector::{ry_unchecked, rz_unchecked, StateBatch};

fn check_len(expected: usize, actual: usize, context: &'static str) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(QkanError::DimensionMismatch {
            expected,
            actual,
            context,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QkanLayer {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `[n_out][n_in]`.
    pub edges: Vec<DaruanParams>,
}

impl QkanLayer {
    pub fn new<R: Rng + ?Sized>(
        n_in: usize,
        n_out: usize,
        r: usize,
        init: &DaruanInit,
        rng: &mut R,
    ) -> Result<Self> {
        let edges = (0..n_in * n_out)
            .map(|_| DaruanParams::init(r, init, rng))
            .collect::<Result<Vec<_>>>()?;
        QkanLayer::from_edges(n_in, n_out, edges)
    }

    pub fn from_edges(n_in: usize, n_out: usize, edges: Vec<DaruanParams>) -> Result<Self> {
        let layer = QkanLayer { n_in, n_out, edges };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_in == 0 || self.n_out == 0 {
            return Err(QkanError::InvalidArgument("layer node counts must be >= 1".into()));
        }
        check_len(self.n_in * self.n_out, self.edges.len(), "layer edge count")?;
        let r = self.edges[0].r;
        for e in &self.edges {
            e.validate()?;
            if e.r != r {
                return Err(QkanError::InvalidArgument(format!(
                    "edges in one layer must share r ({} vs {r})",
                    e.r
                )));
            }
        }
        Ok(())
    }

    pub fn r(&self) -> usize {
        self.edges[0].r
    }

    pub fn edge(&self, out: usize, inp: usize) -> &DaruanParams {
        &self.edges[out * self.n_in + inp]
    }

    pub fn edge_mut(&mut self, out: usize, inp: usize) -> &mut DaruanParams {
        &mut self.edges[out * self.n_in + inp]
    }

    pub fn param_count(&self) -> usize {
        self.edges.len() * DaruanParams::count_for(self.r())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n_in, x.len(), "layer input")?;
        Ok(self
            .edges
            .chunks(self.n_in)
            .map(|row| row.iter().zip(x).map(|(e, &xi)| daruan::forward(e, xi)).sum())
            .collect())
    }

    /// Batched forward through a `(B, n_out, n_in)` [`StateBatch`]; `xs` is
    /// row-major `[B][n_in]`, the result row-major `[B][n_out]`.
    pub fn forward_batch(&self, xs: &[f64]) -> Result<Vec<f64>> {
        if !xs.len().is_multiple_of(self.n_in) {
            return Err(QkanError::DimensionMismatch {
                expected: self.n_in,
                actual: xs.len() % self.n_in,
                context: "batched layer input row",
            });
        }
        let batch = xs.len() / self.n_in;
        let r = self.r();
        let mut states = StateBatch::new_plus(batch, self.n_out, self.n_in);
        for k in 0..4 * r + 3 {
            let block = k / 4;
            states.apply_each(|b, n, m| {
                let e = self.edge(n, m);
                match k % 4 {
                    0 => rz_unchecked(e.angles[block][0]),
                    1 => ry_unchecked(e.angles[block][1]),
                    2 => rz_unchecked(e.angles[block][2]),
                    _ => rz_unchecked(e.enc_w[block] * xs[b * self.n_in + m] + e.enc_b[block]),
                }
            });
        }
        let z = states.expect_z();
        let mut out = vec![0.0; batch * self.n_out];
        for b in 0..batch {
            for n in 0..self.n_out {
                let mut acc = 0.0;
                for m in 0..self.n_in {
                    let e = self.edge(n, m);
                    let x = xs[b * self.n_in + m];
                    acc += e.w_base * daruan::silu(x)
                        + e.w_quant * z[(b * self.n_out + n) * self.n_in + m]
                        + e.out_bias;
                }
                out[b * self.n_out + n] = acc;
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `acc` and returns the input
    /// gradient.
    fn backward_accumulate(&self, x: &[f64], upstream: &[f64], acc: &mut [f64]) -> Vec<f64> {
        let per_edge = DaruanParams::count_for(self.r());
        let mut d_in = vec![0.0; self.n_in];
        for (k, (edge, slot)) in self.edges.iter().zip(acc.chunks_mut(per_edge)).enumerate() {
            let (j, i) = (k / self.n_in, k % self.n_in);
            d_in[i] += daruan::backward_accumulate(edge, x[i], upstream[j], slot);
        }
        d_in
    }
}

/// `y = W x + b` with `W` row-major `[n_out][n_in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub n_in: usize,
    pub n_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    /// Fan-in uniform init, zero bias.
    pub fn new<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Result<Self> {
        if n_in == 0 || n_out == 0 {
            return Err(QkanError::InvalidArgument("linear layer dims must be >= 1".into()));
        }
        let bound = 1.0 / (n_in as f64).sqrt();
        let weight = (0..n_in * n_out).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(LinearLayer {
            n_in,
            n_out,
            weight,
            bias: vec![0.0; n_out],
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_len(self.n_in * self.n_out, self.weight.len(), "linear weight")?;
        check_len(self.n_out, self.bias.len(), "linear bias")?;
        if self.weight.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(QkanError::InvalidArgument("linear layer entries must be finite".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n_in, x.len(), "linear input")?;
        Ok(self
            .weight
            .chunks(self.n_in)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect())
    }

    fn backward_accumulate(&self, x: &[f64], upstream: &[f64], acc: &mut [f64]) -> Vec<f64> {
        let (w_acc, b_acc) = acc.split_at_mut(self.n_in * self.n_out);
        let mut d_in = vec![0.0; self.n_in];
        for (o, &g) in upstream.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            b_acc[o] += g;
            let row = &self.weight[o * self.n_in..(o + 1) * self.n_in];
            let slot = &mut w_acc[o * self.n_in..(o + 1) * self.n_in];
            for i in 0..self.n_in {
                slot[i] += g * x[i];
                d_in[i] += g * row[i];
            }
        }
        d_in
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight);
        out.extend_from_slice(&self.bias);
    }

    fn read_flat(&mut self, values: &[f64]) -> usize {
        let nw = self.weight.len();
        self.weight.copy_from_slice(&values[..nw]);
        self.bias.copy_from_slice(&values[nw..nw + self.n_out]);
        nw + self.n_out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QkanNetwork {
    /// Node counts `[n_0, ..., n_L]` of the activation core.
    pub shape: Vec<usize>,
    pub layers: Vec<QkanLayer>,
    pub encoder: Option<LinearLayer>,
    pub decoder: Option<LinearLayer>,
}

/// Gradient of `upstream . network_forward(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrad {
    /// Same order as [`QkanNetwork::params_flat`].
    pub params: Vec<f64>,
    pub d_input: Vec<f64>,
}

impl QkanNetwork {
    pub fn new<R: Rng + ?Sized>(
        shape: &[usize],
        r: usize,
        init: &DaruanInit,
        rng: &mut R,
    ) -> Result<Self> {
        if shape.len() < 2 {
            return Err(QkanError::InvalidArgument(format!(
                "network shape needs at least two node counts, got {shape:?}"
            )));
        }
        if shape.contains(&0) {
            return Err(QkanError::InvalidArgument(format!(
                "network shape entries must be >= 1, got {shape:?}"
            )));
        }
        let layers = shape
            .windows(2)
            .map(|w| QkanLayer::new(w[0], w[1], r, init, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(QkanNetwork {
            shape: shape.to_vec(),
            layers,
            encoder: None,
            decoder: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.shape.len() != self.layers.len() + 1 {
            return Err(QkanError::InvalidArgument(format!(
                "shape {:?} does not describe {} layers",
                self.shape,
                self.layers.len()
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            check_len(self.shape[l], layer.n_in, "layer input width")?;
            check_len(self.shape[l + 1], layer.n_out, "layer output width")?;
        }
        if let Some(enc) = &self.encoder {
            enc.validate()?;
            check_len(self.shape[0], enc.n_out, "encoder output width")?;
        }
        if let Some(dec) = &self.decoder {
            dec.validate()?;
            check_len(self.shape[self.shape.len() - 1], dec.n_in, "decoder input width")?;
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.as_ref().map_or(self.shape[0], |e| e.n_in)
    }

    pub fn output_dim(&self) -> usize {
        self.decoder
            .as_ref()
            .map_or(self.shape[self.shape.len() - 1], |d| d.n_out)
    }

    pub fn param_count(&self) -> usize {
        self.encoder.as_ref().map_or(0, LinearLayer::param_count)
            + self.layers.iter().map(QkanLayer::param_count).sum::<usize>()
            + self.decoder.as_ref().map_or(0, LinearLayer::param_count)
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        if let Some(enc) = &self.encoder {
            enc.write_flat(&mut out);
        }
        for layer in &self.layers {
            for e in &layer.edges {
                e.write_flat(&mut out);
            }
        }
        if let Some(dec) = &self.decoder {
            dec.write_flat(&mut out);
        }
        out
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        check_len(self.param_count(), values.len(), "flat parameter vector")?;
        let mut at = 0;
        if let Some(enc) = &mut self.encoder {
            at += enc.read_flat(&values[at..]);
        }
        for layer in &mut self.layers {
            for e in &mut layer.edges {
                at += e.read_flat(&values[at..])?;
            }
        }
        if let Some(dec) = &mut self.decoder {
            at += dec.read_flat(&values[at..]);
        }
        debug_assert_eq!(at, values.len());
        Ok(())
    }

    /// Inputs to every activation layer, then the core output, for one sample.
    pub fn layer_activations(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        check_len(self.input_dim(), x.len(), "network input")?;
        let first = match &self.encoder {
            Some(enc) => enc.forward(x)?,
            None => x.to_vec(),
        };
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(first);
        for layer in &self.layers {
            let next = layer.forward(acts.last().expect("non-empty"))?;
            acts.push(next);
        }
        Ok(acts)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut acts = self.layer_activations(x)?;
        let core = acts.pop().expect("non-empty");
        match &self.decoder {
            Some(dec) => dec.forward(&core),
            None => Ok(core),
        }
    }

    /// Adds the parameter gradient of `upstream . forward(x)` into `acc` and
    /// returns the input gradient.
    pub fn backward_accumulate(&self, x: &[f64], upstream: &[f64], acc: &mut [f64]) -> Result<Vec<f64>> {
        check_len(self.output_dim(), upstream.len(), "upstream gradient")?;
        check_len(self.param_count(), acc.len(), "gradient accumulator")?;
        let acts = self.layer_activations(x)?;

        let enc_len = self.encoder.as_ref().map_or(0, LinearLayer::param_count);
        let (enc_acc, rest) = acc.split_at_mut(enc_len);
        let core_len: usize = self.layers.iter().map(QkanLayer::param_count).sum();
        let (core_acc, dec_acc) = rest.split_at_mut(core_len);

        let mut g = match &self.decoder {
            Some(dec) => dec.backward_accumulate(&acts[self.layers.len()], upstream, dec_acc),
            None => upstream.to_vec(),
        };

        let mut end = core_len;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let start = end - layer.param_count();
            g = layer.backward_accumulate(&acts[l], &g, &mut core_acc[start..end]);
            end = start;
        }

        if let Some(enc) = &self.encoder {
            g = enc.backward_accumulate(x, &g, enc_acc);
        }
        Ok(g)
    }

    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<NetworkGrad> {
        let mut params = vec![0.0; self.param_count()];
        let d_input = self.backward_accumulate(x, upstream, &mut params)?;
        Ok(NetworkGrad { params, d_input })
    }

    /// Every edge extended to `new_r` repetitions with identity blocks.
    pub fn extend(&self, new_r: usize) -> Result<QkanNetwork> {
        let mut out = self.clone();
        for layer in &mut out.layers {
            for e in &mut layer.edges {
                *e = e.extend(new_r)?;
            }
        }
        Ok(out)
    }
}

pub fn layer_forward(layer: &QkanLayer, x: &[f64]) -> Result<Vec<f64>> {
    layer.forward(x)
}

pub fn network_forward(net: &QkanNetwork, x: &[f64]) -> Result<Vec<f64>> {
    net.forward(x)
}

pub fn network_backward(net: &QkanNetwork, x: &[f64], upstream: &[f64]) -> Result<NetworkGrad> {
    net.backward(x, upstream)
}

pub fn param_count(net: &QkanNetwork) -> usize {
    net.param_count()
}

/// Bottleneck width for a `dim`-wide input or output: the bit length of
/// `dim` (`floor(log2 dim) + 1`), never below 2.
pub fn latent_dim(dim: usize) -> usize {
    let bits = (usize::BITS - dim.leading_zeros()) as usize;
    bits.max(2)
}

/// Activation core over `[latent(in_dim), hidden.., latent(out_dim)]` between
/// an affine compressor and an affine expander.
pub fn make_hqkan<R: Rng + ?Sized>(
    in_dim: usize,
    out_dim: usize,
    r: usize,
    hidden_shape: &[usize],
    init: &DaruanInit,
    rng: &mut R,
) -> Result<QkanNetwork> {
    if in_dim == 0 || out_dim == 0 {
        return Err(QkanError::InvalidArgument(format!(
            "hybrid network dims must be >= 1, got {in_dim} -> {out_dim}"
        )));
    }
    let lat_in = latent_dim(in_dim);
    let lat_out = latent_dim(out_dim);
    let mut shape = Vec::with_capacity(hidden_shape.len() + 2);
    shape.push(lat_in);
    shape.extend_from_slice(hidden_shape);
    shape.push(lat_out);
    let encoder = LinearLayer::new(in_dim, lat_in, rng)?;
    let mut net = QkanNetwork::new(&shape, r, init, rng)?;
    net.encoder = Some(encoder);
    net.decoder = Some(LinearLayer::new(lat_out, out_dim, rng)?);
    net.validate()?;
    Ok(net)
}
