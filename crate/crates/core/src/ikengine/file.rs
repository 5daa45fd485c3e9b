//! Network file (`handik-mlp-v1`).
//!
//! One JSON header line, then a little-endian `f32` blob. For each layer in
//! order: `W` (`in x out`, row-major), `b`, and for normalized layers
//! `gamma`, `beta`, `running_mean`, `running_var`. Parameters are stored in
//! single precision, so a reload matches the saved network to `f32` rounding.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, BatchNorm, Layer, Mlp, BN_EPS, BN_MOMENTUM};
use crate::error::{Error, Result};

pub const MLP_FORMAT: &str = "handik-mlp-v1";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    widths: Vec<usize>,
    activations: Vec<Activation>,
    batch_norm: Vec<bool>,
    bn_momentum: f64,
    bn_eps: f64,
    /// Number of `f32` values in the blob.
    values: usize,
}

fn blob_len(widths: &[usize], batch_norm: &[bool]) -> usize {
    (0..widths.len() - 1)
        .map(|l| widths[l] * widths[l + 1] + widths[l + 1] + if batch_norm[l] { 4 * widths[l + 1] } else { 0 })
        .sum()
}

impl Mlp {
    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let mut w = BufWriter::new(w);
        let batch_norm: Vec<bool> = self.layers().iter().map(|l| l.norm.is_some()).collect();
        let widths = self.widths();
        let header = Header {
            format: MLP_FORMAT.into(),
            values: blob_len(&widths, &batch_norm),
            widths,
            activations: self.layers().iter().map(|l| l.activation).collect(),
            batch_norm,
            bn_momentum: BN_MOMENTUM,
            bn_eps: BN_EPS,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        let mut put = |vals: &mut dyn Iterator<Item = &f64>| -> Result<()> {
            for v in vals {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
            Ok(())
        };
        for l in self.layers() {
            put(&mut l.weight.iter())?;
            put(&mut l.bias.iter())?;
            if let Some(bn) = &l.norm {
                put(&mut bn.gamma.iter())?;
                put(&mut bn.beta.iter())?;
                put(&mut bn.running_mean.iter())?;
                put(&mut bn.running_var.iter())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let h: Header = serde_json::from_str(line.trim_end())?;
        if h.format != MLP_FORMAT {
            return Err(Error::Format(format!("unsupported network format {:?}", h.format)));
        }
        let n = h.widths.len();
        if n < 2 || h.activations.len() != n - 1 || h.batch_norm.len() != n - 1 {
            return Err(Error::Format("network header has inconsistent layer counts".into()));
        }
        if h.values != blob_len(&h.widths, &h.batch_norm) {
            return Err(Error::Format("network header value count does not match widths".into()));
        }
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() != 4 * h.values {
            return Err(Error::Format(format!("expected {} parameter bytes, found {}", 4 * h.values, buf.len())));
        }
        let mut vals = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        let mut take = |k: usize| -> Vec<f64> { vals.by_ref().take(k).collect() };
        let mut layers = Vec::with_capacity(n - 1);
        for l in 0..n - 1 {
            let (fi, fo) = (h.widths[l], h.widths[l + 1]);
            let weight = Array2::from_shape_vec((fi, fo), take(fi * fo))
                .map_err(|e| Error::Format(format!("layer {l} weights: {e}")))?;
            let bias = Array1::from(take(fo));
            let norm = h.batch_norm[l].then(|| BatchNorm {
                gamma: Array1::from(take(fo)),
                beta: Array1::from(take(fo)),
                running_mean: Array1::from(take(fo)),
                running_var: Array1::from(take(fo)),
            });
            layers.push(Layer { weight, bias, norm, activation: h.activations[l] });
        }
        Mlp::from_layers(layers).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn save_mlp(net: &Mlp, path: impl AsRef<Path>) -> Result<()> {
    net.write_to(File::create(path)?)
}

pub fn load_mlp(path: impl AsRef<Path>) -> Result<Mlp> {
    Mlp::read_from(File::open(path)?)
}
