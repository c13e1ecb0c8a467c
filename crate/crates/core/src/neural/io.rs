//! GSNN binary model files (little-endian).
//!
//! ```text
//! magic        4 bytes  "GSNN"
//! version      u32      FORMAT_VERSION
//! input_dim    u32
//! output_dim   u32
//! layer_count  u32
//! per layer:
//!   rows       u32      (outputs)
//!   cols       u32      (inputs)
//!   weights    f64 x rows*cols, row-major
//!   biases     f64 x rows
//!   activation u8       0 identity, 1 softplus, 2 tanh, 3 square
//! input_scale   f64 x input_dim
//! input_offset  f64 x input_dim
//! output_scale  f64 x output_dim
//! output_offset f64 x output_dim
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Activation, Layer, Mlp, NeuralError, Result};
use crate::numlin::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"GSNN";
pub const FORMAT_VERSION: u32 = 1;

// Guards against absurd allocations when reading corrupt headers.
const MAX_DIM: u32 = 1 << 16;

pub fn write_model<W: Write>(net: &Mlp, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + net.parameter_count() * 8);
    buf.extend_from_slice(MAGIC);
    for v in [
        FORMAT_VERSION,
        net.input_dim() as u32,
        net.output_dim() as u32,
        net.layers().len() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for layer in net.layers() {
        buf.extend_from_slice(&(layer.weights.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.weights.cols() as u32).to_le_bytes());
        for v in layer.weights.as_slice().iter().chain(&layer.bias) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(layer.activation.tag());
    }
    for vec in [
        net.input_scale(),
        net.input_offset(),
        net.output_scale(),
        net.output_offset(),
    ] {
        for v in vec {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(NeuralError::Format(format!(
                "truncated file: needed {n} bytes at offset {}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn dim(&mut self, what: &str) -> Result<usize> {
        let v = self.u32()?;
        if v == 0 || v > MAX_DIM {
            return Err(NeuralError::Format(format!("{what} = {v} out of range")));
        }
        Ok(v as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_model<R: Read>(mut r: R) -> Result<Mlp> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut rd = Reader { bytes: &bytes, pos: 0 };
    if rd.take(4)? != MAGIC {
        return Err(NeuralError::Format("bad magic, not a GSNN model".into()));
    }
    let version = rd.u32()?;
    if version != FORMAT_VERSION {
        return Err(NeuralError::Format(format!(
            "unsupported version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let input_dim = rd.dim("input_dim")?;
    let output_dim = rd.dim("output_dim")?;
    let n_layers = rd.dim("layer count")?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rows = rd.dim("layer rows")?;
        let cols = rd.dim("layer cols")?;
        let weights = rd.f64s(rows * cols)?;
        let bias = rd.f64s(rows)?;
        let tag = rd.take(1)?[0];
        let act =
            Activation::from_tag(tag).ok_or_else(|| NeuralError::Format(format!("unknown activation tag {tag}")))?;
        let w = DenseMatrix::from_row_major(rows, cols, weights).expect("sized");
        layers.push(Layer::new(w, bias, act)?);
    }
    let net = Mlp::from_layers(layers).map_err(|e| NeuralError::Format(e.to_string()))?;
    if net.input_dim() != input_dim || net.output_dim() != output_dim {
        return Err(NeuralError::Format(format!(
            "header says {input_dim}->{output_dim}, layers give {}->{}",
            net.input_dim(),
            net.output_dim()
        )));
    }
    let in_scale = rd.f64s(input_dim)?;
    let in_offset = rd.f64s(input_dim)?;
    let out_scale = rd.f64s(output_dim)?;
    let out_offset = rd.f64s(output_dim)?;
    if rd.pos != bytes.len() {
        return Err(NeuralError::Format(format!("{} trailing bytes", bytes.len() - rd.pos)));
    }
    net.with_normalization(in_scale, in_offset, out_scale, out_offset)
        .map_err(|e| NeuralError::Format(e.to_string()))
}

pub fn save_model(net: &Mlp, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_model(net, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Mlp> {
    read_model(fs::File::open(path)?)
}
