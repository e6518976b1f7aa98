//! Binary checkpoint for a trained [`SngpHead`].
//!
//! Layout, all little-endian: magic `SNGP`, `u16` version, `u32` layer
//! count, `u32` layer dims (count + 1 entries), `u32` power iterations,
//! `f64` spectral cap, `f64` ridge factor, `u32` random feature dim, `u32`
//! class count, then row-major `f64` payloads: each layer's weight and bias,
//! the random feature weight and bias, the output weights and the
//! precision matrix.

use std::io::{Read, Write};
use std::path::Path;

use super::{Activation, DenseLayer, GpPosterior, RffProjection, SnMlp, SnMlpConfig, SngpHead};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MAGIC: &[u8; 4] = b"SNGP";
const VERSION: u16 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes `head` to bytes.
pub fn encode_checkpoint(head: &SngpHead) -> Result<Vec<u8>> {
    let cfg = head.mlp().config();
    let post = head.posterior();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, head.mlp().layers().len())?;
    for &d in &cfg.layer_dims {
        put_u32(&mut out, d)?;
    }
    put_u32(&mut out, cfg.power_iters)?;
    out.extend_from_slice(&cfg.spectral_cap.to_le_bytes());
    out.extend_from_slice(&post.tau().to_le_bytes());
    put_u32(&mut out, head.rff().rff_dim())?;
    put_u32(&mut out, head.n_classes())?;
    for layer in head.mlp().layers() {
        put_f64s(&mut out, layer.weight.as_slice());
        put_f64s(&mut out, &layer.bias);
    }
    put_f64s(&mut out, head.rff().weight().as_slice());
    put_f64s(&mut out, head.rff().bias());
    put_f64s(&mut out, post.beta().as_slice());
    put_f64s(&mut out, post.precision().as_slice());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Format("checkpoint size overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("checkpoint size overflow".into()))?;
        Matrix::new(rows, cols, self.f64s(n)?)
    }
}

/// Parses bytes written by [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<SngpHead> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not an SNGP checkpoint".into()));
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n_layers = c.u32()?;
    if n_layers == 0 || n_layers > 1024 {
        return Err(Error::Format(format!("implausible layer count {n_layers}")));
    }
    let layer_dims = (0..=n_layers).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let power_iters = c.u32()?;
    let spectral_cap = c.f64()?;
    let tau = c.f64()?;
    let rff_dim = c.u32()?;
    let n_classes = c.u32()?;

    let config = SnMlpConfig {
        layer_dims: layer_dims.clone(),
        spectral_cap,
        power_iters,
        activation: Activation::Relu,
    };
    let mut layers = Vec::with_capacity(n_layers);
    for w in layer_dims.windows(2) {
        let weight = c.matrix(w[1], w[0])?;
        let bias = c.f64s(w[1])?;
        layers.push(DenseLayer::new(weight, bias)?);
    }
    let mlp = SnMlp::from_layers(config, layers)?;
    let rff_weight = c.matrix(rff_dim, *layer_dims.last().unwrap())?;
    let rff_bias = c.f64s(rff_dim)?;
    let rff = RffProjection::from_parts(rff_weight, rff_bias)?;
    let beta = c.matrix(rff_dim, n_classes)?;
    let precision = c.matrix(rff_dim, rff_dim)?;
    if c.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes in checkpoint",
            bytes.len() - c.pos
        )));
    }
    let posterior = GpPosterior::from_parts(beta, precision, tau)?;
    SngpHead::new(mlp, rff, posterior)
}

pub fn save_checkpoint(head: &SngpHead, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_checkpoint(head)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SngpHead> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
