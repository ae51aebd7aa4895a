//! `FCNW` weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FCNW"                      4 bytes
//! format version              u16 (currently 1)
//! architecture fingerprint    32 bytes (SHA-256)
//! layer count                 u32
//! per layer:
//!   kind code                 u32
//!   weight dims               4 x u32 (kh, kw, cin, cout; zeros if none)
//!   bias length               u32
//!   weights                   f64 x (kh*kw*cin*cout)
//!   biases                    f64 x bias length
//! ```

use std::path::Path;

use super::net::{Architecture, LayerKind, LayerParams, NetworkParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FCNW";
pub const FORMAT_VERSION: u16 = 1;

pub fn encode(params: &NetworkParams) -> Vec<u8> {
    let arch = &params.architecture;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&arch.fingerprint());
    out.extend_from_slice(&(arch.layers().len() as u32).to_le_bytes());
    for (spec, p) in arch.layers().iter().zip(&params.layers) {
        let dims: [usize; 4] = if p.weights.is_empty() {
            [0; 4]
        } else {
            [spec.kernel, spec.kernel, spec.channels_in, spec.channels_out]
        };
        out.extend_from_slice(&spec.kind.code().to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(p.bias.len() as u32).to_le_bytes());
        for v in p.weights.iter().chain(&p.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::WeightFile("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::WeightFile("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

/// Decodes a weight file against the architecture it must match.
pub fn decode(buf: &[u8], architecture: Architecture) -> Result<NetworkParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::WeightFile("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::WeightFile(format!("unsupported version {version}")));
    }
    if r.take(32)? != architecture.fingerprint() {
        return Err(Error::FingerprintMismatch);
    }
    let count = r.u32()? as usize;
    if count != architecture.layers().len() {
        return Err(Error::WeightFile(format!(
            "{count} layers, architecture has {}",
            architecture.layers().len()
        )));
    }
    let mut layers = Vec::with_capacity(count);
    for (i, spec) in architecture.layers().iter().enumerate() {
        let kind = r.u32()?;
        if kind != spec.kind.code() {
            return Err(Error::WeightFile(format!("layer {i}: kind code {kind}")));
        }
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let nbias = r.u32()? as usize;
        let nw: usize = dims.iter().map(|&d| d as usize).product();
        if (nw, nbias) != spec.param_counts() {
            return Err(Error::WeightFile(format!("layer {i}: shape {dims:?} + {nbias}")));
        }
        if matches!(spec.kind, LayerKind::Conv | LayerKind::Upconv) && dims[0] as usize != spec.kernel {
            return Err(Error::WeightFile(format!("layer {i}: kernel {}", dims[0])));
        }
        let weights = r.f64s(nw)?;
        let bias = r.f64s(nbias)?;
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::WeightFile(format!("layer {i}: non-finite parameter")));
        }
        layers.push(LayerParams { weights, bias });
    }
    if r.pos != buf.len() {
        return Err(Error::WeightFile("trailing bytes".into()));
    }
    let params = NetworkParams { architecture, layers };
    params.check_shapes()?;
    Ok(params)
}

pub fn save(params: &NetworkParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, architecture: Architecture) -> Result<NetworkParams> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf, architecture).map_err(|e| e.in_file(path))
}
