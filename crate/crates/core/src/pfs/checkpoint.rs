//! `.pfsp` parameter checkpoints.
//!
//! Layout (little-endian): magic `MDMP`, version u32, D, hidden, d as u32,
//! dropout rate f64, log γ f64, then W₁ (D×H), b₁, W₂ (H×d), b₂ as f64 blocks.

use std::io::{Read, Write};

use super::{Activation, PfsParams};
use crate::error::{invalid, Error, Result};

pub const PFSP_MAGIC: [u8; 4] = *b"MDMP";
pub const PFSP_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 3 * 4 + 8 + 8;

pub fn encode_checkpoint(params: &PfsParams) -> Result<Vec<u8>> {
    params.validate()?;
    if params.activation != Activation::Gelu {
        return Err(invalid("checkpoints store GELU projections only"));
    }
    let dims = [params.input_dim, params.hidden, params.output_dim];
    if dims.iter().any(|&v| v > u32::MAX as usize) {
        return Err(invalid("dimension exceeds u32"));
    }
    let n_values = params.w1.len() + params.b1.len() + params.w2.len() + params.b2.len();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * n_values);
    out.extend_from_slice(&PFSP_MAGIC);
    out.extend_from_slice(&PFSP_VERSION.to_le_bytes());
    for v in dims {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&params.dropout_rate.to_le_bytes());
    out.extend_from_slice(&params.log_gamma.to_le_bytes());
    for block in [&params.w1, &params.b1, &params.w2, &params.b2] {
        for v in block.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_checkpoint<W: Write>(params: &PfsParams, mut sink: W) -> Result<()> {
    sink.write_all(&encode_checkpoint(params)?)?;
    sink.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!("checkpoint ends inside {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn block(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8).ok_or_else(|| Error::Corrupt("size overflow".into()))?,
            what,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<PfsParams> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != PFSP_MAGIC {
        return Err(Error::BadMagic {
            expected: PFSP_MAGIC,
            found: magic,
        });
    }
    let version = cur.u32("version")?;
    if version != PFSP_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let d_in = cur.u32("header")? as usize;
    let hidden = cur.u32("header")? as usize;
    let d_out = cur.u32("header")? as usize;
    if d_in == 0 || hidden == 0 || d_out == 0 {
        return Err(Error::Corrupt("zero dimension in checkpoint".into()));
    }
    let dropout_rate = cur.f64("header")?;
    let log_gamma = cur.f64("header")?;
    if !dropout_rate.is_finite() || !log_gamma.is_finite() {
        return Err(Error::NonFinite("checkpoint header"));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::Corrupt(format!("dropout rate {dropout_rate} outside [0, 1)")));
    }
    let w1 = cur.block(d_in * hidden, "layer 1 weights")?;
    let b1 = cur.block(hidden, "layer 1 bias")?;
    let w2 = cur.block(hidden * d_out, "layer 2 weights")?;
    let b2 = cur.block(d_out, "layer 2 bias")?;
    if cur.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - cur.pos
        )));
    }
    if w1.iter().chain(&b1).chain(&w2).chain(&b2).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("checkpoint weights"));
    }
    Ok(PfsParams {
        input_dim: d_in,
        hidden,
        output_dim: d_out,
        dropout_rate,
        log_gamma,
        activation: Activation::Gelu,
        w1,
        b1,
        w2,
        b2,
    })
}

pub fn read_checkpoint<R: Read>(mut source: R) -> Result<PfsParams> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
