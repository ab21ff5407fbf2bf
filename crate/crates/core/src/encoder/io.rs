//! Binary parameter files.
//!
//! Layout, little-endian: magic `XENC`, u32 version, u32 cell (0 LSTM, 1 GRU,
//! 2 RNN), u32 update (0 standard, 1 candidate-only), u32 layers, u32 input
//! dim, u32 hidden dim, then every parameter as f32 in storage order: tower 0
//! then tower 1, each layer bottom-up as `W`, `U`, `b`, each matrix row-major
//! with gate blocks stacked.

use std::io::{Read, Write};

use super::{CellKind, CellUpdate, EncoderParams, NetShape};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"XENC";
const VERSION: u32 = 1;

pub fn write_params(p: &EncoderParams, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    let cell = match p.shape.cell {
        CellKind::Lstm => 0u32,
        CellKind::Gru => 1,
        CellKind::Rnn => 2,
    };
    let update = match p.shape.update {
        CellUpdate::Standard => 0u32,
        CellUpdate::CandidateOnly => 1,
    };
    for v in [
        VERSION,
        cell,
        update,
        p.shape.layers as u32,
        p.shape.input_dim as u32,
        p.shape.hidden_dim as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(p.num_values() * 4);
    for &v in p.values() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_params(mut r: impl Read) -> Result<EncoderParams> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an encoder parameter file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported encoder file version {version}")));
    }
    let cell = match read_u32(&mut r)? {
        0 => CellKind::Lstm,
        1 => CellKind::Gru,
        2 => CellKind::Rnn,
        c => return Err(Error::Format(format!("unknown cell code {c}"))),
    };
    let update = match read_u32(&mut r)? {
        0 => CellUpdate::Standard,
        1 => CellUpdate::CandidateOnly,
        c => return Err(Error::Format(format!("unknown cell update code {c}"))),
    };
    let shape = NetShape {
        cell,
        update,
        layers: read_u32(&mut r)? as usize,
        input_dim: read_u32(&mut r)? as usize,
        hidden_dim: read_u32(&mut r)? as usize,
    };
    let mut p = EncoderParams::zeros(shape).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = vec![0u8; p.num_values() * 4];
    r.read_exact(&mut buf)?;
    for (v, b) in p.values_mut().zip(buf.chunks_exact(4)) {
        *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
    }
    if !p.is_finite() {
        return Err(Error::Format("non-finite parameter".into()));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }
    Ok(p)
}
