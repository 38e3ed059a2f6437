//! Network parameter files.
//!
//! Layout (little-endian): `u32` layer count, then `u32 fan_in, u32 fan_out`
//! per layer, then for each layer its `fan_in * fan_out` weights (row-major)
//! followed by `fan_out` biases, all as `f64`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::mlp::{Dense, MlpParams};

pub fn encode_params(params: &MlpParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * params.layers.len() + 8 * params.num_params());
    out.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for (i, o) in params.shapes() {
        out.extend_from_slice(&(i as u32).to_le_bytes());
        out.extend_from_slice(&(o as u32).to_le_bytes());
    }
    for s in params.slices() {
        for v in s {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_params<W: Write>(w: &mut W, params: &MlpParams) -> std::io::Result<()> {
    w.write_all(&encode_params(params))
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Truncated(format!("parameter file ends inside {what}")));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn take_u32(buf: &mut &[u8], what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4, what)?.try_into().unwrap()))
}

pub fn decode_params(mut buf: &[u8]) -> Result<MlpParams> {
    let n_layers = take_u32(&mut buf, "layer count")? as usize;
    if n_layers == 0 || n_layers > 1024 {
        return Err(Error::Length(format!("implausible layer count {n_layers}")));
    }
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let i = take_u32(&mut buf, "shape header")? as usize;
        let o = take_u32(&mut buf, "shape header")? as usize;
        shapes.push((i, o));
    }
    for w in shapes.windows(2) {
        if w[0].1 != w[1].0 {
            return Err(Error::Length(format!("layer shapes do not chain: {shapes:?}")));
        }
    }
    let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
        let bytes = take(&mut buf, 8 * n, "parameter payload")?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let mut layers = Vec::with_capacity(n_layers);
    for &(i, o) in &shapes {
        let w = read_f64s(i * o)?;
        let bias = read_f64s(o)?;
        layers.push(Dense {
            weight: Matrix::from_vec(i, o, w)?,
            bias,
        });
    }
    if !buf.is_empty() {
        return Err(Error::Length(format!("{} trailing bytes", buf.len())));
    }
    Ok(MlpParams { layers })
}

pub fn read_params<R: Read>(r: &mut R) -> Result<MlpParams> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::io("<reader>", e))?;
    decode_params(&buf)
}
