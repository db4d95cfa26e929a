//! "ADNC" container.
//!
//! ```text
//! magic    "ADNC"
//! version  u16 (= 1)
//! input    u8 rank, rank × u32 dims
//! specs    u32 count, then per layer the kind byte and u32 fields of the
//!          "ADNN" checkpoint layout
//! layers   u32 count, then per weighted layer:
//!            u32 id, u8 rank, rank × u32 dims, u8 n, u8 b, f32 q,
//!            u32 records, u32 nonzeros,
//!            ceil(records·(n+b)/8) bytes of records,
//!            u32 bias length, bias × f64
//! ```
//! Integers and reals are little-endian; record streams are LSB-first.

use std::fs;
use std::path::Path;

use super::{CompressedLayer, CompressedModel};
use crate::bytes::{put_f32, put_f64, put_u16, put_u32, put_u8, to_u32, Reader};
use crate::error::{FormatError, Result};
use crate::nn::checkpoint::{read_shape, read_spec, write_shape, write_spec};

pub const ADNC_MAGIC: &[u8; 4] = b"ADNC";
pub const ADNC_VERSION: u16 = 1;

pub fn to_bytes(cm: &CompressedModel) -> Result<Vec<u8>> {
    cm.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(ADNC_MAGIC);
    put_u16(&mut out, ADNC_VERSION);
    write_shape(&mut out, &cm.input_shape)?;
    put_u32(&mut out, to_u32(cm.specs.len(), "spec count")?);
    for spec in &cm.specs {
        write_spec(&mut out, spec)?;
    }
    put_u32(&mut out, to_u32(cm.layers.len(), "layer count")?);
    for l in &cm.layers {
        put_u32(&mut out, to_u32(l.layer, "layer id")?);
        write_shape(&mut out, &l.shape)?;
        put_u8(&mut out, l.bits);
        put_u8(&mut out, l.index_bits);
        put_f32(&mut out, l.interval);
        put_u32(&mut out, l.records);
        put_u32(&mut out, l.nonzeros);
        out.extend_from_slice(&l.stream);
        put_u32(&mut out, to_u32(l.bias.len(), "bias length")?);
        for &b in &l.bias {
            put_f64(&mut out, b);
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<CompressedModel> {
    let mut r = Reader::new(bytes);
    r.magic(ADNC_MAGIC)?;
    let version = r.u16()?;
    if version != ADNC_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let input_shape = read_shape(&mut r)?;
    let spec_count = r.u32()? as usize;
    let specs = (0..spec_count)
        .map(|_| read_spec(&mut r))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let layer_count = r.u32()? as usize;
    let mut layers = Vec::new();
    for _ in 0..layer_count {
        let layer = r.u32()? as usize;
        let shape = read_shape(&mut r)?;
        let bits = r.u8()?;
        let index_bits = r.u8()?;
        let interval = r.f32()?;
        let records = r.u32()?;
        let nonzeros = r.u32()?;
        let stream_bits = records as usize * (bits as usize + index_bits as usize);
        let stream = r.take(stream_bits.div_ceil(8))?.to_vec();
        let bias_len = r.u32()? as usize;
        let bias = (0..bias_len).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        layers.push(CompressedLayer {
            layer,
            shape,
            bits,
            interval,
            index_bits,
            nonzeros,
            records,
            stream,
            bias,
        });
    }
    if !r.is_empty() {
        return Err(FormatError::Corrupt("trailing bytes after model".into()).into());
    }
    let cm = CompressedModel {
        input_shape,
        specs,
        layers,
    };
    cm.validate()?;
    for l in &cm.layers {
        l.quantizer()?;
        l.levels()?;
    }
    Ok(cm)
}

pub fn save(cm: &CompressedModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(cm)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<CompressedModel> {
    from_bytes(&fs::read(path)?)
}
