//! Binary checkpoint format.
//!
//! ```text
//! magic "STAMPCK1"
//! u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims[rank],
//!             u8 dtype (0 = f32), row-major payload
//! ```
//! All integers and floats are little-endian.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::NdFloat;

use super::{ModelConfig, Parameters};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"STAMPCK1";
const DTYPE_F32: u8 = 0;

pub fn save_checkpoint<F: NdFloat, W: Write>(params: &Parameters<F>, out: &mut W) -> Result<()> {
    let tensors = params.named_tensors();
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &tensors {
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[t.ndim() as u8])?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        out.write_all(&[DTYPE_F32])?;
        for v in t.iter() {
            out.write_all(&v.to_f32().unwrap().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(input: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("truncated checkpoint while reading {what}")))?;
    Ok(buf)
}

/// Reads a checkpoint and checks every tensor name and shape against `config`.
pub fn load_checkpoint<R: Read>(input: &mut R, config: &ModelConfig) -> Result<Parameters<f32>> {
    let magic: [u8; 8] = read_exact(input, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let count = u32::from_le_bytes(read_exact(input, "tensor count")?) as usize;
    let mut found: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_exact(input, "name length")?) as usize;
        let mut name = vec![0u8; name_len];
        input
            .read_exact(&mut name)
            .map_err(|_| Error::Format("truncated tensor name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let [rank] = read_exact::<_, 1>(input, "rank")?;
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(read_exact(input, "dims")?) as usize);
        }
        let [dtype] = read_exact::<_, 1>(input, "dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("tensor {name}: unsupported dtype code {dtype}")));
        }
        let len: usize = dims.iter().product();
        let mut raw = vec![0u8; len * 4];
        input
            .read_exact(&mut raw)
            .map_err(|_| Error::Format(format!("truncated payload for {name}")))?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if found.insert(name.clone(), (dims, values)).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    config.validate().map_err(|e| Error::Config(e.to_string()))?;
    let mut params = Parameters::<f32>::zeros(config);
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    if found.len() != names.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} tensors, config expects {}",
            found.len(),
            names.len()
        )));
    }
    for (name, mut dst) in names.iter().zip(params.tensors_mut()) {
        let (dims, values) = found
            .remove(name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
        if dims != dst.shape() {
            return Err(Error::Config(format!(
                "tensor {name} has shape {dims:?}, config expects {:?}",
                dst.shape()
            )));
        }
        for (d, v) in dst.iter_mut().zip(values) {
            *d = v;
        }
    }
    Ok(params)
}

pub fn write_checkpoint_file<F: NdFloat>(params: &Parameters<F>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    save_checkpoint(params, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint_file(path: &Path, config: &ModelConfig) -> Result<Parameters<f32>> {
    let mut input = BufReader::new(File::open(path)?);
    load_checkpoint(&mut input, config)
}
