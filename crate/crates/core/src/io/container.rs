//! Binary parameter container and model checkpoints.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic "SVKPRMS1" | version u32 | count u32 | record*
//! record = name_len u32 | name utf-8 | dtype u8 | flags u8 | rank u8
//!        | dims u64 * rank | values (little-endian raw)
//! ```
//!
//! dtype 0 is f64, dtype 1 is f32 (upcast on load). flags bit 0 marks a
//! gradient-carrying parameter. Round-trips are bit-exact for f64 data.
//!
//! A model checkpoint prepends a plain-text `key=value` config header:
//!
//! ```text
//! magic "SVKMODL1" | version u32 | header_len u64 | header utf-8 | container
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{read_exact, read_u32, read_u64};
use crate::error::{Error, Result};
use crate::tensor::{ParameterSet, Tensor};

const PARAMS_MAGIC: &[u8; 8] = b"SVKPRMS1";
const MODEL_MAGIC: &[u8; 8] = b"SVKMODL1";
const FORMAT_VERSION: u32 = 1;

const FLAG_REQUIRES_GRAD: u8 = 1;

pub fn write_params(w: &mut impl Write, params: &ParameterSet, path: &str) -> Result<()> {
    let io_err = |e| Error::io(path, e);
    w.write_all(PARAMS_MAGIC).map_err(io_err)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(params.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for (name, t) in params.iter() {
        write_record(w, name, t, path)?;
    }
    Ok(())
}

fn write_record(w: &mut impl Write, name: &str, t: &Tensor, path: &str) -> Result<()> {
    let io_err = |e| Error::io(path, e);
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(name_bytes).map_err(io_err)?;
    w.write_all(&[0u8]).map_err(io_err)?; // dtype f64
    let flags = if t.requires_grad {
        FLAG_REQUIRES_GRAD
    } else {
        0
    };
    w.write_all(&[flags]).map_err(io_err)?;
    w.write_all(&[t.rank() as u8]).map_err(io_err)?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

pub(crate) fn read_record(r: &mut impl Read, path: &str) -> Result<(String, Tensor)> {
    let name_len = read_u32(r, path)? as usize;
    if name_len > 1 << 20 {
        return Err(Error::format(path, "implausible record name length"));
    }
    let mut name_bytes = vec![0u8; name_len];
    read_exact(r, &mut name_bytes, path)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::format(path, "record name is not utf-8"))?;
    let mut meta = [0u8; 3];
    read_exact(r, &mut meta, path)?;
    let (dtype, flags, rank) = (meta[0], meta[1], meta[2] as usize);
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r, path)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    match dtype {
        0 => {
            let mut b = [0u8; 8];
            for _ in 0..numel {
                read_exact(r, &mut b, path)?;
                data.push(f64::from_le_bytes(b));
            }
        }
        1 => {
            let mut b = [0u8; 4];
            for _ in 0..numel {
                read_exact(r, &mut b, path)?;
                data.push(f32::from_le_bytes(b) as f64);
            }
        }
        other => return Err(Error::format(path, format!("unknown dtype tag {other}"))),
    }
    let mut t =
        Tensor::new(shape, data).map_err(|e| Error::format(path, format!("record {name}: {e}")))?;
    t.requires_grad = flags & FLAG_REQUIRES_GRAD != 0;
    Ok((name, t))
}

pub fn read_params(r: &mut impl Read, path: &str) -> Result<ParameterSet> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, path)?;
    if &magic != PARAMS_MAGIC {
        return Err(Error::format(path, "bad magic (not a parameter container)"));
    }
    let version = read_u32(r, path)?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let count = read_u32(r, path)? as usize;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let (name, t) = read_record(r, path)?;
        params.insert(name, t)?;
    }
    Ok(params)
}

pub fn write_params_file(path: &Path, params: &ParameterSet) -> Result<()> {
    let p = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&p, e))?;
    let mut w = BufWriter::new(file);
    write_params(&mut w, params, &p)?;
    w.flush().map_err(|e| Error::io(&p, e))
}

pub fn read_params_file(path: &Path) -> Result<ParameterSet> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&p, e))?;
    read_params(&mut BufReader::new(file), &p)
}

/// Write a checkpoint: text config header plus the parameter container.
pub fn write_checkpoint(path: &Path, header: &str, params: &ParameterSet) -> Result<()> {
    let p = path.display().to_string();
    let io_err = |e| Error::io(&p, e);
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(MODEL_MAGIC).map_err(io_err)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(header.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(header.as_bytes()).map_err(io_err)?;
    write_params(&mut w, params, &p)?;
    w.flush().map_err(io_err)
}

/// Read a checkpoint back as (config header, parameters).
pub fn read_checkpoint(path: &Path) -> Result<(String, ParameterSet)> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&p, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, &p)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::format(&p, "bad magic (not a model checkpoint)"));
    }
    let version = read_u32(&mut r, &p)?;
    if version != FORMAT_VERSION {
        return Err(Error::format(&p, format!("unsupported version {version}")));
    }
    let header_len = read_u64(&mut r, &p)? as usize;
    if header_len > 1 << 24 {
        return Err(Error::format(&p, "implausible header length"));
    }
    let mut header = vec![0u8; header_len];
    read_exact(&mut r, &mut header, &p)?;
    let header = String::from_utf8(header).map_err(|_| Error::format(&p, "header is not utf-8"))?;
    let params = read_params(&mut r, &p)?;
    Ok((header, params))
}
