//! Versioned little-endian checkpoint of named f64 tensors.
//!
//! Layout: magic `ICRP`, u32 version, u32 count, then per tensor: u32 name
//! length, UTF-8 name, u8 group, f64 lr multiplier, u32 rank, u64 dims, f64 data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{Param, ParamGroup, ParamSet};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ICRP";
const VERSION: u32 = 1;

pub fn write_params(w: &mut impl Write, params: &ParamSet) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[match p.group {
            ParamGroup::Backbone => 0,
            ParamGroup::Classifier => 1,
        }])?;
        w.write_all(&p.lr_mult.to_le_bytes())?;
        w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn take_u32(r: &mut impl Read) -> Result<usize> {
    Ok(u32::from_le_bytes(take(r)?) as usize)
}

pub fn read_params(r: &mut impl Read) -> Result<ParamSet> {
    if &take::<4>(r)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = take_u32(r)?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let len = take_u32(r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let group = match take::<1>(r)?[0] {
            0 => ParamGroup::Backbone,
            1 => ParamGroup::Classifier,
            g => return Err(Error::Format(format!("unknown group tag {g}"))),
        };
        let lr_mult = f64::from_le_bytes(take(r)?);
        let rank = take_u32(r)?;
        let shape = (0..rank).map(|_| Ok(u64::from_le_bytes(take(r)?) as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| Ok(f64::from_le_bytes(take(r)?))).collect::<Result<Vec<_>>>()?;
        params.push(Param { name, value: Tensor::new(shape, data)?, group, lr_mult });
    }
    ParamSet::from_params(params)
}

pub fn save_params(path: impl AsRef<Path>, params: &ParamSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamSet> {
    read_params(&mut BufReader::new(File::open(path)?))
}
