//! Binary checkpoint format.
//!
//! ```text
//! magic   b"CXBCKPT"          7 bytes
//! version u8                  currently 1
//! count   u32 LE
//! count × record:
//!   name_len u32 LE, name (UTF-8)
//!   ndim     u32 LE, dims (u64 LE each)
//!   values   f64 LE, product(dims) of them
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autograd::ParameterStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"CXBCKPT";
pub const VERSION: u8 = 1;

/// One named tensor of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor,
}

pub fn write_records<W: Write>(mut w: W, records: &[Record]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = r.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in r.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<Record>> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic header".into()));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            version[0]
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|e| Error::Checkpoint(format!("bad name: {e}")))?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        records.push(Record {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }
    Ok(records)
}

pub fn store_records(store: &ParameterStore) -> Vec<Record> {
    store
        .ids()
        .map(|id| Record {
            name: store.name(id).to_string(),
            tensor: store.value(id).clone(),
        })
        .collect()
}

/// Overwrites every parameter of `store` from `records`; names, order and
/// shapes must match exactly.
pub fn load_into(store: &mut ParameterStore, records: &[Record]) -> Result<()> {
    if records.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            records.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, rec) in ids.into_iter().zip(records) {
        if store.name(id) != rec.name {
            return Err(Error::Checkpoint(format!(
                "expected tensor `{}`, found `{}`",
                store.name(id),
                rec.name
            )));
        }
        store.set_value(id, rec.tensor.clone())?;
    }
    Ok(())
}

pub fn save(path: impl AsRef<Path>, store: &ParameterStore) -> Result<()> {
    let f = File::create(path)?;
    write_records(BufWriter::new(f), &store_records(store))
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    read_records(BufReader::new(File::open(path)?))
}
