//! Model parameter checkpoint file.
//!
//! Little-endian layout: `u32` format version (= 1), `u32` entry count, then
//! per entry: `u32` name length + UTF-8 name, `u32` rank, `u32` per
//! dimension, and the values as IEEE-754 binary32, in registration order.
//! Values are stored in binary32 regardless of the in-memory dtype.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::{NnError, Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

/// One named tensor as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub values: Tensor<f32>,
}

pub fn write_checkpoint<T: Scalar>(
    path: &Path,
    entries: &[(&str, &Tensor<T>)],
) -> Result<(), NnError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(entries.len() as u32)?;
    for (name, tensor) in entries {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(tensor.shape().len() as u32)?;
        for &d in tensor.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in tensor.data() {
            w.write_f32::<LittleEndian>(v.to_f64() as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<NamedTensor>, NnError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| NnError::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0f32; len];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        entries.push(NamedTensor {
            name,
            values: Tensor::from_vec(&shape, data)
                .map_err(|e| NnError::Checkpoint(e.to_string()))?,
        });
    }
    // Trailing garbage means the file is not what the header promised.
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(NnError::Checkpoint("trailing bytes after last entry".into()));
    }
    Ok(entries)
}
