//! Flat binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"CPAE"
//! version u32
//! repeated until EOF:
//!   name_len u32, name (UTF-8), dtype u8, dims [u32; 4], payload
//! ```
//!
//! Entries are written in lexicographic name order.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CPAE";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElemType {
    F32,
    #[default]
    F64,
}

impl ElemType {
    pub fn tag(self) -> u8 {
        match self {
            ElemType::F32 => 0,
            ElemType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ElemType::F32),
            1 => Ok(ElemType::F64),
            t => Err(Error::Checkpoint(format!("unknown dtype tag {t}"))),
        }
    }
}

pub fn write<W: Write>(store: &ParamStore, dtype: ElemType, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in store.iter() {
        let len = u32::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[dtype.tag()])?;
        for d in t.shape().dims() {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension too large in {name}")))?;
            out.write_all(&d.to_le_bytes())?;
        }
        for &v in t.data() {
            match dtype {
                ElemType::F32 => out.write_all(&(v as f32).to_le_bytes())?,
                ElemType::F64 => out.write_all(&v.to_le_bytes())?,
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read<R: Read>(mut input: R) -> Result<ParamStore> {
    let mut magic = [0; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut store = ParamStore::new();
    loop {
        let mut len = [0; 4];
        match input.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let entry = (|| -> Result<(String, Tensor)> {
            let mut name = vec![0; u32::from_le_bytes(len) as usize];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let mut tag = [0; 1];
            input.read_exact(&mut tag)?;
            let dtype = ElemType::from_tag(tag[0])?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = read_u32(&mut input)? as usize;
            }
            let count: usize = dims.iter().product();
            let mut data = Vec::with_capacity(count);
            match dtype {
                ElemType::F32 => {
                    let mut b = [0; 4];
                    for _ in 0..count {
                        input.read_exact(&mut b)?;
                        data.push(f32::from_le_bytes(b) as f64);
                    }
                }
                ElemType::F64 => {
                    let mut b = [0; 8];
                    for _ in 0..count {
                        input.read_exact(&mut b)?;
                        data.push(f64::from_le_bytes(b));
                    }
                }
            }
            Ok((name, Tensor::from_vec(dims, data)?))
        })()
        .map_err(|e| match e {
            Error::Io(io) if io.kind() == ErrorKind::UnexpectedEof => Error::Checkpoint("truncated entry".into()),
            other => other,
        })?;
        store.register(entry.0, entry.1)?;
    }
    Ok(store)
}

pub fn save(store: &ParamStore, dtype: ElemType, path: impl AsRef<Path>) -> Result<()> {
    write(store, dtype, BufWriter::new(File::create(path)?))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    read(BufReader::new(File::open(path)?))
}
