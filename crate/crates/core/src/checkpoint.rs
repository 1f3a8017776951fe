//! Binary checkpoint format.
//!
//! ```text
//! magic    "STKDCKPT"
//! version  u32
//! meta     u64 length + UTF-8 JSON
//! count    u32
//! tensor*  u32 name length, name bytes, u32 rank, u64 dims, f64 values
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"STKDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Checkpoint, CheckpointError> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: VERSION });
        }
        let meta_len = read_u64(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        read_exact(r, &mut meta)?;
        let meta = serde_json::from_slice(&meta)?;
        let count = read_u32(r)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut bytes = vec![0u8; len * 8];
            read_exact(r, &mut bytes)?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if params.id(&name).is_ok() {
                return Err(CheckpointError::Corrupt(format!("duplicate tensor {name}")));
            }
            params.add(name, Tensor::new(shape, data).expect("length follows shape"));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Corrupt("truncated".into()),
        _ => CheckpointError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
