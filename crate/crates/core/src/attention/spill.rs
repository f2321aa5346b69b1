//! On-disk records for spilled anchor caches.
//!
//! One file per `(layer, timestep)`, named `l{layer:03}_t{timestep:05}.ivkv`.
//! All integers and floats are little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "IVKV"
//! 4       2     format version (1)
//! 6       2     reserved, zero
//! 8       8     frame (u64)
//! 16      4     layer (u32)
//! 20      4     timestep (u32)
//! 24      4     tokens (u32)
//! 28      4     key width (u32)
//! 32      4     value width (u32)
//! 36      ...   keys, tokens * key width f32, row-major
//! ...     ...   values, tokens * value width f32, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use super::{AttentionError, KVPair};

pub const MAGIC: &[u8; 4] = b"IVKV";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SpillRecord {
    pub frame: usize,
    pub kv: KVPair,
}

pub fn record_file_name(layer: usize, timestep: u32) -> String {
    format!("l{layer:03}_t{timestep:05}.ivkv")
}

pub fn write_record<W: Write>(mut w: W, frame: usize, kv: &KVPair) -> Result<(), AttentionError> {
    w.write_all(MAGIC)?;
    w.write_u16::<LittleEndian>(VERSION)?;
    w.write_u16::<LittleEndian>(0)?;
    w.write_u64::<LittleEndian>(frame as u64)?;
    w.write_u32::<LittleEndian>(kv.layer as u32)?;
    w.write_u32::<LittleEndian>(kv.timestep)?;
    w.write_u32::<LittleEndian>(kv.tokens() as u32)?;
    w.write_u32::<LittleEndian>(kv.k.ncols() as u32)?;
    w.write_u32::<LittleEndian>(kv.v.ncols() as u32)?;
    for m in [&kv.k, &kv.v] {
        for x in m.iter() {
            w.write_f32::<LittleEndian>(*x)?;
        }
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Array2<f32>, AttentionError> {
    let mut buf = vec![0.0f32; rows * cols];
    r.read_f32_into::<LittleEndian>(&mut buf)?;
    Array2::from_shape_vec((rows, cols), buf).map_err(|e| AttentionError::Spill(e.to_string()))
}

pub fn read_record<R: Read>(mut r: R) -> Result<SpillRecord, AttentionError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AttentionError::Spill(format!("bad magic {magic:?}")));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(AttentionError::Spill(format!("unsupported version {version}")));
    }
    let _reserved = r.read_u16::<LittleEndian>()?;
    let frame = r.read_u64::<LittleEndian>()? as usize;
    let layer = r.read_u32::<LittleEndian>()? as usize;
    let timestep = r.read_u32::<LittleEndian>()?;
    let tokens = r.read_u32::<LittleEndian>()? as usize;
    let kw = r.read_u32::<LittleEndian>()? as usize;
    let vw = r.read_u32::<LittleEndian>()? as usize;
    let k = read_matrix(&mut r, tokens, kw)?;
    let v = read_matrix(&mut r, tokens, vw)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(AttentionError::Spill("trailing bytes after record".into()));
    }
    Ok(SpillRecord {
        frame,
        kv: KVPair::new(k, v, layer, timestep)?,
    })
}

pub fn write_record_file(path: &Path, frame: usize, kv: &KVPair) -> Result<(), AttentionError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_record(&mut w, frame, kv)?;
    w.flush()?;
    Ok(())
}

pub fn read_record_file(path: &Path) -> Result<SpillRecord, AttentionError> {
    read_record(BufReader::new(File::open(path)?))
}
