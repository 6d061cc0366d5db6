//! Binary parameter archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "PFLL" | version: u32 = 1 | count: u32in
//! then per parameter, in name order:
//!   name_len: u16 | name bytes (UTF-8)
//!   partition: u8 (0 = encoder, 1 = decoder)
//!   rank: u8 | dims: rank x u32
//!   payload: product(dims) x f64
//! ```
//!
//! Floats are written bit-for-bit, so a save/load round trip reproduces
//! the exact parameter set.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamSet, Partition};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PFLL";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &ParamSet, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count =
        u32::try_from(params.len()).map_err(|_| Error::Checkpoint("too many parameters".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, partition, tensor) in params.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("name too long: {name:?}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[partition.tag_byte()])?;
        let rank =
            u8::try_from(tensor.rank()).map_err(|_| Error::Checkpoint("rank too large".into()))?;
        w.write_all(&[rank])?;
        for &d in tensor.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint("dim too large".into()))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamSet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Checkpoint(format!("name not UTF-8: {e}")))?;
        let partition = Partition::from_tag_byte(read_u8(&mut r)?)?;
        let rank = read_u8(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("parameter {name:?}: {e}")))?;
        params
            .insert(&name, partition, tensor)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(params, std::io::BufWriter::new(file))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

/// Serializes to an in-memory byte buffer.
pub fn checkpoint_bytes(params: &ParamSet) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    Ok(buf)
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let mut ps = ParamSet::new();
        ps.insert(
            "enc.w",
            Partition::Encoder,
            Tensor::new(
                vec![2, 3],
                vec![1.5, -0.0, f64::MIN_POSITIVE, 3.0, -7.25, 1e300],
            )
            .unwrap(),
        )
        .unwrap();
        ps.insert(
            "dec.b",
            Partition::Decoder,
            Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap(),
        )
        .unwrap();

        let bytes = checkpoint_bytes(&ps).unwrap();
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        assert!(back.bits_eq(&ps));

        // serialization itself is deterministic
        assert_eq!(bytes, checkpoint_bytes(&back).unwrap());
    }

    #[test]
    fn header_starts_with_magic_and_version() {
        let ps = ParamSet::new();
        let bytes = checkpoint_bytes(&ps).unwrap();
        assert_eq!(&bytes[0..4], b"PFLL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 0);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let mut ps = ParamSet::new();
        ps.insert("p", Partition::Encoder, Tensor::scalar(1.0))
            .unwrap();
        let mut bytes = checkpoint_bytes(&ps).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(read_checkpoint(bytes.as_slice()).is_err());
    }
}
