//! Flat binary tensor container.
//!
//! Layout (little-endian): magic `CDTN`, version `u32`, tensor count `u32`,
//! then per tensor a `u16` name length, the UTF-8 name, a `u8` rank, one
//! `u64` per dimension and the `f64` payload.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"CDTN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("tensor name {0:?} is longer than 65535 bytes")]
    NameTooLong(String),
    #[error("tensor {0:?} has rank above 255")]
    RankTooHigh(String),
}

pub fn write_container<W: Write>(
    mut w: W,
    tensors: &[(String, Tensor)],
) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| CheckpointError::NameTooLong(name.clone()))?;
        w.write_u16::<LittleEndian>(len)?;
        w.write_all(bytes)?;
        let rank = u8::try_from(t.rank()).map_err(|_| CheckpointError::RankTooHigh(name.clone()))?;
        w.write_u8(rank)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &x in t.data() {
            w.write_f64::<LittleEndian>(x)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.read_u32::<LittleEndian>()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.read_u16::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::BadName)?;
        let rank = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        out.push((name, Tensor { shape, data }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::matrix(1, 2, vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_container(&mut buf, &[("w".to_string(), t)]).unwrap();
        assert_eq!(&buf[0..4], b"CDTN");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..14], &1u16.to_le_bytes());
        assert_eq!(buf[14], b'w');
        assert_eq!(buf[15], 2);
        assert_eq!(&buf[16..24], &1u64.to_le_bytes());
        assert_eq!(&buf[24..32], &2u64.to_le_bytes());
        assert_eq!(&buf[32..40], &1.0f64.to_le_bytes());
        assert_eq!(&buf[40..48], &(-2.5f64).to_le_bytes());
        assert_eq!(buf.len(), 48);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"XXXX\x01\0\0\0\0\0\0\0".to_vec();
        assert!(matches!(
            read_container(&buf[..]),
            Err(CheckpointError::BadMagic(_))
        ));
    }

    #[test]
    fn rejects_truncated_payload() {
        let t = Tensor::column(vec![1.0, 2.0]);
        let mut buf = Vec::new();
        write_container(&mut buf, &[("x".into(), t)]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_container(&buf[..]), Err(CheckpointError::Io(_))));
    }
}
