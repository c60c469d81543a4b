//! Little-endian named-tensor container used for checkpoints and prompt
//! banks.
//!
//! ```text
//! "DIPT" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: UTF-8 bytes | rank: u32 | dims: u32 × rank | payload: f32 × Π dims
//! ```

use std::io::{self, Read, Write};

use crate::diffcore::Tensor;

pub const MAGIC: &[u8; 4] = b"DIPT";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a DIPT container (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated record for tensor `{0}`")]
    Truncated(String),
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("tensor `{name}`: {reason}")]
    BadTensor { name: String, reason: String },
}

/// Serialized size of one record.
pub fn record_len(name: &str, tensor: &Tensor) -> usize {
    4 + name.len() + 4 + 4 * tensor.rank() + 4 * tensor.numel()
}

pub fn encoded_len<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> usize {
    HEADER_BYTES + tensors.into_iter().map(|(n, t)| record_len(n, t)).sum::<usize>()
}

pub fn write_tensors<'a, W: Write>(
    mut w: W,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(4 * t.numel());
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    Ok(())
}

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, tensors).expect("writing to a Vec cannot fail");
    buf
}

fn read_u32<R: Read>(r: &mut R, ctx: &str) -> Result<u32, ContainerError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ContainerError::Truncated(ctx.to_string()),
        _ => ContainerError::Io(e),
    })?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, ContainerError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    let version = read_u32(&mut r, "<header>")?;
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let mut out = Vec::new();
    loop {
        let mut len_bytes = [0u8; 4];
        match r.read(&mut len_bytes[..1])? {
            0 => break,
            _ => r.read_exact(&mut len_bytes[1..]).map_err(|_| ContainerError::Truncated("<name length>".into()))?,
        }
        let name_len = u32::from_le_bytes(len_bytes) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| ContainerError::Truncated("<name>".into()))?;
        let name = String::from_utf8(name).map_err(|_| ContainerError::InvalidName)?;
        let rank = read_u32(&mut r, &name)? as usize;
        let dims = (0..rank)
            .map(|_| read_u32(&mut r, &name).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel: usize = dims.iter().product();
        let mut payload = vec![0u8; 4 * numel];
        r.read_exact(&mut payload).map_err(|_| ContainerError::Truncated(name.clone()))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(dims, data).map_err(|e| ContainerError::BadTensor {
            name: name.clone(),
            reason: e.to_string(),
        })?;
        out.push((name, tensor));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new([2], vec![1.0f32, -2.0]).unwrap();
        let bytes = encode([("ab", &t)]);
        let mut want = Vec::new();
        want.extend_from_slice(b"DIPT");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(bytes.len(), encoded_len([("ab", &t)]));
    }

    #[test]
    fn round_trip_and_errors() {
        let a = Tensor::new([2, 3], (0..6).map(|i| i as f32).collect()).unwrap();
        let s = Tensor::scalar(7.5f32);
        let bytes = encode([("dip/L1/k", &a), ("scale", &s)]);
        let back = read_tensors(&bytes[..]).unwrap();
        assert_eq!(back, vec![("dip/L1/k".to_string(), a), ("scale".to_string(), s)]);

        assert!(matches!(read_tensors(&b"NOPE\x01\0\0\0"[..]), Err(ContainerError::BadMagic(_))));
        assert!(matches!(
            read_tensors(&bytes[..bytes.len() - 2]),
            Err(ContainerError::Truncated(_))
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(read_tensors(&v2[..]), Err(ContainerError::UnsupportedVersion(2))));
    }
}
