//! Named-tensor checkpoint encoding.
//!
//! Layout: the magic `MDRNET1`, then records until end of input. Each record
//! is a `u32` name length, the UTF-8 name, a `u32` rank, one `u64` per
//! dimension, and the values as little-endian `f64`. All integers are
//! little-endian.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"MDRNET1";

pub fn encode(records: &[(String, Tensor)]) -> Vec<u8> {
    let payload: usize = records.iter().map(|(n, t)| n.len() + 8 * t.len() + 64).sum();
    let mut out = Vec::with_capacity(MAGIC.len() + payload);
    out.extend_from_slice(MAGIC);
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| TensorError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if !bytes.starts_with(MAGIC) {
        return Err(TensorError::Checkpoint("missing MDRNET1 magic".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| TensorError::Checkpoint(format!("record name: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TensorError::Checkpoint(format!("{name}: shape overflow")))?;
        let raw = r.take(
            count
                .checked_mul(8)
                .ok_or_else(|| TensorError::Checkpoint(format!("{name}: shape overflow")))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| TensorError::Checkpoint(format!("{name}: {e}")))?;
        records.push((name, t));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&[("w".into(), Tensor::new(&[2], vec![1.0, -2.0]).unwrap())]);
        assert_eq!(&bytes[..7], b"MDRNET1");
        assert_eq!(&bytes[7..11], &1u32.to_le_bytes());
        assert_eq!(bytes[11], b'w');
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..24], &2u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 40);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode(b"NOTMAGIC").is_err());
        let bytes = encode(&[("abc".into(), Tensor::zeros(&[3, 2]))]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(MAGIC).unwrap().is_empty());
    }
}
