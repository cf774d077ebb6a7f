//! Single-tensor files: `SBT1`, `u32` rank, `u32` dims, `u8` dtype code,
//! then the raw little-endian elements.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

const MAGIC: &[u8; 4] = b"SBT1";

pub fn write_sbt(t: &Tensor, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Format(format!("dimension {d} does not fit in u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&[t.dtype().code()])?;
    w.write_all(&t.to_le_bytes())?;
    Ok(())
}

pub fn read_sbt(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = bytes;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::Truncated(format!("SBT {what}")));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad SBT magic".into()));
    }
    let ndim = u32::from_le_bytes(take(4, "rank")?.try_into().unwrap()) as usize;
    if ndim == 0 {
        return Err(Error::Format("SBT rank is zero".into()));
    }
    let mut shape = Vec::with_capacity(ndim.min(16));
    for _ in 0..ndim {
        shape.push(u32::from_le_bytes(take(4, "dims")?.try_into().unwrap()) as usize);
    }
    let dtype = DType::from_code(take(1, "dtype")?[0])?;
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| Error::Format(format!("SBT dims {shape:?} overflow")))?;
    let payload = take(numel, "payload")?;
    if !cur.is_empty() {
        return Err(Error::Format(format!(
            "SBT has {} trailing bytes after the payload",
            cur.len()
        )));
    }
    Tensor::from_le_bytes(shape, dtype, payload)
}

pub fn save_sbt(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_sbt(t, &mut buf)?;
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load_sbt(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_sbt(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode(t: &Tensor) -> Vec<u8> {
        let mut b = Vec::new();
        write_sbt(t, &mut b).unwrap();
        b
    }

    #[test]
    fn f32_round_trip_and_layout() {
        let t = Tensor::from_f32(vec![2, 3], vec![0.5, -1.0, 2.0, f32::MAX, -0.0, 1e-30]).unwrap();
        let b = encode(&t);
        assert_eq!(b.len(), 4 + 4 + 8 + 1 + 24);
        assert_eq!(&b[..4], b"SBT1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(b[16], 0);
        assert!(read_sbt(&b).unwrap().bit_eq(&t));
    }

    #[test]
    fn i8_endpoints() {
        let t = Tensor::from_i8(vec![2], vec![-128, 127]).unwrap();
        let back = read_sbt(&encode(&t)).unwrap();
        assert_eq!(back.as_i8().unwrap(), &[-128, 127]);
    }

    #[test]
    fn errors() {
        let t = Tensor::from_f32(vec![2], vec![1.0, 2.0]).unwrap();
        let mut b = encode(&t);
        b[12] = 7;
        assert!(matches!(read_sbt(&b), Err(Error::UnknownDType(7))));

        let mut b = encode(&t);
        b[0] = b'X';
        assert!(matches!(read_sbt(&b), Err(Error::Format(_))));

        let mut b = encode(&t);
        b.pop();
        assert!(matches!(read_sbt(&b), Err(Error::Truncated(_))));

        let mut b = Vec::new();
        b.extend_from_slice(b"SBT1");
        b.extend_from_slice(&3u32.to_le_bytes());
        for _ in 0..3 {
            b.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        b.push(0);
        assert!(matches!(read_sbt(&b), Err(Error::Format(_))));
    }
}
