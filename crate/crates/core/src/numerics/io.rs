//! Binary tensor container.
//!
//! ```text
//! "LUNA1"            5 bytes magic
//! dtype              u8   (1 = f32, 2 = f64)
//! rank               u8
//! extents            rank x u64 little-endian
//! values             product(extents) x dtype, little-endian, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{LunaError, Result};

pub const MAGIC: &[u8; 5] = b"LUNA1";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * t.rank() + t.len() * T::DTYPE.size_bytes());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(u8::try_from(t.rank()).expect("rank fits in a byte"));
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> std::io::Result<()> {
    w.write_all(&encode(t))
}

/// Reads one tensor; the stored dtype must match `T`.
pub fn read_tensor<T: Scalar, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let mut head = [0u8; 7];
    r.read_exact(&mut head)
        .map_err(|e| LunaError::Format(format!("short header: {e}")))?;
    if &head[..5] != MAGIC {
        return Err(LunaError::Format("bad magic".into()));
    }
    let dtype = DType::from_code(head[5])
        .ok_or_else(|| LunaError::Format(format!("unknown dtype code {}", head[5])))?;
    if dtype != T::DTYPE {
        return Err(LunaError::Format(format!(
            "stored dtype {dtype} but {} was requested",
            T::DTYPE
        )));
    }
    let rank = head[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)
            .map_err(|e| LunaError::Format(format!("short extents: {e}")))?;
        let e = usize::try_from(u64::from_le_bytes(b))
            .map_err(|_| LunaError::Format("extent overflows usize".into()))?;
        shape.push(e);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| LunaError::Format("element count overflows".into()))?;
    let width = dtype.size_bytes();
    let mut raw = vec![0u8; len * width];
    r.read_exact(&mut raw)
        .map_err(|e| LunaError::Format(format!("short payload: {e}")))?;
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(&shape, data).map_err(|e| LunaError::Format(e.to_string()))
}

pub fn decode<T: Scalar>(mut bytes: &[u8]) -> Result<Tensor<T>> {
    let t = read_tensor(&mut bytes)?;
    if !bytes.is_empty() {
        return Err(LunaError::Format(format!("{} trailing bytes", bytes.len())));
    }
    Ok(t)
}

pub fn save<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let f = File::create(path).map_err(|e| LunaError::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensor(&mut w, t)
        .and_then(|_| w.flush())
        .map_err(|e| LunaError::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let f = File::open(path).map_err(|e| LunaError::io(path, e))?;
    let mut r = BufReader::new(f);
    let t = read_tensor(&mut r)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| LunaError::io(path, e))?;
    if !rest.is_empty() {
        return Err(LunaError::Format(format!(
            "{}: {} trailing bytes",
            path.display(),
            rest.len()
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_f64(&[2, 1], &[1.0, -2.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[..5], b"LUNA1");
        assert_eq!(bytes[5], 1);
        assert_eq!(bytes[6], 2);
        assert_eq!(&bytes[7..15], &2u64.to_le_bytes());
        assert_eq!(&bytes[15..23], &1u64.to_le_bytes());
        assert_eq!(&bytes[23..27], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 31);
    }

    #[test]
    fn rejects_wrong_dtype_and_garbage() {
        let t = Tensor::<f64>::zeros(&[3]);
        let bytes = encode(&t);
        assert!(decode::<f32>(&bytes).is_err());
        assert!(decode::<f64>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode::<f64>(b"LUNA2\x02\x01").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode::<f64>(&extra).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let t: Tensor<f64> = crate::numerics::RngState::new(seed).normal("t", &shape, 3.0);
            let back: Tensor<f64> = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back, t.clone());
            let t32: Tensor<f32> = t.cast();
            let back32: Tensor<f32> = decode(&encode(&t32)).unwrap();
            prop_assert_eq!(back32, t32);
        }
    }
}
