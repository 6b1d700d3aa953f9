//! Binary tensor files.
//!
//! Layout (little-endian): the 8 magic bytes `CSCLTNSR`, a `u8` dtype code
//! (0 = f32, 1 = f64, 2 = i32, 3 = bool stored as one byte), a `u8` rank,
//! `rank` extents as `u64`, then the row-major payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 8] = b"CSCLTNSR";

pub fn encode_tensor<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.ndim() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.ndim() as u8);
    for &s in t.shape() {
        out.extend_from_slice(&(s as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Parses one tensor from the front of `bytes`, returning it and the number of
/// bytes consumed.
pub fn decode_tensor<T: Element>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    let (dtype, shape, header) = decode_header(bytes)?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "expected dtype {:?}, file holds {:?}",
            T::DTYPE,
            dtype
        )));
    }
    let n: usize = shape.iter().product();
    let size = dtype.size();
    let end = header + n * size;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "payload truncated: need {} bytes, have {}",
            end,
            bytes.len()
        )));
    }
    let data = bytes[header..end]
        .chunks_exact(size)
        .map(T::read_le)
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::from_vec(&shape, data)?, end))
}

fn decode_header(bytes: &[u8]) -> Result<(DType, Vec<usize>, usize)> {
    if bytes.len() < 10 || &bytes[..8] != MAGIC {
        return Err(Error::Format("missing CSCLTNSR magic".into()));
    }
    let dtype = DType::from_code(bytes[8])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[8])))?;
    let ndim = bytes[9] as usize;
    let header = 10 + 8 * ndim;
    if bytes.len() < header {
        return Err(Error::Format("header truncated".into()));
    }
    let shape = bytes[10..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    Ok((dtype, shape, header))
}

/// Reads only the dtype and shape of a tensor file.
pub fn peek_header(path: &Path) -> Result<(DType, Vec<usize>)> {
    let mut f = fs::File::open(path)?;
    let mut head = [0u8; 10];
    f.read_exact(&mut head)
        .map_err(|_| Error::Format(format!("{}: header truncated", path.display())))?;
    let ndim = head[9] as usize;
    let mut rest = vec![0u8; 8 * ndim];
    f.read_exact(&mut rest)
        .map_err(|_| Error::Format(format!("{}: header truncated", path.display())))?;
    let mut all = head.to_vec();
    all.extend(rest);
    let (d, s, _) = decode_header(&all)?;
    Ok((d, s))
}

pub fn write_tensor<T: Element>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path)?;
    let (t, used) = decode_tensor(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - used
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::from_vec(&[2, 1], vec![1i32, -2]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..8], b"CSCLTNSR");
        assert_eq!(b[8], 2);
        assert_eq!(b[9], 2);
        assert_eq!(&b[10..18], &2u64.to_le_bytes());
        assert_eq!(&b[18..26], &1u64.to_le_bytes());
        assert_eq!(&b[26..30], &1i32.to_le_bytes());
        assert_eq!(&b[30..34], &(-2i32).to_le_bytes());
        assert_eq!(b.len(), 34);
    }

    #[test]
    fn wrong_dtype_and_truncation_are_errors() {
        let t = Tensor::from_vec(&[3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let b = encode_tensor(&t);
        assert!(decode_tensor::<f64>(&b).is_err());
        assert!(decode_tensor::<f32>(&b[..b.len() - 1]).is_err());
        assert!(decode_tensor::<f32>(b"NOTMAGIC\0\0").is_err());
    }

    fn roundtrip<T: Element>(t: &Tensor<T>) {
        let (back, used) = decode_tensor::<T>(&encode_tensor(t)).unwrap();
        assert_eq!(used, encode_tensor(t).len());
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            shape in prop::collection::vec(1usize..4, 1..4),
            bits in prop::collection::vec(any::<u64>(), 64),
        ) {
            let n: usize = shape.iter().product();
            let f64s = Tensor::from_fn(&shape, |i| f64::from_bits(bits[i % 64]));
            let f32s = Tensor::from_fn(&shape, |i| f32::from_bits(bits[i % 64] as u32));
            let ints = Tensor::from_fn(&shape, |i| bits[i % 64] as i32);
            let bools = Tensor::from_fn(&shape, |i| bits[i % 64] & 1 == 1);
            prop_assert_eq!(f64s.len(), n);
            // NaN payloads compare unequal, so compare bit patterns for floats.
            let (b64, _) = decode_tensor::<f64>(&encode_tensor(&f64s)).unwrap();
            prop_assert!(b64.data().iter().zip(f64s.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            let (b32, _) = decode_tensor::<f32>(&encode_tensor(&f32s)).unwrap();
            prop_assert!(b32.data().iter().zip(f32s.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            roundtrip(&ints);
            roundtrip(&bools);
        }
    }
}
