//! Dense f32 tensors and their binary dump format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FFTD"          4 bytes magic
//! version         u8, always 1
//! rank            u8, 1..=4
//! dims            rank × u32
//! payload         product(dims) × f32, row-major, last axis fastest
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FFTD";
pub const VERSION: u8 = 1;
pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::TensorFormat(format!(
                "rank must be in 1..={MAX_RANK}, got {}",
                shape.len()
            )));
        }
        let n = checked_numel(&shape)?;
        if n != data.len() {
            return Err(Error::shape(
                format!("{n} elements for shape {shape:?}"),
                format!("{}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("valid tensor shape")
    }

    /// Converts f64 samples, rounding each to f32.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = bytes
            .get(..6)
            .ok_or_else(|| Error::TensorFormat("truncated header".into()))?;
        if &header[..4] != MAGIC {
            return Err(Error::TensorFormat("bad magic".into()));
        }
        if header[4] != VERSION {
            return Err(Error::TensorFormat(format!(
                "unsupported version {}",
                header[4]
            )));
        }
        let rank = header[5] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::TensorFormat(format!("rank {rank} out of range")));
        }
        let dims_end = 6 + 4 * rank;
        let dims_bytes = bytes
            .get(6..dims_end)
            .ok_or_else(|| Error::TensorFormat("truncated dims".into()))?;
        let shape: Vec<usize> = dims_bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let n = checked_numel(&shape)?;
        let payload_len = n
            .checked_mul(4)
            .ok_or_else(|| Error::TensorFormat("shape overflow".into()))?;
        let payload = &bytes[dims_end..];
        if payload.len() < payload_len {
            return Err(Error::TensorFormat(format!(
                "truncated payload: need {payload_len} bytes, have {}",
                payload.len()
            )));
        }
        if payload.len() > payload_len {
            return Err(Error::TensorFormat("trailing bytes after payload".into()));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { shape, data })
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= u32::MAX as usize * 4)
        .ok_or_else(|| Error::TensorFormat(format!("shape overflow: {shape:?}")))
}

/// Writes `tensor` atomically (temporary sibling, then rename).
pub fn dump_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let tmp = crate::image::tmp_sibling(path);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&tensor.to_bytes())
        .map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let data: Vec<f32> = (0..60).map(|i| (i as f32 * 0.37).sin() * 1e3).collect();
        let t = Tensor::new(vec![3, 4, 5], data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.fftd");
        dump_tensor(&p, &t).unwrap();
        let back = load_tensor(&p).unwrap();
        assert_eq!(back.shape(), &[3, 4, 5]);
        assert!(t
            .data()
            .iter()
            .zip(back.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"FFTD");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 1);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 18);
    }

    #[test]
    fn truncated_file_is_structured_error() {
        let t = Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap();
        let b = t.to_bytes();
        for cut in [3, 8, b.len() - 1] {
            assert!(matches!(
                Tensor::from_bytes(&b[..cut]),
                Err(Error::TensorFormat(_))
            ));
        }
    }

    #[test]
    fn rejects_bad_magic_and_rank() {
        let mut b = Tensor::new(vec![1], vec![0.0]).unwrap().to_bytes();
        b[0] = b'X';
        assert!(Tensor::from_bytes(&b).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
        let mut r0 = Tensor::new(vec![1], vec![0.0]).unwrap().to_bytes();
        r0[5] = 0;
        assert!(Tensor::from_bytes(&r0).is_err());
    }

    #[test]
    fn shape_overflow_is_rejected() {
        let mut b = Vec::from(&MAGIC[..]);
        b.extend([1, 4]);
        for _ in 0..4 {
            b.extend(u32::MAX.to_le_bytes());
        }
        assert!(matches!(
            Tensor::from_bytes(&b),
            Err(Error::TensorFormat(_))
        ));
    }

    proptest! {
        #[test]
        fn bytes_round_trip(dims in proptest::collection::vec(1usize..5, 1..=4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(t.to_bytes(), back.to_bytes());
        }
    }
}
