//! Dense row-major `f32` tensors and the GRTN binary format.
//!
//! Layout of a GRTN file, all integers little-endian:
//!
//! ```text
//! "GRTN" | version: u16 | rank: u16 | dims: rank × u64 | data: product(dims) × f32
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GRTN";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 8;

/// An immutable dense tensor. Every entry is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                shape,
                expected,
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f32) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f32] {
        let width = self.shape.iter().skip(1).product::<usize>();
        &self.data[i * width..(i + 1) * width]
    }

    /// Encodes the tensor in GRTN format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.rank() + 4 * self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rank() as u16).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes a GRTN buffer. `path` is used only for error context.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |expected: u64| Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated(HEADER_LEN as u64));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let dims_end = HEADER_LEN + 8 * rank;
        if bytes.len() < dims_end {
            return Err(truncated(dims_end as u64));
        }
        let shape: Vec<usize> = bytes[HEADER_LEN..dims_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let count = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| Error::invalid(format!("shape {shape:?} overflows")))?;
        let expected = (dims_end as u64).saturating_add(count.saturating_mul(4));
        let found = bytes.len() as u64;
        if found < expected {
            return Err(truncated(expected));
        }
        if found > expected {
            return Err(Error::TrailingBytes {
                path: path.to_path_buf(),
                extra: found - expected,
            });
        }
        let data: Vec<f32> = bytes[dims_end..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(shape, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Builds a rank-2 tensor from equal-length rows.
pub fn stack_rows(rows: &[Vec<f32>]) -> Result<Tensor> {
    let width = rows.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(rows.len() * width);
    for row in rows {
        if row.len() != width {
            return Err(Error::DimensionMismatch {
                expected: width,
                found: row.len(),
            });
        }
        data.extend_from_slice(row);
    }
    Tensor::new(vec![rows.len(), width], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn round_trip_matrix() {
        let dir = tmp();
        let path = dir.path().join("m.grtn");
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, 6.0]).unwrap();
        t.save(&path).unwrap();
        assert_eq!(Tensor::load(&path).unwrap(), t);
    }

    #[test]
    fn round_trip_scalar() {
        let dir = tmp();
        let path = dir.path().join("s.grtn");
        Tensor::scalar(5.0).unwrap().save(&path).unwrap();
        let back = Tensor::load(&path).unwrap();
        assert_eq!(back.shape(), &[] as &[usize]);
        assert_eq!(back.data(), &[5.0]);
    }

    #[test]
    fn million_elements_match_hand_encoded_bytes() {
        let dir = tmp();
        let path = dir.path().join("big.grtn");
        let n = 1_000_000usize;
        let data: Vec<f32> = (0..n).map(|i| ((i as f32) * 0.37).sin() * 1e3).collect();
        let t = Tensor::new(vec![1000, 1000], data.clone()).unwrap();
        t.save(&path).unwrap();

        let mut expected = b"GRTN".to_vec();
        expected.extend_from_slice(&[1, 0, 2, 0]);
        expected.extend_from_slice(&[0xe8, 0x03, 0, 0, 0, 0, 0, 0]);
        expected.extend_from_slice(&[0xe8, 0x03, 0, 0, 0, 0, 0, 0]);
        for v in &data {
            expected.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        assert_eq!(std::fs::read(&path).unwrap(), expected);

        let back = Tensor::load(&path).unwrap();
        assert!(back
            .data()
            .iter()
            .zip(&data)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = t.to_bytes();
        let err = Tensor::from_bytes(&bytes[..bytes.len() - 3], Path::new("t")).unwrap_err();
        assert!(matches!(err, Error::TruncatedPayload { .. }), "{err}");
        assert!(err.to_string().contains("truncated payload"));
        let err = Tensor::from_bytes(&bytes[..10], Path::new("t")).unwrap_err();
        assert!(matches!(err, Error::TruncatedPayload { .. }));
    }

    #[test]
    fn non_finite_bytes_are_rejected() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut bytes = t.to_bytes();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = Tensor::from_bytes(&bytes, Path::new("t")).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 2 }));
        assert!(err.to_string().contains("non-finite entry"));
    }

    #[test]
    fn bad_magic_and_trailing_bytes() {
        let mut bytes = Tensor::scalar(1.0).unwrap().to_bytes();
        bytes.push(0);
        assert!(matches!(
            Tensor::from_bytes(&bytes, Path::new("t")),
            Err(Error::TrailingBytes { extra: 1, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            Tensor::from_bytes(&bytes, Path::new("t")),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn constructor_checks_invariants() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![0.0; 3]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![1], vec![f32::INFINITY]),
            Err(Error::NonFinite { index: 0 })
        ));
    }

    #[test]
    fn load_reports_path_on_missing_file() {
        let err = Tensor::load("/nonexistent/dir/x.grtn").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/x.grtn"));
    }

    proptest! {
        #[test]
        fn encode_decode_is_bitwise_identity(
            shape in prop::collection::vec(0usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(((seed.wrapping_mul(i as u64 + 1) >> 20) as u32) & 0x7f7f_ffff))
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes(), Path::new("p")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
