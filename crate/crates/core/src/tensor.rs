//! Dense `f32` tensors and the `.hvt` binary format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size      field
//! 0       4         magic "HAVC"
//! 4       4         format version (u32), currently 1
//! 8       4         dim count n (u32), n >= 1
//! 12      8*n       dims (u64 each, every dim >= 1)
//! ..      4*prod    data, f32 row-major
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"HAVC";
pub const FORMAT_VERSION: u32 = 1;

/// Upper bound on the number of dims accepted by the reader.
const MAX_DIMS: u32 = 16;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic {0:?}, expected \"HAVC\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("tensor must have between 1 and {MAX_DIMS} dims, got {0}")]
    BadRank(u64),
    #[error("dim {index} is zero")]
    ZeroDim { index: usize },
    #[error("dims {0:?} overflow the addressable element count")]
    DimOverflow(Vec<u64>),
    #[error("truncated data: {0}")]
    Truncated(&'static str),
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("shape {dims:?} needs {expected} elements, got {actual}")]
    ShapeMismatch {
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{0} trailing bytes after tensor payload")]
    TrailingBytes(u64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major dense tensor of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected = checked_len(&dims)?;
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                dims,
                expected,
                actual: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { dims, data })
    }

    /// Builds a tensor from `f64` values, rounding to `f32`.
    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self, TensorError> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the serialized form in bytes.
    pub fn encoded_len(&self) -> usize {
        12 + 8 * self.dims.len() + 4 * self.data.len()
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn checked_len(dims: &[usize]) -> Result<usize, TensorError> {
    if dims.is_empty() || dims.len() > MAX_DIMS as usize {
        return Err(TensorError::BadRank(dims.len() as u64));
    }
    let mut n: usize = 1;
    for (index, &d) in dims.iter().enumerate() {
        if d == 0 {
            return Err(TensorError::ZeroDim { index });
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| TensorError::DimOverflow(dims.iter().map(|&d| d as u64).collect()))?;
    }
    // data bytes must also be addressable
    n.checked_mul(4)
        .ok_or_else(|| TensorError::DimOverflow(dims.iter().map(|&d| d as u64).collect()))?;
    Ok(n)
}

fn check_finite(data: &[f32]) -> Result<(), TensorError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorError::NonFinite {
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}

/// Serializes `t` into `sink`, returning the number of bytes written.
pub fn write_tensor<W: Write>(t: &Tensor, sink: &mut W) -> Result<usize, TensorError> {
    check_finite(&t.data)?;
    let mut buf = Vec::with_capacity(t.encoded_len());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(buf.len())
}

fn read_exact_or<R: Read>(
    source: &mut R,
    buf: &mut [u8],
    what: &'static str,
) -> Result<(), TensorError> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TensorError::Truncated(what),
        _ => TensorError::Io(e),
    })
}

/// Reads one tensor from the front of `source`. Bytes after the payload are
/// left unread; use [`read_tensor_file`] or [`decode_tensor`] to reject them.
pub fn read_tensor<R: Read>(source: &mut R) -> Result<Tensor, TensorError> {
    let mut word = [0u8; 4];
    read_exact_or(source, &mut word, "magic")?;
    if word != MAGIC {
        return Err(TensorError::BadMagic(word));
    }
    read_exact_or(source, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(TensorError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    read_exact_or(source, &mut word, "dim count")?;
    let rank = u32::from_le_bytes(word);
    if rank == 0 || rank > MAX_DIMS {
        return Err(TensorError::BadRank(rank as u64));
    }
    let mut raw_dims = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let mut d = [0u8; 8];
        read_exact_or(source, &mut d, "dims")?;
        raw_dims.push(u64::from_le_bytes(d));
    }
    let dims = raw_dims
        .iter()
        .map(|&d| usize::try_from(d))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| TensorError::DimOverflow(raw_dims.clone()))?;
    let n = checked_len(&dims)?;

    // Read through `take` so a lying header cannot force a huge allocation.
    let mut bytes = Vec::new();
    source.take((n * 4) as u64).read_to_end(&mut bytes)?;
    if bytes.len() != n * 4 {
        return Err(TensorError::Truncated("data"));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    check_finite(&data)?;
    Ok(Tensor { dims, data })
}

/// Decodes a standalone tensor, rejecting trailing bytes.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, TensorError> {
    let mut cursor = bytes;
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(TensorError::TrailingBytes(cursor.len() as u64));
    }
    Ok(t)
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>, TensorError> {
    let mut out = Vec::with_capacity(t.encoded_len());
    write_tensor(t, &mut out)?;
    Ok(out)
}

/// Reads a `.hvt` file, rejecting trailing bytes.
pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
    let mut reader = BufReader::new(File::open(path)?);
    let t = read_tensor(&mut reader)?;
    let mut rest = Vec::new();
    let extra = reader.read_to_end(&mut rest)?;
    if extra > 0 {
        return Err(TensorError::TrailingBytes(extra as u64));
    }
    Ok(t)
}

pub fn write_tensor_file(t: &Tensor, path: impl AsRef<Path>) -> Result<usize, TensorError> {
    let mut writer = BufWriter::new(File::create(path)?);
    let n = write_tensor(t, &mut writer)?;
    writer.flush()?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_like_tensor_is_24_bytes() {
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        let bytes = encode_tensor(&t).unwrap();
        assert_eq!(bytes.len(), 24);
        assert_eq!(t.encoded_len(), 24);
    }

    #[test]
    fn small_round_trip() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let back = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn rejects_bad_magic() {
        let t = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut bytes = encode_tensor(&t).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode_tensor(&bytes),
            Err(TensorError::BadMagic(m)) if &m == b"XAVC"
        ));
    }

    #[test]
    fn rejects_version_mismatch() {
        let t = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut bytes = encode_tensor(&t).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            decode_tensor(&bytes),
            Err(TensorError::VersionMismatch { found: 2, .. })
        ));
    }

    #[test]
    fn rejects_truncation() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode_tensor(&t).unwrap();
        assert!(matches!(
            decode_tensor(&bytes[..bytes.len() - 1]),
            Err(TensorError::Truncated("data"))
        ));
        assert!(matches!(
            decode_tensor(&bytes[..14]),
            Err(TensorError::Truncated("dims"))
        ));
    }

    #[test]
    fn rejects_trailing_bytes() {
        let t = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut bytes = encode_tensor(&t).unwrap();
        bytes.push(0);
        assert!(matches!(
            decode_tensor(&bytes),
            Err(TensorError::TrailingBytes(1))
        ));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f32::NAN]),
            Err(TensorError::NonFinite { index: 1, .. })
        ));
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut bytes = encode_tensor(&t).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(
            decode_tensor(&bytes),
            Err(TensorError::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn rejects_dim_overflow() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&4u64.to_le_bytes());
        assert!(matches!(
            decode_tensor(&bytes),
            Err(TensorError::DimOverflow(_))
        ));
    }

    #[test]
    fn rejects_zero_dim_and_bad_shape() {
        assert!(matches!(
            Tensor::new(vec![2, 0], vec![]),
            Err(TensorError::ZeroDim { index: 1 })
        ));
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0]),
            Err(TensorError::ShapeMismatch { expected: 4, .. })
        ));
        assert!(matches!(
            Tensor::new(vec![], vec![]),
            Err(TensorError::BadRank(0))
        ));
    }
}
