//! The `VTTS` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size        field
//! 0       4           magic "VTTS"
//! 4       1           version (1)
//! 5       1           dtype (0 = f32, 1 = f64)
//! 6       1           rank (<= 4)
//! 7       1           reserved (0)
//! 8       4 * rank    dims, u32 each
//! ...     elem * prod payload, row-major
//! ```
//!
//! Data artifacts (lips, mels, alignments) are written as f32. Model
//! checkpoints use f64 so that a save/load cycle reproduces the trained
//! parameters exactly.

use std::fs;
use std::path::Path;

use ndarray::{ArrayBase, ArrayD, Data, Dimension, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VTTS";
pub const VERSION: u8 = 1;
pub const MAX_RANK: usize = 4;
const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format {
                field: "dtype",
                detail: format!("unsupported dtype code {other}"),
            }),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar types storable in a tensor file.
pub trait Element: Copy + 'static {
    const DTYPE: DType;
    fn is_finite(self) -> bool;
    fn put(self, out: &mut Vec<u8>);
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// A tensor read back from disk, tagged with its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(a) => a.shape(),
            Tensor::F64(a) => a.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Tensor::F32(_) => DType::F32,
            Tensor::F64(_) => DType::F64,
        }
    }

    pub fn into_f32(self) -> ArrayD<f32> {
        match self {
            Tensor::F32(a) => a,
            Tensor::F64(a) => a.mapv(|v| v as f32),
        }
    }

    pub fn into_f64(self) -> ArrayD<f64> {
        match self {
            Tensor::F32(a) => a.mapv(f64::from),
            Tensor::F64(a) => a,
        }
    }
}

pub fn encode_tensor<S, D, T>(x: &ArrayBase<S, D>) -> Result<Vec<u8>>
where
    S: Data<Elem = T>,
    D: Dimension,
    T: Element,
{
    if x.ndim() > MAX_RANK {
        return Err(Error::Validation(format!(
            "tensor rank {} exceeds maximum {MAX_RANK}",
            x.ndim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("tensor contains non-finite values".into()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * x.ndim() + T::DTYPE.size() * x.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE as u8);
    out.push(x.ndim() as u8);
    out.push(0);
    for &d in x.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Validation(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    // `iter` walks in logical row-major order regardless of memory layout.
    for &v in x.iter() {
        v.put(&mut out);
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            field: "header",
            detail: format!("truncated header: {} bytes", bytes.len()),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format {
            field: "magic",
            detail: format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4])),
        });
    }
    if bytes[4] != VERSION {
        return Err(Error::Format {
            field: "version",
            detail: format!("version mismatch: found {}, expected {VERSION}", bytes[4]),
        });
    }
    let dtype = DType::from_code(bytes[5])?;
    let rank = bytes[6] as usize;
    if rank > MAX_RANK {
        return Err(Error::Format {
            field: "rank",
            detail: format!("rank {rank} exceeds {MAX_RANK}"),
        });
    }
    if bytes[7] != 0 {
        return Err(Error::Format {
            field: "reserved",
            detail: format!("reserved byte is {}", bytes[7]),
        });
    }
    let dims_end = HEADER_LEN + 4 * rank;
    if bytes.len() < dims_end {
        return Err(Error::Format {
            field: "dims",
            detail: "truncated dimension list".into(),
        });
    }
    let dims: Vec<usize> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let payload = &bytes[dims_end..];
    let expected = count * dtype.size();
    if payload.len() != expected {
        return Err(Error::Format {
            field: "payload",
            detail: if payload.len() < expected {
                format!("truncated payload: {} of {expected} bytes", payload.len())
            } else {
                format!("{} trailing bytes after payload", payload.len() - expected)
            },
        });
    }
    let shape = IxDyn(&dims);
    let tensor = match dtype {
        DType::F32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::F32(ArrayD::from_shape_vec(shape, data).expect("length checked"))
        }
        DType::F64 => {
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            Tensor::F64(ArrayD::from_shape_vec(shape, data).expect("length checked"))
        }
    };
    Ok(tensor)
}

pub fn write_tensor<S, D, T>(x: &ArrayBase<S, D>, dest: impl AsRef<Path>) -> Result<()>
where
    S: Data<Elem = T>,
    D: Dimension,
    T: Element,
{
    let dest = dest.as_ref();
    let bytes = encode_tensor(x)?;
    if let Some(parent) = dest.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(dest, bytes).map_err(|e| Error::io(dest, e))
}

pub fn read_tensor(src: impl AsRef<Path>) -> Result<Tensor> {
    let src = src.as_ref();
    let bytes = fs::read(src).map_err(|e| Error::io(src, e))?;
    decode_tensor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};
    use proptest::prelude::*;

    #[test]
    fn single_zero_is_sixteen_bytes() {
        // One element, one dimension: 8-byte header, one u32 dim, 4-byte payload.
        let x = ndarray::arr1(&[0.0f32]);
        let bytes = encode_tensor(&x).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[..8], &[b'V', b'T', b'T', b'S', 1, 0, 1, 0]);
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &[0, 0, 0, 0]);
    }

    #[test]
    fn matrix_header_lists_dims_in_order() {
        let bytes = encode_tensor(&Array2::<f32>::zeros((56, 80))).unwrap();
        assert_eq!(bytes[6], 2);
        assert_eq!(&bytes[8..12], &56u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &80u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 4 * 56 * 80);
    }

    #[test]
    fn bad_magic_is_named() {
        let mut bytes = encode_tensor(&Array2::<f32>::zeros((2, 2))).unwrap();
        bytes[0] = b'X';
        let err = decode_tensor(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
        assert!(matches!(err, Error::Format { field: "magic", .. }));
    }

    #[test]
    fn version_and_truncation_errors() {
        let good = encode_tensor(&Array2::<f32>::ones((3, 4))).unwrap();
        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(
            decode_tensor(&bad_version),
            Err(Error::Format { field: "version", .. })
        ));
        assert!(matches!(
            decode_tensor(&good[..good.len() - 1]),
            Err(Error::Format { field: "payload", .. })
        ));
        assert!(matches!(
            decode_tensor(&good[..10]),
            Err(Error::Format { field: "dims", .. })
        ));
        assert!(matches!(
            decode_tensor(&good[..5]),
            Err(Error::Format { field: "header", .. })
        ));
    }

    #[test]
    fn rejects_non_finite_and_high_rank() {
        let x = arr2(&[[f32::NAN]]);
        assert!(matches!(encode_tensor(&x), Err(Error::Validation(_))));
        let x = ArrayD::<f32>::zeros(IxDyn(&[1, 1, 1, 1, 1]));
        assert!(matches!(encode_tensor(&x), Err(Error::Validation(_))));
    }

    #[test]
    fn file_round_trip_3x80() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vtts");
        let x = Array2::from_shape_fn((3, 80), |(i, j)| (i * 80 + j) as f32 * 0.37 - 11.0);
        write_tensor(&x, &path).unwrap();
        let back = read_tensor(&path).unwrap().into_f32();
        assert_eq!(back.shape(), &[3, 80]);
        for (a, b) in x.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    fn shape_and_values() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
        prop::collection::vec(1usize..5, 0..=4).prop_flat_map(|dims| {
            let n: usize = dims.iter().product();
            (
                Just(dims),
                prop::collection::vec(
                    prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO,
                    n,
                ),
            )
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact((dims, values) in shape_and_values()) {
            let x64 = ArrayD::from_shape_vec(IxDyn(&dims), values).unwrap();
            let back = decode_tensor(&encode_tensor(&x64).unwrap()).unwrap();
            prop_assert_eq!(back.dtype(), DType::F64);
            let back = back.into_f64();
            prop_assert_eq!(back.shape(), x64.shape());
            for (a, b) in x64.iter().zip(back.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }

            let x32 = x64.mapv(|v| (v as f32).clamp(f32::MIN, f32::MAX));
            let back = decode_tensor(&encode_tensor(&x32).unwrap()).unwrap().into_f32();
            for (a, b) in x32.iter().zip(back.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
