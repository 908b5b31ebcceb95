//! Dense row-major `f32` tensors and the `.glat` binary container.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes   "GLAT"
//! version u32       1
//! dtype   u32       0 = f32
//! ndim    u32       1..=4
//! dims    ndim x u64
//! payload product(dims) x f32 (LE), row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"GLAT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
pub const MAX_RANK: usize = 4;

/// Byte length of the fixed part of the header (magic, version, dtype, ndim).
const FIXED_HEADER: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorF32 {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorF32 {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::UnsupportedRank(shape.len()));
        }
        let numel = checked_numel(&shape)
            .ok_or_else(|| Error::Shape(format!("extent product of {shape:?} overflows")))?;
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = checked_numel(&shape)
            .ok_or_else(|| Error::Shape(format!("extent product of {shape:?} overflows")))?;
        Self::new(shape, vec![0.0; numel])
    }

    /// Builds an `[n, d]` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::Shape(format!(
                "ragged rows: expected width {d}, found {}",
                bad.len()
            )));
        }
        Self::new(vec![rows.len(), d], rows.concat())
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

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[n, d] => Ok((n, d)),
            other => Err(Error::Shape(format!(
                "expected a matrix, got shape {other:?}"
            ))),
        }
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.shape[self.shape.len() - 1];
        &self.data[i * d..(i + 1) * d]
    }

    pub fn at2(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.shape[1] + j]
    }

    /// Serializes to the `.glat` byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FIXED_HEADER + 8 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the `.glat` byte layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let available = bytes.len() as u64;
        if bytes.len() < FIXED_HEADER {
            return Err(Error::Truncated {
                field: "header",
                expected: FIXED_HEADER as u64,
                available,
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = read_u32(bytes, 4);
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dtype = read_u32(bytes, 8);
        if dtype != DTYPE_F32 {
            return Err(Error::UnsupportedDtype(dtype));
        }
        let ndim = read_u32(bytes, 12) as usize;
        if ndim == 0 || ndim > MAX_RANK {
            return Err(Error::UnsupportedRank(ndim));
        }
        let dims_end = FIXED_HEADER + 8 * ndim;
        if bytes.len() < dims_end {
            return Err(Error::Truncated {
                field: "dims",
                expected: dims_end as u64,
                available,
            });
        }
        let mut shape = Vec::with_capacity(ndim);
        for k in 0..ndim {
            let at = FIXED_HEADER + 8 * k;
            let d = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            let d = usize::try_from(d).map_err(|_| Error::Truncated {
                field: "payload",
                expected: u64::MAX,
                available,
            })?;
            shape.push(d);
        }
        let payload_len = checked_numel(&shape)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(dims_end));
        let total = match payload_len {
            Some(t) => t,
            None => {
                return Err(Error::Truncated {
                    field: "payload",
                    expected: u64::MAX,
                    available,
                })
            }
        };
        if bytes.len() < total {
            return Err(Error::Truncated {
                field: "payload",
                expected: total as u64,
                available,
            });
        }
        if bytes.len() > total {
            return Err(Error::TrailingBytes((bytes.len() - total) as u64));
        }
        let data = bytes[dims_end..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(shape, data)
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorF32> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorF32::from_bytes(&bytes)
}

pub fn write_tensor(t: &TensorF32, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Scales each row of an `[n, d]` matrix to unit Euclidean norm. Zero rows
/// pass through unchanged.
pub fn l2_normalize_rows(t: &TensorF32) -> Result<TensorF32> {
    let (_, d) = t.dims2()?;
    let mut out = t.clone();
    if d == 0 {
        return Ok(out);
    }
    for row in out.data.chunks_exact_mut(d) {
        normalize_in_place(row);
    }
    Ok(out)
}

pub(crate) fn normalize_in_place(row: &mut [f32]) {
    let norm = row
        .iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();
    if norm > 0.0 {
        for v in row.iter_mut() {
            *v = (f64::from(*v) / norm) as f32;
        }
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `a · bᵀ` for `a: [n, d]`, `b: [m, d]`.
pub fn matmul_transposed(a: &TensorF32, b: &TensorF32) -> Result<TensorF32> {
    let (n, d) = a.dims2()?;
    let (m, d2) = b.dims2()?;
    if d != d2 {
        return Err(Error::Shape(format!(
            "inner dimensions differ: [{n}, {d}] vs [{m}, {d2}]"
        )));
    }
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ai = &a.data[i * d..(i + 1) * d];
        for j in 0..m {
            out.push(dot(ai, &b.data[j * d..(j + 1) * d]));
        }
    }
    TensorF32::new(vec![n, m], out)
}

/// `a · b` for `a: [n, k]`, `b: [k, m]`.
pub fn matmul(a: &TensorF32, b: &TensorF32) -> Result<TensorF32> {
    let (n, k) = a.dims2()?;
    let (k2, m) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "inner dimensions differ: [{n}, {k}] vs [{k2}, {m}]"
        )));
    }
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b.data[p * m..(p + 1) * m]) {
                *o += aip * bv;
            }
        }
    }
    TensorF32::new(vec![n, m], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_file_decodes() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"GLAT");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        for v in [1.0f32, 0.0, 0.0, 1.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let t = TensorF32::from_bytes(&bytes).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(t.to_bytes(), bytes);
    }

    #[test]
    fn file_sizes_follow_header_layout() {
        // 16 fixed header bytes + 8 per dim + 4 per element.
        let scalar = TensorF32::new(vec![1], vec![3.5]).unwrap();
        assert_eq!(scalar.to_bytes().len(), 4 + 4 + 4 + 4 + 8 + 4);
        let one_by_one = TensorF32::new(vec![1, 1], vec![3.5]).unwrap();
        assert_eq!(one_by_one.to_bytes().len(), 16 + 2 * 8 + 4);
    }

    #[test]
    fn empty_extent_has_no_payload() {
        let t = TensorF32::new(vec![0, 4], vec![]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(bytes.len(), 16 + 16);
        assert_eq!(TensorF32::from_bytes(&bytes).unwrap(), t);
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = TensorF32::new(vec![1], vec![1.0]).unwrap().to_bytes();
        bytes[..4].copy_from_slice(b"XXXX");
        match TensorF32::from_bytes(&bytes) {
            Err(Error::BadMagic { found }) => assert_eq!(&found, b"XXXX"),
            other => panic!("expected bad magic, got {other:?}"),
        }
    }

    #[test]
    fn header_errors_are_distinct() {
        let good = TensorF32::new(vec![2], vec![1.0, 2.0]).unwrap().to_bytes();

        let mut v = good.clone();
        v[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            TensorF32::from_bytes(&v),
            Err(Error::UnsupportedVersion(2))
        ));

        let mut v = good.clone();
        v[8..12].copy_from_slice(&1u32.to_le_bytes());
        assert!(matches!(
            TensorF32::from_bytes(&v),
            Err(Error::UnsupportedDtype(1))
        ));

        let mut v = good.clone();
        v[12..16].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(
            TensorF32::from_bytes(&v),
            Err(Error::UnsupportedRank(5))
        ));

        assert!(matches!(
            TensorF32::from_bytes(&good[..10]),
            Err(Error::Truncated {
                field: "header",
                ..
            })
        ));
        assert!(matches!(
            TensorF32::from_bytes(&good[..20]),
            Err(Error::Truncated { field: "dims", .. })
        ));
        assert!(matches!(
            TensorF32::from_bytes(&good[..good.len() - 1]),
            Err(Error::Truncated {
                field: "payload",
                ..
            })
        ));

        let mut v = good;
        v.push(0);
        assert!(matches!(
            TensorF32::from_bytes(&v),
            Err(Error::TrailingBytes(1))
        ));
    }

    #[test]
    fn rank_three_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.glat");
        let t = TensorF32::new(vec![2, 3, 2], (0..12).map(|v| v as f32 * 0.5).collect()).unwrap();
        write_tensor(&t, &path).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    #[test]
    fn row_major_indexing() {
        let data: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let t = TensorF32::new(vec![3, 4], data).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(t.at2(i, j), (i * 4 + j) as f32);
            }
        }
        assert_eq!(t.row(2), &[8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn normalize_examples() {
        let t = TensorF32::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        let n = l2_normalize_rows(&t).unwrap();
        assert!((n.at2(0, 0) - 0.6).abs() < 1e-7);
        assert!((n.at2(0, 1) - 0.8).abs() < 1e-7);
        assert_eq!(n.row(1), &[0.0, 0.0]);

        let unit = TensorF32::from_rows(&[vec![0.6, 0.8]]).unwrap();
        let again = l2_normalize_rows(&unit).unwrap();
        for (a, b) in again.data().iter().zip(unit.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn matmul_shapes_are_checked() {
        let a = TensorF32::zeros(vec![2, 3]).unwrap();
        let b = TensorF32::zeros(vec![2, 2]).unwrap();
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(matmul_transposed(&a, &b), Err(Error::Shape(_))));
    }

    fn arb_tensor() -> impl Strategy<Value = TensorF32> {
        prop::collection::vec(0usize..5, 1..=4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n)
                .prop_map(move |data| TensorF32::new(shape.clone(), data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn bytes_round_trip_exactly(t in arb_tensor()) {
            let bytes = t.to_bytes();
            let back = TensorF32::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }

        #[test]
        fn normalize_is_idempotent(rows in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 3), 1..8)) {
            let t = TensorF32::from_rows(&rows).unwrap();
            let once = l2_normalize_rows(&t).unwrap();
            let twice = l2_normalize_rows(&once).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
            for i in 0..rows.len() {
                let norm: f32 = once.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
                prop_assert!(norm == 0.0 || (norm - 1.0).abs() <= 1e-6);
            }
        }
    }
}
