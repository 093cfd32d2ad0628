//! Dense row-major `f64` tensors and their portable binary layout.
//!
//! The on-disk layout is:
//!
//! ```text
//! "DLT1" | rank: u64 LE | dims: rank x u64 LE | values: prod(dims) x f64 LE
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"DLT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::dim("item", &self.shape, &[1]));
        }
        Ok(self.data[0])
    }

    /// Interprets the tensor as a matrix: rank-1 tensors become a single row.
    pub fn as_matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::dim("as_matrix", &self.shape, &[0, 0])),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, n) = self.as_matrix_dims().expect("row() needs a matrix");
        &self.data[i * n..(i + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `a[m×n] · b[n×p]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, n) = self.as_matrix_dims()?;
        let (n2, p) = other.as_matrix_dims()?;
        if n != n2 || self.rank() != 2 || other.rank() != 2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let a_row = &self.data[i * n..(i + 1) * n];
            let o_row = &mut out[i * p..(i + 1) * p];
            for (l, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[l * p..(l + 1) * p];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, p],
            data: out,
        })
    }

    /// `a[m×n] · b[p×n]ᵀ`, the row-major projection `x Wᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, n) = self.as_matrix_dims()?;
        let (p, n2) = other.as_matrix_dims()?;
        if n != n2 || self.rank() != 2 || other.rank() != 2 {
            return Err(Error::dim("matmul_nt", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let a_row = &self.data[i * n..(i + 1) * n];
            for j in 0..p {
                let b_row = &other.data[j * n..(j + 1) * n];
                out[i * p + j] = dot(a_row, b_row);
            }
        }
        Ok(Tensor {
            shape: vec![m, p],
            data: out,
        })
    }

    /// `a[n×m]ᵀ · b[n×p]`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (n, m) = self.as_matrix_dims()?;
        let (n2, p) = other.as_matrix_dims()?;
        if n != n2 || self.rank() != 2 || other.rank() != 2 {
            return Err(Error::dim("matmul_tn", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * p];
        for l in 0..n {
            let a_row = &self.data[l * m..(l + 1) * m];
            let b_row = &other.data[l * p..(l + 1) * p];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * p..(i + 1) * p];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, p],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.as_matrix_dims()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// L∞ distance; `f64::INFINITY` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Bitwise equality of shape and every value.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.shape.len() as u64).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let rank = read_u64(r)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("unsupported tensor rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let mut data = Vec::with_capacity(count.min(1 << 24));
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Tensor::new(shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * (self.shape.len() + self.data.len()));
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        let mut cursor = bytes;
        let t = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after tensor", cursor.len())));
        }
        Ok(t)
    }
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let p = b.shape()[1];
        let mut out = Tensor::zeros(&[m, p]);
        for i in 0..m {
            for j in 0..p {
                let mut s = 0.0;
                for l in 0..n {
                    s += a.data()[i * n + l] * b.data()[l * p + j];
                }
                out.data_mut()[i * p + j] = s;
            }
        }
        out
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::matrix(&[&[1.0, 2.0]]);
        let b = Tensor::matrix(&[&[3.0], &[4.0]]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn random_matmul_matches_triple_loop() {
        let mut rng = crate::rng::Rng::new(3);
        let a = rng.uniform_tensor(&[4, 3], -1.0, 1.0);
        let b = rng.uniform_tensor(&[3, 2], -1.0, 1.0);
        let got = a.matmul(&b).unwrap();
        let want = reference_matmul(&a, &b);
        assert!(got.max_abs_diff(&want) < 1e-15);
        // transposed variants agree with the plain product
        let nt = a.matmul_nt(&b.transpose().unwrap()).unwrap();
        let tn = a.transpose().unwrap().matmul_tn(&b).unwrap();
        assert!(nt.max_abs_diff(&want) < 1e-15);
        assert!(tn.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        match a.matmul(&b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn serialization_layout() {
        let t = Tensor::matrix(&[&[1.0, -2.5]]);
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"DLT1");
        assert_eq!(u64::from_le_bytes(bytes[4..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[28..36].try_into().unwrap()), 1.0);
        assert_eq!(f64::from_le_bytes(bytes[36..44].try_into().unwrap()), -2.5);
        assert_eq!(bytes.len(), 44);
    }

    #[test]
    fn deserialization_rejects_garbage() {
        assert!(Tensor::from_bytes(b"NOPE").is_err());
        let mut bytes = Tensor::vector(&[1.0]).to_bytes();
        bytes.push(0);
        assert!(Tensor::from_bytes(&bytes).is_err());
        let bytes = Tensor::vector(&[1.0, 2.0]).to_bytes();
        assert!(Tensor::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn serialization_roundtrip(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let t = crate::rng::Rng::new(seed).uniform_tensor(&[rows, cols], -1e3, 1e3);
            prop_assert!(Tensor::from_bytes(&t.to_bytes()).unwrap().bit_eq(&t));
        }

        #[test]
        fn matmul_is_linear(seed in any::<u64>(), m in 1usize..5, n in 1usize..5, p in 1usize..5) {
            let mut rng = crate::rng::Rng::new(seed);
            let a = rng.uniform_tensor(&[m, n], -1.0, 1.0);
            let x = rng.uniform_tensor(&[n, p], -1.0, 1.0);
            let y = rng.uniform_tensor(&[n, p], -1.0, 1.0);
            let lhs = a.matmul(&x.add(&y).unwrap()).unwrap();
            let rhs = a.matmul(&x).unwrap().add(&a.matmul(&y).unwrap()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
        }
    }
}
