// SPDX-License-Identifier: Apache-2.0

//! AI-accelerator compute reduced to dense matrix chains.
//!
//! A model is a list of matrices applied in order: `y = M_k(...(M_1 x))`.
//! Jobs are loaded into FDU memory in a flat little-endian layout and run
//! from there.

use serde::{Deserialize, Serialize};

use super::DeviceError;
use crate::ids::FduId;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, DeviceError> {
        if data.len() != rows * cols {
            return Err(DeviceError::DimensionMismatch);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self { rows: n, cols: n, data }
    }

    pub fn apply(&self, x: &[T]) -> Result<Vec<T>, DeviceError> {
        if x.len() != self.cols || self.data.len() != self.rows * self.cols {
            return Err(DeviceError::DimensionMismatch);
        }
        Ok(self
            .data
            .chunks(self.cols)
            .map(|row| row.iter().zip(x).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorJob<T> {
    pub model: Vec<Matrix<T>>,
    pub input: Vec<T>,
    pub fdu: FduId,
}

/// Runs the chain directly on host values, without any device memory.
pub fn ai_compute<T: Scalar>(job: &TensorJob<T>) -> Result<Vec<T>, DeviceError> {
    job.model.iter().try_fold(job.input.clone(), |x, m| m.apply(&x))
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), DeviceError> {
    let v = u32::try_from(v).map_err(|_| DeviceError::DimensionMismatch)?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// `n_mats(4) || {rows(4) cols(4) data}* || input_len(4) || input`, all little-endian.
pub fn encode_job<T: Scalar>(job: &TensorJob<T>) -> Result<Vec<u8>, DeviceError> {
    let mut out = Vec::new();
    put_u32(&mut out, job.model.len())?;
    for m in &job.model {
        if m.data.len() != m.rows * m.cols {
            return Err(DeviceError::DimensionMismatch);
        }
        put_u32(&mut out, m.rows)?;
        put_u32(&mut out, m.cols)?;
        m.data.iter().for_each(|v| v.write_le(&mut out));
    }
    put_u32(&mut out, job.input.len())?;
    job.input.iter().for_each(|v| v.write_le(&mut out));
    Ok(out)
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn u32(&mut self) -> Result<usize, DeviceError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn take(&mut self, n: usize) -> Result<&[u8], DeviceError> {
        if self.0.len() < n {
            return Err(DeviceError::Malformed("truncated tensor job".into()));
        }
        let (h, t) = self.0.split_at(n);
        self.0 = t;
        Ok(h)
    }

    fn scalars<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>, DeviceError> {
        let bytes = self.take(n.checked_mul(T::WIDTH).ok_or(DeviceError::DimensionMismatch)?)?;
        Ok(bytes.chunks(T::WIDTH).map(T::read_le).collect())
    }
}

pub fn decode_job<T: Scalar>(bytes: &[u8], fdu: FduId) -> Result<TensorJob<T>, DeviceError> {
    let mut r = Reader(bytes);
    let n = r.u32()?;
    let mut model = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let rows = r.u32()?;
        let cols = r.u32()?;
        let data = r.scalars(rows.checked_mul(cols).ok_or(DeviceError::DimensionMismatch)?)?;
        model.push(Matrix { rows, cols, data });
    }
    let len = r.u32()?;
    let input = r.scalars(len)?;
    Ok(TensorJob { model, input, fdu })
}

pub fn encode_tensor<T: Scalar>(v: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * T::WIDTH);
    v.iter().for_each(|x| x.write_le(&mut out));
    out
}

pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Vec<T>, DeviceError> {
    if bytes.len() % T::WIDTH != 0 {
        return Err(DeviceError::Malformed("tensor length".into()));
    }
    Ok(bytes.chunks(T::WIDTH).map(T::read_le).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::NodeId;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn fdu() -> FduId {
        FduId::new(NodeId(1), 0)
    }

    #[test]
    fn identity_and_hand_example() {
        let job = TensorJob { model: vec![Matrix::identity(3)], input: vec![1.0f64, -2.0, 3.5], fdu: fdu() };
        assert_eq!(ai_compute(&job).unwrap(), vec![1.0, -2.0, 3.5]);
        let m = Matrix::new(2, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let job = TensorJob { model: vec![m], input: vec![1.0, 1.0], fdu: fdu() };
        assert_eq!(ai_compute(&job).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let m = Matrix::new(2, 3, vec![0.0f64; 6]).unwrap();
        let job = TensorJob { model: vec![m], input: vec![1.0, 1.0], fdu: fdu() };
        assert_eq!(ai_compute(&job), Err(DeviceError::DimensionMismatch));
        assert!(Matrix::<f64>::new(2, 2, vec![0.0; 3]).is_err());
    }

    /// Independent oracle: composes the chain into one matrix with explicit
    /// index loops, then multiplies once.
    fn oracle(model: &[Matrix<f64>], x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut acc: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        for m in model {
            let mut next = vec![vec![0.0; n]; m.rows];
            for i in 0..m.rows {
                for j in 0..n {
                    let mut s = 0.0;
                    for k in 0..m.cols {
                        s += m.data[i * m.cols + k] * acc[k][j];
                    }
                    next[i][j] = s;
                }
            }
            acc = next;
        }
        acc.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    #[test]
    fn random_8x8_chain_matches_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        for _ in 0..20 {
            // Small integers keep every intermediate exact, so evaluation order cannot matter.
            let mut mat = || Matrix::new(8, 8, (0..64).map(|_| f64::from(rng.random_range(-3i32..4))).collect()).unwrap();
            let model = vec![mat(), mat(), mat()];
            let input: Vec<f64> = (0..8).map(|i| f64::from(i) - 3.0).collect();
            let job = TensorJob { model: model.clone(), input: input.clone(), fdu: fdu() };
            assert_eq!(ai_compute(&job).unwrap(), oracle(&model, &input));
        }
    }

    #[test]
    fn memory_layout_roundtrip() {
        let job = TensorJob {
            model: vec![Matrix::new(2, 3, vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), Matrix::identity(2)],
            input: vec![0.5, 0.25, -1.0],
            fdu: fdu(),
        };
        let bytes = encode_job(&job).unwrap();
        assert_eq!(decode_job::<f32>(&bytes, fdu()).unwrap(), job);
        assert!(decode_job::<f32>(&bytes[..bytes.len() - 1], fdu()).is_err());
        assert_eq!(decode_tensor::<f32>(&encode_tensor(&job.input)).unwrap(), job.input);
    }
}
