// SPDX-License-Identifier: Apache-2.0

//! Closed-form security-controller capacity and transfer-overhead arithmetic.
//!
//! All bandwidths and sizes must share one unit (the defaults use MB and
//! MB/s). With the binary convention a GB is 1024 MB.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CapacityError {
    #[error("parameter {0} must be positive")]
    NonPositive(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitConvention {
    /// 1 GB = 1024 MB.
    Binary,
    /// 1 GB = 1000 MB.
    Decimal,
}

impl UnitConvention {
    pub fn mb_per_gb(self) -> f64 {
        match self {
            UnitConvention::Binary => 1024.0,
            UnitConvention::Decimal => 1000.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScCapacityParams<T> {
    pub enc_bw_per_core: T,
    pub copy_bw_per_core: T,
    pub per_stream_rate: T,
    pub model_size: T,
    pub cores: u32,
    pub buffer: T,
}

impl<T: Scalar> ScCapacityParams<T> {
    /// Reference controller: 2.59 GB/s/core AES-GCM, 25 GB/s/core copy,
    /// 138 MB/s per stream, a 380.2 MB model, 2.5 GB of staging, in MB units.
    pub fn reference(convention: UnitConvention, cores: u32) -> Self {
        let gb = convention.mb_per_gb();
        let t = |v: f64| T::from(v).expect("representable");
        Self {
            enc_bw_per_core: t(2.59 * gb),
            copy_bw_per_core: t(25.0 * gb),
            per_stream_rate: t(138.0),
            model_size: t(380.2),
            cores,
            buffer: t(2.5 * gb),
        }
    }

    fn validate(&self) -> Result<(), CapacityError> {
        let checks = [
            ("enc_bw_per_core", self.enc_bw_per_core),
            ("copy_bw_per_core", self.copy_bw_per_core),
            ("per_stream_rate", self.per_stream_rate),
            ("model_size", self.model_size),
            ("buffer", self.buffer),
        ];
        for (name, v) in checks {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(CapacityError::NonPositive(name));
            }
        }
        if self.cores == 0 {
            return Err(CapacityError::NonPositive("cores"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScCapacity<T> {
    pub streams_per_core: u64,
    pub total_streams: u64,
    /// Truncated to two decimals.
    pub jobs_per_sec_per_core: T,
    pub total_jobs_per_sec: u64,
    /// Streams per core if copying rather than encryption were the limit.
    pub copy_limited_streams_per_core: u64,
}

fn floor_u64<T: Scalar>(v: T) -> u64 {
    v.floor().to_u64().unwrap_or(u64::MAX)
}

pub fn sc_capacity<T: Scalar>(p: &ScCapacityParams<T>) -> Result<ScCapacity<T>, CapacityError> {
    p.validate()?;
    let hundred = T::from(100.0).expect("representable");
    let cores = T::from(p.cores).expect("representable");
    let streams_per_core = floor_u64(p.enc_bw_per_core / p.per_stream_rate);
    let jobs_per_sec_per_core = (p.enc_bw_per_core / p.model_size * hundred).floor() / hundred;
    Ok(ScCapacity {
        streams_per_core,
        total_streams: u64::from(p.cores) * streams_per_core,
        jobs_per_sec_per_core,
        total_jobs_per_sec: floor_u64(cores * jobs_per_sec_per_core),
        copy_limited_streams_per_core: floor_u64(p.copy_bw_per_core / p.per_stream_rate),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferOverhead<T> {
    pub blocks: u64,
    pub added_latency: T,
}

pub const DEFAULT_BLOCK_SIZE: u64 = 4096;

/// Per-block encryption cost of moving `total_bytes`.
pub fn transfer_overhead<T: Scalar>(
    total_bytes: u64,
    block_size: u64,
    per_block_latency: T,
) -> Result<TransferOverhead<T>, CapacityError> {
    if block_size == 0 {
        return Err(CapacityError::NonPositive("block_size"));
    }
    let blocks = total_bytes.div_ceil(block_size);
    Ok(TransferOverhead { blocks, added_latency: T::from(blocks).expect("representable") * per_block_latency })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_numbers_binary_convention() {
        let one = sc_capacity(&ScCapacityParams::<f64>::reference(UnitConvention::Binary, 1)).unwrap();
        assert_eq!(one.streams_per_core, 19);
        assert!((one.jobs_per_sec_per_core - 6.97).abs() < 1e-9);
        let many = sc_capacity(&ScCapacityParams::<f64>::reference(UnitConvention::Binary, 48)).unwrap();
        assert_eq!(many.total_streams, 912);
        assert_eq!(many.total_jobs_per_sec, 334);
        let f = sc_capacity(&ScCapacityParams::<f32>::reference(UnitConvention::Binary, 48)).unwrap();
        assert_eq!((f.streams_per_core, f.total_streams, f.total_jobs_per_sec), (19, 912, 334));
    }

    #[test]
    fn decimal_convention_differs() {
        let d = sc_capacity(&ScCapacityParams::<f64>::reference(UnitConvention::Decimal, 48)).unwrap();
        assert_eq!(d.streams_per_core, 18);
        assert!((d.jobs_per_sec_per_core - 6.81).abs() < 1e-9);
    }

    #[test]
    fn overhead() {
        let o = transfer_overhead(4096, DEFAULT_BLOCK_SIZE, 1.47f64).unwrap();
        assert_eq!(o.blocks, 1);
        assert_eq!(o.added_latency, 1.47);
        assert_eq!(transfer_overhead(0, 4096, 1.47f64).unwrap().blocks, 0);
        assert_eq!(transfer_overhead(0, 4096, 1.47f64).unwrap().added_latency, 0.0);
        assert_eq!(transfer_overhead(10_000, 4096, 1.0f32).unwrap().blocks, 3);
        assert!(transfer_overhead(1, 0, 1.0f64).is_err());
    }

    #[test]
    fn invalid_params() {
        let mut p = ScCapacityParams::<f64>::reference(UnitConvention::Binary, 1);
        p.per_stream_rate = 0.0;
        assert_eq!(sc_capacity(&p).unwrap_err(), CapacityError::NonPositive("per_stream_rate"));
        p = ScCapacityParams::reference(UnitConvention::Binary, 0);
        assert_eq!(sc_capacity(&p).unwrap_err(), CapacityError::NonPositive("cores"));
    }

    proptest! {
        #[test]
        fn monotone_and_linear(enc in 1.0f64..1e5, enc2 in 1.0f64..1e5, rate in 1.0f64..1e3, rate2 in 1.0f64..1e3,
                               model in 1.0f64..1e4, model2 in 1.0f64..1e4, cores in 1u32..128, extra in 0u32..64) {
            let base = ScCapacityParams { enc_bw_per_core: enc, copy_bw_per_core: 1e4, per_stream_rate: rate,
                                          model_size: model, cores, buffer: 1.0 };
            let c = sc_capacity(&base).unwrap();
            prop_assert_eq!(c.total_streams, u64::from(cores) * c.streams_per_core);
            let more_cores = sc_capacity(&ScCapacityParams { cores: cores + extra, ..base }).unwrap();
            prop_assert!(more_cores.total_streams >= c.total_streams);
            prop_assert!(more_cores.total_jobs_per_sec >= c.total_jobs_per_sec);
            let (lo, hi) = if enc <= enc2 { (enc, enc2) } else { (enc2, enc) };
            let a = sc_capacity(&ScCapacityParams { enc_bw_per_core: lo, ..base }).unwrap();
            let b = sc_capacity(&ScCapacityParams { enc_bw_per_core: hi, ..base }).unwrap();
            prop_assert!(a.streams_per_core <= b.streams_per_core && a.jobs_per_sec_per_core <= b.jobs_per_sec_per_core);
            let (lo, hi) = if rate <= rate2 { (rate, rate2) } else { (rate2, rate) };
            let a = sc_capacity(&ScCapacityParams { per_stream_rate: lo, ..base }).unwrap();
            let b = sc_capacity(&ScCapacityParams { per_stream_rate: hi, ..base }).unwrap();
            prop_assert!(a.streams_per_core >= b.streams_per_core);
            let (lo, hi) = if model <= model2 { (model, model2) } else { (model2, model) };
            let a = sc_capacity(&ScCapacityParams { model_size: lo, ..base }).unwrap();
            let b = sc_capacity(&ScCapacityParams { model_size: hi, ..base }).unwrap();
            prop_assert!(a.jobs_per_sec_per_core >= b.jobs_per_sec_per_core);
        }
    }
}
