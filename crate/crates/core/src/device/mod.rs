// SPDX-License-Identifier: Apache-2.0

//! Functional models of the two case-study devices.

pub mod ai;
pub mod ssd;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DeviceError {
    #[error("access denied by the access control unit")]
    AccessDenied,
    #[error("address range outside the namespace")]
    OutOfRange,
    #[error("tensor dimensions do not conform")]
    DimensionMismatch,
    #[error("malformed command: {0}")]
    Malformed(String),
}
