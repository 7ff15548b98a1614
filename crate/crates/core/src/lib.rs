// SPDX-License-Identifier: Apache-2.0

//! Deterministic simulator for a data center that mixes TEE-capable devices
//! with legacy devices guarded by security controllers.
//!
//! A [`world::World`] holds the devices, controllers, the untrusted
//! management plane and the tenants, all talking over a simulated
//! [`fabric`]. Tenants run jobs through [`tenant`]; [`adversary`] attacks
//! them; [`World::audit`](world::World::audit) decides whether anything
//! leaked.

pub mod adversary;
pub mod attestation;
pub mod canonical;
pub mod capacity;
pub mod crypto;
pub mod device;
pub mod fabric;
mod hexser;
pub mod ids;
pub mod manifest;
pub mod memory;
pub mod mgmt;
pub mod protocol;
pub mod samples;
pub mod scalar;
pub mod scenario;
pub mod sc;
pub mod tee_node;
pub mod tenant;
pub mod topology;
pub mod world;

/// Scalar used by the simulator's own numeric paths.
pub type Real = f64;
pub type Matrix = device::ai::Matrix<Real>;
pub type TensorJob = device::ai::TensorJob<Real>;
pub type ScCapacityParams = capacity::ScCapacityParams<Real>;
pub type ScCapacity = capacity::ScCapacity<Real>;
pub type TransferOverhead = capacity::TransferOverhead<Real>;
