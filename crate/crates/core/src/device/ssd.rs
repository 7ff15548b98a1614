// SPDX-License-Identifier: Apache-2.0

//! Block-level SSD namespace model. Each FDU is one namespace; the flash
//! translation layer is out of scope, so blocks map directly onto the
//! namespace's slice of device memory.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::DeviceError;
use crate::ids::{FduId, JobId};
use crate::memory::{SparseMemory, TaintedBytes};

pub const BLOCK_SIZE: u64 = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockOp {
    Read,
    Write,
    Flush,
    Trim,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCommand {
    pub op: BlockOp,
    pub lba: u64,
    pub block_count: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty", with = "crate::hexser")]
    pub data: Vec<u8>,
    /// Target namespace.
    pub fdu: FduId,
}

impl BlockCommand {
    pub fn read(fdu: FduId, lba: u64, block_count: u32) -> Self {
        Self { op: BlockOp::Read, lba, block_count, data: Vec::new(), fdu }
    }

    pub fn write(fdu: FduId, lba: u64, data: Vec<u8>) -> Self {
        let block_count = (data.len() as u64 / BLOCK_SIZE) as u32;
        Self { op: BlockOp::Write, lba, block_count, data, fdu }
    }

    pub fn trim(fdu: FduId, lba: u64, block_count: u32) -> Self {
        Self { op: BlockOp::Trim, lba, block_count, data: Vec::new(), fdu }
    }

    pub fn flush(fdu: FduId) -> Self {
        Self { op: BlockOp::Flush, lba: 0, block_count: 0, data: Vec::new(), fdu }
    }

    /// Byte range relative to the namespace start.
    pub fn byte_range(&self) -> (u64, u64) {
        (self.lba * BLOCK_SIZE, u64::from(self.block_count) * BLOCK_SIZE)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockResponse {
    Data(#[serde(with = "crate::hexser")] Vec<u8>),
    Ack,
}

/// A namespace's placement in device memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Namespace {
    pub base: u64,
    pub blocks: u64,
}

/// Executes `cmd` against the namespace. Written data carries `label`.
pub fn execute(
    mem: &mut SparseMemory,
    ns: Namespace,
    cmd: &BlockCommand,
    label: Option<JobId>,
) -> Result<BlockResponse, DeviceError> {
    if cmd.op == BlockOp::Flush {
        return Ok(BlockResponse::Ack);
    }
    let end = cmd.lba.checked_add(u64::from(cmd.block_count)).ok_or(DeviceError::OutOfRange)?;
    if end > ns.blocks {
        return Err(DeviceError::OutOfRange);
    }
    let (off, len) = cmd.byte_range();
    let addr = ns.base + off;
    let oob = |_| DeviceError::OutOfRange;
    match cmd.op {
        BlockOp::Read => Ok(BlockResponse::Data(mem.read(addr, len).map_err(oob)?.bytes)),
        BlockOp::Write => {
            if cmd.data.len() as u64 != len {
                return Err(DeviceError::Malformed(format!(
                    "write of {} blocks carries {} bytes",
                    cmd.block_count,
                    cmd.data.len()
                )));
            }
            let data = TaintedBytes { bytes: cmd.data.clone(), labels: label.into_iter().collect() };
            mem.write(addr, &data).map_err(oob)?;
            Ok(BlockResponse::Ack)
        }
        BlockOp::Trim => {
            mem.zero(addr, len).map_err(oob)?;
            Ok(BlockResponse::Ack)
        }
        BlockOp::Flush => unreachable!(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FioPattern {
    SeqWrite,
    SeqRead,
    RandWrite,
    RandRead,
    /// 70% reads, 30% writes, random offsets, occasional trims and flushes.
    Mixed,
}

/// Generates an FIO-like command list touching `total_bytes` in chunks of
/// `blocks_per_cmd` blocks. Read patterns are preceded by a sequential fill
/// so they return data.
pub fn fio_workload(
    pattern: FioPattern,
    fdu: FduId,
    ns_blocks: u64,
    total_bytes: u64,
    blocks_per_cmd: u32,
    seed: u64,
) -> Vec<BlockCommand> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let per = u64::from(blocks_per_cmd);
    let n_cmds = total_bytes.div_ceil(per * BLOCK_SIZE);
    let slots = (ns_blocks / per).max(1);
    let payload = |rng: &mut ChaCha20Rng| {
        let mut d = vec![0u8; (per * BLOCK_SIZE) as usize];
        rng.fill_bytes(&mut d);
        d
    };
    let mut cmds = Vec::new();
    if matches!(pattern, FioPattern::SeqRead | FioPattern::RandRead | FioPattern::Mixed) {
        for i in 0..n_cmds.min(slots) {
            cmds.push(BlockCommand::write(fdu, i * per, payload(&mut rng)));
        }
    }
    for i in 0..n_cmds {
        let seq_lba = (i % slots) * per;
        let rand_lba = rng.random_range(0..slots) * per;
        let cmd = match pattern {
            FioPattern::SeqWrite => BlockCommand::write(fdu, seq_lba, payload(&mut rng)),
            FioPattern::SeqRead => BlockCommand::read(fdu, seq_lba, blocks_per_cmd),
            FioPattern::RandWrite => BlockCommand::write(fdu, rand_lba, payload(&mut rng)),
            FioPattern::RandRead => BlockCommand::read(fdu, rand_lba, blocks_per_cmd),
            FioPattern::Mixed => match rng.random_range(0..100u32) {
                0..70 => BlockCommand::read(fdu, rand_lba, blocks_per_cmd),
                70..97 => BlockCommand::write(fdu, rand_lba, payload(&mut rng)),
                97..99 => BlockCommand::trim(fdu, rand_lba, blocks_per_cmd),
                _ => BlockCommand::flush(fdu),
            },
        };
        cmds.push(cmd);
    }
    cmds
}
