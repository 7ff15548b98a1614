// SPDX-License-Identifier: Apache-2.0

//! Identities of every principal that can appear on the fabric.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, ":{}"), self.0)
            }
        }
    };
}

id_newtype!(
    /// A tenant job. Also the taint label carried by the job's data.
    JobId,
    "job"
);
id_newtype!(NodeId, "node");
id_newtype!(ScId, "sc");
id_newtype!(TenantId, "tenant");

/// A fungible device unit: one partition of a TEE node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FduId {
    pub node: NodeId,
    pub index: u16,
}

impl FduId {
    pub fn new(node: NodeId, index: u16) -> Self {
        Self { node, index }
    }
}

impl fmt::Display for FduId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "fdu:{}.{}", self.node.0, self.index)
    }
}

/// Every addressable party in a world.
///
/// The derived ordering is the sender index used to break ties between
/// messages scheduled for the same tick.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrincipalId {
    Mp,
    Tenant(TenantId),
    Sc(ScId),
    Node(NodeId),
    Fdu(FduId),
}

impl PrincipalId {
    /// The physical endpoint a message to or from this principal travels through.
    pub fn physical(self) -> PrincipalId {
        match self {
            PrincipalId::Fdu(f) => PrincipalId::Node(f.node),
            other => other,
        }
    }

    /// Fixed 9-byte encoding used inside authenticated data.
    pub fn encode(self) -> [u8; 9] {
        let (kind, a, b): (u8, u32, u32) = match self {
            PrincipalId::Mp => (0, 0, 0),
            PrincipalId::Tenant(t) => (1, t.0, 0),
            PrincipalId::Sc(s) => (2, s.0, 0),
            PrincipalId::Node(n) => (3, n.0, 0),
            PrincipalId::Fdu(f) => (4, f.node.0, u32::from(f.index)),
        };
        let mut out = [0u8; 9];
        out[0] = kind;
        out[1..5].copy_from_slice(&a.to_be_bytes());
        out[5..9].copy_from_slice(&b.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8; 9]) -> Option<PrincipalId> {
        let a = u32::from_be_bytes(bytes[1..5].try_into().ok()?);
        let b = u32::from_be_bytes(bytes[5..9].try_into().ok()?);
        Some(match bytes[0] {
            0 => PrincipalId::Mp,
            1 => PrincipalId::Tenant(TenantId(a)),
            2 => PrincipalId::Sc(ScId(a)),
            3 => PrincipalId::Node(NodeId(a)),
            4 => PrincipalId::Fdu(FduId::new(NodeId(a), u16::try_from(b).ok()?)),
            _ => return None,
        })
    }
}

impl fmt::Display for PrincipalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrincipalId::Mp => f.write_str("mp"),
            PrincipalId::Tenant(t) => t.fmt(f),
            PrincipalId::Sc(s) => s.fmt(f),
            PrincipalId::Node(n) => n.fmt(f),
            PrincipalId::Fdu(d) => d.fmt(f),
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("malformed principal id {0:?}")]
pub struct ParsePrincipalError(String);

impl FromStr for PrincipalId {
    type Err = ParsePrincipalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParsePrincipalError(s.to_owned());
        if s == "mp" {
            return Ok(PrincipalId::Mp);
        }
        let (kind, rest) = s.split_once(':').ok_or_else(err)?;
        let num = |v: &str| v.parse::<u32>().map_err(|_| err());
        Ok(match kind {
            "tenant" => PrincipalId::Tenant(TenantId(num(rest)?)),
            "sc" => PrincipalId::Sc(ScId(num(rest)?)),
            "node" => PrincipalId::Node(NodeId(num(rest)?)),
            "fdu" => {
                let (n, i) = rest.split_once('.').ok_or_else(err)?;
                let index = i.parse::<u16>().map_err(|_| err())?;
                PrincipalId::Fdu(FduId::new(NodeId(num(n)?), index))
            }
            _ => return Err(err()),
        })
    }
}

impl Serialize for PrincipalId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PrincipalId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_and_display_roundtrip() {
        let all = [
            PrincipalId::Mp,
            PrincipalId::Tenant(TenantId(3)),
            PrincipalId::Sc(ScId(1)),
            PrincipalId::Node(NodeId(7)),
            PrincipalId::Fdu(FduId::new(NodeId(7), 2)),
        ];
        for p in all {
            assert_eq!(PrincipalId::decode(&p.encode()), Some(p));
            assert_eq!(p.to_string().parse::<PrincipalId>().unwrap(), p);
        }
        assert!("fdu:1".parse::<PrincipalId>().is_err());
    }

    #[test]
    fn fdu_travels_through_its_node() {
        let f = FduId::new(NodeId(4), 1);
        assert_eq!(PrincipalId::Fdu(f).physical(), PrincipalId::Node(NodeId(4)));
    }
}
