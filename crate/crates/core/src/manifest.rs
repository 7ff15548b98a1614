// SPDX-License-Identifier: Apache-2.0

//! Tenant job manifests: parsing, canonical serialization, signing.
//!
//! ```json
//! {"Enclave": "Enclave1", "Enclave Vendor": "Vendor1", "Version": "X.YZ",
//!  "Resource": [
//!    {"Resource type": "CPU", "Policies": ["no-HT"], "Cores": 2, "Memory": "256M"},
//!    {"Resource type": "AI_Accelerator", "Policies": ["memIsolation", "cachePartitioned"],
//!     "Cores": 20, "Memory": "16G"}],
//!  "SHA-3": "...", "Sig": "..."}
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::canonical::to_canonical_bytes;
use crate::crypto::{self, Digest, PublicKey, Signature, SigningKeyPair};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ManifestError {
    #[error("invalid JSON: {0}")]
    Syntax(String),
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("unknown resource type {0:?}")]
    UnknownResourceType(String),
    #[error("unknown policy {0:?}")]
    UnknownPolicy(String),
}

/// Kinds of device that can appear in a topology or an attestation report.
/// Only the first five may be requested in a manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DeviceKind {
    #[serde(rename = "CPU")]
    Cpu,
    #[serde(rename = "AI_Accelerator")]
    AiAccelerator,
    #[serde(rename = "GPU")]
    Gpu,
    #[serde(rename = "FPGA")]
    Fpga,
    #[serde(rename = "SSD")]
    Ssd,
    #[serde(rename = "SC")]
    SecurityController,
}

impl DeviceKind {
    pub const REQUESTABLE: [DeviceKind; 5] =
        [DeviceKind::Cpu, DeviceKind::AiAccelerator, DeviceKind::Gpu, DeviceKind::Fpga, DeviceKind::Ssd];

    pub fn name(self) -> &'static str {
        match self {
            DeviceKind::Cpu => "CPU",
            DeviceKind::AiAccelerator => "AI_Accelerator",
            DeviceKind::Gpu => "GPU",
            DeviceKind::Fpga => "FPGA",
            DeviceKind::Ssd => "SSD",
            DeviceKind::SecurityController => "SC",
        }
    }
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Security-property vocabulary shared by manifests, reports and whitelists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "no-HT")]
    NoHt,
    #[serde(rename = "memIsolation")]
    MemIsolation,
    #[serde(rename = "cachePartitioned")]
    CachePartitioned,
    #[serde(rename = "debug")]
    Debug,
    #[serde(rename = "coreIsolation")]
    CoreIsolation,
    #[serde(rename = "privateCache")]
    PrivateCache,
    #[serde(rename = "sharedCache")]
    SharedCache,
    #[serde(rename = "sharedCacheIsolation")]
    SharedCacheIsolation,
    #[serde(rename = "sharedMemoryIsolation")]
    SharedMemoryIsolation,
    #[serde(rename = "rowHammerMitigation")]
    RowHammerMitigation,
}

impl Policy {
    pub const ALL: [Policy; 10] = [
        Policy::NoHt,
        Policy::MemIsolation,
        Policy::CachePartitioned,
        Policy::Debug,
        Policy::CoreIsolation,
        Policy::PrivateCache,
        Policy::SharedCache,
        Policy::SharedCacheIsolation,
        Policy::SharedMemoryIsolation,
        Policy::RowHammerMitigation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::NoHt => "no-HT",
            Policy::MemIsolation => "memIsolation",
            Policy::CachePartitioned => "cachePartitioned",
            Policy::Debug => "debug",
            Policy::CoreIsolation => "coreIsolation",
            Policy::PrivateCache => "privateCache",
            Policy::SharedCache => "sharedCache",
            Policy::SharedCacheIsolation => "sharedCacheIsolation",
            Policy::SharedMemoryIsolation => "sharedMemoryIsolation",
            Policy::RowHammerMitigation => "rowHammerMitigation",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = ManifestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| ManifestError::UnknownPolicy(s.to_owned()))
    }
}

/// Parses `"256M"`, `"16G"`, `"512K"` (powers of 1024) or a plain byte count.
pub fn parse_size(s: &str) -> Option<u64> {
    let s = s.trim();
    let (num, mult) = match s.chars().last()? {
        'K' | 'k' => (&s[..s.len() - 1], 1u64 << 10),
        'M' | 'm' => (&s[..s.len() - 1], 1 << 20),
        'G' | 'g' => (&s[..s.len() - 1], 1 << 30),
        _ => (s, 1),
    };
    num.trim().parse::<u64>().ok()?.checked_mul(mult)
}

fn size_from_value(v: &Value) -> Option<u64> {
    match v {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => parse_size(s),
        _ => None,
    }
}

/// Serde adapter for byte sizes written as numbers or suffixed strings.
pub mod size_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(*v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        super::size_from_value(&v).ok_or_else(|| serde::de::Error::custom(format!("invalid size {v}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResourceRequest {
    pub resource_type: DeviceKind,
    pub policies: BTreeSet<Policy>,
    pub cores: u32,
    pub memory: u64,
    /// Served by a non-TEE node behind a security controller.
    pub non_tee: bool,
}

impl ResourceRequest {
    pub fn new(resource_type: DeviceKind, cores: u32, memory: u64) -> Self {
        Self { resource_type, policies: BTreeSet::new(), cores, memory, non_tee: false }
    }

    pub fn with_policies(mut self, policies: impl IntoIterator<Item = Policy>) -> Self {
        self.policies.extend(policies);
        self
    }

    pub fn non_tee(mut self) -> Self {
        self.non_tee = true;
        self
    }

    fn to_value(&self) -> Value {
        let mut names: Vec<&str> = self.policies.iter().map(|p| p.name()).collect();
        names.sort_unstable();
        let mut m = Map::new();
        m.insert("Resource type".into(), json!(self.resource_type.name()));
        m.insert("Policies".into(), json!(names));
        m.insert("Cores".into(), json!(self.cores));
        m.insert("Memory".into(), json!(self.memory));
        if self.non_tee {
            m.insert("NonTEE".into(), json!(true));
        }
        Value::Object(m)
    }

    fn from_value(v: &Value, idx: usize) -> Result<Self, ManifestError> {
        let schema = |what: &str| ManifestError::SchemaError(format!("Resource[{idx}]: {what}"));
        let obj = v.as_object().ok_or_else(|| schema("not an object"))?;
        let ty = obj
            .get("Resource type")
            .and_then(Value::as_str)
            .ok_or_else(|| schema("missing string \"Resource type\""))?;
        let resource_type = DeviceKind::REQUESTABLE
            .into_iter()
            .find(|k| k.name() == ty)
            .ok_or_else(|| ManifestError::UnknownResourceType(ty.to_owned()))?;
        let mut policies = BTreeSet::new();
        match obj.get("Policies") {
            None => {}
            Some(Value::Array(items)) => {
                for item in items {
                    let name = item.as_str().ok_or_else(|| schema("policy is not a string"))?;
                    policies.insert(name.parse()?);
                }
            }
            Some(_) => return Err(schema("\"Policies\" must be an array")),
        }
        let cores = obj
            .get("Cores")
            .and_then(Value::as_u64)
            .and_then(|c| u32::try_from(c).ok())
            .ok_or_else(|| schema("missing integer \"Cores\""))?;
        let memory = obj
            .get("Memory")
            .and_then(size_from_value)
            .ok_or_else(|| schema("missing or malformed \"Memory\""))?;
        if memory == 0 {
            return Err(schema("\"Memory\" must be positive"));
        }
        let non_tee = match obj.get("NonTEE") {
            None => false,
            Some(Value::Bool(b)) => *b,
            Some(_) => return Err(schema("\"NonTEE\" must be a boolean")),
        };
        if non_tee && resource_type == DeviceKind::Cpu {
            return Err(schema("CPU resources must be TEE-capable"));
        }
        Ok(Self { resource_type, policies, cores, memory, non_tee })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub enclave_name: String,
    pub vendor: String,
    /// Opaque; no ordering semantics.
    pub version: String,
    pub resources: Vec<ResourceRequest>,
    pub code_digests: Vec<Digest>,
    /// The "SHA-3" field as declared in the document, if any.
    pub digest: Option<Digest>,
    pub signature: Option<Signature>,
    /// Digest of the canonical body; binds keys and reports to this manifest.
    pub manifest_id: Digest,
}

impl Manifest {
    pub fn new(
        enclave_name: impl Into<String>,
        vendor: impl Into<String>,
        version: impl Into<String>,
        resources: Vec<ResourceRequest>,
        code_digests: Vec<Digest>,
    ) -> Self {
        let mut m = Self {
            enclave_name: enclave_name.into(),
            vendor: vendor.into(),
            version: version.into(),
            resources,
            code_digests,
            digest: None,
            signature: None,
            manifest_id: Digest::ZERO,
        };
        m.manifest_id = crypto::hash(&m.canonical_body());
        m
    }

    fn body_value(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("Enclave".into(), json!(self.enclave_name));
        m.insert("Enclave Vendor".into(), json!(self.vendor));
        m.insert("Version".into(), json!(self.version));
        m.insert("Resource".into(), Value::Array(self.resources.iter().map(|r| r.to_value()).collect()));
        if !self.code_digests.is_empty() {
            m.insert("Code".into(), json!(self.code_digests.iter().map(|d| d.to_hex()).collect::<Vec<_>>()));
        }
        m
    }

    /// Canonical bytes of everything except the "SHA-3" and "Sig" fields.
    pub fn canonical_body(&self) -> Vec<u8> {
        to_canonical_bytes(&Value::Object(self.body_value()))
    }

    /// Sets the digest and signs it.
    pub fn sign(mut self, vendor_key: &SigningKeyPair) -> Self {
        self.manifest_id = crypto::hash(&self.canonical_body());
        self.digest = Some(self.manifest_id);
        self.signature = Some(vendor_key.sign(&self.manifest_id.0));
        self
    }

    /// Canonical document including "SHA-3" and "Sig" when present.
    pub fn to_json(&self) -> Vec<u8> {
        let mut m = self.body_value();
        if let Some(d) = self.digest {
            m.insert("SHA-3".into(), json!(d.to_hex()));
        }
        if let Some(s) = self.signature {
            m.insert("Sig".into(), json!(s.to_hex()));
        }
        to_canonical_bytes(&Value::Object(m))
    }

    pub fn has_cpu(&self) -> bool {
        self.resources.iter().any(|r| r.resource_type == DeviceKind::Cpu && !r.non_tee)
    }

    /// Index of the primary CPU resource: the first CPU request.
    pub fn primary_cpu(&self) -> Option<usize> {
        self.resources.iter().position(|r| r.resource_type == DeviceKind::Cpu && !r.non_tee)
    }
}

pub fn parse_manifest(bytes: &[u8]) -> Result<Manifest, ManifestError> {
    let v: Value = serde_json::from_slice(bytes).map_err(|e| ManifestError::Syntax(e.to_string()))?;
    let obj = v.as_object().ok_or_else(|| ManifestError::SchemaError("top level is not an object".into()))?;
    let string_field = |key: &str| {
        obj.get(key)
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| ManifestError::SchemaError(format!("missing string {key:?}")))
    };
    let enclave_name = string_field("Enclave")?;
    let vendor = string_field("Enclave Vendor")?;
    let version = string_field("Version")?;
    let resources = match obj.get("Resource") {
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, r)| ResourceRequest::from_value(r, i))
            .collect::<Result<Vec<_>, _>>()?,
        _ => return Err(ManifestError::SchemaError("missing array \"Resource\"".into())),
    };
    if resources.is_empty() {
        return Err(ManifestError::SchemaError("\"Resource\" must request at least one resource".into()));
    }
    let code_digests = match obj.get("Code") {
        None => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|c| {
                c.as_str()
                    .and_then(Digest::from_hex)
                    .ok_or_else(|| ManifestError::SchemaError("\"Code\" entries must be 32-byte hex".into()))
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(ManifestError::SchemaError("\"Code\" must be an array".into())),
    };
    let digest = match obj.get("SHA-3") {
        None => None,
        Some(v) => Some(
            v.as_str()
                .and_then(Digest::from_hex)
                .ok_or_else(|| ManifestError::SchemaError("\"SHA-3\" must be 32-byte hex".into()))?,
        ),
    };
    let signature = match obj.get("Sig") {
        None => None,
        Some(v) => Some(
            v.as_str()
                .and_then(Signature::from_hex)
                .ok_or_else(|| ManifestError::SchemaError("\"Sig\" must be 64-byte hex".into()))?,
        ),
    };
    let mut m = Manifest::new(enclave_name, vendor, version, resources, code_digests);
    m.digest = digest;
    m.signature = signature;
    Ok(m)
}

/// True iff the declared digest matches the canonical body and the signature
/// over it verifies under `vendor_pub`.
pub fn verify_manifest(m: &Manifest, vendor_pub: &PublicKey) -> bool {
    let recomputed = crypto::hash(&m.canonical_body());
    match (m.digest, m.signature) {
        (Some(d), Some(sig)) => d == recomputed && crypto::verify(vendor_pub, &d.0, &sig),
        _ => false,
    }
}
