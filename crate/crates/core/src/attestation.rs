// SPDX-License-Identifier: Apache-2.0

//! Measured boot, hierarchical property-based attestation, reports,
//! verification, challenge freshness and revocation.
//!
//! PCR[0] holds the firmware digest and PCR[23] the property chain. Every
//! property event extends PCR[23] starting from the zero digest, so each
//! path through the configuration tree ends in a distinct leaf that the
//! vendor can whitelist.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Value};

use crate::canonical::{canonical_of, to_canonical_bytes};
use crate::crypto::{self, Digest, PublicKey, Signature, SigningKeyPair};
use crate::ids::{NodeId, ScId};
use crate::manifest::{DeviceKind, Policy, ResourceRequest};

pub const PCR_COUNT: usize = 24;
pub const PCR_FIRMWARE: usize = 0;
pub const PCR_PBA: usize = 23;

/// A verifier-issued freshness nonce.
pub type Challenge = Digest;

pub type SecurityProperties = BTreeMap<Policy, bool>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AttestError {
    #[error("device is not in reset state")]
    NotInReset,
    #[error("device has not completed measured boot")]
    NotBooted,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PcrBank {
    registers: [Digest; PCR_COUNT],
}

impl Default for PcrBank {
    fn default() -> Self {
        Self { registers: [Digest::ZERO; PCR_COUNT] }
    }
}

impl PcrBank {
    pub fn get(&self, index: usize) -> Digest {
        self.registers[index]
    }

    pub fn extend(&mut self, index: usize, value: &Digest) {
        self.registers[index] = crypto::extend(&self.registers[index], value);
    }

    pub fn registers(&self) -> &[Digest; PCR_COUNT] {
        &self.registers
    }
}

/// One node of the configuration tree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PbaEvent {
    pub property: String,
    pub outcome_value: Digest,
}

impl PbaEvent {
    /// The vendor-defined value committed when `property` is found enabled
    /// or disabled during boot.
    pub fn new(property: &str, enabled: bool) -> Self {
        let state = if enabled { "enabled" } else { "disabled" };
        let outcome_value = crypto::hash(format!("pba/{property}/{state}").as_bytes());
        Self { property: property.to_owned(), outcome_value }
    }
}

/// The boot event sequence for a property set: the debug port state first,
/// then every enabled property in vocabulary order.
pub fn pba_events_for(properties: &SecurityProperties) -> Vec<PbaEvent> {
    let debug = properties.get(&Policy::Debug).copied().unwrap_or(false);
    let mut events = vec![PbaEvent::new(Policy::Debug.name(), debug)];
    events.extend(
        Policy::ALL
            .into_iter()
            .filter(|p| *p != Policy::Debug && properties.get(p).copied().unwrap_or(false))
            .map(|p| PbaEvent::new(p.name(), true)),
    );
    events
}

pub fn pba_leaf(events: &[PbaEvent]) -> Digest {
    events.iter().fold(Digest::ZERO, |pcr, ev| crypto::extend(&pcr, &ev.outcome_value))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BootState {
    Reset,
    Booted,
}

/// Vendor-signed table of acceptable configurations and firmware.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigWhitelist {
    pub leaves: BTreeMap<Digest, WhitelistEntry>,
    /// Firmware version to expected firmware digest.
    pub firmware: BTreeMap<String, Digest>,
    pub manufacturer_key: PublicKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<Signature>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WhitelistEntry {
    pub description: String,
    pub properties: SecurityProperties,
}

impl ConfigWhitelist {
    pub fn new(manufacturer_key: PublicKey) -> Self {
        Self { leaves: BTreeMap::new(), firmware: BTreeMap::new(), manufacturer_key, signature: None }
    }

    /// Whitelists the leaf reached by booting with `properties`.
    pub fn allow_configuration(&mut self, properties: &SecurityProperties) -> Digest {
        let leaf = pba_leaf(&pba_events_for(properties));
        let description = properties
            .iter()
            .map(|(p, on)| format!("{p}={on}"))
            .collect::<Vec<_>>()
            .join(",");
        self.leaves.insert(leaf, WhitelistEntry { description, properties: properties.clone() });
        self.signature = None;
        leaf
    }

    pub fn allow_firmware(&mut self, version: impl Into<String>, digest: Digest) {
        self.firmware.insert(version.into(), digest);
        self.signature = None;
    }

    fn signed_bytes(&self) -> Vec<u8> {
        let mut copy = self.clone();
        copy.signature = None;
        canonical_of(&copy)
    }

    pub fn sign(&mut self, vendor: &SigningKeyPair) {
        self.signature = Some(vendor.sign(&self.signed_bytes()));
    }

    pub fn verify_signature(&self, vendor_pub: &PublicKey) -> bool {
        self.signature.is_some_and(|s| crypto::verify(vendor_pub, &self.signed_bytes(), &s))
    }

    pub fn lookup(&self, leaf: &Digest) -> Option<&WhitelistEntry> {
        self.leaves.get(leaf)
    }
}

/// Grow-only list of revoked devices and firmware versions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevocationList {
    pub devices: BTreeSet<Digest>,
    pub firmware_versions: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<Signature>,
}

impl RevocationList {
    pub fn revoke_device(&mut self, device_id: Digest) {
        self.devices.insert(device_id);
        self.signature = None;
    }

    pub fn revoke_firmware(&mut self, version: impl Into<String>) {
        self.firmware_versions.insert(version.into());
        self.signature = None;
    }

    fn signed_bytes(&self) -> Vec<u8> {
        let mut copy = self.clone();
        copy.signature = None;
        canonical_of(&copy)
    }

    pub fn sign(&mut self, issuer: &SigningKeyPair) {
        self.signature = Some(issuer.sign(&self.signed_bytes()));
    }

    pub fn verify_signature(&self, issuer_pub: &PublicKey) -> bool {
        self.signature.is_some_and(|s| crypto::verify(issuer_pub, &self.signed_bytes(), &s))
    }

    /// True iff every entry of `older` is still present.
    pub fn extends(&self, older: &RevocationList) -> bool {
        self.devices.is_superset(&older.devices) && self.firmware_versions.is_superset(&older.firmware_versions)
    }

    pub fn is_revoked(&self, device_id: &Digest, firmware_version: &str) -> bool {
        self.devices.contains(device_id) || self.firmware_versions.contains(firmware_version)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FduConfig {
    #[serde(rename = "BAR", with = "hex_u64")]
    pub bar: u64,
    /// Echoed opaquely.
    #[serde(rename = "streamID")]
    pub stream_id: String,
    pub core_config: u32,
    pub memory: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FduSection {
    #[serde(rename = "FDU_Support")]
    pub fdu_support: bool,
    #[serde(rename = "Numbers")]
    pub numbers: u32,
    /// The partitions covered by this report.
    #[serde(rename = "Config")]
    pub config: Vec<FduConfig>,
}

mod hex_u64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:#x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(s.trim_start_matches("0x"), 16).map_err(serde::de::Error::custom)
    }
}

/// PCR bank rendered as `{"PCR0": .., .., "PCR23": ..}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Configuration(pub [Digest; PCR_COUNT]);

impl Serialize for Configuration {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let map: BTreeMap<String, &Digest> =
            self.0.iter().enumerate().map(|(i, d)| (format!("PCR{i}"), d)).collect();
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Configuration {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let map = BTreeMap::<String, Digest>::deserialize(d)?;
        let mut regs = [Digest::ZERO; PCR_COUNT];
        for (i, reg) in regs.iter_mut().enumerate() {
            *reg = *map
                .get(&format!("PCR{i}"))
                .ok_or_else(|| serde::de::Error::custom(format!("missing PCR{i}")))?;
        }
        if map.len() != PCR_COUNT {
            return Err(serde::de::Error::custom("unexpected PCR entries"));
        }
        Ok(Self(regs))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationReport {
    #[serde(rename = "DeviceID")]
    pub device_id: Digest,
    /// Key-agreement public key for the attested unit.
    #[serde(rename = "PublicKey")]
    pub public_key: PublicKey,
    /// Root-of-trust verification key; bound to the device by the certificate.
    #[serde(rename = "RotPublicKey")]
    pub rot_public: PublicKey,
    #[serde(rename = "Manufacturer")]
    pub manufacturer: String,
    #[serde(rename = "FirmwareVersion")]
    pub firmware_version: String,
    #[serde(rename = "DeviceType")]
    pub device_type: DeviceKind,
    #[serde(rename = "SecurityProperties")]
    pub security_properties: SecurityProperties,
    #[serde(rename = "Configuration")]
    pub configuration: Configuration,
    #[serde(rename = "PolicyQuote")]
    pub policy_quote: Signature,
    #[serde(rename = "FDU")]
    pub fdu: FduSection,
    #[serde(rename = "FirmwareQuote")]
    pub firmware_quote: Signature,
    #[serde(rename = "Certificate")]
    pub certificate: Signature,
    #[serde(rename = "Challenge")]
    pub challenge: Challenge,
}

fn certificate_body(device_id: &Digest, rot_public: &PublicKey, manufacturer: &str, device_type: DeviceKind) -> Vec<u8> {
    to_canonical_bytes(&json!({
        "DeviceID": device_id,
        "RotPublicKey": rot_public,
        "Manufacturer": manufacturer,
        "DeviceType": device_type,
    }))
}

fn firmware_quote_body(challenge: &Challenge, pcr0: &Digest, version: &str, device_id: &Digest) -> Vec<u8> {
    let mut out = b"tee-fabric/firmware-quote".to_vec();
    out.extend_from_slice(&challenge.0);
    out.extend_from_slice(&pcr0.0);
    out.extend_from_slice(&device_id.0);
    out.extend_from_slice(version.as_bytes());
    out
}

impl AttestationReport {
    /// Bytes covered by the policy quote: every field except the two quotes
    /// and the certificate, prefixed by the challenge.
    fn policy_quote_body(&self) -> Vec<u8> {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Value::Object(m) = &mut v {
            m.remove("PolicyQuote");
            m.remove("FirmwareQuote");
            m.remove("Certificate");
        }
        let mut out = b"tee-fabric/policy-quote".to_vec();
        out.extend_from_slice(&self.challenge.0);
        out.extend_from_slice(&to_canonical_bytes(&v));
        out
    }

    pub fn to_json(&self) -> Vec<u8> {
        canonical_of(self)
    }

    pub fn pcr(&self, index: usize) -> Digest {
        self.configuration.0[index]
    }
}

/// A device's root of trust together with its measured state.
pub struct DeviceRot {
    pub device_id: Digest,
    pub manufacturer: String,
    pub device_type: DeviceKind,
    pub firmware_version: String,
    pub properties: SecurityProperties,
    rot: SigningKeyPair,
    certificate: Signature,
    pcr: PcrBank,
    state: BootState,
}

impl std::fmt::Debug for DeviceRot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeviceRot")
            .field("device_id", &self.device_id)
            .field("device_type", &self.device_type)
            .field("state", &self.state)
            .finish()
    }
}

impl DeviceRot {
    /// Manufactures a device: a fresh RoT key certified by `manufacturer_key`.
    pub fn manufacture<R: Rng + ?Sized>(
        rng: &mut R,
        manufacturer: &str,
        manufacturer_key: &SigningKeyPair,
        device_type: DeviceKind,
        firmware_version: &str,
        properties: SecurityProperties,
    ) -> Self {
        let rot = SigningKeyPair::generate(rng);
        let device_id = crypto::hash_parts(&[b"tee-fabric/device-id", &rot.public().0]);
        let certificate =
            manufacturer_key.sign(&certificate_body(&device_id, &rot.public(), manufacturer, device_type));
        Self {
            device_id,
            manufacturer: manufacturer.to_owned(),
            device_type,
            firmware_version: firmware_version.to_owned(),
            properties,
            rot,
            certificate,
            pcr: PcrBank::default(),
            state: BootState::Reset,
        }
    }

    pub fn rot_public(&self) -> PublicKey {
        self.rot.public()
    }

    pub fn state(&self) -> BootState {
        self.state
    }

    pub fn pcr(&self) -> &PcrBank {
        &self.pcr
    }

    pub fn reset(&mut self) {
        self.pcr = PcrBank::default();
        self.state = BootState::Reset;
    }

    /// Extends PCR[0] with the firmware digest and PCR[23] with each event.
    pub fn measured_boot(&mut self, firmware_digest: &Digest, events: &[PbaEvent]) -> Result<&PcrBank, AttestError> {
        if self.state != BootState::Reset {
            return Err(AttestError::NotInReset);
        }
        self.pcr.extend(PCR_FIRMWARE, firmware_digest);
        for ev in events {
            self.pcr.extend(PCR_PBA, &ev.outcome_value);
        }
        self.state = BootState::Booted;
        Ok(&self.pcr)
    }

    pub fn generate_report(
        &self,
        challenge: &Challenge,
        public_key: PublicKey,
        fdu: FduSection,
    ) -> Result<AttestationReport, AttestError> {
        if self.state != BootState::Booted {
            return Err(AttestError::NotBooted);
        }
        let mut report = AttestationReport {
            device_id: self.device_id,
            public_key,
            rot_public: self.rot.public(),
            manufacturer: self.manufacturer.clone(),
            firmware_version: self.firmware_version.clone(),
            device_type: self.device_type,
            security_properties: self.properties.clone(),
            configuration: Configuration(*self.pcr.registers()),
            policy_quote: Signature([0; 64]),
            fdu,
            firmware_quote: Signature([0; 64]),
            certificate: self.certificate,
            challenge: *challenge,
        };
        report.policy_quote = self.rot.sign(&report.policy_quote_body());
        report.firmware_quote = self.rot.sign(&firmware_quote_body(
            challenge,
            &report.pcr(PCR_FIRMWARE),
            &report.firmware_version,
            &report.device_id,
        ));
        Ok(report)
    }

    /// Signs an arbitrary statement with the RoT key (used by SCs to vouch
    /// for the nodes behind them).
    pub fn sign_statement(&self, msg: &[u8]) -> Signature {
        self.rot.sign(msg)
    }
}

/// What a report or vouch must demonstrate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Requirement {
    pub device_type: DeviceKind,
    pub policies: BTreeSet<Policy>,
    pub cores: u32,
    pub memory: u64,
}

impl Requirement {
    pub fn security_controller() -> Self {
        Self { device_type: DeviceKind::SecurityController, policies: BTreeSet::new(), cores: 0, memory: 0 }
    }
}

impl From<&ResourceRequest> for Requirement {
    fn from(r: &ResourceRequest) -> Self {
        Self { device_type: r.resource_type, policies: r.policies.clone(), cores: r.cores, memory: r.memory }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, thiserror::Error)]
pub enum RejectReason {
    #[error("certificate does not verify under the manufacturer key")]
    BadCertificate,
    #[error("report does not answer the expected challenge")]
    Stale,
    #[error("quote signature invalid")]
    BadQuote,
    #[error("device or firmware revoked")]
    Revoked,
    #[error("measurement not whitelisted")]
    BadMeasurement,
    #[error("attested resources do not satisfy the request")]
    PolicyUnsatisfied,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

impl Verdict {
    pub fn is_accept(self) -> bool {
        self == Verdict::Accept
    }
}

/// Checks run in a fixed order; the first failure is reported.
pub fn verify_report(
    report: &AttestationReport,
    req: &Requirement,
    whitelist: &ConfigWhitelist,
    revocation: &RevocationList,
    challenge: &Challenge,
) -> Verdict {
    use RejectReason::*;
    let cert = certificate_body(&report.device_id, &report.rot_public, &report.manufacturer, report.device_type);
    if !crypto::verify(&whitelist.manufacturer_key, &cert, &report.certificate) {
        return Verdict::Reject(BadCertificate);
    }
    if report.challenge != *challenge {
        return Verdict::Reject(Stale);
    }
    let fw_body = firmware_quote_body(challenge, &report.pcr(PCR_FIRMWARE), &report.firmware_version, &report.device_id);
    if !crypto::verify(&report.rot_public, &report.policy_quote_body(), &report.policy_quote)
        || !crypto::verify(&report.rot_public, &fw_body, &report.firmware_quote)
    {
        return Verdict::Reject(BadQuote);
    }
    if revocation.is_revoked(&report.device_id, &report.firmware_version) {
        return Verdict::Reject(Revoked);
    }
    let expected_pcr0 = whitelist.firmware.get(&report.firmware_version).map(|d| crypto::extend(&Digest::ZERO, d));
    if expected_pcr0 != Some(report.pcr(PCR_FIRMWARE)) {
        return Verdict::Reject(BadMeasurement);
    }
    match whitelist.lookup(&report.pcr(PCR_PBA)) {
        Some(entry) if entry.properties == report.security_properties => {}
        _ => return Verdict::Reject(BadMeasurement),
    }
    if !satisfies(report.device_type, &report.security_properties, &report.fdu.config, req) {
        return Verdict::Reject(PolicyUnsatisfied);
    }
    if req.device_type != DeviceKind::SecurityController && !report.fdu.fdu_support {
        return Verdict::Reject(PolicyUnsatisfied);
    }
    Verdict::Accept
}

fn satisfies(ty: DeviceKind, props: &SecurityProperties, units: &[FduConfig], req: &Requirement) -> bool {
    if ty != req.device_type {
        return false;
    }
    if !req.policies.iter().all(|p| props.get(p).copied().unwrap_or(false)) {
        return false;
    }
    let cores: u64 = units.iter().map(|u| u64::from(u.core_config)).sum();
    let memory: u64 = units.iter().map(|u| u.memory).sum();
    cores >= u64::from(req.cores) && memory >= req.memory
}

/// An SC's signed statement about a node behind it, issued right after the
/// node was reset to factory state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeVouch {
    pub sc: ScId,
    pub node: NodeId,
    pub kind: DeviceKind,
    pub cores: u32,
    pub memory: u64,
    pub firmware_version: String,
    pub firmware_digest: Digest,
    pub challenge: Challenge,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedVouch {
    pub vouch: NodeVouch,
    pub signature: Signature,
}

impl SignedVouch {
    pub fn sign(vouch: NodeVouch, sc: &DeviceRot) -> Self {
        let signature = sc.sign_statement(&Self::body(&vouch));
        Self { vouch, signature }
    }

    fn body(vouch: &NodeVouch) -> Vec<u8> {
        let mut out = b"tee-fabric/node-vouch".to_vec();
        out.extend_from_slice(&canonical_of(vouch));
        out
    }
}

/// Verifies a vouch against an already accepted SC report.
pub fn verify_vouch(
    v: &SignedVouch,
    sc_report: &AttestationReport,
    req: &Requirement,
    whitelist: &ConfigWhitelist,
    revocation: &RevocationList,
    challenge: &Challenge,
) -> Verdict {
    use RejectReason::*;
    if v.vouch.challenge != *challenge {
        return Verdict::Reject(Stale);
    }
    if !crypto::verify(&sc_report.rot_public, &SignedVouch::body(&v.vouch), &v.signature) {
        return Verdict::Reject(BadQuote);
    }
    if revocation.firmware_versions.contains(&v.vouch.firmware_version) {
        return Verdict::Reject(Revoked);
    }
    if whitelist.firmware.get(&v.vouch.firmware_version) != Some(&v.vouch.firmware_digest) {
        return Verdict::Reject(BadMeasurement);
    }
    // Non-TEE nodes enforce no security properties, so any requested policy fails.
    let unit = FduConfig { bar: 0, stream_id: String::new(), core_config: v.vouch.cores, memory: v.vouch.memory };
    if !satisfies(v.vouch.kind, &SecurityProperties::new(), &[unit], req) {
        return Verdict::Reject(PolicyUnsatisfied);
    }
    Verdict::Accept
}

/// Tenant-side challenge bookkeeping: every challenge is unique and can be
/// consumed exactly once.
#[derive(Debug, Default, Clone)]
pub struct ChallengeBook {
    outstanding: BTreeSet<Challenge>,
    spent: BTreeSet<Challenge>,
}

impl ChallengeBook {
    pub fn issue<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Challenge {
        loop {
            let mut c = [0u8; 32];
            rng.fill_bytes(&mut c);
            let c = Digest(c);
            if !self.spent.contains(&c) && self.outstanding.insert(c) {
                return c;
            }
        }
    }

    /// Marks `c` used. False if it was never issued or was already consumed.
    pub fn consume(&mut self, c: &Challenge) -> bool {
        if self.outstanding.remove(c) {
            self.spent.insert(*c);
            true
        } else {
            false
        }
    }

    pub fn is_outstanding(&self, c: &Challenge) -> bool {
        self.outstanding.contains(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn props(list: &[(Policy, bool)]) -> SecurityProperties {
        list.iter().copied().collect()
    }

    struct Fixture {
        rng: ChaCha20Rng,
        manufacturer: SigningKeyPair,
        whitelist: ConfigWhitelist,
        revocation: RevocationList,
        firmware: Digest,
    }

    fn fixture() -> Fixture {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let manufacturer = SigningKeyPair::generate(&mut rng);
        let mut whitelist = ConfigWhitelist::new(manufacturer.public());
        let firmware = crypto::hash(b"firmware/ai-1.0");
        whitelist.allow_firmware("1.0", firmware);
        whitelist.allow_configuration(&props(&[(Policy::Debug, false), (Policy::MemIsolation, true)]));
        Fixture { rng, manufacturer, whitelist, revocation: RevocationList::default(), firmware }
    }

    fn booted(fx: &mut Fixture, properties: SecurityProperties) -> DeviceRot {
        let mut dev = DeviceRot::manufacture(
            &mut fx.rng,
            "Manuf1",
            &fx.manufacturer,
            DeviceKind::AiAccelerator,
            "1.0",
            properties.clone(),
        );
        dev.measured_boot(&fx.firmware, &pba_events_for(&properties)).unwrap();
        dev
    }

    fn fdu(cores: u32, memory: u64) -> FduSection {
        FduSection {
            fdu_support: true,
            numbers: 4,
            config: vec![FduConfig { bar: 0xffff_0000, stream_id: "0xc1".into(), core_config: cores, memory }],
        }
    }

    fn req(policies: &[Policy]) -> Requirement {
        Requirement {
            device_type: DeviceKind::AiAccelerator,
            policies: policies.iter().copied().collect(),
            cores: 4,
            memory: 1 << 20,
        }
    }

    // Leaf values computed independently with Python's hashlib.sha3_256.
    #[test]
    fn four_leaf_tree_matches_reference() {
        let leaf = |debug: bool, iso: Policy| pba_leaf(&pba_events_for(&props(&[(Policy::Debug, debug), (iso, true)])));
        let expected = [
            (false, Policy::CoreIsolation, "f59f0c3a6e4dc660d9a63b8d251d447ede4c1e4f7b5e450d46aaef6fb10e6b24"),
            (false, Policy::MemIsolation, "861843134d9f55ece1c51185360e303cfb43ac53cf908b7595df0cc4592d4be6"),
            (true, Policy::CoreIsolation, "18f8229dc3ec9f8894b1211d3ffccf8ffed5593f4da5be36398c2f0c8fa76c50"),
            (true, Policy::MemIsolation, "88e94eee551239c974f5ec5ac0d45c7054ffa6186b56224f8032eb091111f260"),
        ];
        let mut seen = BTreeSet::new();
        for (debug, iso, hex) in expected {
            let l = leaf(debug, iso);
            assert_eq!(l.to_hex(), hex);
            seen.insert(l);
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn empty_boot_leaves_pba_register_zero() {
        let mut fx = fixture();
        let mut dev = DeviceRot::manufacture(
            &mut fx.rng,
            "M",
            &fx.manufacturer,
            DeviceKind::Cpu,
            "1.0",
            SecurityProperties::new(),
        );
        let bank = dev.measured_boot(&fx.firmware, &[]).unwrap();
        assert_eq!(bank.get(PCR_PBA), Digest::ZERO);
        assert_eq!(dev.measured_boot(&fx.firmware, &[]).unwrap_err(), AttestError::NotInReset);
    }

    #[test]
    fn pba_prefix_deviation_changes_leaf_exhaustively() {
        // Every sequence of length <= 6 over a 2x2 event alphabet.
        let alphabet = [
            PbaEvent::new("debug", true),
            PbaEvent::new("debug", false),
            PbaEvent::new("coreIsolation", true),
            PbaEvent::new("memIsolation", true),
        ];
        let mut leaves = BTreeMap::new();
        let mut stack: Vec<Vec<usize>> = vec![vec![]];
        while let Some(seq) = stack.pop() {
            let events: Vec<PbaEvent> = seq.iter().map(|&i| alphabet[i].clone()).collect();
            let leaf = pba_leaf(&events);
            assert_eq!(leaf, pba_leaf(&events));
            if let Some(prev) = leaves.insert(leaf, seq.clone()) {
                panic!("{prev:?} and {seq:?} share a leaf");
            }
            if seq.len() < 6 {
                for i in 0..alphabet.len() {
                    let mut next = seq.clone();
                    next.push(i);
                    stack.push(next);
                }
            }
        }
        assert_eq!(leaves.len(), 1 + 4 + 16 + 64 + 256 + 1024 + 4096);
    }

    #[test]
    fn honest_report_accepts() {
        let mut fx = fixture();
        let dev = booted(&mut fx, props(&[(Policy::Debug, false), (Policy::MemIsolation, true)]));
        let mut book = ChallengeBook::default();
        let ch = book.issue(&mut fx.rng);
        let r = dev.generate_report(&ch, PublicKey([7; 32]), fdu(4, 1 << 20)).unwrap();
        assert_eq!(verify_report(&r, &req(&[Policy::MemIsolation]), &fx.whitelist, &fx.revocation, &ch), Verdict::Accept);
        let back: AttestationReport = serde_json::from_slice(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn unbooted_device_cannot_report() {
        let mut fx = fixture();
        let dev = DeviceRot::manufacture(&mut fx.rng, "M", &fx.manufacturer, DeviceKind::Cpu, "1.0", SecurityProperties::new());
        assert_eq!(
            dev.generate_report(&Digest::ZERO, PublicKey([0; 32]), fdu(1, 1)).unwrap_err(),
            AttestError::NotBooted
        );
    }

    #[test]
    fn rejections() {
        let mut fx = fixture();
        let p = props(&[(Policy::Debug, false), (Policy::MemIsolation, true)]);
        let dev = booted(&mut fx, p.clone());
        let mut book = ChallengeBook::default();
        let old = book.issue(&mut fx.rng);
        let fresh = book.issue(&mut fx.rng);
        let stale = dev.generate_report(&old, PublicKey([7; 32]), fdu(4, 1 << 20)).unwrap();
        let r = |f: &Fixture, report: &AttestationReport, rq: &Requirement| {
            verify_report(report, rq, &f.whitelist, &f.revocation, &fresh)
        };
        assert_eq!(r(&fx, &stale, &req(&[])), Verdict::Reject(RejectReason::Stale));

        let ok = dev.generate_report(&fresh, PublicKey([7; 32]), fdu(4, 1 << 20)).unwrap();
        assert_eq!(r(&fx, &ok, &req(&[Policy::CoreIsolation])), Verdict::Reject(RejectReason::PolicyUnsatisfied));
        let mut big = req(&[]);
        big.memory = 2 << 20;
        assert_eq!(r(&fx, &ok, &big), Verdict::Reject(RejectReason::PolicyUnsatisfied));

        let mut revoked = fx.revocation.clone();
        revoked.revoke_device(dev.device_id);
        assert!(revoked.extends(&fx.revocation));
        assert_eq!(
            verify_report(&ok, &req(&[]), &fx.whitelist, &revoked, &fresh),
            Verdict::Reject(RejectReason::Revoked)
        );

        let tampered_fw = crypto::hash(b"firmware/evil");
        let mut bad = DeviceRot::manufacture(&mut fx.rng, "Manuf1", &fx.manufacturer, DeviceKind::AiAccelerator, "1.0", p.clone());
        bad.measured_boot(&tampered_fw, &pba_events_for(&p)).unwrap();
        let br = bad.generate_report(&fresh, PublicKey([7; 32]), fdu(4, 1 << 20)).unwrap();
        assert_eq!(r(&fx, &br, &req(&[])), Verdict::Reject(RejectReason::BadMeasurement));

        let rogue_maker = SigningKeyPair::from_seed([1; 32]);
        let mut forged = DeviceRot::manufacture(&mut fx.rng, "Manuf1", &rogue_maker, DeviceKind::AiAccelerator, "1.0", p.clone());
        forged.measured_boot(&fx.firmware, &pba_events_for(&p)).unwrap();
        let fr = forged.generate_report(&fresh, PublicKey([7; 32]), fdu(4, 1 << 20)).unwrap();
        assert_eq!(r(&fx, &fr, &req(&[])), Verdict::Reject(RejectReason::BadCertificate));
    }

    #[test]
    fn mutating_any_boot_event_is_bad_measurement() {
        let mut fx = fixture();
        let p = props(&[(Policy::Debug, false), (Policy::MemIsolation, true)]);
        let honest = pba_events_for(&p);
        let mut book = ChallengeBook::default();
        let ch = book.issue(&mut fx.rng);
        for i in 0..honest.len() {
            for mutant in [PbaEvent::new(&honest[i].property, honest[i].outcome_value == PbaEvent::new(&honest[i].property, false).outcome_value), PbaEvent::new("coreIsolation", true)] {
                let mut events = honest.clone();
                events[i] = mutant;
                let mut dev = DeviceRot::manufacture(&mut fx.rng, "Manuf1", &fx.manufacturer, DeviceKind::AiAccelerator, "1.0", p.clone());
                dev.measured_boot(&fx.firmware, &events).unwrap();
                assert_ne!(dev.pcr().get(PCR_PBA), pba_leaf(&honest));
                let rep = dev.generate_report(&ch, PublicKey([7; 32]), fdu(4, 1 << 20)).unwrap();
                assert_eq!(
                    verify_report(&rep, &req(&[]), &fx.whitelist, &fx.revocation, &ch),
                    Verdict::Reject(RejectReason::BadMeasurement)
                );
            }
        }
    }

    #[test]
    fn every_field_mutation_rejects() {
        let mut fx = fixture();
        let dev = booted(&mut fx, props(&[(Policy::Debug, false), (Policy::MemIsolation, true)]));
        let ch = ChallengeBook::default().issue(&mut fx.rng);
        let good = dev.generate_report(&ch, PublicKey([7; 32]), fdu(4, 1 << 20)).unwrap();
        let base = serde_json::to_value(&good).unwrap();
        let obj = base.as_object().unwrap();
        let flip_hex = |s: &str| {
            let mut b = hex::decode(s).unwrap();
            b[0] ^= 1;
            Value::String(hex::encode(b))
        };
        for key in obj.keys() {
            let mut v = base.clone();
            let field = v.get_mut(key).unwrap();
            match key.as_str() {
                "Manufacturer" | "FirmwareVersion" => *field = json!("other"),
                "DeviceType" => *field = json!("GPU"),
                "SecurityProperties" => *field = json!({"debug": true, "memIsolation": true}),
                "Configuration" => field["PCR5"] = flip_hex(field["PCR5"].as_str().unwrap()),
                "FDU" => field["Config"][0]["core_config"] = json!(5),
                _ => *field = flip_hex(field.as_str().unwrap()),
            }
            let mutated: AttestationReport = serde_json::from_value(v).unwrap();
            assert!(
                !verify_report(&mutated, &req(&[]), &fx.whitelist, &fx.revocation, &ch).is_accept(),
                "mutation of {key} accepted"
            );
        }
    }

    #[test]
    fn challenges_are_unique_and_single_use() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut book = ChallengeBook::default();
        let a = book.issue(&mut rng);
        let b = book.issue(&mut rng);
        assert_ne!(a, b);
        assert!(book.consume(&a));
        assert!(!book.consume(&a));
        let again: Vec<Challenge> = {
            let mut rng = ChaCha20Rng::seed_from_u64(3);
            let mut book = ChallengeBook::default();
            vec![book.issue(&mut rng), book.issue(&mut rng)]
        };
        assert_eq!(again, vec![a, b]);
    }

    #[test]
    fn whitelist_and_revocation_signatures() {
        let mut fx = fixture();
        let vendor = SigningKeyPair::generate(&mut fx.rng);
        fx.whitelist.sign(&vendor);
        assert!(fx.whitelist.verify_signature(&vendor.public()));
        let mut tampered = fx.whitelist.clone();
        tampered.allow_firmware("9.9", Digest::ZERO);
        assert!(!tampered.verify_signature(&vendor.public()));
        let mut rl = RevocationList::default();
        rl.revoke_firmware("0.9");
        rl.sign(&vendor);
        assert!(rl.verify_signature(&vendor.public()));
        assert!(!rl.verify_signature(&fx.manufacturer.public()));
    }
}
