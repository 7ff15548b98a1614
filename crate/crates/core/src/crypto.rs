// SPDX-License-Identifier: Apache-2.0

//! Cryptographic primitives behind one interface.
//!
//! Two AEAD backends share a single envelope layout: AES-256-GCM for
//! production runs and a SHA3-keyed pseudo-cipher whose output is identical
//! on every platform. Hashing is SHA3-256, signatures are Ed25519 and key
//! agreement is X25519 for both.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::{Arc, Weak};

use aes_gcm::aead::{AeadInOut, KeyInit};
use aes_gcm::Aes256Gcm;
use ed25519_dalek::Signer as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha3::{Digest as _, Sha3_256};
use zeroize::{Zeroize, ZeroizeOnDrop};

use crate::ids::{JobId, PrincipalId};

pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    #[error("nonce already used under this key")]
    NonceReuse,
    #[error("authentication failed")]
    AuthFailure,
    #[error("replayed or reordered envelope (seq {seq} <= {last})")]
    ReplayDetected { seq: u64, last: u64 },
    #[error("invalid public key")]
    InvalidPublicKey,
    #[error("malformed envelope: {0}")]
    Malformed(&'static str),
}

macro_rules! hex_bytes {
    ($name:ident, $len:expr) => {
        impl $name {
            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            /// Parses lowercase or uppercase hex, with or without a `0x` prefix.
            pub fn from_hex(s: &str) -> Option<Self> {
                let s = s.strip_prefix("0x").unwrap_or(s);
                let v = hex::decode(s).ok()?;
                Some(Self(v.try_into().ok()?))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let h = self.to_hex();
                write!(f, concat!(stringify!($name), "({}..)"), &h[..8])
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::from_hex(&s).ok_or_else(|| {
                    serde::de::Error::custom(concat!("expected ", $len, "-byte hex ", stringify!($name)))
                })
            }
        }
    };
}

/// A 32-byte SHA3-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);
hex_bytes!(Digest, 32);

impl Digest {
    pub const ZERO: Digest = Digest([0; DIGEST_LEN]);

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }
}

pub fn hash(data: &[u8]) -> Digest {
    hash_parts(&[data])
}

pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha3_256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// PCR extension: `hash(pcr || value)`.
pub fn extend(pcr: &Digest, value: &Digest) -> Digest {
    hash_parts(&[&pcr.0, &value.0])
}

/// A 256-bit secret. Zeroized on drop and deliberately not serializable.
#[derive(Clone, PartialEq, Eq)]
pub struct Key256([u8; KEY_LEN]);

impl Drop for Key256 {
    fn drop(&mut self) {
        self.0.zeroize();
    }
}

impl ZeroizeOnDrop for Key256 {}

impl Key256 {
    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut k = [0u8; KEY_LEN];
        rng.fill_bytes(&mut k);
        Self(k)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    /// Non-secret identifier, safe to log.
    pub fn fingerprint(&self) -> Digest {
        hash_parts(&[b"tee-fabric/key-fp", &self.0])
    }
}

impl fmt::Debug for Key256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Key256(<redacted>)")
    }
}

struct KeyCell {
    job: Option<JobId>,
    key: Key256,
}

/// Shared, registry-tracked handle to a key.
///
/// Cloning shares the same underlying secret; the secret is zeroized when
/// the last handle is dropped.
#[derive(Clone)]
pub struct KeyHandle(Arc<KeyCell>);

impl KeyHandle {
    pub fn key(&self) -> &Key256 {
        &self.0.key
    }

    pub fn job(&self) -> Option<JobId> {
        self.0.job
    }
}

impl fmt::Debug for KeyHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyHandle({:?})", self.0.job)
    }
}

/// Registry of every key handle minted in a world, used to prove that no
/// key for a released job is still reachable.
#[derive(Default)]
pub struct KeyRegistry {
    minted: Vec<Weak<KeyCell>>,
}

impl KeyRegistry {
    pub fn mint(&mut self, job: Option<JobId>, key: Key256) -> KeyHandle {
        let cell = Arc::new(KeyCell { job, key });
        self.minted.push(Arc::downgrade(&cell));
        KeyHandle(cell)
    }

    /// Number of distinct keys for `job` still held by some live object.
    pub fn live_for(&mut self, job: JobId) -> usize {
        self.minted.retain(|w| w.strong_count() > 0);
        self.minted
            .iter()
            .filter_map(Weak::upgrade)
            .filter(|c| c.job == Some(job))
            .count()
    }

    pub fn live_total(&mut self) -> usize {
        self.minted.retain(|w| w.strong_count() > 0);
        self.minted.len()
    }
}

impl fmt::Debug for KeyRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyRegistry({} minted)", self.minted.len())
    }
}

/// Channel id (4 bytes, big-endian) followed by a 64-bit counter.
pub fn make_nonce(channel: u32, counter: u64) -> [u8; NONCE_LEN] {
    let mut n = [0u8; NONCE_LEN];
    n[..4].copy_from_slice(&channel.to_be_bytes());
    n[4..].copy_from_slice(&counter.to_be_bytes());
    n
}

/// Authenticated-encryption wrapper for job data on open links.
#[derive(Clone, PartialEq, Eq)]
pub struct Envelope {
    pub nonce: [u8; NONCE_LEN],
    pub aad: Vec<u8>,
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl fmt::Debug for Envelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Envelope")
            .field("nonce", &hex::encode(self.nonce))
            .field("aad_len", &self.aad.len())
            .field("ct_len", &self.ciphertext.len())
            .finish()
    }
}

impl Envelope {
    /// `nonce(12) || aad_len(4, BE) || aad || ct_len(4, BE) || ciphertext || tag(16)`
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(NONCE_LEN + 8 + self.aad.len() + self.ciphertext.len() + TAG_LEN);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&(self.aad.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.aad);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self, CryptoError> {
        fn take<'a>(b: &mut &'a [u8], n: usize) -> Result<&'a [u8], CryptoError> {
            if b.len() < n {
                return Err(CryptoError::Malformed("truncated"));
            }
            let (head, tail) = b.split_at(n);
            *b = tail;
            Ok(head)
        }
        let mut rest = bytes;
        let nonce: [u8; NONCE_LEN] = take(&mut rest, NONCE_LEN)?.try_into().unwrap();
        let aad_len = u32::from_be_bytes(take(&mut rest, 4)?.try_into().unwrap()) as usize;
        let aad = take(&mut rest, aad_len)?.to_vec();
        let ct_len = u32::from_be_bytes(take(&mut rest, 4)?.try_into().unwrap()) as usize;
        let ciphertext = take(&mut rest, ct_len)?.to_vec();
        let tag: [u8; TAG_LEN] = take(&mut rest, TAG_LEN)?.try_into().unwrap();
        if !rest.is_empty() {
            return Err(CryptoError::Malformed("trailing bytes"));
        }
        Ok(Self { nonce, aad, ciphertext, tag })
    }

    pub fn header(&self) -> Result<AadHeader, CryptoError> {
        AadHeader::decode(&self.aad)
    }

    pub fn wire_len(&self) -> usize {
        NONCE_LEN + 8 + self.aad.len() + self.ciphertext.len() + TAG_LEN
    }
}

/// Structured prefix of every envelope's associated data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AadHeader {
    pub job: JobId,
    pub sender: PrincipalId,
    pub seq: u64,
    /// Opaque binding context, e.g. a manifest id.
    pub context: Vec<u8>,
}

impl AadHeader {
    const FIXED_LEN: usize = 4 + 9 + 8;

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::FIXED_LEN + self.context.len());
        out.extend_from_slice(&self.job.0.to_be_bytes());
        out.extend_from_slice(&self.sender.encode());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.context);
        out
    }

    pub fn decode(aad: &[u8]) -> Result<Self, CryptoError> {
        if aad.len() < Self::FIXED_LEN {
            return Err(CryptoError::Malformed("short aad"));
        }
        let job = JobId(u32::from_be_bytes(aad[0..4].try_into().unwrap()));
        let sender = PrincipalId::decode(aad[4..13].try_into().unwrap())
            .ok_or(CryptoError::Malformed("bad sender"))?;
        let seq = u64::from_be_bytes(aad[13..21].try_into().unwrap());
        Ok(Self { job, sender, seq, context: aad[21..].to_vec() })
    }
}

/// AEAD backend selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// AES-256-GCM.
    Production,
    /// Keyed pseudo-cipher (ChaCha20 keystream, SHA3 tag); same envelope
    /// layout, fully portable.
    #[default]
    Deterministic,
}

impl Suite {
    /// Stateless seal. Callers own nonce uniqueness; [`SendChannel`] enforces it.
    pub fn seal(self, key: &Key256, nonce: [u8; NONCE_LEN], aad: &[u8], plaintext: &[u8]) -> Envelope {
        let mut buf = plaintext.to_vec();
        let tag = match self {
            Suite::Production => {
                let cipher = Aes256Gcm::new_from_slice(key.as_bytes()).expect("32-byte key");
                let n = aes_gcm::Nonce::from(nonce);
                let tag = cipher
                    .encrypt_inout_detached(&n, aad, buf.as_mut_slice().into())
                    .expect("plaintext within AES-GCM limits");
                let mut t = [0u8; TAG_LEN];
                t.copy_from_slice(tag.as_slice());
                t
            }
            Suite::Deterministic => {
                apply_keystream(key, &nonce, &mut buf);
                pseudo_tag(key, &nonce, aad, &buf)
            }
        };
        Envelope { nonce, aad: aad.to_vec(), ciphertext: buf, tag }
    }

    pub fn open(self, key: &Key256, env: &Envelope) -> Result<Vec<u8>, CryptoError> {
        let mut buf = env.ciphertext.clone();
        match self {
            Suite::Production => {
                let cipher = Aes256Gcm::new_from_slice(key.as_bytes()).expect("32-byte key");
                let n = aes_gcm::Nonce::from(env.nonce);
                let tag = aes_gcm::Tag::from(env.tag);
                cipher
                    .decrypt_inout_detached(&n, &env.aad, buf.as_mut_slice().into(), &tag)
                    .map_err(|_| CryptoError::AuthFailure)?;
            }
            Suite::Deterministic => {
                let expected = pseudo_tag(key, &env.nonce, &env.aad, &env.ciphertext);
                if expected != env.tag {
                    return Err(CryptoError::AuthFailure);
                }
                apply_keystream(key, &env.nonce, &mut buf);
            }
        }
        Ok(buf)
    }
}

/// ChaCha20 stream keyed by a hash of the key and nonce.
fn apply_keystream(key: &Key256, nonce: &[u8; NONCE_LEN], buf: &mut [u8]) {
    let mut stream = ChaCha20Rng::from_seed(hash_parts(&[b"tf-ks", key.as_bytes(), nonce]).0);
    let mut block = [0u8; 256];
    for chunk in buf.chunks_mut(block.len()) {
        stream.fill_bytes(&mut block[..chunk.len()]);
        for (b, k) in chunk.iter_mut().zip(&block) {
            *b ^= k;
        }
    }
}

fn pseudo_tag(key: &Key256, nonce: &[u8; NONCE_LEN], aad: &[u8], ct: &[u8]) -> [u8; TAG_LEN] {
    let d = hash_parts(&[
        b"tf-tag",
        key.as_bytes(),
        nonce,
        &(aad.len() as u64).to_be_bytes(),
        aad,
        ct,
    ]);
    let mut t = [0u8; TAG_LEN];
    t.copy_from_slice(&d.0[..TAG_LEN]);
    t
}

/// Sending half of a one-way channel under a (possibly shared) key.
///
/// Channel ids are unique within a world, so nonces never repeat under a
/// key even when many senders share it.
pub struct SendChannel {
    suite: Suite,
    key: KeyHandle,
    channel: u32,
    job: JobId,
    sender: PrincipalId,
    next_seq: u64,
    used: BTreeSet<[u8; NONCE_LEN]>,
}

impl SendChannel {
    pub fn new(suite: Suite, key: KeyHandle, channel: u32, job: JobId, sender: PrincipalId) -> Self {
        Self { suite, key, channel, job, sender, next_seq: 1, used: BTreeSet::new() }
    }

    pub fn key(&self) -> &KeyHandle {
        &self.key
    }

    pub fn seal_next(&mut self, context: &[u8], plaintext: &[u8]) -> Envelope {
        let seq = self.next_seq;
        let nonce = make_nonce(self.channel, seq);
        self.seal_at(nonce, seq, context, plaintext).expect("counter nonces are fresh")
    }

    /// Seal with an explicit nonce, refusing reuse.
    pub fn seal_at(
        &mut self,
        nonce: [u8; NONCE_LEN],
        seq: u64,
        context: &[u8],
        plaintext: &[u8],
    ) -> Result<Envelope, CryptoError> {
        if !self.used.insert(nonce) {
            return Err(CryptoError::NonceReuse);
        }
        self.next_seq = self.next_seq.max(seq + 1);
        let aad = AadHeader { job: self.job, sender: self.sender, seq, context: context.to_vec() };
        Ok(self.suite.seal(self.key.key(), nonce, &aad.encode(), plaintext))
    }
}

impl fmt::Debug for SendChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SendChannel({} -> #{}, seq {})", self.sender, self.channel, self.next_seq)
    }
}

/// Receiver-side replay protection: per (job, sender, channel), sequence
/// numbers must strictly increase. The channel id is the authenticated nonce
/// prefix, so one sender may hold several keyed channels to the same receiver.
#[derive(Debug, Default, Clone)]
pub struct ReplayGuard {
    last: BTreeMap<(JobId, PrincipalId, u32), u64>,
}

impl ReplayGuard {
    /// Authenticate, then enforce sequence monotonicity. State is only
    /// advanced for authentic envelopes.
    pub fn open(
        &mut self,
        suite: Suite,
        key: &Key256,
        env: &Envelope,
    ) -> Result<(AadHeader, Vec<u8>), CryptoError> {
        let header = env.header()?;
        let plaintext = suite.open(key, env)?;
        let channel = u32::from_be_bytes(env.nonce[..4].try_into().unwrap());
        let slot = self.last.entry((header.job, header.sender, channel)).or_insert(0);
        if header.seq <= *slot {
            return Err(CryptoError::ReplayDetected { seq: header.seq, last: *slot });
        }
        *slot = header.seq;
        Ok((header, plaintext))
    }

    pub fn forget_job(&mut self, job: JobId) {
        self.last.retain(|(j, _, _), _| *j != job);
    }
}

/// 32-byte public key (Ed25519 verifying key or X25519 point).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey(pub [u8; 32]);
hex_bytes!(PublicKey, 32);

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);
hex_bytes!(Signature, 64);

/// Ed25519 signing identity.
pub struct SigningKeyPair {
    inner: ed25519_dalek::SigningKey,
}

impl SigningKeyPair {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self { inner: ed25519_dalek::SigningKey::from_bytes(&seed) }
    }

    pub fn generate<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let kp = Self::from_seed(seed);
        seed.zeroize();
        kp
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.inner.verifying_key().to_bytes())
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        Signature(self.inner.sign(msg).to_bytes())
    }
}

impl fmt::Debug for SigningKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SigningKeyPair({:?})", self.public())
    }
}

/// Never panics: malformed keys or signatures verify as false.
pub fn verify(public: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&public.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    vk.verify_strict(msg, &sig).is_ok()
}

/// X25519 key-agreement identity.
pub struct DhKeyPair {
    secret: x25519_dalek::StaticSecret,
    public: PublicKey,
}

impl DhKeyPair {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        let secret = x25519_dalek::StaticSecret::from(seed);
        let public = PublicKey(x25519_dalek::PublicKey::from(&secret).to_bytes());
        Self { secret, public }
    }

    pub fn generate<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let kp = Self::from_seed(seed);
        seed.zeroize();
        kp
    }

    pub fn public(&self) -> PublicKey {
        self.public
    }

    /// Symmetric: `a.derive_shared(b.public) == b.derive_shared(a.public)`.
    pub fn derive_shared(&self, peer_public: &[u8]) -> Result<Key256, CryptoError> {
        let bytes: [u8; 32] = peer_public.try_into().map_err(|_| CryptoError::InvalidPublicKey)?;
        let shared = self.secret.diffie_hellman(&x25519_dalek::PublicKey::from(bytes));
        if !shared.was_contributory() {
            return Err(CryptoError::InvalidPublicKey);
        }
        let d = hash_parts(&[b"tee-fabric/dh", shared.as_bytes()]);
        Ok(Key256::from_bytes(d.0))
    }
}

impl fmt::Debug for DhKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DhKeyPair({:?})", self.public)
    }
}
