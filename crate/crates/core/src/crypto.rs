//! Digests, signatures and message certificates.
//!
//! Two signature schemes are available. `Ed25519` is a real public-key scheme.
//! `KeyedDigest` computes HMAC-SHA256 under a per-process secret and is meant for
//! fast deterministic simulation: the keyring holds the secrets, so it offers no
//! unforgeability against whoever owns the keyring.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ed25519_dalek::{Signer as _, Verifier as _};
use hmac::{Hmac, Mac};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use crate::view::{ProcessId, View, DEFAULT_CHANGE_CAP};
use crate::wire::{Reader, WireResult};

/// A SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if s.is_human_readable() {
            s.serialize_str(&self.to_hex())
        } else {
            self.0.serialize(s)
        }
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Digest, D::Error> {
        if d.is_human_readable() {
            let s = String::deserialize(d)?;
            let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
            let arr: [u8; 32] = bytes.try_into().map_err(|_| serde::de::Error::custom("digest must be 32 bytes"))?;
            Ok(Digest(arr))
        } else {
            Ok(Digest(<[u8; 32]>::deserialize(d)?))
        }
    }
}

pub fn digest(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignatureScheme {
    #[default]
    KeyedDigest,
    Ed25519,
}

/// A signature together with the identity it claims.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub signer: ProcessId,
    pub bytes: Vec<u8>,
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.bytes.len().min(6);
        write!(f, "Sig({}, {})", self.signer, hex::encode(&self.bytes[..n]))
    }
}

#[derive(Clone)]
enum Secret {
    Ed25519(ed25519_dalek::SigningKey),
    Keyed([u8; 32]),
}

#[derive(Clone)]
enum Public {
    Ed25519(ed25519_dalek::VerifyingKey),
    Keyed([u8; 32]),
}

/// The private signing key of one process.
#[derive(Clone)]
pub struct SigningKey {
    id: ProcessId,
    secret: Secret,
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SigningKey({})", self.id)
    }
}

type HmacSha256 = Hmac<Sha256>;

impl SigningKey {
    pub fn id(&self) -> ProcessId {
        self.id
    }

    pub fn sign(&self, payload: &[u8]) -> Signature {
        let bytes = match &self.secret {
            Secret::Ed25519(k) => k.sign(payload).to_bytes().to_vec(),
            Secret::Keyed(k) => {
                let mut mac = HmacSha256::new_from_slice(k).expect("any key length");
                mac.update(payload);
                mac.finalize().into_bytes().to_vec()
            }
        };
        Signature { signer: self.id, bytes }
    }
}

/// Verification material for every process in the universe.
#[derive(Clone)]
pub struct Keyring {
    scheme: SignatureScheme,
    keys: BTreeMap<ProcessId, Public>,
}

impl fmt::Debug for Keyring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Keyring")
            .field("scheme", &self.scheme)
            .field("processes", &self.keys.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Keyring {
    /// Derives one key per process from `seed`. The same inputs always give the same keys.
    pub fn generate(
        scheme: SignatureScheme,
        ids: impl IntoIterator<Item = ProcessId>,
        seed: u64,
    ) -> (Keyring, BTreeMap<ProcessId, SigningKey>) {
        let mut keys = BTreeMap::new();
        let mut secrets = BTreeMap::new();
        for id in ids {
            let mut h = Sha256::new();
            h.update(b"dbrb-key-v1");
            h.update(seed.to_be_bytes());
            h.update(id.0.to_be_bytes());
            let raw: [u8; 32] = h.finalize().into();
            let (secret, public) = match scheme {
                SignatureScheme::Ed25519 => {
                    let sk = ed25519_dalek::SigningKey::from_bytes(&raw);
                    let vk = sk.verifying_key();
                    (Secret::Ed25519(sk), Public::Ed25519(vk))
                }
                SignatureScheme::KeyedDigest => (Secret::Keyed(raw), Public::Keyed(raw)),
            };
            keys.insert(id, public);
            secrets.insert(id, SigningKey { id, secret });
        }
        (Keyring { scheme, keys }, secrets)
    }

    pub fn scheme(&self) -> SignatureScheme {
        self.scheme
    }

    pub fn contains(&self, p: ProcessId) -> bool {
        self.keys.contains_key(&p)
    }

    /// `sig` was produced by `signer` over exactly `payload`.
    pub fn verify(&self, signer: ProcessId, payload: &[u8], sig: &Signature) -> bool {
        if sig.signer != signer {
            return false;
        }
        match self.keys.get(&signer) {
            Some(Public::Ed25519(vk)) => {
                let Ok(bytes) = <[u8; 64]>::try_from(sig.bytes.as_slice()) else {
                    return false;
                };
                vk.verify(payload, &ed25519_dalek::Signature::from_bytes(&bytes)).is_ok()
            }
            Some(Public::Keyed(k)) => {
                let mut mac = HmacSha256::new_from_slice(k).expect("any key length");
                mac.update(payload);
                mac.verify_slice(&sig.bytes).is_ok()
            }
            None => false,
        }
    }
}

/// The bytes an ACK signature covers: the payload digest followed by the canonical view.
pub fn ack_payload(message: &[u8], view: &View) -> Vec<u8> {
    let mut out = Vec::with_capacity(36 + 5 * view.changes().len());
    out.extend_from_slice(&digest(message).0);
    view.write_canonical(&mut out);
    out
}

/// A quorum of ACK signatures for one payload in one view.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MessageCertificate {
    pub message_digest: Digest,
    pub view: View,
    /// Sorted by signer, at most one per signer.
    pub signatures: Vec<Signature>,
}

impl MessageCertificate {
    /// Builds a certificate, keeping the first signature per signer in signer order.
    pub fn assemble(message: &[u8], view: View, signatures: impl IntoIterator<Item = Signature>) -> MessageCertificate {
        let mut by_signer: BTreeMap<ProcessId, Signature> = BTreeMap::new();
        for s in signatures {
            by_signer.entry(s.signer).or_insert(s);
        }
        MessageCertificate { message_digest: digest(message), view, signatures: by_signer.into_values().collect() }
    }

    pub fn signers(&self) -> impl Iterator<Item = ProcessId> + '_ {
        self.signatures.iter().map(|s| s.signer)
    }

    /// Digest, canonical view, `u32` signature count, then per signature the
    /// `u32` signer id, `u16` length and raw bytes.
    pub fn write_canonical(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.message_digest.0);
        self.view.write_canonical(out);
        out.extend_from_slice(&(self.signatures.len() as u32).to_be_bytes());
        for s in &self.signatures {
            write_signature(s, out);
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_canonical(&mut out);
        out
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> WireResult<MessageCertificate> {
        let message_digest = r.digest()?;
        let view = r.view(DEFAULT_CHANGE_CAP)?;
        let n = r.count("certificate signatures", 4096)?;
        let mut signatures = Vec::with_capacity(n);
        for _ in 0..n {
            signatures.push(read_signature(r)?);
        }
        Ok(MessageCertificate { message_digest, view, signatures })
    }
}

pub(crate) fn write_signature(s: &Signature, out: &mut Vec<u8>) {
    out.extend_from_slice(&s.signer.0.to_be_bytes());
    out.extend_from_slice(&(s.bytes.len() as u16).to_be_bytes());
    out.extend_from_slice(&s.bytes);
}

pub(crate) fn read_signature(r: &mut Reader<'_>) -> WireResult<Signature> {
    let signer = ProcessId(r.u32()?);
    let len = r.u16()? as usize;
    let bytes = r.bytes(len)?.to_vec();
    Ok(Signature { signer, bytes })
}

/// Accepts `cer` for `message` in `v_cer` when its view equals `v_cer`, its digest
/// matches, and at least a quorum of distinct members of `v_cer` signed
/// [`ack_payload`] for it.
pub fn verify_certificate(keyring: &Keyring, cer: &MessageCertificate, v_cer: &View, message: &[u8]) -> bool {
    if cer.view != *v_cer || cer.message_digest != digest(message) {
        return false;
    }
    let Ok(q) = v_cer.quorum_size() else {
        return false;
    };
    let members = v_cer.members();
    let mut seen = BTreeSet::new();
    for s in &cer.signatures {
        if !members.contains(&s.signer) || !seen.insert(s.signer) {
            return false;
        }
    }
    if seen.len() < q {
        return false;
    }
    let payload = ack_payload(message, v_cer);
    cer.signatures.iter().all(|s| keyring.verify(s.signer, &payload, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(scheme: SignatureScheme, n: u32) -> (Keyring, BTreeMap<ProcessId, SigningKey>) {
        Keyring::generate(scheme, (1..=n).map(ProcessId), 7)
    }

    #[test]
    fn sign_verify_both_schemes() {
        for scheme in [SignatureScheme::KeyedDigest, SignatureScheme::Ed25519] {
            let (kr, keys) = ring(scheme, 3);
            let s = keys[&ProcessId(1)].sign(b"hello");
            assert!(kr.verify(ProcessId(1), b"hello", &s));
            assert!(!kr.verify(ProcessId(1), b"hellO", &s));
            assert!(!kr.verify(ProcessId(2), b"hello", &s));
            let mut relabelled = s.clone();
            relabelled.signer = ProcessId(2);
            assert!(!kr.verify(ProcessId(2), b"hello", &relabelled));
            let mut truncated = s;
            truncated.bytes.pop();
            assert!(!kr.verify(ProcessId(1), b"hello", &truncated));
            assert!(!kr.verify(ProcessId(9), b"hello", &keys[&ProcessId(3)].sign(b"hello")));
        }
    }

    #[test]
    fn keys_are_deterministic() {
        let (_, a) = ring(SignatureScheme::Ed25519, 2);
        let (_, b) = ring(SignatureScheme::Ed25519, 2);
        assert_eq!(a[&ProcessId(2)].sign(b"x"), b[&ProcessId(2)].sign(b"x"));
        let (_, c) = Keyring::generate(SignatureScheme::Ed25519, [ProcessId(2)], 8);
        assert_ne!(a[&ProcessId(2)].sign(b"x"), c[&ProcessId(2)].sign(b"x"));
    }

    #[test]
    fn certificate_rejections() {
        let (kr, keys) = ring(SignatureScheme::KeyedDigest, 4);
        let v = View::initial((1..=4).map(ProcessId));
        let m = b"payload";
        let ack = ack_payload(m, &v);
        let sigs: Vec<Signature> = (1..=3).map(|i| keys[&ProcessId(i)].sign(&ack)).collect();
        let cer = MessageCertificate::assemble(m, v.clone(), sigs.clone());
        assert!(verify_certificate(&kr, &cer, &v, m));
        assert!(!verify_certificate(&kr, &cer, &v, b"other"));

        let other = View::initial((1..=5).map(ProcessId));
        assert!(!verify_certificate(&kr, &cer, &other, m));

        let short = MessageCertificate::assemble(m, v.clone(), sigs[..2].to_vec());
        assert!(!verify_certificate(&kr, &short, &v, m));

        let mut dup = cer.clone();
        dup.signatures[2] = dup.signatures[1].clone();
        assert!(!verify_certificate(&kr, &dup, &v, m));

        let mut forged = cer.clone();
        forged.signatures[0].bytes[0] ^= 1;
        assert!(!verify_certificate(&kr, &forged, &v, m));
    }
}
