//! Hashing, signatures and the length-prefixed byte encoding shared by every
//! hashed or signed structure.
//!
//! Digests are SHA-256 with a one-byte domain tag prepended; signatures are
//! Ed25519. Both sizes (32 and 64 bytes) are load-bearing for the traffic
//! accounting, so they are fixed at the type level.

use std::collections::HashMap;
use std::fmt;

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub const DIGEST_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;

/// Domain tags prepended to every hash input.
pub mod tag {
    pub const LEAF_NONCE: u8 = 0x00;
    pub const INTERIOR_NONCE: u8 = 0x01;
    pub const IDENTITY: u8 = 0x02;
    pub const KEY_BINDING: u8 = 0x03;
    pub const LEAF_NODE: u8 = 0x04;
    pub const INTERIOR_NODE: u8 = 0x05;
    pub const EMPTY_LEAF: u8 = 0x06;
    pub const TREE_ROOT: u8 = 0x07;
    pub const KEY_RESPONSE: u8 = 0x08;
    pub const PLACEMENT: u8 = 0x09;
    pub const SEED: u8 = 0x0a;
    pub const CLIENT_KEY: u8 = 0x0b;
    pub const VERIFY_MEMO: u8 = 0x0c;
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("unexpected end of input at offset {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after value")]
    Trailing(usize),
    #[error("invalid value for {0}")]
    Invalid(&'static str),
}

fn write_hex<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&hex::encode(bytes))
}

fn read_hex<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
    let s = String::deserialize(d)?;
    let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
    v.try_into()
        .map_err(|_| serde::de::Error::custom(format!("expected {N} bytes")))
}

/// A 32-byte hash output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0; DIGEST_LEN]);

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    /// Bit `i` counted from the most significant bit of byte 0.
    pub fn bit(&self, i: usize) -> u8 {
        (self.0[i / 8] >> (7 - (i % 8))) & 1
    }

    /// First eight bytes as a big-endian integer.
    pub fn prefix_u64(&self) -> u64 {
        u64::from_be_bytes(self.0[..8].try_into().expect("8 bytes"))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        write_hex(&self.0, s)
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        read_hex::<D, DIGEST_LEN>(d).map(Digest)
    }
}

/// A 64-byte signature.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..6]))
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        write_hex(&self.0, s)
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        read_hex::<D, SIGNATURE_LEN>(d).map(Signature)
    }
}

/// Public half of a signing key.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct VerifyKey(VerifyingKey);

impl VerifyKey {
    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8; 32]) -> Option<Self> {
        VerifyingKey::from_bytes(bytes).ok().map(VerifyKey)
    }
}

impl fmt::Debug for VerifyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VerifyKey({})", hex::encode(&self.to_bytes()[..6]))
    }
}

impl Serialize for VerifyKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        write_hex(&self.to_bytes(), s)
    }
}

impl<'de> Deserialize<'de> for VerifyKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let bytes = read_hex::<D, 32>(d)?;
        VerifyKey::from_bytes(&bytes).ok_or_else(|| serde::de::Error::custom("invalid point"))
    }
}

/// A signing key together with its verification key.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        KeyPair {
            signing: SigningKey::from_bytes(&seed),
        }
    }

    pub fn verifying_key(&self) -> VerifyKey {
        VerifyKey(self.signing.verifying_key())
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("verifying_key", &self.verifying_key())
            .finish_non_exhaustive()
    }
}

/// `SHA-256(domain_tag || payload)`.
pub fn hash(domain_tag: u8, payload: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update([domain_tag]);
    h.update(payload);
    Digest(h.finalize().into())
}

pub fn sign(key: &KeyPair, message: &[u8]) -> Signature {
    Signature(key.signing.sign(message).to_bytes())
}

pub fn verify(public: &VerifyKey, message: &[u8], sig: &Signature) -> bool {
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    public.0.verify_strict(message, &sig).is_ok()
}

/// Memoizes signature verification results.
///
/// A simulated population verifies the same signed root hundreds of times per
/// epoch; verification is a pure function, so each distinct
/// `(key, message, signature)` triple is checked once.
#[derive(Debug, Default)]
pub struct VerifyCache {
    seen: HashMap<Digest, bool>,
    hits: u64,
}

impl VerifyCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn verify(&mut self, public: &VerifyKey, message: &[u8], sig: &Signature) -> bool {
        let mut enc = Encoder::new();
        enc.fixed(&public.to_bytes()).bytes(message).fixed(&sig.0);
        let memo = hash(tag::VERIFY_MEMO, enc.as_slice());
        if let Some(&ok) = self.seen.get(&memo) {
            self.hits += 1;
            return ok;
        }
        let ok = verify(public, message, sig);
        self.seen.insert(memo, ok);
        ok
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }
}

/// Canonical encoder: variable-length fields carry a 4-byte big-endian length
/// prefix, integers are 8-byte big-endian, digests and signatures are raw.
#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        let len = u32::try_from(v.len()).expect("field longer than 4 GiB");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(v);
        self
    }

    pub fn fixed(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.fixed(&d.0)
    }

    /// Element count of a list, 4-byte big-endian.
    pub fn count(&mut self, n: usize) -> &mut Self {
        let n = u32::try_from(n).expect("list longer than u32::MAX");
        self.buf.extend_from_slice(&n.to_be_bytes());
        self
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Reader for [`Encoder`] output.
#[derive(Debug)]
pub struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Decoder { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos.checked_add(n).ok_or(CodecError::Truncated(self.pos))?;
        if end > self.data.len() {
            return Err(CodecError::Truncated(self.pos));
        }
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let len = u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes"));
        self.take(len as usize)
    }

    pub fn count(&mut self) -> Result<usize, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    pub fn fixed<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        Ok(self.take(N)?.try_into().expect("N bytes"))
    }

    pub fn digest(&mut self) -> Result<Digest, CodecError> {
        self.fixed::<DIGEST_LEN>().map(Digest)
    }

    pub fn signature(&mut self) -> Result<Signature, CodecError> {
        self.fixed::<SIGNATURE_LEN>().map(Signature)
    }

    pub fn finish(self) -> Result<(), CodecError> {
        match self.data.len() - self.pos {
            0 => Ok(()),
            n => Err(CodecError::Trailing(n)),
        }
    }
}

/// Derives a 32-byte seed for a named random substream.
pub fn derive_seed(parent: u64, label: &str, index: u64) -> [u8; 32] {
    let mut enc = Encoder::new();
    enc.u64(parent).bytes(label.as_bytes()).u64(index);
    hash(tag::SEED, enc.as_slice()).0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keypair(b: u8) -> KeyPair {
        KeyPair::from_seed([b; 32])
    }

    #[test]
    fn hash_is_deterministic() {
        assert_eq!(hash(tag::LEAF_NODE, b""), hash(tag::LEAF_NODE, b""));
        assert_eq!(hash(7, b"abc"), hash(7, b"abc"));
    }

    #[test]
    fn domain_tags_separate_inputs() {
        for p in [&b""[..], b"x", b"some payload"] {
            assert_ne!(hash(tag::LEAF_NODE, p), hash(tag::INTERIOR_NODE, p));
            assert_ne!(hash(tag::LEAF_NONCE, p), hash(tag::INTERIOR_NONCE, p));
        }
    }

    #[test]
    fn sign_verify_roundtrip() {
        let kp = keypair(1);
        let sig = sign(&kp, b"root");
        assert!(verify(&kp.verifying_key(), b"root", &sig));
        assert!(!verify(&kp.verifying_key(), b"rooT", &sig));
        assert!(!verify(&keypair(2).verifying_key(), b"root", &sig));
    }

    #[test]
    fn cache_agrees_with_direct_verification() {
        let kp = keypair(3);
        let sig = sign(&kp, b"m");
        let mut cache = VerifyCache::new();
        assert!(cache.verify(&kp.verifying_key(), b"m", &sig));
        assert!(cache.verify(&kp.verifying_key(), b"m", &sig));
        assert!(!cache.verify(&kp.verifying_key(), b"n", &sig));
        assert_eq!(cache.hits(), 1);
    }

    #[test]
    fn codec_roundtrip_and_errors() {
        let mut e = Encoder::new();
        e.u8(9).u64(42).bytes(b"hello").digest(&Digest([5; 32]));
        let buf = e.finish();
        assert_eq!(buf.len(), 1 + 8 + 4 + 5 + 32);
        let mut d = Decoder::new(&buf);
        assert_eq!(d.u8().unwrap(), 9);
        assert_eq!(d.u64().unwrap(), 42);
        assert_eq!(d.bytes().unwrap(), b"hello");
        assert_eq!(d.digest().unwrap(), Digest([5; 32]));
        d.finish().unwrap();

        let mut d = Decoder::new(&buf[..5]);
        d.u8().unwrap();
        assert!(matches!(d.u64(), Err(CodecError::Truncated(1))));
    }

    #[test]
    fn length_prefix_prevents_field_shifting() {
        let mut a = Encoder::new();
        a.bytes(b"ab").bytes(b"c");
        let mut b = Encoder::new();
        b.bytes(b"a").bytes(b"bc");
        assert_ne!(hash(0, a.as_slice()), hash(0, b.as_slice()));
    }

    #[test]
    fn digest_bits_are_msb_first() {
        let mut d = Digest::ZERO;
        d.0[0] = 0b1010_0000;
        d.0[1] = 0b0000_0001;
        assert_eq!(d.bit(0), 1);
        assert_eq!(d.bit(1), 0);
        assert_eq!(d.bit(2), 1);
        assert_eq!(d.bit(15), 1);
        assert_eq!(d.bit(14), 0);
    }

    #[test]
    fn digest_serde_is_hex() {
        let d = Digest([0xab; 32]);
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s, format!("\"{}\"", "ab".repeat(32)));
        let back: Digest = serde_json::from_str(&s).unwrap();
        assert_eq!(back, d);
    }
}
