use serde::{Deserialize, Serialize};

use super::{LogError, MerkleTree};
use crate::crypto::{
    hash, sign, tag, verify, CodecError, Decoder, Digest, Encoder, KeyPair, Signature, VerifyCache, VerifyKey,
};

/// Signed commitment to one epoch's tree, chained to the previous epoch.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignedTreeRoot {
    pub epoch: u64,
    pub root_hash: Digest,
    pub prev_str_hash: Digest,
    pub timestamp: u64,
    pub signature: Signature,
}

impl SignedTreeRoot {
    /// Bytes a client keeps per root: signature, root hash and timestamp.
    pub const STORED_BYTES: u64 = 104;
    /// Bytes counted when a root is exchanged between contacts.
    pub const WIRE_BYTES: u64 = 64;

    /// The bytes covered by the signature.
    pub fn signing_message(epoch: u64, root_hash: &Digest, prev_str_hash: &Digest, timestamp: u64) -> Vec<u8> {
        let mut e = Encoder::new();
        e.u8(tag::TREE_ROOT)
            .u64(epoch)
            .digest(root_hash)
            .digest(prev_str_hash)
            .u64(timestamp);
        e.finish()
    }

    pub fn signed_bytes(&self) -> Vec<u8> {
        Self::signing_message(self.epoch, &self.root_hash, &self.prev_str_hash, self.timestamp)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.u64(self.epoch)
            .digest(&self.root_hash)
            .digest(&self.prev_str_hash)
            .u64(self.timestamp)
            .fixed(&self.signature.0);
        e.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut d = Decoder::new(bytes);
        let out = SignedTreeRoot {
            epoch: d.u64()?,
            root_hash: d.digest()?,
            prev_str_hash: d.digest()?,
            timestamp: d.u64()?,
            signature: d.signature()?,
        };
        d.finish()?;
        Ok(out)
    }

    /// The hash the next root chains to.
    pub fn digest(&self) -> Digest {
        hash(tag::TREE_ROOT, &self.encode())
    }

    pub fn verify(&self, server: &VerifyKey) -> bool {
        verify(server, &self.signed_bytes(), &self.signature)
    }

    pub fn verify_cached(&self, server: &VerifyKey, cache: &mut VerifyCache) -> bool {
        cache.verify(server, &self.signed_bytes(), &self.signature)
    }
}

/// Signs `tree`'s root, chained to `prev` (or to the all-zero genesis hash).
pub fn generate_str(
    tree: &MerkleTree,
    prev: Option<&SignedTreeRoot>,
    server_key: &KeyPair,
    timestamp: u64,
) -> Result<SignedTreeRoot, LogError> {
    let expected = prev.map_or(0, |p| p.epoch + 1);
    if tree.epoch() != expected {
        return Err(LogError::EpochGap {
            expected,
            found: tree.epoch(),
        });
    }
    Ok(sign_root(
        tree.epoch(),
        tree.root_hash(),
        prev.map_or(Digest::ZERO, SignedTreeRoot::digest),
        timestamp,
        server_key,
    ))
}

pub(crate) fn sign_root(
    epoch: u64,
    root_hash: Digest,
    prev_str_hash: Digest,
    timestamp: u64,
    key: &KeyPair,
) -> SignedTreeRoot {
    let msg = SignedTreeRoot::signing_message(epoch, &root_hash, &prev_str_hash, timestamp);
    SignedTreeRoot {
        epoch,
        root_hash,
        prev_str_hash,
        timestamp,
        signature: sign(key, &msg),
    }
}

pub fn verify_str_chain(prev: &SignedTreeRoot, curr: &SignedTreeRoot, server: &VerifyKey) -> bool {
    curr.epoch == prev.epoch + 1 && curr.prev_str_hash == prev.digest() && prev.verify(server) && curr.verify(server)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::id::ClientId;
    use crate::tlog::PublicKeyRecord;

    fn chain(n: u64) -> (KeyPair, Vec<SignedTreeRoot>) {
        let key = KeyPair::from_seed([3; 32]);
        let recs = vec![PublicKeyRecord::new(ClientId::new("alice"), vec![1], 0)];
        let mut out: Vec<SignedTreeRoot> = Vec::new();
        for e in 0..n {
            let t = MerkleTree::build(recs.clone(), e, 5).unwrap();
            let s = generate_str(&t, out.last(), &key, e * 1000).unwrap();
            out.push(s);
        }
        (key, out)
    }

    #[test]
    fn genesis_chains_to_zero() {
        let (_, c) = chain(1);
        assert_eq!(c[0].prev_str_hash, Digest::ZERO);
        assert_eq!(c[0].epoch, 0);
    }

    #[test]
    fn three_roots_chain() {
        let (key, c) = chain(3);
        let pk = key.verifying_key();
        assert!(c.windows(2).all(|w| verify_str_chain(&w[0], &w[1], &pk)));
        assert!(!verify_str_chain(&c[0], &c[2], &pk));
    }

    #[test]
    fn tampering_breaks_signature_or_link() {
        let (key, c) = chain(2);
        let pk = key.verifying_key();
        let mut bad = c[1].clone();
        bad.epoch += 1;
        assert!(!bad.verify(&pk));
        let mut forged = c[1].clone();
        forged.prev_str_hash.0[0] ^= 1;
        assert!(!verify_str_chain(&c[0], &forged, &pk));
        let other = KeyPair::from_seed([4; 32]).verifying_key();
        assert!(!verify_str_chain(&c[0], &c[1], &other));
    }

    #[test]
    fn epoch_gap_is_rejected() {
        let key = KeyPair::from_seed([3; 32]);
        let t = MerkleTree::build(vec![], 2, 0).unwrap();
        assert_eq!(
            generate_str(&t, None, &key, 0).unwrap_err(),
            LogError::EpochGap { expected: 0, found: 2 }
        );
    }

    #[test]
    fn codec_roundtrip() {
        let (_, c) = chain(2);
        let bytes = c[1].encode();
        assert_eq!(SignedTreeRoot::decode(&bytes).unwrap(), c[1]);
        assert!(SignedTreeRoot::decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
