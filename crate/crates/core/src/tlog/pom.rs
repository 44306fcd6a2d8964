use serde::{Deserialize, Serialize};

use super::{KeyResponse, LogError, SignedTreeRoot};
use crate::crypto::{Encoder, VerifyCache, VerifyKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PomKind {
    ConflictingStrs,
    DuplicateKey,
}

/// Evidence that any third party holding the server key can check.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ProofOfMisbehavior {
    /// Two validly signed roots for one epoch with different tree hashes.
    ConflictingStrs { a: SignedTreeRoot, b: SignedTreeRoot },
    /// The server handed out `first`'s key again after signing a different
    /// key in between, at a different epoch.
    DuplicateKey {
        first: KeyResponse,
        intervening: KeyResponse,
        repeat: KeyResponse,
    },
}

impl ProofOfMisbehavior {
    pub fn kind(&self) -> PomKind {
        match self {
            ProofOfMisbehavior::ConflictingStrs { .. } => PomKind::ConflictingStrs,
            ProofOfMisbehavior::DuplicateKey { .. } => PomKind::DuplicateKey,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        match self {
            ProofOfMisbehavior::ConflictingStrs { a, b } => {
                e.u8(0).bytes(&a.encode()).bytes(&b.encode());
            }
            ProofOfMisbehavior::DuplicateKey {
                first,
                intervening,
                repeat,
            } => {
                e.u8(1)
                    .bytes(&first.encode())
                    .bytes(&intervening.encode())
                    .bytes(&repeat.encode());
            }
        }
        e.finish()
    }

    pub fn wire_bytes(&self) -> u64 {
        match self {
            ProofOfMisbehavior::ConflictingStrs { .. } => 2 * SignedTreeRoot::WIRE_BYTES,
            ProofOfMisbehavior::DuplicateKey {
                first,
                intervening,
                repeat,
            } => first.wire_bytes() + intervening.wire_bytes() + repeat.wire_bytes(),
        }
    }
}

fn conflict_reason(
    a: &SignedTreeRoot,
    b: &SignedTreeRoot,
    server: &VerifyKey,
    cache: &mut VerifyCache,
) -> Option<&'static str> {
    if a.epoch != b.epoch {
        return Some("roots are for different epochs");
    }
    if a.root_hash == b.root_hash {
        return Some("roots commit to the same tree");
    }
    if !a.verify_cached(server, cache) || !b.verify_cached(server, cache) {
        return Some("root signature does not verify");
    }
    None
}

fn duplicate_reason(
    first: &KeyResponse,
    intervening: &KeyResponse,
    repeat: &KeyResponse,
    server: &VerifyKey,
    cache: &mut VerifyCache,
) -> Option<&'static str> {
    if first.subject != intervening.subject || first.subject != repeat.subject {
        return Some("responses concern different clients");
    }
    if first.public_key != repeat.public_key {
        return Some("repeated key differs");
    }
    if intervening.public_key == first.public_key {
        return Some("no different key in between");
    }
    if !(first.issued_at < intervening.issued_at && intervening.issued_at < repeat.issued_at) {
        return Some("responses are not in issue order");
    }
    if first.epoch == repeat.epoch {
        return Some("repeat is in the same epoch as the original");
    }
    if ![first, intervening, repeat]
        .iter()
        .all(|r| r.verify_cached(server, cache))
    {
        return Some("response signature does not verify");
    }
    None
}

/// Builds a conflicting-roots proof, refusing anything that would not
/// adjudicate.
pub fn make_pom_conflict(
    a: SignedTreeRoot,
    b: SignedTreeRoot,
    server: &VerifyKey,
) -> Result<ProofOfMisbehavior, LogError> {
    if let Some(why) = conflict_reason(&a, &b, server, &mut VerifyCache::new()) {
        return Err(LogError::NotConflicting(why));
    }
    // Canonical order so that both discoverers build the same proof.
    let (a, b) = if a.root_hash <= b.root_hash { (a, b) } else { (b, a) };
    Ok(ProofOfMisbehavior::ConflictingStrs { a, b })
}

pub fn make_pom_duplicate(
    first: KeyResponse,
    intervening: KeyResponse,
    repeat: KeyResponse,
    server: &VerifyKey,
) -> Result<ProofOfMisbehavior, LogError> {
    if let Some(why) = duplicate_reason(&first, &intervening, &repeat, server, &mut VerifyCache::new()) {
        return Err(LogError::NotConflicting(why));
    }
    Ok(ProofOfMisbehavior::DuplicateKey {
        first,
        intervening,
        repeat,
    })
}

pub fn adjudicate(pom: &ProofOfMisbehavior, server: &VerifyKey) -> bool {
    adjudicate_cached(pom, server, &mut VerifyCache::new())
}

pub fn adjudicate_cached(pom: &ProofOfMisbehavior, server: &VerifyKey, cache: &mut VerifyCache) -> bool {
    match pom {
        ProofOfMisbehavior::ConflictingStrs { a, b } => conflict_reason(a, b, server, cache).is_none(),
        ProofOfMisbehavior::DuplicateKey {
            first,
            intervening,
            repeat,
        } => duplicate_reason(first, intervening, repeat, server, cache).is_none(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{Digest, KeyPair};
    use crate::id::ClientId;
    use crate::tlog::root::sign_root;

    fn key() -> KeyPair {
        KeyPair::from_seed([6; 32])
    }

    fn root(k: &KeyPair, epoch: u64, fill: u8) -> SignedTreeRoot {
        sign_root(epoch, Digest([fill; 32]), Digest::ZERO, 0, k)
    }

    #[test]
    fn conflict_requires_real_conflict() {
        let k = key();
        let pk = k.verifying_key();
        let a = root(&k, 5, 1);
        assert!(make_pom_conflict(a.clone(), a.clone(), &pk).is_err());
        assert!(make_pom_conflict(a.clone(), root(&k, 6, 2), &pk).is_err());
        let pom = make_pom_conflict(a.clone(), root(&k, 5, 2), &pk).unwrap();
        assert!(adjudicate(&pom, &pk));
        let forged = root(&KeyPair::from_seed([7; 32]), 5, 2);
        assert!(make_pom_conflict(a, forged, &pk).is_err());
    }

    #[test]
    fn conflict_order_is_canonical() {
        let k = key();
        let pk = k.verifying_key();
        let x = make_pom_conflict(root(&k, 1, 1), root(&k, 1, 2), &pk).unwrap();
        let y = make_pom_conflict(root(&k, 1, 2), root(&k, 1, 1), &pk).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn tampered_pom_fails_adjudication() {
        let k = key();
        let pk = k.verifying_key();
        let pom = make_pom_conflict(root(&k, 3, 1), root(&k, 3, 2), &pk).unwrap();
        let ProofOfMisbehavior::ConflictingStrs { a, mut b } = pom else {
            unreachable!()
        };
        b.epoch = 4;
        assert!(!adjudicate(&ProofOfMisbehavior::ConflictingStrs { a, b }, &pk));
    }

    fn resp(k: &KeyPair, key_byte: u8, epoch: u64, at: u64) -> KeyResponse {
        KeyResponse::new_signed(k, ClientId::new("bob"), vec![key_byte], 0, epoch, at, false, None, None)
    }

    #[test]
    fn duplicate_key_pattern() {
        let k = key();
        let pk = k.verifying_key();
        let pom = make_pom_duplicate(resp(&k, 1, 0, 1), resp(&k, 2, 4, 5), resp(&k, 1, 4, 6), &pk).unwrap();
        assert!(adjudicate(&pom, &pk));
        assert_eq!(pom.kind(), PomKind::DuplicateKey);
        // Three distinct keys.
        assert!(make_pom_duplicate(resp(&k, 1, 0, 1), resp(&k, 2, 4, 5), resp(&k, 3, 4, 6), &pk).is_err());
        // Same epoch throughout.
        assert!(make_pom_duplicate(resp(&k, 1, 4, 1), resp(&k, 2, 4, 5), resp(&k, 1, 4, 6), &pk).is_err());
        // Out of order.
        assert!(make_pom_duplicate(resp(&k, 1, 0, 7), resp(&k, 2, 4, 5), resp(&k, 1, 4, 6), &pk).is_err());
    }
}
