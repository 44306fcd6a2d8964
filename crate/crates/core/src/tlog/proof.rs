use serde::{Deserialize, Serialize};

use super::tree::{identity_index, interior_hash, key_binding, LeafNode, MerkleTree, Node, Prefix};
use super::{LogError, SignedTreeRoot};
use crate::crypto::{CodecError, Decoder, Digest, Encoder, VerifyCache, VerifyKey, DIGEST_LEN};
use crate::id::ClientId;

/// Which side of the path the sibling sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiblingHash {
    pub hash: Digest,
    pub side: Side,
}

/// Leaf payload plus the sibling hashes and interior nonces from the leaf up
/// to the root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofOfInclusion {
    pub leaf: LeafNode,
    pub siblings: Vec<SiblingHash>,
    pub nonces: Vec<Digest>,
    pub depth: u64,
}

impl ProofOfInclusion {
    /// Transport cost: the leaf hash plus one sibling per level.
    pub fn wire_bytes_for_depth(depth: u64) -> u64 {
        DIGEST_LEN as u64 * (depth + 1)
    }

    pub fn wire_bytes(&self) -> u64 {
        Self::wire_bytes_for_depth(self.depth)
    }

    /// Folds the path for `(client_id, public_key)`; `None` if the proof is
    /// malformed or does not belong to `client_id`.
    pub fn compute_root(&self, client_id: &ClientId, public_key: &[u8]) -> Option<Digest> {
        let depth = self.depth as usize;
        if self.leaf.depth != self.depth
            || self.siblings.len() != depth
            || self.nonces.len() != depth
            || depth == 0
            || depth > DIGEST_LEN * 8
        {
            return None;
        }
        let index = identity_index(client_id);
        if self.leaf.index != index {
            return None;
        }
        let leaf = LeafNode {
            binding: key_binding(client_id, public_key),
            ..self.leaf.clone()
        };
        let mut h = leaf.hash();
        for (step, (sib, nonce)) in self.siblings.iter().zip(&self.nonces).enumerate() {
            let level = depth - 1 - step;
            let (left, right) = match (index.bit(level), sib.side) {
                (0, Side::Right) => (h, sib.hash),
                (1, Side::Left) => (sib.hash, h),
                _ => return None,
            };
            h = interior_hash(nonce, &left, &right, &Prefix::of(&index, level), level as u64);
        }
        Some(h)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        self.encode_into(&mut e);
        e.finish()
    }

    pub(crate) fn encode_into(&self, e: &mut Encoder) {
        e.digest(&self.leaf.nonce)
            .digest(&self.leaf.index)
            .u64(self.leaf.depth)
            .digest(&self.leaf.binding)
            .u64(self.depth)
            .count(self.siblings.len());
        for s in &self.siblings {
            e.u8(match s.side {
                Side::Left => 0,
                Side::Right => 1,
            })
            .digest(&s.hash);
        }
        e.count(self.nonces.len());
        for n in &self.nonces {
            e.digest(n);
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut d = Decoder::new(bytes);
        let leaf = LeafNode {
            nonce: d.digest()?,
            index: d.digest()?,
            depth: d.u64()?,
            binding: d.digest()?,
        };
        let depth = d.u64()?;
        let n = d.count()?;
        let mut siblings = Vec::with_capacity(n.min(256));
        for _ in 0..n {
            let side = match d.u8()? {
                0 => Side::Left,
                1 => Side::Right,
                _ => return Err(CodecError::Invalid("sibling side")),
            };
            siblings.push(SiblingHash {
                hash: d.digest()?,
                side,
            });
        }
        let n = d.count()?;
        let mut nonces = Vec::with_capacity(n.min(256));
        for _ in 0..n {
            nonces.push(d.digest()?);
        }
        d.finish()?;
        Ok(ProofOfInclusion {
            leaf,
            siblings,
            nonces,
            depth,
        })
    }
}

pub fn prove_inclusion(tree: &MerkleTree, client_id: &ClientId) -> Result<ProofOfInclusion, LogError> {
    if tree.record(client_id).is_none() {
        return Err(LogError::NotRegistered(client_id.clone()));
    }
    let index = identity_index(client_id);
    let nodes = tree.nodes();
    let mut at = tree.root_index();
    let mut siblings = Vec::new();
    let mut nonces = Vec::new();
    loop {
        match &nodes[at] {
            Node::Interior { node, left, right } => {
                let level = node.prefix.len();
                nonces.push(node.nonce);
                if index.bit(level) == 0 {
                    siblings.push(SiblingHash {
                        hash: tree.node_hash(*right),
                        side: Side::Right,
                    });
                    at = *left;
                } else {
                    siblings.push(SiblingHash {
                        hash: tree.node_hash(*left),
                        side: Side::Left,
                    });
                    at = *right;
                }
            }
            Node::Leaf { leaf, client_id: c } if c == client_id => {
                siblings.reverse();
                nonces.reverse();
                return Ok(ProofOfInclusion {
                    leaf: leaf.clone(),
                    siblings,
                    nonces,
                    depth: leaf.depth,
                });
            }
            _ => return Err(LogError::NotRegistered(client_id.clone())),
        }
    }
}

/// True iff the proof folds to `str.root_hash` for this exact key and the
/// root carries a valid server signature.
pub fn verify_poi(
    str: &SignedTreeRoot,
    poi: &ProofOfInclusion,
    client_id: &ClientId,
    public_key: &[u8],
    server: &VerifyKey,
) -> bool {
    poi.compute_root(client_id, public_key) == Some(str.root_hash) && str.verify(server)
}

pub(crate) fn verify_poi_cached(
    str: &SignedTreeRoot,
    poi: &ProofOfInclusion,
    client_id: &ClientId,
    public_key: &[u8],
    server: &VerifyKey,
    cache: &mut VerifyCache,
) -> bool {
    poi.compute_root(client_id, public_key) == Some(str.root_hash) && str.verify_cached(server, cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;
    use crate::tlog::{generate_str, PublicKeyRecord};

    fn setup(n: usize) -> (KeyPair, MerkleTree, SignedTreeRoot) {
        let key = KeyPair::from_seed([1; 32]);
        let recs = (0..n).map(|i| PublicKeyRecord::new(ClientId::indexed(i), vec![i as u8, 7], 0));
        let tree = MerkleTree::build(recs, 0, 11).unwrap();
        let s = generate_str(&tree, None, &key, 0).unwrap();
        (key, tree, s)
    }

    #[test]
    fn singleton_proof_has_one_sibling() {
        let (key, tree, s) = setup(1);
        let id = ClientId::indexed(0);
        let p = prove_inclusion(&tree, &id).unwrap();
        assert_eq!(p.depth, 1);
        assert_eq!(p.siblings.len(), 1);
        assert!(verify_poi(&s, &p, &id, &[0, 7], &key.verifying_key()));
    }

    #[test]
    fn all_proofs_verify_and_do_not_transfer() {
        let (key, tree, s) = setup(8);
        let pk = key.verifying_key();
        for i in 0..8 {
            let id = ClientId::indexed(i);
            let p = prove_inclusion(&tree, &id).unwrap();
            assert!(verify_poi(&s, &p, &id, &[i as u8, 7], &pk));
            assert!(!verify_poi(&s, &p, &id, &[i as u8, 8], &pk));
            for j in (0..8).filter(|&j| j != i) {
                let other = ClientId::indexed(j);
                assert!(!verify_poi(&s, &p, &other, &[j as u8, 7], &pk));
            }
        }
    }

    #[test]
    fn truncated_proof_fails() {
        let (key, tree, s) = setup(8);
        let id = ClientId::indexed(3);
        let mut p = prove_inclusion(&tree, &id).unwrap();
        p.siblings.remove(0);
        p.nonces.remove(0);
        p.depth -= 1;
        p.leaf.depth -= 1;
        assert!(!verify_poi(&s, &p, &id, &[3, 7], &key.verifying_key()));
    }

    #[test]
    fn unregistered_is_an_error() {
        let (_, tree, _) = setup(4);
        let id = ClientId::new("nobody");
        assert_eq!(prove_inclusion(&tree, &id).unwrap_err(), LogError::NotRegistered(id));
    }

    #[test]
    fn synthetic_depth_accounting() {
        assert_eq!(ProofOfInclusion::wire_bytes_for_depth(32), 1056);
    }

    #[test]
    fn codec_roundtrip() {
        let (_, tree, _) = setup(16);
        let p = prove_inclusion(&tree, &ClientId::indexed(5)).unwrap();
        assert_eq!(ProofOfInclusion::decode(&p.encode()).unwrap(), p);
    }
}
