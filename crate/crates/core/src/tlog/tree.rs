use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::LogError;
use crate::crypto::{hash, tag, Digest, Encoder, DIGEST_LEN};
use crate::id::{hex_bytes, ClientId};

const MAX_DEPTH: usize = DIGEST_LEN * 8;

/// A client's registered key and the epoch in which it was uploaded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKeyRecord {
    pub client_id: ClientId,
    #[serde(with = "hex_bytes")]
    pub public_key: Vec<u8>,
    pub upload_epoch: u64,
}

impl PublicKeyRecord {
    pub fn new(client_id: ClientId, public_key: Vec<u8>, upload_epoch: u64) -> Self {
        PublicKeyRecord {
            client_id,
            public_key,
            upload_epoch,
        }
    }
}

/// `H(client)`: position of the client's leaf in the prefix tree.
pub fn identity_index(client_id: &ClientId) -> Digest {
    let mut e = Encoder::new();
    e.bytes(client_id.as_str().as_bytes());
    hash(tag::IDENTITY, e.as_slice())
}

/// `H(client, public_key)`: the inner hash binding an identity to a key.
pub fn key_binding(client_id: &ClientId, public_key: &[u8]) -> Digest {
    let mut e = Encoder::new();
    e.bytes(client_id.as_str().as_bytes()).bytes(public_key);
    hash(tag::KEY_BINDING, e.as_slice())
}

/// A bit string of at most 256 bits, stored MSB-first with unused bits zero.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Prefix {
    bits: [u8; DIGEST_LEN],
    len: u16,
}

impl Prefix {
    pub fn root() -> Self {
        Prefix::default()
    }

    /// The first `len` bits of `index`.
    pub fn of(index: &Digest, len: usize) -> Self {
        assert!(len <= MAX_DEPTH);
        let mut bits = [0u8; DIGEST_LEN];
        let full = len / 8;
        bits[..full].copy_from_slice(&index.0[..full]);
        if !len.is_multiple_of(8) {
            let mask = 0xffu8 << (8 - len % 8);
            bits[full] = index.0[full] & mask;
        }
        Prefix { bits, len: len as u16 }
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bit(&self, i: usize) -> u8 {
        debug_assert!(i < self.len());
        (self.bits[i / 8] >> (7 - (i % 8))) & 1
    }

    pub fn child(&self, bit: u8) -> Prefix {
        let i = self.len();
        assert!(i < MAX_DEPTH, "prefix already at maximum depth");
        let mut out = *self;
        if bit == 1 {
            out.bits[i / 8] |= 1 << (7 - (i % 8));
        }
        out.len += 1;
        out
    }

    pub fn is_prefix_of(&self, index: &Digest) -> bool {
        Prefix::of(index, self.len()) == *self
    }

    pub fn encode_into(&self, e: &mut Encoder) {
        e.u64(self.len as u64).bytes(&self.bits[..self.len().div_ceil(8)]);
    }
}

impl std::fmt::Debug for Prefix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s: String = (0..self.len())
            .map(|i| if self.bit(i) == 1 { '1' } else { '0' })
            .collect();
        write!(f, "Prefix({s})")
    }
}

/// `H(k_leaf || i_client || depth || H(client, public_key))`.
pub fn leaf_hash(nonce: &Digest, index: &Digest, depth: u64, binding: &Digest) -> Digest {
    let mut e = Encoder::new();
    e.digest(nonce).digest(index).u64(depth).digest(binding);
    hash(tag::LEAF_NODE, e.as_slice())
}

/// `H(k_interior || h_child0 || h_child1 || i_interior || depth)`.
pub fn interior_hash(nonce: &Digest, left: &Digest, right: &Digest, prefix: &Prefix, depth: u64) -> Digest {
    let mut e = Encoder::new();
    e.digest(nonce).digest(left).digest(right);
    prefix.encode_into(&mut e);
    e.u64(depth);
    hash(tag::INTERIOR_NODE, e.as_slice())
}

fn derived(domain: u8, seed: u64, prefix: &Prefix, epoch: u64) -> Digest {
    let mut e = Encoder::new();
    e.u64(seed);
    prefix.encode_into(&mut e);
    e.u64(epoch);
    hash(domain, e.as_slice())
}

/// A non-empty leaf as transported in an inclusion proof.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeafNode {
    pub nonce: Digest,
    pub index: Digest,
    pub depth: u64,
    pub binding: Digest,
}

impl LeafNode {
    pub fn hash(&self) -> Digest {
        leaf_hash(&self.nonce, &self.index, self.depth, &self.binding)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteriorNode {
    pub nonce: Digest,
    pub prefix: Prefix,
    pub depth: u64,
    pub left_hash: Digest,
    pub right_hash: Digest,
}

impl InteriorNode {
    pub fn hash(&self) -> Digest {
        interior_hash(&self.nonce, &self.left_hash, &self.right_hash, &self.prefix, self.depth)
    }
}

impl Serialize for Prefix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let bits: String = (0..self.len())
            .map(|i| if self.bit(i) == 1 { '1' } else { '0' })
            .collect();
        s.serialize_str(&bits)
    }
}

impl<'de> Deserialize<'de> for Prefix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s.len() > MAX_DEPTH {
            return Err(serde::de::Error::custom("prefix longer than 256 bits"));
        }
        let mut p = Prefix::root();
        for c in s.chars() {
            p = match c {
                '0' => p.child(0),
                '1' => p.child(1),
                _ => return Err(serde::de::Error::custom("prefix must be a bit string")),
            };
        }
        Ok(p)
    }
}

#[derive(Clone, Debug)]
pub enum Node {
    /// Random-valued placeholder, indistinguishable from a real leaf hash.
    Empty {
        prefix: Prefix,
        fill: Digest,
    },
    Leaf {
        leaf: LeafNode,
        client_id: ClientId,
    },
    Interior {
        node: InteriorNode,
        left: usize,
        right: usize,
    },
}

impl Node {
    pub fn hash(&self) -> Digest {
        match self {
            Node::Empty { fill, .. } => *fill,
            Node::Leaf { leaf, .. } => leaf.hash(),
            Node::Interior { node, .. } => node.hash(),
        }
    }
}

/// One epoch's prefix tree. Immutable once built.
#[derive(Clone, Debug)]
pub struct MerkleTree {
    epoch: u64,
    seed: u64,
    nodes: Vec<Node>,
    hashes: Vec<Digest>,
    root: usize,
    records: BTreeMap<ClientId, PublicKeyRecord>,
}

/// Number of leading bits `a` and `b` share.
fn common_prefix_len(a: &Digest, b: &Digest) -> usize {
    for (i, (x, y)) in a.0.iter().zip(b.0.iter()).enumerate() {
        let diff = x ^ y;
        if diff != 0 {
            return i * 8 + diff.leading_zeros() as usize;
        }
    }
    MAX_DEPTH
}

struct Entry {
    index: Digest,
    client: ClientId,
    binding: Digest,
    depth: usize,
}

struct Builder<'a> {
    epoch: u64,
    seed: u64,
    nodes: Vec<Node>,
    hashes: Vec<Digest>,
    entries: &'a [Entry],
}

impl Builder<'_> {
    fn push(&mut self, node: Node) -> usize {
        self.hashes.push(node.hash());
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn build(&mut self, prefix: Prefix, lo: usize, hi: usize) -> usize {
        let depth = prefix.len();
        if lo == hi {
            let fill = derived(tag::EMPTY_LEAF, self.seed, &prefix, self.epoch);
            return self.push(Node::Empty { prefix, fill });
        }
        if hi - lo == 1 && self.entries[lo].depth == depth {
            let e = &self.entries[lo];
            let leaf = LeafNode {
                nonce: derived(tag::LEAF_NONCE, self.seed, &prefix, self.epoch),
                index: e.index,
                depth: depth as u64,
                binding: e.binding,
            };
            return self.push(Node::Leaf {
                leaf,
                client_id: e.client.clone(),
            });
        }
        let split = lo + self.entries[lo..hi].partition_point(|e| e.index.bit(depth) == 0);
        let left = self.build(prefix.child(0), lo, split);
        let right = self.build(prefix.child(1), split, hi);
        let node = InteriorNode {
            nonce: derived(tag::INTERIOR_NONCE, self.seed, &prefix, self.epoch),
            prefix,
            depth: depth as u64,
            left_hash: self.hashes[left],
            right_hash: self.hashes[right],
        };
        self.push(Node::Interior { node, left, right })
    }
}

impl MerkleTree {
    /// Builds the tree for `epoch`. Placement depths and nonces are pure
    /// functions of `(seed, epoch)` and the record set.
    pub fn build(records: impl IntoIterator<Item = PublicKeyRecord>, epoch: u64, seed: u64) -> Result<Self, LogError> {
        let mut by_id = BTreeMap::new();
        for r in records {
            if r.client_id.is_empty() {
                return Err(LogError::EmptyClientId);
            }
            if by_id.contains_key(&r.client_id) {
                return Err(LogError::DuplicateClient(r.client_id));
            }
            by_id.insert(r.client_id.clone(), r);
        }

        let mut entries: Vec<Entry> = by_id
            .values()
            .map(|r| Entry {
                index: identity_index(&r.client_id),
                client: r.client_id.clone(),
                binding: key_binding(&r.client_id, &r.public_key),
                depth: 0,
            })
            .collect();
        entries.sort_by_key(|e| e.index);

        let n = entries.len();
        for i in 0..n {
            let mut shared = 0;
            if i > 0 {
                shared = shared.max(common_prefix_len(&entries[i].index, &entries[i - 1].index));
            }
            if i + 1 < n {
                shared = shared.max(common_prefix_len(&entries[i].index, &entries[i + 1].index));
            }
            let unique = if n == 1 { 0 } else { shared + 1 };
            entries[i].depth = unique + extra_depth(seed, epoch, &entries[i].index, unique);
        }

        let mut b = Builder {
            epoch,
            seed,
            nodes: Vec::with_capacity(4 * n + 1),
            hashes: Vec::with_capacity(4 * n + 1),
            entries: &entries,
        };
        let root = b.build(Prefix::root(), 0, n);
        let Builder { nodes, hashes, .. } = b;
        Ok(MerkleTree {
            epoch,
            seed,
            nodes,
            hashes,
            root,
            records: by_id,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn root_hash(&self) -> Digest {
        self.hashes[self.root]
    }

    pub fn root_index(&self) -> usize {
        self.root
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_hash(&self, i: usize) -> Digest {
        self.hashes[i]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, client_id: &ClientId) -> Option<&PublicKeyRecord> {
        self.records.get(client_id)
    }

    pub fn records(&self) -> impl Iterator<Item = &PublicKeyRecord> {
        self.records.values()
    }
}

/// The random extra depth `r`, uniform on `[1, max(unique, 1)]`, clamped so
/// the leaf stays within 256 bits.
fn extra_depth(seed: u64, epoch: u64, index: &Digest, unique: usize) -> usize {
    let span = unique.max(1).min(MAX_DEPTH - unique).max(1);
    let mut e = Encoder::new();
    e.u64(seed).digest(index).u64(epoch);
    let draw = hash(tag::PLACEMENT, e.as_slice()).prefix_u64();
    1 + (draw % span as u64) as usize
}

pub fn build_tree(
    records: impl IntoIterator<Item = PublicKeyRecord>,
    epoch: u64,
    seed: u64,
) -> Result<MerkleTree, LogError> {
    MerkleTree::build(records, epoch, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize) -> PublicKeyRecord {
        PublicKeyRecord::new(ClientId::indexed(i), vec![i as u8; 32], 0)
    }

    #[test]
    fn empty_directory_is_single_random_leaf() {
        let t = MerkleTree::build(vec![], 0, 1).unwrap();
        assert_eq!(t.nodes().len(), 1);
        assert!(matches!(t.nodes()[t.root_index()], Node::Empty { .. }));
        let u = MerkleTree::build(vec![], 0, 2).unwrap();
        assert_ne!(t.root_hash(), u.root_hash());
    }

    #[test]
    fn singleton_sits_at_depth_one_next_to_random_leaf() {
        let t = MerkleTree::build(vec![rec(0)], 0, 9).unwrap();
        let Node::Interior { left, right, .. } = &t.nodes()[t.root_index()] else {
            panic!("root should be interior");
        };
        let kinds: Vec<_> = [left, right]
            .iter()
            .map(|&&i| match &t.nodes()[i] {
                Node::Leaf { leaf, .. } => {
                    assert_eq!(leaf.depth, 1);
                    "leaf"
                }
                Node::Empty { .. } => "empty",
                Node::Interior { .. } => "interior",
            })
            .collect();
        let mut sorted = kinds.clone();
        sorted.sort();
        assert_eq!(sorted, vec!["empty", "leaf"]);
    }

    #[test]
    fn duplicate_and_empty_ids_are_rejected() {
        assert_eq!(
            MerkleTree::build(vec![rec(1), rec(1)], 0, 0).unwrap_err(),
            LogError::DuplicateClient(ClientId::indexed(1))
        );
        let bad = PublicKeyRecord::new(ClientId::new(""), vec![1], 0);
        assert_eq!(MerkleTree::build(vec![bad], 0, 0).unwrap_err(), LogError::EmptyClientId);
    }

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let recs: Vec<_> = (0..20).map(rec).collect();
        let a = MerkleTree::build(recs.clone(), 3, 42).unwrap();
        let b = MerkleTree::build(recs.iter().rev().cloned(), 3, 42).unwrap();
        let c = MerkleTree::build(recs.clone(), 3, 43).unwrap();
        let d = MerkleTree::build(recs, 4, 42).unwrap();
        assert_eq!(a.root_hash(), b.root_hash());
        assert_ne!(a.root_hash(), c.root_hash());
        assert_ne!(a.root_hash(), d.root_hash());
    }

    #[test]
    fn prefix_child_and_of_agree() {
        let d = identity_index(&ClientId::indexed(5));
        let mut p = Prefix::root();
        for i in 0..40 {
            assert_eq!(p, Prefix::of(&d, i));
            p = p.child(d.bit(i));
        }
        assert!(p.is_prefix_of(&d));
    }
}
