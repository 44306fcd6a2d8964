//! The key server's transparency log: a Merkle binary prefix tree over all
//! registered keys, the hash-chained signed tree roots, inclusion proofs, and
//! proofs of misbehavior.

mod pom;
mod proof;
mod response;
mod root;
mod tree;

use thiserror::Error;

use crate::crypto::CodecError;
use crate::id::ClientId;

pub use pom::{adjudicate, adjudicate_cached, make_pom_conflict, make_pom_duplicate, PomKind, ProofOfMisbehavior};
pub use proof::{prove_inclusion, verify_poi, ProofOfInclusion, SiblingHash, Side};
pub use response::KeyResponse;
#[cfg(test)]
pub(crate) use root::sign_root;
pub use root::{generate_str, verify_str_chain, SignedTreeRoot};
pub use tree::{
    build_tree, identity_index, interior_hash, key_binding, leaf_hash, InteriorNode, LeafNode, MerkleTree, Node,
    Prefix, PublicKeyRecord,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogError {
    #[error("client {0} appears more than once")]
    DuplicateClient(ClientId),
    #[error("empty client identifier")]
    EmptyClientId,
    #[error("tree epoch {found} does not follow previous root epoch (expected {expected})")]
    EpochGap { expected: u64, found: u64 },
    #[error("client {0} is not registered")]
    NotRegistered(ClientId),
    #[error("evidence does not prove misbehavior: {0}")]
    NotConflicting(&'static str),
    #[error(transparent)]
    Codec(#[from] CodecError),
}
