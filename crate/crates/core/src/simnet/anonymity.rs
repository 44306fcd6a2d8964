//! Anonymity network abstraction.
//!
//! Requests issued at the start of an epoch are pooled per subject, their
//! senders stripped and their order permuted. The server sees only a batch
//! with a count; the network keeps the routing table to return each answer
//! to its true sender.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::id::ClientId;

/// What the server learns about the anonymous key requests for one subject.
/// There is deliberately no sender field.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnonymousBatch {
    pub epoch: u64,
    pub subject: ClientId,
    pub count: usize,
}

/// What the server learns about the anonymous root requests of one epoch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsrBatch {
    pub epoch: u64,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RequestKind {
    Key,
    Root,
}

/// Per-epoch pool of anonymous requests, keyed by `(kind, subject)`.
#[derive(Debug, Default)]
pub struct AnonymityNetwork {
    pending: BTreeMap<(RequestKind, Option<ClientId>), Vec<usize>>,
}

/// A batch ready for the server plus the hidden routing for its answers:
/// answer `i` goes to sender `route[i]`.
#[derive(Debug)]
pub struct RoutedBatch {
    pub kind: RequestKind,
    pub subject: Option<ClientId>,
    pub route: Vec<usize>,
}

impl RoutedBatch {
    pub fn key_batch(&self, epoch: u64) -> Option<AnonymousBatch> {
        Some(AnonymousBatch {
            epoch,
            subject: self.subject.clone()?,
            count: self.route.len(),
        })
    }

    pub fn root_batch(&self, epoch: u64) -> AsrBatch {
        AsrBatch {
            epoch,
            count: self.route.len(),
        }
    }
}

impl AnonymityNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn submit_key_request(&mut self, sender: usize, subject: ClientId) {
        self.pending
            .entry((RequestKind::Key, Some(subject)))
            .or_default()
            .push(sender);
    }

    pub fn submit_root_request(&mut self, sender: usize) {
        self.pending.entry((RequestKind::Root, None)).or_default().push(sender);
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Drains the pool into permuted batches, in a deterministic key order.
    pub fn flush<R: Rng>(&mut self, rng: &mut R) -> Vec<RoutedBatch> {
        std::mem::take(&mut self.pending)
            .into_iter()
            .map(|((kind, subject), mut route)| {
                route.shuffle(rng);
                RoutedBatch { kind, subject, route }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn batch_exposes_only_count() {
        let mut net = AnonymityNetwork::new();
        for s in [3, 1, 2] {
            net.submit_key_request(s, ClientId::new("bob"));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let b = net.flush(&mut rng);
        assert_eq!(b.len(), 1);
        let batch = b[0].key_batch(4).unwrap();
        assert_eq!(batch.count, 3);
        let json = serde_json::to_string(&batch).unwrap();
        assert_eq!(json, r#"{"epoch":4,"subject":"bob","count":3}"#);
        assert!(net.is_empty());
    }

    #[test]
    fn permutation_is_seed_deterministic() {
        let run = |seed| {
            let mut net = AnonymityNetwork::new();
            for s in 0..20 {
                net.submit_root_request(s);
            }
            net.flush(&mut ChaCha20Rng::seed_from_u64(seed)).remove(0).route
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }
}
