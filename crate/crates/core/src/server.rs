//! The key server: an honest directory plus a pluggable adversary that hands
//! out fake keys, equivocates on tree roots, partitions the auditing graph and
//! plays the anonymous-request guessing game.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{derive_seed, hash, tag, Digest, Encoder, KeyPair, Signature, VerifyKey};
use crate::id::ClientId;
use crate::simnet::anonymity::{AnonymousBatch, AsrBatch};
use crate::tlog::{
    generate_str, prove_inclusion, KeyResponse, LogError, MerkleTree, ProofOfInclusion, PublicKeyRecord, SignedTreeRoot,
};

/// Past trees kept per view for proofs served to clients catching up.
const RETAINED_TREES: usize = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ServerError {
    #[error("unknown subject {0}")]
    UnknownSubject(ClientId),
    #[error("request dropped by the server")]
    Dropped,
    #[error("client {client} already changed its key in epoch {epoch}")]
    RateLimited { client: ClientId, epoch: u64 },
    #[error("invalid adversary strategy: {0}")]
    InvalidStrategy(String),
    #[error(transparent)]
    Log(#[from] LogError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    Honest,
    PairMitm,
    ClientMitm,
    PairImpersonation,
    ClientImpersonation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackScope {
    NewConnections,
    #[default]
    ExistingConnections,
    Both,
}

/// What the adversary does with auditing traffic on a cut edge. Proofs of
/// misbehavior are dropped in either mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutMode {
    #[default]
    Drop,
    /// Replace a forwarded root with the recipient's own view of that epoch.
    Rewrite,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    pub groups: Vec<BTreeSet<ClientId>>,
    pub mode: CutMode,
}

impl Partition {
    pub fn group_of(&self, c: &ClientId) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(c))
    }

    /// True if `a` and `b` sit in different groups.
    pub fn separates(&self, a: &ClientId, b: &ClientId) -> bool {
        match (self.group_of(a), self.group_of(b)) {
            (Some(x), Some(y)) => x != y,
            _ => false,
        }
    }
}

/// Number of the target's contacts given the fake key (`f`) and, when the
/// target rotates, the real one (`r`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    pub f: usize,
    pub r: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Withhold {
    pub str: bool,
    pub lookups: bool,
    pub akr: bool,
}

impl Withhold {
    pub fn any(&self) -> bool {
        self.str || self.lookups || self.akr
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AdversaryStrategy {
    pub kind: AttackKind,
    /// The client whose key is faked.
    pub target: Option<ClientId>,
    /// The other end of a pair attack.
    pub peer: Option<ClientId>,
    pub scope: AttackScope,
    pub equivocate: bool,
    pub launch_epoch: u64,
    pub partition: Option<Partition>,
    /// Restore the real key this many ms after the fake one arrives.
    pub short_lived: Option<u64>,
    /// Fake key grants released per epoch instead of all at launch.
    pub stealthy_update_rate: Option<usize>,
    pub coverage: Option<Coverage>,
    /// The target uploads a fresh key at launch, so covered contacts receive
    /// an update either way.
    pub rotate_on_launch: bool,
    /// Requests from (or about) the target that go unanswered.
    pub withhold: Withhold,
    pub oob_drop: bool,
    /// Drop all client-to-client traffic to and from the target.
    pub isolate: bool,
}

impl AdversaryStrategy {
    pub fn honest() -> Self {
        Self::default()
    }

    pub fn is_honest(&self) -> bool {
        self.kind == AttackKind::Honest && !self.withhold.any() && !self.isolate && !self.oob_drop
    }

    pub fn validate(&self) -> Result<(), ServerError> {
        let bad = |m: &str| Err(ServerError::InvalidStrategy(m.to_string()));
        match self.kind {
            AttackKind::Honest => Ok(()),
            AttackKind::PairMitm | AttackKind::PairImpersonation => match (&self.target, &self.peer) {
                (Some(t), Some(p)) if t != p => Ok(()),
                (Some(_), Some(_)) => bad("pair attacks need two distinct clients"),
                _ => bad("pair attacks need a target and a peer"),
            },
            AttackKind::ClientMitm | AttackKind::ClientImpersonation => match self.target {
                Some(_) => Ok(()),
                None => bad("client attacks need a target"),
            },
        }
    }

    fn target_is(&self, c: &ClientId) -> bool {
        self.target.as_ref() == Some(c)
    }

    /// `(holder, subject)` pairs to fake on existing connections, given the
    /// contact lists at launch.
    pub fn plan_existing(
        &self,
        contacts_of: &dyn Fn(&ClientId) -> Vec<ClientId>,
    ) -> Result<Vec<(ClientId, ClientId)>, ServerError> {
        if self.kind == AttackKind::Honest || self.scope == AttackScope::NewConnections {
            return Ok(Vec::new());
        }
        self.validate()?;
        let target = self.target.clone().expect("validated");
        let mut out = Vec::new();
        match self.kind {
            AttackKind::PairImpersonation => {
                out.push((self.peer.clone().expect("validated"), target));
            }
            AttackKind::PairMitm => {
                let peer = self.peer.clone().expect("validated");
                out.push((peer.clone(), target.clone()));
                out.push((target, peer));
            }
            AttackKind::ClientImpersonation | AttackKind::ClientMitm => {
                let mut contacts = contacts_of(&target);
                contacts.sort();
                let f = match self.coverage {
                    Some(c) if c.f + c.r > contacts.len() => {
                        return Err(ServerError::InvalidStrategy(format!(
                            "coverage f+r = {} exceeds the target's {} contacts",
                            c.f + c.r,
                            contacts.len()
                        )))
                    }
                    Some(c) => c.f,
                    None => contacts.len(),
                };
                for c in contacts.into_iter().take(f) {
                    out.push((c.clone(), target.clone()));
                    if self.kind == AttackKind::ClientMitm {
                        out.push((target.clone(), c));
                    }
                }
            }
            AttackKind::Honest => unreachable!(),
        }
        Ok(out)
    }

    /// Whether a new-connection lookup by `holder` for `subject` is attacked.
    pub fn attacks_new_connection(&self, holder: &ClientId, subject: &ClientId) -> bool {
        if self.scope == AttackScope::ExistingConnections {
            return false;
        }
        let peer_is = |c: &ClientId| self.peer.as_ref() == Some(c);
        match self.kind {
            AttackKind::Honest => false,
            AttackKind::PairImpersonation => self.target_is(subject) && peer_is(holder),
            AttackKind::PairMitm => {
                (self.target_is(subject) && peer_is(holder)) || (self.target_is(holder) && peer_is(subject))
            }
            AttackKind::ClientImpersonation => self.target_is(subject),
            AttackKind::ClientMitm => self.target_is(subject) || self.target_is(holder),
        }
    }
}

/// Who is asking. Anonymous requests never reach `lookup_key`; they arrive
/// as batches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Requester {
    Client(ClientId),
    Setup,
}

#[derive(Clone, Debug)]
struct FakeKey {
    key: Vec<u8>,
    /// Holder and the epoch in which it was first handed the fake.
    holders: BTreeMap<ClientId, u64>,
}

#[derive(Debug)]
struct View {
    /// Subjects whose key this view replaces.
    subs: BTreeSet<ClientId>,
    history: Vec<SignedTreeRoot>,
    trees: VecDeque<MerkleTree>,
}

impl View {
    fn tree(&self, epoch: u64) -> Option<&MerkleTree> {
        self.trees.iter().rev().find(|t| t.epoch() == epoch)
    }

    fn current(&self) -> Option<&SignedTreeRoot> {
        self.history.last()
    }
}

/// The answer to a direct root request: every root since the client's last
/// known epoch, each with the client's own inclusion proof when available.
#[derive(Clone, Debug)]
pub struct StrDelivery {
    pub strs: Vec<SignedTreeRoot>,
    pub pois: Vec<Option<ProofOfInclusion>>,
}

#[derive(Debug)]
pub struct ServerState {
    key: KeyPair,
    seed: u64,
    directory: BTreeMap<ClientId, PublicKeyRecord>,
    staged: BTreeMap<ClientId, PublicKeyRecord>,
    last_upload: HashMap<ClientId, u64>,
    fakes: BTreeMap<ClientId, FakeKey>,
    views: Vec<View>,
    client_view: HashMap<ClientId, usize>,
    strategy: AdversaryStrategy,
    rng: ChaCha20Rng,
    sig_memo: HashMap<Digest, Signature>,
    build_trees: bool,
    monitor_epochs: u64,
    epoch: u64,
    committed: bool,
    stealth_queue: VecDeque<(ClientId, ClientId)>,
    signatures: u64,
}

impl ServerState {
    pub fn new(
        key: KeyPair,
        seed: u64,
        records: impl IntoIterator<Item = PublicKeyRecord>,
        strategy: AdversaryStrategy,
        build_trees: bool,
    ) -> Result<Self, ServerError> {
        strategy.validate()?;
        let mut directory = BTreeMap::new();
        for r in records {
            if r.client_id.is_empty() {
                return Err(LogError::EmptyClientId.into());
            }
            if directory.insert(r.client_id.clone(), r.clone()).is_some() {
                return Err(LogError::DuplicateClient(r.client_id).into());
            }
        }
        Ok(ServerState {
            rng: ChaCha20Rng::from_seed(derive_seed(seed, "adversary", 0)),
            key,
            seed,
            directory,
            staged: BTreeMap::new(),
            last_upload: HashMap::new(),
            fakes: BTreeMap::new(),
            views: vec![View {
                subs: BTreeSet::new(),
                history: Vec::new(),
                trees: VecDeque::new(),
            }],
            client_view: HashMap::new(),
            strategy,
            sig_memo: HashMap::new(),
            build_trees,
            monitor_epochs: 1,
            epoch: 0,
            committed: false,
            stealth_queue: VecDeque::new(),
            signatures: 0,
        })
    }

    /// Monitoring length the adversary assumes when counting which fake
    /// holders still check the key anonymously.
    pub fn set_monitor_epochs(&mut self, m: u64) {
        self.monitor_epochs = m.max(1);
    }

    pub fn verifying_key(&self) -> VerifyKey {
        self.key.verifying_key()
    }

    pub fn strategy(&self) -> &AdversaryStrategy {
        &self.strategy
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn signatures_made(&self) -> u64 {
        self.signatures
    }

    /// Honest: one main chain. Equivocating: one chain per distinct set of
    /// substitutions.
    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn view_of(&self, c: &ClientId) -> usize {
        self.client_view.get(c).copied().unwrap_or(0)
    }

    pub fn str_history(&self) -> &[SignedTreeRoot] {
        &self.views[0].history
    }

    pub fn alt_str_history(&self, view: usize) -> Option<&[SignedTreeRoot]> {
        self.views.get(view).filter(|_| view > 0).map(|v| v.history.as_slice())
    }

    pub fn directory(&self) -> &BTreeMap<ClientId, PublicKeyRecord> {
        &self.directory
    }

    /// The latest key a client uploaded, committed or not.
    pub fn current_key(&self, c: &ClientId) -> Option<&PublicKeyRecord> {
        self.staged.get(c).or_else(|| self.directory.get(c))
    }

    pub fn fake_directory(&self) -> BTreeMap<ClientId, Vec<u8>> {
        self.fakes.iter().map(|(s, f)| (s.clone(), f.key.clone())).collect()
    }

    pub fn is_fake(&self, subject: &ClientId, key: &[u8]) -> bool {
        self.fakes.get(subject).is_some_and(|f| f.key == key)
    }

    pub fn fake_holders(&self, subject: &ClientId) -> Vec<ClientId> {
        self.fakes
            .get(subject)
            .map(|f| f.holders.keys().cloned().collect())
            .unwrap_or_default()
    }

    /// Stages a key for the next epoch's tree.
    pub fn register(&mut self, client: &ClientId, public_key: Vec<u8>, epoch: u64) -> Result<(), ServerError> {
        if client.is_empty() {
            return Err(LogError::EmptyClientId.into());
        }
        if self.last_upload.get(client) == Some(&epoch) {
            return Err(ServerError::RateLimited {
                client: client.clone(),
                epoch,
            });
        }
        self.last_upload.insert(client.clone(), epoch);
        self.staged
            .insert(client.clone(), PublicKeyRecord::new(client.clone(), public_key, epoch));
        Ok(())
    }

    fn sign_memo(&mut self, msg: &[u8]) -> Signature {
        let h = hash(tag::VERIFY_MEMO, msg);
        if let Some(s) = self.sig_memo.get(&h) {
            return *s;
        }
        self.signatures += 1;
        let s = crate::crypto::sign(&self.key, msg);
        self.sig_memo.insert(h, s);
        s
    }

    #[allow(clippy::too_many_arguments)]
    fn respond(
        &mut self,
        subject: &ClientId,
        public_key: Vec<u8>,
        upload_epoch: u64,
        issued_at: u64,
        pending: bool,
        str: Option<SignedTreeRoot>,
        poi: Option<ProofOfInclusion>,
    ) -> KeyResponse {
        let msg = KeyResponse::signing_message(
            subject,
            &public_key,
            upload_epoch,
            self.epoch,
            issued_at,
            pending,
            str.as_ref(),
        );
        KeyResponse {
            signature: self.sign_memo(&msg),
            subject: subject.clone(),
            public_key,
            upload_epoch,
            epoch: self.epoch,
            issued_at,
            pending,
            str,
            poi,
        }
    }

    fn view_key_for(
        &self,
        client: &ClientId,
        epoch: u64,
        holder_subs: &BTreeMap<ClientId, BTreeSet<ClientId>>,
    ) -> BTreeSet<ClientId> {
        if !self.strategy.equivocate {
            return self.committed_fake_subjects(epoch);
        }
        if let Some(s) = holder_subs.get(client) {
            return s.clone();
        }
        // A bystander inside a partition sides with the largest view of its
        // own group that leaves its own key alone.
        let Some(p) = &self.strategy.partition else {
            return BTreeSet::new();
        };
        let Some(g) = p.group_of(client) else {
            return BTreeSet::new();
        };
        let mut sizes: BTreeMap<&BTreeSet<ClientId>, usize> = BTreeMap::new();
        for (h, subs) in holder_subs {
            if p.group_of(h) == Some(g) && !subs.contains(client) {
                *sizes.entry(subs).or_default() += 1;
            }
        }
        let mut best: Option<(&BTreeSet<ClientId>, usize)> = None;
        for (subs, n) in sizes {
            if best.is_none_or(|(_, m)| n > m) {
                best = Some((subs, n));
            }
        }
        best.map(|(s, _)| s.clone()).unwrap_or_default()
    }

    fn committed_fake_subjects(&self, epoch: u64) -> BTreeSet<ClientId> {
        self.fakes
            .iter()
            .filter(|(_, f)| f.holders.values().any(|&g| g < epoch))
            .map(|(s, _)| s.clone())
            .collect()
    }

    fn tree_seed(&self, epoch: u64, view: usize) -> u64 {
        let mut e = Encoder::new();
        e.u64(self.seed).u64(epoch).u64(view as u64);
        hash(tag::SEED, e.as_slice()).prefix_u64()
    }

    /// Commits epoch `epoch`: folds staged uploads into the directory, assigns
    /// every client to a view and signs one root per view.
    pub fn epoch_commit(&mut self, epoch: u64, timestamp: u64) -> Result<Vec<SignedTreeRoot>, ServerError> {
        let expected = if self.committed { self.epoch + 1 } else { 0 };
        if epoch != expected {
            return Err(LogError::EpochGap { expected, found: epoch }.into());
        }
        self.epoch = epoch;
        self.committed = true;
        for (c, r) in std::mem::take(&mut self.staged) {
            if r.upload_epoch < epoch {
                self.directory.insert(c, r);
            } else {
                self.staged.insert(c, r);
            }
        }

        let mut holder_subs: BTreeMap<ClientId, BTreeSet<ClientId>> = BTreeMap::new();
        for (s, f) in &self.fakes {
            for (h, &g) in &f.holders {
                if g < epoch {
                    holder_subs.entry(h.clone()).or_default().insert(s.clone());
                }
            }
        }
        if !self.strategy.equivocate {
            self.views[0].subs = self.committed_fake_subjects(epoch);
        }
        let clients: Vec<ClientId> = self.directory.keys().cloned().collect();
        let mut assignment = HashMap::with_capacity(clients.len());
        for c in &clients {
            let key = self.view_key_for(c, epoch, &holder_subs);
            let v = match self.views.iter().position(|v| v.subs == key) {
                Some(v) => v,
                None => {
                    let fork = self.views[0].history.clone();
                    self.views.push(View {
                        subs: key,
                        history: fork,
                        trees: VecDeque::new(),
                    });
                    self.views.len() - 1
                }
            };
            assignment.insert(c.clone(), v);
        }
        self.client_view = assignment;

        if !self.build_trees {
            return Ok(Vec::new());
        }
        let mut out = Vec::with_capacity(self.views.len());
        for v in 0..self.views.len() {
            let records: Vec<PublicKeyRecord> = self
                .directory
                .values()
                .map(|r| match self.views[v].subs.contains(&r.client_id) {
                    true => {
                        let f = &self.fakes[&r.client_id];
                        let g = f.holders.values().copied().min().unwrap_or(epoch);
                        PublicKeyRecord::new(r.client_id.clone(), f.key.clone(), g)
                    }
                    false => r.clone(),
                })
                .collect();
            let tree = MerkleTree::build(records, epoch, self.tree_seed(epoch, v))?;
            let s = generate_str(&tree, self.views[v].current(), &self.key, timestamp)?;
            self.signatures += 1;
            let view = &mut self.views[v];
            view.history.push(s.clone());
            view.trees.push_back(tree);
            if view.trees.len() > RETAINED_TREES {
                view.trees.pop_front();
            }
            out.push(s);
        }
        Ok(out)
    }

    /// Current root shown to `client`.
    pub fn str_for(&self, client: &ClientId) -> Option<&SignedTreeRoot> {
        self.views[self.view_of(client)].current()
    }

    /// Every root of `client`'s view after `last_known`, with the client's
    /// own proof in each.
    pub fn str_request(&mut self, client: &ClientId, last_known: Option<u64>) -> Result<StrDelivery, ServerError> {
        if self.strategy.withhold.str && self.strategy.target_is(client) && self.epoch >= self.strategy.launch_epoch {
            return Err(ServerError::Dropped);
        }
        let view = &self.views[self.view_of(client)];
        let from = last_known.map_or(0, |e| e + 1);
        let mut strs = Vec::new();
        let mut pois = Vec::new();
        for s in view.history.iter().filter(|s| s.epoch >= from) {
            strs.push(s.clone());
            pois.push(view.tree(s.epoch).and_then(|t| prove_inclusion(t, client).ok()));
        }
        Ok(StrDelivery { strs, pois })
    }

    /// Identified key lookup. `new_connection` marks the first lookup of a
    /// contact, which an adversary with a new-connection scope intercepts.
    pub fn lookup_key(
        &mut self,
        requester: &Requester,
        subject: &ClientId,
        now: u64,
        new_connection: bool,
    ) -> Result<KeyResponse, ServerError> {
        if !self.directory.contains_key(subject) && !self.staged.contains_key(subject) {
            return Err(ServerError::UnknownSubject(subject.clone()));
        }
        let issued_at = match requester {
            Requester::Setup => 0,
            Requester::Client(_) => now,
        };
        let epoch = self.epoch;
        if let Requester::Client(r) = requester {
            if self.strategy.withhold.lookups && self.strategy.target_is(r) && epoch >= self.strategy.launch_epoch {
                return Err(ServerError::Dropped);
            }
            if new_connection && epoch >= self.strategy.launch_epoch && self.strategy.attacks_new_connection(r, subject)
            {
                self.grant_fake(r, subject, epoch);
            }
            if let Some(f) = self.fakes.get(subject) {
                if f.holders.get(r) == Some(&epoch) {
                    let key = f.key.clone();
                    let str = self.str_for(r).cloned();
                    return Ok(self.respond(subject, key, epoch, issued_at, true, str, None));
                }
            }
        }
        let view_idx = match requester {
            Requester::Client(r) => self.view_of(r),
            Requester::Setup => 0,
        };
        if self.views[view_idx].subs.contains(subject) {
            let f = &self.fakes[subject];
            let key = f.key.clone();
            let upload = match requester {
                Requester::Client(r) => f.holders.get(r).copied(),
                Requester::Setup => None,
            }
            .unwrap_or_else(|| f.holders.values().copied().min().unwrap_or(epoch));
            let (str, poi) = self.proof_in_view(view_idx, subject);
            return Ok(self.respond(subject, key, upload, issued_at, false, str, poi));
        }
        if let Some(r) = self.staged.get(subject).cloned() {
            let str = self.views[view_idx].current().cloned();
            return Ok(self.respond(subject, r.public_key, r.upload_epoch, issued_at, true, str, None));
        }
        let r = self.directory[subject].clone();
        let (str, poi) = self.proof_in_view(view_idx, subject);
        Ok(self.respond(subject, r.public_key, r.upload_epoch, issued_at, false, str, poi))
    }

    fn proof_in_view(&self, view: usize, subject: &ClientId) -> (Option<SignedTreeRoot>, Option<ProofOfInclusion>) {
        let v = &self.views[view];
        let str = v.current().cloned();
        let poi = v.tree(self.epoch).and_then(|t| prove_inclusion(t, subject).ok());
        (str, poi)
    }

    fn fake_key_for(&self, subject: &ClientId) -> Vec<u8> {
        let mut e = Encoder::new();
        e.bytes(b"fake").bytes(subject.as_str().as_bytes()).u64(self.seed);
        hash(tag::CLIENT_KEY, e.as_slice()).0.to_vec()
    }

    fn grant_fake(&mut self, holder: &ClientId, subject: &ClientId, epoch: u64) {
        let key = self.fake_key_for(subject);
        self.fakes
            .entry(subject.clone())
            .or_insert_with(|| FakeKey {
                key,
                holders: BTreeMap::new(),
            })
            .holders
            .entry(holder.clone())
            .or_insert(epoch);
    }

    /// Starts the attack on existing connections. Returns the `(holder,
    /// subject)` pairs whose fake key should be pushed now; with a stealthy
    /// rate the rest are queued for later epochs.
    pub fn launch_attack(
        &mut self,
        contacts_of: &dyn Fn(&ClientId) -> Vec<ClientId>,
    ) -> Result<Vec<(ClientId, ClientId)>, ServerError> {
        let plan = self.strategy.plan_existing(contacts_of)?;
        self.stealth_queue.extend(plan);
        Ok(self.release_stealthy())
    }

    /// Releases the next batch of queued fake grants.
    pub fn release_stealthy(&mut self) -> Vec<(ClientId, ClientId)> {
        let n = self.strategy.stealthy_update_rate.unwrap_or(self.stealth_queue.len());
        let out: Vec<_> = (0..n).map_while(|_| self.stealth_queue.pop_front()).collect();
        let epoch = self.epoch;
        for (h, s) in &out {
            self.grant_fake(h, s, epoch);
        }
        out
    }

    pub fn has_queued_grants(&self) -> bool {
        !self.stealth_queue.is_empty()
    }

    /// Stops faking `subject` to `holder` (short-lived attack).
    pub fn restore(&mut self, holder: &ClientId, subject: &ClientId) {
        if let Some(f) = self.fakes.get_mut(subject) {
            f.holders.remove(holder);
            if f.holders.is_empty() {
                self.fakes.remove(subject);
            }
        }
    }

    /// Assigns answers to a batch of indistinguishable key requests.
    ///
    /// The adversary must show the fake key to the holders still monitoring
    /// it and the real key to everyone else; it only knows how many of each
    /// to expect, so it picks uniformly which requests get the real key.
    pub fn decide_anonymous_response(
        &mut self,
        batch: &AnonymousBatch,
        issued_at: u64,
        online: &dyn Fn(&ClientId) -> bool,
    ) -> Vec<Option<KeyResponse>> {
        let subject = &batch.subject;
        let Some(real) = self.current_key(subject).cloned() else {
            return vec![None; batch.count];
        };
        if self.strategy.withhold.akr && self.strategy.target_is(subject) && batch.epoch >= self.strategy.launch_epoch {
            return vec![None; batch.count];
        }
        let epoch = batch.epoch;
        let m = self.monitor_epochs;
        let (fake_key, fake_upload, monitoring) = match self.fakes.get(subject) {
            Some(f) => {
                let n = f
                    .holders
                    .iter()
                    .filter(|(h, &g)| g < epoch && epoch <= g + m && online(h))
                    .count();
                let g = f.holders.values().copied().min().unwrap_or(epoch);
                (Some(f.key.clone()), g, n)
            }
            None => (None, 0, 0),
        };
        let k = batch.count;
        let real_resp = self.respond(
            subject,
            real.public_key,
            real.upload_epoch,
            issued_at,
            false,
            None,
            None,
        );
        let Some(fake_key) = fake_key.filter(|_| monitoring > 0) else {
            return vec![Some(real_resp); k];
        };
        let fake_resp = self.respond(subject, fake_key, fake_upload, issued_at, false, None, None);
        let n_real = k.saturating_sub(monitoring);
        let mut out = vec![Some(fake_resp); k];
        for i in index::sample(&mut self.rng, k, n_real) {
            out[i] = Some(real_resp.clone());
        }
        out
    }

    /// Assigns roots to a batch of anonymous root requests: as many copies of
    /// each view's root as that view has online members, shuffled.
    pub fn serve_asr(&mut self, batch: &AsrBatch, online: &dyn Fn(&ClientId) -> bool) -> Vec<SignedTreeRoot> {
        let mut counts = vec![0usize; self.views.len()];
        let mut members: Vec<(&ClientId, &usize)> = self.client_view.iter().collect();
        members.sort();
        for (c, &v) in members {
            if online(c) {
                counts[v] += 1;
            }
        }
        let mut out = Vec::with_capacity(batch.count);
        for (v, &n) in counts.iter().enumerate() {
            if let Some(s) = self.views[v].current() {
                out.extend(std::iter::repeat_n(s.clone(), n));
            }
        }
        let Some(main) = self.views[0].current().cloned() else {
            return Vec::new();
        };
        out.resize(batch.count, main);
        out.shuffle(&mut self.rng);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::VerifyCache;
    use crate::tlog::verify_poi;

    fn ids(n: usize) -> Vec<ClientId> {
        (0..n).map(ClientId::indexed).collect()
    }

    fn server(n: usize, strategy: AdversaryStrategy) -> ServerState {
        let recs = ids(n)
            .into_iter()
            .map(|c| PublicKeyRecord::new(c.clone(), c.as_str().as_bytes().to_vec(), 0));
        ServerState::new(KeyPair::from_seed([9; 32]), 1, recs, strategy, true).unwrap()
    }

    fn star(center: usize, n: usize) -> impl Fn(&ClientId) -> Vec<ClientId> {
        move |c: &ClientId| {
            if *c == ClientId::indexed(center) {
                ids(n).into_iter().filter(|x| *x != ClientId::indexed(center)).collect()
            } else {
                vec![ClientId::indexed(center)]
            }
        }
    }

    #[test]
    fn honest_chain_and_lookups_verify() {
        let mut s = server(5, AdversaryStrategy::honest());
        let pk = s.verifying_key();
        for e in 0..3 {
            s.epoch_commit(e, e * 100).unwrap();
        }
        let h = s.str_history();
        assert!(h.windows(2).all(|w| crate::tlog::verify_str_chain(&w[0], &w[1], &pk)));
        let bob = ClientId::indexed(1);
        let r = s
            .lookup_key(&Requester::Client(ClientId::indexed(0)), &bob, 250, false)
            .unwrap();
        assert!(verify_poi(
            r.str.as_ref().unwrap(),
            r.poi.as_ref().unwrap(),
            &bob,
            &r.public_key,
            &pk
        ));
        assert!(r.verify_with_inclusion(&pk, &mut VerifyCache::new()));
        assert_eq!(s.view_count(), 1);
        assert!(s.fake_directory().is_empty());
    }

    #[test]
    fn second_update_in_one_epoch_is_rate_limited() {
        let mut s = server(2, AdversaryStrategy::honest());
        s.epoch_commit(0, 0).unwrap();
        let c = ClientId::indexed(0);
        s.register(&c, vec![1], 0).unwrap();
        assert!(matches!(
            s.register(&c, vec![2], 0),
            Err(ServerError::RateLimited { .. })
        ));
        s.epoch_commit(1, 10).unwrap();
        assert_eq!(s.directory()[&c].public_key, vec![1]);
        s.register(&c, vec![2], 1).unwrap();
    }

    #[test]
    fn equivocation_forks_linear_branches() {
        let strategy = AdversaryStrategy {
            kind: AttackKind::ClientMitm,
            target: Some(ClientId::indexed(0)),
            equivocate: true,
            launch_epoch: 1,
            ..Default::default()
        };
        let mut s = server(4, strategy);
        let pk = s.verifying_key();
        s.epoch_commit(0, 0).unwrap();
        s.epoch_commit(1, 10).unwrap();
        let pairs = s.launch_attack(&star(0, 4)).unwrap();
        assert_eq!(pairs.len(), 6);
        let roots = s.epoch_commit(2, 20).unwrap();
        assert_eq!(roots.len(), 3);
        let target_root = s.str_for(&ClientId::indexed(0)).unwrap().clone();
        let contact_root = s.str_for(&ClientId::indexed(1)).unwrap().clone();
        assert_ne!(target_root.root_hash, contact_root.root_hash);
        for v in 1..s.view_count() {
            let h = s.alt_str_history(v).unwrap();
            assert!(h.windows(2).all(|w| crate::tlog::verify_str_chain(&w[0], &w[1], &pk)));
        }
        let r = s
            .lookup_key(
                &Requester::Client(ClientId::indexed(1)),
                &ClientId::indexed(0),
                25,
                false,
            )
            .unwrap();
        assert!(s.is_fake(&ClientId::indexed(0), &r.public_key));
        assert!(r.verify_with_inclusion(&pk, &mut VerifyCache::new()));
        let own = s.str_request(&ClientId::indexed(0), Some(1)).unwrap();
        let poi = own.pois[0].as_ref().unwrap();
        assert!(verify_poi(&own.strs[0], poi, &ClientId::indexed(0), b"c0000", &pk));
    }

    #[test]
    fn non_equivocating_fake_is_visible_to_owner() {
        let strategy = AdversaryStrategy {
            kind: AttackKind::ClientImpersonation,
            target: Some(ClientId::indexed(0)),
            launch_epoch: 0,
            ..Default::default()
        };
        let mut s = server(3, strategy);
        let pk = s.verifying_key();
        s.epoch_commit(0, 0).unwrap();
        s.launch_attack(&star(0, 3)).unwrap();
        s.epoch_commit(1, 10).unwrap();
        assert_eq!(s.view_count(), 1);
        let own = s.str_request(&ClientId::indexed(0), Some(0)).unwrap();
        let poi = own.pois[0].as_ref().unwrap();
        assert!(!verify_poi(&own.strs[0], poi, &ClientId::indexed(0), b"c0000", &pk));
    }

    #[test]
    fn anonymous_guess_is_uniform() {
        let strategy = AdversaryStrategy {
            kind: AttackKind::PairImpersonation,
            target: Some(ClientId::indexed(0)),
            peer: Some(ClientId::indexed(1)),
            ..Default::default()
        };
        let mut s = server(2, strategy);
        s.set_monitor_epochs(10);
        s.epoch_commit(0, 0).unwrap();
        s.launch_attack(&|_: &ClientId| Vec::new()).unwrap();
        s.epoch_commit(1, 10).unwrap();
        let batch = AnonymousBatch {
            epoch: 1,
            subject: ClientId::indexed(0),
            count: 2,
        };
        let mut first_real = 0;
        let trials = 10_000;
        for _ in 0..trials {
            let out = s.decide_anonymous_response(&batch, 11, &|_| true);
            let real: Vec<bool> = out
                .iter()
                .map(|r| !s.is_fake(&batch.subject, &r.as_ref().unwrap().public_key))
                .collect();
            assert_eq!(real.iter().filter(|&&x| x).count(), 1);
            first_real += real[0] as usize;
        }
        let p = first_real as f64 / trials as f64;
        assert!((p - 0.5).abs() < 0.02, "p = {p}");
    }

    #[test]
    fn honest_anonymous_answers_are_real() {
        let mut s = server(3, AdversaryStrategy::honest());
        s.epoch_commit(0, 0).unwrap();
        let batch = AnonymousBatch {
            epoch: 0,
            subject: ClientId::indexed(2),
            count: 5,
        };
        let out = s.decide_anonymous_response(&batch, 1, &|_| true);
        assert!(out.iter().all(|r| r.as_ref().unwrap().public_key == b"c0002"));
        let roots = s.serve_asr(&AsrBatch { epoch: 0, count: 3 }, &|_| true);
        assert!(roots.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn strategy_validation() {
        let s = AdversaryStrategy {
            kind: AttackKind::PairMitm,
            target: Some(ClientId::indexed(0)),
            peer: Some(ClientId::indexed(0)),
            ..Default::default()
        };
        assert!(s.validate().is_err());
        let s = AdversaryStrategy {
            kind: AttackKind::ClientMitm,
            target: Some(ClientId::indexed(0)),
            coverage: Some(Coverage { f: 3, r: 1 }),
            ..Default::default()
        };
        assert!(s.plan_existing(&star(0, 4)).is_err());
    }
}
