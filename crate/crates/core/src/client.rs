//! Per-client defense logic.
//!
//! A client is a state machine driven by the simulator: every handler takes
//! the current time and shared context, updates local state, and queues
//! [`Action`]s (messages and timers) for the engine to carry out. Detections
//! are appended to the context as [`DetectionEvent`]s.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use hmac::{Hmac, Mac};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::crypto::{Digest, Encoder, VerifyCache, VerifyKey};
use crate::id::ClientId;
use crate::server::StrDelivery;
use crate::simnet::clock::ClockConfig;
use crate::tlog::{
    adjudicate_cached, make_pom_conflict, make_pom_duplicate, KeyResponse, PomKind, ProofOfMisbehavior, SignedTreeRoot,
};

type HmacSha256 = Hmac<Sha256>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Defense {
    #[default]
    Ktca,
    Akm,
    Ktaca,
}

impl Defense {
    pub fn uses_tree(self) -> bool {
        self != Defense::Akm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Cause {
    ConflictingStr,
    InvalidPoI,
    /// A root that does not chain to the client's previous root.
    InvalidStr,
    MissingStr,
    MissingPoI,
    AkrMismatch,
    AkrTimeout,
    AsrMismatch,
    DuplicateKey,
    MassKeyUpdate,
    Isolation,
    OobTimeout,
    OobMismatch,
}

impl Cause {
    pub const ALL: [Cause; 13] = [
        Cause::ConflictingStr,
        Cause::InvalidPoI,
        Cause::InvalidStr,
        Cause::MissingStr,
        Cause::MissingPoI,
        Cause::AkrMismatch,
        Cause::AkrTimeout,
        Cause::AsrMismatch,
        Cause::DuplicateKey,
        Cause::MassKeyUpdate,
        Cause::Isolation,
        Cause::OobTimeout,
        Cause::OobMismatch,
    ];

    /// Heuristic monitors may fire on honest runs; every other cause is a
    /// hard detection.
    pub fn is_heuristic(self) -> bool {
        matches!(self, Cause::MassKeyUpdate | Cause::Isolation)
    }

    pub fn name(self) -> &'static str {
        match self {
            Cause::ConflictingStr => "ConflictingSTR",
            Cause::InvalidPoI => "InvalidPoI",
            Cause::InvalidStr => "InvalidSTR",
            Cause::MissingStr => "MissingSTR",
            Cause::MissingPoI => "MissingPoI",
            Cause::AkrMismatch => "AKRMismatch",
            Cause::AkrTimeout => "AKRTimeout",
            Cause::AsrMismatch => "ASRMismatch",
            Cause::DuplicateKey => "DuplicateKey",
            Cause::MassKeyUpdate => "MassKeyUpdate",
            Cause::Isolation => "Isolation",
            Cause::OobTimeout => "OOBTimeout",
            Cause::OobMismatch => "OOBMismatch",
        }
    }
}

impl std::fmt::Display for Cause {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub detector: ClientId,
    pub epoch: u64,
    pub sim_time: u64,
    pub cause: Cause,
    pub pom: Option<ProofOfMisbehavior>,
    pub attack_tag: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorPolicy {
    /// Epochs a freshly received contact key is monitored anonymously.
    pub m: u64,
    pub mass_update_enabled: bool,
    pub mass_update_threshold: f64,
    /// Window length in epochs.
    pub mass_update_window: u64,
    pub mass_update_min_count: usize,
    pub isolation_enabled: bool,
    /// Probes per epoch; defaults to the number of contacts.
    pub isolation_subintervals: Option<usize>,
    pub prevention_enabled: bool,
    /// Interval between application messages to each contact.
    pub app_interval: Option<u64>,
}

impl Default for MonitorPolicy {
    fn default() -> Self {
        MonitorPolicy {
            m: 10,
            mass_update_enabled: false,
            mass_update_threshold: 0.2,
            mass_update_window: 1,
            mass_update_min_count: 3,
            isolation_enabled: false,
            isolation_subintervals: None,
            prevention_enabled: false,
            app_interval: None,
        }
    }
}

impl MonitorPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.m < 1 {
            return Err("policy.m must be at least 1".into());
        }
        if !(self.mass_update_threshold > 0.0 && self.mass_update_threshold <= 1.0) {
            return Err("policy.mass_update_threshold must be in (0, 1]".into());
        }
        if self.mass_update_window < 1 {
            return Err("policy.mass_update_window must be at least 1 epoch".into());
        }
        if self.isolation_subintervals == Some(0) {
            return Err("policy.isolation_subintervals must be positive".into());
        }
        if self.app_interval == Some(0) {
            return Err("policy.app_interval must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LookupPurpose {
    NewConnection,
    Deferred,
}

/// Every message the simulated parties exchange.
#[derive(Clone, Debug)]
pub enum Msg {
    StrRequest { last_known: Option<u64> },
    Lookup { subject: ClientId, purpose: LookupPurpose },
    Upload { key: Vec<u8> },
    StrReply(StrDelivery),
    LookupReply { resp: KeyResponse, purpose: LookupPurpose },
    KeyPush { resp: KeyResponse },
    Gossip { str: SignedTreeRoot },
    Pom { pom: ProofOfMisbehavior },
    Probe { nonce: u64 },
    ProbeReply { nonce: u64 },
    App { key: Vec<u8> },
    AkrReply { resp: KeyResponse },
    AsrReply { str: SignedTreeRoot },
    OobRequest { key: Vec<u8>, nonce: u64, mac: Vec<u8> },
    OobReply { key: Vec<u8>, nonce: u64, mac: Vec<u8> },
}

impl Msg {
    /// Bytes the message occupies on the wire.
    pub fn wire_bytes(&self) -> u64 {
        let str_bytes = SignedTreeRoot::WIRE_BYTES;
        match self {
            Msg::StrRequest { .. } | Msg::Probe { .. } | Msg::ProbeReply { .. } => 8,
            Msg::Lookup { subject, .. } => subject.as_str().len() as u64 + 1,
            Msg::Upload { key } | Msg::App { key } => key.len() as u64,
            Msg::StrReply(d) => d
                .strs
                .iter()
                .zip(&d.pois)
                .map(|(_, p)| str_bytes + p.as_ref().map_or(0, |p| p.wire_bytes()))
                .sum(),
            Msg::LookupReply { resp, .. } | Msg::KeyPush { resp } | Msg::AkrReply { resp } => resp.wire_bytes(),
            Msg::Gossip { .. } | Msg::AsrReply { .. } => str_bytes,
            Msg::Pom { pom } => pom.wire_bytes(),
            Msg::OobRequest { key, mac, .. } | Msg::OobReply { key, mac, .. } => {
                key.len() as u64 + 8 + mac.len() as u64
            }
        }
    }

    pub fn class(&self) -> &'static str {
        match self {
            Msg::StrRequest { .. } | Msg::StrReply(_) => "str_direct",
            Msg::Lookup { .. } | Msg::LookupReply { .. } | Msg::KeyPush { .. } => "key_lookup",
            Msg::Upload { .. } => "upload",
            Msg::Gossip { .. } => "str_exchange",
            Msg::Pom { .. } => "pom",
            Msg::Probe { .. } | Msg::ProbeReply { .. } => "isolation_probe",
            Msg::App { .. } => "app",
            Msg::AkrReply { .. } => "akr",
            Msg::AsrReply { .. } => "asr",
            Msg::OobRequest { .. } | Msg::OobReply { .. } => "oob",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum TimerKind {
    StrTimeout { epoch: u64 },
    AsrTimeout { epoch: u64 },
    LookupTimeout { contact: usize, token: u64 },
    AkrTimeout { subject: usize, epoch: u64 },
    OobTimeout { peer: usize, token: u64 },
    GateRelease { peer: usize, token: u64 },
    Probe { epoch: u64 },
    IsolationCheck { epoch: u64 },
    AppTick { epoch: u64 },
}

#[derive(Clone, Debug)]
pub enum Action {
    ToServer(Msg),
    ToContact(usize, Msg),
    /// Anonymous key request about client `usize` (possibly oneself).
    AnonymousKey(usize),
    AnonymousRoot,
    Oob(usize, Msg),
    Timer {
        at: u64,
        kind: TimerKind,
    },
}

/// Shared per-trial context handed to every handler.
pub struct ClientCtx<'a> {
    pub now: u64,
    pub epoch: u64,
    pub clock: ClockConfig,
    pub defense: Defense,
    pub policy: &'a MonitorPolicy,
    pub server: &'a VerifyKey,
    pub cache: &'a mut VerifyCache,
    pub rng: &'a mut ChaCha20Rng,
    pub ids: &'a [ClientId],
    /// Diameter bound used for the prevention-mode hold.
    pub diameter: usize,
    pub attack_tag: &'a str,
    pub out: Vec<Action>,
    pub events: Vec<DetectionEvent>,
}

impl ClientCtx<'_> {
    fn send(&mut self, a: Action) {
        self.out.push(a);
    }

    fn timer(&mut self, at: u64, kind: TimerKind) {
        self.out.push(Action::Timer { at, kind });
    }

    fn epoch_start(&self) -> u64 {
        self.clock.epoch_start(self.epoch)
    }
}

#[derive(Clone, Debug)]
struct HeldKey {
    key: Vec<u8>,
    upload_epoch: u64,
    pending: bool,
    issued_at: u64,
    changed_epoch: u64,
    changed_at: u64,
    previous: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Gate {
    Open,
    Hold { token: u64 },
    AwaitOob { token: u64 },
    Blocked,
}

#[derive(Debug, Default)]
struct EpochState {
    own: Option<SignedTreeRoot>,
    seen: Vec<SignedTreeRoot>,
    sent: HashSet<(Digest, usize)>,
    received: HashSet<(Digest, usize)>,
    relayed: bool,
    awaiting_str: bool,
    awaiting_asr: bool,
    asr: Option<SignedTreeRoot>,
    non_isolated: bool,
    probes_sent: u64,
    mass_reported: bool,
}

#[derive(Debug)]
pub struct ClientState {
    pub index: usize,
    pub id: ClientId,
    own_keys: Vec<(Vec<u8>, u64, u64)>,
    contacts: BTreeSet<usize>,
    keys: BTreeMap<usize, HeldKey>,
    history: BTreeMap<usize, Vec<KeyResponse>>,
    last_str: Option<SignedTreeRoot>,
    ep: EpochState,
    held_pom: Option<ProofOfMisbehavior>,
    pom_time: Option<u64>,
    flooded: bool,
    monitor_until: BTreeMap<usize, u64>,
    awaiting_akr: BTreeSet<(usize, u64)>,
    lookups: BTreeMap<usize, (LookupPurpose, u64)>,
    updates: Vec<(u64, usize)>,
    oob: BTreeMap<usize, [u8; 32]>,
    gates: BTreeMap<usize, Gate>,
    app_held: BTreeMap<usize, u64>,
    next_token: u64,
    reported: HashSet<(Cause, u64)>,
    first_core: Option<(u64, u64, Cause)>,
    pub disconnected: bool,
    pub probes_sent: u64,
}

impl ClientState {
    pub fn new(index: usize, id: ClientId, key: Vec<u8>) -> Self {
        ClientState {
            index,
            id,
            own_keys: vec![(key, 0, 0)],
            contacts: BTreeSet::new(),
            keys: BTreeMap::new(),
            history: BTreeMap::new(),
            last_str: None,
            ep: EpochState::default(),
            held_pom: None,
            pom_time: None,
            flooded: false,
            monitor_until: BTreeMap::new(),
            awaiting_akr: BTreeSet::new(),
            lookups: BTreeMap::new(),
            updates: Vec::new(),
            oob: BTreeMap::new(),
            gates: BTreeMap::new(),
            app_held: BTreeMap::new(),
            next_token: 0,
            reported: HashSet::new(),
            first_core: None,
            disconnected: false,
            probes_sent: 0,
        }
    }

    pub fn own_key(&self) -> &[u8] {
        &self.own_keys.last().expect("at least one key").0
    }

    /// The key the server should have committed in `epoch`'s tree.
    fn committed_own_key(&self, epoch: u64) -> Option<&[u8]> {
        self.own_keys
            .iter()
            .rev()
            .find(|(_, u, _)| *u < epoch || *u == 0)
            .map(|(k, _, _)| k.as_slice())
    }

    fn own_key_at(&self, t: u64) -> &[u8] {
        self.own_keys
            .iter()
            .rev()
            .find(|(_, _, at)| *at <= t)
            .map_or(self.own_key(), |(k, _, _)| k.as_slice())
    }

    pub fn contacts(&self) -> impl Iterator<Item = usize> + '_ {
        self.contacts.iter().copied()
    }

    pub fn held_key(&self, contact: usize) -> Option<&[u8]> {
        self.keys.get(&contact).map(|h| h.key.as_slice())
    }

    pub fn held_pom(&self) -> Option<&ProofOfMisbehavior> {
        self.held_pom.as_ref()
    }

    pub fn pom_time(&self) -> Option<u64> {
        self.pom_time
    }

    pub fn first_core_detection(&self) -> Option<(u64, u64, Cause)> {
        self.first_core
    }

    pub fn last_str(&self) -> Option<&SignedTreeRoot> {
        self.last_str.as_ref()
    }

    /// Bytes of key-update history held for contacts.
    pub fn history_bytes(&self) -> u64 {
        self.history
            .values()
            .flat_map(|v| v.iter())
            .map(KeyResponse::wire_bytes)
            .sum()
    }

    pub fn set_oob_key(&mut self, peer: usize, key: [u8; 32]) {
        self.oob.insert(peer, key);
    }

    fn token(&mut self) -> u64 {
        self.next_token += 1;
        self.next_token
    }

    fn detect(&mut self, ctx: &mut ClientCtx, cause: Cause, pom: Option<ProofOfMisbehavior>) {
        if !self.reported.insert((cause, ctx.epoch)) {
            return;
        }
        if !cause.is_heuristic() && self.first_core.is_none() {
            self.first_core = Some((ctx.epoch, ctx.now, cause));
        }
        ctx.events.push(DetectionEvent {
            detector: self.id.clone(),
            epoch: ctx.epoch,
            sim_time: ctx.now,
            cause,
            pom,
            attack_tag: ctx.attack_tag.to_string(),
        });
    }

    fn hold_pom(&mut self, ctx: &mut ClientCtx, pom: ProofOfMisbehavior, except: Option<usize>) {
        if self.held_pom.is_some() {
            return;
        }
        self.pom_time = Some(ctx.now);
        self.held_pom = Some(pom.clone());
        if ctx.defense == Defense::Ktca && !self.flooded {
            self.flooded = true;
            for c in self.contacts.iter().copied().filter(|&c| Some(c) != except) {
                ctx.send(Action::ToContact(c, Msg::Pom { pom: pom.clone() }));
            }
        }
    }

    /// Installs a contact key obtained at bootstrap.
    pub fn install_contact(&mut self, contact: usize, resp: KeyResponse) {
        self.contacts.insert(contact);
        self.keys.insert(
            contact,
            HeldKey {
                key: resp.public_key.clone(),
                upload_epoch: resp.upload_epoch,
                pending: false,
                issued_at: resp.issued_at,
                changed_epoch: 0,
                changed_at: 0,
                previous: None,
            },
        );
        self.history.entry(contact).or_default().push(resp);
        self.gates.insert(contact, Gate::Open);
    }

    /// Drops per-epoch waits when the client goes offline.
    pub fn go_offline(&mut self) {
        self.ep = EpochState::default();
        self.awaiting_akr.clear();
        self.lookups.clear();
    }

    pub fn on_epoch_start(&mut self, ctx: &mut ClientCtx) {
        self.ep = EpochState::default();
        let t = ctx.now;
        match ctx.defense {
            Defense::Ktca | Defense::Ktaca => {
                self.ep.awaiting_str = true;
                ctx.send(Action::ToServer(Msg::StrRequest {
                    last_known: self.last_str.as_ref().map(|s| s.epoch),
                }));
                let bound = if ctx.defense == Defense::Ktca {
                    2 * ctx.clock.delta
                } else {
                    2 * ctx.clock.big_delta
                };
                ctx.timer(t + bound, TimerKind::StrTimeout { epoch: ctx.epoch });
                if ctx.defense == Defense::Ktaca {
                    self.ep.awaiting_asr = true;
                    ctx.send(Action::AnonymousRoot);
                    ctx.timer(t + 2 * ctx.clock.big_delta, TimerKind::AsrTimeout { epoch: ctx.epoch });
                }
                let deferred: Vec<usize> = self
                    .keys
                    .iter()
                    .filter(|(_, h)| h.pending && h.upload_epoch < ctx.epoch)
                    .map(|(&c, _)| c)
                    .collect();
                for c in deferred {
                    self.lookup(ctx, c, LookupPurpose::Deferred);
                }
            }
            Defense::Akm => {
                self.awaiting_akr.insert((self.index, ctx.epoch));
                ctx.send(Action::AnonymousKey(self.index));
                ctx.timer(
                    t + 2 * ctx.clock.big_delta,
                    TimerKind::AkrTimeout {
                        subject: self.index,
                        epoch: ctx.epoch,
                    },
                );
                self.monitor_until.retain(|_, until| *until >= ctx.epoch);
                let monitored: Vec<usize> = self.monitor_until.keys().copied().collect();
                for c in monitored {
                    self.awaiting_akr.insert((c, ctx.epoch));
                    ctx.send(Action::AnonymousKey(c));
                    ctx.timer(
                        t + 2 * ctx.clock.big_delta,
                        TimerKind::AkrTimeout {
                            subject: c,
                            epoch: ctx.epoch,
                        },
                    );
                }
            }
        }
        if ctx.policy.isolation_enabled && !self.contacts.is_empty() {
            let x = ctx.policy.isolation_subintervals.unwrap_or(self.contacts.len()) as u64;
            let sub = ctx.clock.epoch_len / x;
            for k in 0..x {
                ctx.timer(t + k * sub + sub / 2, TimerKind::Probe { epoch: ctx.epoch });
            }
            ctx.timer(
                ctx.clock.epoch_start(ctx.epoch + 1),
                TimerKind::IsolationCheck { epoch: ctx.epoch },
            );
        }
        if let Some(iv) = ctx.policy.app_interval {
            let end = ctx.clock.epoch_start(ctx.epoch + 1);
            let mut at = t + iv;
            while at < end {
                ctx.timer(at, TimerKind::AppTick { epoch: ctx.epoch });
                at += iv;
            }
        }
    }

    fn lookup(&mut self, ctx: &mut ClientCtx, contact: usize, purpose: LookupPurpose) {
        let token = self.token();
        self.lookups.insert(contact, (purpose, token));
        ctx.send(Action::ToServer(Msg::Lookup {
            subject: ctx.ids[contact].clone(),
            purpose,
        }));
        ctx.timer(
            ctx.now + 2 * ctx.clock.delta,
            TimerKind::LookupTimeout { contact, token },
        );
    }

    /// Starts a new contact relationship.
    pub fn connect(&mut self, ctx: &mut ClientCtx, contact: usize) {
        if contact == self.index || !self.contacts.insert(contact) {
            return;
        }
        self.lookup(ctx, contact, LookupPurpose::NewConnection);
    }

    /// Accepts a contact relationship initiated by the other side.
    pub fn accept_contact(&mut self, ctx: &mut ClientCtx, contact: usize) {
        self.connect(ctx, contact);
    }

    /// Generates and uploads a fresh key.
    pub fn rotate_key(&mut self, ctx: &mut ClientCtx, key: Vec<u8>) {
        self.own_keys.push((key.clone(), ctx.epoch, ctx.now));
        ctx.send(Action::ToServer(Msg::Upload { key }));
    }

    pub fn on_message(&mut self, ctx: &mut ClientCtx, from: Option<usize>, msg: Msg) {
        match msg {
            Msg::StrReply(d) => self.on_str_reply(ctx, d),
            Msg::LookupReply { resp, purpose } => {
                let Some(c) = ctx.ids.iter().position(|i| *i == resp.subject) else {
                    return;
                };
                if self.lookups.get(&c).map(|l| l.0) == Some(purpose) {
                    self.lookups.remove(&c);
                }
                self.on_key_response(ctx, c, resp, Some(purpose));
            }
            Msg::KeyPush { resp } => {
                let Some(c) = ctx.ids.iter().position(|i| *i == resp.subject) else {
                    return;
                };
                if self.contacts.contains(&c) {
                    self.on_key_response(ctx, c, resp, None);
                }
            }
            Msg::Gossip { str } => {
                if let Some(c) = from {
                    self.on_gossip(ctx, c, str);
                }
            }
            Msg::Pom { pom } => {
                if self.held_pom.is_none() && adjudicate_cached(&pom, ctx.server, ctx.cache) {
                    let cause = match pom.kind() {
                        PomKind::ConflictingStrs => Cause::ConflictingStr,
                        PomKind::DuplicateKey => Cause::DuplicateKey,
                    };
                    self.detect(ctx, cause, Some(pom.clone()));
                    self.hold_pom(ctx, pom, from);
                }
            }
            Msg::Probe { nonce } => {
                if let Some(c) = from {
                    ctx.send(Action::ToContact(c, Msg::ProbeReply { nonce }));
                }
            }
            Msg::ProbeReply { .. } => {
                if let Some(c) = from {
                    let unchanged = self
                        .keys
                        .get(&c)
                        .is_some_and(|h| h.changed_epoch != ctx.epoch || ctx.epoch == 0);
                    if unchanged {
                        self.ep.non_isolated = true;
                    }
                }
            }
            Msg::App { .. } => {}
            Msg::AkrReply { resp } => self.on_akr_reply(ctx, resp),
            Msg::AsrReply { str } => self.on_asr_reply(ctx, str),
            Msg::OobRequest { key, nonce, mac } => {
                let Some(c) = from else { return };
                let Some(k) = self.oob.get(&c).copied() else { return };
                if !mac_ok(&k, c, self.index, &key, nonce, &mac) {
                    return;
                }
                let mine = self.own_key().to_vec();
                let mac = mac_for(&k, self.index, c, &mine, nonce);
                ctx.send(Action::Oob(c, Msg::OobReply { key: mine, nonce, mac }));
            }
            Msg::OobReply { key, nonce, mac } => {
                let Some(c) = from else { return };
                let Some(k) = self.oob.get(&c).copied() else { return };
                if !mac_ok(&k, c, self.index, &key, nonce, &mac) {
                    return;
                }
                if self.gates.get(&c) != Some(&Gate::AwaitOob { token: nonce }) {
                    return;
                }
                if self.held_key(c) == Some(key.as_slice()) {
                    self.open_gate(ctx, c);
                } else {
                    self.gates.insert(c, Gate::Blocked);
                    self.detect(ctx, Cause::OobMismatch, None);
                }
            }
            Msg::StrRequest { .. } | Msg::Lookup { .. } | Msg::Upload { .. } => {}
        }
    }

    fn on_str_reply(&mut self, ctx: &mut ClientCtx, d: StrDelivery) {
        if !self.ep.awaiting_str {
            return;
        }
        self.ep.awaiting_str = false;
        let Some(last) = d.strs.last().cloned() else {
            self.detect(ctx, Cause::MissingStr, None);
            return;
        };
        let mut prev = self.last_str.clone();
        for (s, poi) in d.strs.iter().zip(&d.pois) {
            if !s.verify_cached(ctx.server, ctx.cache) {
                self.detect(ctx, Cause::InvalidStr, None);
                return;
            }
            if let Some(p) = &prev {
                if s.epoch <= p.epoch {
                    continue;
                }
                if s.epoch != p.epoch + 1 || s.prev_str_hash != p.digest() {
                    self.detect(ctx, Cause::InvalidStr, None);
                    return;
                }
            }
            let is_current = s.epoch == ctx.epoch;
            match (poi, self.committed_own_key(s.epoch)) {
                (Some(poi), Some(key)) => {
                    if poi.compute_root(&self.id, key) != Some(s.root_hash) {
                        self.detect(ctx, Cause::InvalidPoI, None);
                    }
                }
                (None, _) if is_current => self.detect(ctx, Cause::MissingPoI, None),
                _ => {}
            }
            prev = Some(s.clone());
        }
        if last.epoch != ctx.epoch {
            self.detect(ctx, Cause::MissingStr, None);
            return;
        }
        self.last_str = Some(last.clone());
        self.ep.own = Some(last.clone());
        self.observe_root(ctx, last.clone(), None, Cause::ConflictingStr);
        if ctx.defense == Defense::Ktca {
            self.gossip(ctx, &last, None);
        }
        if let Some(a) = self.ep.asr.clone() {
            self.compare_asr(ctx, a);
        }
    }

    fn gossip(&mut self, ctx: &mut ClientCtx, s: &SignedTreeRoot, except: Option<usize>) {
        let d = s.digest();
        for c in self.contacts.clone() {
            if Some(c) == except || self.ep.received.contains(&(d, c)) {
                continue;
            }
            if self.ep.sent.insert((d, c)) {
                ctx.send(Action::ToContact(c, Msg::Gossip { str: s.clone() }));
            }
        }
    }

    /// Records a valid same-epoch root and raises a proof if it conflicts
    /// with one already seen.
    fn observe_root(&mut self, ctx: &mut ClientCtx, s: SignedTreeRoot, from: Option<usize>, cause: Cause) {
        if s.epoch != ctx.epoch {
            return;
        }
        let other = self
            .ep
            .own
            .iter()
            .chain(self.ep.seen.iter())
            .find(|o| o.epoch == s.epoch && o.root_hash != s.root_hash)
            .cloned();
        if !self.ep.seen.iter().any(|o| o.root_hash == s.root_hash) && self.ep.seen.len() < 2 {
            self.ep.seen.push(s.clone());
        }
        if let Some(o) = other {
            if let Ok(pom) = make_pom_conflict(o, s, ctx.server) {
                self.detect(ctx, cause, Some(pom.clone()));
                self.hold_pom(ctx, pom, from);
            }
        }
    }

    fn on_gossip(&mut self, ctx: &mut ClientCtx, from: usize, s: SignedTreeRoot) {
        if s.epoch != ctx.epoch || !s.verify_cached(ctx.server, ctx.cache) {
            return;
        }
        let d = s.digest();
        self.ep.received.insert((d, from));
        self.observe_root(ctx, s.clone(), Some(from), Cause::ConflictingStr);
        if self.ep.own.is_none() && !self.ep.relayed {
            self.ep.relayed = true;
            self.gossip(ctx, &s, Some(from));
        }
    }

    fn on_asr_reply(&mut self, ctx: &mut ClientCtx, s: SignedTreeRoot) {
        if !self.ep.awaiting_asr || s.epoch != ctx.epoch {
            return;
        }
        self.ep.awaiting_asr = false;
        if !s.verify_cached(ctx.server, ctx.cache) {
            return;
        }
        self.ep.asr = Some(s.clone());
        if self.ep.own.is_some() {
            self.compare_asr(ctx, s);
        }
    }

    fn compare_asr(&mut self, ctx: &mut ClientCtx, s: SignedTreeRoot) {
        self.observe_root(ctx, s, None, Cause::AsrMismatch);
    }

    fn on_akr_reply(&mut self, ctx: &mut ClientCtx, resp: KeyResponse) {
        let Some(c) = ctx.ids.iter().position(|i| *i == resp.subject) else {
            return;
        };
        if !self.awaiting_akr.remove(&(c, ctx.epoch)) {
            return;
        }
        // Answers were fixed when the batch reached the server, so compare
        // against the key held at that instant.
        let batch_time = ctx.epoch_start() + ctx.clock.big_delta;
        let expected: Option<&[u8]> = if c == self.index {
            Some(self.own_key_at(batch_time))
        } else {
            self.keys.get(&c).map(|h| match &h.previous {
                Some(p) if h.changed_at > batch_time => p.as_slice(),
                _ => h.key.as_slice(),
            })
        };
        if expected != Some(resp.public_key.as_slice()) && resp.verify_cached(ctx.server, ctx.cache) {
            self.detect(ctx, Cause::AkrMismatch, None);
        }
    }

    /// Appends to the key history; returns a proof if the server has handed
    /// out an earlier key again after a different one.
    pub fn short_lived_check(
        &mut self,
        contact: usize,
        resp: &KeyResponse,
        server: &VerifyKey,
    ) -> Option<ProofOfMisbehavior> {
        let hist = self.history.entry(contact).or_default();
        let d = resp.digest();
        if hist.iter().any(|r| r.digest() == d) {
            return None;
        }
        let pos = hist.partition_point(|r| r.issued_at <= resp.issued_at);
        hist.insert(pos, resp.clone());
        let hist = &self.history[&contact];
        let latest = hist.last()?;
        let mut intervening = None;
        for r in hist[..hist.len() - 1].iter().rev() {
            if r.public_key != latest.public_key {
                intervening.get_or_insert(r);
            } else if let Some(i) = intervening {
                if r.epoch != latest.epoch {
                    if let Ok(p) = make_pom_duplicate(r.clone(), i.clone(), latest.clone(), server) {
                        return Some(p);
                    }
                }
            }
        }
        None
    }

    fn on_key_response(&mut self, ctx: &mut ClientCtx, c: usize, resp: KeyResponse, purpose: Option<LookupPurpose>) {
        if !resp.verify_cached(ctx.server, ctx.cache) {
            return;
        }
        if let Some(pom) = self.short_lived_check(c, &resp, ctx.server) {
            self.detect(ctx, Cause::DuplicateKey, Some(pom.clone()));
            self.hold_pom(ctx, pom, None);
        }
        let held = self.keys.get(&c).cloned();
        if held.as_ref().is_some_and(|h| h.issued_at > resp.issued_at) {
            return;
        }
        if !ctx.defense.uses_tree() {
            self.accept_key(ctx, c, &resp, false);
            return;
        }
        let deferred_u = held
            .as_ref()
            .filter(|h| h.pending && purpose == Some(LookupPurpose::Deferred))
            .map(|h| h.upload_epoch);
        if resp.pending {
            match deferred_u {
                Some(u) if resp.upload_epoch <= u => {
                    self.detect(ctx, Cause::InvalidPoI, None);
                }
                _ => {
                    self.accept_key(ctx, c, &resp, true);
                    if resp.upload_epoch < ctx.epoch {
                        self.lookup(ctx, c, LookupPurpose::Deferred);
                    }
                }
            }
            return;
        }
        let proven = resp.epoch == ctx.epoch && resp.verify_with_inclusion(ctx.server, ctx.cache);
        if !proven {
            self.detect(ctx, Cause::InvalidPoI, None);
            return;
        }
        if let Some(s) = resp.str.clone() {
            self.observe_root(ctx, s, None, Cause::ConflictingStr);
        }
        match deferred_u {
            Some(u) => {
                let h = held.expect("deferred implies held");
                if resp.public_key == h.key {
                    if let Some(k) = self.keys.get_mut(&c) {
                        k.pending = false;
                        k.issued_at = resp.issued_at;
                    }
                } else if resp.upload_epoch > u {
                    self.accept_key(ctx, c, &resp, false);
                } else {
                    self.detect(ctx, Cause::InvalidPoI, None);
                }
            }
            None => self.accept_key(ctx, c, &resp, false),
        }
    }

    fn accept_key(&mut self, ctx: &mut ClientCtx, c: usize, resp: &KeyResponse, pending: bool) {
        self.contacts.insert(c);
        let prev = self.keys.get(&c).cloned();
        let changed = prev.as_ref().is_none_or(|h| h.key != resp.public_key);
        let entry = HeldKey {
            key: resp.public_key.clone(),
            upload_epoch: resp.upload_epoch,
            pending,
            issued_at: resp.issued_at,
            changed_epoch: if changed {
                ctx.epoch
            } else {
                prev.as_ref().map_or(ctx.epoch, |h| h.changed_epoch)
            },
            changed_at: if changed {
                ctx.now
            } else {
                prev.as_ref().map_or(ctx.now, |h| h.changed_at)
            },
            previous: if changed {
                prev.as_ref().map(|h| h.key.clone())
            } else {
                prev.as_ref().and_then(|h| h.previous.clone())
            },
        };
        self.keys.insert(c, entry);
        if !changed {
            return;
        }
        if ctx.defense == Defense::Akm {
            self.monitor_until.insert(c, ctx.epoch + ctx.policy.m);
        }
        if prev.is_some() {
            self.updates.push((ctx.epoch, c));
            self.mass_update_monitor(ctx);
        }
        if ctx.policy.prevention_enabled {
            self.prevention_gate(ctx, c, prev.is_none());
        }
    }

    fn mass_update_monitor(&mut self, ctx: &mut ClientCtx) {
        if !ctx.policy.mass_update_enabled || self.ep.mass_reported {
            return;
        }
        let w = ctx.policy.mass_update_window;
        let lo = ctx.epoch.saturating_sub(w - 1);
        let distinct: BTreeSet<usize> = self.updates.iter().filter(|(e, _)| *e >= lo).map(|(_, c)| *c).collect();
        self.updates.retain(|(e, _)| *e >= lo);
        let n = distinct.len();
        if n >= ctx.policy.mass_update_min_count
            && n as f64 > ctx.policy.mass_update_threshold * self.contacts.len() as f64
        {
            self.ep.mass_reported = true;
            self.detect(ctx, Cause::MassKeyUpdate, None);
        }
    }

    /// Holds traffic to `peer` until its new key is confirmed.
    pub fn prevention_gate(&mut self, ctx: &mut ClientCtx, peer: usize, new_connection: bool) {
        let token = self.token();
        if !new_connection {
            if let Some(k) = self.oob.get(&peer).copied() {
                let key = self.keys[&peer].key.clone();
                let mac = mac_for(&k, self.index, peer, &key, token);
                self.gates.insert(peer, Gate::AwaitOob { token });
                ctx.send(Action::Oob(peer, Msg::OobRequest { key, nonce: token, mac }));
                ctx.timer(ctx.now + 2 * ctx.clock.delta, TimerKind::OobTimeout { peer, token });
                return;
            }
        }
        let until = self.verification_horizon(ctx);
        self.gates.insert(peer, Gate::Hold { token });
        ctx.timer(until, TimerKind::GateRelease { peer, token });
    }

    /// When the active defense would have flagged a fake key received now.
    pub fn verification_horizon(&self, ctx: &ClientCtx) -> u64 {
        let c = &ctx.clock;
        match ctx.defense {
            Defense::Ktca => c.epoch_start(ctx.epoch + 1) + c.gossip_bound(ctx.diameter),
            Defense::Akm => c.epoch_start(ctx.epoch + ctx.policy.m) + 2 * c.big_delta,
            Defense::Ktaca => c.epoch_start(ctx.epoch + 1) + 2 * c.big_delta,
        }
    }

    fn open_gate(&mut self, ctx: &mut ClientCtx, peer: usize) {
        self.gates.insert(peer, Gate::Open);
        let held = self.app_held.remove(&peer).unwrap_or(0);
        for _ in 0..held {
            self.send_app(ctx, peer);
        }
    }

    fn send_app(&mut self, ctx: &mut ClientCtx, peer: usize) {
        match self.gates.get(&peer).unwrap_or(&Gate::Open) {
            Gate::Open => {
                if let Some(k) = self.held_key(peer) {
                    ctx.send(Action::ToContact(peer, Msg::App { key: k.to_vec() }));
                }
            }
            Gate::Blocked => {}
            _ => *self.app_held.entry(peer).or_default() += 1,
        }
    }

    pub fn on_timer(&mut self, ctx: &mut ClientCtx, kind: TimerKind) {
        match kind {
            TimerKind::StrTimeout { epoch } => {
                if epoch == ctx.epoch && self.ep.awaiting_str {
                    self.ep.awaiting_str = false;
                    self.disconnected = true;
                    self.detect(ctx, Cause::MissingStr, None);
                }
            }
            TimerKind::AsrTimeout { epoch } => {
                if epoch == ctx.epoch && self.ep.awaiting_asr {
                    self.ep.awaiting_asr = false;
                    self.detect(ctx, Cause::MissingStr, None);
                }
            }
            TimerKind::LookupTimeout { contact, token } => {
                if self.lookups.get(&contact).map(|l| l.1) == Some(token) {
                    self.lookups.remove(&contact);
                    self.disconnected = true;
                    self.detect(ctx, Cause::MissingPoI, None);
                }
            }
            TimerKind::AkrTimeout { subject, epoch } => {
                if self.awaiting_akr.remove(&(subject, epoch)) {
                    self.detect(ctx, Cause::AkrTimeout, None);
                }
            }
            TimerKind::OobTimeout { peer, token } => {
                if self.gates.get(&peer) == Some(&Gate::AwaitOob { token }) {
                    self.gates.insert(peer, Gate::Blocked);
                    self.detect(ctx, Cause::OobTimeout, None);
                }
            }
            TimerKind::GateRelease { peer, token } => {
                if self.gates.get(&peer) == Some(&Gate::Hold { token }) {
                    if self.first_core.is_some() {
                        self.gates.insert(peer, Gate::Blocked);
                    } else {
                        self.open_gate(ctx, peer);
                    }
                }
            }
            TimerKind::Probe { epoch } => {
                if epoch != ctx.epoch || self.ep.non_isolated || self.contacts.is_empty() {
                    return;
                }
                let i = ctx.rng.gen_range(0..self.contacts.len());
                let c = *self.contacts.iter().nth(i).expect("in range");
                self.ep.probes_sent += 1;
                self.probes_sent += 1;
                ctx.send(Action::ToContact(
                    c,
                    Msg::Probe {
                        nonce: self.ep.probes_sent,
                    },
                ));
            }
            TimerKind::IsolationCheck { epoch } => {
                if epoch == ctx.epoch && !self.ep.non_isolated {
                    self.detect(ctx, Cause::Isolation, None);
                }
            }
            TimerKind::AppTick { epoch } => {
                if epoch == ctx.epoch {
                    for c in self.contacts.clone() {
                        self.send_app(ctx, c);
                    }
                }
            }
        }
    }
}

fn mac_for(key: &[u8; 32], from: usize, to: usize, public_key: &[u8], nonce: u64) -> Vec<u8> {
    let mut m = HmacSha256::new_from_slice(key).expect("any key length");
    let mut e = Encoder::new();
    e.u64(from as u64).u64(to as u64).bytes(public_key).u64(nonce);
    m.update(e.as_slice());
    m.finalize().into_bytes().to_vec()
}

fn mac_ok(key: &[u8; 32], from: usize, to: usize, public_key: &[u8], nonce: u64, mac: &[u8]) -> bool {
    let mut m = HmacSha256::new_from_slice(key).expect("any key length");
    let mut e = Encoder::new();
    e.u64(from as u64).u64(to as u64).bytes(public_key).u64(nonce);
    m.update(e.as_slice());
    m.verify_slice(mac).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;
    use rand::SeedableRng;

    struct Fixture {
        key: KeyPair,
        pk: VerifyKey,
        cache: VerifyCache,
        rng: ChaCha20Rng,
        ids: Vec<ClientId>,
        policy: MonitorPolicy,
    }

    impl Fixture {
        fn new() -> Self {
            let key = KeyPair::from_seed([1; 32]);
            Fixture {
                pk: key.verifying_key(),
                key,
                cache: VerifyCache::new(),
                rng: ChaCha20Rng::seed_from_u64(0),
                ids: (0..3).map(ClientId::indexed).collect(),
                policy: MonitorPolicy::default(),
            }
        }

        fn ctx(&mut self, defense: Defense, epoch: u64, now: u64) -> ClientCtx<'_> {
            ClientCtx {
                now,
                epoch,
                clock: ClockConfig {
                    epoch_len: 20_000,
                    delta: 1000,
                    big_delta: 2000,
                },
                defense,
                policy: &self.policy,
                server: &self.pk,
                cache: &mut self.cache,
                rng: &mut self.rng,
                ids: &self.ids,
                diameter: 1,
                attack_tag: "test",
                out: Vec::new(),
                events: Vec::new(),
            }
        }

        fn resp(&self, key: u8, epoch: u64, at: u64) -> KeyResponse {
            KeyResponse::new_signed(
                &self.key,
                ClientId::indexed(1),
                vec![key],
                0,
                epoch,
                at,
                false,
                None,
                None,
            )
        }
    }

    #[test]
    fn aba_sequence_yields_pom_on_third_response() {
        let f = Fixture::new();
        let mut c = ClientState::new(0, ClientId::indexed(0), vec![0]);
        assert!(c.short_lived_check(1, &f.resp(1, 0, 0), &f.pk).is_none());
        assert!(c.short_lived_check(1, &f.resp(9, 3, 100), &f.pk).is_none());
        let pom = c.short_lived_check(1, &f.resp(1, 3, 200), &f.pk).unwrap();
        assert!(crate::tlog::adjudicate(&pom, &f.pk));
    }

    #[test]
    fn distinct_keys_and_redelivery_are_quiet() {
        let f = Fixture::new();
        let mut c = ClientState::new(0, ClientId::indexed(0), vec![0]);
        for (k, e, t) in [(1, 0, 0), (2, 1, 100), (3, 2, 200)] {
            assert!(c.short_lived_check(1, &f.resp(k, e, t), &f.pk).is_none());
        }
        assert!(c.short_lived_check(1, &f.resp(3, 2, 200), &f.pk).is_none());
    }

    #[test]
    fn missing_root_times_out_at_bound() {
        let mut f = Fixture::new();
        let mut c = ClientState::new(0, ClientId::indexed(0), vec![0]);
        let mut ctx = f.ctx(Defense::Ktca, 1, 20_000);
        c.on_epoch_start(&mut ctx);
        let at = ctx
            .out
            .iter()
            .find_map(|a| match a {
                Action::Timer {
                    at,
                    kind: TimerKind::StrTimeout { .. },
                } => Some(*at),
                _ => None,
            })
            .unwrap();
        assert_eq!(at, 22_000);
        ctx.now = at;
        c.on_timer(&mut ctx, TimerKind::StrTimeout { epoch: 1 });
        assert_eq!(ctx.events.len(), 1);
        assert_eq!(ctx.events[0].cause, Cause::MissingStr);
    }

    #[test]
    fn forged_pom_is_ignored() {
        let mut f = Fixture::new();
        let other = KeyPair::from_seed([2; 32]);
        let a = crate::tlog::sign_root(1, Digest([1; 32]), Digest::ZERO, 0, &other);
        let b = crate::tlog::sign_root(1, Digest([2; 32]), Digest::ZERO, 0, &other);
        let pom = ProofOfMisbehavior::ConflictingStrs { a, b };
        let mut c = ClientState::new(0, ClientId::indexed(0), vec![0]);
        let mut ctx = f.ctx(Defense::Ktca, 1, 20_000);
        c.on_message(&mut ctx, Some(1), Msg::Pom { pom });
        assert!(ctx.events.is_empty());
        assert!(c.held_pom().is_none());
    }

    #[test]
    fn oob_mac_binds_direction_and_key() {
        let k = [7u8; 32];
        let mac = mac_for(&k, 0, 1, b"key", 5);
        assert!(mac_ok(&k, 0, 1, b"key", 5, &mac));
        assert!(!mac_ok(&k, 1, 0, b"key", 5, &mac));
        assert!(!mac_ok(&k, 0, 1, b"kez", 5, &mac));
    }
}
