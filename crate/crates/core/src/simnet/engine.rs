//! The event loop for one trial, and the Monte-Carlo driver around it.
//!
//! Events are ordered by `(time, phase, seq)`: at equal times, message
//! deliveries run before timers, and timers before the epoch boundary.
//! `seq` is assigned at scheduling time, so equal-time events run in the
//! order they were scheduled.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::client::{Action, Cause, ClientCtx, ClientState, Defense, DetectionEvent, LookupPurpose, Msg, TimerKind};
use crate::crypto::{derive_seed, Digest, KeyPair, VerifyCache, VerifyKey};
use crate::id::ClientId;
use crate::metrics::{Hit, Metrics, TrialRecord};
use crate::scenario::{DelayModel, Scenario, SimError};
use crate::server::{CutMode, Requester, ServerState};
use crate::simnet::anonymity::{AnonymityNetwork, RequestKind};
use crate::simnet::clock::ClockConfig;
use crate::simnet::topology::Topology;
use crate::tlog::{adjudicate, adjudicate_cached, PublicKeyRecord};

const DELIVER: u8 = 0;
const TIMER: u8 = 1;
const BOUNDARY: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tag {
    Plain,
    Fake,
    Restore,
}

#[derive(Debug)]
enum Ev {
    ToServer {
        from: usize,
        msg: Msg,
    },
    ToClient {
        to: usize,
        from: Option<usize>,
        msg: Msg,
        tag: Tag,
    },
    Timer {
        client: usize,
        kind: TimerKind,
    },
    Boundary {
        epoch: u64,
    },
    AnonFlush {
        epoch: u64,
    },
    Launch,
    Stealthy,
    Restore {
        holder: usize,
        subject: usize,
    },
    Workload {
        epoch: u64,
    },
}

struct Queued {
    key: (u64, u8, u64),
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, o: &Self) -> bool {
        self.key == o.key
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Queued {
    fn cmp(&self, o: &Self) -> Ordering {
        o.key.cmp(&self.key)
    }
}

fn substream(master: u64, label: &str, trial: u64) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(derive_seed(master, label, trial))
}

fn edge(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Runs every trial of a scenario and aggregates the results.
pub fn run(sc: &Scenario) -> Result<(Metrics, Vec<TrialRecord>), SimError> {
    sc.validate()?;
    let recs = (0..sc.trials)
        .into_par_iter()
        .map(|t| run_trial(sc, t))
        .collect::<Result<Vec<_>, _>>()?;
    let m = Metrics::aggregate(sc, &recs)?;
    Ok((m, recs))
}

/// Runs a single trial.
pub fn run_trial(sc: &Scenario, trial: u64) -> Result<TrialRecord, SimError> {
    let mut e = Engine::new(sc, trial)?;
    e.run()?;
    Ok(e.finish())
}

struct Engine<'a> {
    sc: &'a Scenario,
    trial: u64,
    clock: ClockConfig,
    n: usize,
    ids: Vec<ClientId>,
    index: HashMap<ClientId, usize>,
    clients: Vec<ClientState>,
    online: Vec<bool>,
    server: ServerState,
    server_pk: VerifyKey,
    cache: VerifyCache,
    topo: Topology,
    diameter: usize,
    queue: BinaryHeap<Queued>,
    seq: u64,
    now: u64,
    epoch: u64,
    rng_delay: ChaCha20Rng,
    rng_churn: ChaCha20Rng,
    rng_work: ChaCha20Rng,
    rng_client: ChaCha20Rng,
    rng_anon: ChaCha20Rng,
    rng_keys: ChaCha20Rng,
    anon: AnonymityNetwork,
    mailbox: Vec<Vec<(Msg, Tag)>>,
    pending_connect: Vec<Vec<usize>>,
    events: Vec<DetectionEvent>,
    cut: BTreeSet<(usize, usize)>,
    target: Option<usize>,
    launch_ms: Option<u64>,
    victims: BTreeMap<usize, u64>,
    restores: Vec<(usize, u64)>,
    uploaded: BTreeSet<usize>,
    app_messages: u64,
    app_under_fake: u64,
    bytes: BTreeMap<&'static str, u64>,
    new_connections: u64,
    new_connection_bytes: u64,
    online_client_epochs: u64,
    active_snapshot: Option<(Vec<Option<Digest>>, Vec<bool>, Topology)>,
    new_edge_ms: Option<u64>,
}

impl<'a> Engine<'a> {
    fn new(sc: &'a Scenario, trial: u64) -> Result<Self, SimError> {
        let master = sc.seed;
        let topo = sc.topology.build(&mut substream(master, "topology", trial))?;
        let n = topo.len();
        let all = vec![true; n];
        let diameter = topo.max_component_diameter(&all);
        sc.clock.validate(diameter).map_err(SimError::ConfigInvalid)?;
        let ids: Vec<ClientId> = (0..n).map(ClientId::indexed).collect();
        let index = ids.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect();
        let mut rng_keys = substream(master, "keys", trial);
        let keys: Vec<Vec<u8>> = (0..n).map(|_| fresh_key(&mut rng_keys)).collect();
        let records = ids
            .iter()
            .zip(&keys)
            .map(|(c, k)| PublicKeyRecord::new(c.clone(), k.clone(), 0));
        let tree_seed = u64::from_be_bytes(derive_seed(master, "tree", trial)[..8].try_into().expect("8 bytes"));
        let mut server = ServerState::new(
            KeyPair::from_seed(derive_seed(master, "server", trial)),
            tree_seed,
            records,
            sc.adversary.to_strategy(),
            sc.defense.uses_tree(),
        )
        .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        server.set_monitor_epochs(sc.policy.m);
        server
            .epoch_commit(0, 0)
            .map_err(|e| SimError::Internal(e.to_string()))?;
        let server_pk = server.verifying_key();
        let mut clients: Vec<ClientState> = ids
            .iter()
            .zip(keys)
            .enumerate()
            .map(|(i, (c, k))| ClientState::new(i, c.clone(), k))
            .collect();
        for (a, b) in topo.edges() {
            for (x, y) in [(a, b), (b, a)] {
                let resp = server
                    .lookup_key(&Requester::Setup, &ids[y], 0, false)
                    .map_err(|e| SimError::Internal(e.to_string()))?;
                clients[x].install_contact(y, resp);
            }
            if sc.workload.oob_channels {
                let mut k = [0u8; 32];
                rng_keys.fill_bytes(&mut k);
                clients[a].set_oob_key(b, k);
                clients[b].set_oob_key(a, k);
            }
        }
        Ok(Engine {
            sc,
            trial,
            clock: sc.clock,
            n,
            index,
            clients,
            online: all,
            server,
            server_pk,
            cache: VerifyCache::new(),
            topo,
            diameter,
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            epoch: 0,
            rng_delay: substream(master, "delays", trial),
            rng_churn: substream(master, "churn", trial),
            rng_work: substream(master, "workload", trial),
            rng_client: substream(master, "clients", trial),
            rng_anon: substream(master, "anonymity", trial),
            rng_keys,
            anon: AnonymityNetwork::new(),
            mailbox: vec![Vec::new(); n],
            pending_connect: vec![Vec::new(); n],
            events: Vec::new(),
            cut: BTreeSet::new(),
            target: sc.adversary.target.filter(|_| sc.is_attack()),
            launch_ms: None,
            victims: BTreeMap::new(),
            restores: Vec::new(),
            uploaded: BTreeSet::new(),
            app_messages: 0,
            app_under_fake: 0,
            bytes: BTreeMap::new(),
            new_connections: 0,
            new_connection_bytes: 0,
            online_client_epochs: 0,
            active_snapshot: None,
            new_edge_ms: None,
            ids,
        })
    }

    fn push(&mut self, time: u64, phase: u8, ev: Ev) {
        self.seq += 1;
        self.queue.push(Queued {
            key: (time, phase, self.seq),
            ev,
        });
    }

    fn delay(&mut self, bound: u64) -> u64 {
        match self.sc.delay {
            DelayModel::Uniform => self.rng_delay.gen_range(1..=bound),
            DelayModel::Fixed => bound,
        }
    }

    fn charge(&mut self, class: &'static str, bytes: u64) {
        *self.bytes.entry(class).or_default() += bytes;
    }

    fn run(&mut self) -> Result<(), SimError> {
        for e in 0..self.sc.epochs {
            self.push(self.clock.epoch_start(e), BOUNDARY, Ev::Boundary { epoch: e });
        }
        let end = self.clock.epoch_start(self.sc.epochs);
        while let Some(q) = self.queue.pop() {
            let (time, phase, _) = q.key;
            if time > end || (time == end && phase == BOUNDARY) {
                break;
            }
            self.now = time;
            self.handle(q.ev)?;
        }
        Ok(())
    }

    fn client_do(&mut self, i: usize, f: impl FnOnce(&mut ClientState, &mut ClientCtx)) {
        let mut ctx = ClientCtx {
            now: self.now,
            epoch: self.epoch,
            clock: self.clock,
            defense: self.sc.defense,
            policy: &self.sc.policy,
            server: &self.server_pk,
            cache: &mut self.cache,
            rng: &mut self.rng_client,
            ids: &self.ids,
            diameter: self.diameter,
            attack_tag: &self.sc.name,
            out: Vec::new(),
            events: Vec::new(),
        };
        f(&mut self.clients[i], &mut ctx);
        let ClientCtx { out, events, .. } = ctx;
        self.events.extend(events);
        for a in out {
            self.dispatch(i, a);
        }
    }

    fn dispatch(&mut self, from: usize, a: Action) {
        match a {
            Action::ToServer(msg) => {
                let d = self.delay(self.clock.delta);
                self.push(self.now + d, DELIVER, Ev::ToServer { from, msg });
            }
            Action::ToContact(to, msg) => self.send_contact(from, to, msg),
            Action::AnonymousKey(s) => {
                self.anon.submit_key_request(from, self.ids[s].clone());
                self.charge("akr", self.sc.accounting.akr_bytes);
            }
            Action::AnonymousRoot => {
                self.anon.submit_root_request(from);
                self.charge("asr", self.sc.accounting.akr_bytes);
            }
            Action::Oob(to, msg) => {
                self.charge("oob", msg.wire_bytes());
                let adv = &self.sc.adversary;
                if adv.oob_drop && self.launched() && (Some(from) == self.target || Some(to) == self.target) {
                    return;
                }
                let d = self.delay(self.clock.delta);
                self.push(
                    self.now + d,
                    DELIVER,
                    Ev::ToClient {
                        to,
                        from: Some(from),
                        msg,
                        tag: Tag::Plain,
                    },
                );
            }
            Action::Timer { at, kind } => self.push(at, TIMER, Ev::Timer { client: from, kind }),
        }
    }

    fn launched(&self) -> bool {
        self.launch_ms.is_some()
    }

    fn send_contact(&mut self, from: usize, to: usize, mut msg: Msg) {
        if let Msg::App { key } = &msg {
            self.app_messages += 1;
            if self.server.is_fake(&self.ids[to], key) {
                self.app_under_fake += 1;
            }
        }
        self.charge(msg.class(), msg.wire_bytes());
        if self.sc.adversary.isolate && self.launched() && (Some(from) == self.target || Some(to) == self.target) {
            return;
        }
        if self.cut.contains(&edge(from, to)) {
            let mode = self.sc.adversary.partition.as_ref().map_or(CutMode::Drop, |p| p.mode);
            match (&msg, mode) {
                (Msg::Pom { .. }, _) | (Msg::Gossip { .. }, CutMode::Drop) => return,
                (Msg::Gossip { .. }, CutMode::Rewrite) => match self.server.str_for(&self.ids[to]) {
                    Some(s) => msg = Msg::Gossip { str: s.clone() },
                    None => return,
                },
                _ => {}
            }
        }
        let d = self.delay(self.clock.delta);
        self.push(
            self.now + d,
            DELIVER,
            Ev::ToClient {
                to,
                from: Some(from),
                msg,
                tag: Tag::Plain,
            },
        );
    }

    fn server_send(&mut self, to: usize, msg: Msg, tag: Tag) {
        if !self.online[to] {
            if matches!(msg, Msg::KeyPush { .. }) {
                self.mailbox[to].push((msg, tag));
            }
            return;
        }
        let d = self.delay(self.clock.delta);
        self.push(
            self.now + d,
            DELIVER,
            Ev::ToClient {
                to,
                from: None,
                msg,
                tag,
            },
        );
    }

    /// The server pushes its current answer about `subject` to `holder`.
    fn push_key(&mut self, holder: usize, subject: usize, tag: Tag) {
        let r = self.server.lookup_key(
            &Requester::Client(self.ids[holder].clone()),
            &self.ids[subject],
            self.now,
            false,
        );
        if let Ok(resp) = r {
            self.server_send(holder, Msg::KeyPush { resp }, tag);
        }
    }

    fn handle(&mut self, ev: Ev) -> Result<(), SimError> {
        match ev {
            Ev::Boundary { epoch } => self.boundary(epoch)?,
            Ev::ToServer { from, msg } => self.at_server(from, msg),
            Ev::ToClient { to, from, msg, tag } => {
                if !self.online[to] {
                    if from.is_none() && matches!(msg, Msg::KeyPush { .. }) {
                        self.mailbox[to].push((msg, tag));
                    }
                    return Ok(());
                }
                self.deliver(to, from, msg, tag);
            }
            Ev::Timer { client, kind } => {
                if self.online[client] {
                    self.client_do(client, |c, ctx| c.on_timer(ctx, kind));
                }
            }
            Ev::AnonFlush { epoch } => self.anon_flush(epoch),
            Ev::Launch => self.launch()?,
            Ev::Stealthy => {
                let pairs = self.server.release_stealthy();
                self.grant(pairs);
            }
            Ev::Restore { holder, subject } => {
                self.server.restore(&self.ids[holder], &self.ids[subject]);
                self.push_key(holder, subject, Tag::Restore);
            }
            Ev::Workload { epoch } => self.workload(epoch),
        }
        Ok(())
    }

    fn boundary(&mut self, epoch: u64) -> Result<(), SimError> {
        self.epoch = epoch;
        self.uploaded.clear();
        if epoch > 0 {
            self.server
                .epoch_commit(epoch, self.now)
                .map_err(|e| SimError::Internal(e.to_string()))?;
            let next = self.sc.churn.sample(self.n, epoch, &mut self.rng_churn);
            for ((c, &was), &is) in self.clients.iter_mut().zip(&self.online).zip(&next) {
                if was && !is {
                    c.go_offline();
                }
            }
            self.online = next;
        }
        self.online_client_epochs += self.online.iter().filter(|&&o| o).count() as u64;
        if self.sc.is_attack() && epoch == self.sc.first_active_epoch() {
            let views = self
                .ids
                .iter()
                .map(|c| self.server.str_for(c).map(|s| s.root_hash))
                .collect();
            self.active_snapshot = Some((views, self.online.clone(), self.topo.clone()));
        }
        for i in 0..self.n {
            if !self.online[i] {
                continue;
            }
            self.client_do(i, |c, ctx| c.on_epoch_start(ctx));
            for peer in std::mem::take(&mut self.pending_connect[i]) {
                self.client_do(i, |c, ctx| c.connect(ctx, peer));
            }
            for (msg, tag) in std::mem::take(&mut self.mailbox[i]) {
                self.deliver(i, None, msg, tag);
            }
        }
        let t = self.now;
        if self.sc.defense != Defense::Ktca {
            self.push(t + self.clock.big_delta, TIMER, Ev::AnonFlush { epoch });
        }
        self.push(t + self.clock.epoch_len / 2, TIMER, Ev::Workload { epoch });
        let adv = &self.sc.adversary;
        if self.sc.is_attack() {
            if epoch == adv.launch_epoch {
                self.push(t + self.clock.epoch_len / 4, TIMER, Ev::Launch);
            } else if epoch > adv.launch_epoch && self.server.has_queued_grants() {
                self.push(t + self.clock.epoch_len / 4, TIMER, Ev::Stealthy);
            }
        }
        Ok(())
    }

    fn at_server(&mut self, from: usize, msg: Msg) {
        let id = self.ids[from].clone();
        match msg {
            Msg::StrRequest { last_known } => {
                if let Ok(d) = self.server.str_request(&id, last_known) {
                    self.server_send(from, Msg::StrReply(d), Tag::Plain);
                }
            }
            Msg::Lookup { subject, purpose } => {
                let r = self.server.lookup_key(
                    &Requester::Client(id),
                    &subject,
                    self.now,
                    purpose == LookupPurpose::NewConnection,
                );
                if let Ok(resp) = r {
                    self.server_send(from, Msg::LookupReply { resp, purpose }, Tag::Plain);
                }
            }
            Msg::Upload { key } => {
                if self.server.register(&id, key, self.epoch).is_ok() {
                    let contacts: Vec<usize> = self.clients[from].contacts().collect();
                    for c in contacts {
                        self.push_key(c, from, Tag::Plain);
                    }
                }
            }
            _ => {}
        }
    }

    fn deliver(&mut self, to: usize, from: Option<usize>, msg: Msg, tag: Tag) {
        if from.is_none() && !matches!(msg, Msg::AkrReply { .. } | Msg::AsrReply { .. }) {
            let b = msg.wire_bytes();
            self.charge(msg.class(), b);
            if let Msg::LookupReply {
                purpose: LookupPurpose::NewConnection,
                ..
            } = msg
            {
                self.new_connections += 1;
                self.new_connection_bytes += b;
            }
        }
        if let Msg::KeyPush { resp } | Msg::LookupReply { resp, .. } = &msg {
            if self.server.is_fake(&resp.subject, &resp.public_key) {
                self.victims.entry(to).or_insert(self.now);
            }
        }
        if tag == Tag::Restore {
            self.restores.push((to, self.now));
        }
        self.client_do(to, |c, ctx| c.on_message(ctx, from, msg));
    }

    fn anon_flush(&mut self, epoch: u64) {
        let batches = self.anon.flush(&mut self.rng_anon);
        for b in batches {
            let replies: Vec<Option<Msg>> = {
                let online = &self.online;
                let index = &self.index;
                let is_online = |c: &ClientId| index.get(c).is_some_and(|&i| online[i]);
                match b.kind {
                    RequestKind::Key => {
                        let batch = b.key_batch(epoch).expect("key batches carry a subject");
                        self.server
                            .decide_anonymous_response(&batch, self.now, &is_online)
                            .into_iter()
                            .map(|r| r.map(|resp| Msg::AkrReply { resp }))
                            .collect()
                    }
                    RequestKind::Root => self
                        .server
                        .serve_asr(&b.root_batch(epoch), &is_online)
                        .into_iter()
                        .map(|str| Some(Msg::AsrReply { str }))
                        .collect(),
                }
            };
            for (to, msg) in b.route.iter().zip(replies) {
                if let Some(msg) = msg {
                    let d = self.delay(self.clock.big_delta);
                    self.push(
                        self.now + d,
                        DELIVER,
                        Ev::ToClient {
                            to: *to,
                            from: None,
                            msg,
                            tag: Tag::Plain,
                        },
                    );
                }
            }
        }
    }

    fn launch(&mut self) -> Result<(), SimError> {
        self.launch_ms = Some(self.now);
        if let Some(p) = &self.sc.adversary.partition {
            let group = |c: usize| p.groups.iter().position(|g| g.contains(&c));
            self.cut = self
                .topo
                .edges()
                .into_iter()
                .filter(|&(a, b)| matches!((group(a), group(b)), (Some(x), Some(y)) if x != y))
                .collect();
        }
        if let Some(t) = self.target {
            if self.sc.adversary.rotate_on_launch && self.online[t] {
                let key = fresh_key(&mut self.rng_keys);
                self.uploaded.insert(t);
                self.client_do(t, |c, ctx| c.rotate_key(ctx, key));
            }
        }
        let contacts: Vec<Vec<ClientId>> = self
            .clients
            .iter()
            .map(|c| c.contacts().map(|i| self.ids[i].clone()).collect())
            .collect();
        let index = &self.index;
        let pairs = self
            .server
            .launch_attack(&|c| index.get(c).map(|&i| contacts[i].clone()).unwrap_or_default())
            .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        self.grant(pairs);
        Ok(())
    }

    fn grant(&mut self, pairs: Vec<(ClientId, ClientId)>) {
        for (h, s) in pairs {
            let (h, s) = (self.index[&h], self.index[&s]);
            self.push_key(h, s, Tag::Fake);
            if let Some(after) = self.sc.adversary.short_lived {
                let at = self.now + self.clock.delta + after;
                self.push(at, TIMER, Ev::Restore { holder: h, subject: s });
            }
        }
    }

    fn workload(&mut self, epoch: u64) {
        let w = &self.sc.workload;
        let mut added: Vec<(usize, usize, bool)> = w
            .new_edges
            .iter()
            .filter(|e| e.epoch == epoch)
            .map(|e| (e.a, e.b, true))
            .collect();
        if w.new_edge_prob > 0.0 && self.n > 2 && self.rng_work.gen_bool(w.new_edge_prob) {
            for _ in 0..64 {
                let a = self.rng_work.gen_range(0..self.n);
                let b = self.rng_work.gen_range(0..self.n);
                if a != b && !self.topo.has_edge(a, b) {
                    added.push((a, b, false));
                    break;
                }
            }
        }
        for (a, b, scripted) in added {
            if !self.topo.add_edge(a, b) {
                continue;
            }
            if scripted && self.new_edge_ms.is_none() {
                self.new_edge_ms = Some(self.now);
            }
            for (x, y) in [(a, b), (b, a)] {
                if self.online[x] {
                    self.client_do(x, |c, ctx| c.connect(ctx, y));
                } else {
                    self.pending_connect[x].push(y);
                }
            }
        }
        let rate = self.sc.workload.key_update_rate;
        if rate > 0.0 {
            for i in 0..self.n {
                if self.online[i] && !self.uploaded.contains(&i) && self.rng_work.gen_bool(rate) {
                    self.uploaded.insert(i);
                    let key = fresh_key(&mut self.rng_keys);
                    self.client_do(i, |c, ctx| c.rotate_key(ctx, key));
                }
            }
        }
    }

    fn finish(mut self) -> TrialRecord {
        let len = self.clock.epoch_len;
        let mut rec = TrialRecord {
            trial: self.trial,
            launch_ms: self.launch_ms,
            clients: self.n as u64,
            app_messages: self.app_messages,
            app_under_fake: self.app_under_fake,
            online_client_epochs: self.online_client_epochs,
            bytes: self.bytes.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            new_connections: self.new_connections,
            new_connection_bytes: self.new_connection_bytes,
            history_bytes: self.clients.iter().map(ClientState::history_bytes).sum(),
            probes: self.clients.iter().map(|c| c.probes_sent).sum(),
            new_edge_ms: self.new_edge_ms,
            ..TrialRecord::default()
        };
        let mut detectors = BTreeSet::new();
        for ev in &self.events {
            if ev.cause.is_heuristic() {
                *rec.heuristic_events.entry(ev.cause).or_default() += 1;
                continue;
            }
            if !self.launch_ms.is_some_and(|l| ev.sim_time >= l) {
                *rec.false_positives.entry(ev.cause).or_default() += 1;
                continue;
            }
            let who = self.index[&ev.detector];
            let hit = Hit {
                epoch: ev.epoch,
                time_ms: ev.sim_time,
            };
            if rec.detection.is_none() {
                rec.detection = Some(hit);
                rec.cause = Some(ev.cause);
            }
            detectors.insert(ev.detector.clone());
            if Some(who) == self.target {
                rec.owner_detection.get_or_insert(hit);
            }
            if self.victims.contains_key(&who) {
                rec.victim_detection.get_or_insert(hit);
            }
        }
        rec.detectors = detectors.into_iter().collect();

        let pom_hit = |i: usize| {
            self.clients[i].pom_time().map(|t| Hit {
                epoch: t / len,
                time_ms: t,
            })
        };
        let earliest = |it: &mut dyn Iterator<Item = usize>| it.filter_map(pom_hit).min_by_key(|h| h.time_ms);
        rec.pom = earliest(&mut (0..self.n));
        rec.owner_pom = self.target.and_then(pom_hit);
        rec.victim_pom = earliest(&mut self.victims.keys().copied());

        if let Some((views, alive, topo)) = self.active_snapshot.take() {
            if self.sc.defense == Defense::Ktca && self.sc.adversary.equivocate {
                self.bound_check(&mut rec, &views, &alive, &topo);
            }
        }

        if self.sc.adversary.short_lived.is_some() && self.sc.is_attack() {
            let ok = !self.restores.is_empty()
                && self.restores.iter().all(|&(h, t)| {
                    self.events.iter().any(|e| {
                        e.detector == self.ids[h]
                            && e.cause == Cause::DuplicateKey
                            && e.sim_time == t
                            && e.pom.as_ref().is_some_and(|p| adjudicate(p, &self.server_pk))
                    })
                });
            rec.short_lived_ok = Some(ok);
        }

        if self.sc.policy.prevention_enabled && self.sc.is_attack() {
            let mut ok = !self.victims.is_empty() && self.app_under_fake == 0;
            let mut worst = 0;
            for (&h, &tf) in &self.victims {
                let hit = self.events.iter().find(|e| {
                    e.detector == self.ids[h]
                        && matches!(e.cause, Cause::OobMismatch | Cause::OobTimeout)
                        && e.sim_time >= tf
                });
                match hit {
                    Some(e) => {
                        worst = worst.max(e.sim_time - tf);
                        ok &= e.sim_time - tf <= 2 * self.clock.delta;
                    }
                    None => ok = false,
                }
            }
            rec.prevented = Some(ok);
            rec.prevention_latency_ms = (!self.victims.is_empty()).then_some(worst);
        }

        if let (Some(te), true) = (self.new_edge_ms, self.sc.is_attack()) {
            let horizon = self.clock.epoch_start(te / len + 2);
            let times: Vec<u64> = self.clients.iter().filter_map(ClientState::pom_time).collect();
            rec.pom_before_new_edge = Some(times.iter().any(|&t| t < te));
            rec.pom_after_new_edge = Some(times.iter().any(|&t| t >= te && t < horizon));
        }
        rec
    }

    /// Every online client in a component that saw two different roots must
    /// hold an adjudicating proof within the component's gossip bound.
    fn bound_check(&mut self, rec: &mut TrialRecord, views: &[Option<Digest>], alive: &[bool], topo: &Topology) {
        let g = topo.without_edges(&self.cut);
        let t0 = self.clock.epoch_start(self.sc.first_active_epoch());
        let mut ok = true;
        let mut any = false;
        let mut max_lat = 0;
        let mut max_bound = 0;
        for comp in g.components(alive) {
            let roots: BTreeSet<Digest> = comp.iter().filter_map(|&i| views[i]).collect();
            if roots.len() < 2 {
                continue;
            }
            any = true;
            let bound = self.clock.gossip_bound(g.component_diameter(&comp, alive));
            max_bound = max_bound.max(bound);
            for &i in &comp {
                let held = self.clients[i]
                    .held_pom()
                    .is_some_and(|p| adjudicate_cached(p, &self.server_pk, &mut self.cache));
                match self.clients[i].pom_time().filter(|_| held) {
                    Some(t) => {
                        let lat = t.saturating_sub(t0);
                        max_lat = max_lat.max(lat);
                        ok &= lat <= bound;
                    }
                    None => ok = false,
                }
            }
        }
        if any {
            rec.within_bound = Some(ok);
            rec.max_pom_latency_ms = Some(max_lat);
            rec.bound_ms = Some(max_bound);
        }
    }
}

fn fresh_key(rng: &mut ChaCha20Rng) -> Vec<u8> {
    let mut k = vec![0u8; 32];
    rng.fill_bytes(&mut k);
    k
}
