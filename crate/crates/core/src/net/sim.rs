//! Deterministic discrete-event network.
//!
//! One tick is one second of protocol time. Each [`World::step`] first
//! delivers every message due at the current tick, in send order, then
//! gives every live node its tick (validators seal in their slots), then
//! advances the clock. A message sent at tick `t` arrives at
//! `t + 1 + latency` unless it is dropped or crosses a partition. Each
//! sender-receiver link is FIFO, as a TCP connection would be.
//! All randomness comes from the configured seed.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use super::node::{expand, NodeEvent, StorageNode, UserNode, ValidatorNode};
use super::{Message, NodeId, Outgoing};
use crate::crypto::{self, Digest, KeyPair, PublicKey};
use crate::engine::DecisionEngine;
use crate::ledger::{GenesisConfig, LedgerError, LedgerState, RequestView};
use crate::service::{handle_api, ApiRequest, ApiResponse, ApiTarget};
use crate::storage::StorageService;
use crate::types::{
    build_access_request_tx, build_setup_tx, Block, LinkToken, Nonce, Operation, ReqInfo, RequestId, StorageTx,
    Transaction, VerifiedTx,
};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("network configuration: {0}")]
    Config(String),
    #[error("unknown adversary behavior {0:?} (expected replay_link, tamper_block, unauthorized_request or reuse_nonce)")]
    UnknownBehavior(String),
    #[error("adversary cannot act: {0}")]
    Adversary(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("no such node {0}")]
    UnknownNode(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Latency {
    Fixed(u64),
    Uniform { min: u64, max: u64 },
}

/// During ticks `start..end`, nodes in different groups cannot reach each
/// other. Nodes not listed form one more group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub start: u64,
    pub end: u64,
    pub groups: Vec<Vec<NodeId>>,
}

impl Partition {
    fn group_of(&self, node: NodeId) -> usize {
        self.groups
            .iter()
            .position(|g| g.contains(&node))
            .unwrap_or(self.groups.len())
    }

    fn separates(&self, tick: u64, a: NodeId, b: NodeId) -> bool {
        (self.start..self.end).contains(&tick) && self.group_of(a) != self.group_of(b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub latency: Latency,
    pub drop_probability: f64,
    pub partitions: Vec<Partition>,
    pub seed: u64,
    /// Ticks per slot; must equal the genesis slot duration.
    pub block_interval: u64,
    /// Re-send unconfirmed work every block interval.
    pub retransmit: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            latency: Latency::Fixed(0),
            drop_probability: 0.0,
            partitions: Vec::new(),
            seed: 1,
            block_interval: 1,
            retransmit: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(0.0..1.0).contains(&self.drop_probability) {
            return Err(NetError::Config(format!(
                "drop probability must be in [0, 1), got {}",
                self.drop_probability
            )));
        }
        if self.block_interval == 0 {
            return Err(NetError::Config("block interval must be positive".into()));
        }
        if let Latency::Uniform { min, max } = self.latency {
            if min > max {
                return Err(NetError::Config(format!("latency range {min}..={max} is empty")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdversaryKind {
    ReplayLink,
    TamperBlock,
    UnauthorizedRequest,
    ReuseNonce,
}

impl AdversaryKind {
    pub fn name(self) -> &'static str {
        match self {
            AdversaryKind::ReplayLink => "replay_link",
            AdversaryKind::TamperBlock => "tamper_block",
            AdversaryKind::UnauthorizedRequest => "unauthorized_request",
            AdversaryKind::ReuseNonce => "reuse_nonce",
        }
    }
}

impl FromStr for AdversaryKind {
    type Err = NetError;
    fn from_str(s: &str) -> Result<Self, NetError> {
        Ok(match s {
            "replay_link" => AdversaryKind::ReplayLink,
            "tamper_block" => AdversaryKind::TamperBlock,
            "unauthorized_request" => AdversaryKind::UnauthorizedRequest,
            "reuse_nonce" => AdversaryKind::ReuseNonce,
            other => return Err(NetError::UnknownBehavior(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub tick: u64,
    pub node: String,
    pub event: String,
    pub detail: String,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.tick, self.node, self.event)?;
        if !self.detail.is_empty() {
            write!(f, " {}", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeTip {
    pub name: String,
    pub height: u64,
    pub tip: Digest,
    pub state_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvergenceReport {
    pub tick: u64,
    pub height: u64,
    pub agreement: bool,
    pub timed_out: bool,
    pub nodes: Vec<NodeTip>,
}

#[derive(Debug)]
enum Node {
    Validator(Box<ValidatorNode>),
    Storage(Box<StorageNode>),
    User(Box<UserNode>),
}

impl Node {
    fn handle(&mut self, from: NodeId, msg: Message, now: u64) -> Vec<Outgoing> {
        match self {
            Node::Validator(n) => n.handle(from, msg, now),
            Node::Storage(n) => n.handle(from, msg, now),
            Node::User(n) => n.handle(from, msg, now),
        }
    }

    fn on_tick(&mut self, now: u64, retransmit: bool) -> Vec<Outgoing> {
        match self {
            Node::Validator(n) => n.on_tick(now, retransmit),
            Node::Storage(n) => n.on_tick(now, retransmit),
            Node::User(n) => n.on_tick(now, retransmit),
        }
    }

    fn take_events(&mut self) -> Vec<NodeEvent> {
        match self {
            Node::Validator(n) => n.take_events(),
            Node::Storage(n) => n.take_events(),
            Node::User(n) => n.take_events(),
        }
    }
}

struct InFlight {
    from: NodeId,
    to: NodeId,
    msg: Message,
}

pub struct World {
    config: NetworkConfig,
    genesis: GenesisConfig,
    tick: u64,
    net_rng: ChaCha20Rng,
    id_rng: ChaCha20Rng,
    nodes: Vec<Node>,
    names: Vec<String>,
    crashed: Vec<bool>,
    adversarial: Vec<bool>,
    queue: BTreeMap<(u64, u64), InFlight>,
    /// Latest delivery tick per (from, to); links deliver in send order.
    link_clock: BTreeMap<(NodeId, NodeId), u64>,
    seq: u64,
    trace: Vec<TraceEvent>,
    captured_redeems: Vec<Message>,
    validator_count: usize,
}

impl fmt::Debug for World {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("World")
            .field("tick", &self.tick)
            .field("nodes", &self.names)
            .field("in_flight", &self.queue.len())
            .finish()
    }
}

fn derive_seed(seed: u64, label: &str) -> u64 {
    let d = crypto::hash(format!("{seed}/{label}").as_bytes());
    u64::from_be_bytes(d.0[..8].try_into().expect("8 bytes"))
}

impl World {
    /// Validators get node ids `0..v` in genesis order, storage gets `v`.
    pub fn new(
        config: NetworkConfig,
        genesis: GenesisConfig,
        validator_keys: Vec<KeyPair>,
        storage: StorageService,
        engine: Arc<DecisionEngine>,
    ) -> Result<Self, NetError> {
        config.validate()?;
        if genesis.params.slot_duration != config.block_interval {
            return Err(NetError::Config(format!(
                "block interval {} differs from genesis slot duration {}",
                config.block_interval, genesis.params.slot_duration
            )));
        }
        let pks: Vec<PublicKey> = validator_keys.iter().map(|k| k.public).collect();
        if pks != genesis.validators {
            return Err(NetError::Config("validator keys do not match genesis order".into()));
        }
        if storage.public_key() != genesis.storage_pk {
            return Err(NetError::Config("storage key does not match genesis".into()));
        }
        let ledger = LedgerState::genesis(genesis.clone(), engine)?;
        let v = validator_keys.len();
        let mut world = Self {
            net_rng: ChaCha20Rng::seed_from_u64(derive_seed(config.seed, "network")),
            id_rng: ChaCha20Rng::seed_from_u64(derive_seed(config.seed, "ids")),
            config,
            genesis,
            tick: 0,
            nodes: Vec::new(),
            names: Vec::new(),
            crashed: Vec::new(),
            adversarial: Vec::new(),
            queue: BTreeMap::new(),
            link_clock: BTreeMap::new(),
            seq: 0,
            trace: Vec::new(),
            captured_redeems: Vec::new(),
            validator_count: v,
        };
        for (i, key) in validator_keys.into_iter().enumerate() {
            let rng = ChaCha20Rng::seed_from_u64(derive_seed(world.config.seed, &format!("validator-{i}")));
            world.push_node(
                format!("validator-{i}"),
                Node::Validator(Box::new(ValidatorNode::new(i, key, v, ledger.clone(), rng))),
            );
        }
        world.push_node("storage".into(), Node::Storage(Box::new(StorageNode::new(v, storage))));
        Ok(world)
    }

    fn push_node(&mut self, name: String, node: Node) -> NodeId {
        self.nodes.push(node);
        self.names.push(name);
        self.crashed.push(false);
        self.adversarial.push(false);
        self.nodes.len() - 1
    }

    pub fn add_user(&mut self, name: &str, keypair: KeyPair) -> NodeId {
        let id = self.nodes.len();
        self.push_node(name.to_string(), Node::User(Box::new(UserNode::new(id, keypair))))
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn now(&self) -> u64 {
        self.genesis.time + self.tick
    }

    pub fn genesis(&self) -> &GenesisConfig {
        &self.genesis
    }

    pub fn validator_count(&self) -> usize {
        self.validator_count
    }

    pub fn storage_id(&self) -> NodeId {
        self.validator_count
    }

    pub fn node_name(&self, id: NodeId) -> &str {
        &self.names[id]
    }

    pub fn validator(&self, i: usize) -> &ValidatorNode {
        match &self.nodes[i] {
            Node::Validator(v) => v,
            _ => panic!("node {i} is not a validator"),
        }
    }

    pub fn storage(&self) -> &StorageNode {
        match &self.nodes[self.validator_count] {
            Node::Storage(s) => s,
            _ => unreachable!("storage follows the validators"),
        }
    }

    pub fn storage_mut(&mut self) -> &mut StorageNode {
        match &mut self.nodes[self.validator_count] {
            Node::Storage(s) => s,
            _ => unreachable!("storage follows the validators"),
        }
    }

    pub fn user(&self, id: NodeId) -> &UserNode {
        match &self.nodes[id] {
            Node::User(u) => u,
            _ => panic!("node {id} is not a user"),
        }
    }

    fn user_mut(&mut self, id: NodeId) -> Result<&mut UserNode, NetError> {
        match self.nodes.get_mut(id) {
            Some(Node::User(u)) => Ok(u),
            _ => Err(NetError::UnknownNode(id)),
        }
    }

    pub fn is_crashed(&self, id: NodeId) -> bool {
        self.crashed[id]
    }

    /// Stops a node: it neither receives messages nor acts on ticks.
    pub fn crash(&mut self, id: NodeId) {
        self.crashed[id] = true;
        self.record(id, "crashed", String::new());
    }

    /// The first validator that has not crashed.
    pub fn honest_ledger(&self) -> &LedgerState {
        let i = (0..self.validator_count)
            .find(|i| !self.crashed[*i])
            .expect("at least one live validator");
        self.validator(i).ledger()
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn trace_text(&self) -> String {
        let mut out = String::new();
        for e in &self.trace {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }

    /// Adds a line to the trace on behalf of something outside the network,
    /// such as a scenario driver.
    pub fn annotate(&mut self, actor: &str, event: &str, detail: String) {
        self.trace.push(TraceEvent {
            tick: self.tick,
            node: actor.to_string(),
            event: event.to_string(),
            detail,
        });
    }

    fn record(&mut self, node: NodeId, event: &str, detail: String) {
        self.trace.push(TraceEvent {
            tick: self.tick,
            node: self.names[node].clone(),
            event: event.to_string(),
            detail,
        });
    }

    fn drain_events(&mut self, node: NodeId) {
        for e in self.nodes[node].take_events() {
            self.record(node, e.event, e.detail);
        }
    }

    fn send(&mut self, from: NodeId, out: Outgoing) {
        for to in expand(out.to, from, self.validator_count) {
            if to >= self.nodes.len() {
                continue;
            }
            if self.config.partitions.iter().any(|p| p.separates(self.tick, from, to)) {
                continue;
            }
            if self.config.drop_probability > 0.0 && self.net_rng.gen::<f64>() < self.config.drop_probability {
                continue;
            }
            let latency = match self.config.latency {
                Latency::Fixed(l) => l,
                Latency::Uniform { min, max } => self.net_rng.gen_range(min..=max),
            };
            if matches!(out.msg, Message::Redeem { .. }) {
                self.captured_redeems.push(out.msg.clone());
            }
            let link = self.link_clock.entry((from, to)).or_insert(0);
            let due = (self.tick + 1 + latency).max(*link);
            *link = due;
            self.queue.insert(
                (due, self.seq),
                InFlight {
                    from,
                    to,
                    msg: out.msg.clone(),
                },
            );
            self.seq += 1;
        }
    }

    /// Advances one tick.
    pub fn step(&mut self) {
        let now = self.now();
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > self.tick {
                break;
            }
            let InFlight { from, to, msg } = entry.remove();
            if self.crashed[to] {
                continue;
            }
            let outs = self.nodes[to].handle(from, msg, now);
            self.drain_events(to);
            for o in outs {
                self.send(to, o);
            }
        }
        let round = self.config.retransmit && self.tick % self.config.block_interval == 0;
        for id in 0..self.nodes.len() {
            if self.crashed[id] {
                continue;
            }
            let outs = self.nodes[id].on_tick(now, round);
            self.drain_events(id);
            for o in outs {
                self.send(id, o);
            }
        }
        self.tick += 1;
    }

    pub fn run(&mut self, ticks: u64) {
        for _ in 0..ticks {
            self.step();
        }
    }

    fn live_validators(&self) -> impl Iterator<Item = &ValidatorNode> {
        (0..self.validator_count)
            .filter(|i| !self.crashed[*i])
            .map(|i| self.validator(i))
    }

    pub fn tips(&self) -> Vec<NodeTip> {
        self.live_validators()
            .map(|v| NodeTip {
                name: self.names[v.id()].clone(),
                height: v.ledger().height(),
                tip: v.ledger().tip_hash(),
                state_digest: v.ledger().state_digest(),
            })
            .collect()
    }

    pub fn agreement(&self) -> bool {
        let tips = self.tips();
        tips.windows(2)
            .all(|w| w[0].tip == w[1].tip && w[0].state_digest == w[1].state_digest)
    }

    /// No pool, outbox or in-flight message still carries work.
    pub fn quiescent(&self) -> bool {
        let busy_msg = self.queue.values().any(|m| {
            !self.crashed[m.to]
                && matches!(
                    m.msg,
                    Message::Tx(_) | Message::Block(_) | Message::Blocks(_) | Message::Result(_) | Message::Redeem { .. }
                )
        });
        let busy_node = self.nodes.iter().enumerate().any(|(i, n)| {
            !self.crashed[i]
                && !self.adversarial[i]
                && match n {
                    Node::Validator(v) => !v.ledger().pool().is_empty() || v.pending_result_count() > 0,
                    Node::Storage(s) => !s.outbox().is_empty(),
                    Node::User(u) => !u.outbox().is_empty(),
                }
        });
        !busy_msg && !busy_node
    }

    pub fn report(&self, timed_out: bool) -> ConvergenceReport {
        let nodes = self.tips();
        ConvergenceReport {
            tick: self.tick,
            height: nodes.iter().map(|n| n.height).min().unwrap_or(0),
            agreement: self.agreement(),
            timed_out,
            nodes,
        }
    }

    /// Steps until live validators agree and no work is pending, or until
    /// `max_ticks` more ticks have passed.
    pub fn run_until_converged(&mut self, max_ticks: u64) -> ConvergenceReport {
        for _ in 0..max_ticks {
            self.step();
            if self.quiescent() && self.agreement() {
                return self.report(false);
            }
        }
        self.report(true)
    }

    /// SHA-256 over the clock, every live validator's tip and state digest,
    /// and the trace.
    pub fn digest(&self) -> Digest {
        let mut buf = self.tick.to_be_bytes().to_vec();
        for t in self.tips() {
            buf.extend_from_slice(t.name.as_bytes());
            buf.extend_from_slice(&t.tip.0);
            buf.extend_from_slice(&t.state_digest.0);
        }
        buf.extend_from_slice(self.trace_text().as_bytes());
        crypto::hash(&buf)
    }

    /// Submits `tx` from node `origin`; it is sent to every validator and
    /// retransmitted until confirmed.
    pub fn submit(&mut self, origin: NodeId, tx: Transaction) -> Result<Digest, NetError> {
        let id = tx.id();
        let out = self.user_mut(origin)?.submit(tx);
        self.drain_events(origin);
        self.send(origin, out);
        Ok(id)
    }

    pub fn random_request_id(&mut self) -> RequestId {
        RequestId(self.id_rng.gen())
    }

    pub fn register_user(&mut self, admin_node: NodeId, user_pk: PublicKey) -> Result<Digest, NetError> {
        let tx = build_setup_tx(self.user(admin_node).keypair(), user_pk, self.now());
        self.submit(admin_node, tx)
    }

    pub fn request_access(&mut self, user: NodeId, resource_id: u32, op: Operation) -> Result<RequestId, NetError> {
        let request_id = self.random_request_id();
        let info = ReqInfo {
            resource_id,
            operation: op,
            request_id,
        };
        let tx = build_access_request_tx(self.user(user).keypair(), info, self.now());
        self.submit(user, tx)?;
        Ok(request_id)
    }

    /// The request as the first live validator sees it.
    pub fn request_view(&self, request_id: &RequestId) -> RequestView {
        self.honest_ledger().request_view(request_id)
    }

    pub fn redeem(&mut self, user: NodeId, token: LinkToken, nonce: Nonce, operation: Operation) {
        self.record(user, "redeem_sent", format!("token={token} operation={operation}"));
        let storage = self.storage_id();
        self.send(user, Outgoing::to(storage, Message::Redeem { token, nonce, operation }));
    }

    /// Serves an API request at `node`, as if a client had called its port.
    /// Redemption requests are visible to network eavesdroppers.
    pub fn api(&mut self, node: NodeId, req: ApiRequest) -> ApiResponse {
        let now = self.now();
        if self.crashed.get(node).copied().unwrap_or(true) {
            return ApiResponse::Unsupported(format!("node {node} is not reachable"));
        }
        if let ApiRequest::Redeem { token, nonce, operation } = &req {
            self.captured_redeems.push(Message::Redeem {
                token: *token,
                nonce: *nonce,
                operation: *operation,
            });
        }
        let target = match &mut self.nodes[node] {
            Node::Validator(v) => ApiTarget::Validator(v),
            Node::Storage(s) => ApiTarget::Storage(s),
            Node::User(_) => return ApiResponse::Unsupported("user nodes serve no API".into()),
        };
        let (resp, outs) = handle_api(target, req, now);
        self.drain_events(node);
        for o in outs {
            self.send(node, o);
        }
        resp
    }

    /// The first validator that has not crashed.
    pub fn first_live_validator(&self) -> Option<NodeId> {
        (0..self.validator_count).find(|i| !self.crashed[*i])
    }

    /// Adds an adversary node and has it carry out `kind` against the
    /// current state of the world.
    pub fn inject_adversary(&mut self, kind: AdversaryKind) -> Result<NodeId, NetError> {
        let key = KeyPair::from_seed(self.id_rng.gen());
        let name = format!("adversary-{}", self.nodes.len());
        let id = self.add_user(&name, key.clone());
        self.adversarial[id] = true;
        self.record(id, "adversary", kind.name().to_string());
        let now = self.now();
        match kind {
            AdversaryKind::UnauthorizedRequest => {
                let info = ReqInfo {
                    resource_id: 0,
                    operation: Operation::Op1,
                    request_id: self.random_request_id(),
                };
                self.submit(id, build_access_request_tx(&key, info, now))?;
                self.submit(id, build_setup_tx(&key, key.public, now))?;
                let forged = VerifiedTx {
                    time: now,
                    user_bits: crate::engine::binary_repr(0, self.genesis.params.user_width).expect("fits"),
                    req_bits: crate::engine::binary_repr(0, self.genesis.params.resource_width).expect("fits"),
                    request_id: info.request_id,
                };
                self.submit(id, Transaction::Verified(forged))?;
            }
            AdversaryKind::TamperBlock => {
                let chain = self.honest_ledger().chain().to_vec();
                let tip = chain.last().expect("genesis").clone();
                let mut forged = vec![Block::seal(
                    &key,
                    tip.height + 1,
                    tip.hash(),
                    now.max(tip.time + 1),
                    Vec::new(),
                )];
                if tip.height > 0 {
                    let mut tampered = tip.clone();
                    tampered.time += 1;
                    forged.push(tampered);
                    if let Some(tx) = tip.transactions.first() {
                        let mut dropped = tip.clone();
                        dropped.transactions.retain(|t| t != tx);
                        forged.push(dropped);
                    }
                    let mut resigned = tip.clone();
                    resigned.transactions.truncate(1);
                    forged.push(Block::seal(&key, resigned.height, resigned.prev_hash, resigned.time, resigned.transactions));
                }
                for b in forged {
                    self.record(id, "block_forged", format!("height={} hash={}", b.height, &b.hash().to_hex()[..16]));
                    self.send(id, Outgoing::validators(Message::Block(b)));
                }
            }
            AdversaryKind::ReplayLink => {
                let Some(Message::Redeem { token, nonce, operation }) = self.captured_redeems.last().cloned() else {
                    return Err(NetError::Adversary("no redemption has been observed".into()));
                };
                self.record(id, "redeem_replayed", format!("token={token}"));
                let storage = self.storage_id();
                self.send(id, Outgoing::to(storage, Message::Redeem { token, nonce, operation }));
                let links: Vec<Transaction> = self
                    .honest_ledger()
                    .chain()
                    .iter()
                    .flat_map(|b| b.transactions.iter())
                    .filter(|t| matches!(t, Transaction::Link(_)))
                    .cloned()
                    .collect();
                if let Some(link) = links.last() {
                    self.submit(id, link.clone())?;
                }
            }
            AdversaryKind::ReuseNonce => {
                let Some(Message::Redeem { token, nonce, .. }) = self.captured_redeems.last().cloned() else {
                    return Err(NetError::Adversary("no redemption has been observed".into()));
                };
                let storage = self.storage_id();
                for operation in Operation::ALL {
                    self.record(id, "redeem_replayed", format!("token={token} operation={operation}"));
                    self.send(id, Outgoing::to(storage, Message::Redeem { token, nonce, operation }));
                }
                let stored: Vec<StorageTx> = self
                    .honest_ledger()
                    .chain()
                    .iter()
                    .flat_map(|b| b.transactions.iter())
                    .filter_map(|t| match t {
                        Transaction::Storage(s) if s.nonce == nonce => Some(s.clone()),
                        _ => None,
                    })
                    .collect();
                if let Some(s) = stored.last() {
                    self.submit(id, Transaction::Storage(s.clone()))?;
                    let mut forged = s.clone();
                    forged.time = now;
                    forged.storage_sig = key.sign(&forged.signing_payload());
                    self.submit(id, Transaction::Storage(forged))?;
                }
            }
        }
        Ok(id)
    }

    pub fn inject_adversary_named(&mut self, name: &str) -> Result<NodeId, NetError> {
        self.inject_adversary(name.parse()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{parse_rules, DecisionModel, InputEncoding, DEFAULT_DIMS};
    use crate::ledger::ProtocolParams;

    const T0: u64 = 1_000_000;

    struct Fixture {
        world: World,
        admin: NodeId,
        user: NodeId,
    }

    fn fixture(config: NetworkConfig) -> Fixture {
        let validators: Vec<KeyPair> = (0..4).map(|i| KeyPair::from_seed([10 + i; 32])).collect();
        let admin = KeyPair::from_seed([1; 32]);
        let storage_kp = KeyPair::from_seed([2; 32]);
        let engine = Arc::new(
            DecisionEngine::new(DecisionModel::zeros(&DEFAULT_DIMS).unwrap(), InputEncoding::default()).unwrap(),
        );
        let genesis = GenesisConfig {
            time: T0,
            admin_pks: vec![admin.public],
            validators: validators.iter().map(|v| v.public).collect(),
            storage_pk: storage_kp.public,
            engine_fingerprint: engine.fingerprint(),
            rules: parse_rules("10 * 5 * DENY\n10 * 6 * ALLOW\n").unwrap(),
            params: ProtocolParams::default(),
        };
        let mut storage = StorageService::new(
            storage_kp,
            genesis.validators.clone(),
            ChaCha20Rng::seed_from_u64(3),
        );
        storage.put_resource(5, "five", b"five".to_vec()).unwrap();
        storage.put_resource(6, "six", b"six".to_vec()).unwrap();
        let mut world = World::new(config, genesis, validators, storage, engine).unwrap();
        let admin = world.add_user("admin", admin);
        let user = world.add_user("user-0", KeyPair::from_seed([3; 32]));
        Fixture { world, admin, user }
    }

    fn registered(config: NetworkConfig) -> Fixture {
        let mut f = fixture(config);
        let pk = f.world.user(f.user).keypair().public;
        f.world.register_user(f.admin, pk).unwrap();
        let r = f.world.run_until_converged(100);
        assert!(!r.timed_out);
        f
    }

    fn wait_for(world: &mut World, id: &RequestId, max: u64) -> RequestView {
        for _ in 0..max {
            let v = world.request_view(id);
            if !matches!(v, RequestView::Pending | RequestView::Unknown) {
                return v;
            }
            world.step();
        }
        world.request_view(id)
    }

    #[test]
    fn grant_then_redeem_once() {
        let mut f = registered(NetworkConfig::default());
        let id = f.world.request_access(f.user, 6, Operation::Op2).unwrap();
        let RequestView::Link { link, .. } = wait_for(&mut f.world, &id, 50) else {
            panic!("expected a link");
        };
        let payload = link.open(f.world.user(f.user).keypair()).unwrap();
        f.world.redeem(f.user, payload.link_token, payload.nonce, Operation::Op2);
        let report = f.world.run_until_converged(100);
        assert!(report.agreement && !report.timed_out);
        assert_eq!(f.world.user(f.user).replies()[0].1.as_deref(), Ok(&b"six"[..]));
        assert_eq!(f.world.request_view(&id), RequestView::Redeemed);

        f.world.inject_adversary(AdversaryKind::ReuseNonce).unwrap();
        f.world.inject_adversary(AdversaryKind::ReplayLink).unwrap();
        let report = f.world.run_until_converged(100);
        assert!(report.agreement);
        let served = f
            .world
            .trace()
            .iter()
            .filter(|e| e.node == "storage" && e.event == "redeemed")
            .count();
        assert_eq!(served, 1, "{}", f.world.trace_text());
    }

    #[test]
    fn rule_denies() {
        let mut f = registered(NetworkConfig::default());
        let id = f.world.request_access(f.user, 5, Operation::Op1).unwrap();
        assert!(matches!(wait_for(&mut f.world, &id, 50), RequestView::Denied(_)));
    }

    #[test]
    fn unauthorized_and_tampered_are_rejected() {
        let mut f = registered(NetworkConfig::default());
        let before = f.world.honest_ledger().memory().user_count();
        f.world.inject_adversary(AdversaryKind::UnauthorizedRequest).unwrap();
        f.world.inject_adversary(AdversaryKind::TamperBlock).unwrap();
        let report = f.world.run_until_converged(100);
        assert!(report.agreement);
        assert_eq!(f.world.honest_ledger().memory().user_count(), before);
        assert!(f.world.validator(1).rejected_blocks().len() >= 1);
    }

    #[test]
    fn same_seed_same_trace() {
        let config = NetworkConfig {
            latency: Latency::Uniform { min: 0, max: 3 },
            drop_probability: 0.1,
            seed: 9,
            ..NetworkConfig::default()
        };
        let run = || {
            let mut f = registered(config.clone());
            let id = f.world.request_access(f.user, 6, Operation::Op1).unwrap();
            wait_for(&mut f.world, &id, 200);
            f.world.run_until_converged(300);
            (f.world.digest(), f.world.trace_text())
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(ta, tb);
        assert_eq!(a, b);
    }

    #[test]
    fn survives_validator_crash_and_partition() {
        let config = NetworkConfig {
            partitions: vec![Partition {
                start: 5,
                end: 20,
                groups: vec![vec![0, 1]],
            }],
            ..NetworkConfig::default()
        };
        let mut f = registered(config);
        f.world.crash(2);
        let id = f.world.request_access(f.user, 6, Operation::Op3).unwrap();
        assert!(matches!(wait_for(&mut f.world, &id, 100), RequestView::Link { .. }));
        let report = f.world.run_until_converged(200);
        assert!(report.agreement && !report.timed_out, "{report:?}");
        assert_eq!(report.nodes.len(), 3);
    }

    #[test]
    fn config_checks() {
        assert!(NetworkConfig { drop_probability: 1.0, ..Default::default() }.validate().is_err());
        assert!("nonsense".parse::<AdversaryKind>().is_err());
        for k in ["replay_link", "tamper_block", "unauthorized_request", "reuse_nonce"] {
            assert_eq!(k.parse::<AdversaryKind>().unwrap().name(), k);
        }
    }
}
