use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha20Rng;

use super::{Dest, Message, NodeId, Outbox, Outgoing, MAX_BLOCKS_PER_REPLY};
use crate::contracts::{encrypt_request_result, SealedResult};
use crate::crypto::{Digest, KeyPair};
use crate::ledger::{BlockOutput, LedgerState, Reject, RequestStatus};
use crate::storage::{RedeemError, ResultOutcome, StorageService};
use crate::types::{Block, LinkToken, Nonce, Operation, RequestId, Transaction};

const MAX_ORPHANS: usize = 512;
/// How far below its own tip a node asks a peer to start a catch-up reply.
const CATCH_UP_OVERLAP: u64 = 16;
/// Slots a non-sealing validator waits before it also delivers a granted
/// result, in case the sealer crashed.
const RESULT_TAKEOVER_SLOTS: u64 = 3;

/// Something a node did, for the trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeEvent {
    pub event: &'static str,
    pub detail: String,
}

fn short(d: &Digest) -> String {
    d.to_hex()[..16].to_string()
}

#[derive(Debug, Default)]
struct Events(Vec<NodeEvent>);

impl Events {
    fn push(&mut self, event: &'static str, detail: String) {
        self.0.push(NodeEvent { event, detail });
    }
}

/// A validator: keeps every valid block it has seen, follows the best
/// chain under fork choice, and seals blocks in its own slots.
#[derive(Debug)]
pub struct ValidatorNode {
    id: NodeId,
    keypair: KeyPair,
    storage: NodeId,
    validator_count: usize,
    ledger: LedgerState,
    blocks: BTreeMap<Digest, Block>,
    orphans: BTreeMap<Digest, Vec<Block>>,
    rejected: BTreeSet<Digest>,
    tx_origins: BTreeMap<Digest, NodeId>,
    /// Granted results not yet answered by a link, with the time from
    /// which they are re-sent.
    pending_results: BTreeMap<RequestId, (SealedResult, u64)>,
    last_sealed_slot: Option<u64>,
    rng: ChaCha20Rng,
    events: Events,
}

impl ValidatorNode {
    pub fn new(id: NodeId, keypair: KeyPair, storage: NodeId, ledger: LedgerState, rng: ChaCha20Rng) -> Self {
        let blocks = ledger.chain().iter().map(|b| (b.hash(), b.clone())).collect();
        let validator_count = ledger.config().validators.len();
        Self {
            id,
            keypair,
            storage,
            validator_count,
            blocks,
            ledger,
            orphans: BTreeMap::new(),
            rejected: BTreeSet::new(),
            tx_origins: BTreeMap::new(),
            pending_results: BTreeMap::new(),
            last_sealed_slot: None,
            rng,
            events: Events::default(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn public_key(&self) -> crate::crypto::PublicKey {
        self.keypair.public
    }

    pub fn ledger(&self) -> &LedgerState {
        &self.ledger
    }

    pub fn known_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn rejected_blocks(&self) -> &BTreeSet<Digest> {
        &self.rejected
    }

    pub fn take_events(&mut self) -> Vec<NodeEvent> {
        std::mem::take(&mut self.events.0)
    }

    pub fn pending_result_count(&self) -> usize {
        self.pending_results.len()
    }

    /// Accepts a transaction from a local API client and gossips it.
    pub fn submit_local(&mut self, tx: Transaction, now: u64, out: &mut Vec<Outgoing>) -> Result<Digest, Reject> {
        let id = self.ledger.submit(tx.clone(), now)?;
        self.events.push("tx_accepted", short(&id));
        out.push(Outgoing::validators(Message::Tx(tx)));
        Ok(id)
    }

    fn is_validator(&self, node: NodeId) -> bool {
        node < self.validator_count
    }

    pub fn handle(&mut self, from: NodeId, msg: Message, now: u64) -> Vec<Outgoing> {
        let mut out = Vec::new();
        match msg {
            Message::Tx(tx) => self.receive_tx(from, tx, now, &mut out),
            Message::Block(b) => self.receive_block(from, b, now, &mut out),
            Message::Blocks(bs) => {
                for b in bs {
                    self.receive_block(from, b, now, &mut out);
                }
            }
            Message::GetBlock(h) => {
                if let Some(b) = self.blocks.get(&h) {
                    out.push(Outgoing::to(from, Message::Block(b.clone())));
                }
            }
            Message::GetBlocks { from_height } => {
                let blocks: Vec<Block> = self
                    .ledger
                    .chain()
                    .iter()
                    .skip(from_height.max(1) as usize)
                    .take(MAX_BLOCKS_PER_REPLY)
                    .cloned()
                    .collect();
                if !blocks.is_empty() {
                    out.push(Outgoing::to(from, Message::Blocks(blocks)));
                }
            }
            Message::Status { height, tip } => {
                if !self.blocks.contains_key(&tip) && self.is_better(height, &tip) {
                    let from_height = self.ledger.height().saturating_sub(CATCH_UP_OVERLAP).max(1);
                    out.push(Outgoing::to(from, Message::GetBlocks { from_height }));
                }
            }
            Message::Included(_)
            | Message::TxRejected { .. }
            | Message::Result(_)
            | Message::Redeem { .. }
            | Message::RedeemReply { .. } => {}
        }
        out
    }

    fn receive_tx(&mut self, from: NodeId, tx: Transaction, now: u64, out: &mut Vec<Outgoing>) {
        let id = tx.id();
        match self.ledger.submit(tx, now) {
            Ok(_) => {
                if !self.is_validator(from) {
                    self.tx_origins.entry(id).or_insert(from);
                }
                self.events.push("tx_accepted", short(&id));
            }
            Err(Reject::Duplicate) if self.ledger.memory().has_seen(&id) => {
                if !self.is_validator(from) {
                    out.push(Outgoing::to(from, Message::Included(id)));
                }
            }
            Err(Reject::Duplicate) => {
                if !self.is_validator(from) {
                    self.tx_origins.entry(id).or_insert(from);
                }
            }
            Err(reason) => {
                self.events.push("tx_rejected", format!("{} reason={reason}", short(&id)));
                if !self.is_validator(from) {
                    out.push(Outgoing::to(from, Message::TxRejected { id, reason }));
                }
            }
        }
    }

    fn is_better(&self, height: u64, tip: &Digest) -> bool {
        height > self.ledger.height() || (height == self.ledger.height() && *tip < self.ledger.tip_hash())
    }

    fn receive_block(&mut self, from: NodeId, block: Block, now: u64, out: &mut Vec<Outgoing>) {
        let hash = block.hash();
        if self.blocks.contains_key(&hash) || self.rejected.contains(&hash) {
            return;
        }
        if block.time > now + self.ledger.config().params.slot_duration {
            self.events.push("block_deferred", format!("height={} hash={}", block.height, short(&hash)));
            return;
        }
        if !self.blocks.contains_key(&block.prev_hash) {
            let prev = block.prev_hash;
            let known = self.orphans.get(&prev).is_some_and(|w| w.iter().any(|b| b.hash() == hash));
            if !known && self.orphans_len() < MAX_ORPHANS {
                self.orphans.entry(prev).or_default().push(block);
            }
            out.push(Outgoing::to(from, Message::GetBlock(prev)));
            return;
        }
        let mut ready = vec![block];
        while let Some(b) = ready.pop() {
            let h = b.hash();
            if self.attach(b, now, out) {
                if let Some(children) = self.orphans.remove(&h) {
                    ready.extend(children);
                }
            }
        }
    }

    fn orphans_len(&self) -> usize {
        self.orphans.values().map(Vec::len).sum()
    }

    fn path_to(&self, hash: &Digest) -> Vec<Block> {
        let mut path = Vec::new();
        let mut cur = *hash;
        while let Some(b) = self.blocks.get(&cur) {
            path.push(b.clone());
            if b.height == 0 {
                break;
            }
            cur = b.prev_hash;
        }
        path.reverse();
        path
    }

    /// Validates `block` against the state at its parent. Returns whether it
    /// was accepted into the block tree.
    fn attach(&mut self, block: Block, now: u64, out: &mut Vec<Outgoing>) -> bool {
        let hash = block.hash();
        if block.prev_hash == self.ledger.tip_hash() {
            return match self.ledger.apply_block(&block) {
                Ok(output) => {
                    self.events.push("block_accepted", format!("height={} hash={}", block.height, short(&hash)));
                    self.notify_included(&output, out);
                    let resend_at = block.time + RESULT_TAKEOVER_SLOTS * self.ledger.config().params.slot_duration;
                    for result in output.results.iter().filter(|r| r.granted) {
                        if let Ok(sealed) = encrypt_request_result(result, &self.ledger.config().storage_pk, &self.keypair, &mut self.rng) {
                            self.pending_results.insert(result.request_id, (sealed, resend_at));
                        }
                    }
                    self.blocks.insert(hash, block);
                    true
                }
                Err(e) => {
                    self.events.push("block_rejected", format!("height={} hash={} reason={e}", block.height, short(&hash)));
                    self.rejected.insert(hash);
                    false
                }
            };
        }
        let path = self.path_to(&block.prev_hash);
        let mut side = match LedgerState::from_blocks(&path, self.ledger.engine().clone()) {
            Ok(s) => s,
            Err(_) => return false,
        };
        if let Err(e) = side.apply_block(&block) {
            self.events.push("block_rejected", format!("height={} hash={} reason={e}", block.height, short(&hash)));
            self.rejected.insert(hash);
            return false;
        }
        self.blocks.insert(hash, block.clone());
        if self.is_better(block.height, &hash) {
            let old: Vec<Transaction> = self
                .ledger
                .chain()
                .iter()
                .flat_map(|b| b.transactions.iter())
                .chain(self.ledger.pool())
                .filter(|tx| !matches!(tx, Transaction::Verified(_)))
                .cloned()
                .collect();
            side.set_pool(old, now);
            self.events.push(
                "reorg",
                format!(
                    "from height={} tip={} to height={} tip={}",
                    self.ledger.height(),
                    short(&self.ledger.tip_hash()),
                    block.height,
                    short(&hash)
                ),
            );
            self.ledger = side;
            let included: Vec<Digest> = self
                .ledger
                .chain()
                .iter()
                .flat_map(|b| b.transactions.iter().map(Transaction::id))
                .filter(|id| self.tx_origins.contains_key(id))
                .collect();
            self.notify_included(&BlockOutput { results: Vec::new(), included }, out);
        } else {
            self.events.push("block_side", format!("height={} hash={}", block.height, short(&hash)));
        }
        true
    }

    fn notify_included(&mut self, output: &BlockOutput, out: &mut Vec<Outgoing>) {
        for id in &output.included {
            if let Some(origin) = self.tx_origins.remove(id) {
                out.push(Outgoing::to(origin, Message::Included(*id)));
            }
        }
    }

    /// Seals a block if this is the validator's slot and something is
    /// includable; with `retransmit`, also re-gossips the pool, announces
    /// the tip, and re-sends undelivered granted results.
    pub fn on_tick(&mut self, now: u64, retransmit: bool) -> Vec<Outgoing> {
        let mut out = Vec::new();
        self.pending_results.retain(|id, _| {
            matches!(
                self.ledger.memory().request(id).map(|r| r.status),
                Some(RequestStatus::Granted { .. })
            )
        });
        if retransmit {
            out.extend(self.ledger.pool().iter().map(|tx| Outgoing::validators(Message::Tx(tx.clone()))));
            out.push(Outgoing::validators(Message::Status {
                height: self.ledger.height(),
                tip: self.ledger.tip_hash(),
            }));
            out.extend(
                self.pending_results
                    .values()
                    .filter(|(_, at)| *at <= now)
                    .map(|(r, _)| Outgoing::to(self.storage, Message::Result(r.clone()))),
            );
        }
        self.seal(now, &mut out);
        out
    }

    fn seal(&mut self, now: u64, out: &mut Vec<Outgoing>) {
        let config = self.ledger.config();
        let Some(slot) = config.slot_of(now) else { return };
        if config.slot_start(slot) != now
            || config.leader_for_time(now) != Some(self.keypair.public)
            || self.last_sealed_slot == Some(slot)
        {
            return;
        }
        self.ledger.prune_pool(now);
        let Some(block) = self.ledger.propose_block(&self.keypair, now) else { return };
        let output = match self.ledger.apply_block(&block) {
            Ok(o) => o,
            Err(e) => {
                self.events.push("seal_failed", e.to_string());
                return;
            }
        };
        self.last_sealed_slot = Some(slot);
        let hash = block.hash();
        self.events.push(
            "block_sealed",
            format!("height={} hash={} txs={}", block.height, short(&hash), block.transactions.len()),
        );
        self.blocks.insert(hash, block.clone());
        out.push(Outgoing::validators(Message::Block(block)));
        self.notify_included(&output, out);
        let storage_pk = self.ledger.config().storage_pk;
        for result in output.results {
            match encrypt_request_result(&result, &storage_pk, &self.keypair, &mut self.rng) {
                Ok(sealed) => {
                    self.events.push(
                        "result_sent",
                        format!("request_id={} granted={}", result.request_id, result.granted),
                    );
                    if result.granted {
                        let resend_at = now + self.ledger.config().params.slot_duration;
                        self.pending_results.insert(result.request_id, (sealed.clone(), resend_at));
                    }
                    out.push(Outgoing::to(self.storage, Message::Result(sealed)));
                }
                Err(e) => self.events.push("result_failed", e.to_string()),
            }
        }
    }
}

/// The storage entity as a network node.
#[derive(Debug)]
pub struct StorageNode {
    id: NodeId,
    service: StorageService,
    outbox: Outbox,
    events: Events,
}

impl StorageNode {
    pub fn new(id: NodeId, service: StorageService) -> Self {
        Self {
            id,
            service,
            outbox: Outbox::default(),
            events: Events::default(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn service(&self) -> &StorageService {
        &self.service
    }

    pub fn service_mut(&mut self) -> &mut StorageService {
        &mut self.service
    }

    pub fn outbox(&self) -> &Outbox {
        &self.outbox
    }

    pub fn take_events(&mut self) -> Vec<NodeEvent> {
        std::mem::take(&mut self.events.0)
    }

    pub fn handle(&mut self, from: NodeId, msg: Message, now: u64) -> Vec<Outgoing> {
        let mut out = Vec::new();
        match msg {
            Message::Result(sealed) => match self.service.handle_request_result(&sealed, now) {
                Ok(ResultOutcome::Link { request_id, tx }) => {
                    self.events.push("link_issued", format!("request_id={request_id}"));
                    out.push(self.outbox.push(tx));
                }
                Ok(ResultOutcome::Denied { request_id }) => {
                    self.events.push("denial_recorded", format!("request_id={request_id}"));
                }
                Err(crate::storage::ResultRejection::AlreadyServed(_)) => {}
                Err(e) => self.events.push("result_rejected", e.to_string()),
            },
            Message::Redeem { token, nonce, operation } => {
                let outcome = self.redeem(token, nonce, operation, now, &mut out);
                out.push(Outgoing::to(from, Message::RedeemReply { token, outcome }));
            }
            Message::Included(id) => {
                self.outbox.settle(&id);
            }
            Message::TxRejected { id, reason } => {
                if self.outbox.settle(&id) {
                    self.events.push("tx_rejected", format!("{} reason={reason}", short(&id)));
                }
            }
            _ => {}
        }
        out
    }

    /// Serves a redemption; on success the Storage transaction is queued for
    /// the validators in `out`.
    pub fn redeem(
        &mut self,
        token: LinkToken,
        nonce: Nonce,
        operation: Operation,
        now: u64,
        out: &mut Vec<Outgoing>,
    ) -> Result<Vec<u8>, RedeemError> {
        match self.service.redeem(&token, &nonce, operation, now) {
            Ok((payload, tx)) => {
                self.events.push("redeemed", format!("token={token} operation={operation}"));
                out.push(self.outbox.push(tx));
                Ok(payload)
            }
            Err(e) => {
                self.events.push("redeem_rejected", format!("token={token} error={e}"));
                Err(e)
            }
        }
    }

    pub fn on_tick(&mut self, now: u64, retransmit: bool) -> Vec<Outgoing> {
        let expired = self.service.expire_links(now);
        if expired > 0 {
            self.events.push("links_expired", format!("count={expired}"));
        }
        if retransmit {
            self.outbox.resend()
        } else {
            Vec::new()
        }
    }
}

/// A user (or adversary) endpoint: submits transactions, retransmits them
/// until confirmed, and collects redemption replies.
#[derive(Debug)]
pub struct UserNode {
    id: NodeId,
    keypair: KeyPair,
    outbox: Outbox,
    replies: Vec<(LinkToken, Result<Vec<u8>, RedeemError>)>,
    rejections: Vec<(Digest, Reject)>,
    events: Events,
}

impl UserNode {
    pub fn new(id: NodeId, keypair: KeyPair) -> Self {
        Self {
            id,
            keypair,
            outbox: Outbox::default(),
            replies: Vec::new(),
            rejections: Vec::new(),
            events: Events::default(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn keypair(&self) -> &KeyPair {
        &self.keypair
    }

    pub fn outbox(&self) -> &Outbox {
        &self.outbox
    }

    pub fn replies(&self) -> &[(LinkToken, Result<Vec<u8>, RedeemError>)] {
        &self.replies
    }

    pub fn rejections(&self) -> &[(Digest, Reject)] {
        &self.rejections
    }

    pub fn take_events(&mut self) -> Vec<NodeEvent> {
        std::mem::take(&mut self.events.0)
    }

    pub fn submit(&mut self, tx: Transaction) -> Outgoing {
        self.events.push("tx_submitted", format!("{} kind={}", short(&tx.id()), tx.kind()));
        self.outbox.push(tx)
    }

    pub fn handle(&mut self, _from: NodeId, msg: Message, _now: u64) -> Vec<Outgoing> {
        match msg {
            Message::Included(id) => {
                if self.outbox.settle(&id) {
                    self.events.push("tx_confirmed", short(&id));
                }
            }
            Message::TxRejected { id, reason } => {
                if self.outbox.settle(&id) {
                    self.events.push("tx_rejected", format!("{} reason={reason}", short(&id)));
                    self.rejections.push((id, reason));
                }
            }
            Message::RedeemReply { token, outcome } => {
                let detail = match &outcome {
                    Ok(p) => format!("token={token} ok bytes={}", p.len()),
                    Err(e) => format!("token={token} error={e}"),
                };
                self.events.push("redeem_reply", detail);
                self.replies.push((token, outcome));
            }
            _ => {}
        }
        Vec::new()
    }

    pub fn on_tick(&mut self, _now: u64, retransmit: bool) -> Vec<Outgoing> {
        if retransmit {
            self.outbox.resend()
        } else {
            Vec::new()
        }
    }
}

/// Resolves a destination to concrete node ids.
pub fn expand(dest: Dest, sender: NodeId, validator_count: usize) -> Vec<NodeId> {
    match dest {
        Dest::Node(n) => vec![n],
        Dest::Validators => (0..validator_count).filter(|v| *v != sender).collect(),
    }
}
