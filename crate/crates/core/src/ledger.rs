//! Chain validation and the state derived from it.
//!
//! [`LedgerState`] holds the chain, the memory derived by replaying it
//! (registered users, the nonce registry, request records and the access
//! log) and the pool of transactions waiting for a block. Replaying the same
//! blocks always reproduces the same memory, which [`LedgerState::state_digest`]
//! summarizes.
//!
//! Leaders are scheduled by slot: a block at time `t` belongs to slot
//! `(t - genesis_time) / slot_duration` and must be signed by
//! `validators[slot mod v]`. Slots are strictly increasing along a chain.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::contracts::{authentication_contract, authorization_contract, AuthFailure, AuthzFailure, RequestResult};
use crate::crypto::{self, Digest, KeyPair, PublicKey, Signature};
use crate::engine::{DecisionEngine, InputEncoding, PriorityRule};
use crate::types::{
    verify_transaction_signature, Block, LinkTx, Nonce, Operation, RequestId, SetupTx, StorageTx,
    Transaction, TxOrigin, VerifiedTx,
};

pub const MIN_VALIDATORS: usize = 3;
pub const DEFAULT_FRESHNESS_WINDOW: u64 = 120;
pub const DEFAULT_LINK_LIFETIME: u64 = 300;
pub const DEFAULT_SLOT_DURATION: u64 = 1;
pub const MAX_BLOCK_TRANSACTIONS: usize = 1024;

/// `time` lies within `window` seconds of `now`, in either direction.
pub fn is_fresh(time: u64, now: u64, window: u64) -> bool {
    time > 0 && time <= now.saturating_add(window) && now <= time.saturating_add(window)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtocolParams {
    pub freshness_window: u64,
    pub link_lifetime: u64,
    pub slot_duration: u64,
    pub user_width: u32,
    pub resource_width: u32,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        let enc = InputEncoding::default();
        Self {
            freshness_window: DEFAULT_FRESHNESS_WINDOW,
            link_lifetime: DEFAULT_LINK_LIFETIME,
            slot_duration: DEFAULT_SLOT_DURATION,
            user_width: enc.user_width,
            resource_width: enc.resource_width,
        }
    }
}

impl ProtocolParams {
    pub fn encoding(&self) -> InputEncoding {
        InputEncoding {
            user_width: self.user_width,
            resource_width: self.resource_width,
        }
    }
}

impl Canonical for ProtocolParams {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.u64(self.freshness_window)
            .u64(self.link_lifetime)
            .u64(self.slot_duration)
            .u32(self.user_width)
            .u32(self.resource_width);
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            freshness_window: dec.u64()?,
            link_lifetime: dec.u64()?,
            slot_duration: dec.u64()?,
            user_width: dec.u32()?,
            resource_width: dec.u32()?,
        })
    }
}

/// Everything the genesis block fixes for the life of the chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenesisConfig {
    pub time: u64,
    pub admin_pks: Vec<PublicKey>,
    pub validators: Vec<PublicKey>,
    pub storage_pk: PublicKey,
    /// SHA-256 of the serialized decision model.
    pub engine_fingerprint: Digest,
    pub rules: Vec<PriorityRule>,
    pub params: ProtocolParams,
}

impl GenesisConfig {
    pub fn validate(&self) -> Result<(), LedgerError> {
        let config = |m: &str| Err(LedgerError::Config(m.to_string()));
        if self.validators.len() < MIN_VALIDATORS {
            return Err(LedgerError::Config(format!(
                "need at least {MIN_VALIDATORS} validators, got {}",
                self.validators.len()
            )));
        }
        if self.validators.iter().collect::<BTreeSet<_>>().len() != self.validators.len() {
            return config("validator keys must be distinct");
        }
        if self.admin_pks.is_empty() {
            return config("at least one admin key is required");
        }
        if self.time == 0 {
            return config("genesis time must be positive");
        }
        if self.params.slot_duration == 0 {
            return config("slot duration must be positive");
        }
        crate::engine::validate_rules(&self.rules).map_err(|e| LedgerError::Config(e.to_string()))
    }

    pub fn slot_of(&self, time: u64) -> Option<u64> {
        time.checked_sub(self.time).map(|d| d / self.params.slot_duration)
    }

    pub fn slot_start(&self, slot: u64) -> u64 {
        self.time + slot * self.params.slot_duration
    }

    pub fn leader_for_time(&self, time: u64) -> Option<PublicKey> {
        self.slot_of(time).map(|s| expected_leader(s, &self.validators))
    }

    pub fn save(&self, path: &Path) -> Result<(), LedgerError> {
        fs::write(path, self.to_canonical_bytes()).map_err(|e| LedgerError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, LedgerError> {
        let bytes = fs::read(path).map_err(|e| LedgerError::Io(format!("{}: {e}", path.display())))?;
        let config = Self::from_canonical_bytes(&bytes)?;
        config.validate()?;
        Ok(config)
    }
}

impl Canonical for GenesisConfig {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.u64(self.time)
            .seq(&self.admin_pks)
            .seq(&self.validators)
            .value(&self.storage_pk)
            .value(&self.engine_fingerprint)
            .seq(&self.rules)
            .value(&self.params);
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            time: dec.u64()?,
            admin_pks: dec.seq()?,
            validators: dec.seq()?,
            storage_pk: dec.value()?,
            engine_fingerprint: dec.value()?,
            rules: dec.seq()?,
            params: dec.value()?,
        })
    }
}

pub fn expected_leader(slot: u64, validators: &[PublicKey]) -> PublicKey {
    validators[(slot % validators.len() as u64) as usize]
}

/// The unsigned block at height 0 that carries the configuration.
pub fn genesis_block(config: &GenesisConfig) -> Block {
    Block {
        height: 0,
        prev_hash: Digest::ZERO,
        time: config.time,
        transactions: Vec::new(),
        validator_pk: PublicKey([0; 32]),
        validator_sig: Signature([0; 64]),
        config: Some(config.clone()),
    }
}

/// Why a single transaction was refused.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Reject {
    #[error("bad_signature")]
    BadSignature,
    #[error("stale_time")]
    StaleTime,
    #[error("unauthorized_sender")]
    UnauthorizedSender,
    #[error("duplicate")]
    Duplicate,
    #[error("duplicate_user")]
    DuplicateUser,
    #[error("unknown_request")]
    UnknownRequest,
    #[error("unknown_nonce")]
    UnknownNonce,
    #[error("replay")]
    Replay,
    #[error("expired")]
    Expired,
    #[error("user_mismatch")]
    UserMismatch,
}

impl Reject {
    pub const ALL: [Reject; 10] = [
        Reject::BadSignature,
        Reject::StaleTime,
        Reject::UnauthorizedSender,
        Reject::Duplicate,
        Reject::DuplicateUser,
        Reject::UnknownRequest,
        Reject::UnknownNonce,
        Reject::Replay,
        Reject::Expired,
        Reject::UserMismatch,
    ];

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|r| *r == self).unwrap_or(0) as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BlockError {
    #[error("height {got} does not extend tip height {tip}")]
    Height { tip: u64, got: u64 },
    #[error("prev_hash does not match the tip")]
    BrokenHashChain,
    #[error("block time {0} is not in a later slot than its parent")]
    BadTime(u64),
    #[error("block is not signed by the scheduled leader")]
    WrongLeader,
    #[error("block signature does not verify")]
    BadSignature,
    #[error("only the genesis block may carry configuration")]
    UnexpectedConfig,
    #[error("too many transactions: {0}")]
    TooLarge(usize),
    #[error("transaction {index} rejected: {reason}")]
    InvalidTransaction { index: usize, reason: Reject },
    #[error("transaction {index}: verified transaction does not match local contract output")]
    VerifiedMismatch { index: usize },
    #[error("invalid genesis block")]
    BadGenesis,
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("block rejected at height {height}: {error}")]
    Block { height: u64, error: BlockError },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LogKind {
    Requested,
    Authenticated,
    Decided,
    Denied,
    LinkIssued,
    Redeemed,
    Expired,
}

impl LogKind {
    pub const ALL: [LogKind; 7] = [
        LogKind::Requested,
        LogKind::Authenticated,
        LogKind::Decided,
        LogKind::Denied,
        LogKind::LinkIssued,
        LogKind::Redeemed,
        LogKind::Expired,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LogKind::Requested => "requested",
            LogKind::Authenticated => "authenticated",
            LogKind::Decided => "decided",
            LogKind::Denied => "denied",
            LogKind::LinkIssued => "link_issued",
            LogKind::Redeemed => "redeemed",
            LogKind::Expired => "expired",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, LogKind::Denied | LogKind::Redeemed | LogKind::Expired)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Decision {
    Granted,
    Denied,
}

impl Decision {
    pub fn name(self) -> &'static str {
        match self {
            Decision::Granted => "granted",
            Decision::Denied => "denied",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DenyReason {
    Unregistered,
    Stale,
    BadSignature,
    OutOfRange,
    Model,
    Rule,
    Engine,
}

impl DenyReason {
    pub const ALL: [DenyReason; 7] = [
        DenyReason::Unregistered,
        DenyReason::Stale,
        DenyReason::BadSignature,
        DenyReason::OutOfRange,
        DenyReason::Model,
        DenyReason::Rule,
        DenyReason::Engine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DenyReason::Unregistered => "unregistered",
            DenyReason::Stale => "stale",
            DenyReason::BadSignature => "bad_signature",
            DenyReason::OutOfRange => "out_of_range",
            DenyReason::Model => "model",
            DenyReason::Rule => "rule",
            DenyReason::Engine => "engine",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl From<AuthFailure> for DenyReason {
    fn from(f: AuthFailure) -> Self {
        match f {
            AuthFailure::Unregistered => DenyReason::Unregistered,
            AuthFailure::Stale => DenyReason::Stale,
            AuthFailure::BadSignature => DenyReason::BadSignature,
            AuthFailure::OutOfRange => DenyReason::OutOfRange,
        }
    }
}

macro_rules! index_enum_codec {
    ($ty:ty, $what:expr) => {
        impl Canonical for $ty {
            fn encode_to(&self, enc: &mut Encoder) {
                enc.u8(<$ty>::ALL.iter().position(|v| v == self).unwrap_or(0) as u8);
            }
            fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
                let tag = dec.u8()?;
                <$ty>::ALL
                    .get(tag as usize)
                    .copied()
                    .ok_or(CodecError::InvalidTag { what: $what, tag })
            }
        }
    };
}

index_enum_codec!(LogKind, "log kind");
index_enum_codec!(DenyReason, "deny reason");
index_enum_codec!(Reject, "reject reason");

impl Decision {
    const ALL: [Decision; 2] = [Decision::Granted, Decision::Denied];
}
index_enum_codec!(Decision, "decision");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub kind: LogKind,
    pub request_id: RequestId,
    pub user_pk: PublicKey,
    pub resource_id: u32,
    pub operation: Operation,
    pub decision: Option<Decision>,
    pub reason: Option<DenyReason>,
    pub overridden: bool,
    pub block_height: u64,
    pub time: u64,
}

impl Canonical for LogEntry {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.value(&self.kind)
            .value(&self.request_id)
            .value(&self.user_pk)
            .u32(self.resource_id)
            .value(&self.operation)
            .option(self.decision.as_ref())
            .option(self.reason.as_ref())
            .bool(self.overridden)
            .u64(self.block_height)
            .u64(self.time);
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            kind: dec.value()?,
            request_id: dec.value()?,
            user_pk: dec.value()?,
            resource_id: dec.u32()?,
            operation: dec.value()?,
            decision: dec.option()?,
            reason: dec.option()?,
            overridden: dec.bool()?,
            block_height: dec.u64()?,
            time: dec.u64()?,
        })
    }
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "height={} time={} kind={} request_id={} user_pk={} resource_id={} operation={}",
            self.block_height,
            self.time,
            self.kind.name(),
            self.request_id,
            self.user_pk,
            self.resource_id,
            self.operation
        )?;
        if let Some(d) = self.decision {
            write!(f, " decision={}", d.name())?;
        }
        if let Some(r) = self.reason {
            write!(f, " reason={}", r.name())?;
        }
        if self.kind == LogKind::Decided {
            write!(f, " overridden={}", self.overridden)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LogFilter {
    pub user_pk: Option<PublicKey>,
    pub resource_id: Option<u32>,
    pub decision: Option<Decision>,
    pub kind: Option<LogKind>,
    pub request_id: Option<RequestId>,
    pub heights: Option<RangeInclusive<u64>>,
}

impl LogFilter {
    pub fn matches(&self, e: &LogEntry) -> bool {
        self.user_pk.map_or(true, |pk| pk == e.user_pk)
            && self.resource_id.map_or(true, |r| r == e.resource_id)
            && self.decision.map_or(true, |d| e.decision == Some(d))
            && self.kind.map_or(true, |k| k == e.kind)
            && self.request_id.map_or(true, |r| r == e.request_id)
            && self.heights.as_ref().map_or(true, |h| h.contains(&e.block_height))
    }
}

impl Canonical for LogFilter {
    fn encode_to(&self, enc: &mut Encoder) {
        let heights = self.heights.as_ref().map(|h| (*h.start(), *h.end()));
        enc.option(self.user_pk.as_ref())
            .option(self.resource_id.as_ref())
            .option(self.decision.as_ref())
            .option(self.kind.as_ref())
            .option(self.request_id.as_ref())
            .option(heights.map(|h| h.0).as_ref())
            .option(heights.map(|h| h.1).as_ref());
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let mut f = Self {
            user_pk: dec.option()?,
            resource_id: dec.option()?,
            decision: dec.option()?,
            kind: dec.option()?,
            request_id: dec.option()?,
            heights: None,
        };
        let lo: Option<u64> = dec.option()?;
        let hi: Option<u64> = dec.option()?;
        if let (Some(lo), Some(hi)) = (lo, hi) {
            f.heights = Some(lo..=hi);
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserRecord {
    pub user_index: u64,
    pub registered_at: u64,
}

/// Position of a transaction on chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TxLocation {
    pub height: u64,
    pub index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NonceRecord {
    pub request_id: RequestId,
    pub user_pk: PublicKey,
    pub resource_id: u32,
    pub operation: Operation,
    pub issued_at: u64,
    pub expires_at: u64,
    pub redeemed: bool,
    pub expired: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestStatus {
    Requested,
    Denied(DenyReason),
    Granted { decided_at: u64 },
    LinkIssued { nonce_digest: Digest },
    Redeemed,
    Expired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RequestRecord {
    pub user_pk: PublicKey,
    pub resource_id: u32,
    pub operation: Operation,
    pub requested_at: u64,
    pub status: RequestStatus,
    pub link: Option<TxLocation>,
}

/// The key-value state derived from the chain.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Memory {
    users: BTreeMap<Digest, UserRecord>,
    user_keys: Vec<PublicKey>,
    nonces: BTreeMap<Digest, NonceRecord>,
    requests: BTreeMap<RequestId, RequestRecord>,
    access_log: Vec<LogEntry>,
    seen: BTreeSet<Digest>,
}

impl Memory {
    pub fn user(&self, pk: &PublicKey) -> Option<&UserRecord> {
        self.users.get(&crypto::hash(&pk.0))
    }

    pub fn user_key(&self, user_index: u64) -> Option<&PublicKey> {
        self.user_keys.get(usize::try_from(user_index).ok()?)
    }

    pub fn user_count(&self) -> usize {
        self.user_keys.len()
    }

    pub fn request(&self, id: &RequestId) -> Option<&RequestRecord> {
        self.requests.get(id)
    }

    pub fn requests(&self) -> impl Iterator<Item = (&RequestId, &RequestRecord)> {
        self.requests.iter()
    }

    pub fn nonce(&self, digest: &Digest) -> Option<&NonceRecord> {
        self.nonces.get(digest)
    }

    pub fn nonces(&self) -> impl Iterator<Item = (&Digest, &NonceRecord)> {
        self.nonces.iter()
    }

    pub fn access_log(&self) -> &[LogEntry] {
        &self.access_log
    }

    pub fn has_seen(&self, id: &Digest) -> bool {
        self.seen.contains(id)
    }

    /// Assigns the next dense user index.
    pub fn register_user(&mut self, setup: &SetupTx) -> Result<UserRecord, Reject> {
        let key = crypto::hash(&setup.user_pk.0);
        if self.users.contains_key(&key) {
            return Err(Reject::DuplicateUser);
        }
        let record = UserRecord {
            user_index: self.user_keys.len() as u64,
            registered_at: setup.time,
        };
        self.users.insert(key, record);
        self.user_keys.push(setup.user_pk);
        Ok(record)
    }

    #[cfg(test)]
    pub(crate) fn insert_request(&mut self, id: RequestId, record: RequestRecord) {
        self.requests.insert(id, record);
    }

    pub fn record_nonce(&mut self, nonce_digest: Digest, record: NonceRecord) -> Result<(), Reject> {
        if self.nonces.contains_key(&nonce_digest) {
            return Err(Reject::Replay);
        }
        self.nonces.insert(nonce_digest, record);
        Ok(())
    }

    pub fn check_redeem(&self, nonce: &Nonce, now: u64) -> Result<&NonceRecord, Reject> {
        let record = self
            .nonces
            .get(&crypto::hash(&nonce.0))
            .ok_or(Reject::UnknownNonce)?;
        if record.redeemed {
            return Err(Reject::Replay);
        }
        if record.expired || now > record.expires_at {
            return Err(Reject::Expired);
        }
        Ok(record)
    }

    pub fn redeem_nonce(&mut self, nonce: &Nonce, now: u64) -> Result<NonceRecord, Reject> {
        self.check_redeem(nonce, now)?;
        let record = self.nonces.get_mut(&crypto::hash(&nonce.0)).expect("checked above");
        record.redeemed = true;
        Ok(*record)
    }

    pub fn query_access_log(&self, filter: &LogFilter) -> Vec<LogEntry> {
        self.access_log.iter().filter(|e| filter.matches(e)).cloned().collect()
    }

    fn log(&mut self, kind: LogKind, request_id: RequestId, height: u64, time: u64) -> &mut LogEntry {
        let r = self.requests[&request_id];
        self.access_log.push(LogEntry {
            kind,
            request_id,
            user_pk: r.user_pk,
            resource_id: r.resource_id,
            operation: r.operation,
            decision: None,
            reason: None,
            overridden: false,
            block_height: height,
            time,
        });
        self.access_log.last_mut().expect("just pushed")
    }

    fn deny(&mut self, request_id: RequestId, reason: DenyReason, height: u64, time: u64) {
        self.log(LogKind::Denied, request_id, height, time).reason = Some(reason);
        self.requests.get_mut(&request_id).expect("known request").status = RequestStatus::Denied(reason);
    }

    fn encode_state(&self, enc: &mut Encoder) {
        enc.u32(self.users.len() as u32);
        for (k, u) in &self.users {
            enc.value(k).u64(u.user_index).u64(u.registered_at);
        }
        enc.seq(&self.user_keys);
        enc.u32(self.nonces.len() as u32);
        for (k, n) in &self.nonces {
            enc.value(k)
                .value(&n.request_id)
                .value(&n.user_pk)
                .u32(n.resource_id)
                .value(&n.operation)
                .u64(n.issued_at)
                .u64(n.expires_at)
                .bool(n.redeemed)
                .bool(n.expired);
        }
        enc.u32(self.requests.len() as u32);
        for (k, r) in &self.requests {
            enc.value(k)
                .value(&r.user_pk)
                .u32(r.resource_id)
                .value(&r.operation)
                .u64(r.requested_at);
            match r.status {
                RequestStatus::Requested => enc.u8(0),
                RequestStatus::Denied(reason) => enc.u8(1).value(&reason),
                RequestStatus::Granted { decided_at } => enc.u8(2).u64(decided_at),
                RequestStatus::LinkIssued { nonce_digest } => enc.u8(3).value(&nonce_digest),
                RequestStatus::Redeemed => enc.u8(4),
                RequestStatus::Expired => enc.u8(5),
            };
            match r.link {
                None => enc.u8(0),
                Some(l) => enc.u8(1).u64(l.height).u32(l.index),
            };
        }
        enc.seq(&self.access_log);
        enc.u32(self.seen.len() as u32);
        for id in &self.seen {
            enc.value(id);
        }
    }
}

/// What applying a block produced besides the state change.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BlockOutput {
    pub results: Vec<RequestResult>,
    pub included: Vec<Digest>,
}

/// Summary line for chain listings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSummary {
    pub height: u64,
    pub hash: Digest,
    pub prev_hash: Digest,
    pub time: u64,
    pub validator_pk: PublicKey,
    pub tx_kinds: Vec<String>,
}

impl BlockSummary {
    pub fn of(block: &Block) -> Self {
        Self {
            height: block.height,
            hash: block.hash(),
            prev_hash: block.prev_hash,
            time: block.time,
            validator_pk: block.validator_pk,
            tx_kinds: block.transactions.iter().map(|t| t.kind().to_string()).collect(),
        }
    }
}

impl Canonical for BlockSummary {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.u64(self.height)
            .value(&self.hash)
            .value(&self.prev_hash)
            .u64(self.time)
            .value(&self.validator_pk)
            .seq(&self.tx_kinds);
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            height: dec.u64()?,
            hash: dec.value()?,
            prev_hash: dec.value()?,
            time: dec.u64()?,
            validator_pk: dec.value()?,
            tx_kinds: dec.seq()?,
        })
    }
}

impl fmt::Display for BlockSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "height={} hash={} prev={} time={} validator={} txs=[{}]",
            self.height,
            self.hash,
            self.prev_hash,
            self.time,
            self.validator_pk,
            self.tx_kinds.join(",")
        )
    }
}

/// Execution context for one block.
struct Exec<'a> {
    config: &'a GenesisConfig,
    engine: &'a DecisionEngine,
    height: u64,
    now: u64,
}

impl Exec<'_> {
    /// Expiry sweep run before a block's transactions. A grace of one
    /// freshness window lets a redemption made just before expiry still
    /// reach the chain.
    fn sweep(&self, m: &mut Memory) {
        let grace = self.config.params.freshness_window;
        let lifetime = self.config.params.link_lifetime;
        let mut expired = Vec::new();
        for (digest, n) in &m.nonces {
            if !n.redeemed && !n.expired && self.now > n.expires_at.saturating_add(grace) {
                expired.push((*digest, n.request_id));
            }
        }
        for (id, r) in &m.requests {
            if let RequestStatus::Granted { decided_at } = r.status {
                if self.now > decided_at.saturating_add(lifetime).saturating_add(grace) {
                    expired.push((Digest::ZERO, *id));
                }
            }
        }
        expired.sort_by_key(|(_, id)| *id);
        for (digest, id) in expired {
            if let Some(n) = m.nonces.get_mut(&digest) {
                n.expired = true;
            }
            m.requests.get_mut(&id).expect("known request").status = RequestStatus::Expired;
            m.log(LogKind::Expired, id, self.height, self.now);
        }
    }

    fn check(&self, m: &Memory, tx: &Transaction) -> Result<(), Reject> {
        check_transaction(self.config, m, tx, self.now)
    }

    /// Applies a checked network transaction. For an access request, returns
    /// the `Verified` transaction the authentication contract produced.
    fn apply(&self, m: &mut Memory, tx: &Transaction, index: u32) -> Option<VerifiedTx> {
        m.seen.insert(tx.id());
        match tx {
            Transaction::Setup(t) => {
                m.register_user(t).expect("checked");
                None
            }
            Transaction::AccReq(t) => {
                let id = t.req_info.request_id;
                m.requests.insert(
                    id,
                    RequestRecord {
                        user_pk: t.user_pk,
                        resource_id: t.req_info.resource_id,
                        operation: t.req_info.operation,
                        requested_at: t.time,
                        status: RequestStatus::Requested,
                        link: None,
                    },
                );
                m.log(LogKind::Requested, id, self.height, self.now);
                match authentication_contract(t, m, &self.config.params, self.now) {
                    Ok(v) => {
                        m.log(LogKind::Authenticated, id, self.height, self.now);
                        Some(v)
                    }
                    Err(f) => {
                        m.deny(id, f.into(), self.height, self.now);
                        None
                    }
                }
            }
            Transaction::Link(t) => {
                let r = m.requests.get_mut(&t.request_id).expect("checked");
                r.status = RequestStatus::LinkIssued {
                    nonce_digest: t.nonce_digest,
                };
                r.link = Some(TxLocation {
                    height: self.height,
                    index,
                });
                let r = *r;
                let record = NonceRecord {
                    request_id: t.request_id,
                    user_pk: r.user_pk,
                    resource_id: r.resource_id,
                    operation: r.operation,
                    issued_at: t.time,
                    expires_at: t.time.saturating_add(self.config.params.link_lifetime),
                    redeemed: false,
                    expired: false,
                };
                m.record_nonce(t.nonce_digest, record).expect("checked");
                m.log(LogKind::LinkIssued, t.request_id, self.height, self.now);
                None
            }
            Transaction::Storage(t) => {
                let n = m.redeem_nonce(&t.nonce, t.time).expect("checked");
                m.requests.get_mut(&n.request_id).expect("known request").status = RequestStatus::Redeemed;
                m.log(LogKind::Redeemed, n.request_id, self.height, self.now);
                None
            }
            Transaction::Verified(_) => unreachable!("verified transactions are never checked in"),
        }
    }

    fn authorize(&self, m: &mut Memory, v: &VerifiedTx) -> Option<RequestResult> {
        m.seen.insert(Transaction::Verified(v.clone()).id());
        let id = v.request_id;
        match authorization_contract(v, m, self.engine, &self.config.rules, &self.config.params, self.now) {
            Ok((result, decision)) => {
                let op = result.operation.index();
                let entry = m.log(LogKind::Decided, id, self.height, self.now);
                entry.decision = Some(if result.granted { Decision::Granted } else { Decision::Denied });
                entry.overridden = decision.overridden[op];
                if result.granted {
                    m.requests.get_mut(&id).expect("known request").status =
                        RequestStatus::Granted { decided_at: self.now };
                } else {
                    let reason = if decision.overridden[op] { DenyReason::Rule } else { DenyReason::Model };
                    m.deny(id, reason, self.height, self.now);
                }
                Some(result)
            }
            Err(f) => {
                let reason = match f {
                    AuthzFailure::Stale => DenyReason::Stale,
                    _ => DenyReason::Engine,
                };
                m.deny(id, reason, self.height, self.now);
                None
            }
        }
    }
}

/// Validity of a network transaction against `memory` at time `now`,
/// ignoring the pool.
pub fn check_transaction(config: &GenesisConfig, m: &Memory, tx: &Transaction, now: u64) -> Result<(), Reject> {
    if let Transaction::Setup(t) = tx {
        if !config.admin_pks.contains(&t.admin_pk) {
            return Err(Reject::UnauthorizedSender);
        }
    }
    if matches!(tx, Transaction::Verified(_)) {
        return Err(Reject::UnauthorizedSender);
    }
    if !verify_transaction_signature(tx, &config.storage_pk, TxOrigin::Network) {
        return Err(Reject::BadSignature);
    }
    if !is_fresh(tx.time(), now, config.params.freshness_window) {
        return Err(Reject::StaleTime);
    }
    if m.seen.contains(&tx.id()) {
        return Err(Reject::Duplicate);
    }
    match tx {
        Transaction::Setup(t) => {
            if m.user(&t.user_pk).is_some() {
                return Err(Reject::DuplicateUser);
            }
        }
        Transaction::AccReq(t) => {
            if m.requests.contains_key(&t.req_info.request_id) {
                return Err(Reject::Duplicate);
            }
        }
        Transaction::Link(LinkTx {
            request_id,
            nonce_digest,
            ..
        }) => {
            match m.requests.get(request_id).map(|r| r.status) {
                None => return Err(Reject::UnknownRequest),
                Some(RequestStatus::Granted { .. }) => {}
                Some(RequestStatus::Expired) => return Err(Reject::Expired),
                Some(_) => return Err(Reject::Duplicate),
            }
            if m.nonces.contains_key(nonce_digest) {
                return Err(Reject::Replay);
            }
        }
        Transaction::Storage(StorageTx { nonce, time, user_pk, .. }) => {
            let record = m.check_redeem(nonce, *time)?;
            if record.user_pk != *user_pk {
                return Err(Reject::UserMismatch);
            }
        }
        Transaction::Verified(_) => unreachable!(),
    }
    Ok(())
}

/// The chain, its derived memory, and the transaction pool.
#[derive(Debug, Clone)]
pub struct LedgerState {
    config: GenesisConfig,
    engine: Arc<DecisionEngine>,
    chain: Vec<Block>,
    memory: Memory,
    pool: Vec<Transaction>,
    pool_ids: BTreeSet<Digest>,
}

impl LedgerState {
    pub fn genesis(config: GenesisConfig, engine: Arc<DecisionEngine>) -> Result<Self, LedgerError> {
        config.validate()?;
        if engine.fingerprint() != config.engine_fingerprint {
            return Err(LedgerError::Config(format!(
                "decision model fingerprint {} does not match genesis {}",
                engine.fingerprint(),
                config.engine_fingerprint
            )));
        }
        if engine.encoding() != config.params.encoding() {
            return Err(LedgerError::Config("model input widths do not match genesis".into()));
        }
        let block = genesis_block(&config);
        Ok(Self {
            config,
            engine,
            chain: vec![block],
            memory: Memory::default(),
            pool: Vec::new(),
            pool_ids: BTreeSet::new(),
        })
    }

    /// Rebuilds state by replaying `blocks`, the first of which must be a
    /// genesis block.
    pub fn from_blocks(blocks: &[Block], engine: Arc<DecisionEngine>) -> Result<Self, LedgerError> {
        let first = blocks.first().ok_or_else(|| LedgerError::Config("empty chain".into()))?;
        let config = first
            .config
            .clone()
            .ok_or(LedgerError::Block { height: 0, error: BlockError::BadGenesis })?;
        let mut state = Self::genesis(config, engine)?;
        if *first != state.chain[0] {
            return Err(LedgerError::Block { height: 0, error: BlockError::BadGenesis });
        }
        for block in &blocks[1..] {
            state
                .apply_block(block)
                .map_err(|error| LedgerError::Block { height: block.height, error })?;
        }
        Ok(state)
    }

    pub fn config(&self) -> &GenesisConfig {
        &self.config
    }

    pub fn engine(&self) -> &Arc<DecisionEngine> {
        &self.engine
    }

    pub fn chain(&self) -> &[Block] {
        &self.chain
    }

    pub fn tip(&self) -> &Block {
        self.chain.last().expect("chain always holds genesis")
    }

    pub fn tip_hash(&self) -> Digest {
        self.tip().hash()
    }

    pub fn height(&self) -> u64 {
        self.tip().height
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    pub fn pool(&self) -> &[Transaction] {
        &self.pool
    }

    pub fn genesis_hash(&self) -> Digest {
        self.chain[0].hash()
    }

    /// SHA-256 over the tip and the derived memory. The pool is excluded.
    pub fn state_digest(&self) -> Digest {
        let mut enc = Encoder::new();
        enc.str("dlacb/state").u64(self.height()).value(&self.tip_hash());
        self.memory.encode_state(&mut enc);
        crypto::hash(&enc.into_bytes())
    }

    pub fn validate_transaction(&self, tx: &Transaction, now: u64) -> Result<(), Reject> {
        check_transaction(&self.config, &self.memory, tx, now)?;
        if self.pool_ids.contains(&tx.id()) {
            return Err(Reject::Duplicate);
        }
        Ok(())
    }

    pub fn submit(&mut self, tx: Transaction, now: u64) -> Result<Digest, Reject> {
        self.validate_transaction(&tx, now)?;
        let id = tx.id();
        self.pool_ids.insert(id);
        self.pool.push(tx);
        Ok(id)
    }

    /// Drops pool entries that are no longer valid at `now`.
    pub fn prune_pool(&mut self, now: u64) {
        let pool = std::mem::take(&mut self.pool);
        self.pool_ids.clear();
        for tx in pool {
            let _ = self.submit(tx, now);
        }
    }

    /// Replaces the pool; used after switching to another fork.
    pub fn set_pool(&mut self, txs: Vec<Transaction>, now: u64) {
        self.pool.clear();
        self.pool_ids.clear();
        for tx in txs {
            let _ = self.submit(tx, now);
        }
    }

    pub fn query_access_log(&self, filter: &LogFilter) -> Vec<LogEntry> {
        self.memory.query_access_log(filter)
    }

    pub fn check_header(&self, block: &Block) -> Result<(), BlockError> {
        let tip = self.tip();
        if block.height != tip.height + 1 {
            return Err(BlockError::Height { tip: tip.height, got: block.height });
        }
        if block.prev_hash != tip.hash() {
            return Err(BlockError::BrokenHashChain);
        }
        if block.config.is_some() {
            return Err(BlockError::UnexpectedConfig);
        }
        let parent_slot = self.config.slot_of(tip.time).expect("tip is not before genesis");
        let slot = match self.config.slot_of(block.time) {
            Some(s) if s > parent_slot => s,
            _ => return Err(BlockError::BadTime(block.time)),
        };
        if block.validator_pk != expected_leader(slot, &self.config.validators) {
            return Err(BlockError::WrongLeader);
        }
        if block.transactions.len() > MAX_BLOCK_TRANSACTIONS {
            return Err(BlockError::TooLarge(block.transactions.len()));
        }
        if !block.verify_signature() {
            return Err(BlockError::BadSignature);
        }
        Ok(())
    }

    /// Validates and applies `block`. On error the state is unchanged.
    pub fn apply_block(&mut self, block: &Block) -> Result<BlockOutput, BlockError> {
        self.check_header(block)?;
        let exec = Exec {
            config: &self.config,
            engine: &self.engine,
            height: block.height,
            now: block.time,
        };
        let mut m = self.memory.clone();
        let mut out = BlockOutput::default();
        exec.sweep(&mut m);
        let txs = &block.transactions;
        let mut i = 0;
        while i < txs.len() {
            let tx = &txs[i];
            exec.check(&m, tx)
                .map_err(|reason| BlockError::InvalidTransaction { index: i, reason })?;
            let verified = exec.apply(&mut m, tx, i as u32);
            out.included.push(tx.id());
            let next_is_verified = matches!(txs.get(i + 1), Some(Transaction::Verified(_)));
            match verified {
                Some(v) => {
                    if txs.get(i + 1) != Some(&Transaction::Verified(v.clone())) {
                        return Err(BlockError::VerifiedMismatch { index: i + 1 });
                    }
                    out.included.push(txs[i + 1].id());
                    out.results.extend(exec.authorize(&mut m, &v));
                    i += 2;
                }
                None if next_is_verified => return Err(BlockError::VerifiedMismatch { index: i + 1 }),
                None => i += 1,
            }
        }
        self.memory = m;
        self.chain.push(block.clone());
        let included: BTreeSet<Digest> = out.included.iter().copied().collect();
        self.pool.retain(|tx| !included.contains(&tx.id()));
        self.pool_ids.retain(|id| !included.contains(id));
        Ok(out)
    }

    /// Builds and signs the block `validator` would seal at `time` from the
    /// current pool, or `None` when it is not this validator's slot or
    /// nothing in the pool is includable.
    pub fn propose_block(&self, validator: &KeyPair, time: u64) -> Option<Block> {
        if self.config.leader_for_time(time) != Some(validator.public) {
            return None;
        }
        let exec = Exec {
            config: &self.config,
            engine: &self.engine,
            height: self.height() + 1,
            now: time,
        };
        let mut m = self.memory.clone();
        exec.sweep(&mut m);
        let mut txs = Vec::new();
        for tx in &self.pool {
            if txs.len() + 2 > MAX_BLOCK_TRANSACTIONS {
                break;
            }
            if exec.check(&m, tx).is_err() {
                continue;
            }
            let verified = exec.apply(&mut m, tx, txs.len() as u32);
            txs.push(tx.clone());
            if let Some(v) = verified {
                exec.authorize(&mut m, &v);
                txs.push(Transaction::Verified(v));
            }
        }
        if txs.is_empty() {
            return None;
        }
        let block = Block::seal(validator, self.height() + 1, self.tip_hash(), time, txs);
        self.check_header(&block).ok()?;
        Some(block)
    }

    pub fn block_summaries(&self, from: u64, to: u64) -> Vec<BlockSummary> {
        let to = to.min(self.height());
        if from > to {
            return Vec::new();
        }
        self.chain[from as usize..=to as usize].iter().map(BlockSummary::of).collect()
    }

    /// The `Link` transaction issued for `request_id`, if any.
    pub fn link_for(&self, request_id: &RequestId) -> Option<&LinkTx> {
        let loc = self.memory.request(request_id)?.link?;
        match self.chain.get(loc.height as usize)?.transactions.get(loc.index as usize)? {
            Transaction::Link(t) => Some(t),
            _ => None,
        }
    }

    /// Human-readable dump of the derived memory.
    pub fn snapshot_text(&self) -> String {
        let mut out = format!(
            "height={} tip={} state_digest={}\nusers={}\n",
            self.height(),
            self.tip_hash(),
            self.state_digest(),
            self.memory.user_count()
        );
        for (i, pk) in self.memory.user_keys.iter().enumerate() {
            out.push_str(&format!("  user index={i} pk={pk}\n"));
        }
        out.push_str(&format!("nonces={}\n", self.memory.nonces.len()));
        for (d, n) in &self.memory.nonces {
            out.push_str(&format!(
                "  nonce_digest={d} request_id={} issued_at={} expires_at={} redeemed={} expired={}\n",
                n.request_id, n.issued_at, n.expires_at, n.redeemed, n.expired
            ));
        }
        out.push_str(&format!("access_log={}\n", self.memory.access_log.len()));
        for e in &self.memory.access_log {
            out.push_str(&format!("  {e}\n"));
        }
        out
    }
}

/// What the chain says about one request, as seen by a polling user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RequestView {
    Unknown,
    Pending,
    Denied(DenyReason),
    Link { link: LinkTx, expires_at: u64 },
    Redeemed,
    Expired,
}

impl Canonical for RequestView {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            RequestView::Unknown => enc.u8(0),
            RequestView::Pending => enc.u8(1),
            RequestView::Denied(r) => enc.u8(2).value(r),
            RequestView::Link { link, expires_at } => {
                enc.u8(3).value(&Transaction::Link(link.clone())).u64(*expires_at)
            }
            RequestView::Redeemed => enc.u8(4),
            RequestView::Expired => enc.u8(5),
        };
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(match dec.u8()? {
            0 => RequestView::Unknown,
            1 => RequestView::Pending,
            2 => RequestView::Denied(dec.value()?),
            3 => match dec.value()? {
                Transaction::Link(link) => RequestView::Link { link, expires_at: dec.u64()? },
                _ => return Err(CodecError::InvalidValue("request view link")),
            },
            4 => RequestView::Redeemed,
            5 => RequestView::Expired,
            tag => return Err(CodecError::InvalidTag { what: "request view", tag }),
        })
    }
}

impl LedgerState {
    pub fn request_view(&self, request_id: &RequestId) -> RequestView {
        let Some(record) = self.memory.request(request_id) else {
            return RequestView::Unknown;
        };
        match record.status {
            RequestStatus::Requested | RequestStatus::Granted { .. } => RequestView::Pending,
            RequestStatus::Denied(r) => RequestView::Denied(r),
            RequestStatus::LinkIssued { .. } => match self.link_for(request_id) {
                Some(link) => RequestView::Link {
                    expires_at: link.time.saturating_add(self.config.params.link_lifetime),
                    link: link.clone(),
                },
                None => RequestView::Pending,
            },
            RequestStatus::Redeemed => RequestView::Redeemed,
            RequestStatus::Expired => RequestView::Expired,
        }
    }
}

/// Longest chain wins; equal lengths go to the smaller tip hash.
pub fn fork_choice(candidates: &[Vec<Block>]) -> Option<usize> {
    candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.is_empty())
        .max_by(|(_, a), (_, b)| {
            a.len()
                .cmp(&b.len())
                .then_with(|| b.last().unwrap().hash().cmp(&a.last().unwrap().hash()))
        })
        .map(|(i, _)| i)
}

/// Appends one length-prefixed canonical block to a chain file.
pub fn append_block(path: &Path, block: &Block) -> Result<(), LedgerError> {
    let bytes = block.to_canonical_bytes();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| LedgerError::Io(format!("{}: {e}", path.display())))?;
    let mut record = (bytes.len() as u32).to_be_bytes().to_vec();
    record.extend_from_slice(&bytes);
    file.write_all(&record).map_err(|e| LedgerError::Io(e.to_string()))
}

/// Replaces a chain file with `blocks`, via a temporary file and rename.
pub fn write_chain_file(path: &Path, blocks: &[Block]) -> Result<(), LedgerError> {
    let mut enc = Encoder::new();
    for b in blocks {
        enc.bytes(&b.to_canonical_bytes());
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, enc.into_bytes()).map_err(|e| LedgerError::Io(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| LedgerError::Io(format!("{}: {e}", path.display())))
}

pub fn read_chain_file(path: &Path) -> Result<Vec<Block>, LedgerError> {
    let bytes = fs::read(path).map_err(|e| LedgerError::Io(format!("{}: {e}", path.display())))?;
    let mut dec = Decoder::new(&bytes);
    let mut blocks = Vec::new();
    while dec.remaining() > 0 {
        let record = dec.bytes()?;
        blocks.push(Block::from_canonical_bytes(&record)?);
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{DecisionModel, DEFAULT_DIMS};
    use crate::types::{build_access_request_tx, build_setup_tx, build_storage_tx, ReqInfo};

    fn kp(seed: u8) -> KeyPair {
        KeyPair::from_seed([seed; 32])
    }

    const T0: u64 = 1_000_000;

    fn fixture(n_validators: u8) -> (Vec<KeyPair>, KeyPair, KeyPair, GenesisConfig, Arc<DecisionEngine>) {
        let validators: Vec<KeyPair> = (0..n_validators).map(|i| kp(10 + i)).collect();
        let admin = kp(1);
        let storage = kp(2);
        let engine = Arc::new(
            DecisionEngine::new(DecisionModel::zeros(&DEFAULT_DIMS).unwrap(), InputEncoding::default()).unwrap(),
        );
        let config = GenesisConfig {
            time: T0,
            admin_pks: vec![admin.public],
            validators: validators.iter().map(|v| v.public).collect(),
            storage_pk: storage.public,
            engine_fingerprint: engine.fingerprint(),
            rules: crate::engine::parse_rules("10 * 5 * DENY\n").unwrap(),
            params: ProtocolParams::default(),
        };
        (validators, admin, storage, config, engine)
    }

    fn seal_next(state: &LedgerState, validators: &[KeyPair], txs: Vec<Transaction>) -> Block {
        let mut slot = state.config().slot_of(state.tip().time).unwrap() + 1;
        loop {
            let leader = expected_leader(slot, &state.config().validators);
            let v = validators.iter().find(|v| v.public == leader).unwrap();
            let time = state.config().slot_start(slot);
            let mut s = state.clone();
            for tx in &txs {
                s.submit(tx.clone(), time).unwrap();
            }
            if let Some(b) = s.propose_block(v, time) {
                return b;
            }
            slot += 1;
        }
    }

    #[test]
    fn leader_schedule_wraps() {
        let pks: Vec<PublicKey> = (0..3).map(|i| kp(i).public).collect();
        assert_eq!(expected_leader(0, &pks), pks[0]);
        assert_eq!(expected_leader(4, &pks), pks[1]);
        assert_eq!(expected_leader(3, &pks), pks[0]);
    }

    #[test]
    fn genesis_needs_three_validators() {
        let (_, _, _, config, engine) = fixture(3);
        let a = LedgerState::genesis(config.clone(), engine.clone()).unwrap();
        let b = LedgerState::genesis(config, engine.clone()).unwrap();
        assert_eq!(a.height(), 0);
        assert_eq!(a.state_digest(), b.state_digest());
        let (_, _, _, config, _) = fixture(2);
        assert!(matches!(LedgerState::genesis(config, engine), Err(LedgerError::Config(_))));
    }

    #[test]
    fn genesis_rejects_other_model() {
        let (_, _, _, mut config, engine) = fixture(3);
        config.engine_fingerprint = Digest([1; 32]);
        assert!(LedgerState::genesis(config, engine).is_err());
    }

    #[test]
    fn transaction_rejections() {
        let (_, admin, _, config, engine) = fixture(3);
        let mut state = LedgerState::genesis(config, engine).unwrap();
        let now = T0 + 10;
        let setup = build_setup_tx(&kp(50), kp(51).public, now);
        assert_eq!(state.validate_transaction(&setup, now), Err(Reject::UnauthorizedSender));

        let info = ReqInfo::new(3, 1, RequestId([1; 16])).unwrap();
        let stale = build_access_request_tx(&kp(51), info, now - 2 * DEFAULT_FRESHNESS_WINDOW);
        assert_eq!(state.validate_transaction(&stale, now), Err(Reject::StaleTime));

        let req = build_access_request_tx(&kp(51), info, now);
        let id = state.submit(req.clone(), now).unwrap();
        assert_eq!(id, req.id());
        assert_eq!(state.submit(req, now), Err(Reject::Duplicate));

        let good = build_setup_tx(&admin, kp(51).public, now);
        let Transaction::Setup(mut t) = good else { unreachable!() };
        t.time += 1;
        assert_eq!(
            state.validate_transaction(&Transaction::Setup(t), now),
            Err(Reject::BadSignature)
        );
        let forged = build_storage_tx(&kp(51), Nonce([0; 16]), now, kp(51).public);
        assert_eq!(state.validate_transaction(&forged, now), Err(Reject::BadSignature));
    }

    #[test]
    fn register_hundred_users_dense() {
        let (validators, admin, _, config, engine) = fixture(3);
        let mut state = LedgerState::genesis(config, engine).unwrap();
        let txs: Vec<Transaction> = (0..100u32)
            .map(|i| {
                let mut seed = [0u8; 32];
                seed[..4].copy_from_slice(&i.to_be_bytes());
                seed[31] = 0xAA;
                build_setup_tx(&admin, KeyPair::from_seed(seed).public, T0 + 1)
            })
            .collect();
        let block = seal_next(&state, &validators, txs.clone());
        state.apply_block(&block).unwrap();
        for (i, tx) in txs.iter().enumerate() {
            let Transaction::Setup(t) = tx else { unreachable!() };
            assert_eq!(state.memory().user(&t.user_pk).unwrap().user_index, i as u64);
        }
        assert_eq!(state.validate_transaction(&txs[0], T0 + 2), Err(Reject::Duplicate));
        let again = build_setup_tx(&admin, match &txs[0] { Transaction::Setup(t) => t.user_pk, _ => unreachable!() }, T0 + 2);
        assert_eq!(state.validate_transaction(&again, T0 + 2), Err(Reject::DuplicateUser));
    }

    #[test]
    fn request_pipeline_and_log() {
        let (validators, admin, _, config, engine) = fixture(3);
        let mut state = LedgerState::genesis(config, engine).unwrap();
        let user = kp(60);
        let b1 = seal_next(&state, &validators, vec![build_setup_tx(&admin, user.public, T0 + 1)]);
        state.apply_block(&b1).unwrap();

        let ok = build_access_request_tx(&user, ReqInfo::new(7, 1, RequestId([1; 16])).unwrap(), T0 + 2);
        let ruled = build_access_request_tx(&user, ReqInfo::new(5, 1, RequestId([2; 16])).unwrap(), T0 + 2);
        let stranger = build_access_request_tx(&kp(61), ReqInfo::new(7, 0, RequestId([3; 16])).unwrap(), T0 + 2);
        let b2 = seal_next(&state, &validators, vec![ok, ruled, stranger]);
        assert_eq!(b2.transactions.len(), 5);
        let out = state.apply_block(&b2).unwrap();
        assert_eq!(out.results.len(), 2);
        assert!(out.results[0].granted);
        assert!(!out.results[1].granted);

        let kinds: Vec<&str> = state.memory().access_log().iter().map(|e| e.kind.name()).collect();
        assert_eq!(
            kinds,
            [
                "requested", "authenticated", "decided",
                "requested", "authenticated", "decided", "denied",
                "requested", "denied"
            ]
        );
        let denied = state.query_access_log(&LogFilter { kind: Some(LogKind::Denied), ..Default::default() });
        assert_eq!(denied[0].reason, Some(DenyReason::Rule));
        assert_eq!(denied[1].reason, Some(DenyReason::Unregistered));
        assert!(state.query_access_log(&LogFilter { user_pk: Some(kp(99).public), ..Default::default() }).is_empty());
    }

    #[test]
    fn wrong_leader_and_mismatched_verified_rejected() {
        let (validators, admin, _, config, engine) = fixture(3);
        let mut state = LedgerState::genesis(config, engine).unwrap();
        let user = kp(60);
        let b1 = seal_next(&state, &validators, vec![build_setup_tx(&admin, user.public, T0 + 1)]);
        assert_eq!(b1.validator_pk, validators[1].public);
        let forged = Block::seal(&user, 1, state.tip_hash(), b1.time, b1.transactions.clone());
        assert_eq!(state.apply_block(&forged), Err(BlockError::WrongLeader));
        state.apply_block(&b1).unwrap();

        let req = build_access_request_tx(&user, ReqInfo::new(7, 1, RequestId([1; 16])).unwrap(), T0 + 2);
        let b2 = seal_next(&state, &validators, vec![req]);
        let mut txs = b2.transactions.clone();
        let Transaction::Verified(v) = &mut txs[1] else { panic!() };
        let mut bits = v.user_bits.clone();
        bits.flip(15);
        v.user_bits = bits;
        let leader = validators.iter().find(|k| k.public == b2.validator_pk).unwrap();
        let bad = Block::seal(leader, b2.height, b2.prev_hash, b2.time, txs);
        let before = state.state_digest();
        assert_eq!(state.apply_block(&bad), Err(BlockError::VerifiedMismatch { index: 1 }));
        assert_eq!(state.state_digest(), before);
        state.apply_block(&b2).unwrap();
    }

    #[test]
    fn nonce_single_use_and_expiry() {
        let mut m = Memory::default();
        let nonce = Nonce([4; 16]);
        let record = NonceRecord {
            request_id: RequestId([1; 16]),
            user_pk: kp(1).public,
            resource_id: 0,
            operation: Operation::Op1,
            issued_at: 100,
            expires_at: 400,
            redeemed: false,
            expired: false,
        };
        m.record_nonce(crypto::hash(&nonce.0), record).unwrap();
        assert_eq!(m.record_nonce(crypto::hash(&nonce.0), record), Err(Reject::Replay));
        assert_eq!(m.check_redeem(&nonce, 401), Err(Reject::Expired));
        m.redeem_nonce(&nonce, 400).unwrap();
        assert_eq!(m.redeem_nonce(&nonce, 200), Err(Reject::Replay));
        assert_eq!(m.check_redeem(&Nonce([5; 16]), 200).unwrap_err(), Reject::UnknownNonce);
    }

    #[test]
    fn fork_choice_rules() {
        let (validators, _, _, config, _) = fixture(3);
        let g = genesis_block(&config);
        let child = |time: u64, v: &KeyPair| Block::seal(v, 1, g.hash(), time, Vec::new());
        let a = vec![g.clone(), child(T0 + 1, &validators[1])];
        let b = vec![g.clone(), child(T0 + 2, &validators[2])];
        let longer = vec![g.clone(), child(T0 + 1, &validators[1]), child(T0 + 1, &validators[1])];
        assert_eq!(fork_choice(&[a.clone()]), Some(0));
        assert_eq!(fork_choice(&[a.clone(), longer]), Some(1));
        let smaller = if a[1].hash() < b[1].hash() { 0 } else { 1 };
        assert_eq!(fork_choice(&[a, b]), Some(smaller));
        assert_eq!(fork_choice(&[]), None);
    }

    #[test]
    fn chain_file_round_trip_and_replay() {
        let (validators, admin, _, config, engine) = fixture(3);
        let mut state = LedgerState::genesis(config, engine.clone()).unwrap();
        let b1 = seal_next(&state, &validators, vec![build_setup_tx(&admin, kp(60).public, T0 + 1)]);
        state.apply_block(&b1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.bin");
        for b in state.chain() {
            append_block(&path, b).unwrap();
        }
        let blocks = read_chain_file(&path).unwrap();
        assert_eq!(blocks, state.chain());
        let replayed = LedgerState::from_blocks(&blocks, engine).unwrap();
        assert_eq!(replayed.state_digest(), state.state_digest());
    }

    #[test]
    fn genesis_config_codec() {
        let (_, _, _, config, _) = fixture(3);
        let bytes = config.to_canonical_bytes();
        assert_eq!(GenesisConfig::from_canonical_bytes(&bytes).unwrap(), config);
    }

    #[test]
    fn freshness_window_is_symmetric() {
        assert!(is_fresh(100, 100, 120));
        assert!(is_fresh(100, 220, 120));
        assert!(!is_fresh(100, 221, 120));
        assert!(is_fresh(220, 100, 120));
        assert!(!is_fresh(221, 100, 120));
        assert!(!is_fresh(0, 0, 120));
    }
}
