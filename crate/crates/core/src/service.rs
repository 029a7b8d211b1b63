//! The request/response API served by nodes, a client for it, and the
//! key=value config files that describe a deployment.
//!
//! Endpoints only translate between the wire and the node state machines.
//! Every access decision is made by the ledger.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{self, Digest, KeyPair, PublicKey};
use crate::engine::{parse_rules, DecisionEngine, DecisionModel};
use crate::ledger::{
    BlockSummary, Decision, GenesisConfig, LedgerState, LogEntry, LogFilter, LogKind, Reject, RequestView,
};
use crate::net::{NodeId, Outgoing, StorageNode, ValidatorNode};
use crate::storage::RedeemError;
use crate::types::{
    build_access_request_tx, build_setup_tx, LinkToken, Nonce, Operation, ReqInfo, RequestId, Transaction,
};

pub const DEFAULT_BASE_PORT: u16 = 7400;
pub const ENV_PORT: &str = "DLACB_PORT";
pub const ENV_DATA_DIR: &str = "DLACB_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRole {
    Validator,
    Storage,
}

impl NodeRole {
    pub fn name(self) -> &'static str {
        match self {
            NodeRole::Validator => "validator",
            NodeRole::Storage => "storage",
        }
    }
}

impl fmt::Display for NodeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NodeRole {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "validator" => Ok(NodeRole::Validator),
            "storage" => Ok(NodeRole::Storage),
            other => Err(format!("unknown role {other:?} (expected validator or storage)")),
        }
    }
}

impl Canonical for NodeRole {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.u8(*self as u8);
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.u8()? {
            0 => Ok(NodeRole::Validator),
            1 => Ok(NodeRole::Storage),
            tag => Err(CodecError::InvalidTag { what: "node role", tag }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ApiRequest {
    Submit(Transaction),
    RequestStatus(RequestId),
    Redeem {
        token: LinkToken,
        nonce: Nonce,
        operation: Operation,
    },
    Logs(LogFilter),
    Chain {
        from: u64,
        to: u64,
    },
    Status,
}

impl Canonical for ApiRequest {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            ApiRequest::Submit(tx) => enc.u8(0).value(tx),
            ApiRequest::RequestStatus(id) => enc.u8(1).value(id),
            ApiRequest::Redeem { token, nonce, operation } => enc.u8(2).value(token).value(nonce).value(operation),
            ApiRequest::Logs(f) => enc.u8(3).value(f),
            ApiRequest::Chain { from, to } => enc.u8(4).u64(*from).u64(*to),
            ApiRequest::Status => enc.u8(5),
        };
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(match dec.u8()? {
            0 => ApiRequest::Submit(dec.value()?),
            1 => ApiRequest::RequestStatus(dec.value()?),
            2 => ApiRequest::Redeem {
                token: dec.value()?,
                nonce: dec.value()?,
                operation: dec.value()?,
            },
            3 => ApiRequest::Logs(dec.value()?),
            4 => ApiRequest::Chain {
                from: dec.u64()?,
                to: dec.u64()?,
            },
            5 => ApiRequest::Status,
            tag => return Err(CodecError::InvalidTag { what: "api request", tag }),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatusInfo {
    pub role: NodeRole,
    pub height: u64,
    pub tip: Digest,
    /// The node's clock, used by clients to timestamp transactions.
    pub now: u64,
}

impl Canonical for StatusInfo {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.value(&self.role).u64(self.height).value(&self.tip).u64(self.now);
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            role: dec.value()?,
            height: dec.u64()?,
            tip: dec.value()?,
            now: dec.u64()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ApiResponse {
    Submitted(Digest),
    Rejected(Reject),
    Request(RequestView),
    Payload(Vec<u8>),
    RedeemRejected(RedeemError),
    Logs(Vec<LogEntry>),
    Chain(Vec<BlockSummary>),
    Status(StatusInfo),
    /// The node does not serve this endpoint (wrong role).
    Unsupported(String),
}

impl Canonical for ApiResponse {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            ApiResponse::Submitted(id) => enc.u8(0).value(id),
            ApiResponse::Rejected(r) => enc.u8(1).value(r),
            ApiResponse::Request(v) => enc.u8(2).value(v),
            ApiResponse::Payload(p) => enc.u8(3).bytes(p),
            ApiResponse::RedeemRejected(e) => enc.u8(4).value(e),
            ApiResponse::Logs(l) => enc.u8(5).seq(l),
            ApiResponse::Chain(c) => enc.u8(6).seq(c),
            ApiResponse::Status(s) => enc.u8(7).value(s),
            ApiResponse::Unsupported(m) => enc.u8(8).str(m),
        };
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(match dec.u8()? {
            0 => ApiResponse::Submitted(dec.value()?),
            1 => ApiResponse::Rejected(dec.value()?),
            2 => ApiResponse::Request(dec.value()?),
            3 => ApiResponse::Payload(dec.bytes()?),
            4 => ApiResponse::RedeemRejected(dec.value()?),
            5 => ApiResponse::Logs(dec.seq()?),
            6 => ApiResponse::Chain(dec.seq()?),
            7 => ApiResponse::Status(dec.value()?),
            8 => ApiResponse::Unsupported(dec.str()?),
            tag => return Err(CodecError::InvalidTag { what: "api response", tag }),
        })
    }
}

/// The node an API request lands on.
pub enum ApiTarget<'a> {
    Validator(&'a mut ValidatorNode),
    Storage(&'a mut StorageNode),
}

/// Serves one request. The returned messages must be sent by the caller's
/// transport.
pub fn handle_api(target: ApiTarget<'_>, req: ApiRequest, now: u64) -> (ApiResponse, Vec<Outgoing>) {
    let mut out = Vec::new();
    let resp = match (target, req) {
        (ApiTarget::Validator(v), ApiRequest::Submit(tx)) => match v.submit_local(tx, now, &mut out) {
            Ok(id) => ApiResponse::Submitted(id),
            Err(r) => ApiResponse::Rejected(r),
        },
        (ApiTarget::Validator(v), ApiRequest::RequestStatus(id)) => ApiResponse::Request(v.ledger().request_view(&id)),
        (ApiTarget::Validator(v), ApiRequest::Logs(f)) => ApiResponse::Logs(v.ledger().query_access_log(&f)),
        (ApiTarget::Validator(v), ApiRequest::Chain { from, to }) => {
            ApiResponse::Chain(v.ledger().block_summaries(from, to))
        }
        (ApiTarget::Validator(v), ApiRequest::Status) => ApiResponse::Status(StatusInfo {
            role: NodeRole::Validator,
            height: v.ledger().height(),
            tip: v.ledger().tip_hash(),
            now,
        }),
        (ApiTarget::Storage(s), ApiRequest::Redeem { token, nonce, operation }) => {
            match s.redeem(token, nonce, operation, now, &mut out) {
                Ok(p) => ApiResponse::Payload(p),
                Err(e) => ApiResponse::RedeemRejected(e),
            }
        }
        (ApiTarget::Storage(_), ApiRequest::Status) => ApiResponse::Status(StatusInfo {
            role: NodeRole::Storage,
            height: 0,
            tip: Digest([0; 32]),
            now,
        }),
        (ApiTarget::Validator(_), ApiRequest::Redeem { .. }) => {
            ApiResponse::Unsupported("redemptions are served by the storage node".into())
        }
        (ApiTarget::Storage(_), _) => ApiResponse::Unsupported("ledger queries are served by validator nodes".into()),
    };
    (resp, out)
}

/// Every way an API call can fail.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ApiError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("not authorized: the key is not an administrator")]
    Unauthorized,
    #[error("transaction rejected: {0}")]
    Rejected(Reject),
    #[error("redemption rejected: {0}")]
    Redeem(RedeemError),
    #[error("access error: the link cannot be decrypted with this key")]
    Decrypt,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("protocol: {0}")]
    Protocol(String),
}

/// Something that answers API requests: a simulated world or a remote node.
pub trait Backend {
    fn call(&mut self, req: ApiRequest) -> Result<ApiResponse, ApiError>;
}

/// Outcome of polling a request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PollResult {
    Pending,
    Denied(crate::ledger::DenyReason),
    Link {
        token: LinkToken,
        nonce: Nonce,
        issued_at: u64,
        expires_at: u64,
    },
    Redeemed,
    Expired,
}

impl fmt::Display for PollResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PollResult::Pending => f.write_str("pending"),
            PollResult::Denied(r) => write!(f, "denied: {}", r.name()),
            PollResult::Link {
                token,
                nonce,
                issued_at,
                expires_at,
            } => write!(
                f,
                "link token={token} nonce={nonce} issued_at={issued_at} expires_at={expires_at}"
            ),
            PollResult::Redeemed => f.write_str("redeemed"),
            PollResult::Expired => f.write_str("expired"),
        }
    }
}

/// Builds and signs transactions locally and sends them through a backend.
pub struct Client<B> {
    backend: B,
    rng: ChaCha20Rng,
}

fn unexpected(resp: ApiResponse) -> ApiError {
    match resp {
        ApiResponse::Unsupported(m) => ApiError::Unsupported(m),
        other => ApiError::Protocol(format!("unexpected response {other:?}")),
    }
}

impl<B: Backend> Client<B> {
    /// `rng` supplies request ids.
    pub fn new(backend: B, rng: ChaCha20Rng) -> Self {
        Self { backend, rng }
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn backend_mut(&mut self) -> &mut B {
        &mut self.backend
    }

    pub fn status(&mut self) -> Result<StatusInfo, ApiError> {
        match self.backend.call(ApiRequest::Status)? {
            ApiResponse::Status(s) => Ok(s),
            other => Err(unexpected(other)),
        }
    }

    pub fn submit(&mut self, tx: Transaction) -> Result<Digest, ApiError> {
        match self.backend.call(ApiRequest::Submit(tx))? {
            ApiResponse::Submitted(id) => Ok(id),
            ApiResponse::Rejected(Reject::UnauthorizedSender) => Err(ApiError::Unauthorized),
            ApiResponse::Rejected(r) => Err(ApiError::Rejected(r)),
            other => Err(unexpected(other)),
        }
    }

    pub fn register_user(&mut self, admin: &KeyPair, user_pk: PublicKey) -> Result<Digest, ApiError> {
        let now = self.status()?.now;
        self.submit(build_setup_tx(admin, user_pk, now))
    }

    pub fn request_access(&mut self, user: &KeyPair, resource_id: u32, operation: &str) -> Result<RequestId, ApiError> {
        let operation: Operation = operation.parse().map_err(|e| ApiError::Usage(format!("{e}")))?;
        let now = self.status()?.now;
        let request_id = RequestId(self.rng.gen());
        let info = ReqInfo {
            resource_id,
            operation,
            request_id,
        };
        self.submit(build_access_request_tx(user, info, now))?;
        Ok(request_id)
    }

    pub fn poll_result(&mut self, request_id: RequestId, user: &KeyPair) -> Result<PollResult, ApiError> {
        let view = match self.backend.call(ApiRequest::RequestStatus(request_id))? {
            ApiResponse::Request(v) => v,
            other => return Err(unexpected(other)),
        };
        Ok(match view {
            RequestView::Unknown | RequestView::Pending => PollResult::Pending,
            RequestView::Denied(r) => PollResult::Denied(r),
            RequestView::Link { link, expires_at } => {
                let payload = link.open(user).map_err(|_| ApiError::Decrypt)?;
                PollResult::Link {
                    token: payload.link_token,
                    nonce: payload.nonce,
                    issued_at: payload.issued_at,
                    expires_at,
                }
            }
            RequestView::Redeemed => PollResult::Redeemed,
            RequestView::Expired => PollResult::Expired,
        })
    }

    pub fn redeem(&mut self, token: LinkToken, nonce: Nonce, operation: Operation) -> Result<Vec<u8>, ApiError> {
        match self.backend.call(ApiRequest::Redeem { token, nonce, operation })? {
            ApiResponse::Payload(p) => Ok(p),
            ApiResponse::RedeemRejected(e) => Err(ApiError::Redeem(e)),
            other => Err(unexpected(other)),
        }
    }

    pub fn logs(&mut self, filter: LogFilter) -> Result<Vec<LogEntry>, ApiError> {
        match self.backend.call(ApiRequest::Logs(filter))? {
            ApiResponse::Logs(l) => Ok(l),
            other => Err(unexpected(other)),
        }
    }

    pub fn chain(&mut self, from: u64, to: u64) -> Result<Vec<BlockSummary>, ApiError> {
        match self.backend.call(ApiRequest::Chain { from, to })? {
            ApiResponse::Chain(c) => Ok(c),
            other => Err(unexpected(other)),
        }
    }
}

/// Serves requests from a simulated world: redemptions go to storage,
/// everything else to the first live validator.
#[derive(Debug)]
pub struct SimBackend {
    pub world: crate::net::World,
}

impl Backend for SimBackend {
    fn call(&mut self, req: ApiRequest) -> Result<ApiResponse, ApiError> {
        let node = match req {
            ApiRequest::Redeem { .. } => self.world.storage_id(),
            _ => self
                .world
                .first_live_validator()
                .ok_or_else(|| ApiError::Transport("every validator is down".into()))?,
        };
        Ok(self.world.api(node, req))
    }
}

/// Parses log filter arguments given as `key=value` pairs. Keys: `user`
/// (hex public key), `resource`, `decision` (granted|denied), `kind`,
/// `request` (hex id), `from` and `to` (block heights).
pub fn parse_log_filter<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<LogFilter, ApiError> {
    let bad = |k: &str, v: &str| ApiError::Usage(format!("malformed filter {k}={v:?}"));
    let mut filter = LogFilter::default();
    let (mut from, mut to) = (None, None);
    for (k, v) in pairs {
        match k {
            "user" => filter.user_pk = Some(PublicKey::from_hex(v).ok_or_else(|| bad(k, v))?),
            "resource" => filter.resource_id = Some(v.parse().map_err(|_| bad(k, v))?),
            "decision" => {
                filter.decision = Some(match v {
                    "granted" => Decision::Granted,
                    "denied" => Decision::Denied,
                    _ => return Err(bad(k, v)),
                })
            }
            "kind" => filter.kind = Some(LogKind::from_name(v).ok_or_else(|| bad(k, v))?),
            "request" => filter.request_id = Some(RequestId::from_hex(v).ok_or_else(|| bad(k, v))?),
            "from" => from = Some(v.parse::<u64>().map_err(|_| bad(k, v))?),
            "to" => to = Some(v.parse::<u64>().map_err(|_| bad(k, v))?),
            other => return Err(ApiError::Usage(format!("unknown filter key {other:?}"))),
        }
    }
    if from.is_some() || to.is_some() {
        filter.heights = Some(from.unwrap_or(0)..=to.unwrap_or(u64::MAX));
    }
    Ok(filter)
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("missing key {0:?}")]
    Missing(&'static str),
    #[error("{key}: {reason}")]
    Invalid { key: String, reason: String },
}

/// One node's config file.
///
/// ```text
/// # comments and blank lines are ignored
/// role = validator
/// node_id = 0
/// listen = 127.0.0.1:7400
/// key = keys/validator-0.key
/// genesis = genesis.bin
/// model = model.bin
/// rules = rules.txt
/// data_dir = .
/// peers = 0@127.0.0.1:7400, 1@127.0.0.1:7401, 2@127.0.0.1:7402, 3@127.0.0.1:7403
/// ```
///
/// `data_dir` is relative to the config file; the other paths are relative
/// to `data_dir`. `DLACB_DATA_DIR` replaces `data_dir` and `DLACB_PORT`
/// replaces the listen port.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub role: NodeRole,
    pub node_id: NodeId,
    pub listen: SocketAddr,
    pub key: PathBuf,
    pub genesis: PathBuf,
    pub model: PathBuf,
    pub rules: PathBuf,
    pub data_dir: PathBuf,
    pub peers: BTreeMap<NodeId, SocketAddr>,
}

impl ServiceConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: i + 1,
                reason: "expected key = value".into(),
            })?;
            let k = k.trim();
            if map.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Parse {
                    line: i + 1,
                    reason: format!("duplicate key {k:?}"),
                });
            }
        }
        let known = ["role", "node_id", "listen", "key", "genesis", "model", "rules", "data_dir", "peers"];
        if let Some(k) = map.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(ConfigError::Invalid {
                key: k.clone(),
                reason: "unknown key".into(),
            });
        }
        let get = |k: &'static str| map.get(k).ok_or(ConfigError::Missing(k));
        let invalid = |k: &str, reason: String| ConfigError::Invalid { key: k.into(), reason };
        let role = get("role")?.parse().map_err(|e| invalid("role", e))?;
        let node_id = get("node_id")?.parse().map_err(|e| invalid("node_id", format!("{e}")))?;
        let listen = get("listen")?.parse().map_err(|e| invalid("listen", format!("{e}")))?;
        let mut peers = BTreeMap::new();
        for entry in get("peers")?.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (id, addr) = entry
                .split_once('@')
                .ok_or_else(|| invalid("peers", format!("expected id@host:port, got {entry:?}")))?;
            let id: NodeId = id.trim().parse().map_err(|e| invalid("peers", format!("{e}")))?;
            let addr: SocketAddr = addr.trim().parse().map_err(|e| invalid("peers", format!("{e}")))?;
            peers.insert(id, addr);
        }
        let data_dir = map.get("data_dir").map_or_else(|| base_dir.to_path_buf(), |d| base_dir.join(d));
        Ok(Self {
            role,
            node_id,
            listen,
            key: get("key")?.into(),
            genesis: get("genesis")?.into(),
            model: get("model")?.into(),
            rules: get("rules")?.into(),
            data_dir,
            peers,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Applies `DLACB_PORT` and `DLACB_DATA_DIR` as returned by `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(port) = lookup(ENV_PORT) {
            let port: u16 = port.parse().map_err(|e| ConfigError::Invalid {
                key: ENV_PORT.into(),
                reason: format!("{e}"),
            })?;
            self.listen.set_port(port);
            self.peers.insert(self.node_id, self.listen);
        }
        if let Some(dir) = lookup(ENV_DATA_DIR) {
            self.data_dir = dir.into();
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        self.data_dir.join(path)
    }

    /// Loads and cross-checks every file the config names.
    pub fn load_setup(&self) -> Result<NodeSetup, ConfigError> {
        let io = |p: &Path, e: String| ConfigError::Io {
            path: p.to_path_buf(),
            reason: e,
        };
        let key_path = self.resolve(&self.key);
        let keypair = KeyPair::load(&key_path).map_err(|e| io(&key_path, e.to_string()))?;
        let genesis_path = self.resolve(&self.genesis);
        let genesis = GenesisConfig::load(&genesis_path).map_err(|e| io(&genesis_path, e.to_string()))?;
        let model_path = self.resolve(&self.model);
        let model = DecisionModel::load(&model_path).map_err(|e| io(&model_path, e.to_string()))?;
        let rules_path = self.resolve(&self.rules);
        let text = fs::read_to_string(&rules_path).map_err(|e| io(&rules_path, e.to_string()))?;
        let rules = parse_rules(&text).map_err(|e| io(&rules_path, e.to_string()))?;
        if rules != genesis.rules {
            return Err(io(&rules_path, "rules differ from the genesis rules".into()));
        }
        let engine = Arc::new(
            DecisionEngine::new(model, genesis.params.encoding()).map_err(|e| io(&model_path, e.to_string()))?,
        );
        let ledger = LedgerState::genesis(genesis.clone(), engine.clone())
            .map_err(|e| io(&genesis_path, e.to_string()))?;
        let expected_pk = match self.role {
            NodeRole::Validator => genesis.validators.get(self.node_id).copied(),
            NodeRole::Storage => (self.node_id == genesis.validators.len()).then_some(genesis.storage_pk),
        };
        if expected_pk != Some(keypair.public) {
            return Err(ConfigError::Invalid {
                key: "key".into(),
                reason: format!("key does not belong to {} node {}", self.role, self.node_id),
            });
        }
        Ok(NodeSetup {
            config: self.clone(),
            keypair,
            genesis,
            engine,
            ledger,
        })
    }
}

/// A config with every referenced file loaded.
#[derive(Debug, Clone)]
pub struct NodeSetup {
    pub config: ServiceConfig,
    pub keypair: KeyPair,
    pub genesis: GenesisConfig,
    pub engine: Arc<DecisionEngine>,
    pub ledger: LedgerState,
}

/// Options for [`init_deployment`].
#[derive(Debug, Clone)]
pub struct InitOptions {
    pub validators: usize,
    pub users: usize,
    pub resources: u32,
    pub base_port: u16,
    pub host: String,
    pub genesis_time: u64,
    pub seed: u64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            validators: 3,
            users: crate::scenario::USERS,
            resources: crate::scenario::RESOURCES,
            base_port: DEFAULT_BASE_PORT,
            host: "127.0.0.1".into(),
            genesis_time: 0,
            seed: crate::scenario::FIXTURE_SEED,
        }
    }
}

#[derive(Debug, Error)]
pub enum InitError {
    #[error("{0} already exists; refusing to overwrite")]
    Exists(PathBuf),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Writes a complete local deployment under `dir`: keys, genesis, model,
/// rules, storage resources and one config file per node.
///
/// `model` is the trained decision model to deploy.
pub fn init_deployment(dir: &Path, options: &InitOptions, model: &DecisionModel) -> Result<Vec<PathBuf>, InitError> {
    let io = |e: &dyn fmt::Display| InitError::Io(e.to_string());
    if dir.join("genesis.bin").exists() {
        return Err(InitError::Exists(dir.join("genesis.bin")));
    }
    let keys_dir = dir.join("keys");
    fs::create_dir_all(&keys_dir).map_err(|e| io(&e))?;
    let seeded = |label: &str| KeyPair::from_seed(crypto::hash(format!("{}/{label}", options.seed).as_bytes()).0);
    let validators: Vec<KeyPair> = (0..options.validators).map(|i| seeded(&format!("validator-{i}"))).collect();
    let storage = seeded("storage");
    let admin = seeded("admin");
    for (i, v) in validators.iter().enumerate() {
        v.save(&keys_dir, &format!("validator-{i}")).map_err(|e| io(&e))?;
    }
    storage.save(&keys_dir, "storage").map_err(|e| io(&e))?;
    admin.save(&keys_dir, "admin").map_err(|e| io(&e))?;
    for i in 0..options.users {
        seeded(&format!("user-{i}"))
            .save(&keys_dir, &format!("user-{i:03}"))
            .map_err(|e| io(&e))?;
    }

    let rules_text = crate::scenario::FIXTURE_RULES;
    let rules = parse_rules(rules_text).map_err(|e| io(&e))?;
    let params = crate::ledger::ProtocolParams::default();
    let engine = DecisionEngine::new(model.clone(), params.encoding()).map_err(|e| io(&e))?;
    let genesis = GenesisConfig {
        time: options.genesis_time,
        admin_pks: vec![admin.public],
        validators: validators.iter().map(|v| v.public).collect(),
        storage_pk: storage.public,
        engine_fingerprint: engine.fingerprint(),
        rules,
        params,
    };
    genesis.validate().map_err(|e| io(&e))?;
    genesis.save(&dir.join("genesis.bin")).map_err(|e| io(&e))?;
    model.save(&dir.join("model.bin")).map_err(|e| io(&e))?;
    fs::write(dir.join("rules.txt"), rules_text).map_err(|e| io(&e))?;

    let mut service = crate::storage::StorageService::open(
        storage.clone(),
        genesis.validators.clone(),
        crypto::seeded_rng(options.seed),
        &dir.join("storage"),
    )
    .map_err(|e| io(&e))?;
    for id in 0..options.resources {
        service
            .put_resource(id, &format!("resource-{id}"), format!("contents of resource {id}\n").into_bytes())
            .map_err(|e| io(&e))?;
    }

    let v = options.validators;
    let addr = |i: usize| format!("{}:{}", options.host, options.base_port as usize + i);
    let peers: Vec<String> = (0..=v).map(|i| format!("{i}@{}", addr(i))).collect();
    let mut written = Vec::new();
    for i in 0..=v {
        let (role, name, key) = if i < v {
            ("validator", format!("validator-{i}"), format!("keys/validator-{i}.key"))
        } else {
            ("storage", "storage".to_string(), "keys/storage.key".to_string())
        };
        let text = format!(
            "role = {role}\nnode_id = {i}\nlisten = {}\nkey = {key}\ngenesis = genesis.bin\nmodel = model.bin\nrules = rules.txt\ndata_dir = .\npeers = {}\n",
            addr(i),
            peers.join(", ")
        );
        let path = dir.join(format!("{name}.conf"));
        fs::write(&path, text).map_err(|e| io(&e))?;
        ServiceConfig::load(&path)?.load_setup()?;
        written.push(path);
    }
    Ok(written)
}
