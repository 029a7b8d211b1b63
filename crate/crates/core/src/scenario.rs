//! Fixtures and scripted end-to-end runs over the simulator.
//!
//! The fixtures are deterministic: keys derive from a seed, the model is
//! trained with a fixed recipe, and every world uses a fixed network seed.
//! Cases that need "the model allows" or "the model denies" are picked by
//! asking the trained model, so scripts stay valid if the recipe changes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::contracts::authentication_contract;
use crate::crypto::{self, Digest, KeyPair, PublicKey};
use crate::engine::{
    generate_dataset, parse_rules, train, DecisionEngine, DecisionModel, EngineError, InputEncoding, PriorityRule,
    SyntheticPolicy, TrainParams, TrainReport, DEFAULT_DIMS,
};
use crate::ledger::{DenyReason, GenesisConfig, LedgerState, LogEntry, LogFilter, LogKind, ProtocolParams};
use crate::net::{AdversaryKind, ConvergenceReport, Latency, NetworkConfig, World};
use crate::service::{ApiError, Client, PollResult, SimBackend};
use crate::storage::StorageService;
use crate::types::{AccessRequestTx, Operation, ReqInfo, RequestId, StorageTx, Transaction};

pub const FIXTURE_SEED: u64 = 42;
pub const USERS: usize = 100;
pub const RESOURCES: u32 = 50;
pub const OUTSIDERS: usize = 4;
pub const FIXTURE_VALIDATORS: usize = 3;
pub const GENESIS_TIME: u64 = 1_700_000_000;
/// Resource 5 is always denied and resource 6 always allowed, whatever the
/// model says.
pub const FIXTURE_RULES: &str = "# priority user resource operation effect\n10 * 5 * DENY\n10 * 6 * ALLOW\n";
pub const DENY_RESOURCE: u32 = 5;
pub const ALLOW_RESOURCE: u32 = 6;
const MODEL_CACHE_FILE: &str = "fixture-model.bin";
const AWAIT_TICKS: u64 = 60;
const SETTLE_TICKS: u64 = 300;

pub const SCENARIOS: [&str; 6] = ["1", "2", "3", "4", "replay", "tamper"];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("fixture setup: {0}")]
    Setup(String),
    #[error("unknown scenario {0:?} (expected 1, 2, 3, 4, replay or tamper)")]
    Unknown(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn setup<E: fmt::Display>(e: E) -> ScenarioError {
    ScenarioError::Setup(e.to_string())
}

pub fn fixture_key(seed: u64, label: &str) -> KeyPair {
    KeyPair::from_seed(crypto::hash(format!("{seed}/{label}").as_bytes()).0)
}

pub fn resource_payload(id: u32) -> Vec<u8> {
    format!("contents of resource {id}\n").into_bytes()
}

/// Trains the default model on the fixture policy. Returns the model, its
/// report, and the held-out accuracy.
pub fn train_default_model(policy: &SyntheticPolicy) -> Result<(DecisionModel, TrainReport, f64), EngineError> {
    let enc = InputEncoding::default();
    let data = generate_dataset(policy, enc, USERS as u64, RESOURCES as u64)?;
    let (train_rows, held_rows) = data.split(0.2, FIXTURE_SEED);
    let train_set = train_rows.to_samples(enc)?;
    let held = held_rows.to_samples(enc)?;
    let model = DecisionModel::init(&DEFAULT_DIMS, &mut crypto::seeded_rng(FIXTURE_SEED))?;
    let (model, report) = train(model, &train_set, &held, &TrainParams::default())?;
    let acc = crate::engine::decision_accuracy(&model, &held)?;
    Ok((model, report, acc))
}

pub fn fixture_policy() -> SyntheticPolicy {
    SyntheticPolicy::for_population(FIXTURE_SEED, USERS as u64, RESOURCES as u64)
}

/// Keys, model, rules and genesis shared by every scenario.
#[derive(Debug)]
pub struct Fixtures {
    pub validators: Vec<KeyPair>,
    pub storage: KeyPair,
    pub admin: KeyPair,
    pub users: Vec<KeyPair>,
    pub outsiders: Vec<KeyPair>,
    pub policy: SyntheticPolicy,
    pub engine: Arc<DecisionEngine>,
    pub rules: Vec<PriorityRule>,
    pub genesis: GenesisConfig,
    /// Present when the model was trained in this process.
    pub training: Option<TrainingRun>,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub report: TrainReport,
    pub heldout_accuracy: f64,
    pub elapsed: Duration,
}

static SHARED: OnceLock<Fixtures> = OnceLock::new();

impl Fixtures {
    pub fn with_model(model: DecisionModel, training: Option<TrainingRun>) -> Result<Self, ScenarioError> {
        let seed = FIXTURE_SEED;
        let validators: Vec<KeyPair> = (0..FIXTURE_VALIDATORS)
            .map(|i| fixture_key(seed, &format!("validator-{i}")))
            .collect();
        let storage = fixture_key(seed, "storage");
        let admin = fixture_key(seed, "admin");
        let users = (0..USERS).map(|i| fixture_key(seed, &format!("user-{i}"))).collect();
        let outsiders = (0..OUTSIDERS).map(|i| fixture_key(seed, &format!("outsider-{i}"))).collect();
        let params = ProtocolParams::default();
        let engine = Arc::new(DecisionEngine::new(model, params.encoding())?);
        let rules = parse_rules(FIXTURE_RULES).map_err(setup)?;
        let genesis = GenesisConfig {
            time: GENESIS_TIME,
            admin_pks: vec![admin.public],
            validators: validators.iter().map(|v| v.public).collect(),
            storage_pk: storage.public,
            engine_fingerprint: engine.fingerprint(),
            rules: rules.clone(),
            params,
        };
        genesis.validate().map_err(setup)?;
        Ok(Self {
            validators,
            storage,
            admin,
            users,
            outsiders,
            policy: fixture_policy(),
            engine,
            rules,
            genesis,
            training: None,
        }
        .with_training(training))
    }

    fn with_training(mut self, training: Option<TrainingRun>) -> Self {
        self.training = training;
        self
    }

    /// Trains the default model and builds the fixtures.
    pub fn train() -> Result<Self, ScenarioError> {
        let policy = fixture_policy();
        let start = Instant::now();
        let (model, report, heldout_accuracy) = train_default_model(&policy)?;
        let run = TrainingRun {
            report,
            heldout_accuracy,
            elapsed: start.elapsed(),
        };
        Self::with_model(model, Some(run))
    }

    /// Uses the model cached in `dir` if there is one, else trains and
    /// caches it.
    pub fn load_or_train(dir: &Path) -> Result<Self, ScenarioError> {
        let path = dir.join(MODEL_CACHE_FILE);
        if path.exists() {
            return Self::with_model(DecisionModel::load(&path)?, None);
        }
        let fx = Self::train()?;
        std::fs::create_dir_all(dir).map_err(setup)?;
        fx.engine.model().save(&path)?;
        Ok(fx)
    }

    /// Process-wide fixtures, trained on first use.
    pub fn shared() -> &'static Fixtures {
        SHARED.get_or_init(|| Self::train().expect("fixture training"))
    }

    pub fn storage_service(&self, seed: u64) -> Result<StorageService, ScenarioError> {
        let mut s = StorageService::new(
            self.storage.clone(),
            self.genesis.validators.clone(),
            ChaCha20Rng::seed_from_u64(seed ^ 0x5354_4f52),
        );
        for id in 0..RESOURCES {
            s.put_resource(id, &format!("resource-{id}"), resource_payload(id)).map_err(setup)?;
        }
        Ok(s)
    }

    pub fn world(&self, network: NetworkConfig) -> Result<World, ScenarioError> {
        let storage = self.storage_service(network.seed)?;
        World::new(network, self.genesis.clone(), self.validators.clone(), storage, self.engine.clone()).map_err(setup)
    }

    pub fn key(&self, actor: Actor) -> &KeyPair {
        match actor {
            Actor::User(i) => &self.users[i],
            Actor::Outsider(i) => &self.outsiders[i],
        }
    }

    /// The model's own verdict for a user index, with no rules applied.
    pub fn model_grants(&self, user_index: usize, resource: u32, op: Operation) -> bool {
        self.engine
            .model_access(user_index as u64, resource as u64)
            .map(|a| a[op.index()])
            .unwrap_or(false)
    }

    /// First (user, op) in index order whose model verdict on `resource`
    /// equals `grant`.
    pub fn find_case(&self, resource: u32, grant: bool) -> Option<(usize, Operation)> {
        (0..USERS)
            .flat_map(|u| Operation::ALL.into_iter().map(move |op| (u, op)))
            .find(|&(u, op)| self.model_grants(u, resource, op) == grant)
    }

    /// First case on a resource no rule touches.
    pub fn find_unruled_case(&self, grant: bool) -> Option<(usize, u32, Operation)> {
        (0..RESOURCES)
            .filter(|r| *r != DENY_RESOURCE && *r != ALLOW_RESOURCE)
            .find_map(|r| self.find_case(r, grant).map(|(u, op)| (u, r, op)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Actor {
    User(usize),
    Outsider(usize),
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::User(i) => write!(f, "user-{i}"),
            Actor::Outsider(i) => write!(f, "outsider-{i}"),
        }
    }
}

/// Terminal outcome of one access request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pending,
    Granted,
    Denied(DenyReason),
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Pending => f.write_str("pending"),
            Outcome::Granted => f.write_str("granted"),
            Outcome::Denied(r) => write!(f, "denied: {}", r.name()),
        }
    }
}

impl From<&PollResult> for Outcome {
    fn from(p: &PollResult) -> Self {
        match p {
            PollResult::Pending => Outcome::Pending,
            PollResult::Denied(r) => Outcome::Denied(*r),
            PollResult::Link { .. } | PollResult::Redeemed | PollResult::Expired => Outcome::Granted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// The admin registers every fixture user, in index order.
    RegisterUsers,
    Request {
        label: &'static str,
        actor: Actor,
        resource: u32,
        operation: Operation,
    },
    /// Steps until the request is decided.
    Await(&'static str),
    /// The requester redeems its link.
    Redeem {
        label: &'static str,
        operation: Operation,
    },
    Adversary(AdversaryKind),
    Run(u64),
    Settle,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expect {
    Outcome {
        label: &'static str,
        outcome: Outcome,
    },
    Overridden {
        label: &'static str,
        overridden: bool,
    },
    /// The request's on-chain log, in order.
    LogKinds {
        label: &'static str,
        kinds: Vec<LogKind>,
    },
    /// The first redemption returned the resource's payload.
    Payload(&'static str),
    /// Exactly one redemption of the link succeeded and at least one more
    /// attempt was rejected.
    SingleRedemption(&'static str),
    /// Every live validator rejected at least one block, and every block on
    /// every chain was sealed by a validator.
    ForgedBlocksRejected,
    Agreement,
}

impl fmt::Display for Expect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expect::Outcome { label, outcome } => write!(f, "{label} outcome is {outcome}"),
            Expect::Overridden { label, overridden } => write!(f, "{label} decided with overridden={overridden}"),
            Expect::LogKinds { label, kinds } => {
                let names: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
                write!(f, "{label} log is {}", names.join(" -> "))
            }
            Expect::Payload(label) => write!(f, "{label} redemption returns the resource"),
            Expect::SingleRedemption(label) => write!(f, "{label} link redeemed exactly once"),
            Expect::ForgedBlocksRejected => f.write_str("forged blocks rejected by every validator"),
            Expect::Agreement => f.write_str("validators agree on tip and state"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioScript {
    pub name: String,
    pub title: String,
    pub network: NetworkConfig,
    pub actions: Vec<Action>,
    pub expect: Vec<Expect>,
    /// The terminal outcome in words, compared against the actual one.
    pub expected_summary: String,
}

fn scenario_network(seed: u64) -> NetworkConfig {
    NetworkConfig {
        latency: Latency::Uniform { min: 0, max: 2 },
        seed,
        ..NetworkConfig::default()
    }
}

fn granted_flow() -> Vec<LogKind> {
    vec![
        LogKind::Requested,
        LogKind::Authenticated,
        LogKind::Decided,
        LogKind::LinkIssued,
        LogKind::Redeemed,
    ]
}

/// The script for a named scenario.
pub fn scenario_script(name: &str, fx: &Fixtures) -> Result<ScenarioScript, ScenarioError> {
    let missing = |what: &str| ScenarioError::Setup(format!("the model offers no case where {what}"));
    let mut actions = vec![Action::RegisterUsers];
    let (title, expect, summary) = match name {
        "1" => {
            actions.push(Action::Request {
                label: "r1",
                actor: Actor::Outsider(0),
                resource: 0,
                operation: Operation::Op1,
            });
            actions.push(Action::Await("r1"));
            (
                "unregistered user",
                vec![
                    Expect::Outcome {
                        label: "r1",
                        outcome: Outcome::Denied(DenyReason::Unregistered),
                    },
                    Expect::LogKinds {
                        label: "r1",
                        kinds: vec![LogKind::Requested, LogKind::Denied],
                    },
                ],
                "denied: unregistered",
            )
        }
        "2" => {
            let (u, r, op) = fx.find_unruled_case(false).ok_or_else(|| missing("it denies"))?;
            actions.push(Action::Request {
                label: "r2",
                actor: Actor::User(u),
                resource: r,
                operation: op,
            });
            actions.push(Action::Await("r2"));
            (
                "model denies",
                vec![
                    Expect::Outcome {
                        label: "r2",
                        outcome: Outcome::Denied(DenyReason::Model),
                    },
                    Expect::Overridden {
                        label: "r2",
                        overridden: false,
                    },
                    Expect::LogKinds {
                        label: "r2",
                        kinds: vec![LogKind::Requested, LogKind::Authenticated, LogKind::Decided, LogKind::Denied],
                    },
                ],
                "denied: model",
            )
        }
        "3" => {
            let (u, op) = fx.find_case(DENY_RESOURCE, true).ok_or_else(|| missing("it allows a denied resource"))?;
            actions.push(Action::Request {
                label: "r3",
                actor: Actor::User(u),
                resource: DENY_RESOURCE,
                operation: op,
            });
            actions.push(Action::Await("r3"));
            (
                "model allows, rule denies",
                vec![
                    Expect::Outcome {
                        label: "r3",
                        outcome: Outcome::Denied(DenyReason::Rule),
                    },
                    Expect::Overridden {
                        label: "r3",
                        overridden: true,
                    },
                    Expect::LogKinds {
                        label: "r3",
                        kinds: vec![LogKind::Requested, LogKind::Authenticated, LogKind::Decided, LogKind::Denied],
                    },
                ],
                "denied: rule",
            )
        }
        "4" | "replay" => {
            let (u, r, op) = fx.find_unruled_case(true).ok_or_else(|| missing("it allows"))?;
            actions.push(Action::Request {
                label: "r4",
                actor: Actor::User(u),
                resource: r,
                operation: op,
            });
            actions.push(Action::Await("r4"));
            actions.push(Action::Redeem {
                label: "r4",
                operation: op,
            });
            actions.push(Action::Settle);
            let mut expect = vec![
                Expect::Outcome {
                    label: "r4",
                    outcome: Outcome::Granted,
                },
                Expect::Overridden {
                    label: "r4",
                    overridden: false,
                },
                Expect::Payload("r4"),
            ];
            if name == "4" {
                expect.push(Expect::LogKinds {
                    label: "r4",
                    kinds: granted_flow(),
                });
                ("model allows, no rule applies", expect, "granted, redeemed, logged")
            } else {
                actions.push(Action::Redeem {
                    label: "r4",
                    operation: op,
                });
                actions.push(Action::Adversary(AdversaryKind::ReplayLink));
                actions.push(Action::Adversary(AdversaryKind::ReuseNonce));
                actions.push(Action::Settle);
                expect.push(Expect::SingleRedemption("r4"));
                expect.push(Expect::LogKinds {
                    label: "r4",
                    kinds: granted_flow(),
                });
                expect.push(Expect::Agreement);
                ("replayed link and reused nonce", expect, "second redemption rejected")
            }
        }
        "tamper" => {
            let (u, r, op) = fx.find_unruled_case(true).ok_or_else(|| missing("it allows"))?;
            actions.push(Action::Request {
                label: "t1",
                actor: Actor::User(u),
                resource: r,
                operation: op,
            });
            actions.push(Action::Await("t1"));
            actions.push(Action::Settle);
            actions.push(Action::Adversary(AdversaryKind::TamperBlock));
            actions.push(Action::Adversary(AdversaryKind::UnauthorizedRequest));
            actions.push(Action::Run(5));
            actions.push(Action::Settle);
            (
                "tampered blocks and forged transactions",
                vec![
                    Expect::ForgedBlocksRejected,
                    Expect::Outcome {
                        label: "t1",
                        outcome: Outcome::Granted,
                    },
                    Expect::Agreement,
                ],
                "forged blocks rejected",
            )
        }
        other => return Err(ScenarioError::Unknown(other.to_string())),
    };
    Ok(ScenarioScript {
        name: name.to_string(),
        title: title.to_string(),
        network: scenario_network(FIXTURE_SEED),
        actions,
        expect,
        expected_summary: summary.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssertionResult {
    pub description: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub name: String,
    pub title: String,
    pub expected: String,
    pub actual: String,
    pub assertions: Vec<AssertionResult>,
    pub log: Vec<String>,
    pub trace: String,
    pub ticks: u64,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.expected == self.actual && self.assertions.iter().all(|a| a.passed)
    }

    /// Summary, assertion list and the relevant log slice.
    pub fn render(&self) -> String {
        let mut out = format!(
            "scenario {} ({}): {}\n  expected: {}\n  actual:   {}\n",
            self.name,
            self.title,
            if self.passed() { "PASS" } else { "FAIL" },
            self.expected,
            self.actual
        );
        for a in &self.assertions {
            if a.passed {
                out.push_str(&format!("  [ok]   {}\n", a.description));
            } else {
                out.push_str(&format!("  [FAIL] {}: {}\n", a.description, a.detail));
            }
        }
        out.push_str("  log:\n");
        for l in &self.log {
            out.push_str(&format!("    {l}\n"));
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Tracked {
    actor: Actor,
    request_id: RequestId,
    resource: u32,
    result: PollResult,
    redemptions: Vec<Result<Vec<u8>, ApiError>>,
}

/// Runs scripts against a simulated world through the service API.
struct Driver<'f> {
    fx: &'f Fixtures,
    client: Client<SimBackend>,
    tracked: BTreeMap<&'static str, Tracked>,
}

impl<'f> Driver<'f> {
    fn new(fx: &'f Fixtures, network: NetworkConfig) -> Result<Self, ScenarioError> {
        let seed = network.seed;
        let world = fx.world(network)?;
        Ok(Self {
            fx,
            client: Client::new(SimBackend { world }, ChaCha20Rng::seed_from_u64(seed ^ 0x434c_4945)),
            tracked: BTreeMap::new(),
        })
    }

    fn world(&mut self) -> &mut World {
        &mut self.client.backend_mut().world
    }

    fn world_ref(&self) -> &World {
        &self.client.backend().world
    }

    fn note(&mut self, actor: &str, event: &str, detail: String) {
        self.world().annotate(actor, event, detail);
    }

    fn register_users(&mut self) -> Result<(), ScenarioError> {
        let admin = self.fx.admin.clone();
        for (i, u) in self.fx.users.iter().enumerate() {
            self.client.register_user(&admin, u.public).map_err(setup)?;
            if i % 25 == 24 {
                self.world().step();
            }
        }
        self.note("driver", "registered", format!("users={}", self.fx.users.len()));
        let report = self.world().run_until_converged(SETTLE_TICKS);
        if report.timed_out {
            return Err(ScenarioError::Setup("registration did not settle".into()));
        }
        let memory = self.world_ref().honest_ledger().memory();
        for (i, u) in self.fx.users.iter().enumerate() {
            if memory.user(&u.public).map(|r| r.user_index) != Some(i as u64) {
                return Err(ScenarioError::Setup(format!("user {i} was not registered at index {i}")));
            }
        }
        Ok(())
    }

    fn request(&mut self, label: &'static str, actor: Actor, resource: u32, op: Operation) -> Result<(), ScenarioError> {
        let key = self.fx.key(actor).clone();
        let request_id = self.client.request_access(&key, resource, op.name()).map_err(setup)?;
        self.note(
            &actor.to_string(),
            "request",
            format!("label={label} request_id={request_id} resource={resource} operation={op}"),
        );
        self.tracked.insert(
            label,
            Tracked {
                actor,
                request_id,
                resource,
                result: PollResult::Pending,
                redemptions: Vec::new(),
            },
        );
        Ok(())
    }

    fn poll(&mut self, label: &'static str) -> Result<PollResult, ScenarioError> {
        let t = self.tracked.get(label).ok_or_else(|| setup(format!("unknown label {label}")))?;
        let key = self.fx.key(t.actor).clone();
        let id = t.request_id;
        let r = self.client.poll_result(id, &key).map_err(setup)?;
        if let Some(t) = self.tracked.get_mut(label) {
            if !matches!(r, PollResult::Pending) && !matches!(t.result, PollResult::Link { .. }) {
                t.result = r.clone();
            }
        }
        Ok(r)
    }

    fn await_outcome(&mut self, label: &'static str) -> Result<(), ScenarioError> {
        for _ in 0..AWAIT_TICKS {
            let r = self.poll(label)?;
            if !matches!(r, PollResult::Pending) {
                let actor = self.tracked[label].actor.to_string();
                self.note(&actor, "poll", format!("label={label} {}", Outcome::from(&r)));
                return Ok(());
            }
            self.world().step();
        }
        self.note("driver", "await_timeout", format!("label={label}"));
        Ok(())
    }

    fn redeem(&mut self, label: &'static str, op: Operation) -> Result<(), ScenarioError> {
        let t = self.tracked.get(label).ok_or_else(|| setup(format!("unknown label {label}")))?;
        let PollResult::Link { token, nonce, .. } = t.result else {
            self.note("driver", "redeem_skipped", format!("label={label} no link"));
            return Ok(());
        };
        let actor = t.actor.to_string();
        let r = self.client.redeem(token, nonce, op);
        let detail = match &r {
            Ok(p) => format!("label={label} ok bytes={}", p.len()),
            Err(e) => format!("label={label} {e}"),
        };
        self.note(&actor, "redeem", detail);
        if let Some(t) = self.tracked.get_mut(label) {
            t.redemptions.push(r);
        }
        Ok(())
    }

    fn act(&mut self, action: &Action) -> Result<(), ScenarioError> {
        match action {
            Action::RegisterUsers => self.register_users(),
            Action::Request {
                label,
                actor,
                resource,
                operation,
            } => self.request(label, *actor, *resource, *operation),
            Action::Await(label) => self.await_outcome(label),
            Action::Redeem { label, operation } => self.redeem(label, *operation),
            Action::Adversary(kind) => {
                if let Err(e) = self.world().inject_adversary(*kind) {
                    self.note("driver", "adversary_failed", e.to_string());
                }
                Ok(())
            }
            Action::Run(n) => {
                self.world().run(*n);
                Ok(())
            }
            Action::Settle => {
                let r = self.world().run_until_converged(SETTLE_TICKS);
                self.note(
                    "driver",
                    "settled",
                    format!("height={} agreement={} timed_out={}", r.height, r.agreement, r.timed_out),
                );
                Ok(())
            }
        }
    }

    fn log_for(&self, label: &str) -> Vec<LogEntry> {
        let Some(t) = self.tracked.get(label) else { return Vec::new() };
        self.world_ref().honest_ledger().query_access_log(&LogFilter {
            request_id: Some(t.request_id),
            ..LogFilter::default()
        })
    }

    fn check(&self, e: &Expect) -> AssertionResult {
        let (passed, detail) = match e {
            Expect::Outcome { label, outcome } => {
                let got = self.tracked.get(label).map(|t| Outcome::from(&t.result)).unwrap_or(Outcome::Pending);
                (got == *outcome, format!("got {got}"))
            }
            Expect::Overridden { label, overridden } => {
                let decided: Vec<bool> = self
                    .log_for(label)
                    .iter()
                    .filter(|l| l.kind == LogKind::Decided)
                    .map(|l| l.overridden)
                    .collect();
                (decided == [*overridden], format!("decided entries {decided:?}"))
            }
            Expect::LogKinds { label, kinds } => {
                let got: Vec<LogKind> = self.log_for(label).iter().map(|l| l.kind).collect();
                let names: Vec<&str> = got.iter().map(|k| k.name()).collect();
                (got == *kinds, format!("got {}", names.join(" -> ")))
            }
            Expect::Payload(label) => match self.tracked.get(label) {
                Some(t) => match t.redemptions.first() {
                    Some(Ok(p)) => (*p == resource_payload(t.resource), format!("{} bytes", p.len())),
                    Some(Err(e)) => (false, e.to_string()),
                    None => (false, "never redeemed".into()),
                },
                None => (false, "unknown label".into()),
            },
            Expect::SingleRedemption(label) => self.single_redemption(label),
            Expect::ForgedBlocksRejected => {
                let w = self.world_ref();
                let validators: Vec<PublicKey> = w.genesis().validators.clone();
                let live: Vec<usize> = (0..w.validator_count()).filter(|i| !w.is_crashed(*i)).collect();
                let rejected: Vec<usize> = live.iter().map(|i| w.validator(*i).rejected_blocks().len()).collect();
                let foreign = live.iter().any(|i| {
                    w.validator(*i).ledger().chain()[1..]
                        .iter()
                        .any(|b| !validators.contains(&b.validator_pk))
                });
                (
                    rejected.iter().all(|n| *n > 0) && !foreign,
                    format!("rejected per validator {rejected:?}, foreign sealer on chain: {foreign}"),
                )
            }
            Expect::Agreement => {
                let r = self.world_ref().report(false);
                (r.agreement, format!("tips {:?}", r.nodes.iter().map(|n| n.tip.to_hex()[..16].to_string()).collect::<Vec<_>>()))
            }
        };
        AssertionResult {
            description: e.to_string(),
            passed,
            detail,
        }
    }

    fn single_redemption(&self, label: &str) -> (bool, String) {
        let Some(t) = self.tracked.get(label) else { return (false, "unknown label".into()) };
        let PollResult::Link { token, .. } = t.result else { return (false, "no link".into()) };
        let tok = format!("token={token}");
        let trace = self.world_ref().trace();
        let served = trace
            .iter()
            .filter(|e| e.node == "storage" && e.event == "redeemed" && e.detail.contains(&tok))
            .count();
        let refused = trace
            .iter()
            .filter(|e| e.node == "storage" && e.event == "redeem_rejected" && e.detail.contains(&tok))
            .count();
        let logged = self.log_for(label).iter().filter(|l| l.kind == LogKind::Redeemed).count();
        (
            served == 1 && logged == 1 && refused >= 1,
            format!("served {served}, refused {refused}, logged {logged}"),
        )
    }

    /// The outcome in the words of [`ScenarioScript::expected_summary`].
    fn summary(&self, script: &ScenarioScript) -> String {
        let first = script.actions.iter().find_map(|a| match a {
            Action::Request { label, .. } => Some(*label),
            _ => None,
        });
        let Some(label) = first else { return "nothing requested".into() };
        let outcome = self.tracked.get(label).map(|t| Outcome::from(&t.result)).unwrap_or(Outcome::Pending);
        match script.name.as_str() {
            "4" => {
                let redeemed = self.tracked[label].redemptions.iter().any(|r| r.is_ok());
                let logged = self.log_for(label).iter().any(|l| l.kind == LogKind::Redeemed);
                match (outcome, redeemed, logged) {
                    (Outcome::Granted, true, true) => "granted, redeemed, logged".into(),
                    (Outcome::Granted, true, false) => "granted, redeemed, not logged".into(),
                    (Outcome::Granted, false, _) => "granted, not redeemed".into(),
                    (o, _, _) => o.to_string(),
                }
            }
            "replay" => {
                let (ok, detail) = self.single_redemption(label);
                if ok {
                    "second redemption rejected".into()
                } else {
                    format!("replay not contained ({detail})")
                }
            }
            "tamper" => {
                if self.check(&Expect::ForgedBlocksRejected).passed {
                    "forged blocks rejected".into()
                } else {
                    "forged block accepted".into()
                }
            }
            _ => outcome.to_string(),
        }
    }
}

pub fn run_scenario(script: &ScenarioScript, fx: &Fixtures) -> Result<ScenarioReport, ScenarioError> {
    let mut d = Driver::new(fx, script.network.clone())?;
    d.note("driver", "scenario", format!("name={} title={:?}", script.name, script.title));
    for a in &script.actions {
        d.act(a)?;
    }
    let assertions = script.expect.iter().map(|e| d.check(e)).collect();
    let mut log = Vec::new();
    for label in d.tracked.keys() {
        for l in d.log_for(label) {
            log.push(format!("{label}: {l}"));
        }
    }
    Ok(ScenarioReport {
        name: script.name.clone(),
        title: script.title.clone(),
        expected: script.expected_summary.clone(),
        actual: d.summary(script),
        assertions,
        log,
        ticks: d.world_ref().tick(),
        trace: d.world_ref().trace_text(),
    })
}

pub fn run_named(name: &str, fx: &Fixtures) -> Result<ScenarioReport, ScenarioError> {
    run_scenario(&scenario_script(name, fx)?, fx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleCase {
    None,
    Allow,
    Deny,
}

impl RuleCase {
    pub const ALL: [RuleCase; 3] = [RuleCase::None, RuleCase::Allow, RuleCase::Deny];

    pub fn name(self) -> &'static str {
        match self {
            RuleCase::None => "none",
            RuleCase::Allow => "allow",
            RuleCase::Deny => "deny",
        }
    }
}

/// The decision table: authentication first, then a matching rule, then
/// the model.
pub fn expected_outcome(registered: bool, model_grant: bool, rule: RuleCase) -> Outcome {
    match (registered, rule, model_grant) {
        (false, _, _) => Outcome::Denied(DenyReason::Unregistered),
        (true, RuleCase::Deny, _) => Outcome::Denied(DenyReason::Rule),
        (true, RuleCase::Allow, _) => Outcome::Granted,
        (true, RuleCase::None, true) => Outcome::Granted,
        (true, RuleCase::None, false) => Outcome::Denied(DenyReason::Model),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixRow {
    pub registered: bool,
    pub model_grant: bool,
    pub rule: RuleCase,
    pub actor: Actor,
    pub resource: u32,
    pub operation: Operation,
    pub expected: Outcome,
    /// Through the service API over the simulated network.
    pub api: Outcome,
    /// Calling the contracts and the engine directly.
    pub library: Outcome,
}

impl MatrixRow {
    pub fn passed(&self) -> bool {
        self.expected == self.api && self.expected == self.library
    }
}

impl fmt::Display for MatrixRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<12} {:<6} {:<5} {:<11} r{:<3} {:<4} {:<20} {:<20} {:<20} {}",
            if self.registered { "registered" } else { "unregistered" },
            if self.model_grant { "allow" } else { "deny" },
            self.rule.name(),
            self.actor.to_string(),
            self.resource,
            self.operation,
            self.expected.to_string(),
            self.api.to_string(),
            self.library.to_string(),
            if self.passed() { "ok" } else { "MISMATCH" }
        )
    }
}

#[derive(Debug, Clone)]
pub struct MatrixReport {
    pub rows: Vec<MatrixRow>,
    pub trace: String,
}

impl MatrixReport {
    pub fn passed(&self) -> bool {
        self.rows.len() == 12 && self.rows.iter().all(MatrixRow::passed)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<12} {:<6} {:<5} {:<11} {:<4} {:<4} {:<20} {:<20} {:<20} result\n",
            "user", "model", "rule", "actor", "res", "op", "expected", "api", "library"
        );
        for r in &self.rows {
            out.push_str(&format!("{r}\n"));
        }
        out.push_str(&format!(
            "matrix: {}/{} rows match\n",
            self.rows.iter().filter(|r| r.passed()).count(),
            self.rows.len()
        ));
        out
    }
}

/// What the contracts and engine decide when called directly.
pub fn library_outcome(
    ledger: &LedgerState,
    fx: &Fixtures,
    user: &KeyPair,
    resource: u32,
    operation: Operation,
) -> Outcome {
    let now = ledger.tip().time;
    let info = ReqInfo {
        resource_id: resource,
        operation,
        request_id: RequestId([0; 16]),
    };
    let Transaction::AccReq(tx) = crate::types::build_access_request_tx(user, info, now) else {
        unreachable!("builder returns an access request")
    };
    let tx: AccessRequestTx = tx;
    match authentication_contract(&tx, ledger.memory(), &fx.genesis.params, now) {
        Err(f) => Outcome::Denied(f.into()),
        Ok(v) => {
            let Some(user_index) = v.user_bits.to_u64() else { return Outcome::Denied(DenyReason::Engine) };
            match fx.engine.decide(&fx.rules, user_index, resource as u64) {
                Ok(d) if d.access_list[operation.index()] => Outcome::Granted,
                Ok(d) if d.overridden[operation.index()] => Outcome::Denied(DenyReason::Rule),
                Ok(_) => Outcome::Denied(DenyReason::Model),
                Err(_) => Outcome::Denied(DenyReason::Engine),
            }
        }
    }
}

/// All 2 x 2 x 3 combinations of registration, model verdict and rule.
pub fn run_matrix(fx: &Fixtures) -> Result<MatrixReport, ScenarioError> {
    let mut cases = Vec::new();
    for registered in [true, false] {
        for model_grant in [true, false] {
            for rule in RuleCase::ALL {
                let (user, resource, op) = match rule {
                    RuleCase::None => fx.find_unruled_case(model_grant),
                    RuleCase::Allow => fx.find_case(ALLOW_RESOURCE, model_grant).map(|(u, op)| (u, ALLOW_RESOURCE, op)),
                    RuleCase::Deny => fx.find_case(DENY_RESOURCE, model_grant).map(|(u, op)| (u, DENY_RESOURCE, op)),
                }
                .ok_or_else(|| {
                    ScenarioError::Setup(format!(
                        "no user with model verdict {model_grant} under rule {}",
                        rule.name()
                    ))
                })?;
                let actor = if registered { Actor::User(user) } else { Actor::Outsider(0) };
                cases.push((registered, model_grant, rule, actor, resource, op));
            }
        }
    }
    const LABELS: [&str; 12] = ["m00", "m01", "m02", "m03", "m04", "m05", "m06", "m07", "m08", "m09", "m10", "m11"];
    let mut d = Driver::new(fx, scenario_network(FIXTURE_SEED ^ 0x4d41))?;
    d.note("driver", "scenario", "name=matrix".into());
    d.register_users()?;
    for (i, (_, _, _, actor, resource, op)) in cases.iter().enumerate() {
        d.request(LABELS[i], *actor, *resource, *op)?;
    }
    for label in LABELS {
        d.await_outcome(label)?;
    }
    d.act(&Action::Settle)?;
    let rows = cases
        .iter()
        .enumerate()
        .map(|(i, &(registered, model_grant, rule, actor, resource, operation))| {
            let api = Outcome::from(&d.tracked[LABELS[i]].result);
            let library = library_outcome(d.world_ref().honest_ledger(), fx, fx.key(actor), resource, operation);
            MatrixRow {
                registered,
                model_grant,
                rule,
                actor,
                resource,
                operation,
                expected: expected_outcome(registered, model_grant, rule),
                api,
                library,
            }
        })
        .collect();
    Ok(MatrixReport {
        rows,
        trace: d.world_ref().trace_text(),
    })
}

/// Every scenario and the matrix, in a fixed order.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub scenarios: Vec<ScenarioReport>,
    pub matrix: MatrixReport,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.scenarios.iter().all(ScenarioReport::passed) && self.matrix.passed()
    }

    /// Concatenated traces; byte-identical across runs with the same seed.
    pub fn trace(&self) -> String {
        let mut out = String::new();
        for s in &self.scenarios {
            out.push_str(&s.trace);
        }
        out.push_str(&self.matrix.trace);
        out
    }
}

pub fn run_suite(fx: &Fixtures) -> Result<SuiteReport, ScenarioError> {
    let scenarios = SCENARIOS.iter().map(|n| run_named(n, fx)).collect::<Result<_, _>>()?;
    Ok(SuiteReport {
        scenarios,
        matrix: run_matrix(fx)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Attack {
    Legitimate,
    StolenSameOp,
    StolenOtherOp,
    WrongNonce,
    ResubmitLink,
    ResubmitStorage,
    ForgedStorage,
    CatalogReplay,
    CatalogReuse,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayStats {
    pub trials: usize,
    /// Trials whose link was redeemed successfully at least once.
    pub redeemed_trials: usize,
    /// Successful redemptions beyond the first, summed over trials.
    pub second_redemptions: usize,
    pub rejected_attempts: usize,
    /// Most on-chain redemption records seen for one link.
    pub max_logged_redemptions: usize,
}

/// Replay and nonce-reuse attacks in `trials` random orderings.
///
/// Each trial grants one request, then runs the owner's redemption and a
/// shuffled set of attacks by someone holding a copy of the link, with
/// random gaps of 0 to 2 ticks (0 puts attempts in the same tick).
pub fn run_replay_trials(fx: &Fixtures, trials: usize, seed: u64) -> Result<ReplayStats, ScenarioError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut stats = ReplayStats {
        trials,
        ..ReplayStats::default()
    };
    let attacker = fixture_key(seed, "attacker");
    for trial in 0..trials {
        let network = NetworkConfig {
            latency: Latency::Uniform { min: 0, max: 1 },
            seed: rng.gen(),
            ..NetworkConfig::default()
        };
        let mut d = Driver::new(fx, network)?;
        let user = fx.users[0].clone();
        d.client.register_user(&fx.admin, user.public).map_err(setup)?;
        if d.world().run_until_converged(SETTLE_TICKS).timed_out {
            return Err(ScenarioError::Setup(format!("trial {trial}: registration did not settle")));
        }
        let op = Operation::ALL[rng.gen_range(0..4)];
        d.request("x", Actor::User(0), ALLOW_RESOURCE, op)?;
        d.await_outcome("x")?;
        let PollResult::Link { token, nonce, .. } = d.tracked["x"].result else {
            return Err(ScenarioError::Setup(format!("trial {trial}: no link issued")));
        };
        let other = Operation::ALL[(op.index() + 1 + rng.gen_range(0..3)) % 4];
        let mut plan = vec![
            Attack::Legitimate,
            Attack::StolenSameOp,
            Attack::StolenSameOp,
            Attack::StolenOtherOp,
            Attack::WrongNonce,
            Attack::ResubmitLink,
            Attack::ResubmitStorage,
            Attack::ForgedStorage,
            Attack::CatalogReplay,
            Attack::CatalogReuse,
        ];
        plan.shuffle(&mut rng);
        let mut successes = 0;
        for step in plan {
            let attempt = match step {
                Attack::Legitimate | Attack::StolenSameOp => Some(d.client.redeem(token, nonce, op)),
                Attack::StolenOtherOp => Some(d.client.redeem(token, nonce, other)),
                Attack::WrongNonce => {
                    let mut bad = nonce;
                    bad.0[0] ^= 1;
                    Some(d.client.redeem(token, bad, op))
                }
                Attack::ResubmitLink => {
                    let link = d.world_ref().honest_ledger().link_for(&d.tracked["x"].request_id).cloned();
                    if let Some(l) = link {
                        let _ = d.client.submit(Transaction::Link(l));
                    }
                    None
                }
                Attack::ResubmitStorage | Attack::ForgedStorage => {
                    let stored = d.world_ref().honest_ledger().chain().iter().rev().find_map(|b| {
                        b.transactions.iter().find_map(|t| match t {
                            Transaction::Storage(s) if s.nonce == nonce => Some(s.clone()),
                            _ => None,
                        })
                    });
                    let tx = match (step, stored) {
                        (Attack::ResubmitStorage, Some(s)) => Some(s),
                        (Attack::ForgedStorage, _) => {
                            let now = d.world_ref().now();
                            let mut s = StorageTx {
                                nonce,
                                time: now,
                                user_pk: user.public,
                                storage_sig: crypto::Signature([0; 64]),
                            };
                            s.storage_sig = attacker.sign(&s.signing_payload());
                            Some(s)
                        }
                        _ => None,
                    };
                    if let Some(s) = tx {
                        let _ = d.client.submit(Transaction::Storage(s));
                    }
                    None
                }
                Attack::CatalogReplay => {
                    let _ = d.world().inject_adversary(AdversaryKind::ReplayLink);
                    None
                }
                Attack::CatalogReuse => {
                    let _ = d.world().inject_adversary(AdversaryKind::ReuseNonce);
                    None
                }
            };
            match attempt {
                Some(Ok(_)) => successes += 1,
                Some(Err(_)) => stats.rejected_attempts += 1,
                None => {}
            }
            let gap = rng.gen_range(0..=2);
            d.world().run(gap);
        }
        d.world().run_until_converged(SETTLE_TICKS);
        let tok = format!("token={token}");
        let served = d
            .world_ref()
            .trace()
            .iter()
            .filter(|e| e.node == "storage" && e.event == "redeemed" && e.detail.contains(&tok))
            .count();
        let logged = d.log_for("x").iter().filter(|l| l.kind == LogKind::Redeemed).count();
        if served > 0 {
            stats.redeemed_trials += 1;
        }
        stats.second_redemptions += served.max(successes).saturating_sub(1);
        stats.max_logged_redemptions = stats.max_logged_redemptions.max(logged);
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsensusReport {
    pub submitted: usize,
    pub accepted: usize,
    pub converged: ConvergenceReport,
    pub digest: Digest,
    pub crashed: usize,
    pub height_at_crash: u64,
    pub height_after_crash: u64,
    /// Slots after the crash whose leader is still alive.
    pub live_leader_slots: u64,
    pub survivors_agree: bool,
}

/// Registers every fixture user, submits `n_txs` transactions in total
/// (registrations plus access requests), then crashes the last validator
/// and keeps submitting for `crash_ticks` ticks.
pub fn run_consensus_experiment(
    fx: &Fixtures,
    seed: u64,
    n_txs: usize,
    crash_ticks: u64,
) -> Result<ConsensusReport, ScenarioError> {
    let network = NetworkConfig {
        latency: Latency::Uniform { min: 0, max: 2 },
        seed,
        ..NetworkConfig::default()
    };
    let mut d = Driver::new(fx, network)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut accepted = 0;
    let registrations = n_txs.min(USERS);
    for (i, u) in fx.users.iter().take(registrations).enumerate() {
        accepted += usize::from(d.client.register_user(&fx.admin, u.public).is_ok());
        if i % 20 == 19 {
            d.world().step();
        }
    }
    d.world().run(3);
    for i in 0..n_txs - registrations {
        let u = rng.gen_range(0..registrations);
        let r = rng.gen_range(0..RESOURCES);
        let op = Operation::ALL[rng.gen_range(0..4)];
        accepted += usize::from(d.client.request_access(&fx.users[u], r, op.name()).is_ok());
        if i % 40 == 39 {
            d.world().step();
        }
    }
    let converged = d.world().run_until_converged(2_000);
    let digest = d.world_ref().digest();

    let crashed = FIXTURE_VALIDATORS - 1;
    d.world().crash(crashed);
    let height_at_crash = d.world_ref().honest_ledger().height();
    let first_slot = d.world_ref().genesis().slot_of(d.world_ref().now()).unwrap_or(0);
    for _ in 0..crash_ticks {
        let u = rng.gen_range(0..registrations);
        let op = Operation::ALL[rng.gen_range(0..4)];
        let _ = d.client.request_access(&fx.users[u], rng.gen_range(0..RESOURCES), op.name());
        d.world().step();
    }
    let last_slot = d.world_ref().genesis().slot_of(d.world_ref().now()).unwrap_or(0);
    let v = fx.validators.len() as u64;
    let live_leader_slots = (first_slot..last_slot).filter(|s| s % v != crashed as u64).count() as u64;
    let after = d.world().run_until_converged(2_000);
    Ok(ConsensusReport {
        submitted: n_txs,
        accepted,
        converged,
        digest,
        crashed,
        height_at_crash,
        height_after_crash: d.world_ref().honest_ledger().height(),
        live_leader_slots,
        survivors_agree: after.agreement && after.nodes.len() == FIXTURE_VALIDATORS - 1,
    })
}
