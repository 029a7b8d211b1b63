//! `dlacb`: deploy, run and drive the access-control network.
//!
//! Exit status is 0 on success, 1 when a scenario fails or the network
//! refuses an operation, and 2 on usage, config or transport errors.

use std::fs;
use std::io::Write;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use dlacb::crypto::{load_public_key, KeyPair, PublicKey};
use dlacb::engine::{decision_accuracy, generate_dataset, DecisionModel, InputEncoding};
use dlacb::ledger::{read_chain_file, LedgerState};
use dlacb::net::tcp::{spawn_node, unix_now, LiveNode, LiveOptions, RemoteBackend};
use dlacb::net::{StorageNode, ValidatorNode};
use dlacb::scenario::{
    fixture_policy, run_matrix, run_named, run_suite, train_default_model, Fixtures, FIXTURE_SEED,
    RESOURCES, SCENARIOS, USERS,
};
use dlacb::service::{
    init_deployment, parse_log_filter, ApiError, Client, InitOptions, NodeRole, PollResult, ServiceConfig,
    DEFAULT_BASE_PORT, ENV_DATA_DIR, ENV_PORT,
};
use dlacb::storage::StorageService;
use dlacb::types::{LinkToken, Nonce, Operation, RequestId};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Parser)]
#[command(name = "dlacb", version, about = "Permissioned access-control ledger")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write keys, genesis, model, rules, resources and node configs.
    Init(InitArgs),
    /// Run a node.
    Node {
        #[command(subcommand)]
        command: NodeCommand,
    },
    /// Register a user public key (admin only).
    RegisterUser {
        #[command(flatten)]
        endpoint: Endpoint,
        #[arg(long)]
        admin_key: PathBuf,
        /// A `.pub` file, or a `.key` file whose public half is used.
        #[arg(long)]
        user_key: PathBuf,
    },
    /// Submit an access request; prints the request id.
    RequestAccess {
        #[command(flatten)]
        endpoint: Endpoint,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        resource: u32,
        /// op1 to op4.
        #[arg(long)]
        op: String,
    },
    /// Show a request's state, decrypting the link if one was issued.
    Poll {
        #[command(flatten)]
        endpoint: Endpoint,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        request: String,
        /// Keep polling while pending, up to this many seconds.
        #[arg(long, default_value_t = 0)]
        wait: u64,
    },
    /// Redeem an access link at the storage node.
    Redeem {
        #[command(flatten)]
        endpoint: Endpoint,
        #[arg(long)]
        token: String,
        #[arg(long)]
        nonce: String,
        #[arg(long)]
        op: String,
        /// Write the payload here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Query the access log with key=value filters
    /// (user, resource, decision, kind, request, from, to).
    Logs {
        #[command(flatten)]
        endpoint: Endpoint,
        filters: Vec<String>,
    },
    /// Print block summaries.
    Chain {
        #[command(flatten)]
        endpoint: Endpoint,
        #[arg(long, default_value_t = 0)]
        from: u64,
        #[arg(long, default_value_t = u64::MAX)]
        to: u64,
    },
    /// Print the node's height and tip.
    Status {
        #[command(flatten)]
        endpoint: Endpoint,
    },
    /// Run scripted scenarios on the simulator.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCommand,
    },
    /// Train or evaluate the decision model.
    Model {
        #[command(subcommand)]
        command: ModelCommand,
    },
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = 3)]
    validators: usize,
    #[arg(long, default_value_t = USERS)]
    users: usize,
    #[arg(long, default_value_t = RESOURCES)]
    resources: u32,
    #[arg(long, default_value_t = DEFAULT_BASE_PORT)]
    base_port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = FIXTURE_SEED)]
    seed: u64,
    /// Deploy this model instead of training one.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum NodeCommand {
    Start {
        #[arg(long)]
        config: PathBuf,
        /// Fail unless the config has this role.
        #[arg(long)]
        role: Option<NodeRole>,
        /// Override the listen port.
        #[arg(long)]
        port: Option<u16>,
    },
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// One of 1, 2, 3, 4, replay, tamper, matrix, all.
    Run {
        name: String,
        /// Where the trained fixture model is cached.
        #[arg(long, default_value = "target/dlacb-fixtures")]
        cache: PathBuf,
        /// Also print the event trace.
        #[arg(long)]
        trace: bool,
    },
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Train on the synthetic policy and save the model.
    Train {
        #[arg(long)]
        out: PathBuf,
    },
    /// Report held-out accuracy of a saved model.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Args)]
struct Endpoint {
    /// Validator API address.
    #[arg(long, default_value = "127.0.0.1:7400")]
    validator: SocketAddr,
    /// Storage API address.
    #[arg(long, default_value = "127.0.0.1:7403")]
    storage: SocketAddr,
    #[arg(long, default_value_t = 10)]
    timeout: u64,
}

impl Endpoint {
    fn client(&self) -> Client<RemoteBackend> {
        let backend = RemoteBackend {
            validator: self.validator,
            storage: self.storage,
            timeout: Duration::from_secs(self.timeout),
        };
        Client::new(backend, ChaCha20Rng::from_entropy())
    }
}

enum Failure {
    /// The network said no, or a scenario assertion failed.
    Refused(String),
    Usage(String),
}

impl From<ApiError> for Failure {
    fn from(e: ApiError) -> Self {
        match e {
            ApiError::Usage(_) | ApiError::Transport(_) | ApiError::Protocol(_) => Failure::Usage(e.to_string()),
            _ => Failure::Refused(e.to_string()),
        }
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Refused(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Init(args) => init(args),
        Command::Node {
            command: NodeCommand::Start { config, role, port },
        } => start_node(&config, role, port),
        Command::RegisterUser {
            endpoint,
            admin_key,
            user_key,
        } => {
            let admin = KeyPair::load(&admin_key).map_err(usage)?;
            let pk = user_public_key(&user_key)?;
            let id = endpoint.client().register_user(&admin, pk)?;
            println!("submitted {id}");
            Ok(())
        }
        Command::RequestAccess {
            endpoint,
            key,
            resource,
            op,
        } => {
            let user = KeyPair::load(&key).map_err(usage)?;
            let id = endpoint.client().request_access(&user, resource, &op)?;
            println!("{id}");
            Ok(())
        }
        Command::Poll {
            endpoint,
            key,
            request,
            wait,
        } => {
            let user = KeyPair::load(&key).map_err(usage)?;
            let id = RequestId::from_hex(&request).ok_or_else(|| usage("request id must be 32 hex digits"))?;
            let mut client = endpoint.client();
            let deadline = Instant::now() + Duration::from_secs(wait);
            let result = loop {
                let r = client.poll_result(id, &user)?;
                if !matches!(r, PollResult::Pending) || Instant::now() >= deadline {
                    break r;
                }
                thread::sleep(Duration::from_millis(250));
            };
            println!("{result}");
            match result {
                PollResult::Denied(_) | PollResult::Expired => Err(Failure::Refused(result.to_string())),
                _ => Ok(()),
            }
        }
        Command::Redeem {
            endpoint,
            token,
            nonce,
            op,
            out,
        } => {
            let token = LinkToken::from_hex(&token).ok_or_else(|| usage("token must be 32 hex digits"))?;
            let nonce = Nonce::from_hex(&nonce).ok_or_else(|| usage("nonce must be 32 hex digits"))?;
            let op: Operation = op.parse().map_err(usage)?;
            let payload = endpoint.client().redeem(token, nonce, op)?;
            match out {
                Some(path) => fs::write(&path, payload).map_err(usage)?,
                None => std::io::stdout().write_all(&payload).map_err(usage)?,
            }
            Ok(())
        }
        Command::Logs { endpoint, filters } => {
            let pairs = filters
                .iter()
                .map(|f| f.split_once('=').ok_or_else(|| usage(format!("expected key=value, got {f:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            let filter = parse_log_filter(pairs)?;
            for entry in endpoint.client().logs(filter)? {
                println!("{entry}");
            }
            Ok(())
        }
        Command::Chain { endpoint, from, to } => {
            for block in endpoint.client().chain(from, to)? {
                println!("{block}");
            }
            Ok(())
        }
        Command::Status { endpoint } => {
            let s = endpoint.client().status()?;
            println!("role={} height={} tip={} now={}", s.role, s.height, s.tip, s.now);
            Ok(())
        }
        Command::Scenario {
            command: ScenarioCommand::Run { name, cache, trace },
        } => run_scenarios(&name, &cache, trace),
        Command::Model {
            command: ModelCommand::Train { out },
        } => {
            let start = Instant::now();
            let (model, report, acc) = train_default_model(&fixture_policy()).map_err(usage)?;
            model.save(&out).map_err(usage)?;
            let last = report.last().expect("at least one epoch");
            println!(
                "epochs={} train_loss={:.4} heldout_accuracy={acc:.4} elapsed={:.1}s params={} -> {}",
                last.epoch + 1,
                last.train_loss,
                start.elapsed().as_secs_f64(),
                model.param_count(),
                out.display()
            );
            Ok(())
        }
        Command::Model {
            command: ModelCommand::Eval { model },
        } => {
            let model = DecisionModel::load(&model).map_err(usage)?;
            let enc = InputEncoding::default();
            let data = generate_dataset(&fixture_policy(), enc, USERS as u64, RESOURCES as u64).map_err(usage)?;
            let (_, held) = data.split(0.2, FIXTURE_SEED);
            let acc = decision_accuracy(&model, &held.to_samples(enc).map_err(usage)?).map_err(usage)?;
            println!("heldout_accuracy={acc:.4} samples={}", held.len());
            Ok(())
        }
    }
}

fn user_public_key(path: &Path) -> Result<PublicKey, Failure> {
    if path.extension().is_some_and(|e| e == "pub") {
        load_public_key(path).map_err(usage)
    } else {
        Ok(KeyPair::load(path).map_err(usage)?.public)
    }
}

fn init(args: InitArgs) -> Result<(), Failure> {
    let model = match &args.model {
        Some(path) => DecisionModel::load(path).map_err(usage)?,
        None => {
            eprintln!("training the decision model");
            let (model, _, acc) = train_default_model(&fixture_policy()).map_err(usage)?;
            eprintln!("heldout accuracy {acc:.4}");
            model
        }
    };
    let options = InitOptions {
        validators: args.validators,
        users: args.users,
        resources: args.resources,
        base_port: args.base_port,
        host: args.host,
        genesis_time: unix_now(),
        seed: args.seed,
    };
    for path in init_deployment(&args.dir, &options, &model).map_err(usage)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn start_node(config_path: &Path, role: Option<NodeRole>, port: Option<u16>) -> Result<(), Failure> {
    let mut config = ServiceConfig::load(config_path).map_err(usage)?;
    config.apply_env(|k| std::env::var(k).ok()).map_err(usage)?;
    if let Some(port) = port {
        config.listen.set_port(port);
        config.peers.insert(config.node_id, config.listen);
    }
    if let Some(role) = role {
        if role != config.role {
            return Err(usage(format!("{} is a {} config", config_path.display(), config.role)));
        }
    }
    let setup = config.load_setup().map_err(usage)?;
    let v = setup.genesis.validators.len();
    let rng = ChaCha20Rng::from_entropy();
    let (node, chain_file) = match config.role {
        NodeRole::Validator => {
            let dir = config.resolve(Path::new(&format!("validator-{}", config.node_id)));
            fs::create_dir_all(&dir).map_err(usage)?;
            let chain_file = dir.join("chain.bin");
            let mut ledger = setup.ledger.clone();
            if chain_file.exists() {
                let blocks = read_chain_file(&chain_file).map_err(usage)?;
                let stored = LedgerState::from_blocks(&blocks, setup.engine.clone()).map_err(usage)?;
                if stored.genesis_hash() != ledger.genesis_hash() {
                    return Err(usage(format!("{} belongs to another genesis", chain_file.display())));
                }
                ledger = stored;
            }
            eprintln!("validator {} resuming at height {}", config.node_id, ledger.chain().len() - 1);
            let node = ValidatorNode::new(config.node_id, setup.keypair, v, ledger, rng);
            (LiveNode::Validator(Box::new(node)), Some(chain_file))
        }
        NodeRole::Storage => {
            let service =
                StorageService::open(setup.keypair, setup.genesis.validators.clone(), rng, &config.resolve(Path::new("storage")))
                    .map_err(usage)?;
            (LiveNode::Storage(Box::new(StorageNode::new(config.node_id, service))), None)
        }
    };
    let listener = TcpListener::bind(config.listen).map_err(|e| usage(format!("{}: {e}", config.listen)))?;
    eprintln!(
        "{} node {} listening on {} ({ENV_PORT} and {ENV_DATA_DIR} override the config)",
        config.role, config.node_id, config.listen
    );
    let options = LiveOptions {
        peers: config.peers.clone(),
        validator_count: v,
        clock: Arc::new(unix_now),
        chain_file,
        log: Arc::new(|line| println!("{line}")),
    };
    let handle = spawn_node(node, listener, options).map_err(usage)?;
    handle.wait();
    Ok(())
}

fn run_scenarios(name: &str, cache: &Path, trace: bool) -> Result<(), Failure> {
    if !(SCENARIOS.contains(&name) || name == "matrix" || name == "all") {
        return Err(usage(format!(
            "unknown scenario {name:?}; expected one of {}, matrix, all",
            SCENARIOS.join(", ")
        )));
    }
    let fx = Fixtures::load_or_train(cache).map_err(usage)?;
    let start = Instant::now();
    let (passed, text, trace_text) = match name {
        "all" => {
            let suite = run_suite(&fx).map_err(usage)?;
            let mut text: String = suite.scenarios.iter().map(|r| r.render()).collect();
            text.push_str(&suite.matrix.render());
            (suite.passed(), text, suite.trace())
        }
        "matrix" => {
            let m = run_matrix(&fx).map_err(usage)?;
            (m.passed(), m.render(), m.trace.clone())
        }
        _ => {
            let r = run_named(name, &fx).map_err(usage)?;
            (r.passed(), r.render(), r.trace.clone())
        }
    };
    print!("{text}");
    if trace {
        print!("{trace_text}");
    }
    println!("{} in {:.2}s", if passed { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    if passed {
        Ok(())
    } else {
        Err(Failure::Refused(format!("scenario {name} failed")))
    }
}
