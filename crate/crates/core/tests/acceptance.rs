//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS or FAIL line, even on success.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use dlacb::codec::Canonical;
use dlacb::crypto::seeded_rng;
use dlacb::engine::{DecisionModel, Sample, DEFAULT_DIMS};
use dlacb::ledger::{DenyReason, LedgerState, LogFilter, LogKind};
use dlacb::net::{Latency, NetworkConfig};
use dlacb::scenario::{
    run_consensus_experiment, run_matrix, run_named, run_replay_trials, run_suite, Fixtures, ALLOW_RESOURCE,
    USERS,
};
use dlacb::service::{Client, PollResult, SimBackend};
use dlacb::types::{Block, Operation};
use rand::Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn four_scenarios(fx: &Fixtures) -> Verdict {
    let start = Instant::now();
    let mut failed = Vec::new();
    for name in ["1", "2", "3", "4"] {
        let r = run_named(name, fx).expect("scenario runs");
        if !r.passed() {
            failed.push(format!("{name}: expected {} got {}", r.expected, r.actual));
        }
    }
    let elapsed = start.elapsed();
    let ok = failed.is_empty() && elapsed < Duration::from_secs(10);
    verdict(
        ok,
        format!(
            "scenarios 1-4 {} in {:.2}s (limit 10s, model trained beforehand){}",
            if failed.is_empty() { "match" } else { "differ" },
            elapsed.as_secs_f64(),
            failed.iter().map(|f| format!("; {f}")).collect::<String>()
        ),
    )
}

/// Registers all fixture users, has each request access once, and adds
/// one outsider. Returns the verdict and the resulting chain.
fn hundred_users(fx: &Fixtures) -> (Verdict, Vec<Block>) {
    let network = NetworkConfig {
        latency: Latency::Uniform { min: 0, max: 2 },
        seed: 101,
        ..NetworkConfig::default()
    };
    let world = fx.world(network).expect("world");
    let mut client = Client::new(SimBackend { world }, seeded_rng(101));
    for (i, u) in fx.users.iter().enumerate() {
        client.register_user(&fx.admin, u.public).expect("registration accepted");
        if i % 10 == 9 {
            client.backend_mut().world.step();
        }
    }
    let settled = client.backend_mut().world.run_until_converged(500);
    let registered = client.backend().world.honest_ledger().memory().user_count();

    let mut requests = Vec::new();
    for (i, u) in fx.users.iter().enumerate() {
        let op = Operation::ALL[i % 4];
        requests.push(client.request_access(u, ALLOW_RESOURCE, op.name()).expect("request accepted"));
        if i % 10 == 9 {
            client.backend_mut().world.step();
        }
    }
    let outsider = client.request_access(&fx.outsiders[0], 0, "op1").expect("request accepted");
    let settled2 = client.backend_mut().world.run_until_converged(1_000);

    let authenticated = requests
        .iter()
        .filter(|id| {
            let logs = client
                .logs(LogFilter {
                    request_id: Some(**id),
                    ..LogFilter::default()
                })
                .expect("logs");
            logs.iter().any(|l| l.kind == LogKind::Authenticated)
        })
        .count();
    let outsider_result = client.poll_result(outsider, &fx.outsiders[0]).expect("poll");

    // One redemption so that the chain carries every transaction kind.
    if let PollResult::Link { token, nonce, .. } = client.poll_result(requests[0], &fx.users[0]).expect("poll") {
        let _ = client.redeem(token, nonce, Operation::ALL[0]);
    }
    client.backend_mut().world.run_until_converged(500);

    let ok = !settled.timed_out
        && !settled2.timed_out
        && registered == USERS
        && authenticated == USERS
        && outsider_result == PollResult::Denied(DenyReason::Unregistered);
    let chain = client.backend().world.honest_ledger().chain().to_vec();
    (
        verdict(
            ok,
            format!(
                "{registered} users registered, {authenticated}/{USERS} authenticated, 101st key: {outsider_result}"
            ),
        ),
        chain,
    )
}

fn replay_resistance(fx: &Fixtures) -> Verdict {
    let start = Instant::now();
    let stats = run_replay_trials(fx, 1000, 7).expect("trials run");
    verdict(
        stats.second_redemptions == 0 && stats.max_logged_redemptions <= 1 && stats.redeemed_trials == stats.trials,
        format!(
            "{} orderings, {} second redemptions, {} rejected attempts, {} owners served, max {} logged redemption(s) per link, {:.1}s",
            stats.trials,
            stats.second_redemptions,
            stats.rejected_attempts,
            stats.redeemed_trials,
            stats.max_logged_redemptions,
            start.elapsed().as_secs_f64()
        ),
    )
}

/// True when a validator that holds `own` as its genesis refuses `blocks`.
fn chain_rejected(fx: &Fixtures, own_genesis: &LedgerState, encoded: &[Vec<u8>]) -> bool {
    let Ok(blocks) = encoded
        .iter()
        .map(|b| Block::from_canonical_bytes(b))
        .collect::<Result<Vec<_>, _>>()
    else {
        return true;
    };
    if blocks[0].hash() != own_genesis.genesis_hash() {
        return true;
    }
    LedgerState::from_blocks(&blocks, fx.engine.clone()).is_err()
}

fn integrity(fx: &Fixtures, chain: &[Block]) -> Verdict {
    const MUTATIONS: usize = 250;
    let encoded: Vec<Vec<u8>> = chain.iter().map(|b| b.to_canonical_bytes()).collect();
    let validators: Vec<LedgerState> = (0..fx.validators.len())
        .map(|_| LedgerState::genesis(fx.genesis.clone(), fx.engine.clone()).expect("genesis"))
        .collect();
    // States after each prefix, to check the mutated block on its own.
    let mut prefixes = vec![validators[0].clone()];
    for b in &chain[1..] {
        let mut s = prefixes.last().unwrap().clone();
        s.apply_block(b).expect("honest chain applies");
        prefixes.push(s);
    }
    assert!(!chain_rejected(fx, &validators[0], &encoded), "the honest chain must be accepted");

    let mut rng = seeded_rng(4);
    let mut rejected = 0;
    let mut block_rejected = 0;
    for _ in 0..MUTATIONS {
        let k = rng.gen_range(0..encoded.len());
        let i = rng.gen_range(0..encoded[k].len());
        let mut mutated = encoded.clone();
        mutated[k][i] ^= rng.gen_range(1..=255u8);
        if validators.iter().all(|v| chain_rejected(fx, v, &mutated)) {
            rejected += 1;
        }
        let alone = match Block::from_canonical_bytes(&mutated[k]) {
            Err(_) => true,
            Ok(b) if k == 0 => b.hash() != validators[0].genesis_hash(),
            Ok(b) => prefixes[k - 1].clone().apply_block(&b).is_err(),
        };
        block_rejected += usize::from(alone);
    }
    verdict(
        rejected == MUTATIONS && block_rejected == MUTATIONS,
        format!(
            "{rejected}/{MUTATIONS} mutated chains rejected by all {} validators ({block_rejected}/{MUTATIONS} at the mutated block itself), chain of {} blocks",
            validators.len(),
            chain.len()
        ),
    )
}

fn consensus(fx: &Fixtures) -> Verdict {
    let a = run_consensus_experiment(fx, 5, 500, 30).expect("experiment runs");
    let b = run_consensus_experiment(fx, 5, 500, 30).expect("experiment runs");
    let c = &a.converged;
    let ok = c.agreement
        && !c.timed_out
        && c.nodes.len() == fx.validators.len()
        && a.accepted == a.submitted
        && a == b
        && a.height_after_crash > a.height_at_crash
        && a.survivors_agree;
    verdict(
        ok,
        format!(
            "{}/{} txs accepted, {} validators agree at height {} (tick {}), repeat run identical: {}, after crash height {} -> {} over {} live-leader slots, survivors agree: {}",
            a.accepted,
            a.submitted,
            c.nodes.len(),
            c.height,
            c.tick,
            a == b,
            a.height_at_crash,
            a.height_after_crash,
            a.live_leader_slots,
            a.survivors_agree
        ),
    )
}

fn training(fx: &Fixtures) -> Verdict {
    let run = fx.training.as_ref().expect("fixtures trained in this process");
    verdict(
        run.heldout_accuracy >= 0.95 && run.elapsed < Duration::from_secs(60),
        format!(
            "held-out accuracy {:.4} (threshold 0.95), trained in {:.1}s (limit 60s)",
            run.heldout_accuracy,
            run.elapsed.as_secs_f64()
        ),
    )
}

/// Central differences against the analytic gradient. The relative error
/// of a component is |a - n| / max(|a| + |n|, 1e-12).
///
/// Every parameter is drawn at random. Freshly initialised models have zero
/// biases, which with all-zero binary inputs puts hidden units exactly on
/// the ReLU kink, where no derivative exists to compare against.
fn gradient_check() -> Verdict {
    const EPS: f64 = 1e-5;
    let mut rng = seeded_rng(11);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..20 {
        let input = rng.gen_range(2..7);
        let mut dims = vec![input];
        for _ in 0..rng.gen_range(1..3) {
            dims.push(rng.gen_range(2..7));
        }
        dims.push(4);
        let mut model = DecisionModel::init(&dims, &mut rng).expect("model");
        for p in 0..model.param_count() {
            model.set_param(p, rng.gen_range(-1.0..1.0));
        }
        let batch: Vec<Sample> = (0..rng.gen_range(1..6))
            .map(|_| Sample {
                input: (0..input).map(|_| f64::from(rng.gen_range(0..2u8))).collect(),
                labels: std::array::from_fn(|_| f64::from(rng.gen_range(0..2u8))),
            })
            .collect();
        let (_, grads) = model.loss_and_gradient(&batch).expect("gradient");
        let analytic = grads.flat();
        assert_eq!(analytic.len(), model.param_count());
        for (p, a) in analytic.iter().enumerate() {
            let mut plus = model.clone();
            plus.set_param(p, model.param(p) + EPS);
            let mut minus = model.clone();
            minus.set_param(p, model.param(p) - EPS);
            let n = (plus.loss(&batch).unwrap() - minus.loss(&batch).unwrap()) / (2.0 * EPS);
            let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-12);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    verdict(
        worst < 1e-4,
        format!("max relative error {worst:.2e} over {checked} parameters of 20 models (limit 1e-4)"),
    )
}

fn model_size(fx: &Fixtures) -> Verdict {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("model.bin");
    fx.engine.model().save(&path).expect("save");
    let size = std::fs::metadata(&path).expect("stat").len();
    let dims_ok = fx.engine.model().layer_dims() == DEFAULT_DIMS;
    verdict(
        size <= 1 << 20 && dims_ok,
        format!("default model file is {size} bytes (limit 1048576)"),
    )
}

fn truth_table(fx: &Fixtures) -> Verdict {
    let m = run_matrix(fx).expect("matrix runs");
    let ok_rows = m.rows.iter().filter(|r| r.passed()).count();
    verdict(
        m.passed() && m.rows.len() == 12,
        format!("{ok_rows}/{} combinations match the decision table", m.rows.len()),
    )
}

fn determinism(fx: &Fixtures) -> Verdict {
    let a = run_suite(fx).expect("suite runs");
    let b = run_suite(fx).expect("suite runs");
    let (ta, tb) = (a.trace(), b.trace());
    verdict(
        ta == tb && a.passed(),
        format!("two suite runs give {}-byte traces, identical: {}", ta.len(), ta == tb),
    )
}

fn guarded(f: &mut dyn FnMut() -> Verdict) -> Verdict {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        }
    }
}

fn report(n: usize, name: &str, v: &Verdict) {
    let status = if v.passed { "PASS" } else { "FAIL" };
    println!("[{status}] {n:>2}. {name}: {}", v.detail);
}

fn main() {
    // Lets `cargo test -- --list` work without running anything.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let fx = Fixtures::shared();
    let mut results = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        let v = guarded(f);
        report(results.len() + 1, name, &v);
        results.push(v.passed);
    };
    let mut chain = Vec::new();
    run("four scenarios", &mut || four_scenarios(fx));
    run("100-user registration", &mut || {
        let (v, c) = hundred_users(fx);
        chain = c;
        v
    });
    run("replay resistance", &mut || replay_resistance(fx));
    run("block integrity", &mut || integrity(fx, &chain));
    run("consensus agreement", &mut || consensus(fx));
    run("decision accuracy", &mut || training(fx));
    run("gradient check", &mut gradient_check);
    run("model file size", &mut || model_size(fx));
    run("truth-table matrix", &mut || truth_table(fx));
    run("determinism", &mut || determinism(fx));

    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
