use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use dlacb::engine::{DecisionModel, DEFAULT_DIMS};

fn dlacb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlacb")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn zero_model(dir: &Path) -> String {
    let path = dir.join("zero.bin");
    DecisionModel::zeros(&DEFAULT_DIMS).unwrap().save(&path).unwrap();
    path.display().to_string()
}

/// Four consecutive free ports, found by binding and releasing them.
fn free_base_port() -> u16 {
    for _ in 0..50 {
        let first = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        if first > 65_000 {
            continue;
        }
        if (0..4).all(|i| TcpListener::bind(("127.0.0.1", first + i)).is_ok()) {
            return first;
        }
    }
    panic!("no free port range");
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(dlacb(&["scenario", "run", "nine"]).status.code(), Some(2));
    assert_eq!(dlacb(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(dlacb(&["poll", "--key", "/nonexistent", "--request", "00"]).status.code(), Some(2));
}

#[test]
fn init_writes_a_deployment_once() {
    let dir = tempfile::tempdir().unwrap();
    let model = zero_model(dir.path());
    let dep = dir.path().join("dep");
    let dep_s = dep.display().to_string();
    let out = dlacb(&["init", "--dir", &dep_s, "--model", &model, "--users", "3", "--resources", "8"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["genesis.bin", "model.bin", "rules.txt", "validator-0.conf", "storage.conf", "keys/user-002.key"] {
        assert!(dep.join(f).exists(), "{f} missing");
    }
    assert_eq!(dlacb(&["init", "--dir", &dep_s, "--model", &model]).status.code(), Some(2));

    let conf = dep.join("validator-1.conf").display().to_string();
    let wrong = dlacb(&["node", "start", "--config", &conf, "--role", "storage"]);
    assert_eq!(wrong.status.code(), Some(2));
}

struct Nodes(Vec<Child>);

impl Drop for Nodes {
    fn drop(&mut self) {
        for c in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

#[test]
fn live_request_and_single_redemption() {
    let dir = tempfile::tempdir().unwrap();
    let model = zero_model(dir.path());
    let dep = dir.path().join("dep");
    let base = free_base_port();
    let out = dlacb(&[
        "init",
        "--dir",
        &dep.display().to_string(),
        "--model",
        &model,
        "--users",
        "2",
        "--base-port",
        &base.to_string(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let _nodes = Nodes(
        ["validator-0", "validator-1", "validator-2", "storage"]
            .iter()
            .map(|n| {
                Command::new(env!("CARGO_BIN_EXE_dlacb"))
                    .args(["node", "start", "--config", &dep.join(format!("{n}.conf")).display().to_string()])
                    .stdout(Stdio::null())
                    .stderr(Stdio::null())
                    .spawn()
                    .unwrap()
            })
            .collect(),
    );
    let validator = format!("127.0.0.1:{base}");
    let storage = format!("127.0.0.1:{}", base + 3);
    let endpoint = |args: &[&str]| -> Output {
        let mut all: Vec<&str> = args.to_vec();
        all.extend(["--validator", &validator, "--storage", &storage]);
        dlacb(&all)
    };
    let deadline = Instant::now() + Duration::from_secs(20);
    while !endpoint(&["status"]).status.success() {
        assert!(Instant::now() < deadline, "nodes did not come up");
        thread::sleep(Duration::from_millis(100));
    }

    let key = |name: &str| dep.join("keys").join(name).display().to_string();
    let reg = endpoint(&["register-user", "--admin-key", &key("admin.key"), "--user-key", &key("user-000.pub")]);
    assert!(reg.status.success());

    // The request is refused until the registration is on chain.
    let request = loop {
        let out = endpoint(&["request-access", "--key", &key("user-000.key"), "--resource", "6", "--op", "op3"]);
        if out.status.success() {
            break stdout(&out).trim().to_string();
        }
        assert!(Instant::now() < deadline, "registration never confirmed");
        thread::sleep(Duration::from_millis(250));
    };
    let poll = endpoint(&["poll", "--key", &key("user-000.key"), "--request", &request, "--wait", "15"]);
    let line = stdout(&poll);
    assert!(line.starts_with("link "), "{line}");
    let field = |name: &str| {
        line.split_whitespace()
            .find_map(|w| w.strip_prefix(&format!("{name}=")))
            .unwrap()
            .to_string()
    };
    let (token, nonce) = (field("token"), field("nonce"));
    let redeem = || endpoint(&["redeem", "--token", &token, "--nonce", &nonce, "--op", "op3"]);
    let first = redeem();
    assert!(first.status.success());
    assert_eq!(stdout(&first), "contents of resource 6\n");
    assert_eq!(redeem().status.code(), Some(1));

    let other = endpoint(&["request-access", "--key", &key("user-001.key"), "--resource", "6", "--op", "op1"]);
    let other_id = stdout(&other).trim().to_string();
    let denied = endpoint(&["poll", "--key", &key("user-001.key"), "--request", &other_id, "--wait", "15"]);
    assert_eq!(denied.status.code(), Some(1));
    assert_eq!(stdout(&denied).trim(), "denied: unregistered");
}
