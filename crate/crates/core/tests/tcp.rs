use std::collections::BTreeMap;
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use dlacb::crypto::seeded_rng;
use dlacb::engine::{DecisionModel, DEFAULT_DIMS};
use dlacb::ledger::{read_chain_file, LedgerState};
use dlacb::net::tcp::{spawn_node, LiveNode, LiveOptions, RemoteBackend};
use dlacb::net::{StorageNode, ValidatorNode};
use dlacb::scenario::{Fixtures, ALLOW_RESOURCE, GENESIS_TIME};
use dlacb::service::{ApiError, Client, PollResult};
use dlacb::types::Operation;

// Four slots per real second keeps the test short.
fn fast_clock() -> Arc<dyn Fn() -> u64 + Send + Sync> {
    let start = Instant::now();
    Arc::new(move || GENESIS_TIME + 5 + start.elapsed().as_millis() as u64 / 250)
}

fn poll_until<T>(mut f: impl FnMut() -> Option<T>) -> T {
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        if let Some(v) = f() {
            return v;
        }
        assert!(Instant::now() < deadline, "timed out");
        thread::sleep(Duration::from_millis(100));
    }
}

#[test]
fn grant_and_redeem_over_tcp() {
    let fx = Fixtures::with_model(DecisionModel::zeros(&DEFAULT_DIMS).unwrap(), None).unwrap();
    let v = fx.validators.len();
    let listeners: Vec<TcpListener> = (0..=v).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    let peers: BTreeMap<usize, _> = listeners
        .iter()
        .enumerate()
        .map(|(i, l)| (i, l.local_addr().unwrap()))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let chain_file = dir.path().join("chain.bin");
    let clock = fast_clock();
    let ledger = LedgerState::genesis(fx.genesis.clone(), fx.engine.clone()).unwrap();

    let mut handles = Vec::new();
    for (i, listener) in listeners.into_iter().enumerate() {
        let node = if i < v {
            LiveNode::Validator(Box::new(ValidatorNode::new(
                i,
                fx.validators[i].clone(),
                v,
                ledger.clone(),
                seeded_rng(100 + i as u64),
            )))
        } else {
            LiveNode::Storage(Box::new(StorageNode::new(v, fx.storage_service(1).unwrap())))
        };
        let options = LiveOptions {
            peers: peers.clone(),
            validator_count: v,
            clock: clock.clone(),
            chain_file: (i == 0).then(|| chain_file.clone()),
            log: Arc::new(|_| {}),
        };
        handles.push(spawn_node(node, listener, options).unwrap());
    }

    let backend = RemoteBackend {
        validator: peers[&1],
        storage: peers[&v],
        timeout: Duration::from_secs(5),
    };
    let mut client = Client::new(backend, seeded_rng(9));
    let user = &fx.users[0];
    client.register_user(&fx.admin, user.public).unwrap();
    let request = poll_until(|| match client.request_access(user, ALLOW_RESOURCE, "op2") {
        Ok(id) => Some(id),
        Err(ApiError::Unauthorized) => None,
        Err(e) => panic!("{e}"),
    });
    let (token, nonce) = poll_until(|| match client.poll_result(request, user).unwrap() {
        PollResult::Pending => None,
        PollResult::Link { token, nonce, .. } => Some((token, nonce)),
        other => panic!("unexpected {other}"),
    });
    let payload = poll_until(|| client.redeem(token, nonce, Operation::Op2).ok());
    assert_eq!(payload, dlacb::scenario::resource_payload(ALLOW_RESOURCE));
    assert!(client.redeem(token, nonce, Operation::Op2).is_err());
    poll_until(|| matches!(client.poll_result(request, user).unwrap(), PollResult::Redeemed).then_some(()));

    let mut finals = Vec::new();
    for h in handles {
        finals.push(h.stop().expect("node state"));
    }
    let LiveNode::Validator(v0) = &finals[0] else { panic!() };
    let stored = read_chain_file(&chain_file).unwrap();
    let reloaded = LedgerState::from_blocks(&stored, fx.engine.clone()).unwrap();
    assert_eq!(reloaded.chain().last().unwrap().hash(), v0.ledger().chain().last().unwrap().hash());
}
