use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use dlacb::codec::Canonical;
use dlacb::contracts::{encrypt_request_result, RequestResult};
use dlacb::crypto::{self, seeded_rng, Digest, KeyPair, PublicKey, Signature};
use dlacb::engine::{
    apply_priority_rules, binary_repr, DecisionEngine, DecisionModel, Effect, InputEncoding, Match, PriorityRule,
    DEFAULT_DIMS,
};
use dlacb::ledger::{expected_leader, GenesisConfig, LedgerState, ProtocolParams, RequestStatus};
use dlacb::storage::{RedeemError, ResultOutcome, StorageService};
use dlacb::types::{
    build_access_request_tx, build_setup_tx, AccessRequestTx, BitVector, LinkPayload, LinkTx, LinkToken, Nonce,
    Operation, ReqInfo, RequestId, SetupTx, StorageTx, Transaction, VerifiedTx,
};
use proptest::prelude::*;
use rand::{Rng, RngCore};

/// Straight transcription of the SHA-256 compression function, used only
/// to check the production hash.
mod sha256_oracle {
    const K: [u32; 64] = [
        0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4, 0xab1c5ed5, 0xd807aa98,
        0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786,
        0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da, 0x983e5152, 0xa831c66d, 0xb00327c8,
        0xbf597fc7, 0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13,
        0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b, 0xc24b8b70, 0xc76c51a3, 0xd192e819,
        0xd6990624, 0xf40e3585, 0x106aa070, 0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a,
        0x5b9cca4f, 0x682e6ff3, 0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7,
        0xc67178f2,
    ];

    pub fn digest(data: &[u8]) -> [u8; 32] {
        let mut h: [u32; 8] = [
            0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a, 0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19,
        ];
        let mut msg = data.to_vec();
        msg.push(0x80);
        while msg.len() % 64 != 56 {
            msg.push(0);
        }
        msg.extend_from_slice(&((data.len() as u64) * 8).to_be_bytes());
        for chunk in msg.chunks(64) {
            let mut w = [0u32; 64];
            for i in 0..16 {
                w[i] = u32::from_be_bytes(chunk[4 * i..4 * i + 4].try_into().unwrap());
            }
            for i in 16..64 {
                let s0 = w[i - 15].rotate_right(7) ^ w[i - 15].rotate_right(18) ^ (w[i - 15] >> 3);
                let s1 = w[i - 2].rotate_right(17) ^ w[i - 2].rotate_right(19) ^ (w[i - 2] >> 10);
                w[i] = w[i - 16].wrapping_add(s0).wrapping_add(w[i - 7]).wrapping_add(s1);
            }
            let [mut a, mut b, mut c, mut d, mut e, mut f, mut g, mut hh] = h;
            for i in 0..64 {
                let s1 = e.rotate_right(6) ^ e.rotate_right(11) ^ e.rotate_right(25);
                let ch = (e & f) ^ (!e & g);
                let t1 = hh.wrapping_add(s1).wrapping_add(ch).wrapping_add(K[i]).wrapping_add(w[i]);
                let s0 = a.rotate_right(2) ^ a.rotate_right(13) ^ a.rotate_right(22);
                let maj = (a & b) ^ (a & c) ^ (b & c);
                let t2 = s0.wrapping_add(maj);
                hh = g;
                g = f;
                f = e;
                e = d.wrapping_add(t1);
                d = c;
                c = b;
                b = a;
                a = t1.wrapping_add(t2);
            }
            for (x, y) in h.iter_mut().zip([a, b, c, d, e, f, g, hh]) {
                *x = x.wrapping_add(y);
            }
        }
        let mut out = [0u8; 32];
        for (i, word) in h.iter().enumerate() {
            out[4 * i..4 * i + 4].copy_from_slice(&word.to_be_bytes());
        }
        out
    }
}

#[test]
fn oracle_matches_published_vectors() {
    let cases: [(&[u8], &str); 3] = [
        (b"", "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"),
        (b"abc", "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"),
        (
            b"abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq",
            "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1",
        ),
    ];
    for (input, hex) in cases {
        assert_eq!(hex::encode(sha256_oracle::digest(input)), hex);
    }
}

fn kp(seed: u64) -> KeyPair {
    KeyPair::from_seed(crypto::hash(&seed.to_le_bytes()).0)
}

proptest! {
    #[test]
    fn hash_agrees_with_oracle(data in proptest::collection::vec(any::<u8>(), 0..300)) {
        prop_assert_eq!(crypto::hash(&data).0, sha256_oracle::digest(&data));
    }

    #[test]
    fn signatures_bind_key_and_message(
        seed in any::<u64>(),
        msg in proptest::collection::vec(any::<u8>(), 1..200),
        flip in any::<prop::sample::Index>(),
        bit in 0u8..8,
    ) {
        let key = kp(seed);
        let sig = key.sign(&msg);
        prop_assert!(crypto::verify(&key.public, &msg, &sig));

        let mut bad_msg = msg.clone();
        bad_msg[flip.index(msg.len())] ^= 1 << bit;
        prop_assert!(!crypto::verify(&key.public, &bad_msg, &sig));

        let mut bad_sig = sig;
        bad_sig.0[flip.index(64)] ^= 1 << bit;
        prop_assert!(!crypto::verify(&key.public, &msg, &bad_sig));

        prop_assert!(!crypto::verify(&kp(seed ^ 1).public, &msg, &sig));
    }

    #[test]
    fn encryption_round_trips_for_the_recipient_only(
        seed in any::<u64>(),
        plain in proptest::collection::vec(any::<u8>(), 0..300),
        flip in any::<prop::sample::Index>(),
    ) {
        let (to, other) = (kp(seed), kp(seed ^ 1));
        let ct = crypto::encrypt(&to.public, &plain, &mut seeded_rng(seed)).unwrap();
        prop_assert_eq!(crypto::decrypt(&to.secret, &ct).unwrap(), plain);
        prop_assert!(crypto::decrypt(&other.secret, &ct).is_err());
        let mut tampered = ct.clone();
        let i = flip.index(tampered.len());
        tampered[i] ^= 0x80;
        prop_assert!(crypto::decrypt(&to.secret, &tampered).is_err());
    }

    #[test]
    fn binary_repr_round_trips(value in any::<u64>(), width in 1u32..=64) {
        match binary_repr(value, width) {
            Ok(bits) => {
                prop_assert_eq!(bits.len(), width as usize);
                prop_assert_eq!(bits.to_u64(), Some(value));
            }
            Err(_) => prop_assert!(width < 64 && value >> width != 0),
        }
    }
}

fn random_bytes<const N: usize>(rng: &mut impl RngCore) -> [u8; N] {
    let mut b = [0u8; N];
    rng.fill_bytes(&mut b);
    b
}

fn random_tx(rng: &mut impl RngCore) -> Transaction {
    let time = rng.gen_range(0..1u64 << 40);
    let op = Operation::ALL[rng.gen_range(0..4)];
    match rng.gen_range(0..5) {
        0 => Transaction::Setup(SetupTx {
            admin_pk: PublicKey(random_bytes(rng)),
            user_pk: PublicKey(random_bytes(rng)),
            time,
            admin_sig: Signature(random_bytes(rng)),
        }),
        1 => Transaction::AccReq(AccessRequestTx {
            user_pk: PublicKey(random_bytes(rng)),
            time,
            req_info: ReqInfo {
                resource_id: rng.gen(),
                operation: op,
                request_id: RequestId(random_bytes(rng)),
            },
            user_sig: Signature(random_bytes(rng)),
        }),
        2 => {
            let len = rng.gen_range(0..80);
            Transaction::Link(LinkTx {
                request_id: RequestId(random_bytes(rng)),
                nonce_digest: Digest(random_bytes(rng)),
                time,
                ciphertext: (0..len).map(|_| rng.gen()).collect(),
                storage_sig: Signature(random_bytes(rng)),
            })
        }
        3 => Transaction::Storage(StorageTx {
            nonce: Nonce(random_bytes(rng)),
            time,
            user_pk: PublicKey(random_bytes(rng)),
            storage_sig: Signature(random_bytes(rng)),
        }),
        _ => {
            let (u, r) = (rng.gen_range(0..20), rng.gen_range(0..20));
            Transaction::Verified(VerifiedTx {
                time,
                user_bits: BitVector::new((0..u).map(|_| rng.gen()).collect()),
                req_bits: BitVector::new((0..r).map(|_| rng.gen()).collect()),
                request_id: RequestId(random_bytes(rng)),
            })
        }
    }
}

#[test]
fn transaction_encoding_is_injective_and_strict() {
    let mut rng = seeded_rng(2024);
    let mut seen: HashMap<Vec<u8>, Transaction> = HashMap::new();
    for _ in 0..10_000 {
        let tx = random_tx(&mut rng);
        let bytes = tx.to_canonical_bytes();
        assert_eq!(Transaction::from_canonical_bytes(&bytes).unwrap(), tx);
        if let Some(prev) = seen.insert(bytes.clone(), tx.clone()) {
            assert_eq!(prev, tx, "two transactions share an encoding");
        }
        let cut = rng.gen_range(0..bytes.len());
        assert!(Transaction::from_canonical_bytes(&bytes[..cut]).is_err());
        let mut longer = bytes;
        longer.push(0);
        assert!(Transaction::from_canonical_bytes(&longer).is_err());
    }
}

proptest! {
    #[test]
    fn transaction_round_trip(seed in any::<u64>()) {
        let tx = random_tx(&mut seeded_rng(seed));
        let bytes = tx.to_canonical_bytes();
        prop_assert_eq!(tx.id(), crypto::hash(&bytes));
        prop_assert_eq!(Transaction::from_canonical_bytes(&bytes).unwrap(), tx);
    }
}

fn rule_strategy() -> impl Strategy<Value = PriorityRule> {
    (
        0u32..4,
        prop::option::of(0u32..3),
        prop::option::of(0u32..3),
        prop::option::of(0usize..4),
        any::<bool>(),
    )
        .prop_map(|(priority, user, resource, op, allow)| PriorityRule {
            priority,
            user: user.map_or(Match::Any, Match::Exact),
            resource: resource.map_or(Match::Any, Match::Exact),
            operation: op.map_or(Match::Any, |i| Match::Exact(Operation::ALL[i])),
            effect: if allow { Effect::Allow } else { Effect::Deny },
        })
}

proptest! {
    #[test]
    fn rule_overlay_invariants(
        rules in proptest::collection::vec(rule_strategy(), 0..8),
        user in 0u64..3,
        resource in 0u64..3,
        model in any::<[bool; 4]>(),
        shift in 0usize..8,
    ) {
        let out = apply_priority_rules(&rules, user, resource, model);
        for op in Operation::ALL {
            let matching: Vec<&PriorityRule> =
                rules.iter().filter(|r| r.matches(user, resource, op)).collect();
            let i = op.index();
            prop_assert_eq!(out.overridden[i], !matching.is_empty());
            match matching.iter().map(|r| r.priority).max() {
                None => prop_assert_eq!(out.access_list[i], model[i]),
                Some(top) => {
                    let top_rules: Vec<_> = matching.iter().filter(|r| r.priority == top).collect();
                    let deny = top_rules.iter().any(|r| r.effect == Effect::Deny);
                    prop_assert_eq!(out.access_list[i], !deny);
                }
            }
        }
        let mut rotated = rules.clone();
        if !rotated.is_empty() {
            let k = shift % rotated.len();
            rotated.rotate_left(k);
        }
        prop_assert_eq!(apply_priority_rules(&rotated, user, resource, model), out);
    }
}

const T0: u64 = 1_000_000;

struct Net {
    validators: Vec<KeyPair>,
    admin: KeyPair,
    state: LedgerState,
}

impl Net {
    fn new() -> Self {
        let validators: Vec<KeyPair> = (0..3).map(|i| kp(100 + i)).collect();
        let admin = kp(1);
        let engine = Arc::new(
            DecisionEngine::new(DecisionModel::zeros(&DEFAULT_DIMS).unwrap(), InputEncoding::default()).unwrap(),
        );
        let config = GenesisConfig {
            time: T0,
            admin_pks: vec![admin.public],
            validators: validators.iter().map(|v| v.public).collect(),
            storage_pk: kp(2).public,
            engine_fingerprint: engine.fingerprint(),
            rules: dlacb::engine::parse_rules("10 * 1 * DENY\n").unwrap(),
            params: ProtocolParams::default(),
        };
        Self {
            validators,
            admin,
            state: LedgerState::genesis(config, engine).unwrap(),
        }
    }

    /// Seals whatever is pooled in the next slot.
    fn seal(&mut self, txs: Vec<Transaction>) {
        let config = self.state.config().clone();
        let slot = config.slot_of(self.state.tip().time).unwrap() + 1;
        let time = config.slot_start(slot);
        for tx in txs {
            let _ = self.state.submit(tx, time);
        }
        let leader = expected_leader(slot, &config.validators);
        let v = self.validators.iter().find(|v| v.public == leader).unwrap();
        match self.state.propose_block(v, time) {
            Some(b) => {
                self.state.apply_block(&b).unwrap();
            }
            None => {
                // Empty pool: still advance the chain.
                let b = dlacb::types::Block::seal(v, self.state.height() + 1, self.state.tip_hash(), time, vec![]);
                self.state.apply_block(&b).unwrap();
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Step {
    Register(u8),
    Request { user: u8, resource: u32, op: usize, stale: bool },
    Empty,
}

fn step_strategy() -> impl Strategy<Value = Step> {
    prop_oneof![
        (0u8..6).prop_map(Step::Register),
        (0u8..8, 0u32..3, 0usize..4, prop::bool::weighted(0.1))
            .prop_map(|(user, resource, op, stale)| Step::Request { user, resource, op, stale }),
        Just(Step::Empty),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn replayed_chain_reproduces_state(steps in proptest::collection::vec(step_strategy(), 1..12)) {
        let mut net = Net::new();
        let mut seq = 0u8;
        for step in &steps {
            let time = net.state.config().slot_start(
                net.state.config().slot_of(net.state.tip().time).unwrap() + 1,
            );
            let tx = match *step {
                Step::Register(u) => vec![build_setup_tx(&net.admin, kp(500 + u as u64).public, time)],
                Step::Request { user, resource, op, stale } => {
                    seq += 1;
                    let info = ReqInfo { resource_id: resource, operation: Operation::ALL[op], request_id: RequestId([seq; 16]) };
                    let t = if stale { time.saturating_sub(1_000) } else { time };
                    vec![build_access_request_tx(&kp(500 + user as u64), info, t)]
                }
                Step::Empty => vec![],
            };
            net.seal(tx);
        }

        let chain = net.state.chain().to_vec();
        for (i, b) in chain.iter().enumerate().skip(1) {
            prop_assert_eq!(b.height, i as u64);
            prop_assert_eq!(b.prev_hash, chain[i - 1].hash());
            prop_assert!(b.verify_signature());
        }
        let replayed = LedgerState::from_blocks(&chain, net.state.engine().clone()).unwrap();
        prop_assert_eq!(replayed.state_digest(), net.state.state_digest());

        let m = net.state.memory();
        for i in 0..m.user_count() as u64 {
            let pk = m.user_key(i).unwrap();
            prop_assert_eq!(m.user(pk).unwrap().user_index, i);
        }
        for (_, r) in m.requests() {
            let registered = m.user(&r.user_pk).is_some();
            match r.status {
                RequestStatus::Granted { .. } => {
                    prop_assert!(registered);
                    prop_assert!(r.resource_id != 1, "the DENY rule on resource 1 must hold");
                }
                RequestStatus::Denied(_) | RequestStatus::Requested => {}
                ref other => prop_assert!(false, "unexpected status {:?}", other),
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Attempt {
    Genuine { link: usize, op: usize },
    WrongNonce { link: usize },
    UnknownToken,
}

fn attempt_strategy(links: usize) -> impl Strategy<Value = Attempt> {
    prop_oneof![
        4 => (0..links, 0usize..4).prop_map(|(link, op)| Attempt::Genuine { link, op }),
        1 => (0..links).prop_map(|link| Attempt::WrongNonce { link }),
        1 => Just(Attempt::UnknownToken),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Each link yields its payload at most once, only for the requested
    /// operation, and only with the right nonce.
    #[test]
    fn capabilities_are_single_use(
        ops in proptest::collection::vec(0usize..4, 1..5),
        attempts in proptest::collection::vec(attempt_strategy(4), 1..40),
    ) {
        let storage = kp(2);
        let validator = kp(100);
        let user = kp(60);
        let mut s = StorageService::new(storage.clone(), vec![validator.public], seeded_rng(3));
        s.put_resource(9, "nine", b"secret nine".to_vec()).unwrap();
        let mut links: Vec<(LinkPayload, Operation, LinkTx)> = Vec::new();
        for (i, &op) in ops.iter().enumerate() {
            let op = Operation::ALL[op];
            let mut access_list = [false; 4];
            access_list[op.index()] = true;
            let result = RequestResult {
                request_id: RequestId([i as u8; 16]),
                user_pk: user.public,
                resource_id: 9,
                operation: op,
                access_list,
                granted: true,
                time: T0,
            };
            let sealed = encrypt_request_result(&result, &storage.public, &validator, &mut seeded_rng(i as u64)).unwrap();
            match s.handle_request_result(&sealed, T0).unwrap() {
                ResultOutcome::Link { tx: Transaction::Link(t), .. } => {
                    // The link on the ledger reveals neither nonce nor payload.
                    prop_assert!(!t.ciphertext.windows(11).any(|w| w == b"secret nine"));
                    let payload = t.open(&user).unwrap();
                    prop_assert!(!Transaction::Link(t.clone()).to_canonical_bytes().windows(16).any(|w| w == payload.nonce.0));
                    prop_assert_eq!(t.nonce_digest, crypto::hash(&payload.nonce.0));
                    prop_assert!(t.open(&kp(61)).is_err());
                    links.push((payload, op, t));
                }
                other => prop_assert!(false, "{:?}", other),
            }
        }

        let mut redeemed: BTreeMap<usize, usize> = BTreeMap::new();
        for a in attempts {
            match a {
                Attempt::Genuine { link, op } => {
                    let Some((p, granted_op, _)) = links.get(link) else { continue };
                    let op = Operation::ALL[op];
                    let r = s.redeem(&p.link_token, &p.nonce, op, T0 + 1);
                    let expect_ok = op == *granted_op && !redeemed.contains_key(&link);
                    match r {
                        Ok((payload, _)) => {
                            prop_assert!(expect_ok);
                            prop_assert_eq!(payload, b"secret nine".to_vec());
                            *redeemed.entry(link).or_default() += 1;
                        }
                        Err(e) => {
                            prop_assert!(!expect_ok);
                            prop_assert!(matches!(e, RedeemError::AlreadyRedeemed | RedeemError::OperationNotPermitted));
                        }
                    }
                }
                Attempt::WrongNonce { link } => {
                    let Some((p, op, _)) = links.get(link) else { continue };
                    let mut nonce = p.nonce;
                    nonce.0[0] ^= 1;
                    prop_assert_eq!(s.redeem(&p.link_token, &nonce, *op, T0 + 1).unwrap_err(), RedeemError::WrongNonce);
                }
                Attempt::UnknownToken => {
                    let (p, op, _) = &links[0];
                    prop_assert_eq!(
                        s.redeem(&LinkToken([0xee; 16]), &p.nonce, *op, T0 + 1).unwrap_err(),
                        RedeemError::UnknownToken
                    );
                }
            }
        }
        prop_assert!(redeemed.values().all(|&n| n == 1));
    }
}
