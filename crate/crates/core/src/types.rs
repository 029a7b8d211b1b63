//! Protocol records: the five transaction kinds and the block that carries them.
//!
//! Every signed record signs a domain-separated canonical encoding of its
//! fields with the signature left out. Domain tags keep a signature made for
//! one record kind from verifying as another.

use std::fmt;
use std::str::FromStr;

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{self, CryptoError, Digest, KeyPair, PublicKey, Signature};
use crate::ledger::GenesisConfig;

pub const OPERATION_COUNT: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TxError {
    #[error("operation index {0} is out of range (expected 0..4)")]
    InvalidOperation(u8),
    #[error("unknown operation name {0:?} (expected op1..op4)")]
    UnknownOperationName(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// One of the four abstract operations a user may request on a resource.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operation {
    Op1,
    Op2,
    Op3,
    Op4,
}

impl Operation {
    pub const ALL: [Operation; OPERATION_COUNT] =
        [Operation::Op1, Operation::Op2, Operation::Op3, Operation::Op4];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: u8) -> Result<Self, TxError> {
        Self::ALL
            .get(index as usize)
            .copied()
            .ok_or(TxError::InvalidOperation(index))
    }

    pub fn name(self) -> &'static str {
        ["op1", "op2", "op3", "op4"][self.index()]
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Operation {
    type Err = TxError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| TxError::UnknownOperationName(s.to_string()))
    }
}

impl Canonical for Operation {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.u8(*self as u8);
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let tag = dec.u8()?;
        Operation::from_index(tag).map_err(|_| CodecError::InvalidTag {
            what: "operation",
            tag,
        })
    }
}

byte_newtype!(RequestId, 16);
byte_newtype!(Nonce, 16);
byte_newtype!(LinkToken, 16);

impl RequestId {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut b = [0u8; 16];
        rng.fill_bytes(&mut b);
        Self(b)
    }
}

/// Fixed-width bit string, most significant bit first.
///
/// Encoded as a `u16` bit count followed by the bits packed MSB-first;
/// padding bits must be zero so the encoding stays injective.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct BitVector(Vec<bool>);

impl BitVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Unsigned value of the bits, MSB first. `None` past 64 significant bits.
    pub fn to_u64(&self) -> Option<u64> {
        self.0.iter().try_fold(0u64, |acc, &b| {
            acc.checked_mul(2).map(|v| v | b as u64)
        })
    }

    pub fn as_reals(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 })
    }

    pub fn flip(&mut self, index: usize) {
        self.0[index] = !self.0[index];
    }
}

impl fmt::Debug for BitVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitVector({self})")
    }
}

impl fmt::Display for BitVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl Canonical for BitVector {
    fn encode_to(&self, enc: &mut Encoder) {
        let count = u16::try_from(self.0.len()).expect("bit vectors stay below 65536 bits");
        enc.u16(count);
        for chunk in self.0.chunks(8) {
            let byte = chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | ((b as u8) << (7 - i)));
            enc.u8(byte);
        }
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let count = dec.u16()? as usize;
        let packed = dec.take(count.div_ceil(8))?;
        let bits: Vec<bool> = (0..count)
            .map(|i| packed[i / 8] & (1 << (7 - i % 8)) != 0)
            .collect();
        let padding = packed.len() * 8 - count;
        if padding > 0 && packed[packed.len() - 1] & ((1u8 << padding) - 1) != 0 {
            return Err(CodecError::InvalidValue("bit vector padding"));
        }
        Ok(Self(bits))
    }
}

/// What is being requested: a resource, an operation on it, and a
/// correlation id that follows the request through to its link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ReqInfo {
    pub resource_id: u32,
    pub operation: Operation,
    pub request_id: RequestId,
}

impl ReqInfo {
    pub fn new(resource_id: u32, operation_index: u8, request_id: RequestId) -> Result<Self, TxError> {
        Ok(Self {
            resource_id,
            operation: Operation::from_index(operation_index)?,
            request_id,
        })
    }
}

impl Canonical for ReqInfo {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.u32(self.resource_id)
            .value(&self.operation)
            .value(&self.request_id);
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            resource_id: dec.u32()?,
            operation: dec.value()?,
            request_id: dec.value()?,
        })
    }
}

/// Registration of a user key by an administrator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetupTx {
    pub admin_pk: PublicKey,
    pub user_pk: PublicKey,
    pub time: u64,
    pub admin_sig: Signature,
}

/// A user's signed request for access.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessRequestTx {
    pub user_pk: PublicKey,
    pub time: u64,
    pub req_info: ReqInfo,
    pub user_sig: Signature,
}

/// Storage's answer to a granted request: the link, nonce and issue time,
/// encrypted to the requesting user.
///
/// `request_id`, `nonce_digest` and `time` travel in clear so the chain can
/// route the ciphertext, track the nonce without learning it, and check
/// freshness.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkTx {
    pub request_id: RequestId,
    pub nonce_digest: Digest,
    pub time: u64,
    pub ciphertext: Vec<u8>,
    pub storage_sig: Signature,
}

/// Storage's record that a link was redeemed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StorageTx {
    pub nonce: Nonce,
    pub time: u64,
    pub user_pk: PublicKey,
    pub storage_sig: Signature,
}

/// Output of the authentication contract. Never accepted from the network;
/// validators re-derive it and compare.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedTx {
    pub time: u64,
    pub user_bits: BitVector,
    pub req_bits: BitVector,
    pub request_id: RequestId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transaction {
    Setup(SetupTx),
    AccReq(AccessRequestTx),
    Link(LinkTx),
    Storage(StorageTx),
    Verified(VerifiedTx),
}

/// Where a transaction came from. Only the contract layer may produce
/// `Verified` transactions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxOrigin {
    Network,
    Contract,
}

/// Plaintext inside [`LinkTx::ciphertext`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkPayload {
    pub link_token: LinkToken,
    pub nonce: Nonce,
    pub issued_at: u64,
}

impl Canonical for LinkPayload {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.value(&self.link_token).value(&self.nonce).u64(self.issued_at);
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            link_token: dec.value()?,
            nonce: dec.value()?,
            issued_at: dec.u64()?,
        })
    }
}

const TAG_SETUP: u8 = 0;
const TAG_ACCREQ: u8 = 1;
const TAG_LINK: u8 = 2;
const TAG_STORAGE: u8 = 3;
const TAG_VERIFIED: u8 = 4;

fn payload(domain: &str, fill: impl FnOnce(&mut Encoder)) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.str(domain);
    fill(&mut enc);
    enc.into_bytes()
}

impl SetupTx {
    pub fn signing_payload(&self) -> Vec<u8> {
        payload("dlacb/setup", |e| {
            e.value(&self.admin_pk).value(&self.user_pk).u64(self.time);
        })
    }
}

impl AccessRequestTx {
    pub fn signing_payload(&self) -> Vec<u8> {
        payload("dlacb/access-request", |e| {
            e.value(&self.user_pk).u64(self.time).value(&self.req_info);
        })
    }
}

impl LinkTx {
    pub fn signing_payload(&self) -> Vec<u8> {
        payload("dlacb/link", |e| {
            e.value(&self.request_id)
                .value(&self.nonce_digest)
                .u64(self.time)
                .bytes(&self.ciphertext);
        })
    }

    pub fn open(&self, user: &KeyPair) -> Result<LinkPayload, CryptoError> {
        let plain = crypto::decrypt(&user.secret, &self.ciphertext)?;
        LinkPayload::from_canonical_bytes(&plain).map_err(|_| CryptoError::Decryption)
    }
}

impl StorageTx {
    pub fn signing_payload(&self) -> Vec<u8> {
        payload("dlacb/storage", |e| {
            e.value(&self.nonce).u64(self.time).value(&self.user_pk);
        })
    }
}

impl Transaction {
    pub fn time(&self) -> u64 {
        match self {
            Transaction::Setup(t) => t.time,
            Transaction::AccReq(t) => t.time,
            Transaction::Link(t) => t.time,
            Transaction::Storage(t) => t.time,
            Transaction::Verified(t) => t.time,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Transaction::Setup(_) => "setup",
            Transaction::AccReq(_) => "acc_req",
            Transaction::Link(_) => "link",
            Transaction::Storage(_) => "storage",
            Transaction::Verified(_) => "verified",
        }
    }

    pub fn id(&self) -> Digest {
        tx_id(self)
    }
}

impl Canonical for Transaction {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            Transaction::Setup(t) => {
                enc.u8(TAG_SETUP)
                    .value(&t.admin_pk)
                    .value(&t.user_pk)
                    .u64(t.time)
                    .value(&t.admin_sig);
            }
            Transaction::AccReq(t) => {
                enc.u8(TAG_ACCREQ)
                    .value(&t.user_pk)
                    .u64(t.time)
                    .value(&t.req_info)
                    .value(&t.user_sig);
            }
            Transaction::Link(t) => {
                enc.u8(TAG_LINK)
                    .value(&t.request_id)
                    .value(&t.nonce_digest)
                    .u64(t.time)
                    .bytes(&t.ciphertext)
                    .value(&t.storage_sig);
            }
            Transaction::Storage(t) => {
                enc.u8(TAG_STORAGE)
                    .value(&t.nonce)
                    .u64(t.time)
                    .value(&t.user_pk)
                    .value(&t.storage_sig);
            }
            Transaction::Verified(t) => {
                enc.u8(TAG_VERIFIED)
                    .u64(t.time)
                    .value(&t.user_bits)
                    .value(&t.req_bits)
                    .value(&t.request_id);
            }
        }
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(match dec.u8()? {
            TAG_SETUP => Transaction::Setup(SetupTx {
                admin_pk: dec.value()?,
                user_pk: dec.value()?,
                time: dec.u64()?,
                admin_sig: dec.value()?,
            }),
            TAG_ACCREQ => Transaction::AccReq(AccessRequestTx {
                user_pk: dec.value()?,
                time: dec.u64()?,
                req_info: dec.value()?,
                user_sig: dec.value()?,
            }),
            TAG_LINK => Transaction::Link(LinkTx {
                request_id: dec.value()?,
                nonce_digest: dec.value()?,
                time: dec.u64()?,
                ciphertext: dec.bytes()?,
                storage_sig: dec.value()?,
            }),
            TAG_STORAGE => Transaction::Storage(StorageTx {
                nonce: dec.value()?,
                time: dec.u64()?,
                user_pk: dec.value()?,
                storage_sig: dec.value()?,
            }),
            TAG_VERIFIED => Transaction::Verified(VerifiedTx {
                time: dec.u64()?,
                user_bits: dec.value()?,
                req_bits: dec.value()?,
                request_id: dec.value()?,
            }),
            tag => return Err(CodecError::InvalidTag { what: "transaction", tag }),
        })
    }
}

pub fn build_setup_tx(admin: &KeyPair, user_pk: PublicKey, time: u64) -> Transaction {
    let mut tx = SetupTx {
        admin_pk: admin.public,
        user_pk,
        time,
        admin_sig: Signature([0; 64]),
    };
    tx.admin_sig = admin.sign(&tx.signing_payload());
    Transaction::Setup(tx)
}

pub fn build_access_request_tx(user: &KeyPair, req_info: ReqInfo, time: u64) -> Transaction {
    let mut tx = AccessRequestTx {
        user_pk: user.public,
        time,
        req_info,
        user_sig: Signature([0; 64]),
    };
    tx.user_sig = user.sign(&tx.signing_payload());
    Transaction::AccReq(tx)
}

/// Encrypts `link` to `user_pk` and signs the result as storage.
pub fn build_link_tx<R: RngCore + CryptoRng>(
    storage: &KeyPair,
    user_pk: &PublicKey,
    request_id: RequestId,
    link: &LinkPayload,
    rng: &mut R,
) -> Result<Transaction, TxError> {
    let ciphertext = crypto::encrypt(user_pk, &link.to_canonical_bytes(), rng)?;
    let mut tx = LinkTx {
        request_id,
        nonce_digest: crypto::hash(&link.nonce.0),
        time: link.issued_at,
        ciphertext,
        storage_sig: Signature([0; 64]),
    };
    tx.storage_sig = storage.sign(&tx.signing_payload());
    Ok(Transaction::Link(tx))
}

pub fn build_storage_tx(storage: &KeyPair, nonce: Nonce, time: u64, user_pk: PublicKey) -> Transaction {
    let mut tx = StorageTx {
        nonce,
        time,
        user_pk,
        storage_sig: Signature([0; 64]),
    };
    tx.storage_sig = storage.sign(&tx.signing_payload());
    Transaction::Storage(tx)
}

/// Checks the signature a transaction carries against the key that must
/// have produced it: the embedded admin or user key for `Setup`/`AccReq`,
/// the registered storage key for `Link`/`Storage`. `Verified` carries no
/// signature and is only valid when it is the local contract's own output.
pub fn verify_transaction_signature(tx: &Transaction, storage_pk: &PublicKey, origin: TxOrigin) -> bool {
    match tx {
        Transaction::Setup(t) => crypto::verify(&t.admin_pk, &t.signing_payload(), &t.admin_sig),
        Transaction::AccReq(t) => crypto::verify(&t.user_pk, &t.signing_payload(), &t.user_sig),
        Transaction::Link(t) => crypto::verify(storage_pk, &t.signing_payload(), &t.storage_sig),
        Transaction::Storage(t) => crypto::verify(storage_pk, &t.signing_payload(), &t.storage_sig),
        Transaction::Verified(_) => origin == TxOrigin::Contract,
    }
}

pub fn tx_id(tx: &Transaction) -> Digest {
    crypto::hash(&tx.to_canonical_bytes())
}

impl fmt::Display for Transaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transaction::Setup(t) => write!(
                f,
                "Setup{{admin_pk={}, user_pk={}, time={}}}",
                t.admin_pk, t.user_pk, t.time
            ),
            Transaction::AccReq(t) => write!(
                f,
                "AccReq{{user_pk={}, time={}, resource_id={}, operation={}, request_id={}}}",
                t.user_pk, t.time, t.req_info.resource_id, t.req_info.operation, t.req_info.request_id
            ),
            Transaction::Link(t) => write!(
                f,
                "Link{{request_id={}, nonce_digest={}, time={}, ciphertext_len={}}}",
                t.request_id,
                t.nonce_digest,
                t.time,
                t.ciphertext.len()
            ),
            Transaction::Storage(t) => write!(
                f,
                "Storage{{nonce={}, time={}, user_pk={}}}",
                t.nonce, t.time, t.user_pk
            ),
            Transaction::Verified(t) => write!(
                f,
                "Verified{{time={}, user_bits={}, req_bits={}, request_id={}}}",
                t.time, t.user_bits, t.req_bits, t.request_id
            ),
        }
    }
}

/// A signed, hash-linked batch of transactions.
///
/// Only the genesis block carries `config`; every other block has `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Digest,
    pub time: u64,
    pub transactions: Vec<Transaction>,
    pub validator_pk: PublicKey,
    pub validator_sig: Signature,
    pub config: Option<GenesisConfig>,
}

impl Block {
    fn encode_unsigned(&self, enc: &mut Encoder) {
        enc.u64(self.height)
            .value(&self.prev_hash)
            .u64(self.time)
            .seq(&self.transactions)
            .value(&self.validator_pk)
            .option(self.config.as_ref());
    }

    pub fn signing_payload(&self) -> Vec<u8> {
        payload("dlacb/block", |e| self.encode_unsigned(e))
    }

    pub fn hash(&self) -> Digest {
        crypto::hash(&self.to_canonical_bytes())
    }

    pub fn seal(
        validator: &KeyPair,
        height: u64,
        prev_hash: Digest,
        time: u64,
        transactions: Vec<Transaction>,
    ) -> Self {
        let mut block = Block {
            height,
            prev_hash,
            time,
            transactions,
            validator_pk: validator.public,
            validator_sig: Signature([0; 64]),
            config: None,
        };
        block.validator_sig = validator.sign(&block.signing_payload());
        block
    }

    pub fn verify_signature(&self) -> bool {
        crypto::verify(&self.validator_pk, &self.signing_payload(), &self.validator_sig)
    }
}

impl Canonical for Block {
    fn encode_to(&self, enc: &mut Encoder) {
        self.encode_unsigned(enc);
        enc.value(&self.validator_sig);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let height = dec.u64()?;
        let prev_hash = dec.value()?;
        let time = dec.u64()?;
        let transactions = dec.seq()?;
        let validator_pk = dec.value()?;
        let config = dec.option()?;
        let validator_sig = dec.value()?;
        Ok(Block {
            height,
            prev_hash,
            time,
            transactions,
            validator_pk,
            validator_sig,
            config,
        })
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "Block{{height={}, hash={}, prev_hash={}, time={}, validator_pk={}, txs={}}}",
            self.height,
            self.hash(),
            self.prev_hash,
            self.time,
            self.validator_pk,
            self.transactions.len()
        )?;
        for tx in &self.transactions {
            writeln!(f, "  {tx}")?;
        }
        Ok(())
    }
}
