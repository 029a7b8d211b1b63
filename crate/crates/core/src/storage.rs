//! The storage entity: resources, single-use access links, and redemption.
//!
//! Granted results become links: a random token and nonce, encrypted to the
//! requesting user inside a `Link` transaction. Redeeming a link returns the
//! payload once and emits a `Storage` transaction for the chain.
//!
//! With a data directory, payloads live in `objects/<sha256 hex>` and the
//! index in `resources.idx`, one `id<TAB>digest<TAB>name` line per resource.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::RngCore;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::contracts::{open_request_result, ResultError, SealedResult};
use crate::crypto::{self, Digest, KeyPair, PublicKey};
use crate::ledger::DEFAULT_LINK_LIFETIME;
use crate::types::{
    build_link_tx, build_storage_tx, LinkPayload, LinkToken, Nonce, Operation, RequestId, Transaction,
    OPERATION_COUNT,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StorageError {
    #[error("resource {0} already exists")]
    DuplicateResource(u32),
    #[error("unknown resource {0}")]
    UnknownResource(u32),
    #[error("storage io: {0}")]
    Io(String),
    #[error("corrupt resource index: {0}")]
    Corrupt(String),
}

/// Typed refusal of a redemption.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RedeemError {
    #[error("unknown_token")]
    UnknownToken,
    #[error("wrong_nonce")]
    WrongNonce,
    #[error("expired")]
    Expired,
    #[error("already_redeemed")]
    AlreadyRedeemed,
    #[error("operation_not_permitted")]
    OperationNotPermitted,
}

impl RedeemError {
    pub const ALL: [RedeemError; 5] = [
        RedeemError::UnknownToken,
        RedeemError::WrongNonce,
        RedeemError::Expired,
        RedeemError::AlreadyRedeemed,
        RedeemError::OperationNotPermitted,
    ];
}

impl Canonical for RedeemError {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.u8(Self::ALL.iter().position(|e| e == self).unwrap_or(0) as u8);
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let tag = dec.u8()?;
        Self::ALL
            .get(tag as usize)
            .copied()
            .ok_or(CodecError::InvalidTag { what: "redeem error", tag })
    }
}

/// Why an incoming request result was not turned into a link.
#[derive(Debug, Error)]
pub enum ResultRejection {
    #[error(transparent)]
    Invalid(#[from] ResultError),
    #[error("request {0} already served")]
    AlreadyServed(RequestId),
    #[error("cannot encrypt link: {0}")]
    Encrypt(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceMetadata {
    pub name: String,
    pub digest: Digest,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resource {
    pub resource_id: u32,
    pub payload: Vec<u8>,
    pub metadata: ResourceMetadata,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessLink {
    pub link_token: LinkToken,
    pub nonce: Nonce,
    pub request_id: RequestId,
    pub resource_id: u32,
    pub permitted_ops: [bool; OPERATION_COUNT],
    pub user_pk: PublicKey,
    pub issued_at: u64,
    pub expires_at: u64,
    pub redeemed: bool,
    pub expired: bool,
}

/// Outcome of handling a request result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResultOutcome {
    Link { request_id: RequestId, tx: Transaction },
    Denied { request_id: RequestId },
}

/// Local record of what storage did, for traces and inspection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StorageEvent {
    LinkIssued { request_id: RequestId, resource_id: u32 },
    DenialRecorded { request_id: RequestId },
    ResultRejected { reason: String },
    Redeemed { request_id: RequestId, operation: Operation },
    RedeemRejected { token: LinkToken, error: RedeemError },
    Expired { request_id: RequestId },
}

impl fmt::Display for StorageEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StorageEvent::LinkIssued { request_id, resource_id } => {
                write!(f, "link_issued request_id={request_id} resource_id={resource_id}")
            }
            StorageEvent::DenialRecorded { request_id } => write!(f, "denial_recorded request_id={request_id}"),
            StorageEvent::ResultRejected { reason } => write!(f, "result_rejected reason={reason}"),
            StorageEvent::Redeemed { request_id, operation } => {
                write!(f, "redeemed request_id={request_id} operation={operation}")
            }
            StorageEvent::RedeemRejected { token, error } => {
                write!(f, "redeem_rejected token={token} error={error}")
            }
            StorageEvent::Expired { request_id } => write!(f, "link_expired request_id={request_id}"),
        }
    }
}

pub struct StorageService {
    keypair: KeyPair,
    validators: Vec<PublicKey>,
    link_lifetime: u64,
    resources: BTreeMap<u32, Resource>,
    links: BTreeMap<LinkToken, AccessLink>,
    served: BTreeSet<RequestId>,
    data_dir: Option<PathBuf>,
    rng: ChaCha20Rng,
    events: Vec<StorageEvent>,
}

impl fmt::Debug for StorageService {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StorageService")
            .field("public", &self.keypair.public)
            .field("resources", &self.resources.len())
            .field("links", &self.links.len())
            .finish()
    }
}

impl StorageService {
    /// In-memory storage. `rng` supplies link tokens, nonces and encryption
    /// randomness.
    pub fn new(keypair: KeyPair, validators: Vec<PublicKey>, rng: ChaCha20Rng) -> Self {
        Self {
            keypair,
            validators,
            link_lifetime: DEFAULT_LINK_LIFETIME,
            resources: BTreeMap::new(),
            links: BTreeMap::new(),
            served: BTreeSet::new(),
            data_dir: None,
            rng,
            events: Vec::new(),
        }
    }

    /// File-backed storage; existing resources under `dir` are loaded.
    pub fn open(
        keypair: KeyPair,
        validators: Vec<PublicKey>,
        rng: ChaCha20Rng,
        dir: &Path,
    ) -> Result<Self, StorageError> {
        let io = |e: std::io::Error| StorageError::Io(e.to_string());
        fs::create_dir_all(dir.join("objects")).map_err(io)?;
        let mut service = Self::new(keypair, validators, rng);
        let index = dir.join("resources.idx");
        if index.exists() {
            for line in fs::read_to_string(&index).map_err(io)?.lines() {
                let mut parts = line.splitn(3, '\t');
                let (Some(id), Some(digest), Some(name)) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(StorageError::Corrupt(line.to_string()));
                };
                let id: u32 = id.parse().map_err(|_| StorageError::Corrupt(line.to_string()))?;
                let digest = Digest::from_hex(digest).ok_or_else(|| StorageError::Corrupt(line.to_string()))?;
                let payload = fs::read(dir.join("objects").join(digest.to_hex())).map_err(io)?;
                if crypto::hash(&payload) != digest {
                    return Err(StorageError::Corrupt(format!("object {digest} does not match its digest")));
                }
                service.insert(id, name.to_string(), payload)?;
            }
        }
        service.data_dir = Some(dir.to_path_buf());
        Ok(service)
    }

    pub fn set_link_lifetime(&mut self, seconds: u64) {
        self.link_lifetime = seconds;
    }

    pub fn public_key(&self) -> PublicKey {
        self.keypair.public
    }

    pub fn events(&self) -> &[StorageEvent] {
        &self.events
    }

    pub fn links(&self) -> impl Iterator<Item = &AccessLink> {
        self.links.values()
    }

    fn insert(&mut self, id: u32, name: String, payload: Vec<u8>) -> Result<ResourceMetadata, StorageError> {
        if self.resources.contains_key(&id) {
            return Err(StorageError::DuplicateResource(id));
        }
        let metadata = ResourceMetadata {
            name,
            digest: crypto::hash(&payload),
            size: payload.len() as u64,
        };
        self.resources.insert(
            id,
            Resource {
                resource_id: id,
                payload,
                metadata: metadata.clone(),
            },
        );
        Ok(metadata)
    }

    pub fn put_resource(&mut self, id: u32, name: &str, payload: Vec<u8>) -> Result<ResourceMetadata, StorageError> {
        if name.contains(['\t', '\n']) {
            return Err(StorageError::Corrupt("resource names cannot contain tabs or newlines".into()));
        }
        if let Some(dir) = &self.data_dir {
            if self.resources.contains_key(&id) {
                return Err(StorageError::DuplicateResource(id));
            }
            let io = |e: std::io::Error| StorageError::Io(e.to_string());
            let digest = crypto::hash(&payload);
            fs::write(dir.join("objects").join(digest.to_hex()), &payload).map_err(io)?;
            let mut index = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("resources.idx"))
                .map_err(io)?;
            use std::io::Write;
            writeln!(index, "{id}\t{digest}\t{name}").map_err(io)?;
        }
        self.insert(id, name.to_string(), payload)
    }

    pub fn get_metadata(&self, id: u32) -> Result<&ResourceMetadata, StorageError> {
        self.resources
            .get(&id)
            .map(|r| &r.metadata)
            .ok_or(StorageError::UnknownResource(id))
    }

    /// Verifies and decrypts a result from a validator. A granted result
    /// mints a link permitting only the requested operation; each request id
    /// is served once.
    pub fn handle_request_result(&mut self, sealed: &SealedResult, now: u64) -> Result<ResultOutcome, ResultRejection> {
        let outcome = self.handle_inner(sealed, now);
        match &outcome {
            Ok(ResultOutcome::Link { request_id, .. }) => {
                let resource_id = self.links.values().find(|l| l.request_id == *request_id).map_or(0, |l| l.resource_id);
                self.events.push(StorageEvent::LinkIssued { request_id: *request_id, resource_id });
            }
            Ok(ResultOutcome::Denied { request_id }) => {
                self.events.push(StorageEvent::DenialRecorded { request_id: *request_id })
            }
            Err(e) => self.events.push(StorageEvent::ResultRejected { reason: e.to_string() }),
        }
        outcome
    }

    fn handle_inner(&mut self, sealed: &SealedResult, now: u64) -> Result<ResultOutcome, ResultRejection> {
        let result = open_request_result(sealed, &self.keypair, &self.validators)?;
        if !self.served.insert(result.request_id) {
            return Err(ResultRejection::AlreadyServed(result.request_id));
        }
        if !result.granted {
            return Ok(ResultOutcome::Denied {
                request_id: result.request_id,
            });
        }
        let mut token = [0u8; 16];
        let mut nonce = [0u8; 16];
        self.rng.fill_bytes(&mut token);
        self.rng.fill_bytes(&mut nonce);
        let payload = LinkPayload {
            link_token: LinkToken(token),
            nonce: Nonce(nonce),
            issued_at: now,
        };
        let tx = build_link_tx(&self.keypair, &result.user_pk, result.request_id, &payload, &mut self.rng)
            .map_err(|e| ResultRejection::Encrypt(e.to_string()))?;
        let mut permitted_ops = [false; OPERATION_COUNT];
        permitted_ops[result.operation.index()] = true;
        self.links.insert(
            payload.link_token,
            AccessLink {
                link_token: payload.link_token,
                nonce: payload.nonce,
                request_id: result.request_id,
                resource_id: result.resource_id,
                permitted_ops,
                user_pk: result.user_pk,
                issued_at: now,
                expires_at: now + self.link_lifetime,
                redeemed: false,
                expired: false,
            },
        );
        Ok(ResultOutcome::Link {
            request_id: result.request_id,
            tx,
        })
    }

    /// Bearer redemption: possession of the token and nonce is enough.
    pub fn redeem(
        &mut self,
        token: &LinkToken,
        nonce: &Nonce,
        operation: Operation,
        now: u64,
    ) -> Result<(Vec<u8>, Transaction), RedeemError> {
        let outcome = self.redeem_inner(token, nonce, operation, now);
        match &outcome {
            Ok(_) => {
                let request_id = self.links[token].request_id;
                self.events.push(StorageEvent::Redeemed { request_id, operation });
            }
            Err(error) => self.events.push(StorageEvent::RedeemRejected { token: *token, error: *error }),
        }
        outcome
    }

    fn redeem_inner(
        &mut self,
        token: &LinkToken,
        nonce: &Nonce,
        operation: Operation,
        now: u64,
    ) -> Result<(Vec<u8>, Transaction), RedeemError> {
        let link = self.links.get_mut(token).ok_or(RedeemError::UnknownToken)?;
        if link.nonce != *nonce {
            return Err(RedeemError::WrongNonce);
        }
        if link.redeemed {
            return Err(RedeemError::AlreadyRedeemed);
        }
        if link.expired || now > link.expires_at {
            return Err(RedeemError::Expired);
        }
        if !link.permitted_ops[operation.index()] {
            return Err(RedeemError::OperationNotPermitted);
        }
        let payload = self
            .resources
            .get(&link.resource_id)
            .map(|r| r.payload.clone())
            .ok_or(RedeemError::UnknownToken)?;
        link.redeemed = true;
        let tx = build_storage_tx(&self.keypair, link.nonce, now, link.user_pk);
        Ok((payload, tx))
    }

    /// Marks unredeemed links past their expiry; returns how many changed.
    pub fn expire_links(&mut self, now: u64) -> usize {
        let mut expired = Vec::new();
        for link in self.links.values_mut() {
            if !link.redeemed && !link.expired && link.expires_at < now {
                link.expired = true;
                expired.push(link.request_id);
            }
        }
        let count = expired.len();
        self.events
            .extend(expired.into_iter().map(|request_id| StorageEvent::Expired { request_id }));
        count
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::{encrypt_request_result, RequestResult};
    use crate::crypto::seeded_rng;

    fn kp(seed: u8) -> KeyPair {
        KeyPair::from_seed([seed; 32])
    }

    fn service() -> StorageService {
        let mut s = StorageService::new(kp(2), vec![kp(10).public], seeded_rng(1));
        s.put_resource(7, "seven", b"payload-7".to_vec()).unwrap();
        s
    }

    fn sealed(granted: bool, rid: u8) -> SealedResult {
        let mut access_list = [false; 4];
        access_list[1] = granted;
        let result = RequestResult {
            request_id: RequestId([rid; 16]),
            user_pk: kp(60).public,
            resource_id: 7,
            operation: Operation::Op2,
            access_list,
            granted,
            time: 100,
        };
        encrypt_request_result(&result, &kp(2).public, &kp(10), &mut seeded_rng(5)).unwrap()
    }

    fn issue(s: &mut StorageService, rid: u8) -> LinkPayload {
        match s.handle_request_result(&sealed(true, rid), 100).unwrap() {
            ResultOutcome::Link { tx: Transaction::Link(t), .. } => t.open(&kp(60)).unwrap(),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn metadata_and_duplicates() {
        let mut s = service();
        assert_eq!(s.get_metadata(7).unwrap().digest, crypto::hash(b"payload-7"));
        assert_eq!(s.put_resource(7, "x", vec![]), Err(StorageError::DuplicateResource(7)));
        assert_eq!(s.get_metadata(8), Err(StorageError::UnknownResource(8)));
    }

    #[test]
    fn granted_result_yields_link_then_single_redemption() {
        let mut s = service();
        let link = issue(&mut s, 1);
        let (payload, tx) = s.redeem(&link.link_token, &link.nonce, Operation::Op2, 150).unwrap();
        assert_eq!(payload, b"payload-7");
        assert!(matches!(tx, Transaction::Storage(ref t) if t.nonce == link.nonce && t.user_pk == kp(60).public));
        assert_eq!(
            s.redeem(&link.link_token, &link.nonce, Operation::Op2, 151).unwrap_err(),
            RedeemError::AlreadyRedeemed
        );
    }

    #[test]
    fn denied_and_replayed_results() {
        let mut s = service();
        let denied = sealed(false, 3);
        assert!(matches!(s.handle_request_result(&denied, 100).unwrap(), ResultOutcome::Denied { .. }));
        let granted = sealed(true, 4);
        s.handle_request_result(&granted, 100).unwrap();
        assert!(matches!(
            s.handle_request_result(&granted, 101),
            Err(ResultRejection::AlreadyServed(_))
        ));
    }

    #[test]
    fn forged_results_rejected() {
        let mut s = service();
        let mut forged = sealed(true, 5);
        forged.ciphertext[40] ^= 1;
        assert!(s.handle_request_result(&forged, 100).is_err());
        let outsider = {
            let result = RequestResult {
                request_id: RequestId([6; 16]),
                user_pk: kp(60).public,
                resource_id: 7,
                operation: Operation::Op1,
                access_list: [true; 4],
                granted: true,
                time: 100,
            };
            encrypt_request_result(&result, &kp(2).public, &kp(99), &mut seeded_rng(1)).unwrap()
        };
        assert!(matches!(
            s.handle_request_result(&outsider, 100),
            Err(ResultRejection::Invalid(ResultError::UnknownValidator))
        ));
    }

    #[test]
    fn redeem_rejections() {
        let mut s = service();
        let link = issue(&mut s, 1);
        assert_eq!(
            s.redeem(&LinkToken([0; 16]), &link.nonce, Operation::Op2, 150).unwrap_err(),
            RedeemError::UnknownToken
        );
        assert_eq!(
            s.redeem(&link.link_token, &Nonce([0; 16]), Operation::Op2, 150).unwrap_err(),
            RedeemError::WrongNonce
        );
        assert_eq!(
            s.redeem(&link.link_token, &link.nonce, Operation::Op1, 150).unwrap_err(),
            RedeemError::OperationNotPermitted
        );
        assert_eq!(
            s.redeem(&link.link_token, &link.nonce, Operation::Op2, 100 + DEFAULT_LINK_LIFETIME + 1).unwrap_err(),
            RedeemError::Expired
        );
    }

    #[test]
    fn expire_links_counts_once() {
        let mut s = service();
        assert_eq!(s.expire_links(1_000), 0);
        let a = issue(&mut s, 1);
        let _b = issue(&mut s, 2);
        s.redeem(&a.link_token, &a.nonce, Operation::Op2, 120).unwrap();
        let expires_at = 100 + DEFAULT_LINK_LIFETIME;
        assert_eq!(s.expire_links(expires_at), 0);
        assert_eq!(s.expire_links(expires_at + 1), 1);
        assert_eq!(s.expire_links(expires_at + 2), 0);
    }

    #[test]
    fn file_backed_resources_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = StorageService::open(kp(2), vec![], seeded_rng(1), dir.path()).unwrap();
            s.put_resource(3, "three", b"abc".to_vec()).unwrap();
        }
        let s = StorageService::open(kp(2), vec![], seeded_rng(1), dir.path()).unwrap();
        assert_eq!(s.get_metadata(3).unwrap().digest, crypto::hash(b"abc"));
        assert!(dir.path().join("objects").join(crypto::hash(b"abc").to_hex()).exists());
    }
}
