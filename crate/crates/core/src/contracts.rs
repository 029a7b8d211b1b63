//! The two contracts every validator runs while applying a block.
//!
//! Authentication turns an access request into a `Verified` transaction when
//! the key is registered, the request is fresh and the signature holds.
//! Authorization runs the decision engine on a `Verified` transaction and
//! produces the [`RequestResult`] that goes to storage, encrypted to the
//! storage key and signed by the sealing validator.

use std::fmt;

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{self, CryptoError, KeyPair, PublicKey, Signature};
use crate::engine::{binary_repr, AccessDecision, DecisionEngine, PriorityRule};
use crate::ledger::{is_fresh, Memory, ProtocolParams, UserRecord};
use crate::types::{AccessRequestTx, Operation, RequestId, VerifiedTx, OPERATION_COUNT};

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AuthFailure {
    #[error("unregistered")]
    Unregistered,
    #[error("stale")]
    Stale,
    #[error("bad_signature")]
    BadSignature,
    /// The user index or resource id does not fit the model's input widths.
    #[error("out_of_range")]
    OutOfRange,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuthzFailure {
    #[error("stale")]
    Stale,
    #[error("unknown request")]
    UnknownRequest,
    #[error("malformed verified transaction")]
    Malformed,
    #[error("decision engine: {0}")]
    Engine(String),
}

#[derive(Debug, Error)]
pub enum ResultError {
    #[error("result signed by a key that is not a validator")]
    UnknownValidator,
    #[error("validator signature does not verify")]
    BadSignature,
    #[error("cannot decrypt result")]
    Undecryptable,
    #[error("decrypted result is malformed: {0}")]
    Malformed(CodecError),
}

/// What authorization decided for one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestResult {
    pub request_id: RequestId,
    pub user_pk: PublicKey,
    pub resource_id: u32,
    pub operation: Operation,
    pub access_list: [bool; OPERATION_COUNT],
    pub granted: bool,
    pub time: u64,
}

impl Canonical for RequestResult {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.value(&self.request_id)
            .value(&self.user_pk)
            .u32(self.resource_id)
            .value(&self.operation)
            .value(&self.access_list)
            .bool(self.granted)
            .u64(self.time);
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let r = Self {
            request_id: dec.value()?,
            user_pk: dec.value()?,
            resource_id: dec.u32()?,
            operation: dec.value()?,
            access_list: dec.value()?,
            granted: dec.bool()?,
            time: dec.u64()?,
        };
        if r.granted != r.access_list[r.operation.index()] {
            return Err(CodecError::InvalidValue("granted flag"));
        }
        Ok(r)
    }
}

impl fmt::Display for RequestResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "RequestResult{{request_id={}, user_pk={}, resource_id={}, operation={}, granted={}, time={}}}",
            self.request_id, self.user_pk, self.resource_id, self.operation, self.granted, self.time
        )
    }
}

/// A [`RequestResult`] encrypted to storage and signed by a validator over
/// the ciphertext.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedResult {
    pub validator_pk: PublicKey,
    pub ciphertext: Vec<u8>,
    pub validator_sig: Signature,
}

impl SealedResult {
    fn signing_payload(validator_pk: &PublicKey, ciphertext: &[u8]) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("dlacb/result").value(validator_pk).bytes(ciphertext);
        enc.into_bytes()
    }
}

impl Canonical for SealedResult {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.value(&self.validator_pk)
            .bytes(&self.ciphertext)
            .value(&self.validator_sig);
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            validator_pk: dec.value()?,
            ciphertext: dec.bytes()?,
            validator_sig: dec.value()?,
        })
    }
}

/// Registered, fresh, and signed, checked in that order.
pub fn check_access_request(
    tx: &AccessRequestTx,
    memory: &Memory,
    params: &ProtocolParams,
    now: u64,
) -> Result<UserRecord, AuthFailure> {
    let record = memory.user(&tx.user_pk).ok_or(AuthFailure::Unregistered)?;
    if !is_fresh(tx.time, now, params.freshness_window) {
        return Err(AuthFailure::Stale);
    }
    if !crypto::verify(&tx.user_pk, &tx.signing_payload(), &tx.user_sig) {
        return Err(AuthFailure::BadSignature);
    }
    Ok(*record)
}

pub fn access_verification_check(
    tx: &AccessRequestTx,
    memory: &Memory,
    params: &ProtocolParams,
    now: u64,
) -> bool {
    check_access_request(tx, memory, params, now).is_ok()
}

pub fn authentication_contract(
    tx: &AccessRequestTx,
    memory: &Memory,
    params: &ProtocolParams,
    now: u64,
) -> Result<VerifiedTx, AuthFailure> {
    let record = check_access_request(tx, memory, params, now)?;
    let user_bits =
        binary_repr(record.user_index, params.user_width).map_err(|_| AuthFailure::OutOfRange)?;
    let req_bits = binary_repr(u64::from(tx.req_info.resource_id), params.resource_width)
        .map_err(|_| AuthFailure::OutOfRange)?;
    Ok(VerifiedTx {
        time: tx.time,
        user_bits,
        req_bits,
        request_id: tx.req_info.request_id,
    })
}

/// Runs the engine for a verified request. The operation and user key come
/// from the request recorded in `memory` under `verified.request_id`.
pub fn authorization_contract(
    verified: &VerifiedTx,
    memory: &Memory,
    engine: &DecisionEngine,
    rules: &[PriorityRule],
    params: &ProtocolParams,
    now: u64,
) -> Result<(RequestResult, AccessDecision), AuthzFailure> {
    if !is_fresh(verified.time, now, params.freshness_window) {
        return Err(AuthzFailure::Stale);
    }
    let request = memory
        .request(&verified.request_id)
        .ok_or(AuthzFailure::UnknownRequest)?;
    let user_index = verified.user_bits.to_u64().ok_or(AuthzFailure::Malformed)?;
    let resource_id = verified.req_bits.to_u64().ok_or(AuthzFailure::Malformed)?;
    if memory.user_key(user_index) != Some(&request.user_pk)
        || resource_id != u64::from(request.resource_id)
    {
        return Err(AuthzFailure::Malformed);
    }
    let decision = engine
        .decide(rules, user_index, resource_id)
        .map_err(|e| AuthzFailure::Engine(e.to_string()))?;
    let result = RequestResult {
        request_id: verified.request_id,
        user_pk: request.user_pk,
        resource_id: request.resource_id,
        operation: request.operation,
        access_list: decision.access_list,
        granted: decision.access_list[request.operation.index()],
        time: now,
    };
    Ok((result, decision))
}

pub fn encrypt_request_result<R: RngCore + CryptoRng>(
    result: &RequestResult,
    storage_pk: &PublicKey,
    validator: &KeyPair,
    rng: &mut R,
) -> Result<SealedResult, CryptoError> {
    let ciphertext = crypto::encrypt(storage_pk, &result.to_canonical_bytes(), rng)?;
    let validator_sig = validator.sign(&SealedResult::signing_payload(&validator.public, &ciphertext));
    Ok(SealedResult {
        validator_pk: validator.public,
        ciphertext,
        validator_sig,
    })
}

/// Checks the validator signature, then decrypts with the storage key.
pub fn open_request_result(
    sealed: &SealedResult,
    storage: &KeyPair,
    validators: &[PublicKey],
) -> Result<RequestResult, ResultError> {
    if !validators.contains(&sealed.validator_pk) {
        return Err(ResultError::UnknownValidator);
    }
    let payload = SealedResult::signing_payload(&sealed.validator_pk, &sealed.ciphertext);
    if !crypto::verify(&sealed.validator_pk, &payload, &sealed.validator_sig) {
        return Err(ResultError::BadSignature);
    }
    let plain = crypto::decrypt(&storage.secret, &sealed.ciphertext)
        .map_err(|_| ResultError::Undecryptable)?;
    RequestResult::from_canonical_bytes(&plain).map_err(ResultError::Malformed)
}
