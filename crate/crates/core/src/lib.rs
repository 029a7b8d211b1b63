//! Permissioned proof-of-authority ledger for access control.
//!
//! Users request resources with signed transactions. Validators run an
//! authentication contract (is the key registered, is the request fresh and
//! signed) and an authorization contract (a small neural network scores the
//! four operations, then priority rules may override it). Granted requests
//! go to the storage service, which answers with a single-use link encrypted
//! to the user. Every step is logged on chain.
//!
//! Module map:
//!
//! * [`crypto`], [`codec`]: primitives and the canonical byte encoding.
//! * [`types`]: transactions and blocks.
//! * [`ledger`]: chain validation, leader schedule and the derived state.
//! * [`engine`]: the decision model, its training, and priority rules.
//! * [`contracts`]: authentication and authorization.
//! * [`storage`]: resources, access links and redemption.
//! * [`net`]: node state machines, the deterministic simulator and TCP transport.
//! * [`service`]: the request/response API and config files.
//! * [`scenario`]: fixtures and scripted end-to-end scenarios.

macro_rules! byte_newtype {
    ($name:ident, $len:expr) => {
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(s: &str) -> Option<Self> {
                Self::from_slice(&hex::decode(s.trim()).ok()?)
            }

            pub fn from_slice(raw: &[u8]) -> Option<Self> {
                Some(Self(raw.try_into().ok()?))
            }
        }

        impl std::fmt::Debug for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                let hex = self.to_hex();
                write!(f, "{}({})", stringify!($name), &hex[..hex.len().min(12)])
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl $crate::codec::Canonical for $name {
            fn encode_to(&self, enc: &mut $crate::codec::Encoder) {
                enc.raw(&self.0);
            }
            fn decode_from(
                dec: &mut $crate::codec::Decoder<'_>,
            ) -> Result<Self, $crate::codec::CodecError> {
                Ok(Self(dec.array()?))
            }
        }
    };
}

pub mod codec;
pub mod contracts;
pub mod crypto;
pub mod engine;
pub mod ledger;
pub mod net;
pub mod scenario;
pub mod service;
pub mod storage;
pub mod types;
