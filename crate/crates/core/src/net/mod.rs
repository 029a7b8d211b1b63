//! Nodes and the transports that connect them.
//!
//! Validators, storage and users are message-driven state machines
//! ([`node`]). The same machines run inside the deterministic simulator
//! ([`sim`]) and behind TCP listeners ([`tcp`]).
//!
//! Node ids are positions in a directory: validators first, in genesis
//! order, then storage, then any user or adversary nodes.

pub mod node;
pub mod sim;
pub mod tcp;

use std::collections::BTreeMap;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::contracts::SealedResult;
use crate::crypto::Digest;
use crate::ledger::Reject;
use crate::storage::RedeemError;
use crate::types::{Block, LinkToken, Nonce, Operation, Transaction};

pub use node::{NodeEvent, StorageNode, UserNode, ValidatorNode};
pub use sim::{
    AdversaryKind, ConvergenceReport, Latency, NetError, NetworkConfig, NodeTip, Partition, TraceEvent, World,
};

pub type NodeId = usize;

/// Largest number of blocks sent in one [`Message::Blocks`] reply.
pub const MAX_BLOCKS_PER_REPLY: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Tx(Transaction),
    /// The transaction is on the receiver's chain.
    Included(Digest),
    TxRejected { id: Digest, reason: Reject },
    Block(Block),
    GetBlock(Digest),
    GetBlocks { from_height: u64 },
    Blocks(Vec<Block>),
    Status { height: u64, tip: Digest },
    Result(SealedResult),
    Redeem { token: LinkToken, nonce: Nonce, operation: Operation },
    RedeemReply { token: LinkToken, outcome: Result<Vec<u8>, RedeemError> },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Tx(_) => "tx",
            Message::Included(_) => "included",
            Message::TxRejected { .. } => "tx_rejected",
            Message::Block(_) => "block",
            Message::GetBlock(_) => "get_block",
            Message::GetBlocks { .. } => "get_blocks",
            Message::Blocks(_) => "blocks",
            Message::Status { .. } => "status",
            Message::Result(_) => "result",
            Message::Redeem { .. } => "redeem",
            Message::RedeemReply { .. } => "redeem_reply",
        }
    }
}

impl Canonical for Message {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            Message::Tx(tx) => enc.u8(0).value(tx),
            Message::Included(id) => enc.u8(1).value(id),
            Message::TxRejected { id, reason } => enc.u8(2).value(id).value(reason),
            Message::Block(b) => enc.u8(3).value(b),
            Message::GetBlock(h) => enc.u8(4).value(h),
            Message::GetBlocks { from_height } => enc.u8(5).u64(*from_height),
            Message::Blocks(bs) => enc.u8(6).seq(bs),
            Message::Status { height, tip } => enc.u8(7).u64(*height).value(tip),
            Message::Result(r) => enc.u8(8).value(r),
            Message::Redeem { token, nonce, operation } => enc.u8(9).value(token).value(nonce).value(operation),
            Message::RedeemReply { token, outcome } => {
                enc.u8(10).value(token);
                match outcome {
                    Ok(payload) => enc.u8(0).bytes(payload),
                    Err(e) => enc.u8(1).value(e),
                }
            }
        };
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(match dec.u8()? {
            0 => Message::Tx(dec.value()?),
            1 => Message::Included(dec.value()?),
            2 => Message::TxRejected { id: dec.value()?, reason: dec.value()? },
            3 => Message::Block(dec.value()?),
            4 => Message::GetBlock(dec.value()?),
            5 => Message::GetBlocks { from_height: dec.u64()? },
            6 => Message::Blocks(dec.seq()?),
            7 => Message::Status { height: dec.u64()?, tip: dec.value()? },
            8 => Message::Result(dec.value()?),
            9 => Message::Redeem { token: dec.value()?, nonce: dec.value()?, operation: dec.value()? },
            10 => {
                let token = dec.value()?;
                let outcome = match dec.u8()? {
                    0 => Ok(dec.bytes()?),
                    1 => Err(dec.value()?),
                    tag => return Err(CodecError::InvalidTag { what: "redeem outcome", tag }),
                };
                Message::RedeemReply { token, outcome }
            }
            tag => return Err(CodecError::InvalidTag { what: "message", tag }),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dest {
    Node(NodeId),
    /// Every validator except the sender.
    Validators,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outgoing {
    pub to: Dest,
    pub msg: Message,
}

impl Outgoing {
    pub fn to(node: NodeId, msg: Message) -> Self {
        Self { to: Dest::Node(node), msg }
    }

    pub fn validators(msg: Message) -> Self {
        Self { to: Dest::Validators, msg }
    }
}

/// Transactions a node has submitted and not yet seen confirmed. Every
/// entry is re-sent to all validators on each retransmission round.
#[derive(Debug, Clone, Default)]
pub struct Outbox {
    pending: BTreeMap<Digest, Transaction>,
}

impl Outbox {
    pub fn push(&mut self, tx: Transaction) -> Outgoing {
        self.pending.insert(tx.id(), tx.clone());
        Outgoing::validators(Message::Tx(tx))
    }

    pub fn settle(&mut self, id: &Digest) -> bool {
        self.pending.remove(id).is_some()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn resend(&self) -> Vec<Outgoing> {
        self.pending
            .values()
            .map(|tx| Outgoing::validators(Message::Tx(tx.clone())))
            .collect()
    }
}
