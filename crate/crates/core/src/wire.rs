//! Everything replicas send each other.

use sha2::Sha256;

use crate::acs::{AbaMessage, AcsMessage, ACS_MSG_OVERHEAD};
use crate::dag::{put_u32, put_u64, NodeId, Round, Signature, VertexPtr, VertexRef};
use crate::lifefin::PostPtr;
use crate::rbc::{RbcKey, RbcMessage};
use crate::simnet::{MsgClass, Traced};

/// RBC instance of a certified DAG vertex.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VertexSlot {
    pub round: Round,
    pub creator: NodeId,
}

impl RbcKey for VertexSlot {
    fn sender(&self) -> NodeId {
        self.creator
    }
}

const SIG_BYTES: u64 = 36;
const REF_BYTES: u64 = 44;
const HEADER_BYTES: u64 = 16;

#[derive(Clone, Debug)]
pub enum Message {
    /// Certified dissemination.
    VertexRbc(RbcMessage<VertexSlot, VertexPtr>),
    /// "My round r+1 vertex does not reference the round-r leader."
    NoVote { round: Round, sig: Signature },
    /// Uncertified (best-effort) dissemination.
    Vertex(VertexPtr),
    SyncRequest {
        want: Vec<VertexRef>,
        /// Ancestors below this round are not wanted.
        floor: Round,
        fallback: bool,
    },
    SyncReply { vertices: Vec<VertexPtr>, fallback: bool },
    Post(PostPtr),
    PostVote { view: u64, creator: NodeId, sig: Signature },
    Acs(AcsMessage<PostPtr>),
}

impl Message {
    pub fn class(&self) -> MsgClass {
        match self {
            Message::VertexRbc(_) | Message::NoVote { .. } | Message::Vertex(_) => MsgClass::Dag,
            Message::SyncRequest { fallback, .. } | Message::SyncReply { fallback, .. } => {
                if *fallback {
                    MsgClass::Fallback
                } else {
                    MsgClass::Dag
                }
            }
            Message::Post(_) | Message::PostVote { .. } | Message::Acs(_) => MsgClass::Fallback,
        }
    }

    /// Bytes on the wire.
    pub fn wire_size(&self) -> u64 {
        HEADER_BYTES
            + match self {
                Message::VertexRbc(RbcMessage::Propose { payload, .. } | RbcMessage::Echo { payload, .. }) => {
                    payload.size() as u64
                }
                Message::VertexRbc(RbcMessage::Ready { .. }) => 12 + 32,
                Message::NoVote { .. } => 8 + SIG_BYTES,
                Message::Vertex(v) => v.size() as u64,
                Message::SyncRequest { want, .. } => 9 + REF_BYTES * want.len() as u64,
                Message::SyncReply { vertices, .. } => 1 + vertices.iter().map(|v| v.size() as u64).sum::<u64>(),
                Message::Post(sb) => sb.size() as u64,
                Message::PostVote { .. } => 12 + SIG_BYTES,
                Message::Acs(AcsMessage::Rbc(RbcMessage::Propose { payload, .. } | RbcMessage::Echo { payload, .. })) => {
                    payload.size() as u64
                }
                Message::Acs(_) => ACS_MSG_OVERHEAD,
            }
    }
}

impl Traced for Message {
    fn trace_kind(&self) -> &'static str {
        match self {
            Message::VertexRbc(RbcMessage::Propose { .. }) => "rbc-propose",
            Message::VertexRbc(RbcMessage::Echo { .. }) => "rbc-echo",
            Message::VertexRbc(RbcMessage::Ready { .. }) => "rbc-ready",
            Message::NoVote { .. } => "no-vote",
            Message::Vertex(_) => "vertex",
            Message::SyncRequest { .. } => "sync-req",
            Message::SyncReply { .. } => "sync-reply",
            Message::Post(_) => "post",
            Message::PostVote { .. } => "post-vote",
            Message::Acs(AcsMessage::Rbc(_)) => "acs-rbc",
            Message::Acs(AcsMessage::Aba { .. }) => "acs-aba",
        }
    }

    fn trace_id(&self, h: &mut Sha256) {
        use sha2::Digest as _;
        match self {
            Message::VertexRbc(m) => {
                let id = m.id();
                put_u64(h, id.round);
                put_u32(h, id.creator.0);
                match m {
                    RbcMessage::Propose { payload, .. } | RbcMessage::Echo { payload, .. } => {
                        h.update(payload.digest().0)
                    }
                    RbcMessage::Ready { digest, .. } => h.update(digest.0),
                }
            }
            Message::NoVote { round, .. } => put_u64(h, *round),
            Message::Vertex(v) => h.update(v.digest().0),
            Message::SyncRequest { want, floor, .. } => {
                put_u64(h, *floor);
                for r in want {
                    h.update(r.digest.0);
                }
            }
            Message::SyncReply { vertices, .. } => {
                for v in vertices {
                    h.update(v.digest().0);
                }
            }
            Message::Post(sb) => h.update(sb.digest().0),
            Message::PostVote { view, creator, .. } => {
                put_u64(h, *view);
                put_u32(h, creator.0);
            }
            Message::Acs(AcsMessage::Rbc(m)) => {
                let id = m.id();
                put_u64(h, id.view);
                put_u32(h, id.slot.0);
            }
            Message::Acs(AcsMessage::Aba { view, slot, msg }) => {
                put_u64(h, *view);
                put_u32(h, slot.0);
                let (tag, round, val) = match msg {
                    AbaMessage::BVal { round, value } => (0u32, *round, *value as u8),
                    AbaMessage::Aux { round, value } => (1, *round, *value as u8),
                    AbaMessage::Conf { round, values } => (2, *round, *values),
                    AbaMessage::Term { value } => (3, 0, *value as u8),
                };
                put_u32(h, tag);
                put_u32(h, round);
                h.update([val]);
            }
        }
    }
}
