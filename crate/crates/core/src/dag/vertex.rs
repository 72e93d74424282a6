use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use super::committee::{NodeId, Round};
use super::crypto::QuorumCertificate;

/// 32-byte collision-resistant digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(domain: &str, f: impl FnOnce(&mut Sha256)) -> Digest {
        let mut h = Sha256::new();
        put_bytes(&mut h, domain.as_bytes());
        f(&mut h);
        Digest(h.finalize().into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &self.to_hex()[..12])
    }
}

/// Anything canonical encodings can be written into: a buffer, a hasher,
/// or a length counter.
pub trait ByteSink {
    fn put(&mut self, bytes: &[u8]);
}

impl ByteSink for Vec<u8> {
    fn put(&mut self, bytes: &[u8]) {
        self.extend_from_slice(bytes);
    }
}

impl ByteSink for Sha256 {
    fn put(&mut self, bytes: &[u8]) {
        self.update(bytes);
    }
}

/// Counts bytes without storing them.
#[derive(Default, Debug, Clone, Copy)]
pub struct LenCounter(pub usize);

impl ByteSink for LenCounter {
    fn put(&mut self, bytes: &[u8]) {
        self.0 += bytes.len();
    }
}

pub fn put_u64(sink: &mut impl ByteSink, v: u64) {
    sink.put(&v.to_le_bytes());
}

pub fn put_u32(sink: &mut impl ByteSink, v: u32) {
    sink.put(&v.to_le_bytes());
}

/// Length-prefixed byte string.
pub fn put_bytes(sink: &mut impl ByteSink, b: &[u8]) {
    put_u64(sink, b.len() as u64);
    sink.put(b);
}

/// Pointer to a vertex: `(round, creator, digest)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VertexRef {
    pub round: Round,
    pub creator: NodeId,
    pub digest: Digest,
}

impl VertexRef {
    pub fn encode(&self, sink: &mut impl ByteSink) {
        put_u64(sink, self.round);
        put_u32(sink, self.creator.0);
        sink.put(&self.digest.0);
    }
}

impl fmt::Debug for VertexRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v({},{})#{}", self.round, self.creator, self.digest)
    }
}

/// 2f+1 signed statements that the signers' next-round vertices omit the
/// leader vertex of `round`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoVoteCertificate {
    pub round: Round,
    pub cert: QuorumCertificate,
}

impl NoVoteCertificate {
    /// The message every no-vote for `round` signs.
    pub fn message(round: Round) -> Digest {
        Digest::of("no-vote", |h| put_u64(h, round))
    }
}

/// One DAG vertex. Immutable once built; digest and encoded size are cached.
#[derive(Clone, PartialEq, Eq)]
pub struct Vertex {
    round: Round,
    creator: NodeId,
    payload: Vec<u8>,
    references: Vec<VertexRef>,
    aux: Option<NoVoteCertificate>,
    digest: Digest,
    size: usize,
}

impl Vertex {
    /// References are sorted and deduplicated so the encoding is canonical.
    pub fn new(
        round: Round,
        creator: NodeId,
        payload: Vec<u8>,
        mut references: Vec<VertexRef>,
        aux: Option<NoVoteCertificate>,
    ) -> Self {
        references.sort();
        references.dedup();
        let mut v = Vertex {
            round,
            creator,
            payload,
            references,
            aux,
            digest: Digest::default(),
            size: 0,
        };
        let mut h = Sha256::new();
        put_bytes(&mut h, b"vertex");
        v.encode(&mut h);
        v.digest = Digest(h.finalize().into());
        let mut len = LenCounter::default();
        v.encode(&mut len);
        v.size = len.0;
        v
    }

    pub fn genesis(creator: NodeId) -> Self {
        Vertex::new(1, creator, Vec::new(), Vec::new(), None)
    }

    /// Canonical little-endian, length-prefixed encoding: round, creator,
    /// payload, sorted references, aux.
    pub fn encode(&self, sink: &mut impl ByteSink) {
        put_u64(sink, self.round);
        put_u32(sink, self.creator.0);
        put_bytes(sink, &self.payload);
        put_u64(sink, self.references.len() as u64);
        for r in &self.references {
            r.encode(sink);
        }
        match &self.aux {
            None => sink.put(&[0]),
            Some(nvc) => {
                sink.put(&[1]);
                put_u64(sink, nvc.round);
                nvc.cert.encode(sink);
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.size);
        self.encode(&mut buf);
        buf
    }

    pub fn round(&self) -> Round {
        self.round
    }

    pub fn creator(&self) -> NodeId {
        self.creator
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn references(&self) -> &[VertexRef] {
        &self.references
    }

    pub fn aux(&self) -> Option<&NoVoteCertificate> {
        self.aux.as_ref()
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    /// Serialized length in bytes; the unit of every memory and BPS metric.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn reference(&self) -> VertexRef {
        VertexRef {
            round: self.round,
            creator: self.creator,
            digest: self.digest,
        }
    }

    pub fn references_digest(&self, d: &Digest) -> bool {
        self.references.iter().any(|r| r.digest == *d)
    }

    /// True when every reference points at the immediately preceding round.
    pub fn is_regular(&self) -> bool {
        self.references.iter().all(|r| r.round + 1 == self.round)
    }
}

impl fmt::Debug for Vertex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vertex")
            .field("round", &self.round)
            .field("creator", &self.creator)
            .field("payload_len", &self.payload.len())
            .field("references", &self.references.len())
            .field("nvc", &self.aux.is_some())
            .field("digest", &self.digest)
            .finish()
    }
}

pub type VertexPtr = Arc<Vertex>;
