use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::Digest as _;
use thiserror::Error;

use crate::dag::{put_u32, put_u64, Digest, KeyRegistry, NodeId, QuorumCertificate, VertexPtr};
use crate::rbc::RbcPayload;

/// Proof-of-stuck: where a node stopped in the DAG, for one fallback view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PostBlock {
    pub view: u64,
    pub vertex: VertexPtr,
    pub creator: NodeId,
    pub cert: Option<QuorumCertificate>,
}

pub type PostPtr = Arc<PostBlock>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum PostInvalid {
    #[error("fallback view mismatch")]
    ViewMismatch,
    #[error("second PoST from this creator in this view")]
    Duplicate,
    #[error("wrapped vertex is older than the creator's latest")]
    StaleVertex,
    #[error("wrapped vertex was not created by the PoST creator")]
    WrongCreator,
}

impl PostBlock {
    /// What voters sign: view, creator and the wrapped vertex.
    pub fn signing_digest(view: u64, creator: NodeId, vertex: Digest) -> Digest {
        Digest::of("post", |h| {
            put_u64(h, view);
            put_u32(h, creator.0);
            h.update(vertex.0);
        })
    }

    pub fn message(&self) -> Digest {
        Self::signing_digest(self.view, self.creator, self.vertex.digest())
    }

    /// Identity including the certificate.
    pub fn digest(&self) -> Digest {
        Digest::of("post-block", |h| {
            h.update(self.message().0);
            match &self.cert {
                None => h.update([0u8]),
                Some(c) => {
                    h.update([1u8]);
                    c.encode(h);
                }
            }
        })
    }

    /// Serialized size: view, creator, vertex, certificate.
    pub fn size(&self) -> usize {
        8 + 4 + self.vertex.size() + 1 + self.cert.as_ref().map_or(0, |c| c.encoded_len())
    }

    /// Certificate present, over this block, from a quorum.
    pub fn has_valid_cert(&self, registry: &KeyRegistry) -> bool {
        match &self.cert {
            Some(c) => c.message == self.message() && registry.verify_certificate(c).is_ok(),
            None => false,
        }
    }
}

impl RbcPayload for PostPtr {
    fn payload_digest(&self) -> Digest {
        self.digest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::{form_certificate, Committee, Vertex};

    #[test]
    fn certificate_binds_view_and_vertex() {
        let c = Committee::new(4, 1).unwrap();
        let reg = KeyRegistry::new(1, c);
        let v = Arc::new(Vertex::genesis(NodeId(2)));
        let mut sb = PostBlock {
            view: 0,
            vertex: v,
            creator: NodeId(2),
            cert: None,
        };
        assert!(!sb.has_valid_cert(&reg));
        let sigs: Vec<_> = (0..3).map(|i| reg.signing_key(NodeId(i)).sign(sb.message())).collect();
        sb.cert = Some(form_certificate(&reg, &sigs).unwrap());
        assert!(sb.has_valid_cert(&reg));
        let mut other_view = sb.clone();
        other_view.view = 5;
        assert!(!other_view.has_valid_cert(&reg), "forged cert rejected");
    }
}
