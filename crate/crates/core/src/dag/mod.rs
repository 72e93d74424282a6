//! Vertices, the per-node DAG store, and the signature/certificate layer
//! shared by both engines.

mod committee;
mod crypto;
mod store;
mod vertex;

pub use committee::{Committee, CommitteeError, NodeId, Round};
pub use crypto::{form_certificate, CertError, KeyRegistry, QuorumCertificate, SchemeTag, Signature, SigningKey};
pub use store::{DagStore, InsertError, Inserted, MissingHistory};
pub use vertex::{
    put_bytes, put_u32, put_u64, ByteSink, Digest, LenCounter, NoVoteCertificate, Vertex, VertexPtr, VertexRef,
};
