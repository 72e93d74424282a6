//! Deterministic stand-in for a signature scheme.
//!
//! A signature is `H(secret_i || message)`; the registry can recompute every
//! node's secret and so verifies without trusting the signer. Each node is
//! handed only its own [`SigningKey`], which is what keeps a Byzantine
//! strategy from forging a correct node's signature.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::committee::{Committee, NodeId};
use super::vertex::{put_u32, put_u64, ByteSink, Digest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeTag {
    KeyedSha256,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub signer: NodeId,
    pub message: Digest,
    pub tag: Digest,
}

impl std::fmt::Debug for Signature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "sig({} on {})", self.signer, self.message)
    }
}

#[derive(Clone, Debug)]
pub struct SigningKey {
    node: NodeId,
    secret: Digest,
}

impl SigningKey {
    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn sign(&self, message: Digest) -> Signature {
        Signature {
            signer: self.node,
            message,
            tag: tag(&self.secret, &message),
        }
    }
}

fn tag(secret: &Digest, message: &Digest) -> Digest {
    Digest::of("sig", |h| {
        h.put(&secret.0);
        h.put(&message.0);
    })
}

/// Public-key infrastructure of one simulated deployment.
#[derive(Clone, Debug)]
pub struct KeyRegistry {
    seed: u64,
    committee: Committee,
}

impl KeyRegistry {
    pub fn new(seed: u64, committee: Committee) -> Self {
        Self { seed, committee }
    }

    pub fn committee(&self) -> Committee {
        self.committee
    }

    fn secret(&self, node: NodeId) -> Digest {
        Digest::of("secret", |h| {
            put_u64(h, self.seed);
            put_u32(h, node.0);
        })
    }

    /// Issue the key for `node`. The harness calls this once per node.
    pub fn signing_key(&self, node: NodeId) -> SigningKey {
        SigningKey {
            node,
            secret: self.secret(node),
        }
    }

    pub fn verify(&self, sig: &Signature) -> bool {
        self.committee.contains(sig.signer) && tag(&self.secret(sig.signer), &sig.message) == sig.tag
    }

    pub fn verify_certificate(&self, cert: &QuorumCertificate) -> Result<(), CertError> {
        check_signers(self, cert.message, &cert.signatures).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CertError {
    #[error("{got} distinct signers, quorum is {need}")]
    TooFewSigners { got: usize, need: usize },
    #[error("{0} signed twice")]
    DuplicateSigner(NodeId),
    #[error("signatures cover different messages")]
    DigestMismatch,
    #[error("signature by {0} does not verify")]
    InvalidSignature(NodeId),
}

/// Quorum of signatures over a single message.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuorumCertificate {
    pub message: Digest,
    pub scheme: SchemeTag,
    /// Sorted by signer.
    pub signatures: Vec<Signature>,
}

impl QuorumCertificate {
    pub fn signers(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.signatures.iter().map(|s| s.signer)
    }

    pub fn encode(&self, sink: &mut impl ByteSink) {
        sink.put(&self.message.0);
        put_u64(sink, self.signatures.len() as u64);
        for s in &self.signatures {
            put_u32(sink, s.signer.0);
            sink.put(&s.tag.0);
        }
    }

    pub fn encoded_len(&self) -> usize {
        32 + 8 + self.signatures.len() * 36
    }
}

fn check_signers(
    registry: &KeyRegistry,
    message: Digest,
    sigs: &[Signature],
) -> Result<BTreeSet<NodeId>, CertError> {
    let mut seen = BTreeSet::new();
    for s in sigs {
        if s.message != message {
            return Err(CertError::DigestMismatch);
        }
        if !seen.insert(s.signer) {
            return Err(CertError::DuplicateSigner(s.signer));
        }
        if !registry.verify(s) {
            return Err(CertError::InvalidSignature(s.signer));
        }
    }
    let need = registry.committee.quorum();
    if seen.len() < need {
        return Err(CertError::TooFewSigners {
            got: seen.len(),
            need,
        });
    }
    Ok(seen)
}

/// Aggregate signatures into a certificate.
pub fn form_certificate(
    registry: &KeyRegistry,
    sigs: &[Signature],
) -> Result<QuorumCertificate, CertError> {
    let Some(first) = sigs.first() else {
        return Err(CertError::TooFewSigners {
            got: 0,
            need: registry.committee.quorum(),
        });
    };
    check_signers(registry, first.message, sigs)?;
    let mut signatures = sigs.to_vec();
    signatures.sort_by_key(|s| s.signer);
    Ok(QuorumCertificate {
        message: first.message,
        scheme: SchemeTag::KeyedSha256,
        signatures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(f: usize) -> (KeyRegistry, Vec<SigningKey>) {
        let c = Committee::new(3 * f + 1, f).unwrap();
        let reg = KeyRegistry::new(7, c);
        let keys = c.nodes().map(|n| reg.signing_key(n)).collect();
        (reg, keys)
    }

    #[test]
    fn three_of_four_certify() {
        let (reg, keys) = setup(1);
        let m = Digest([9; 32]);
        let sigs: Vec<_> = keys[..3].iter().map(|k| k.sign(m)).collect();
        let cert = form_certificate(&reg, &sigs).unwrap();
        assert_eq!(cert.signers().count(), 3);
        assert!(reg.verify_certificate(&cert).is_ok());
    }

    #[test]
    fn two_of_four_is_too_few() {
        let (reg, keys) = setup(1);
        let m = Digest([9; 32]);
        let sigs: Vec<_> = keys[..2].iter().map(|k| k.sign(m)).collect();
        assert_eq!(
            form_certificate(&reg, &sigs),
            Err(CertError::TooFewSigners { got: 2, need: 3 })
        );
    }

    #[test]
    fn duplicate_signer_rejected() {
        let (reg, keys) = setup(1);
        let m = Digest([9; 32]);
        let sigs = vec![keys[0].sign(m), keys[1].sign(m), keys[1].sign(m)];
        assert_eq!(
            form_certificate(&reg, &sigs),
            Err(CertError::DuplicateSigner(NodeId(1)))
        );
    }

    #[test]
    fn mixed_messages_rejected() {
        let (reg, keys) = setup(1);
        let sigs = vec![
            keys[0].sign(Digest([1; 32])),
            keys[1].sign(Digest([1; 32])),
            keys[2].sign(Digest([2; 32])),
        ];
        assert_eq!(form_certificate(&reg, &sigs), Err(CertError::DigestMismatch));
    }

    #[test]
    fn forged_tag_rejected() {
        let (reg, keys) = setup(1);
        let m = Digest([9; 32]);
        let mut forged = keys[0].sign(m);
        forged.signer = NodeId(3); // claims to be someone else
        assert!(!reg.verify(&forged));
        let sigs = vec![keys[1].sign(m), keys[2].sign(m), forged];
        assert_eq!(
            form_certificate(&reg, &sigs),
            Err(CertError::InvalidSignature(NodeId(3)))
        );
    }

    // Every subset of signers at f=1: certificate iff >= 3 distinct signers.
    #[test]
    fn exhaustive_subsets_at_f1() {
        let (reg, keys) = setup(1);
        let m = Digest([5; 32]);
        for mask in 0u32..16 {
            let sigs: Vec<_> = (0..4)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| keys[i].sign(m))
                .collect();
            let ok = form_certificate(&reg, &sigs).is_ok();
            assert_eq!(ok, mask.count_ones() >= 3, "mask {mask:04b}");
        }
    }
}
