//! DAG-based BFT consensus (certified and uncertified engines) with a
//! bounded-memory fallback, running on a deterministic simulated network.

pub mod acs;
pub mod adversary;
pub mod dag;
pub mod harness;
pub mod lifefin;
pub mod mysticeti;
pub mod node;
pub mod rbc;
pub mod sailfish;
pub mod simnet;
pub mod wire;
