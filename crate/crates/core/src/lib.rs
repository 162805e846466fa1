//! Federated syndrome retrieval at desk scale.
//!
//! Silos jointly train an embedding ensemble under non-zero-sum masked
//! aggregation ([`secagg`]), then hand masked latent vectors to an
//! aggregator which computes cosine distances from a masked Gram matrix
//! ([`flake`]) and answers Top-k unique-syndrome queries ([`inference`]).
//! The [`net`] module carries the wire protocol and both transports, and
//! [`orchestrate`] drives the experiment grid.

pub mod api;
pub mod attack;
pub mod data;
pub mod fixed;
pub mod flake;
pub mod inference;
pub mod model;
pub mod net;
pub mod nn;
pub mod orchestrate;
pub mod param;
pub mod rng;
pub mod secagg;

pub use fixed::{decode_fixed, encode_fixed, RingVec};
pub use param::{Layer, ParamVec};
pub use rng::{derive_rng, SeededRng};
