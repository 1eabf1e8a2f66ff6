//! Secure clustered aggregation: orthogonal-matrix masking, a secure ReLU
//! sum, key transformation between matrix families, the key distribution
//! center and the client/server protocol built on top of them.

pub mod error;
pub mod kdc;
pub mod moma;
pub mod protocol;
pub mod rfca;
pub mod rng;
pub mod skt;
pub mod srfc;
pub mod vomca;
pub mod wire;

pub use error::{Error, Result};
