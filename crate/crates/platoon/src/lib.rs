//! Joint communication/control simulator for an RSMA-based vehicular
//! platoon: downlink latency minimization for federated-edge-learning model
//! broadcast, receding-horizon platoon control, and the block-coordinate
//! loop tying them together.

pub mod channel;
pub mod convex;
pub mod dynamics;
pub mod error;
pub mod mpc;
pub mod rsma;
pub mod scenario;

pub use error::{Error, Result};
