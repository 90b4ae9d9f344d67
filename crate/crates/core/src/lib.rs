//! Decision support for utility tunnel boring machine operators.
//!
//! The engine learns, per ground class, a mapping from the operator's control
//! parameters and the machine's context parameters to an optimality score,
//! then recommends control adjustments along the network's input gradient.
//! Every recommendation carries a credibility score derived from how well the
//! model performed on similar historic situations.

pub mod advisor;
pub mod credibility;
pub mod dataset;
pub mod domain;
pub mod error;
pub mod ingest;
pub mod mlp;
pub mod neighbors;
pub mod optimality;
pub mod pipeline;
pub mod sim;
pub mod stats;
pub mod validate;

pub use domain::{GroundClass, RawRecord, SensorRecord, N_COP, N_CXP, N_FEATURES};
pub use error::{Error, Result};
pub use optimality::OptimalityConfig;
