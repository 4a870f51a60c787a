//! Discrete-event simulator of message dissemination in urban VANETs with
//! obstacle shadowing.
//!
//! The simulator models a Manhattan-style road grid where buildings block
//! 802.11p radio links. Messages are disseminated either over a vehicular
//! cloud reached through bus mobile gateways (useful inside shadowed
//! regions) or by multi-hop V2V/V2I forwarding (useful in clear regions).
//! The hybrid protocol switches between the two per message; three
//! simplified baseline protocols share the same channel and obstacle
//! models for comparison sweeps.

pub mod channel;
pub mod config;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod mobility;
pub mod obstacle;
pub mod output;
pub mod protocols;
pub mod simcore;

pub use config::ScenarioConfig;
pub use error::SimError;
pub use obstacle::{LinkModel, Obstacle, Point, RegionClass};

/// Crate version baked into output headers so run directories are
/// self-describing.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
