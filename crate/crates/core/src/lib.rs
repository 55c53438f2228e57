//! Online windows scheduling with reallocations.
//!
//! Clients arrive and leave over time; each one needs a transmission slot at
//! least once every `w` time-steps (its laxity) on some channel. The crate
//! provides three online policies that trade channel usage against the
//! number of times clients are moved between channels, a slot-level
//! verifier, exact optimum channel counts for power-of-two laxities, and a
//! deterministic simulation harness that records per-round metrics.

pub mod classified;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod policy;
pub mod tree;
pub mod tree_policy;

pub use model::{ChannelId, Client, ClientId, Placement, ReallocationRecord, Time};
pub use policy::{Policy, PolicyConfig};
