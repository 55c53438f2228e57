//! Common interface implemented by every reallocation policy.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::classified::ClassifiedState;
use crate::model::{Client, ClientId, Placement, ReallocationRecord, Time};
use crate::tree::{Forest, TreeError};
use crate::tree_policy::{ThresholdFn, TreeMode, TreePolicy};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("client {0} is not active")]
    UnknownClient(ClientId),
    #[error("client {0} is already active")]
    DuplicateClient(ClientId),
    #[error("laxity {laxity} of client {client} is not a power of two")]
    NotPowerOfTwo { client: ClientId, laxity: u64 },
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// What the harness knows about the event being processed. `n` and `load`
/// already reflect the event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventCtx {
    pub round: u64,
    pub time: Time,
    pub n: usize,
    pub load: f64,
}

/// Allocation bookkeeping the classified policy exposes for auditing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Witness {
    /// A big-channel client moved to a laxity channel.
    Evicted { client: ClientId, n: usize, n_at_allocation: usize },
    /// A laxity-channel client pulled into the big channel.
    Consolidated { client: ClientId, n: usize, n_at_allocation: usize },
    /// Number of big-channel evictions caused by one arrival.
    EvictionBatch { evicted: usize, n: usize },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutcome {
    pub reallocations: Vec<ReallocationRecord>,
    /// New placements of every client whose channel, period or offset changed
    /// during the event (including the arriving client).
    pub placements: Vec<Placement>,
    pub witnesses: Vec<Witness>,
}

/// Policy-specific state summary used by the auditor.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyFacts {
    Preemptive {
        max_trees_per_depth: usize,
    },
    Lazy {
        threshold: ThresholdFn,
        max_trees_per_depth: usize,
    },
    Classified {
        big_channel: bool,
        tau: u64,
        big_members: usize,
        big_min_laxity: Option<u64>,
        max_nonfull_per_laxity: usize,
    },
}

pub trait Policy: Send {
    fn name(&self) -> &'static str;

    fn on_arrival(&mut self, client: &Client, ctx: &EventCtx) -> Result<StepOutcome, PolicyError>;

    fn on_departure(&mut self, client: ClientId, ctx: &EventCtx) -> Result<StepOutcome, PolicyError>;

    /// Channels currently in use.
    fn channels(&self) -> usize;

    fn facts(&self) -> PolicyFacts;

    fn forest(&self) -> Option<&Forest> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyConfig {
    Preemptive,
    Lazy { threshold: ThresholdFn },
    Classified { big_channel: bool, strict_pow2: bool },
}

impl PolicyConfig {
    pub fn build(&self) -> Box<dyn Policy> {
        match *self {
            PolicyConfig::Preemptive => Box::new(TreePolicy::new(TreeMode::Preemptive)),
            PolicyConfig::Lazy { threshold } => Box::new(TreePolicy::new(TreeMode::Lazy(threshold))),
            PolicyConfig::Classified { big_channel, strict_pow2 } => {
                Box::new(ClassifiedState::new(big_channel, strict_pow2))
            }
        }
    }

    pub fn lazy() -> Self {
        PolicyConfig::Lazy { threshold: ThresholdFn::default() }
    }

    pub fn classified() -> Self {
        PolicyConfig::Classified { big_channel: true, strict_pow2: false }
    }

    /// Short label used in CSV headers.
    pub fn label(&self) -> String {
        match self {
            PolicyConfig::Preemptive => "preemptive".into(),
            PolicyConfig::Lazy { threshold: ThresholdFn::Channels } => "lazy".into(),
            PolicyConfig::Lazy { threshold: ThresholdFn::Ratio } => "lazy_ratio".into(),
            PolicyConfig::Classified { big_channel: true, .. } => "classified".into(),
            PolicyConfig::Classified { big_channel: false, .. } => "classified_nobig".into(),
        }
    }
}

impl fmt::Display for PolicyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for PolicyConfig {
    type Err = String;

    /// Accepts the labels produced by [`PolicyConfig::label`].
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "preemptive" => Ok(PolicyConfig::Preemptive),
            "lazy" => Ok(PolicyConfig::Lazy { threshold: ThresholdFn::Channels }),
            "lazy_ratio" => Ok(PolicyConfig::Lazy { threshold: ThresholdFn::Ratio }),
            "classified" => Ok(PolicyConfig::classified()),
            "classified_nobig" => Ok(PolicyConfig::Classified { big_channel: false, strict_pow2: false }),
            other => Err(format!("unknown policy '{other}'")),
        }
    }
}
