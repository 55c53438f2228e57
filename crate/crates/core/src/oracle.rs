//! Ground truth: slot-level replay and verification of schedules, exact
//! optimum channel counts for power-of-two laxities, per-round metrics and
//! bound auditing.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::model::{ceil_load, hyperceiling, ChannelId, Client, ClientId, EventKind, Placement, Time};
use crate::policy::{PolicyFacts, Witness};
use crate::tree_policy::ThresholdFn;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("laxity {0} is not a power of two")]
    NotPowerOfTwo(u64),
    #[error("instance of {0} items is too large for exhaustive search (max 8)")]
    TooLarge(usize),
    #[error("laxity {0} outside {{1, 2, 4, 8}}")]
    LaxityOutOfRange(u64),
    #[error("{channel} double-booked at t={time} by {first} and {second}")]
    DoubleBooking { channel: ChannelId, time: Time, first: ClientId, second: ClientId },
}

// ---------------------------------------------------------------------------
// Optimum channel counts

/// First-fit-decreasing packing of sizes `1/w` into unit bins. Sizes are
/// handled in integer units of `1/max(w)`, so there is no rounding.
pub fn opt_ffd(laxities: &[u64]) -> Result<usize, OracleError> {
    if let Some(&bad) = laxities.iter().find(|w| !w.is_power_of_two()) {
        return Err(OracleError::NotPowerOfTwo(bad));
    }
    let Some(&unit) = laxities.iter().max() else {
        return Ok(0);
    };
    let mut sizes: Vec<u64> = laxities.iter().map(|&w| unit / w).collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    let mut free: Vec<u64> = Vec::new();
    for size in sizes {
        match free.iter_mut().find(|f| **f >= size) {
            Some(f) => *f -= size,
            None => free.push(unit - size),
        }
    }
    Ok(free.len())
}

/// Same packing as [`opt_ffd`] from per-laxity counts. With divisible sizes
/// first-fit-decreasing leaves only the last bin partially filled, so the
/// count is the total size rounded up.
pub fn opt_ffd_by_counts(counts: &BTreeMap<u64, usize>) -> Result<usize, OracleError> {
    if let Some(&bad) = counts.keys().find(|w| !w.is_power_of_two()) {
        return Err(OracleError::NotPowerOfTwo(bad));
    }
    let Some(&unit) = counts.keys().next_back() else {
        return Ok(0);
    };
    let total: u64 = counts.iter().map(|(&w, &k)| (unit / w) * k as u64).sum();
    Ok(total.div_ceil(unit) as usize)
}

/// Minimum bin count over all set partitions of at most 8 items with
/// laxities in {1, 2, 4, 8}.
pub fn exhaustive_opt(laxities: &[u64]) -> Result<usize, OracleError> {
    if laxities.len() > 8 {
        return Err(OracleError::TooLarge(laxities.len()));
    }
    if let Some(&bad) = laxities.iter().find(|w| ![1, 2, 4, 8].contains(*w)) {
        return Err(OracleError::LaxityOutOfRange(bad));
    }
    let sizes: Vec<u64> = laxities.iter().map(|&w| 8 / w).collect();

    // Restricted-growth enumeration: item i joins an existing block or opens one.
    fn go(i: usize, sizes: &[u64], blocks: &mut Vec<u64>, best: &mut usize) {
        if i == sizes.len() {
            *best = (*best).min(blocks.len());
            return;
        }
        for b in 0..blocks.len() {
            if blocks[b] + sizes[i] <= 8 {
                blocks[b] += sizes[i];
                go(i + 1, sizes, blocks, best);
                blocks[b] -= sizes[i];
            }
        }
        blocks.push(sizes[i]);
        go(i + 1, sizes, blocks, best);
        blocks.pop();
    }

    let mut best = sizes.len();
    go(0, &sizes, &mut Vec::new(), &mut best);
    Ok(best)
}

// ---------------------------------------------------------------------------
// Slot replay

/// One placement of a client, active on `[from, to)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacementSpan {
    pub placement: Placement,
    pub from: Time,
    pub to: Option<Time>,
}

/// Every placement each client ever held, in order.
#[derive(Debug, Clone, Default)]
pub struct PlacementHistory {
    spans: BTreeMap<ClientId, Vec<PlacementSpan>>,
}

impl PlacementHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts a new placement at `at`, ending the client's previous one.
    pub fn open(&mut self, placement: Placement, at: Time) {
        let spans = self.spans.entry(placement.client).or_default();
        if let Some(last) = spans.last_mut() {
            if last.to.is_none() {
                last.to = Some(at);
            }
        }
        spans.push(PlacementSpan { placement, from: at, to: None });
    }

    pub fn close(&mut self, client: ClientId, at: Time) {
        if let Some(last) = self.spans.get_mut(&client).and_then(|s| s.last_mut()) {
            if last.to.is_none() {
                last.to = Some(at);
            }
        }
    }

    pub fn spans(&self, client: ClientId) -> &[PlacementSpan] {
        self.spans.get(&client).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn clients(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.spans.keys().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transmission {
    pub channel: ChannelId,
    pub time: Time,
    /// Index of the client's placement that produced this transmission.
    pub span: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientLog {
    pub transmissions: Vec<Transmission>,
    pub spans: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TransmissionLog {
    pub clients: BTreeMap<ClientId, ClientLog>,
}

impl TransmissionLog {
    pub fn times(&self, client: ClientId) -> Vec<Time> {
        self.clients.get(&client).map(|l| l.transmissions.iter().map(|t| t.time).collect()).unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.clients.values().map(|l| l.transmissions.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Replays every placement up to `horizon` (exclusive). Two clients firing
/// on the same channel in the same slot is a policy bug.
pub fn simulate_slots(history: &PlacementHistory, horizon: Time) -> Result<TransmissionLog, OracleError> {
    let mut owner: HashMap<(ChannelId, Time), ClientId> = HashMap::new();
    let mut log = TransmissionLog::default();
    for (&client, spans) in &history.spans {
        let entry = log.clients.entry(client).or_default();
        entry.spans = spans.len();
        for (idx, span) in spans.iter().enumerate() {
            let end = span.to.unwrap_or(horizon).min(horizon);
            let p = span.placement;
            let mut t = p.next_fire(span.from);
            while t < end {
                if let Some(&first) = owner.get(&(p.channel, t)) {
                    return Err(OracleError::DoubleBooking { channel: p.channel, time: t, first, second: client });
                }
                owner.insert((p.channel, t), client);
                entry.transmissions.push(Transmission { channel: p.channel, time: t, span: idx });
                t += p.period;
            }
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViolationKind {
    /// First transmission later than `w` after arrival.
    ArrivalGap,
    /// Last transmission more than `w` before departure.
    DepartureGap,
    /// Two consecutive transmissions more than `w` apart.
    InterGap,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::ArrivalGap => "arrival_gap",
            ViolationKind::DepartureGap => "departure_gap",
            ViolationKind::InterGap => "inter_gap",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub client: ClientId,
    pub kind: ViolationKind,
    /// Time-step at which the gap ends.
    pub at: Time,
    pub gap: u64,
    pub bound: u64,
    /// The gap spans two different placements of the client.
    pub boundary: bool,
}

/// Checks every client's transmissions against its laxity.
pub fn verify_schedule(log: &TransmissionLog, clients: &[Client]) -> Vec<Violation> {
    let empty = ClientLog::default();
    let mut out = Vec::new();
    for c in clients {
        let w = c.laxity;
        let entry = log.clients.get(&c.id).unwrap_or(&empty);
        let tx = &entry.transmissions;
        let span = c.depart - c.arrive;
        let violation = |kind, at, gap, boundary| Violation { client: c.id, kind, at, gap, bound: w, boundary };

        let Some(first) = tx.first() else {
            if span > w {
                out.push(violation(ViolationKind::ArrivalGap, c.depart, span, entry.spans > 1));
            }
            continue;
        };
        if first.time - c.arrive > w {
            out.push(violation(ViolationKind::ArrivalGap, first.time, first.time - c.arrive, first.span != 0));
        }
        for pair in tx.windows(2) {
            let gap = pair[1].time - pair[0].time;
            if gap > w {
                out.push(violation(ViolationKind::InterGap, pair[1].time, gap, pair[0].span != pair[1].span));
            }
        }
        let last = tx.last().expect("non-empty");
        if span >= w && c.depart.saturating_sub(last.time) > w {
            let boundary = last.span + 1 != entry.spans;
            out.push(violation(ViolationKind::DepartureGap, c.depart, c.depart - last.time, boundary));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Metrics and audits

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub time: Time,
    pub event: EventKind,
    pub client: u64,
    pub n: usize,
    #[serde(rename = "H")]
    pub h: f64,
    #[serde(rename = "ceilH")]
    pub ceil_h: u64,
    pub channels: usize,
    pub cum_realloc: u64,
    pub amortized: f64,
    pub ratio: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BreachKind {
    ReallocationBound,
    ChannelBound,
    ObjectiveBound,
    PreemptiveChannels,
    PreemptiveInvariant,
    LazyThreshold,
    PoolInvariant,
    BigMembership,
    Tau,
    EvictionCap,
    Doubling,
    Halving,
}

impl fmt::Display for BreachKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BreachKind::ReallocationBound => "realloc_bound",
            BreachKind::ChannelBound => "channel_bound",
            BreachKind::ObjectiveBound => "objective_bound",
            BreachKind::PreemptiveChannels => "preemptive_channels",
            BreachKind::PreemptiveInvariant => "preemptive_invariant",
            BreachKind::LazyThreshold => "lazy_threshold",
            BreachKind::PoolInvariant => "pool_invariant",
            BreachKind::BigMembership => "big_membership",
            BreachKind::Tau => "tau",
            BreachKind::EvictionCap => "eviction_cap",
            BreachKind::Doubling => "doubling",
            BreachKind::Halving => "halving",
        })
    }
}

/// A violated bound. `value` and `bound` are stated in the bound's own
/// units (for the objective, both sides scaled by `2 r ceil(H)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Breach {
    pub round: u64,
    pub client: Option<ClientId>,
    pub kind: BreachKind,
    pub value: i128,
    pub bound: i128,
}

/// State after one event, as seen by the auditor.
#[derive(Debug, Clone, Copy)]
pub struct Snapshot<'a> {
    pub round: u64,
    pub event: EventKind,
    pub n: usize,
    pub load: f64,
    pub channels: usize,
    pub cum_reallocs: u64,
    pub laxity_counts: &'a BTreeMap<u64, usize>,
    pub facts: &'a PolicyFacts,
    pub witnesses: &'a [Witness],
}

/// `log2(min(w_max, hyperceiling(n)) / w_min)`; negative when the
/// hyperceiling is below the smallest laxity.
pub fn log_term(counts: &BTreeMap<u64, usize>, n: usize) -> Option<i64> {
    let w_min = *counts.keys().next()?;
    let w_max = *counts.keys().next_back()?;
    let hc = hyperceiling(n as u64).ok()?;
    let top = w_max.min(hc);
    Some(top.trailing_zeros() as i64 - w_min.trailing_zeros() as i64)
}

/// Right-hand side of the channel bound: `opt + 1 + log term`.
pub fn channel_bound(counts: &BTreeMap<u64, usize>, n: usize) -> Option<i64> {
    let opt = opt_ffd_by_counts(counts).ok()? as i64;
    Some(opt + 1 + log_term(counts, n)?)
}

/// Objective bound with both sides multiplied by `2 r ceil(H)`:
/// `(2 ceil(H) cum + 2 r channels, 5 r ceil(H) + 2 r (1 + L))`.
pub fn objective_sides(round: u64, cum: u64, channels: usize, ceil_h: u64, log: i64) -> (i128, i128) {
    let (r, c) = (round as i128, ceil_h as i128);
    (2 * c * cum as i128 + 2 * r * channels as i128, 5 * r * c + 2 * r * (1 + log as i128))
}

pub fn audit_round(s: &Snapshot<'_>) -> Vec<Breach> {
    let mut out = Vec::new();
    let breach = |kind, client, value: i128, bound: i128| Breach { round: s.round, client, kind, value, bound };
    let channels = s.channels as i128;
    match *s.facts {
        PolicyFacts::Preemptive { max_trees_per_depth } => {
            if s.n > 0 {
                let cap = (2.0 * s.load).ceil() as i128;
                if channels >= cap {
                    out.push(breach(BreachKind::PreemptiveChannels, None, channels, cap));
                }
            }
            if max_trees_per_depth > 1 {
                out.push(breach(BreachKind::PreemptiveInvariant, None, max_trees_per_depth as i128, 1));
            }
        }
        PolicyFacts::Lazy { threshold, .. } => {
            if s.event == EventKind::Departure && threshold.exceeded(s.channels, s.load) {
                let cap = match threshold {
                    ThresholdFn::Channels => threshold.channel_cap(s.load) as i128,
                    ThresholdFn::Ratio => ceil_load(s.load) as i128,
                };
                out.push(breach(BreachKind::LazyThreshold, None, channels, cap));
            }
        }
        PolicyFacts::Classified { big_channel, tau, big_min_laxity, max_nonfull_per_laxity, .. } => {
            if max_nonfull_per_laxity > 1 {
                out.push(breach(BreachKind::PoolInvariant, None, max_nonfull_per_laxity as i128, 1));
            }
            if !big_channel {
                return out;
            }
            let (r, cum) = (s.round as i128, s.cum_reallocs as i128);
            if 2 * cum > 3 * r {
                out.push(breach(BreachKind::ReallocationBound, None, 2 * cum, 3 * r));
            }
            if s.n > 0 {
                let want = 2 * hyperceiling(s.n as u64).expect("n > 0") as i128;
                if tau as i128 != want {
                    out.push(breach(BreachKind::Tau, None, tau as i128, want));
                }
                if let Some(w) = big_min_laxity {
                    if 2 * w < tau {
                        out.push(breach(BreachKind::BigMembership, None, w as i128, tau as i128 / 2));
                    }
                }
                if let (Some(bound), Some(log)) = (channel_bound(s.laxity_counts, s.n), log_term(s.laxity_counts, s.n))
                {
                    if channels > bound as i128 {
                        out.push(breach(BreachKind::ChannelBound, None, channels, bound as i128));
                    }
                    let (lhs, rhs) = objective_sides(s.round, s.cum_reallocs, s.channels, ceil_load(s.load), log);
                    if lhs > rhs {
                        out.push(breach(BreachKind::ObjectiveBound, None, lhs, rhs));
                    }
                }
            }
            for w in s.witnesses {
                match *w {
                    Witness::EvictionBatch { evicted, n } if 2 * evicted > n => {
                        out.push(breach(BreachKind::EvictionCap, None, evicted as i128, n as i128 / 2));
                    }
                    Witness::Evicted { client, n, n_at_allocation } if n < 2 * n_at_allocation => {
                        out.push(breach(BreachKind::Doubling, Some(client), n as i128, 2 * n_at_allocation as i128));
                    }
                    Witness::Consolidated { client, n, n_at_allocation } if 2 * n > n_at_allocation => {
                        out.push(breach(BreachKind::Halving, Some(client), 2 * n as i128, n_at_allocation as i128));
                    }
                    _ => {}
                }
            }
        }
    }
    out
}

/// Row layout shared by the violation and breach CSV exports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FindingRow {
    pub round: u64,
    pub client: String,
    pub kind: String,
    pub gap: String,
    pub bound: String,
    pub boundary: bool,
}

impl FindingRow {
    pub fn from_violation(v: &Violation, round: u64) -> Self {
        FindingRow {
            round,
            client: v.client.0.to_string(),
            kind: v.kind.to_string(),
            gap: v.gap.to_string(),
            bound: v.bound.to_string(),
            boundary: v.boundary,
        }
    }

    pub fn from_breach(b: &Breach) -> Self {
        FindingRow {
            round: b.round,
            client: b.client.map(|c| c.0.to_string()).unwrap_or_default(),
            kind: b.kind.to_string(),
            gap: b.value.to_string(),
            bound: b.bound.to_string(),
            boundary: false,
        }
    }
}
