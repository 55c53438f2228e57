//! Domain types shared by every policy, plus the arithmetic primitives used
//! throughout: hyperceiling, tree depth of a laxity, system load and the
//! combined objective.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

/// Discrete time-step of the global clock.
pub type Time = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct ClientId(pub u64);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct ChannelId(pub u32);

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ch{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("hyperceiling is undefined for 0")]
    ZeroHyperceiling,
    #[error("laxity must be at least 1, got {0}")]
    InvalidLaxity(f64),
    #[error("laxity {0} is not a power of two")]
    NotPowerOfTwo(u64),
    #[error("client {id}: departure {depart} precedes arrival {arrive}")]
    DepartsBeforeArrival { id: ClientId, arrive: Time, depart: Time },
    #[error("{channels} channels in use with zero load")]
    ChannelsWithoutLoad { channels: usize },
    #[error("round index must be at least 1")]
    ZeroRound,
}

/// Smallest power of two that is not smaller than `n`.
pub fn hyperceiling(n: u64) -> Result<u64, ModelError> {
    if n == 0 {
        return Err(ModelError::ZeroHyperceiling);
    }
    Ok(n.next_power_of_two())
}

/// The `v` with `2^v <= w < 2^(v+1)`.
pub fn depth_of(w: u64) -> u32 {
    assert!(w >= 1, "depth_of requires w >= 1");
    63 - w.leading_zeros()
}

/// Rounds a raw (real) laxity down to a power of two.
pub fn round_down_pow2(raw: f64) -> Result<u64, ModelError> {
    if !raw.is_finite() || raw < 1.0 || raw >= 2f64.powi(63) {
        return Err(ModelError::InvalidLaxity(raw));
    }
    let whole = raw.floor() as u64;
    Ok(1u64 << depth_of(whole))
}

/// One schedulable item. `laxity` is always a power of two; the value the
/// client asked for is kept in `raw_laxity`.
#[derive(Debug, Clone, PartialEq)]
pub struct Client {
    pub id: ClientId,
    pub arrive: Time,
    pub depart: Time,
    pub raw_laxity: f64,
    pub laxity: u64,
}

impl Client {
    pub fn new(id: ClientId, arrive: Time, depart: Time, raw_laxity: f64) -> Result<Self, ModelError> {
        if depart < arrive {
            return Err(ModelError::DepartsBeforeArrival { id, arrive, depart });
        }
        let laxity = round_down_pow2(raw_laxity)?;
        Ok(Client { id, arrive, depart, raw_laxity, laxity })
    }

    /// Like [`Client::new`] but refuses laxities that are not already powers
    /// of two.
    pub fn new_strict(id: ClientId, arrive: Time, depart: Time, laxity: u64) -> Result<Self, ModelError> {
        if !laxity.is_power_of_two() {
            return Err(ModelError::NotPowerOfTwo(laxity));
        }
        Client::new(id, arrive, depart, laxity as f64)
    }

    pub fn depth(&self) -> u32 {
        depth_of(self.laxity)
    }

    pub fn load(&self) -> f64 {
        1.0 / self.laxity as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Departure,
    Arrival,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Arrival => "arrival",
            EventKind::Departure => "departure",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub time: Time,
    pub kind: EventKind,
    pub client: ClientId,
}

impl Event {
    // Departures sort before arrivals at equal times. A client whose arrival
    // and departure coincide still needs its arrival first, so zero-span
    // departures go to the back of their time-step.
    fn sort_key(&self, zero_span: bool) -> (Time, u8, ClientId) {
        let rank = match (self.kind, zero_span) {
            (EventKind::Departure, false) => 0,
            (EventKind::Arrival, _) => 1,
            (EventKind::Departure, true) => 2,
        };
        (self.time, rank, self.client)
    }
}

/// Builds the ordered event stream for a set of clients: one arrival and one
/// departure per client, departures first at equal time-steps, then by id.
pub fn event_stream(clients: &[Client]) -> Vec<Event> {
    let mut keyed: Vec<((Time, u8, ClientId), Event)> = Vec::with_capacity(clients.len() * 2);
    for c in clients {
        let zero_span = c.arrive == c.depart;
        let arrival = Event { time: c.arrive, kind: EventKind::Arrival, client: c.id };
        let departure = Event { time: c.depart, kind: EventKind::Departure, client: c.id };
        keyed.push((arrival.sort_key(zero_span), arrival));
        keyed.push((departure.sort_key(zero_span), departure));
    }
    keyed.sort_by_key(|k| k.0);
    keyed.into_iter().map(|(_, e)| e).collect()
}

/// `H = sum of 1/w` over the given laxities.
pub fn system_load<I: IntoIterator<Item = u64>>(laxities: I) -> f64 {
    laxities.into_iter().map(|w| 1.0 / w as f64).sum()
}

/// `ceil(H)` as an integer.
pub fn ceil_load(h: f64) -> u64 {
    h.ceil() as u64
}

/// The per-round objective `reall_r / r + channels / ceil(H_r)`. An empty
/// system contributes a channel ratio of exactly 1.
pub fn objective(cum_reallocs: u64, round: u64, channels: usize, h: f64) -> Result<f64, ModelError> {
    if round == 0 {
        return Err(ModelError::ZeroRound);
    }
    let ceil_h = ceil_load(h);
    let ratio = channel_ratio(channels, ceil_h)?;
    Ok(cum_reallocs as f64 / round as f64 + ratio)
}

pub fn channel_ratio(channels: usize, ceil_h: u64) -> Result<f64, ModelError> {
    match ceil_h {
        0 if channels > 0 => Err(ModelError::ChannelsWithoutLoad { channels }),
        0 => Ok(1.0),
        c => Ok(channels as f64 / c as f64),
    }
}

/// Assignment of one client to one channel: it transmits whenever
/// `t mod period == offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Placement {
    pub client: ClientId,
    pub channel: ChannelId,
    pub period: u64,
    pub offset: u64,
}

impl Placement {
    pub fn fires_at(&self, t: Time) -> bool {
        t % self.period == self.offset
    }

    /// First firing time `>= t`.
    pub fn next_fire(&self, t: Time) -> Time {
        t + (self.offset + self.period - t % self.period) % self.period
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReallocationRecord {
    pub round: u64,
    pub client: ClientId,
    pub from: ChannelId,
    pub to: ChannelId,
}

/// Set of active clients and the round counter.
#[derive(Debug, Default, Clone)]
pub struct SystemState {
    active: BTreeMap<ClientId, u64>,
    by_laxity: BTreeMap<u64, usize>,
    round: u64,
    load: f64,
}

impl SystemState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn apply(&mut self, event: &Event, laxity: u64) {
        self.round += 1;
        match event.kind {
            EventKind::Arrival => {
                if self.active.insert(event.client, laxity).is_none() {
                    self.load += 1.0 / laxity as f64;
                    *self.by_laxity.entry(laxity).or_insert(0) += 1;
                }
            }
            EventKind::Departure => {
                if let Some(w) = self.active.remove(&event.client) {
                    self.load -= 1.0 / w as f64;
                    if let Some(count) = self.by_laxity.get_mut(&w) {
                        *count -= 1;
                        if *count == 0 {
                            self.by_laxity.remove(&w);
                        }
                    }
                }
            }
        }
        if self.active.is_empty() {
            self.load = 0.0;
        }
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn n(&self) -> usize {
        self.active.len()
    }

    pub fn load(&self) -> f64 {
        self.load
    }

    pub fn is_active(&self, id: ClientId) -> bool {
        self.active.contains_key(&id)
    }

    pub fn laxities(&self) -> impl Iterator<Item = u64> + '_ {
        self.active.values().copied()
    }

    /// Active client count per laxity.
    pub fn laxity_counts(&self) -> &BTreeMap<u64, usize> {
        &self.by_laxity
    }

    pub fn min_laxity(&self) -> Option<u64> {
        self.by_laxity.keys().next().copied()
    }

    pub fn max_laxity(&self) -> Option<u64> {
        self.by_laxity.keys().next_back().copied()
    }
}
