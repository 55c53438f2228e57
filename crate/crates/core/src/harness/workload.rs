//! Random client workloads.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::model::{Client, ClientId, Time};

/// Raw laxities are clamped into `[2, 64)` so they round to 2..=32.
pub const LAXITY_MIN: f64 = 2.0;
pub const LAXITY_MAX: f64 = 64.0;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("invalid workload parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LaxityDist {
    Normal {
        mean: f64,
        stddev: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// Each client flips a fair coin between the default normal and the
    /// full uniform range.
    Mixed,
}

impl LaxityDist {
    pub const NORMAL: LaxityDist = LaxityDist::Normal { mean: 16.0, stddev: 10.0 };
    pub const UNIFORM: LaxityDist = LaxityDist::Uniform { lo: LAXITY_MIN, hi: LAXITY_MAX };

    fn validate(&self) -> Result<(), WorkloadError> {
        match *self {
            LaxityDist::Normal { mean, stddev } if !mean.is_finite() || !stddev.is_finite() || stddev < 0.0 => {
                Err(WorkloadError::InvalidParameter(format!("normal({mean}, {stddev})")))
            }
            LaxityDist::Uniform { lo, hi } if !lo.is_finite() || !hi.is_finite() || lo >= hi => {
                Err(WorkloadError::InvalidParameter(format!("uniform({lo}, {hi})")))
            }
            _ => Ok(()),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let raw = match *self {
            LaxityDist::Normal { mean, stddev } => Normal::new(mean, stddev).expect("validated").sample(rng),
            LaxityDist::Uniform { lo, hi } => rng.random_range(lo..hi),
            LaxityDist::Mixed => {
                if rng.random_bool(0.5) {
                    Self::NORMAL.sample(rng)
                } else {
                    Self::UNIFORM.sample(rng)
                }
            }
        };
        clamp_laxity(raw)
    }
}

impl FromStr for LaxityDist {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(Self::NORMAL),
            "uniform" => Ok(Self::UNIFORM),
            "mixed" => Ok(LaxityDist::Mixed),
            other => Err(format!("unknown distribution '{other}' (normal|uniform|mixed)")),
        }
    }
}

impl fmt::Display for LaxityDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LaxityDist::Normal { mean, stddev } => write!(f, "normal({mean},{stddev})"),
            LaxityDist::Uniform { lo, hi } => write!(f, "uniform({lo},{hi})"),
            LaxityDist::Mixed => f.write_str("mixed"),
        }
    }
}

pub fn clamp_laxity(raw: f64) -> f64 {
    if raw.is_nan() || raw < LAXITY_MIN {
        LAXITY_MIN
    } else if raw >= LAXITY_MAX {
        LAXITY_MAX.next_down()
    } else {
        raw
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArrivalModel {
    /// i.i.d. inter-arrival times, uniform on `[0, max_gap]`.
    Uniform { max_gap: f64 },
    /// Two waves: a quarter of the clients arrive in a quick burst and leave;
    /// once they are all gone another quarter ramps the load up quickly and
    /// the remaining half keeps it roughly steady before the final drain.
    Ramp,
}

impl Default for ArrivalModel {
    fn default() -> Self {
        ArrivalModel::Uniform { max_gap: 2.0 }
    }
}

impl FromStr for ArrivalModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(ArrivalModel::default()),
            "ramp" => Ok(ArrivalModel::Ramp),
            other => Err(format!("unknown arrival model '{other}' (uniform|ramp)")),
        }
    }
}

// Inter-arrival bounds of the ramp phases.
const BURST_GAP: f64 = 0.5;
const PLATEAU_GAP: f64 = 1.6;
const WAVE_PAUSE: Time = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkloadSpec {
    pub count: usize,
    pub laxity_dist: LaxityDist,
    pub arrival_model: ArrivalModel,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec { count: 4000, laxity_dist: LaxityDist::NORMAL, arrival_model: ArrivalModel::default(), seed: 0 }
    }
}

impl WorkloadSpec {
    /// Index ranges of the ramp phases: burst, fast ramp-up, plateau.
    fn ramp_phases(&self) -> [std::ops::Range<usize>; 3] {
        let q = self.count / 4;
        [0..q, q..2 * q, 2 * q..self.count]
    }

    /// Arrival-time window of the plateau phase for a ramp workload.
    pub fn plateau_window(&self, clients: &[Client]) -> Option<(Time, Time)> {
        if self.arrival_model != ArrivalModel::Ramp {
            return None;
        }
        let plateau = self.ramp_phases()[2].clone();
        let first = clients.get(plateau.start)?.arrive;
        let last = clients.get(plateau.end.checked_sub(1)?)?.arrive;
        Some((first, last))
    }
}

/// Time a client stays: `U[500, 1000]` for raw laxity up to 30, otherwise
/// `U[1000, 1500]`.
pub fn stay_length<R: Rng>(raw_laxity: f64, rng: &mut R) -> Time {
    if raw_laxity <= 30.0 {
        rng.random_range(500..=1000)
    } else {
        rng.random_range(1000..=1500)
    }
}

pub fn generate(spec: &WorkloadSpec) -> Result<Vec<Client>, WorkloadError> {
    spec.laxity_dist.validate()?;
    if let ArrivalModel::Uniform { max_gap } = spec.arrival_model {
        if !max_gap.is_finite() || max_gap < 0.0 {
            return Err(WorkloadError::InvalidParameter(format!("max_gap {max_gap}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut clients = Vec::with_capacity(spec.count);
    let mut clock = 0.0f64;
    let phases = spec.ramp_phases();

    for i in 0..spec.count {
        let gap = match spec.arrival_model {
            ArrivalModel::Uniform { max_gap } => rng.random_range(0.0..=max_gap),
            ArrivalModel::Ramp if phases[2].contains(&i) => rng.random_range(0.0..=PLATEAU_GAP),
            ArrivalModel::Ramp => {
                if i == phases[1].start && i > 0 {
                    // second wave starts once the burst has drained
                    let drained = clients.iter().map(|c: &Client| c.depart).max().unwrap_or(0);
                    clock = clock.max((drained + WAVE_PAUSE) as f64);
                }
                rng.random_range(0.0..=BURST_GAP)
            }
        };
        if i > 0 {
            clock += gap;
        }
        let raw = spec.laxity_dist.sample(&mut rng);
        let arrive = clock.floor() as Time;
        let depart = arrive + stay_length(raw, &mut rng);
        let client = Client::new(ClientId(i as u64 + 1), arrive, depart, raw)
            .map_err(|e| WorkloadError::InvalidParameter(e.to_string()))?;
        clients.push(client);
    }
    Ok(clients)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn deterministic_for_seed() {
        let spec = WorkloadSpec { count: 300, seed: 9, ..Default::default() };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = WorkloadSpec { seed: 10, ..spec };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn laxities_land_in_range() {
        for dist in [LaxityDist::NORMAL, LaxityDist::UNIFORM, LaxityDist::Mixed] {
            let spec = WorkloadSpec { count: 2000, laxity_dist: dist, seed: 3, ..Default::default() };
            for c in generate(&spec).unwrap() {
                assert!((LAXITY_MIN..LAXITY_MAX).contains(&c.raw_laxity));
                assert!([2, 4, 8, 16, 32].contains(&c.laxity));
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let bad = WorkloadSpec { laxity_dist: LaxityDist::Uniform { lo: 8.0, hi: 8.0 }, ..Default::default() };
        assert!(generate(&bad).is_err());
        let bad = WorkloadSpec { laxity_dist: LaxityDist::Normal { mean: 16.0, stddev: -1.0 }, ..Default::default() };
        assert!(generate(&bad).is_err());
        let bad = WorkloadSpec { arrival_model: ArrivalModel::Uniform { max_gap: -2.0 }, ..Default::default() };
        assert!(generate(&bad).is_err());
    }

    #[test]
    fn ramp_has_two_waves() {
        let spec = WorkloadSpec { arrival_model: ArrivalModel::Ramp, seed: 1, ..Default::default() };
        let clients = generate(&spec).unwrap();
        let burst_end = clients[..1000].iter().map(|c| c.depart).max().unwrap();
        assert!(clients[1000].arrive > burst_end);
        let (from, to) = spec.plateau_window(&clients).unwrap();
        assert!(from < to);
        assert!(clients.windows(2).all(|w| w[0].arrive <= w[1].arrive));
    }

    proptest! {
        #[test]
        fn stay_follows_laxity_rule(raw in 2.0f64..64.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stay = stay_length(raw, &mut rng);
            if raw <= 30.0 {
                prop_assert!((500..=1000).contains(&stay));
            } else {
                prop_assert!((1000..=1500).contains(&stay));
            }
        }
    }
}
