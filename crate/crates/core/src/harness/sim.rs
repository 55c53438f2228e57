//! Event-driven simulation of one policy over a workload.

use std::collections::HashMap;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::model::{
    ceil_load, channel_ratio, event_stream, Client, ClientId, EventKind, ModelError, SystemState, Time,
};
use crate::oracle::{
    audit_round, simulate_slots, verify_schedule, Breach, FindingRow, OracleError, PlacementHistory, RoundMetrics,
    Snapshot, Violation,
};
use crate::policy::{EventCtx, Policy, PolicyConfig, PolicyError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("duplicate client id {0}")]
    DuplicateClient(ClientId),
    #[error("round {round}: {source}")]
    Policy { round: u64, source: PolicyError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("compare needs at least two policies")]
    TooFewConfigs,
    #[error("runs disagree on the load series at round {0}")]
    Mismatch(u64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Replay every placement slot by slot and check the laxity gaps.
    pub slot_verify: bool,
    /// Check the policy's bounds after every event.
    pub audit: bool,
    /// Last slot (exclusive) replayed; defaults to the final departure.
    pub horizon: Option<Time>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunSummary {
    pub policy: String,
    pub rounds: u64,
    pub empty_rounds: u64,
    pub cum_realloc: u64,
    pub max_channels: usize,
    pub max_amortized: f64,
    pub max_ratio: f64,
    pub max_objective: f64,
    pub transmissions: usize,
    pub violations: usize,
    pub boundary_violations: usize,
    pub breaches: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RunResult {
    pub metrics: Vec<RoundMetrics>,
    pub breaches: Vec<Breach>,
    pub violations: Vec<Violation>,
    pub summary: RunSummary,
}

impl RunResult {
    /// Round in which time-step `t` falls: the last round processed at or
    /// before `t`.
    pub fn round_at(&self, t: Time) -> u64 {
        let idx = self.metrics.partition_point(|m| m.time <= t);
        idx.checked_sub(1).map(|i| self.metrics[i].round).unwrap_or(0)
    }

    pub fn violation_rows(&self) -> Vec<FindingRow> {
        self.violations.iter().map(|v| FindingRow::from_violation(v, self.round_at(v.at))).collect()
    }

    pub fn breach_rows(&self) -> Vec<FindingRow> {
        self.breaches.iter().map(FindingRow::from_breach).collect()
    }

    pub fn non_boundary_violations(&self) -> usize {
        self.summary.violations - self.summary.boundary_violations
    }
}

pub fn run(config: &PolicyConfig, clients: &[Client], opts: &RunOptions) -> Result<RunResult, SimError> {
    run_observed(config, clients, opts, |_, _| {})
}

/// Like [`run`], calling `observe` with every round's metrics and the policy
/// state right after the event.
pub fn run_observed<F>(
    config: &PolicyConfig,
    clients: &[Client],
    opts: &RunOptions,
    mut observe: F,
) -> Result<RunResult, SimError>
where
    F: FnMut(&RoundMetrics, &dyn Policy),
{
    let mut by_id: HashMap<ClientId, &Client> = HashMap::with_capacity(clients.len());
    for c in clients {
        if by_id.insert(c.id, c).is_some() {
            return Err(SimError::DuplicateClient(c.id));
        }
    }
    let mut policy = config.build();
    let mut state = SystemState::new();
    let mut history = PlacementHistory::new();
    let mut result = RunResult::default();
    let mut cum = 0u64;

    for event in event_stream(clients) {
        let client = by_id[&event.client];
        state.apply(&event, client.laxity);
        let round = state.round();
        let ctx = EventCtx { round, time: event.time, n: state.n(), load: state.load() };
        let outcome = match event.kind {
            EventKind::Arrival => policy.on_arrival(client, &ctx),
            EventKind::Departure => policy.on_departure(client.id, &ctx),
        }
        .map_err(|source| SimError::Policy { round, source })?;
        cum += outcome.reallocations.len() as u64;

        if opts.slot_verify {
            if event.kind == EventKind::Departure {
                history.close(client.id, event.time);
            }
            for p in &outcome.placements {
                history.open(*p, event.time);
            }
        }

        let channels = policy.channels();
        let ceil_h = ceil_load(ctx.load);
        let amortized = cum as f64 / round as f64;
        let ratio = channel_ratio(channels, ceil_h)?;
        let row = RoundMetrics {
            round,
            time: event.time,
            event: event.kind,
            client: client.id.0,
            n: ctx.n,
            h: ctx.load,
            ceil_h,
            channels,
            cum_realloc: cum,
            amortized,
            ratio,
            objective: amortized + ratio,
        };

        if opts.audit {
            let facts = policy.facts();
            result.breaches.extend(audit_round(&Snapshot {
                round,
                event: event.kind,
                n: ctx.n,
                load: ctx.load,
                channels,
                cum_reallocs: cum,
                laxity_counts: state.laxity_counts(),
                facts: &facts,
                witnesses: &outcome.witnesses,
            }));
        }
        observe(&row, policy.as_ref());
        result.metrics.push(row);
    }

    let mut transmissions = 0;
    if opts.slot_verify {
        let horizon = opts.horizon.unwrap_or_else(|| clients.iter().map(|c| c.depart + 1).max().unwrap_or(0));
        let log = simulate_slots(&history, horizon)?;
        transmissions = log.len();
        result.violations = verify_schedule(&log, clients);
    }

    let m = &result.metrics;
    result.summary = RunSummary {
        policy: config.label(),
        rounds: m.len() as u64,
        empty_rounds: m.iter().filter(|r| r.n == 0).count() as u64,
        cum_realloc: cum,
        max_channels: m.iter().map(|r| r.channels).max().unwrap_or(0),
        max_amortized: m.iter().map(|r| r.amortized).fold(0.0, f64::max),
        max_ratio: m.iter().map(|r| r.ratio).fold(0.0, f64::max),
        max_objective: m.iter().map(|r| r.objective).fold(0.0, f64::max),
        transmissions,
        violations: result.violations.len(),
        boundary_violations: result.violations.iter().filter(|v| v.boundary).count(),
        breaches: result.breaches.len(),
    };
    Ok(result)
}

/// Runs every configuration over the same clients, in parallel.
pub fn compare(configs: &[PolicyConfig], clients: &[Client], opts: &RunOptions) -> Result<Vec<RunResult>, SimError> {
    if configs.len() < 2 {
        return Err(SimError::TooFewConfigs);
    }
    let results: Vec<Result<RunResult, SimError>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|cfg| s.spawn(move || run(cfg, clients, opts))).collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let base = &results[0].metrics;
    for other in &results[1..] {
        if other.metrics.len() != base.len() {
            return Err(SimError::Mismatch(base.len().min(other.metrics.len()) as u64 + 1));
        }
        if let Some((a, _)) = base.iter().zip(&other.metrics).find(|(a, b)| a.n != b.n || a.h != b.h) {
            return Err(SimError::Mismatch(a.round));
        }
    }
    Ok(results)
}

pub fn write_metrics_csv<W: Write>(out: W, metrics: &[RoundMetrics]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_findings_csv<W: Write>(out: W, rows: &[FindingRow]) -> Result<(), SimError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["round", "client", "kind", "gap", "bound", "boundary"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Wide table keyed by round: the shared load columns followed by each
/// policy's own series, prefixed with its label.
pub fn write_compare_csv<W: Write>(out: W, configs: &[PolicyConfig], runs: &[RunResult]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["round", "time", "event", "client", "n", "H", "ceilH"].map(String::from).to_vec();
    for cfg in configs {
        for col in ["channels", "cum_realloc", "amortized", "ratio", "objective"] {
            header.push(format!("{}_{col}", cfg.label()));
        }
    }
    w.write_record(&header)?;
    for (i, m) in runs[0].metrics.iter().enumerate() {
        let mut rec = vec![
            m.round.to_string(),
            m.time.to_string(),
            m.event.to_string(),
            m.client.to_string(),
            m.n.to_string(),
            m.h.to_string(),
            m.ceil_h.to_string(),
        ];
        for run in runs {
            let r = &run.metrics[i];
            rec.extend([
                r.channels.to_string(),
                r.cum_realloc.to_string(),
                r.amortized.to_string(),
                r.ratio.to_string(),
                r.objective.to_string(),
            ]);
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
