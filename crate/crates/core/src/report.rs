//! Episode accounting, structured report output and policy comparison.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RapidError, Result};
use crate::scenario::PhaseKind;
use crate::trigger::DispatchCause;

/// Aggregate over chunk cycles.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: u64,
    pub mean: f64,
    pub std: f64,
    pub p50: f64,
    pub p99: f64,
    pub total: f64,
}

impl LatencySummary {
    /// Batch summary of `samples` (population std, nearest-rank
    /// percentiles).
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return LatencySummary::default();
        }
        let n = samples.len() as f64;
        let total: f64 = samples.iter().sum();
        let mean = total / n;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        LatencySummary {
            count: samples.len() as u64,
            mean,
            std: var.sqrt(),
            p50: percentile(&sorted, 50.0),
            p99: percentile(&sorted, 99.0),
            total,
        }
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Latency charged to one chunk cycle (one inference request).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CycleLatency {
    pub edge_ms: f64,
    pub cloud_ms: f64,
    /// Routing plus any preemption overhead.
    pub overhead_ms: f64,
}

impl CycleLatency {
    pub fn total_ms(&self) -> f64 {
        self.edge_ms + self.cloud_ms + self.overhead_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TickAction {
    Executed,
    Stall,
    Idle,
}

/// Everything that happened at one control tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub tick: u64,
    pub time_ms: f64,
    pub phase: PhaseKind,
    pub trigger: bool,
    pub cause: Option<DispatchCause>,
    /// Entropy-triggered or anomaly-triggered dispatch that preempts queued
    /// rows.
    pub offload: bool,
    pub cloud_request: bool,
    pub latency: Option<CycleLatency>,
    pub timeout: bool,
    pub delivered: bool,
    pub dropped_response: bool,
    /// Rows discarded by a chunk delivered this tick.
    pub preempted_rows: u64,
    pub enqueued_rows: u64,
    pub action: TickAction,
    pub exec_seq: Option<u64>,
    pub exec_row: Option<u64>,
    pub queue_len: u64,
}

/// Flat trace row written to the delimited-text trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub tick: u64,
    pub time_ms: f64,
    pub phase: String,
    pub trigger: bool,
    pub dispatch: bool,
    pub cause: String,
    pub offload: bool,
    pub edge_ms: f64,
    pub cloud_ms: f64,
    pub overhead_ms: f64,
    pub total_ms: f64,
    pub delivered: bool,
    pub preempted_rows: u64,
    pub enqueued_rows: u64,
    pub action: String,
    pub exec_seq: Option<u64>,
    pub exec_row: Option<u64>,
    pub queue_len: u64,
}

fn label<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_owned))
        .unwrap_or_default()
}

impl From<&StepRecord> for TraceRow {
    fn from(s: &StepRecord) -> Self {
        let lat = s.latency.unwrap_or_default();
        TraceRow {
            tick: s.tick,
            time_ms: s.time_ms,
            phase: label(&s.phase),
            trigger: s.trigger,
            dispatch: s.cause.is_some(),
            cause: s.cause.map(|c| label(&c)).unwrap_or_default(),
            offload: s.offload,
            edge_ms: lat.edge_ms,
            cloud_ms: lat.cloud_ms,
            overhead_ms: lat.overhead_ms,
            total_ms: lat.total_ms(),
            delivered: s.delivered,
            preempted_rows: s.preempted_rows,
            enqueued_rows: s.enqueued_rows,
            action: label(&s.action),
            exec_seq: s.exec_seq,
            exec_row: s.exec_row,
            queue_len: s.queue_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub policy: String,
    pub scenario_id: String,
    pub seed: u64,
    pub noise_level: f64,
    /// Control ticks.
    pub ticks: u64,
    /// Latency statistics are taken across chunk cycles of this episode.
    pub cycles: u64,
    pub cloud_latency_ms: LatencySummary,
    pub edge_latency_ms: LatencySummary,
    pub overhead_latency_ms: LatencySummary,
    pub total_latency_ms: LatencySummary,
    pub cloud_load_gb: f64,
    pub edge_load_gb: f64,
    pub total_load_gb: f64,
    pub dispatch_count: u64,
    pub trigger_count: u64,
    pub depletion_refills: u64,
    pub offloads: u64,
    pub cloud_requests: u64,
    pub preempted_rows: u64,
    pub stall_count: u64,
    pub enqueued: u64,
    pub executed: u64,
    pub remaining: u64,
    pub timeouts: u64,
    pub dropped_responses: u64,
    #[serde(skip)]
    pub trace: Option<Vec<StepRecord>>,
}

/// Streaming accumulator for one episode.
#[derive(Debug, Clone)]
pub struct EpisodeRecorder {
    report: EpisodeReport,
    last_tick: Option<u64>,
    edge: Vec<f64>,
    cloud: Vec<f64>,
    overhead: Vec<f64>,
    total: Vec<f64>,
}

impl EpisodeRecorder {
    pub fn new(
        policy: &str,
        scenario_id: &str,
        seed: u64,
        noise_level: f64,
        cloud_load_gb: f64,
        edge_load_gb: f64,
        trace: bool,
    ) -> Self {
        EpisodeRecorder {
            report: EpisodeReport {
                policy: policy.to_owned(),
                scenario_id: scenario_id.to_owned(),
                seed,
                noise_level,
                cloud_load_gb,
                edge_load_gb,
                total_load_gb: cloud_load_gb + edge_load_gb,
                trace: trace.then(Vec::new),
                ..Default::default()
            },
            last_tick: None,
            edge: Vec::new(),
            cloud: Vec::new(),
            overhead: Vec::new(),
            total: Vec::new(),
        }
    }

    pub fn record_step(&mut self, s: &StepRecord) -> Result<()> {
        if let Some(last) = self.last_tick {
            if s.tick <= last {
                return Err(RapidError::Accounting(format!(
                    "tick {} recorded after tick {last}",
                    s.tick
                )));
            }
        }
        self.last_tick = Some(s.tick);
        let r = &mut self.report;
        r.ticks += 1;
        r.trigger_count += s.trigger as u64;
        match s.cause {
            Some(DispatchCause::Depletion) => {
                r.dispatch_count += 1;
                r.depletion_refills += 1;
            }
            Some(DispatchCause::Trigger) => r.dispatch_count += 1,
            None => {}
        }
        r.offloads += s.offload as u64;
        r.cloud_requests += s.cloud_request as u64;
        r.timeouts += s.timeout as u64;
        r.dropped_responses += s.dropped_response as u64;
        r.preempted_rows += s.preempted_rows;
        r.enqueued += s.enqueued_rows;
        match s.action {
            TickAction::Executed => r.executed += 1,
            TickAction::Stall => r.stall_count += 1,
            TickAction::Idle => {}
        }
        r.remaining = s.queue_len;
        if let Some(l) = s.latency {
            r.cycles += 1;
            self.edge.push(l.edge_ms);
            self.cloud.push(l.cloud_ms);
            self.overhead.push(l.overhead_ms);
            self.total.push(l.total_ms());
        }
        if let Some(t) = r.trace.as_mut() {
            t.push(*s);
        }
        Ok(())
    }

    pub fn finish(self) -> EpisodeReport {
        let mut r = self.report;
        let side = |v: &[f64]| {
            let nz: Vec<f64> = v.iter().copied().filter(|x| *x > 0.0).collect();
            LatencySummary::from_samples(&nz)
        };
        // per-side statistics cover the cycles that used that side
        r.edge_latency_ms = side(&self.edge);
        r.cloud_latency_ms = side(&self.cloud);
        r.overhead_latency_ms = LatencySummary::from_samples(&self.overhead);
        r.total_latency_ms = LatencySummary::from_samples(&self.total);
        r
    }
}

impl EpisodeReport {
    /// Checks the counter relations every finished report must satisfy.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |m: String| Err(RapidError::Accounting(m));
        if (self.total_load_gb - self.cloud_load_gb - self.edge_load_gb).abs() > 1e-9 {
            return fail("load split does not add up".into());
        }
        if self.dispatch_count > self.trigger_count + self.depletion_refills {
            return fail("more dispatches than triggers plus refills".into());
        }
        if self.enqueued != self.executed + self.preempted_rows + self.remaining {
            return fail(format!(
                "queue conservation: enqueued {} != executed {} + discarded {} + remaining {}",
                self.enqueued, self.executed, self.preempted_rows, self.remaining
            ));
        }
        let closure = self.edge_latency_ms.total + self.cloud_latency_ms.total
            + self.overhead_latency_ms.total;
        if (closure - self.total_latency_ms.total).abs() > 1e-9 * closure.abs().max(1.0) {
            return fail("latency closure violated".into());
        }
        Ok(())
    }

    pub fn trace_rows(&self) -> Vec<TraceRow> {
        self.trace
            .as_deref()
            .unwrap_or_default()
            .iter()
            .map(TraceRow::from)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Toml,
}

impl ReportFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Ok(ReportFormat::Json),
            Some("toml") => Ok(ReportFormat::Toml),
            other => Err(RapidError::Config(format!(
                "unsupported report extension {other:?}; use .json or .toml"
            ))),
        }
    }
}

pub fn render_structured<T: Serialize>(value: &T, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(value)
            .map(|s| s + "\n")
            .map_err(|e| RapidError::Parse(e.to_string())),
        ReportFormat::Toml => toml::to_string(value).map_err(|e| RapidError::Parse(e.to_string())),
    }
}

/// Writes `report` in `format` to `path`.
pub fn emit_report(report: &EpisodeReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = render_structured(report, format)?;
    std::fs::write(path, text).map_err(|e| RapidError::io(path, e))
}

pub fn write_trace(report: &EpisodeReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in report.trace_rows() {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| RapidError::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> RapidError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => RapidError::io(path, io),
        other => RapidError::Parse(format!("{other:?}")),
    }
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

/// Display name used in table rows.
pub fn policy_label(policy: &str) -> &str {
    match policy {
        "edge_only" => "Edge-Only",
        "cloud_only" => "Cloud-Only",
        "vision_entropy" => "Vision-Entropy",
        "rapid" => "RAPID",
        other => other,
    }
}

fn lat_cell(s: &LatencySummary) -> String {
    if s.count == 0 {
        "--".into()
    } else {
        format!("{:.1}ms", s.mean)
    }
}

fn load_cell(gb: f64) -> String {
    if gb == 0.0 {
        "--".into()
    } else {
        format!("{gb:.1}GB")
    }
}

/// Method | Cloud-Side Lat./Load | Edge-Side Lat./Load | Total Lat./Load.
pub fn render_table(reports: &[EpisodeReport]) -> String {
    let header = [
        "Method",
        "Cloud Lat.",
        "Cloud Load",
        "Edge Lat.",
        "Edge Load",
        "Total Lat.",
        "Total Load",
    ];
    let rows: Vec<[String; 7]> = reports
        .iter()
        .map(|r| {
            [
                policy_label(&r.policy).to_owned(),
                lat_cell(&r.cloud_latency_ms),
                load_cell(r.cloud_load_gb),
                lat_cell(&r.edge_latency_ms),
                load_cell(r.edge_load_gb),
                format!(
                    "{:.1} ± {:.1}ms",
                    r.total_latency_ms.mean, r.total_latency_ms.std
                ),
                load_cell(r.total_load_gb),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in &rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[&str]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str(" | ");
            }
            let pad = w - c.chars().count();
            s.push_str(c);
            s.extend(std::iter::repeat_n(' ', pad));
        }
        s.trim_end().to_owned()
    };
    let mut out = String::new();
    let _ = writeln!(out, "latency: mean over chunk cycles (± std across cycles)");
    let _ = writeln!(out, "{}", line(&header));
    let _ = writeln!(
        out,
        "{}",
        widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-")
    );
    for row in &rows {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        let _ = writeln!(out, "{}", line(&cells));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRatio {
    pub baseline: String,
    pub candidate: String,
    /// Baseline mean total latency over candidate mean total latency.
    pub speedup: f64,
    pub delta_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub scenario_id: String,
    pub pairs: Vec<PairRatio>,
    /// Policy with the lowest mean total latency.
    pub best: String,
}

pub fn compare_runs(reports: &[EpisodeReport]) -> Result<Comparison> {
    let [first, rest @ ..] = reports else {
        return Err(RapidError::Comparison("need at least two reports".into()));
    };
    if rest.is_empty() {
        return Err(RapidError::Comparison("need at least two reports".into()));
    }
    for r in rest {
        if r.scenario_id != first.scenario_id || r.seed != first.seed {
            return Err(RapidError::Comparison(format!(
                "scenario mismatch: {}#{} vs {}#{}",
                first.scenario_id, first.seed, r.scenario_id, r.seed
            )));
        }
    }
    let mut pairs = Vec::new();
    for (i, a) in reports.iter().enumerate() {
        for b in &reports[i + 1..] {
            pairs.push(PairRatio {
                baseline: a.policy.clone(),
                candidate: b.policy.clone(),
                speedup: a.total_latency_ms.mean / b.total_latency_ms.mean,
                delta_ms: a.total_latency_ms.mean - b.total_latency_ms.mean,
            });
        }
    }
    let best = reports
        .iter()
        .min_by(|a, b| a.total_latency_ms.mean.total_cmp(&b.total_latency_ms.mean))
        .map(|r| r.policy.clone())
        .unwrap_or_default();
    Ok(Comparison {
        scenario_id: first.scenario_id.clone(),
        pairs,
        best,
    })
}
