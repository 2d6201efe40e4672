//! Deterministic multi-rate episode engine.
//!
//! One loop iteration is one sensor tick. Every `sensor_hz / control_hz`
//! sensor ticks the control half runs, in this order: deliver responses
//! whose arrival time has passed, decide, dispatch, pop one action.

use serde::{Deserialize, Serialize};

use crate::chunk::{ActionChunk, ActionQueue, ChunkSource, Pop, StallPolicy};
use crate::cloud::{
    chunk_from_response, logits_entropy, CloudClient, CloudModelConfig, InProcessTransport,
    LatencyModel, LatencySource, MockCloud, ObservationBlob, Transport, DEFAULT_TIMEOUT_MS,
};
use crate::error::{RapidError, Result};
use crate::kinematics::JointState;
use crate::protocol::InferenceRequest;
use crate::report::{CycleLatency, EpisodeRecorder, EpisodeReport, StepRecord, TickAction};
use crate::rng;
use crate::scenario::{generate_scenario, LabeledState, Scenario};
use crate::trigger::{Decision, DispatchCause, Dispatcher, TriggerConfig, V_MAX_CALIBRATION_S};

pub const DEFAULT_ENTROPY_THRESHOLD_BITS: f64 = 7.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    Rapid,
    EdgeOnly,
    CloudOnly,
    VisionEntropy { threshold_bits: f64 },
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Rapid => "rapid",
            PolicyKind::EdgeOnly => "edge_only",
            PolicyKind::CloudOnly => "cloud_only",
            PolicyKind::VisionEntropy { .. } => "vision_entropy",
        }
    }

    pub fn parse(name: &str, threshold_bits: f64) -> Result<Self> {
        match name {
            "rapid" => Ok(PolicyKind::Rapid),
            "edge_only" => Ok(PolicyKind::EdgeOnly),
            "cloud_only" => Ok(PolicyKind::CloudOnly),
            "vision_entropy" => Ok(PolicyKind::VisionEntropy { threshold_bits }),
            other => Err(RapidError::Config(format!("unknown policy {other:?}"))),
        }
    }
}

/// Per-policy load placement and overheads of a hybrid policy.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyCost {
    pub cloud_load_gb: f64,
    pub edge_load_gb: f64,
    /// Charged on every chunk cycle.
    pub routing_overhead_ms: f64,
    /// Charged on cycles that preempt queued rows.
    pub preemption_overhead_ms: f64,
}

/// Latency of running the full model on each side plus the split policies'
/// placements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyProfile {
    pub edge: LatencyModel,
    pub cloud: LatencyModel,
    pub total_load_gb: f64,
    pub rapid: PolicyCost,
    pub vision: PolicyCost,
}

impl LatencyProfile {
    pub fn cost(&self, policy: &PolicyKind) -> PolicyCost {
        match policy {
            PolicyKind::Rapid => self.rapid,
            PolicyKind::VisionEntropy { .. } => self.vision,
            PolicyKind::EdgeOnly => PolicyCost {
                edge_load_gb: self.total_load_gb,
                ..Default::default()
            },
            PolicyKind::CloudOnly => PolicyCost {
                cloud_load_gb: self.total_load_gb,
                ..Default::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.edge.validate()?;
        self.cloud.validate()?;
        if !(self.total_load_gb > 0.0) {
            return Err(RapidError::Config("total_load_gb must be > 0".into()));
        }
        for (name, c) in [("rapid", self.rapid), ("vision", self.vision)] {
            if (c.cloud_load_gb + c.edge_load_gb - self.total_load_gb).abs() > 1e-9 {
                return Err(RapidError::Config(format!(
                    "{name} load split {} + {} does not equal total {}",
                    c.cloud_load_gb, c.edge_load_gb, self.total_load_gb
                )));
            }
            if c.cloud_load_gb < 0.0
                || c.edge_load_gb < 0.0
                || c.routing_overhead_ms < 0.0
                || c.preemption_overhead_ms < 0.0
            {
                return Err(RapidError::Config(format!("{name} costs must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub trigger: TriggerConfig,
    pub latency: LatencyProfile,
    pub cloud: CloudModelConfig,
    pub stall_policy: StallPolicy,
    pub timeout_ms: f64,
    pub trace: bool,
}

impl EpisodeConfig {
    pub fn new(trigger: TriggerConfig, latency: LatencyProfile, cloud: CloudModelConfig) -> Self {
        EpisodeConfig {
            trigger,
            latency,
            cloud,
            stall_policy: StallPolicy::default(),
            timeout_ms: DEFAULT_TIMEOUT_MS,
            trace: false,
        }
    }
}

/// Full outcome of one episode.
#[derive(Debug, Clone)]
pub struct Episode {
    pub report: EpisodeReport,
    /// Dispatcher decisions, one per control tick (RAPID only).
    pub decisions: Vec<Decision>,
    /// Resolved trigger configuration (RAPID only).
    pub trigger: Option<TriggerConfig>,
}

pub fn run_episode(scenario: &Scenario, policy: PolicyKind, cfg: &EpisodeConfig) -> Result<EpisodeReport> {
    Ok(run_episode_detailed(scenario, policy, cfg)?.report)
}

pub fn run_episode_detailed(
    scenario: &Scenario,
    policy: PolicyKind,
    cfg: &EpisodeConfig,
) -> Result<Episode> {
    let transport = InProcessTransport::new(MockCloud::new(cfg.cloud.clone())?);
    run_episode_with(scenario, policy, cfg, transport)
}

pub fn run_baseline_entropy(
    scenario: &Scenario,
    threshold_bits: f64,
    cfg: &EpisodeConfig,
) -> Result<EpisodeReport> {
    run_episode(scenario, PolicyKind::VisionEntropy { threshold_bits }, cfg)
}

struct InFlight {
    arrival_ms: f64,
    chunk: ActionChunk,
}

/// First [`V_MAX_CALIBRATION_S`] seconds of joint states.
pub fn calibration_prefix(states: &[LabeledState], sensor_hz: u32) -> Vec<JointState> {
    let n = (V_MAX_CALIBRATION_S * sensor_hz as f64).round() as usize;
    states.iter().take(n).map(|s| s.state.clone()).collect()
}

/// Identity and clocking of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMeta {
    pub id: String,
    pub seed: u64,
    pub noise_level: f64,
    pub n_joints: usize,
    pub sensor_hz: u32,
    pub control_hz: u32,
}

impl EpisodeMeta {
    pub fn of(scenario: &Scenario) -> Self {
        EpisodeMeta {
            id: scenario.id.clone(),
            seed: scenario.seed,
            noise_level: scenario.noise_level,
            n_joints: scenario.n_joints,
            sensor_hz: scenario.sensor_hz,
            control_hz: scenario.control_hz,
        }
    }
}

/// Runs one episode with cloud requests going through `transport`.
pub fn run_episode_with<T: Transport>(
    scenario: &Scenario,
    policy: PolicyKind,
    cfg: &EpisodeConfig,
    transport: T,
) -> Result<Episode> {
    scenario.validate()?;
    let states = generate_scenario(scenario)?;
    run_states_with(&states, &EpisodeMeta::of(scenario), policy, cfg, transport)
}

/// Runs the control loop over a prepared sensor stream.
pub fn run_states_with<T: Transport>(
    states: &[LabeledState],
    meta: &EpisodeMeta,
    policy: PolicyKind,
    cfg: &EpisodeConfig,
    transport: T,
) -> Result<Episode> {
    if meta.sensor_hz == 0 || meta.control_hz == 0 || meta.sensor_hz % meta.control_hz != 0 {
        return Err(RapidError::Config(
            "sensor_hz must be a positive multiple of control_hz".into(),
        ));
    }
    cfg.latency.validate()?;
    if let PolicyKind::VisionEntropy { threshold_bits } = policy {
        if !(threshold_bits >= 0.0) {
            return Err(RapidError::Config("entropy threshold must be >= 0".into()));
        }
    }
    if cfg.cloud.n_joints != meta.n_joints {
        return Err(RapidError::Dimension {
            expected: meta.n_joints,
            got: cfg.cloud.n_joints,
        });
    }
    let decimation = (meta.sensor_hz / meta.control_hz) as u64;
    let dt = 1.0 / meta.sensor_hz as f64;

    let mut dispatcher = None;
    let mut resolved = None;
    if policy == PolicyKind::Rapid {
        let trig = cfg
            .trigger
            .resolved(&calibration_prefix(states, meta.sensor_hz));
        dispatcher = Some(Dispatcher::new(&trig, meta.n_joints, Some(dt))?);
        resolved = Some(trig);
    }

    let cost = cfg.latency.cost(&policy);
    let total_load = cfg.latency.total_load_gb;
    let (edge_frac, cloud_frac) = (cost.edge_load_gb / total_load, cost.cloud_load_gb / total_load);
    let edge_model = LatencyModel {
        seed: rng::mix(&[cfg.latency.edge.seed, meta.seed]),
        ..cfg.latency.edge
    };
    let cloud_model = LatencyModel {
        seed: rng::mix(&[cfg.latency.cloud.seed, meta.seed]),
        ..cfg.latency.cloud
    };
    let mut client = CloudClient::new(transport, LatencySource::Simulated(cloud_model))
        .with_timeout_ms(cfg.timeout_ms);
    let local = MockCloud::new(cfg.cloud.clone())?;
    let mut local_seq = 0u64;

    let mut queue = ActionQueue::new(cfg.stall_policy);
    let mut pending: Vec<InFlight> = Vec::new();
    let mut recorder = EpisodeRecorder::new(
        policy.name(),
        &meta.id,
        meta.seed,
        meta.noise_level,
        cost.cloud_load_gb,
        cost.edge_load_gb,
        cfg.trace,
    );
    let mut decisions = Vec::new();
    let mut cycle = 0u64;

    for ls in states {
        if let Some(d) = dispatcher.as_mut() {
            d.observe(&ls.state)?;
        }
        let s = ls.state.t;
        if s % decimation != 0 {
            continue;
        }
        let k = s / decimation;
        let now_ms = ls.state.time_s * 1e3;
        let mut rec = StepRecord {
            tick: k,
            time_ms: now_ms,
            phase: ls.phase,
            trigger: false,
            cause: None,
            offload: false,
            cloud_request: false,
            latency: None,
            timeout: false,
            delivered: false,
            dropped_response: false,
            preempted_rows: 0,
            enqueued_rows: 0,
            action: TickAction::Idle,
            exec_seq: None,
            exec_row: None,
            queue_len: 0,
        };

        // responses become visible at control boundaries only
        pending.sort_by(|a, b| {
            a.arrival_ms
                .total_cmp(&b.arrival_ms)
                .then(a.chunk.seq.cmp(&b.chunk.seq))
        });
        while pending.first().is_some_and(|p| p.arrival_ms <= now_ms) {
            let p = pending.remove(0);
            match queue.deliver(&p.chunk) {
                Some(discarded) => {
                    rec.delivered = true;
                    rec.preempted_rows += discarded as u64;
                    rec.enqueued_rows += p.chunk.horizon() as u64;
                }
                None => rec.dropped_response = true,
            }
        }

        let idle = queue.is_empty() && queue.in_flight().is_none();
        match policy {
            PolicyKind::Rapid => {
                let d = dispatcher
                    .as_mut()
                    .expect("dispatcher exists for the rapid policy")
                    .control_tick(idle);
                rec.trigger = d.trigger;
                rec.cause = d.cause;
                rec.offload = d.cause == Some(DispatchCause::Trigger) && !queue.is_empty();
                decisions.push(d);
            }
            PolicyKind::EdgeOnly | PolicyKind::CloudOnly => {
                rec.cause = idle.then_some(DispatchCause::Depletion);
            }
            PolicyKind::VisionEntropy { threshold_bits } => {
                if queue.in_flight().is_none() {
                    if let Some(front) = queue.front() {
                        let h = match &front.logits {
                            Some(l) => logits_entropy(l)?,
                            None => 0.0,
                        };
                        if h > threshold_bits {
                            rec.trigger = true;
                            rec.cause = Some(DispatchCause::Trigger);
                            rec.offload = true;
                        }
                    } else {
                        rec.cause = Some(DispatchCause::Depletion);
                    }
                }
            }
        }

        if rec.cause.is_some() {
            let obs = ObservationBlob::capture(
                cfg.cloud.seed,
                k,
                cfg.cloud.observation_bytes,
                ls.obs_noise.unwrap_or(meta.noise_level),
            )?;
            let overhead = cost.routing_overhead_ms
                + if rec.offload { cost.preemption_overhead_ms } else { 0.0 };
            let dispatched = if policy == PolicyKind::EdgeOnly {
                local_seq += 1;
                let resp = local.serve(&InferenceRequest::new(local_seq, k, obs.payload));
                let chunk = chunk_from_response(resp, k, ChunkSource::EdgeCache)?;
                let lat = CycleLatency {
                    edge_ms: edge_model.sample(cycle, cfg.cloud.observation_bytes),
                    cloud_ms: 0.0,
                    overhead_ms: overhead,
                };
                Some((chunk, lat))
            } else {
                rec.cloud_request = true;
                match client.request_chunk(&obs) {
                    Ok(reply) => {
                        let edge_ms = if edge_frac > 0.0 {
                            edge_frac * edge_model.sample(cycle, 0)
                        } else {
                            0.0
                        };
                        let lat = CycleLatency {
                            edge_ms,
                            cloud_ms: cloud_frac * reply.latency_ms,
                            overhead_ms: overhead,
                        };
                        Some((reply.chunk, lat))
                    }
                    Err(RapidError::Timeout { .. }) => {
                        rec.timeout = true;
                        None
                    }
                    Err(e) => return Err(e),
                }
            };
            if let Some((chunk, lat)) = dispatched {
                queue.mark_in_flight(chunk.seq);
                pending.push(InFlight {
                    arrival_ms: now_ms + lat.total_ms(),
                    chunk,
                });
                rec.latency = Some(lat);
                cycle += 1;
            }
        }

        match queue.pop_action() {
            Pop::Action(a) => {
                rec.action = TickAction::Executed;
                rec.exec_seq = Some(a.chunk_seq);
                rec.exec_row = Some(a.row as u64);
            }
            Pop::Stall { .. } | Pop::NeedsDispatch => rec.action = TickAction::Stall,
        }
        rec.queue_len = queue.len() as u64;
        recorder.record_step(&rec)?;
    }

    let report = recorder.finish();
    if report.enqueued != queue.enqueued()
        || report.executed != queue.executed()
        || report.preempted_rows != queue.discarded()
    {
        return Err(RapidError::Accounting(
            "report counters disagree with the action queue".into(),
        ));
    }
    report.check_invariants()?;
    Ok(Episode {
        report,
        decisions,
        trigger: resolved,
    })
}
