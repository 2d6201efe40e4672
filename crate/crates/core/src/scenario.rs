//! Synthetic phase-labelled joint trajectories.
//!
//! Approach segments move joints in quadrature pairs whose amplitudes are
//! inversely proportional to the acceleration weights, so the weighted
//! acceleration norm stays constant while the arm travels. Torques stay
//! close to a seeded baseline. Interaction segments slow the arm down, step
//! the torques at onset and at a few seeded instants, and inject one-tick
//! velocity impulses.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RapidError, Result};
use crate::kinematics::{JointState, WeightProfile};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Approach,
    Interaction,
    Idle,
    /// Replayed sample without a phase label.
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub kind: PhaseKind,
    pub duration_s: f64,
    /// Weighted joint-speed amplitude (rad/s).
    #[serde(default = "default_velocity_scale")]
    pub velocity_scale: f64,
    /// Peak torque step (N·m); used by interaction segments.
    #[serde(default)]
    pub torque_spike_amplitude: f64,
    /// Peak impulse acceleration (rad/s²); used by interaction segments.
    #[serde(default)]
    pub accel_spike_amplitude: f64,
}

fn default_velocity_scale() -> f64 {
    0.6
}

impl Segment {
    pub fn approach(duration_s: f64) -> Self {
        Segment {
            kind: PhaseKind::Approach,
            duration_s,
            velocity_scale: 0.6,
            torque_spike_amplitude: 0.0,
            accel_spike_amplitude: 0.0,
        }
    }

    pub fn interaction(duration_s: f64) -> Self {
        Segment {
            kind: PhaseKind::Interaction,
            duration_s,
            velocity_scale: 0.03,
            torque_spike_amplitude: 2.0,
            accel_spike_amplitude: 40.0,
        }
    }

    pub fn idle(duration_s: f64) -> Self {
        Segment {
            kind: PhaseKind::Idle,
            duration_s,
            velocity_scale: 0.0,
            torque_spike_amplitude: 0.0,
            accel_spike_amplitude: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub id: String,
    pub n_joints: usize,
    pub duration_s: f64,
    #[serde(default = "default_sensor_hz")]
    pub sensor_hz: u32,
    #[serde(default = "default_control_hz")]
    pub control_hz: u32,
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub noise_level: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_sensor_hz() -> u32 {
    500
}

fn default_control_hz() -> u32 {
    20
}

/// Critical-action ratios of the three reference manipulation tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    PickPlace,
    DrawerOpening,
    PegInsertion,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::PickPlace, Task::DrawerOpening, Task::PegInsertion];

    /// Fraction of ticks spent in interaction.
    pub fn critical_ratio(self) -> f64 {
        match self {
            Task::PickPlace => 0.175,
            Task::DrawerOpening => 0.136,
            Task::PegInsertion => 0.188,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::PickPlace => "pick_place",
            Task::DrawerOpening => "drawer_opening",
            Task::PegInsertion => "peg_insertion",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| RapidError::Config(format!("unknown task {s:?}")))
    }
}

/// Leading approach long enough to calibrate `v_max` and fill the windows.
pub const LEAD_APPROACH_S: f64 = 2.5;

impl Scenario {
    pub fn sensor_dt(&self) -> f64 {
        1.0 / self.sensor_hz as f64
    }

    /// Sensor ticks per control tick.
    pub fn decimation(&self) -> u64 {
        (self.sensor_hz / self.control_hz) as u64
    }

    pub fn total_ticks(&self) -> u64 {
        (self.duration_s * self.sensor_hz as f64).round() as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_joints == 0 {
            return Err(RapidError::Config("scenario needs at least one joint".into()));
        }
        if self.sensor_hz == 0 || self.control_hz == 0 || self.sensor_hz % self.control_hz != 0 {
            return Err(RapidError::Config(format!(
                "sensor_hz ({}) must be a positive multiple of control_hz ({})",
                self.sensor_hz, self.control_hz
            )));
        }
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            return Err(RapidError::Config("duration must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(RapidError::Config("noise_level must lie in [0, 1]".into()));
        }
        let mut sum = 0.0;
        for s in &self.segments {
            if !(s.duration_s >= 0.0 && s.duration_s.is_finite()) {
                return Err(RapidError::Config("segment durations must be >= 0".into()));
            }
            if s.velocity_scale < 0.0 || s.torque_spike_amplitude < 0.0 || s.accel_spike_amplitude < 0.0 {
                return Err(RapidError::Config("segment amplitudes must be >= 0".into()));
            }
            sum += s.duration_s;
        }
        if (sum - self.duration_s).abs() > 1e-9 * self.duration_s.max(1.0) {
            return Err(RapidError::Config(format!(
                "segment durations sum to {sum}, scenario lasts {}",
                self.duration_s
            )));
        }
        Ok(())
    }

    /// Approach / interaction layout whose interaction share equals the
    /// task's critical ratio.
    pub fn for_task(task: Task, n_joints: usize, duration_s: f64, seed: u64) -> Result<Scenario> {
        let interactions = 3usize;
        let crit = task.critical_ratio() * duration_s;
        let free = duration_s - crit - LEAD_APPROACH_S;
        if free <= 0.0 {
            return Err(RapidError::Config(format!(
                "{duration_s} s is too short for a task scenario"
            )));
        }
        let mut r = rng::stream(&[seed, tag::SCENARIO, 0]);
        let mut shares = |n: usize| -> Vec<f64> {
            let raw: Vec<f64> = (0..n).map(|_| r.random_range(0.7..1.3)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect()
        };
        let crit_shares = shares(interactions);
        // the leading approach also gets a share of the free time
        let approach_shares = shares(interactions + 1);
        let mut segments = Vec::with_capacity(2 * interactions + 1);
        segments.push(Segment::approach(LEAD_APPROACH_S + free * approach_shares[0]));
        for i in 0..interactions {
            segments.push(Segment::interaction(crit * crit_shares[i]));
            segments.push(Segment::approach(free * approach_shares[i + 1]));
        }
        // absorb rounding so the durations sum exactly
        let sum: f64 = segments.iter().map(|s| s.duration_s).sum();
        if let Some(last) = segments.last_mut() {
            last.duration_s += duration_s - sum;
        }
        let sc = Scenario {
            id: format!("{}-n{n_joints}-s{seed}", task.name()),
            n_joints,
            duration_s,
            sensor_hz: default_sensor_hz(),
            control_hz: default_control_hz(),
            segments,
            noise_level: 0.0,
            seed,
        };
        sc.validate()?;
        Ok(sc)
    }

    /// Tick ranges `[start, end)` of every segment.
    pub fn segment_ticks(&self) -> Vec<(u64, u64)> {
        let hz = self.sensor_hz as f64;
        let mut start_s = 0.0;
        let mut out = Vec::with_capacity(self.segments.len());
        for (i, s) in self.segments.iter().enumerate() {
            let start = (start_s * hz).round() as u64;
            start_s += s.duration_s;
            let end = if i + 1 == self.segments.len() {
                self.total_ticks()
            } else {
                (start_s * hz).round() as u64
            };
            out.push((start, end.max(start)));
        }
        out
    }

    pub fn stream(&self) -> Result<ScenarioStream> {
        ScenarioStream::new(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledState {
    pub state: JointState,
    pub phase: PhaseKind,
    pub segment: usize,
    /// Per-sample observation noise overriding the episode level.
    pub obs_noise: Option<f64>,
}

/// Emits the whole trajectory; see [`ScenarioStream`] for the lazy form.
pub fn generate_scenario(spec: &Scenario) -> Result<Vec<LabeledState>> {
    Ok(spec.stream()?.collect())
}

#[derive(Debug, Clone)]
struct Pair {
    a: usize,
    b: Option<usize>,
    omega: f64,
    phase: f64,
}

#[derive(Debug, Clone)]
struct SegmentPlan {
    end: u64,
    kind: PhaseKind,
    velocity_scale: f64,
    /// `(tick, per-joint torque offset that holds from this tick on)`.
    torque_steps: Vec<(u64, Vec<f64>)>,
    /// `(tick, joint, velocity increment)` applied for one tick only.
    impulses: Vec<(u64, usize, f64)>,
}

/// Lazy trajectory generator.
#[derive(Debug, Clone)]
pub struct ScenarioStream {
    n: usize,
    dt: f64,
    total: u64,
    t: u64,
    weights: Vec<f64>,
    pairs: Vec<Pair>,
    tau_base: Vec<f64>,
    plans: Vec<SegmentPlan>,
    seg: usize,
    q: Vec<f64>,
}

/// Amplitude of the smooth torque drift during approach (N·m).
const APPROACH_TORQUE_RIPPLE: f64 = 1e-4;

impl ScenarioStream {
    fn new(spec: &Scenario) -> Result<Self> {
        spec.validate()?;
        let n = spec.n_joints;
        let weights = WeightProfile::linear_ramp(n).w_a;
        let mut r = rng::stream(&[spec.seed, tag::SCENARIO, 1]);
        let pairs = (0..n)
            .step_by(2)
            .map(|a| Pair {
                a,
                b: (a + 1 < n).then_some(a + 1),
                omega: TAU * r.random_range(0.3..0.8),
                phase: r.random_range(0.0..TAU),
            })
            .collect();
        let tau_base = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let q = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let dt = spec.sensor_dt();
        let plans = spec
            .segment_ticks()
            .into_iter()
            .zip(&spec.segments)
            .enumerate()
            .map(|(i, ((start, end), seg))| plan_segment(spec.seed, i as u64, n, dt, start, end, seg))
            .collect();
        Ok(ScenarioStream {
            n,
            dt,
            total: spec.total_ticks(),
            t: 0,
            weights,
            pairs,
            tau_base,
            plans,
            seg: 0,
            q,
        })
    }

    fn velocity(&self, time: f64, scale: f64, out: &mut [f64]) {
        for p in &self.pairs {
            let arg = p.omega * time + p.phase;
            match p.b {
                Some(b) => {
                    out[p.a] = scale / self.weights[p.a] * arg.sin();
                    out[b] = scale / self.weights[b] * arg.cos();
                }
                None => out[p.a] = 0.5 * scale / self.weights[p.a],
            }
        }
    }
}

fn plan_segment(
    seed: u64,
    index: u64,
    n: usize,
    dt: f64,
    start: u64,
    end: u64,
    seg: &Segment,
) -> SegmentPlan {
    let mut plan = SegmentPlan {
        end,
        kind: seg.kind,
        velocity_scale: seg.velocity_scale,
        torque_steps: Vec::new(),
        impulses: Vec::new(),
    };
    if seg.kind != PhaseKind::Interaction || end <= start {
        return plan;
    }
    let mut r = rng::stream(&[seed, tag::SCENARIO, 100 + index]);
    let amp = seg.torque_spike_amplitude;
    let mut offset: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * amp * r.random_range(0.5..1.0)
        })
        .collect();
    plan.torque_steps.push((start, offset.clone()));
    let len = end - start;
    // extra contact events after the onset settles
    let extra = r.random_range(1..=2u32);
    let mut step_ticks: Vec<u64> = (0..extra)
        .filter(|_| len > 40)
        .map(|_| start + r.random_range(len / 4..len))
        .collect();
    step_ticks.sort_unstable();
    for t in step_ticks {
        let j = r.random_range(0..n);
        offset[j] += amp * r.random_range(-0.5..0.5);
        plan.torque_steps.push((t, offset.clone()));
    }
    let impulses = r.random_range(2..=4u32);
    for _ in 0..impulses {
        let t = start + r.random_range(0..len);
        let j = r.random_range(0..n);
        let sign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
        plan.impulses.push((t, j, sign * seg.accel_spike_amplitude * dt));
    }
    plan
}

impl Iterator for ScenarioStream {
    type Item = LabeledState;

    fn next(&mut self) -> Option<LabeledState> {
        if self.t >= self.total {
            return None;
        }
        while self.seg + 1 < self.plans.len() && self.t >= self.plans[self.seg].end {
            self.seg += 1;
        }
        let t = self.t;
        let time = t as f64 * self.dt;
        let plan = &self.plans[self.seg];
        let mut qdot = vec![0.0; self.n];
        if matches!(plan.kind, PhaseKind::Approach | PhaseKind::Interaction) {
            self.velocity(time, plan.velocity_scale, &mut qdot);
        }
        for &(it, j, dv) in &plan.impulses {
            if it == t {
                qdot[j] += dv;
            }
        }
        let mut tau: Vec<f64> = self
            .tau_base
            .iter()
            .enumerate()
            .map(|(j, b)| b + APPROACH_TORQUE_RIPPLE * (TAU * 0.5 * time + j as f64).sin())
            .collect();
        if let Some((_, off)) = plan.torque_steps.iter().rev().find(|(st, _)| *st <= t) {
            for (x, o) in tau.iter_mut().zip(off) {
                *x += o;
            }
        }
        if t > 0 {
            for (q, v) in self.q.iter_mut().zip(&qdot) {
                *q += v * self.dt;
            }
        }
        let state = JointState {
            t,
            time_s: time,
            q: self.q.clone(),
            qdot,
            tau,
        };
        let out = LabeledState {
            state,
            phase: plan.kind,
            segment: self.seg,
            obs_noise: None,
        };
        self.t += 1;
        Some(out)
    }
}
