//! Wall-clock mode: the sensor stage and the control loop run on separate
//! threads and meet in a single-slot mailbox.
//!
//! The sensor thread owns every rolling window. It writes its latest
//! evaluation into the slot, never overwriting an unread triggering one
//! with a quiet one. The control thread takes the slot once per period and
//! applies the cooldown and depletion rules. This mode exists for
//! demonstration and overhead measurement; the simulator is the reference.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{RapidError, Result};
use crate::kinematics::JointState;
use crate::report::percentile;
use crate::trigger::{
    CooldownGate, DispatchCause, SensorEval, SensorStage, TriggerConfig, V_MAX_CALIBRATION_S,
};

#[derive(Debug, Default)]
struct Slot {
    eval: Option<SensorEval>,
}

/// Single-slot mailbox between the two loops.
#[derive(Debug, Default, Clone)]
pub struct Mailbox {
    slot: Arc<Mutex<Slot>>,
}

impl Mailbox {
    pub fn publish(&self, eval: SensorEval) {
        let mut s = self.slot.lock().unwrap_or_else(|p| p.into_inner());
        let keep_pending = s.eval.is_some_and(|e| e.trigger) && !eval.trigger;
        if !keep_pending {
            s.eval = Some(eval);
        }
    }

    pub fn take(&self) -> Option<SensorEval> {
        self.slot.lock().unwrap_or_else(|p| p.into_inner()).eval.take()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealtimeOptions {
    pub sensor_hz: u32,
    pub control_hz: u32,
    /// Chunk rows refilled per dispatch.
    pub horizon: u32,
    /// Sleep to honour the nominal periods; otherwise run flat out.
    pub pace: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RealtimeSummary {
    pub sensor_ticks: u64,
    pub control_ticks: u64,
    pub dispatches: u64,
    pub trigger_dispatches: u64,
    pub depletion_refills: u64,
    pub sensor_p50_us: f64,
    pub sensor_p99_us: f64,
    pub control_p99_us: f64,
}

pub fn run_realtime(
    states: Vec<JointState>,
    cfg: &TriggerConfig,
    opts: RealtimeOptions,
) -> Result<RealtimeSummary> {
    if opts.sensor_hz == 0 || opts.control_hz == 0 || opts.horizon == 0 {
        return Err(RapidError::Config("rates and horizon must be positive".into()));
    }
    let n = states.first().map(|s| s.n_joints()).unwrap_or(1);
    let prefix = (V_MAX_CALIBRATION_S * opts.sensor_hz as f64).round() as usize;
    let cfg = &cfg.resolved(&states[..prefix.min(states.len())]);
    let mut stage = SensorStage::new(cfg, n, Some(1.0 / opts.sensor_hz as f64))?;
    let mailbox = Mailbox::default();
    let done = Arc::new(AtomicBool::new(false));

    let sensor_box = mailbox.clone();
    let sensor_done = done.clone();
    let sensor_period = Duration::from_secs_f64(1.0 / opts.sensor_hz as f64);
    let sensor = thread::spawn(move || -> Result<(u64, Vec<f64>)> {
        let mut times = Vec::with_capacity(states.len());
        let start = Instant::now();
        let result = (|| {
            for (i, s) in states.iter().enumerate() {
                let t0 = Instant::now();
                if let Some(eval) = stage.observe(s)? {
                    sensor_box.publish(eval);
                }
                times.push(t0.elapsed().as_secs_f64() * 1e6);
                if opts.pace {
                    let deadline = start + sensor_period * (i as u32 + 1);
                    if let Some(wait) = deadline.checked_duration_since(Instant::now()) {
                        thread::sleep(wait);
                    }
                }
            }
            Ok(())
        })();
        sensor_done.store(true, Ordering::Release);
        result.map(|()| (times.len() as u64, times))
    });

    let control_period = Duration::from_secs_f64(1.0 / opts.control_hz as f64);
    let mut gate = CooldownGate::new(cfg.cooldown_steps);
    let mut rows = 0u32;
    let mut summary = RealtimeSummary::default();
    let mut control_times = Vec::new();
    let start = Instant::now();
    loop {
        let finished = done.load(Ordering::Acquire);
        let t0 = Instant::now();
        let trigger = mailbox.take().is_some_and(|e| e.trigger);
        match gate.apply_with_queue(trigger, rows == 0) {
            Some(DispatchCause::Trigger) => {
                summary.dispatches += 1;
                summary.trigger_dispatches += 1;
                rows = opts.horizon;
            }
            Some(DispatchCause::Depletion) => {
                summary.dispatches += 1;
                summary.depletion_refills += 1;
                rows = opts.horizon;
            }
            None => {}
        }
        rows = rows.saturating_sub(1);
        control_times.push(t0.elapsed().as_secs_f64() * 1e6);
        summary.control_ticks += 1;
        if finished {
            break;
        }
        if opts.pace {
            let deadline = start + control_period * summary.control_ticks as u32;
            if let Some(wait) = deadline.checked_duration_since(Instant::now()) {
                thread::sleep(wait);
            }
        } else {
            thread::yield_now();
        }
    }
    let (sensor_ticks, mut sensor_times) = sensor
        .join()
        .map_err(|_| RapidError::Config("sensor thread panicked".into()))??;
    sensor_times.sort_by(f64::total_cmp);
    control_times.sort_by(f64::total_cmp);
    summary.sensor_ticks = sensor_ticks;
    summary.sensor_p50_us = percentile(&sensor_times, 50.0);
    summary.sensor_p99_us = percentile(&sensor_times, 99.0);
    summary.control_p99_us = percentile(&control_times, 99.0);
    Ok(summary)
}
