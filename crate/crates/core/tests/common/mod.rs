//! Reference implementations that recompute everything from raw history,
//! plus random stream generators. Shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rapid_core::kinematics::JointState;
use rapid_core::trigger::{Decision, DispatchCause, Dispatcher, TriggerConfig};

/// Scores the reference produces for one control tick.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RefDecision {
    pub t: u64,
    pub sensor_t: u64,
    pub m_acc: f64,
    pub m_tau: f64,
    pub m_acc_hat: f64,
    pub m_tau_hat: f64,
    pub omega_a: f64,
    pub omega_tau: f64,
    pub s_imp: f64,
    pub trigger: bool,
    pub cause: Option<DispatchCause>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Eval {
    sensor_t: u64,
    m_acc: f64,
    m_tau: f64,
    z_acc: f64,
    z_tau: f64,
    omega_a: f64,
    trigger: bool,
}

fn ramp(n: usize) -> Vec<f64> {
    (1..=n).map(|j| 2.0 * j as f64 / (n as f64 + 1.0)).collect()
}

fn speed(qdot: &[f64]) -> f64 {
    qdot.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// 95th percentile (nearest rank) of speed over the first two seconds,
/// floored at 0.1.
pub fn ref_v_max(stream: &[JointState]) -> f64 {
    let t0 = stream[0].time_s;
    let mut s: Vec<f64> = stream
        .iter()
        .filter(|x| x.time_s - t0 < 2.0)
        .map(|x| speed(&x.qdot))
        .collect();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = (0.95 * s.len() as f64).ceil() as usize;
    s[k.max(1) - 1].max(0.1)
}

/// Exactly rounded sum (Shewchuk's partials).
pub fn fsum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in xs {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    let mut hi = 0.0;
    while let Some(x) = partials.pop() {
        let y = hi;
        hi = x + y;
        let lo = y - (hi - x);
        if lo != 0.0 {
            partials.push(lo);
            hi = partials.iter().fold(hi, |a, b| a + b);
            break;
        }
    }
    hi
}

/// Mean of `v`, rounded once from the exact quotient up to a few units in
/// the last place of the remainder term.
pub fn exact_mean(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let s = fsum(v.iter().copied());
    let rest = fsum(v.iter().copied().chain([-s]));
    let q = s / n;
    q + ((-q).mul_add(n, s) + rest) / n
}

/// Two-pass population z-score of `x` against `hist`; 0 with fewer than
/// two samples.
fn zscore(hist: &[f64], x: f64, eps: f64) -> f64 {
    if hist.len() < 2 {
        return 0.0;
    }
    let mean = exact_mean(hist);
    let var = fsum(hist.iter().map(|h| (h - mean) * (h - mean))) / hist.len() as f64;
    (x - mean) / (var.sqrt() + eps)
}

fn tail(v: &[f64], len: usize) -> &[f64] {
    &v[v.len().saturating_sub(len)..]
}

/// Replays `stream` through a from-scratch reference of the dispatcher.
/// Control ticks fall on every `decimation`-th sample; the action queue
/// holds `horizon` rows after a dispatch and loses one per control tick.
pub fn reference_run(
    stream: &[JointState],
    cfg: &TriggerConfig,
    decimation: u64,
    horizon: u32,
) -> Vec<RefDecision> {
    let n = stream[0].qdot.len();
    let w = ramp(n);
    let v_max = cfg.v_max.unwrap_or_else(|| ref_v_max(stream));
    let tau_cap = cfg.tau_stats_len.unwrap_or(cfg.w_a_len);
    let warm = cfg.w_a_len.max(cfg.w_tau_len);

    let mut accs = Vec::new();
    let mut tvs = Vec::new();
    let mut mtaus = Vec::new();
    let mut last = Eval::default();
    let mut latched: Option<Eval> = None;
    let mut last_arm: Option<u64> = None;
    let mut rows = 0u32;
    let mut out = Vec::new();
    let mut control_t = 0u64;

    for (i, cur) in stream.iter().enumerate() {
        if i > 0 {
            let prev = &stream[i - 1];
            let dt = cur.time_s - prev.time_s;
            let mut a2 = 0.0;
            let mut tv = 0.0;
            for j in 0..n {
                let a = w[j] * (cur.qdot[j] - prev.qdot[j]) / dt;
                a2 += a * a;
                let d = w[j] * (cur.tau[j] - prev.tau[j]);
                tv += d * d;
            }
            let m_acc = a2.sqrt();
            let z_acc = zscore(tail(&accs, cfg.w_a_len), m_acc, cfg.eps);
            accs.push(m_acc);
            tvs.push(tv);
            let recent = tail(&tvs, cfg.w_tau_len);
            let m_tau = exact_mean(recent);
            let z_tau = zscore(tail(&mtaus, tau_cap), m_tau, cfg.eps);
            mtaus.push(m_tau);
            let omega_a = (speed(&cur.qdot) / v_max).clamp(0.0, 1.0);
            let scored = accs.len() - 1;
            let trigger = scored >= warm
                && (omega_a * z_acc > cfg.theta_comp || (1.0 - omega_a) * z_tau > cfg.theta_red);
            last = Eval {
                sensor_t: cur.t,
                m_acc,
                m_tau,
                z_acc,
                z_tau,
                omega_a,
                trigger,
            };
            if trigger {
                latched = Some(last);
            }
        }
        if cur.t % decimation != 0 {
            continue;
        }
        let e = latched.take().unwrap_or(last);
        let open = last_arm.is_none_or(|a| control_t - a > cfg.cooldown_steps as u64);
        let cause = if e.trigger && open {
            last_arm = Some(control_t);
            Some(DispatchCause::Trigger)
        } else if rows == 0 {
            if e.trigger {
                last_arm = Some(control_t);
            }
            Some(DispatchCause::Depletion)
        } else {
            None
        };
        if cause.is_some() {
            rows = horizon;
        }
        rows = rows.saturating_sub(1);
        let omega_tau = 1.0 - e.omega_a;
        out.push(RefDecision {
            t: control_t,
            sensor_t: e.sensor_t,
            m_acc: e.m_acc,
            m_tau: e.m_tau,
            m_acc_hat: e.z_acc,
            m_tau_hat: e.z_tau,
            omega_a: e.omega_a,
            omega_tau: if i == 0 { 0.0 } else { omega_tau },
            s_imp: e.omega_a * e.z_acc + omega_tau * e.z_tau,
            trigger: e.trigger,
            cause,
        });
        control_t += 1;
    }
    out
}

/// Same harness as [`reference_run`] around the incremental dispatcher.
pub fn dispatcher_run(
    stream: &[JointState],
    cfg: &TriggerConfig,
    decimation: u64,
    horizon: u32,
) -> Vec<Decision> {
    let n = stream[0].qdot.len();
    let cfg = cfg.resolved(stream);
    let mut d = Dispatcher::new(&cfg, n, None).unwrap();
    let mut rows = 0u32;
    let mut out = Vec::new();
    for s in stream {
        d.observe(s).unwrap();
        if s.t % decimation == 0 {
            let dec = d.control_tick(rows == 0);
            if dec.dispatch {
                rows = horizon;
            }
            rows = rows.saturating_sub(1);
            out.push(dec);
        }
    }
    out
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * 1f64.max(a.abs()).max(b.abs())
}

/// First mismatch between the two sequences, if any.
pub fn compare(got: &[Decision], want: &[RefDecision], tol: f64) -> Result<f64, String> {
    if got.len() != want.len() {
        return Err(format!("length {} vs {}", got.len(), want.len()));
    }
    let mut worst = 0.0f64;
    for (g, w) in got.iter().zip(want) {
        if g.t != w.t
            || g.sensor_t != w.sensor_t
            || g.trigger != w.trigger
            || g.cause != w.cause
            || g.dispatch != w.cause.is_some()
        {
            return Err(format!("decision bits differ at control tick {}: {g:?} vs {w:?}", w.t));
        }
        let pairs = [
            (g.m_acc, w.m_acc),
            (g.m_tau, w.m_tau),
            (g.m_acc_hat, w.m_acc_hat),
            (g.m_tau_hat, w.m_tau_hat),
            (g.omega_a, w.omega_a),
            (g.omega_tau, w.omega_tau),
            (g.s_imp, w.s_imp),
        ];
        for (a, b) in pairs {
            let err = (a - b).abs() / 1f64.max(a.abs()).max(b.abs());
            worst = worst.max(err);
            if !close(a, b, tol) {
                return Err(format!("score differs at control tick {}: {a} vs {b}", w.t));
            }
        }
    }
    Ok(worst)
}

/// Random joint stream at 500 Hz: piecewise random-walk velocities, torque
/// steps, occasional velocity jumps and flat stretches.
pub fn random_stream(seed: u64, n: usize, ticks: usize) -> Vec<JointState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 0.002;
    let mut q = vec![0.0; n];
    let mut qdot: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut tau: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut out = Vec::with_capacity(ticks);
    let mut flat = 0usize;
    for t in 0..ticks {
        if flat > 0 {
            flat -= 1;
        } else {
            let drift = rng.random_range(0.001..0.05);
            for j in 0..n {
                qdot[j] += rng.random_range(-drift..drift);
                tau[j] += rng.random_range(-0.01..0.01);
            }
            if rng.random_bool(0.004) {
                let j = rng.random_range(0..n);
                tau[j] += rng.random_range(-3.0..3.0);
            }
            if rng.random_bool(0.003) {
                let j = rng.random_range(0..n);
                qdot[j] += rng.random_range(-1.0..1.0);
            }
            if rng.random_bool(0.001) {
                flat = rng.random_range(20..400);
            }
        }
        for j in 0..n {
            q[j] += qdot[j] * dt;
        }
        out.push(JointState::new(t as u64, t as f64 * dt, q.clone(), qdot.clone(), tau.clone()).unwrap());
    }
    out
}

/// Every executed row is unique, rows of a chunk run in order, a chunk
/// never runs after a newer one started, and rows balance.
pub fn check_exactly_once(r: &rapid_core::report::EpisodeReport) -> Result<(), String> {
    use rapid_core::report::TickAction;
    let trace = r.trace.as_ref().ok_or("trace disabled")?;
    let mut seen = std::collections::HashSet::new();
    let mut last: Option<(u64, u64)> = None;
    let mut executed = 0;
    for s in trace {
        if s.action != TickAction::Executed {
            if s.exec_seq.is_some() {
                return Err(format!("{}: tick {} not executed but names a row", r.policy, s.tick));
            }
            continue;
        }
        executed += 1;
        let key = (s.exec_seq.ok_or("missing seq")?, s.exec_row.ok_or("missing row")?);
        if !seen.insert(key) {
            return Err(format!("{}: row {key:?} executed twice", r.policy));
        }
        if last.is_some_and(|prev| key <= prev) {
            return Err(format!("{}: row {key:?} after {last:?}", r.policy));
        }
        last = Some(key);
    }
    let enq: u64 = trace.iter().map(|s| s.enqueued_rows).sum();
    let pre: u64 = trace.iter().map(|s| s.preempted_rows).sum();
    let remaining = trace.last().map_or(0, |s| s.queue_len);
    if executed != r.executed || enq != r.enqueued || pre != r.preempted_rows || remaining != r.remaining {
        return Err(format!("{}: trace totals disagree with the report", r.policy));
    }
    if enq != executed + pre + remaining {
        return Err(format!(
            "{}: enqueued {enq} != executed {executed} + discarded {pre} + remaining {remaining}",
            r.policy
        ));
    }
    Ok(())
}
