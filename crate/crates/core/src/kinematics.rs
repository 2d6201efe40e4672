//! Per-step kinematic and kinetic scores computed from raw joint-state samples.
//!
//! Everything here is a pure function of its arguments. The dispatcher turns
//! consecutive [`JointState`] pairs into a [`KinematicSample`] and feeds the
//! scalar scores into its rolling statistics.

use serde::{Deserialize, Serialize};

use crate::error::{RapidError, Result};

/// One timestamped proprioceptive sample of an N-joint manipulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    /// Sensor-rate tick index.
    pub t: u64,
    pub time_s: f64,
    /// Joint positions (rad).
    pub q: Vec<f64>,
    /// Joint velocities (rad/s).
    pub qdot: Vec<f64>,
    /// Joint torques (N·m).
    pub tau: Vec<f64>,
}

impl JointState {
    pub fn new(t: u64, time_s: f64, q: Vec<f64>, qdot: Vec<f64>, tau: Vec<f64>) -> Result<Self> {
        let s = JointState {
            t,
            time_s,
            q,
            qdot,
            tau,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn n_joints(&self) -> usize {
        self.q.len()
    }

    /// Checks the shape and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.q.len();
        if n == 0 {
            return Err(RapidError::Dimension {
                expected: 1,
                got: 0,
            });
        }
        for len in [self.qdot.len(), self.tau.len()] {
            if len != n {
                return Err(RapidError::Dimension {
                    expected: n,
                    got: len,
                });
            }
        }
        if !self.time_s.is_finite() {
            return Err(RapidError::NonFinite("time_s"));
        }
        if !self.q.iter().all(|x| x.is_finite()) {
            return Err(RapidError::NonFinite("q"));
        }
        if !self.qdot.iter().all(|x| x.is_finite()) {
            return Err(RapidError::NonFinite("qdot"));
        }
        if !self.tau.iter().all(|x| x.is_finite()) {
            return Err(RapidError::NonFinite("tau"));
        }
        Ok(())
    }
}

/// Per-joint weights for the acceleration and torque scores.
///
/// The default is a linear ramp `w[j] = 2j / (N + 1)` (1-based `j`), which
/// up-weights the distal joints while keeping the mean weight at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightProfile {
    pub w_a: Vec<f64>,
    pub w_tau: Vec<f64>,
}

impl WeightProfile {
    pub fn linear_ramp(n: usize) -> Self {
        let w: Vec<f64> = (1..=n)
            .map(|j| 2.0 * j as f64 / (n as f64 + 1.0))
            .collect();
        WeightProfile {
            w_a: w.clone(),
            w_tau: w,
        }
    }

    pub fn uniform(n: usize) -> Self {
        WeightProfile {
            w_a: vec![1.0; n],
            w_tau: vec![1.0; n],
        }
    }

    pub fn n_joints(&self) -> usize {
        self.w_a.len()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for w in [&self.w_a, &self.w_tau] {
            if w.len() != n {
                return Err(RapidError::Dimension {
                    expected: n,
                    got: w.len(),
                });
            }
            if !w.iter().all(|x| x.is_finite() && *x > 0.0) {
                return Err(RapidError::Config(
                    "weights must be positive and finite".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Derived scores for one sensor tick (defined from the second sample on).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicSample {
    pub t: u64,
    pub qddot: Vec<f64>,
    pub dtau: Vec<f64>,
    /// Weighted L2 norm of the accelerations.
    pub m_acc: f64,
    /// Weighted squared magnitude of the torque delta.
    pub tv: f64,
    /// Unweighted joint speed.
    pub v: f64,
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(RapidError::Dimension { expected, got });
    }
    Ok(())
}

/// Backward finite difference of joint velocities.
pub fn finite_difference_accel(prev: &JointState, cur: &JointState) -> Result<Vec<f64>> {
    if prev.t.checked_add(1) != Some(cur.t) {
        return Err(RapidError::Sequencing {
            expected: prev.t.wrapping_add(1),
            got: cur.t,
        });
    }
    let dt = cur.time_s - prev.time_s;
    if !(dt > 0.0) {
        return Err(RapidError::Timing {
            dt_s: dt,
            min_s: 0.0,
            max_s: f64::INFINITY,
        });
    }
    check_len(prev.qdot.len(), cur.qdot.len())?;
    Ok(cur
        .qdot
        .iter()
        .zip(&prev.qdot)
        .map(|(c, p)| (c - p) / dt)
        .collect())
}

pub fn accel_magnitude(qddot: &[f64], w: &WeightProfile) -> Result<f64> {
    check_len(w.w_a.len(), qddot.len())?;
    Ok(qddot
        .iter()
        .zip(&w.w_a)
        .map(|(a, w)| (w * a) * (w * a))
        .sum::<f64>()
        .sqrt())
}

pub fn torque_variation(prev_tau: &[f64], cur_tau: &[f64], w: &WeightProfile) -> Result<f64> {
    check_len(prev_tau.len(), cur_tau.len())?;
    check_len(w.w_tau.len(), cur_tau.len())?;
    Ok(cur_tau
        .iter()
        .zip(prev_tau)
        .zip(&w.w_tau)
        .map(|((c, p), w)| {
            let d = w * (c - p);
            d * d
        })
        .sum())
}

pub fn joint_speed(qdot: &[f64]) -> f64 {
    qdot.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Computes every per-step score for the pair `(prev, cur)`.
///
/// When `nominal_dt` is given, the sample interval must lie within
/// `[0.25, 4] * nominal_dt`; otherwise any positive interval is accepted.
pub fn kinematic_sample(
    prev: &JointState,
    cur: &JointState,
    w: &WeightProfile,
    nominal_dt: Option<f64>,
) -> Result<KinematicSample> {
    cur.validate()?;
    check_len(prev.n_joints(), cur.n_joints())?;
    if let Some(nominal) = nominal_dt {
        let dt = cur.time_s - prev.time_s;
        let (lo, hi) = (0.25 * nominal, 4.0 * nominal);
        if !(dt >= lo && dt <= hi) {
            return Err(RapidError::Timing {
                dt_s: dt,
                min_s: lo,
                max_s: hi,
            });
        }
    }
    let qddot = finite_difference_accel(prev, cur)?;
    let m_acc = accel_magnitude(&qddot, w)?;
    let tv = torque_variation(&prev.tau, &cur.tau, w)?;
    let dtau = cur.tau.iter().zip(&prev.tau).map(|(c, p)| c - p).collect();
    Ok(KinematicSample {
        t: cur.t,
        qddot,
        dtau,
        m_acc,
        tv,
        v: joint_speed(&cur.qdot),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn js(t: u64, time_s: f64, qdot: Vec<f64>) -> JointState {
        let n = qdot.len();
        JointState::new(t, time_s, vec![0.0; n], qdot, vec![0.0; n]).unwrap()
    }

    #[test]
    fn finite_difference_examples() {
        let a = finite_difference_accel(&js(0, 0.0, vec![0.0, 0.0]), &js(1, 0.002, vec![0.0, 0.0]));
        assert_eq!(a.unwrap(), vec![0.0, 0.0]);

        let a = finite_difference_accel(
            &js(0, 0.0, vec![0.1, 0.2]),
            &js(1, 0.002, vec![0.1, 0.2]),
        );
        assert_eq!(a.unwrap(), vec![0.0, 0.0]);

        // (0.1 - 0) / 0.05 = 2, (0.2 - 0) / 0.05 = 4
        let a = finite_difference_accel(
            &js(0, 0.0, vec![0.0, 0.0]),
            &js(1, 0.05, vec![0.1, 0.2]),
        )
        .unwrap();
        assert!((a[0] - 2.0).abs() < 1e-12);
        assert!((a[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn finite_difference_errors() {
        let e = finite_difference_accel(&js(0, 0.0, vec![0.0]), &js(2, 0.004, vec![0.0]));
        assert!(matches!(e, Err(RapidError::Sequencing { .. })));
        let e = finite_difference_accel(&js(0, 0.1, vec![0.0]), &js(1, 0.1, vec![0.0]));
        assert!(matches!(e, Err(RapidError::Timing { .. })));
        let e = finite_difference_accel(&js(0, 0.1, vec![0.0]), &js(1, 0.05, vec![0.0]));
        assert!(matches!(e, Err(RapidError::Timing { .. })));
    }

    #[test]
    fn nominal_dt_window() {
        let w = WeightProfile::uniform(1);
        let prev = js(0, 0.0, vec![0.0]);
        assert!(kinematic_sample(&prev, &js(1, 0.002, vec![0.1]), &w, Some(0.002)).is_ok());
        assert!(kinematic_sample(&prev, &js(1, 0.0004, vec![0.1]), &w, Some(0.002)).is_err());
        assert!(kinematic_sample(&prev, &js(1, 0.009, vec![0.1]), &w, Some(0.002)).is_err());
    }

    #[test]
    fn joint_state_rejects_bad_input() {
        assert!(JointState::new(0, 0.0, vec![], vec![], vec![]).is_err());
        assert!(JointState::new(0, 0.0, vec![0.0], vec![0.0, 1.0], vec![0.0]).is_err());
        assert!(JointState::new(0, 0.0, vec![f64::NAN], vec![0.0], vec![0.0]).is_err());
        assert!(JointState::new(0, f64::INFINITY, vec![0.0], vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn accel_magnitude_examples() {
        let w = WeightProfile {
            w_a: vec![1.0, 2.0],
            w_tau: vec![1.0, 2.0],
        };
        assert_eq!(accel_magnitude(&[0.0, 0.0], &w).unwrap(), 0.0);
        // sqrt((1*2)^2 + (2*4)^2) = sqrt(68)
        let m = accel_magnitude(&[2.0, 4.0], &w).unwrap();
        assert!((m - 8.246_211_251_235_321).abs() < 1e-12);
        let u = WeightProfile::uniform(2);
        assert_eq!(
            accel_magnitude(&[3.0, 0.0], &u).unwrap(),
            accel_magnitude(&[-3.0, 0.0], &u).unwrap()
        );
        assert!(matches!(
            accel_magnitude(&[1.0], &u),
            Err(RapidError::Dimension { .. })
        ));
    }

    #[test]
    fn torque_variation_examples() {
        let w = WeightProfile {
            w_a: vec![1.0, 2.0],
            w_tau: vec![1.0, 2.0],
        };
        assert_eq!(torque_variation(&[1.0, 1.0], &[1.0, 1.0], &w).unwrap(), 0.0);
        assert_eq!(torque_variation(&[0.0, 0.0], &[1.0, 1.0], &w).unwrap(), 5.0);
        assert_eq!(
            torque_variation(&[0.0, 0.0], &[0.3, -1.7], &w).unwrap(),
            torque_variation(&[0.0, 0.0], &[-0.3, 1.7], &w).unwrap()
        );
        assert!(torque_variation(&[0.0], &[0.0, 1.0], &w).is_err());
    }

    #[test]
    fn joint_speed_examples() {
        assert_eq!(joint_speed(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(joint_speed(&[3.0, 4.0]), 5.0);
        assert_eq!(joint_speed(&[-0.7]), 0.7);
    }

    #[test]
    fn linear_ramp_has_unit_mean() {
        for n in 1..=9 {
            let w = WeightProfile::linear_ramp(n);
            let mean = w.w_a.iter().sum::<f64>() / n as f64;
            assert!((mean - 1.0).abs() < 1e-12);
            assert!(w.w_a.windows(2).all(|p| p[0] < p[1]));
            w.validate(n).unwrap();
        }
    }

    fn vec_and_weights() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..8).prop_flat_map(|n| {
            (
                prop::collection::vec(-100.0f64..100.0, n),
                prop::collection::vec(0.01f64..5.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn scores_nonnegative_and_sign_invariant((x, w) in vec_and_weights(), flips in prop::collection::vec(any::<bool>(), 8)) {
            let wp = WeightProfile { w_a: w.clone(), w_tau: w };
            let zero = vec![0.0; x.len()];
            let flipped: Vec<f64> = x.iter().zip(&flips).map(|(v, f)| if *f { -v } else { *v }).collect();
            let a = accel_magnitude(&x, &wp).unwrap();
            let t = torque_variation(&zero, &x, &wp).unwrap();
            prop_assert!(a >= 0.0 && t >= 0.0);
            prop_assert_eq!(a, accel_magnitude(&flipped, &wp).unwrap());
            prop_assert_eq!(t, torque_variation(&zero, &flipped, &wp).unwrap());
            let is_zero = x.iter().all(|v| *v == 0.0);
            prop_assert_eq!(a == 0.0, is_zero);
        }

        #[test]
        fn accel_is_absolutely_homogeneous((x, w) in vec_and_weights(), c in -50.0f64..50.0) {
            let wp = WeightProfile { w_a: w.clone(), w_tau: w };
            let scaled: Vec<f64> = x.iter().map(|v| c * v).collect();
            let lhs = accel_magnitude(&scaled, &wp).unwrap();
            let rhs = c.abs() * accel_magnitude(&x, &wp).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs));
        }

        #[test]
        fn torque_variation_is_quadratic((x, w) in vec_and_weights(), c in -50.0f64..50.0) {
            let wp = WeightProfile { w_a: w.clone(), w_tau: w };
            let zero = vec![0.0; x.len()];
            let scaled: Vec<f64> = x.iter().map(|v| c * v).collect();
            let lhs = torque_variation(&zero, &scaled, &wp).unwrap();
            let rhs = c * c * torque_variation(&zero, &x, &wp).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs));
        }
    }

    #[test]
    fn rectangle_reintegration_recovers_velocity_deltas() {
        // Jittered timestamps, smooth velocity profile.
        let n = 3;
        let mut states = Vec::new();
        let mut time = 0.0;
        for t in 0..2000u64 {
            let dt = 0.002 * (1.0 + 0.1 * ((t as f64) * 0.37).sin());
            time += dt;
            let qdot = (0..n)
                .map(|j| (time * (1.0 + j as f64)).sin() * 0.5)
                .collect();
            states.push(js(t, time, qdot));
        }
        // Each backward difference times its interval reconstructs the delta;
        // summing gives the total velocity change.
        let mut acc_sum = vec![0.0; n];
        for pair in states.windows(2) {
            let a = finite_difference_accel(&pair[0], &pair[1]).unwrap();
            let dt = pair[1].time_s - pair[0].time_s;
            for j in 0..n {
                let recovered = a[j] * dt;
                let expected = pair[1].qdot[j] - pair[0].qdot[j];
                assert!((recovered - expected).abs() < 1e-12);
                acc_sum[j] += recovered;
            }
        }
        for j in 0..n {
            let total = states.last().unwrap().qdot[j] - states[0].qdot[j];
            assert!((acc_sum[j] - total).abs() < 1e-12);
        }
    }
}
