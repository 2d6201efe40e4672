//! Sliding-window statistics with O(1) updates.
//!
//! [`RollingWindow`] keeps the last `capacity` values in a ring and tracks
//! the sum and sum of squares of the held values in double-double
//! arithmetic. Adding and removing a value is an error-free transformation
//! up to about 2^-104 of the largest magnitude involved, so the mean is
//! nearly correctly rounded and nothing drifts however long the stream
//! runs. A window holding one repeated value reports that value and zero
//! variance exactly.

use serde::{Deserialize, Serialize};

use crate::error::{RapidError, Result};

/// How a window forgets old values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StatsMode {
    /// Hard sliding window over the last `capacity` values.
    #[default]
    Window,
    /// Exponential forgetting with per-push decay `lambda` in (0, 1).
    Exponential { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedScore {
    pub raw: f64,
    pub mean: f64,
    pub std: f64,
    pub z: f64,
}

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn fast_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    fn add(&mut self, x: f64) {
        let (s, e) = two_sum(self.hi, x);
        *self = fast_two_sum(s, e + self.lo);
    }

    /// Adds `x * x`, or subtracts it when `sign` is negative.
    fn add_square(&mut self, x: f64, sign: f64) {
        let p = x * x;
        let e = x.mul_add(x, -p);
        let (s, e1) = two_sum(self.hi, sign * p);
        *self = fast_two_sum(s, e1 + (self.lo + sign * e));
    }

    fn scale(self, k: f64) -> Dd {
        let p = self.hi * k;
        fast_two_sum(p, self.hi.mul_add(k, -p) + self.lo * k)
    }

    fn square(self) -> Dd {
        let p = self.hi * self.hi;
        fast_two_sum(p, self.hi.mul_add(self.hi, -p) + 2.0 * self.hi * self.lo)
    }

    fn sub(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, -o.hi);
        fast_two_sum(s, e + (self.lo - o.lo))
    }

    fn div(self, k: f64) -> f64 {
        let q = self.hi / k;
        let r = (-q).mul_add(k, self.hi) + self.lo;
        q + r / k
    }
}

#[derive(Debug, Clone)]
pub struct RollingWindow {
    capacity: usize,
    mode: StatsMode,
    ring: Vec<f64>,
    /// Index of the oldest value once the ring is full.
    head: usize,
    count: usize,
    sum: Dd,
    sum_sq: Dd,
    /// Length of the run of equal values at the newest end of the ring.
    run: usize,
    /// Exponential mode only.
    ew_mean: f64,
    ew_var: f64,
}

impl RollingWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(RapidError::Config("window capacity must be >= 1".into()));
        }
        Ok(RollingWindow {
            capacity,
            mode: StatsMode::Window,
            ring: Vec::with_capacity(capacity),
            head: 0,
            count: 0,
            sum: Dd::default(),
            sum_sq: Dd::default(),
            run: 0,
            ew_mean: 0.0,
            ew_var: 0.0,
        })
    }

    /// Window whose statistics decay exponentially; `capacity` only bounds
    /// the warm-up count.
    pub fn exponential(capacity: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(RapidError::Config(format!(
                "decay lambda must lie in (0, 1), got {lambda}"
            )));
        }
        let mut w = Self::new(capacity)?;
        w.mode = StatsMode::Exponential { lambda };
        w.ring = Vec::new();
        Ok(w)
    }

    pub fn with_mode(capacity: usize, mode: StatsMode) -> Result<Self> {
        match mode {
            StatsMode::Window => Self::new(capacity),
            StatsMode::Exponential { lambda } => Self::exponential(capacity, lambda),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn mode(&self) -> StatsMode {
        self.mode
    }

    pub fn push(&mut self, x: f64) -> Result<()> {
        if !x.is_finite() {
            return Err(RapidError::NonFinite("window sample"));
        }
        match self.mode {
            StatsMode::Window => self.push_window(x),
            StatsMode::Exponential { lambda } => self.push_exponential(x, lambda),
        }
        Ok(())
    }

    fn push_window(&mut self, x: f64) {
        self.run = if self.count > 0 && self.newest() == x { self.run + 1 } else { 1 };
        if self.count < self.capacity {
            self.ring.push(x);
            self.count += 1;
        } else {
            let old = std::mem::replace(&mut self.ring[self.head], x);
            self.head = (self.head + 1) % self.capacity;
            self.sum.add(-old);
            self.sum_sq.add_square(old, -1.0);
        }
        self.sum.add(x);
        self.sum_sq.add_square(x, 1.0);
        if self.sum.hi == 0.0 && self.sum_sq.hi == 0.0 {
            // all held values are zero; drop residue from cancelled terms
            self.sum = Dd::default();
            self.sum_sq = Dd::default();
        }
    }

    fn newest(&self) -> f64 {
        let i = if self.count < self.capacity { self.count } else { self.head + self.capacity };
        self.ring[(i - 1) % self.capacity]
    }

    /// All held values are bit-identical; mean and variance are then exact.
    fn is_constant(&self) -> bool {
        self.count > 0 && self.run >= self.count
    }

    fn push_exponential(&mut self, x: f64, lambda: f64) {
        if self.count == 0 {
            self.ew_mean = x;
            self.ew_var = 0.0;
        } else {
            let alpha = 1.0 - lambda;
            let d = x - self.ew_mean;
            self.ew_mean += alpha * d;
            self.ew_var = lambda * (self.ew_var + alpha * d * d);
        }
        self.count = (self.count + 1).min(self.capacity);
    }

    pub fn mean(&self) -> f64 {
        match self.mode {
            _ if self.count == 0 => 0.0,
            StatsMode::Window if self.is_constant() => self.newest(),
            StatsMode::Window => self.sum.div(self.count as f64),
            StatsMode::Exponential { .. } => self.ew_mean,
        }
    }

    /// Population variance, clamped at zero.
    pub fn variance(&self) -> f64 {
        match self.mode {
            _ if self.count == 0 => 0.0,
            StatsMode::Window if self.is_constant() => 0.0,
            StatsMode::Window => {
                let n = self.count as f64;
                // (n * sum_sq - sum^2) / n^2
                let centered = self.sum_sq.scale(n).sub(self.sum.square());
                (centered.div(n) / n).max(0.0)
            }
            StatsMode::Exponential { .. } => self.ew_var.max(0.0),
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn sum(&self) -> f64 {
        match self.mode {
            StatsMode::Window => self.sum.hi + self.sum.lo,
            StatsMode::Exponential { .. } => self.mean() * self.count as f64,
        }
    }

    pub fn sum_sq(&self) -> f64 {
        match self.mode {
            StatsMode::Window => self.sum_sq.hi + self.sum_sq.lo,
            StatsMode::Exponential { .. } => {
                let n = self.count as f64;
                self.variance() * n + n * self.mean() * self.mean()
            }
        }
    }

    /// Values currently held, oldest first. Empty in exponential mode.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        let (newer, older) = self.ring.split_at(self.head.min(self.ring.len()));
        older.iter().chain(newer.iter()).copied()
    }

    /// Scores `x` against the current window contents (call before pushing
    /// `x`). Fewer than two samples give `z = 0`.
    pub fn normalize(&self, x: f64, eps: f64) -> NormalizedScore {
        if self.count < 2 {
            return NormalizedScore {
                raw: x,
                mean: x,
                std: 0.0,
                z: 0.0,
            };
        }
        let mean = self.mean();
        let std = self.std();
        NormalizedScore {
            raw: x,
            mean,
            std,
            z: (x - mean) / (std + eps),
        }
    }

    /// Mean of the held values; 0 for an empty window.
    pub fn moving_average(&self) -> f64 {
        self.mean()
    }

    /// Heap bytes owned by the ring buffer.
    pub fn heap_bytes(&self) -> usize {
        self.ring.capacity() * std::mem::size_of::<f64>()
    }
}
