//! Benchmark plant: a three-state pH neutralization reactor, the multilevel
//! pseudo-random excitation used to identify it, and piecewise-constant
//! schedules for disturbances and references.
//!
//! # Reactor model
//!
//! The reactor is the standard reaction-invariant model of a stirred tank fed
//! by an acid stream `q1` (HNO3), a buffer stream `q2` (NaHCO3) and a base
//! stream `q3` (NaOH + NaHCO3), draining through a valve:
//!
//! ```text
//! A dh/dt      = q1 + q2 + q3 - Cv (h + z)^n
//! A h dWa4/dt  = q1 (Wa1 - Wa4) + q2 (Wa2 - Wa4) + q3 (Wa3 - Wa4)
//! A h dWb4/dt  = q1 (Wb1 - Wb4) + q2 (Wb2 - Wb4) + q3 (Wb3 - Wb4)
//! ```
//!
//! and the pH of the effluent solves the implicit charge balance
//!
//! ```text
//! Wa4 + 10^(pH-14) - 10^(-pH) + Wb4 (1 + 2 10^(pH-pK2)) / (1 + 10^(pK1-pH) + 10^(pH-pK2)) = 0
//! ```
//!
//! Constants are those of Henson & Seborg, "Adaptive nonlinear control of a
//! pH neutralization process", IEEE TCST 2(3), 1994 (see [`PhParams`]). These
//! equations come from that literature and should be checked against it.
//!
//! Flows are in mL/s, the level in cm, the area in cm^2 and the invariants in
//! mol/L. The ODE is integrated with classical RK4 at a fixed substep
//! (default 1 s, ten per 10 s sample); the pH equation is solved by bisection
//! on `[0, 14]` to `1e-10`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Sampling time used throughout the benchmark, seconds.
pub const SAMPLE_TIME: f64 = 10.0;

/// A sampled single-input single-output plant.
pub trait DiscretePlant<T: Real> {
    fn sample_time(&self) -> f64;
    /// Current measured output.
    fn output(&self) -> Result<T>;
    /// Holds `u` for one sampling interval.
    fn advance(&mut self, u: T) -> Result<()>;
}

/// Reactor constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhParams {
    /// Tank cross-section, cm^2.
    pub area: f64,
    /// Outlet offset below the tank bottom, cm.
    pub z: f64,
    /// Valve coefficient.
    pub cv: f64,
    /// Valve exponent.
    pub valve_exp: f64,
    pub pk1: f64,
    pub pk2: f64,
    /// Acid, buffer and base stream reaction invariants `Wa`, mol/L.
    pub wa: [f64; 3],
    /// Acid, buffer and base stream reaction invariants `Wb`, mol/L.
    pub wb: [f64; 3],
}

impl Default for PhParams {
    fn default() -> Self {
        Self {
            area: 207.0,
            z: 11.5,
            cv: 4.59,
            valve_exp: 0.607,
            pk1: 6.35,
            pk2: 10.25,
            wa: [3.0e-3, -3.0e-2, -3.05e-3],
            wb: [0.0, 3.0e-2, 5.0e-5],
        }
    }
}

/// Nominal acid flow (held constant), mL/s.
pub const NOMINAL_Q1: f64 = 16.6;
/// Nominal buffer flow, mL/s.
pub const NOMINAL_Q2: f64 = 0.55;
/// Nominal base flow, mL/s.
pub const NOMINAL_Q3: f64 = 15.6;

/// Reactor state `[Wa4, Wb4, h]` with the current disturbance flows.
#[derive(Debug, Clone, PartialEq)]
pub struct PhPlant {
    pub x: [f64; 3],
    pub q1: f64,
    pub q2: f64,
    pub params: PhParams,
    /// RK4 substep, seconds.
    pub substep: f64,
    /// Sampling time used by the [`DiscretePlant`] interface.
    pub t_s: f64,
}

impl PhPlant {
    /// Steady state for constant flows; solved in closed form (mixing balance
    /// for the invariants, valve law for the level).
    pub fn at_equilibrium(params: PhParams, q1: f64, q2: f64, q3: f64) -> Result<Self> {
        if q1 < 0.0 || q2 < 0.0 || q3 < 0.0 {
            return Err(Error::InvalidArgument("flows must be nonnegative".into()));
        }
        let q = q1 + q2 + q3;
        if q <= 0.0 {
            return Err(Error::InvalidArgument(
                "total inflow must be positive".into(),
            ));
        }
        let wa4 = (q1 * params.wa[0] + q2 * params.wa[1] + q3 * params.wa[2]) / q;
        let wb4 = (q1 * params.wb[0] + q2 * params.wb[1] + q3 * params.wb[2]) / q;
        let h = (q / params.cv).powf(1.0 / params.valve_exp) - params.z;
        if h <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "equilibrium level {h} is not positive"
            )));
        }
        Ok(Self {
            x: [wa4, wb4, h],
            q1,
            q2,
            params,
            substep: 1.0,
            t_s: SAMPLE_TIME,
        })
    }

    /// Plant at the equilibrium of the nominal flows with base flow `q3`.
    pub fn nominal(q3: f64) -> Result<Self> {
        Self::at_equilibrium(PhParams::default(), NOMINAL_Q1, NOMINAL_Q2, q3)
    }

    pub fn with_substep(mut self, substep: f64) -> Self {
        self.substep = substep;
        self
    }

    fn derivative(&self, x: &[f64; 3], q3: f64) -> [f64; 3] {
        let p = &self.params;
        let [wa4, wb4, h] = *x;
        let h = h.max(1e-9);
        let (q1, q2) = (self.q1, self.q2);
        let out = p.cv * (h + p.z).powf(p.valve_exp);
        let vol = p.area * h;
        [
            (q1 * (p.wa[0] - wa4) + q2 * (p.wa[1] - wa4) + q3 * (p.wa[2] - wa4)) / vol,
            (q1 * (p.wb[0] - wb4) + q2 * (p.wb[1] - wb4) + q3 * (p.wb[2] - wb4)) / vol,
            (q1 + q2 + q3 - out) / p.area,
        ]
    }

    fn rk4(&mut self, q3: f64, dt: f64) {
        let add = |a: &[f64; 3], k: &[f64; 3], s: f64| {
            [a[0] + s * k[0], a[1] + s * k[1], a[2] + s * k[2]]
        };
        let x = self.x;
        let k1 = self.derivative(&x, q3);
        let k2 = self.derivative(&add(&x, &k1, dt / 2.0), q3);
        let k3 = self.derivative(&add(&x, &k2, dt / 2.0), q3);
        let k4 = self.derivative(&add(&x, &k3, dt), q3);
        for i in 0..3 {
            self.x[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }

    /// Integrates over `t_s` seconds with base flow `q3` held, then returns
    /// the effluent pH.
    pub fn step(&mut self, q3: f64, t_s: f64) -> Result<f64> {
        if !(t_s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "step length {t_s} must be positive"
            )));
        }
        if q3 < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "base flow {q3} is negative"
            )));
        }
        let n = (t_s / self.substep).ceil().max(1.0) as usize;
        let dt = t_s / n as f64;
        for _ in 0..n {
            self.rk4(q3, dt);
        }
        self.ph()
    }

    pub fn ph(&self) -> Result<f64> {
        ph_from_invariants(&self.params, self.x[0], self.x[1])
    }
}

/// Solves the charge balance for pH by bisection on `[0, 14]`.
pub fn ph_from_invariants(p: &PhParams, wa4: f64, wb4: f64) -> Result<f64> {
    let f = |ph: f64| {
        wa4 + 10f64.powf(ph - 14.0) - 10f64.powf(-ph)
            + wb4 * (1.0 + 2.0 * 10f64.powf(ph - p.pk2))
                / (1.0 + 10f64.powf(p.pk1 - ph) + 10f64.powf(ph - p.pk2))
    };
    let (mut lo, mut hi) = (0.0, 14.0);
    let (flo, fhi) = (f(lo), f(hi));
    if !(flo < 0.0 && fhi > 0.0) {
        return Err(Error::PhBracket { lo: flo, hi: fhi });
    }
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

impl DiscretePlant<f64> for PhPlant {
    fn sample_time(&self) -> f64 {
        self.t_s
    }

    fn output(&self) -> Result<f64> {
        self.ph()
    }

    fn advance(&mut self, u: f64) -> Result<()> {
        self.step(u, self.t_s).map(|_| ())
    }
}

/// Multilevel pseudo-random signal: a fast-switching band followed by a slow
/// band. Every dwell draws a level uniformly (repeats allowed), so each run of
/// equal samples lasts a whole number of periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MprsConfig {
    pub levels: Vec<f64>,
    /// Dwell of the fast band, seconds.
    pub fast_period: f64,
    /// Dwell of the slow band, seconds.
    pub slow_period: f64,
    /// Fraction of the duration given to the fast band (it comes first).
    pub mix: f64,
    pub seed: u64,
    /// Total length, seconds.
    pub duration: f64,
    pub t_s: f64,
}

impl Default for MprsConfig {
    fn default() -> Self {
        Self {
            levels: evenly_spaced(12.7, 16.7, 5),
            fast_period: 10.0,
            slow_period: 1000.0,
            mix: 0.5,
            seed: 1,
            duration: 40_000.0,
            t_s: SAMPLE_TIME,
        }
    }
}

pub fn evenly_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

fn samples_per(period: f64, t_s: f64, what: &str) -> Result<usize> {
    let k = (period / t_s).round();
    if !(k >= 1.0) || ((k * t_s) - period).abs() > 1e-9 * period.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "{what} {period} s is not a positive multiple of the sampling time {t_s} s"
        )));
    }
    Ok(k as usize)
}

/// Samples of the excitation at `t_s` spacing.
pub fn generate_mprs(c: &MprsConfig) -> Result<Vec<f64>> {
    if c.levels.is_empty() {
        return Err(Error::InvalidArgument(
            "MPRS needs at least one level".into(),
        ));
    }
    if !(c.t_s > 0.0) || !(c.duration >= 0.0) || !(0.0..=1.0).contains(&c.mix) {
        return Err(Error::InvalidArgument(
            "MPRS needs t_s > 0, duration >= 0, mix in [0, 1]".into(),
        ));
    }
    let fast = samples_per(c.fast_period, c.t_s, "fast period")?;
    let slow = samples_per(c.slow_period, c.t_s, "slow period")?;
    let total = (c.duration / c.t_s).round() as usize;
    let fast_len = ((c.mix * total as f64).round() as usize).min(total);

    let mut rng = ChaCha20Rng::seed_from_u64(c.seed);
    let mut out = Vec::with_capacity(total);
    let mut level = 0.0;
    for k in 0..total {
        let (offset, period) = if k < fast_len {
            (k, fast)
        } else {
            (k - fast_len, slow)
        };
        if offset % period == 0 {
            level = c.levels[rng.random_range(0..c.levels.len())];
        }
        out.push(level);
    }
    Ok(out)
}

/// Piecewise-constant signal: `nominal` before the first switch, then
/// `values[i]` from `times[i]` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub nominal: f64,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Schedule {
    pub fn new(nominal: f64, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::Dimension {
                what: "schedule values",
                expected: times.len(),
                got: values.len(),
            });
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument(
                "schedule times must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            nominal,
            times,
            values,
        })
    }

    pub fn constant(nominal: f64) -> Self {
        Self {
            nominal,
            times: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn value_at(&self, t: f64) -> f64 {
        match self.times.iter().rposition(|&ti| ti <= t) {
            Some(i) => self.values[i],
            None => self.nominal,
        }
    }
}

/// Buffer-flow disturbance around the nominal `q2`.
pub fn disturbance_schedule(times: Vec<f64>, values: Vec<f64>) -> Result<Schedule> {
    Schedule::new(NOMINAL_Q2, times, values)
}
