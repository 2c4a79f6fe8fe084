//! Offset-free tracking MPC on a recurrent model.
//!
//! At every sample the controller measures `y_sys(k)`, sets the output
//! disturbance `d = y_sys(k) - y(k)` and holds it over the horizon, and
//! minimizes
//!
//! ```text
//! J = sum_{i=0}^{N-1} q (y(k+i) + d - y_ref)^2 + r du(k+i)^2
//! u(k+i) = u(k-1) + du(k) + ... + du(k+i),   u_min <= u(k+i) <= u_max
//! ```
//!
//! The `i = 0` error does not depend on the moves (the model output reads
//! `x(k)` and `u(k-1)`), and the last move only enters through its penalty;
//! both follow the cost as written.
//!
//! The problem is solved in the accumulated inputs `U`, where the constraints
//! are a box, by projected Gauss-Newton: variables at a bound with the
//! gradient pushing outward are fixed, a Gauss-Newton step is taken in the
//! rest, and the trial point is clipped back into the box under an Armijo
//! test. Moves are recovered as differences of `U`.
//!
//! In [`FeedbackMode::Measured`] (default) the model state between samples
//! is driven by the measured output, as in training, and inside the horizon
//! the output feedback is the best estimate of the future measurement,
//! `y + d`. In [`FeedbackMode::Predicted`] the model runs on its own output
//! both between samples and inside the horizon.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EsnModel, SignalScaling};
use crate::plant::DiscretePlant;
use crate::reservoir::{EsnState, SparseRows};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackMode {
    #[default]
    Measured,
    Predicted,
}

impl fmt::Display for FeedbackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Measured => "measured",
            Self::Predicted => "predicted",
        })
    }
}

impl FromStr for FeedbackMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "measured" => Ok(Self::Measured),
            "predicted" => Ok(Self::Predicted),
            other => Err(Error::InvalidArgument(format!(
                "unknown feedback mode `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Stop when the projected gradient's largest entry is below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Sufficient-decrease constant of the Armijo test.
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 100,
            armijo: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub t_s: f64,
    pub q: f64,
    pub r: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub feedback: FeedbackMode,
    pub solver: SolverSettings,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            t_s: 10.0,
            q: 2.0,
            r: 1.0,
            u_min: 12.7,
            u_max: 16.7,
            feedback: FeedbackMode::Measured,
            solver: SolverSettings::default(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(self.u_min < self.u_max) {
            return bad("u_min must be below u_max");
        }
        if !(self.r > 0.0) || !(self.q >= 0.0) {
            return bad("weights need q >= 0 and r > 0");
        }
        if !(self.t_s > 0.0) {
            return bad("sampling time must be positive");
        }
        if !(self.solver.tol > 0.0) || self.solver.max_iter == 0 {
            return bad("solver needs tol > 0 and max_iter >= 1");
        }
        if !(self.solver.armijo > 0.0 && self.solver.armijo < 0.5) {
            return bad("armijo constant must lie in (0, 0.5)");
        }
        Ok(())
    }
}

/// A discrete model the controller can roll forward over a horizon.
///
/// Inputs and outputs are in plant units.
pub trait HorizonModel<T: Real> {
    type State: Clone + fmt::Debug;

    fn output(&self, s: &Self::State) -> T;

    /// Next state after holding `u` with `y_fb` in the output-feedback term.
    fn advance(&self, s: &Self::State, u: T, y_fb: T) -> Self::State;

    /// Outputs `y_0 .. y_{m-1}` from state `s` under the inputs `u[0..m]`.
    /// Step 0 feeds back `fb0`; later steps feed back `y_i + fb_offset`.
    /// When `jac` is given it receives `d y_i / d u_j` (m x m).
    fn rollout(
        &self,
        s: &Self::State,
        u: &[T],
        fb0: T,
        fb_offset: T,
        jac: Option<&mut DMatrix<T>>,
    ) -> Vec<T>;
}

/// ESN prepared for repeated horizon rollouts: sparse couplings, readout
/// and unit scaling.
#[derive(Debug, Clone)]
pub struct EsnPredictor<T: Real> {
    w_x: SparseRows<T>,
    w_u: Vec<T>,
    w_y: Vec<T>,
    w_out1: Vec<T>,
    w_out2: T,
    scaling: SignalScaling<T>,
}

impl<T: Real> EsnPredictor<T> {
    pub fn new(model: &EsnModel<T>) -> Result<Self> {
        let n = model.n();
        if model.readout.n() != n {
            return Err(Error::Dimension {
                what: "readout",
                expected: n,
                got: model.readout.n(),
            });
        }
        Ok(Self {
            w_x: model.reservoir.sparse_rows(),
            w_u: model.reservoir.w_u.iter().copied().collect(),
            w_y: model.reservoir.w_y.iter().copied().collect(),
            w_out1: model.readout.w_out1.iter().copied().collect(),
            w_out2: model.readout.w_out2,
            scaling: model.scaling,
        })
    }

    pub fn n(&self) -> usize {
        self.w_u.len()
    }

    fn net_output(&self, x: &[T], u_prev: T) -> T {
        x.iter()
            .zip(&self.w_out1)
            .fold(self.w_out2 * u_prev, |a, (&xi, &w)| a + xi * w)
    }

    fn net_step(&self, x: &[T], u: T, y: T, out: &mut [T]) {
        self.w_x.mul_into(x, out);
        for i in 0..out.len() {
            out[i] = (out[i] + self.w_u[i] * u + self.w_y[i] * y).tanh();
        }
    }
}

impl<T: Real> HorizonModel<T> for EsnPredictor<T> {
    /// `u_prev` is held in network units.
    type State = EsnState<T>;

    fn output(&self, s: &EsnState<T>) -> T {
        self.scaling
            .y_from_net(self.net_output(s.x.as_slice(), s.u_prev))
    }

    fn advance(&self, s: &EsnState<T>, u: T, y_fb: T) -> EsnState<T> {
        let un = self.scaling.u_to_net(u);
        let mut x = DVector::zeros(self.n());
        self.net_step(
            s.x.as_slice(),
            un,
            self.scaling.y_to_net(y_fb),
            x.as_mut_slice(),
        );
        EsnState { x, u_prev: un }
    }

    fn rollout(
        &self,
        s: &EsnState<T>,
        u: &[T],
        fb0: T,
        fb_offset: T,
        jac: Option<&mut DMatrix<T>>,
    ) -> Vec<T> {
        let n = self.n();
        let m = u.len();
        let sc = &self.scaling;
        let un: Vec<T> = u.iter().map(|&v| sc.u_to_net(v)).collect();
        let off = fb_offset / sc.y_half_range;
        let mut x = s.x.as_slice().to_vec();
        let mut next = vec![T::zero(); n];
        let mut out = Vec::with_capacity(m);
        match jac {
            None => {
                for i in 0..m {
                    let u_prev = if i == 0 { s.u_prev } else { un[i - 1] };
                    let y = self.net_output(&x, u_prev);
                    out.push(sc.y_from_net(y));
                    if i + 1 == m {
                        break;
                    }
                    let fb = if i == 0 { sc.y_to_net(fb0) } else { y + off };
                    self.net_step(&x, un[i], fb, &mut next);
                    std::mem::swap(&mut x, &mut next);
                }
            }
            Some(jac) => {
                // forward sensitivities in network units: column j of `sens`
                // is d x_i / d un_j
                *jac = DMatrix::zeros(m, m);
                let mut sens = DMatrix::<T>::zeros(n, m);
                let mut sens_next = DMatrix::<T>::zeros(n, m);
                let mut dy = vec![T::zero(); m];
                let gain = sc.y_half_range / sc.u_half_range;
                for i in 0..m {
                    let u_prev = if i == 0 { s.u_prev } else { un[i - 1] };
                    let y = self.net_output(&x, u_prev);
                    out.push(sc.y_from_net(y));
                    for (j, d) in dy.iter_mut().enumerate().take(i) {
                        *d = self.net_output(sens.column(j).as_slice(), T::zero());
                    }
                    if i >= 1 {
                        dy[i - 1] += self.w_out2;
                    }
                    for j in 0..i {
                        jac[(i, j)] = dy[j] * gain;
                    }
                    if i + 1 == m {
                        break;
                    }
                    let fb = if i == 0 { sc.y_to_net(fb0) } else { y + off };
                    self.net_step(&x, un[i], fb, &mut next);
                    // only inputs 0..=i influence x_{i+1}
                    for j in 0..=i {
                        let mut col = sens_next.column_mut(j);
                        let colv = col.as_mut_slice();
                        self.w_x.mul_into(sens.column(j).as_slice(), colv);
                        let fb_sens = if i == 0 { T::zero() } else { dy[j] };
                        let direct = if j == i { T::one() } else { T::zero() };
                        for k in 0..n {
                            let d = T::one() - next[k] * next[k];
                            colv[k] = d * (colv[k] + self.w_u[k] * direct + self.w_y[k] * fb_sens);
                        }
                    }
                    std::mem::swap(&mut sens, &mut sens_next);
                    std::mem::swap(&mut x, &mut next);
                }
            }
        }
        out
    }
}

/// Linear counterpart of the ESN structure, for oracle tests:
/// `x+ = A x + b u + f y_fb`, `y = c'x + d u_prev`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel<T: Real> {
    pub a: DMatrix<T>,
    pub b: DVector<T>,
    pub f: DVector<T>,
    pub c: DVector<T>,
    pub d: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearState<T: Real> {
    pub x: DVector<T>,
    pub u_prev: T,
}

impl<T: Real> HorizonModel<T> for LinearModel<T> {
    type State = LinearState<T>;

    fn output(&self, s: &LinearState<T>) -> T {
        self.c.dot(&s.x) + self.d * s.u_prev
    }

    fn advance(&self, s: &LinearState<T>, u: T, y_fb: T) -> LinearState<T> {
        LinearState {
            x: &self.a * &s.x + &self.b * u + &self.f * y_fb,
            u_prev: u,
        }
    }

    fn rollout(
        &self,
        s: &LinearState<T>,
        u: &[T],
        fb0: T,
        fb_offset: T,
        jac: Option<&mut DMatrix<T>>,
    ) -> Vec<T> {
        let m = u.len();
        let mut st = s.clone();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let y = self.output(&st);
            out.push(y);
            let fb = if i == 0 { fb0 } else { y + fb_offset };
            st = self.advance(&st, u[i], fb);
        }
        if let Some(jac) = jac {
            let n = self.b.len();
            *jac = DMatrix::zeros(m, m);
            let mut sens = DMatrix::<T>::zeros(n, m);
            for i in 0..m {
                for j in 0..i {
                    let direct = if j + 1 == i { self.d } else { T::zero() };
                    jac[(i, j)] = self.c.dot(&sens.column(j)) + direct;
                }
                let mut next = &self.a * &sens;
                for j in 0..=i.min(m - 1) {
                    if j == i {
                        next.column_mut(j).axpy(T::one(), &self.b, T::one());
                    }
                    if i > 0 {
                        let dyj = jac[(i, j)];
                        next.column_mut(j).axpy(dyj, &self.f, T::one());
                    }
                }
                sens = next;
            }
        }
        out
    }
}

pub fn estimate_disturbance<T: Real>(y_measured: T, y_model: T) -> T {
    y_measured - y_model
}

/// Controller memory between samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState<S, T: Real> {
    pub model: S,
    /// Last applied input, plant units.
    pub u_prev: T,
    pub d_hat: T,
    pub y_ref: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution<T: Real> {
    pub delta_u: Vec<T>,
    /// Accumulated inputs `u(k) .. u(k+N-1)`.
    pub u: Vec<T>,
    /// `y(k+i) + d` over the horizon.
    pub predicted_y: Vec<T>,
    pub cost: T,
    pub iterations: usize,
    pub solve_time: f64,
    pub converged: bool,
    /// Objective at the start and after every accepted step.
    pub cost_history: Vec<T>,
}

fn feedback_terms<T: Real>(mode: FeedbackMode, y_measured: T, y_model: T, d_hat: T) -> (T, T) {
    match mode {
        FeedbackMode::Measured => (y_measured, d_hat),
        FeedbackMode::Predicted => (y_model, T::zero()),
    }
}

/// Horizon outputs plus disturbance for the given moves.
pub fn predict<T: Real, M: HorizonModel<T>>(
    model: &M,
    cs: &ControllerState<M::State, T>,
    delta_u: &[T],
    mode: FeedbackMode,
) -> Vec<T> {
    let u = accumulate(cs.u_prev, delta_u);
    let y_model = model.output(&cs.model);
    let (fb0, off) = feedback_terms(mode, y_model + cs.d_hat, y_model, cs.d_hat);
    model
        .rollout(&cs.model, &u, fb0, off, None)
        .into_iter()
        .map(|y| y + cs.d_hat)
        .collect()
}

fn accumulate<T: Real>(u_prev: T, delta_u: &[T]) -> Vec<T> {
    let mut acc = u_prev;
    delta_u
        .iter()
        .map(|&d| {
            acc += d;
            acc
        })
        .collect()
}

fn differences<T: Real>(u_prev: T, u: &[T]) -> Vec<T> {
    let mut last = u_prev;
    u.iter()
        .map(|&v| {
            let d = v - last;
            last = v;
            d
        })
        .collect()
}

/// The tracking objective for one sample, evaluated in accumulated inputs.
pub struct Objective<'a, T: Real, M: HorizonModel<T>> {
    pub model: &'a M,
    pub state: &'a M::State,
    pub u_prev: T,
    pub d_hat: T,
    pub y_ref: T,
    pub q: T,
    pub r: T,
    fb0: T,
    fb_offset: T,
}

impl<'a, T: Real, M: HorizonModel<T>> Objective<'a, T, M> {
    pub fn new(
        model: &'a M,
        cs: &'a ControllerState<M::State, T>,
        cfg: &MpcConfig,
        y_measured: T,
    ) -> Self {
        let y_model = model.output(&cs.model);
        let (fb0, fb_offset) = feedback_terms(cfg.feedback, y_measured, y_model, cs.d_hat);
        Self {
            model,
            state: &cs.model,
            u_prev: cs.u_prev,
            d_hat: cs.d_hat,
            y_ref: cs.y_ref,
            q: T::lit(cfg.q),
            r: T::lit(cfg.r),
            fb0,
            fb_offset,
        }
    }

    fn parts(&self, u: &[T], y: &[T]) -> T {
        let e = y.iter().fold(T::zero(), |a, &yi| {
            let ei = yi + self.d_hat - self.y_ref;
            a + ei * ei
        });
        let du = differences(self.u_prev, u)
            .iter()
            .fold(T::zero(), |a, &d| a + d * d);
        self.q * e + self.r * du
    }

    pub fn cost(&self, u: &[T]) -> T {
        let y = self
            .model
            .rollout(self.state, u, self.fb0, self.fb_offset, None);
        self.parts(u, &y)
    }

    /// Cost, gradient and Gauss-Newton Hessian with respect to `U`, plus the
    /// model outputs.
    pub fn linearize(&self, u: &[T]) -> (T, DVector<T>, DMatrix<T>, Vec<T>) {
        let m = u.len();
        let mut jac = DMatrix::zeros(m, m);
        let y = self
            .model
            .rollout(self.state, u, self.fb0, self.fb_offset, Some(&mut jac));
        let cost = self.parts(u, &y);
        let two = T::lit(2.0);
        let e = DVector::from_fn(m, |i, _| y[i] + self.d_hat - self.y_ref);
        let du = differences(self.u_prev, u);
        // D' du, where D is the first-difference operator
        let dtd_du = DVector::from_fn(m, |i, _| if i + 1 < m { du[i] - du[i + 1] } else { du[i] });
        let grad = jac.tr_mul(&e) * (two * self.q) + dtd_du * (two * self.r);
        let mut hess = jac.tr_mul(&jac) * (two * self.q);
        for i in 0..m {
            let diag = if i + 1 < m { T::lit(4.0) } else { two };
            hess[(i, i)] += diag * self.r;
            if i + 1 < m {
                hess[(i, i + 1)] -= two * self.r;
                hess[(i + 1, i)] -= two * self.r;
            }
        }
        (cost, grad, hess, y)
    }

    /// Gradient with respect to the moves: `dJ/d du_j = sum_{i>=j} dJ/dU_i`.
    pub fn gradient_moves(&self, delta_u: &[T]) -> (T, Vec<T>) {
        let u = accumulate(self.u_prev, delta_u);
        let (cost, g, _, _) = self.linearize(&u);
        let mut out = vec![T::zero(); g.len()];
        let mut acc = T::zero();
        for i in (0..g.len()).rev() {
            acc += g[i];
            out[i] = acc;
        }
        (cost, out)
    }

    pub fn cost_moves(&self, delta_u: &[T]) -> T {
        self.cost(&accumulate(self.u_prev, delta_u))
    }
}

fn clip<T: Real>(v: T, lo: T, hi: T) -> T {
    v.max(lo).min(hi)
}

/// Projected Gauss-Newton from the warm start `warm` (moves).
pub fn solve<T: Real, M: HorizonModel<T>>(
    model: &M,
    cs: &ControllerState<M::State, T>,
    cfg: &MpcConfig,
    y_measured: T,
    warm: &[T],
) -> Result<MpcSolution<T>> {
    cfg.validate()?;
    let n = cfg.horizon;
    if warm.len() != n {
        return Err(Error::Dimension {
            what: "warm start",
            expected: n,
            got: warm.len(),
        });
    }
    let started = Instant::now();
    let (lo, hi) = (T::lit(cfg.u_min), T::lit(cfg.u_max));
    let obj = Objective::new(model, cs, cfg, y_measured);
    let mut u: Vec<T> = accumulate(cs.u_prev, warm)
        .into_iter()
        .map(|v| clip(v, lo, hi))
        .collect();
    let tol = T::lit(cfg.solver.tol);
    let c1 = T::lit(cfg.solver.armijo);
    let (mut cost, mut grad, mut hess, mut y) = obj.linearize(&u);
    let mut history = vec![cost];
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let pg = (0..n).fold(T::zero(), |a, i| {
            a.max((u[i] - clip(u[i] - grad[i], lo, hi)).abs())
        });
        if pg <= tol {
            converged = true;
            break;
        }
        if iterations >= cfg.solver.max_iter {
            break;
        }
        // active bounds: at (or within the projected-gradient scale of) a
        // bound with the gradient pointing out of the box
        let eps = pg.min(T::lit(1e-8));
        let active: Vec<bool> = (0..n)
            .map(|i| {
                (u[i] <= lo + eps && grad[i] > T::zero())
                    || (u[i] >= hi - eps && grad[i] < T::zero())
            })
            .collect();
        let free: Vec<usize> = (0..n).filter(|&i| !active[i]).collect();
        let mut step = DVector::<T>::zeros(n);
        if !free.is_empty() {
            let h = DMatrix::from_fn(free.len(), free.len(), |a, b| hess[(free[a], free[b])]);
            let g = DVector::from_fn(free.len(), |a, _| -grad[free[a]]);
            let p = match h.clone().cholesky() {
                Some(ch) => ch.solve(&g),
                None => g.clone(),
            };
            for (a, &i) in free.iter().enumerate() {
                step[i] = p[a];
            }
        }
        for i in (0..n).filter(|&i| active[i]) {
            step[i] = -grad[i] / hess[(i, i)];
        }
        let mut t = T::one();
        let mut accepted = None;
        for _ in 0..=cfg.solver.max_backtracks {
            let trial: Vec<T> = (0..n).map(|i| clip(u[i] + t * step[i], lo, hi)).collect();
            let decrease = (0..n).fold(T::zero(), |a, i| a + grad[i] * (trial[i] - u[i]));
            let c = obj.cost(&trial);
            if c <= cost + c1 * decrease {
                accepted = Some(trial);
                break;
            }
            t *= T::lit(0.5);
        }
        let Some(trial) = accepted else { break };
        iterations += 1;
        u = trial;
        (cost, grad, hess, y) = obj.linearize(&u);
        history.push(cost);
    }
    let delta_u = differences(cs.u_prev, &u);
    Ok(MpcSolution {
        delta_u,
        predicted_y: y.iter().map(|&v| v + cs.d_hat).collect(),
        u,
        cost,
        iterations,
        solve_time: started.elapsed().as_secs_f64(),
        converged,
        cost_history: history,
    })
}

/// One row of the closed-loop log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub time: f64,
    pub y_ref: f64,
    pub y_sys: f64,
    pub y_model: f64,
    pub d_hat: f64,
    pub u: f64,
    pub delta_u: f64,
    pub cost: f64,
    pub iterations: usize,
    pub solve_time: f64,
    pub converged: bool,
}

impl LogRecord {
    pub const HEADER: &'static str =
        "time,y_ref,y_sys,y_model,d_hat,u,delta_u,cost,iterations,solve_time,converged";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.time,
            self.y_ref,
            self.y_sys,
            self.y_model,
            self.d_hat,
            self.u,
            self.delta_u,
            self.cost,
            self.iterations,
            self.solve_time,
            u8::from(self.converged)
        )
    }
}

/// Receding-horizon loop around a [`HorizonModel`].
#[derive(Debug, Clone)]
pub struct Controller<T: Real, M: HorizonModel<T>> {
    pub model: M,
    pub config: MpcConfig,
    pub state: ControllerState<M::State, T>,
    warm: Vec<T>,
    time: f64,
}

impl<T: Real, M: HorizonModel<T>> Controller<T, M> {
    pub fn new(
        model: M,
        config: MpcConfig,
        initial: M::State,
        u_prev: T,
        y_ref: T,
    ) -> Result<Self> {
        config.validate()?;
        let warm = vec![T::zero(); config.horizon];
        let state = ControllerState {
            model: initial,
            u_prev,
            d_hat: T::zero(),
            y_ref,
        };
        Ok(Self {
            model,
            config,
            state,
            warm,
            time: 0.0,
        })
    }

    pub fn set_reference(&mut self, y_ref: T) {
        self.state.y_ref = y_ref;
    }

    /// Measure, estimate the disturbance, solve, apply the first move and
    /// advance the internal model.
    pub fn step_closed_loop<P: DiscretePlant<T> + ?Sized>(
        &mut self,
        plant: &mut P,
    ) -> Result<LogRecord> {
        let y_sys = plant.output()?;
        let y_model = self.model.output(&self.state.model);
        self.state.d_hat = estimate_disturbance(y_sys, y_model);
        let sol = solve(&self.model, &self.state, &self.config, y_sys, &self.warm)?;
        let du = sol.delta_u[0];
        let u = self.state.u_prev + du;
        plant.advance(u)?;
        let y_fb = match self.config.feedback {
            FeedbackMode::Measured => y_sys,
            FeedbackMode::Predicted => y_model,
        };
        self.state.model = self.model.advance(&self.state.model, u, y_fb);
        self.state.u_prev = u;
        self.warm = sol.delta_u[1..].to_vec();
        self.warm.push(T::zero());
        let rec = LogRecord {
            time: self.time,
            y_ref: self.state.y_ref.as_f64(),
            y_sys: y_sys.as_f64(),
            y_model: y_model.as_f64(),
            d_hat: self.state.d_hat.as_f64(),
            u: u.as_f64(),
            delta_u: du.as_f64(),
            cost: sol.cost.as_f64(),
            iterations: sol.iterations,
            solve_time: sol.solve_time,
            converged: sol.converged,
        };
        self.time += self.config.t_s;
        Ok(rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ident::ReadoutWeights;
    use crate::reservoir::{ReservoirWeights, ScalingTarget};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn small_esn(seed: u64) -> EsnModel<f64> {
        let reservoir =
            ReservoirWeights::generate(12, 0.3, seed, ScalingTarget::norm(0.7)).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed + 100);
        let w1 = DVector::from_fn(12, |_, _| rng.random_range(-0.3..0.3));
        let readout = ReadoutWeights::new(w1, 0.2, 0.0);
        let scaling = SignalScaling {
            u_center: 14.7,
            u_half_range: 2.0,
            y_center: 7.0,
            y_half_range: 1.3,
        };
        EsnModel {
            reservoir,
            readout,
            scaling,
        }
    }

    fn linear_model() -> LinearModel<f64> {
        LinearModel {
            a: DMatrix::from_row_slice(2, 2, &[0.8, 0.1, -0.05, 0.6]),
            b: DVector::from_vec(vec![0.5, 0.2]),
            f: DVector::from_vec(vec![0.1, -0.05]),
            c: DVector::from_vec(vec![1.0, 0.5]),
            d: 0.3,
        }
    }

    fn wide_config(n: usize) -> MpcConfig {
        MpcConfig {
            horizon: n,
            u_min: -1e6,
            u_max: 1e6,
            ..MpcConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(MpcConfig::default().validate().is_ok());
        assert!(MpcConfig {
            horizon: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(MpcConfig {
            r: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(MpcConfig {
            u_min: 17.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(
            "predicted".parse::<FeedbackMode>().unwrap(),
            FeedbackMode::Predicted
        );
        assert!("x".parse::<FeedbackMode>().is_err());
    }

    #[test]
    fn perfect_model_has_no_disturbance() {
        assert_eq!(estimate_disturbance(7.25, 7.25), 0.0);
        assert_eq!(estimate_disturbance(7.5, 7.25), 0.25);
    }

    fn jac_fd<M: HorizonModel<f64>>(
        m: &M,
        s: &M::State,
        u: &[f64],
        fb0: f64,
        off: f64,
    ) -> DMatrix<f64> {
        let h = 1e-6;
        let n = u.len();
        DMatrix::from_fn(n, n, |i, j| {
            let mut up = u.to_vec();
            let mut dn = u.to_vec();
            up[j] += h;
            dn[j] -= h;
            (m.rollout(s, &up, fb0, off, None)[i] - m.rollout(s, &dn, fb0, off, None)[i])
                / (2.0 * h)
        })
    }

    #[test]
    fn esn_jacobian_matches_finite_differences() {
        let model = small_esn(3);
        let p = EsnPredictor::new(&model).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..10 {
            let s = EsnState::new(
                DVector::from_fn(12, |_, _| rng.random_range(-0.5..0.5)),
                0.1,
            );
            let u: Vec<f64> = (0..8).map(|_| rng.random_range(12.7..16.7)).collect();
            let mut jac = DMatrix::zeros(8, 8);
            let y = p.rollout(&s, &u, 7.1, 0.2, Some(&mut jac));
            assert_eq!(y, p.rollout(&s, &u, 7.1, 0.2, None));
            let fd = jac_fd(&p, &s, &u, 7.1, 0.2);
            assert!(
                (&jac - &fd).amax() <= 1e-6 * (1.0 + fd.amax()),
                "{jac} {fd}"
            );
            // causality: y_i does not depend on u_j for j >= i
            for i in 0..8 {
                for j in i..8 {
                    assert_eq!(jac[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn linear_jacobian_matches_finite_differences() {
        let m = linear_model();
        let s = LinearState {
            x: DVector::from_vec(vec![0.3, -0.2]),
            u_prev: 0.1,
        };
        let u = vec![0.5, -0.2, 0.1, 0.9, 0.0];
        let mut jac = DMatrix::zeros(5, 5);
        m.rollout(&s, &u, 0.4, 0.1, Some(&mut jac));
        let fd = jac_fd(&m, &s, &u, 0.4, 0.1);
        assert!((&jac - &fd).amax() < 1e-8);
    }

    #[test]
    fn esn_rollout_matches_stepwise_model() {
        let model = small_esn(4);
        let p = EsnPredictor::new(&model).unwrap();
        let s0 = model.settle(15.0, 7.0, 50).unwrap();
        let u = [14.0, 15.5, 16.0, 13.0];
        let y = p.rollout(&s0, &u, 7.2, 0.1, None);
        let mut s = s0.clone();
        let mut fb = 7.2;
        for (i, &ui) in u.iter().enumerate() {
            let yi = model.output(&s).unwrap();
            assert!((yi - y[i]).abs() < 1e-12);
            if i > 0 {
                fb = yi + 0.1;
            }
            s = model.step(&s, ui, fb).unwrap();
        }
    }

    #[test]
    fn move_gradient_matches_finite_differences() {
        let model = small_esn(5);
        let p = EsnPredictor::new(&model).unwrap();
        let cfg = MpcConfig::default();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..20 {
            let s = EsnState::new(
                DVector::from_fn(12, |_, _| rng.random_range(-0.5..0.5)),
                0.0,
            );
            let cs = ControllerState {
                model: s,
                u_prev: 14.0,
                d_hat: rng.random_range(-0.5..0.5),
                y_ref: 7.3,
            };
            let obj = Objective::new(&p, &cs, &cfg, 7.0);
            let du: Vec<f64> = (0..20).map(|_| rng.random_range(-0.3..0.3)).collect();
            let (_, g) = obj.gradient_moves(&du);
            for j in 0..20 {
                let h = 1e-6;
                let mut a = du.clone();
                let mut b = du.clone();
                a[j] += h;
                b[j] -= h;
                let fd = (obj.cost_moves(&a) - obj.cost_moves(&b)) / (2.0 * h);
                assert!(
                    (g[j] - fd).abs() <= 1e-5 * g[j].abs().max(1e-3),
                    "{j}: {} vs {fd}",
                    g[j]
                );
            }
        }
    }

    #[test]
    fn zero_moves_optimal_at_free_run_reference() {
        let model = small_esn(6);
        let p = EsnPredictor::new(&model).unwrap();
        let s = model.settle(15.0, 7.0, 100).unwrap();
        // the free-run equilibrium under u = 15
        let mut st = s.clone();
        let mut y = model.output(&st).unwrap();
        for _ in 0..400 {
            st = p.advance(&st, 15.0, y);
            y = p.output(&st);
        }
        let cs = ControllerState {
            model: st,
            u_prev: 15.0,
            d_hat: 0.0,
            y_ref: y,
        };
        let cfg = MpcConfig {
            feedback: FeedbackMode::Predicted,
            ..MpcConfig::default()
        };
        let sol = solve(&p, &cs, &cfg, y, &vec![0.0; 20]).unwrap();
        assert!(sol.converged);
        assert!(sol.delta_u.iter().all(|d| d.abs() < 1e-9));
        assert!(sol.cost < 1e-18);
        let pred = predict(&p, &cs, &vec![0.0; 20], FeedbackMode::Predicted);
        assert!(pred.iter().all(|v| (v - y).abs() < 1e-12));
    }

    // closed-form batch solution: y = G U + h, with G and h read off
    // impulse responses of the rollout
    fn batch_oracle(
        m: &LinearModel<f64>,
        cs: &ControllerState<LinearState<f64>, f64>,
        cfg: &MpcConfig,
        y_meas: f64,
    ) -> Vec<f64> {
        let n = cfg.horizon;
        let y_model = m.output(&cs.model);
        let (fb0, off) = feedback_terms(cfg.feedback, y_meas, y_model, cs.d_hat);
        let h = DVector::from_vec(m.rollout(&cs.model, &vec![0.0; n], fb0, off, None));
        let mut g = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let y = DVector::from_vec(m.rollout(&cs.model, &e, fb0, off, None));
            g.set_column(j, &(y - &h));
        }
        let mut d = DMatrix::<f64>::identity(n, n);
        for i in 1..n {
            d[(i, i - 1)] = -1.0;
        }
        let mut e0 = DVector::zeros(n);
        e0[0] = cs.u_prev;
        let target = DVector::from_element(n, cs.y_ref - cs.d_hat) - h;
        let lhs = g.tr_mul(&g) * cfg.q + d.tr_mul(&d) * cfg.r;
        let rhs = g.tr_mul(&target) * cfg.q + d.tr_mul(&e0) * cfg.r;
        let u = lhs.lu().solve(&rhs).unwrap();
        differences(cs.u_prev, u.as_slice())
    }

    #[test]
    fn unconstrained_linear_matches_closed_form() {
        let m = linear_model();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for mode in [FeedbackMode::Measured, FeedbackMode::Predicted] {
            for _ in 0..10 {
                let cfg = MpcConfig {
                    feedback: mode,
                    ..wide_config(10)
                };
                let cs = ControllerState {
                    model: LinearState {
                        x: DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
                        u_prev: 0.2,
                    },
                    u_prev: 0.2,
                    d_hat: rng.random_range(-0.5..0.5),
                    y_ref: rng.random_range(-1.0..1.0),
                };
                let y_meas = m.output(&cs.model) + cs.d_hat;
                let sol = solve(&m, &cs, &cfg, y_meas, &vec![0.0; 10]).unwrap();
                let oracle = batch_oracle(&m, &cs, &cfg, y_meas);
                assert!(sol.converged);
                for (a, b) in sol.delta_u.iter().zip(&oracle) {
                    assert!((a - b).abs() < 1e-8, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn warm_start_reconverges_quickly() {
        let m = linear_model();
        let cfg = wide_config(10);
        let mut ctl = Controller::new(
            m.clone(),
            cfg,
            LinearState {
                x: DVector::zeros(2),
                u_prev: 0.0,
            },
            0.0,
            0.8,
        )
        .unwrap();
        struct Same(LinearModel<f64>, LinearState<f64>);
        impl DiscretePlant<f64> for Same {
            fn sample_time(&self) -> f64 {
                10.0
            }
            fn output(&self) -> Result<f64> {
                Ok(self.0.output(&self.1))
            }
            fn advance(&mut self, u: f64) -> Result<()> {
                let y = self.0.output(&self.1);
                self.1 = self.0.advance(&self.1, u, y);
                Ok(())
            }
        }
        let mut plant = Same(
            m,
            LinearState {
                x: DVector::zeros(2),
                u_prev: 0.0,
            },
        );
        for k in 0..30 {
            let rec = ctl.step_closed_loop(&mut plant).unwrap();
            assert!(rec.converged);
            if k > 0 {
                assert!(
                    rec.iterations <= 2,
                    "step {k}: {} iterations",
                    rec.iterations
                );
            }
        }
    }

    #[test]
    fn cost_history_never_increases_and_bounds_hold() {
        let model = small_esn(7);
        let p = EsnPredictor::new(&model).unwrap();
        let cfg = MpcConfig::default();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..20 {
            let s = EsnState::new(
                DVector::from_fn(12, |_, _| rng.random_range(-0.8..0.8)),
                0.0,
            );
            let u_prev = rng.random_range(12.7..16.7);
            let cs = ControllerState {
                model: s,
                u_prev,
                d_hat: 0.0,
                y_ref: rng.random_range(4.0..10.0),
            };
            let warm: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
            let sol = solve(&p, &cs, &cfg, 7.0, &warm).unwrap();
            for w in sol.cost_history.windows(2) {
                assert!(w[1] <= w[0]);
            }
            let u = accumulate(u_prev, &sol.delta_u);
            for (a, b) in u.iter().zip(&sol.u) {
                assert!((a - b).abs() < 1e-9);
                assert!((12.7..=16.7).contains(b));
            }
        }
    }

    #[test]
    fn single_move_is_causal_in_prediction() {
        let model = small_esn(8);
        let p = EsnPredictor::new(&model).unwrap();
        let s = model.settle(15.0, 7.0, 50).unwrap();
        let cs = ControllerState {
            model: s,
            u_prev: 15.0,
            d_hat: 0.1,
            y_ref: 7.0,
        };
        let base = predict(&p, &cs, &vec![0.0; 10], FeedbackMode::Measured);
        let mut du = vec![0.0; 10];
        du[4] = 0.5;
        let moved = predict(&p, &cs, &du, FeedbackMode::Measured);
        // y(k+i) reads u(k+i-1): the move shows from i = 5 on
        for i in 0..=4 {
            assert_eq!(base[i], moved[i]);
        }
        assert!((base[5] - moved[5]).abs() > 0.0);
    }
}
