//! Readout training: teacher-forced state collection, least squares and
//! LASSO fits, free-run simulation and the fitting score.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::reservoir::{readout, EsnState, ReservoirWeights};
use crate::scalar::Real;

/// Relative threshold under which a readout weight counts as zero.
pub const SUPPORT_THRESHOLD: f64 = 1e-10;

/// Synchronized input/output record sampled every `t_s` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Real> {
    pub u: Vec<T>,
    pub y: Vec<T>,
    pub t_s: f64,
    /// Washout: leading samples excluded from regression and scoring.
    pub k0: usize,
}

impl<T: Real> Dataset<T> {
    pub fn new(u: Vec<T>, y: Vec<T>, t_s: f64, k0: usize) -> Result<Self> {
        if u.len() != y.len() {
            return Err(Error::Dimension {
                what: "dataset output length",
                expected: u.len(),
                got: y.len(),
            });
        }
        if !(t_s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sampling time {t_s} must be positive"
            )));
        }
        if u.len() <= k0 {
            return Err(Error::TooShort { len: u.len(), k0 });
        }
        Ok(Self { u, y, t_s, k0 })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn with_washout(mut self, k0: usize) -> Result<Self> {
        if self.len() <= k0 {
            return Err(Error::TooShort {
                len: self.len(),
                k0,
            });
        }
        self.k0 = k0;
        Ok(self)
    }
}

/// Regression data: rows `(x(k), u(k-1))` against targets `y_sys(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorMatrix<T: Real> {
    pub phi: DMatrix<T>,
    pub y_target: DVector<T>,
}

impl<T: Real> RegressorMatrix<T> {
    pub fn rows(&self) -> usize {
        self.phi.nrows()
    }

    pub fn cols(&self) -> usize {
        self.phi.ncols()
    }

    /// `||y - Phi w||^2 + lambda ||w||_1`.
    pub fn lasso_objective(&self, w: &DVector<T>, lambda: T) -> T {
        let r = &self.y_target - &self.phi * w;
        r.norm_squared() + lambda * w.lp_norm(1)
    }

    /// Smallest penalty for which the zero vector is optimal: `2 ||Phi' y||_inf`.
    pub fn lambda_max(&self) -> T {
        let c = self.phi.tr_mul(&self.y_target);
        c.amax() * T::lit(2.0)
    }
}

/// Trained output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutWeights<T: Real> {
    pub w_out1: DVector<T>,
    pub w_out2: T,
    /// Penalty used in training; zero for least squares.
    pub lambda: T,
    /// Indices `i` with `|w_out1[i]|` above [`SUPPORT_THRESHOLD`] times the
    /// largest readout magnitude.
    pub support: Vec<usize>,
}

impl<T: Real> ReadoutWeights<T> {
    pub fn new(w_out1: DVector<T>, w_out2: T, lambda: T) -> Self {
        let support = support_of(&w_out1, w_out2);
        Self {
            w_out1,
            w_out2,
            lambda,
            support,
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(DVector::zeros(n), T::zero(), T::zero())
    }

    /// Stacked `[W_out1, W_out2]` as used in the regression.
    pub fn from_stacked(w: &DVector<T>, lambda: T) -> Self {
        let n = w.len() - 1;
        Self::new(w.rows(0, n).into_owned(), w[n], lambda)
    }

    pub fn stacked(&self) -> DVector<T> {
        let n = self.w_out1.len();
        DVector::from_fn(
            n + 1,
            |i, _| if i < n { self.w_out1[i] } else { self.w_out2 },
        )
    }

    pub fn n(&self) -> usize {
        self.w_out1.len()
    }

    pub fn cast<U: Real>(&self) -> ReadoutWeights<U> {
        ReadoutWeights {
            w_out1: self.w_out1.map(|v| U::lit(v.as_f64())),
            w_out2: U::lit(self.w_out2.as_f64()),
            lambda: U::lit(self.lambda.as_f64()),
            support: self.support.clone(),
        }
    }
}

fn support_of<T: Real>(w_out1: &DVector<T>, w_out2: T) -> Vec<usize> {
    let scale = w_out1.iter().fold(w_out2.abs(), |m, v| m.max(v.abs()));
    if scale == T::zero() {
        return Vec::new();
    }
    let thr = scale * T::lit(SUPPORT_THRESHOLD);
    (0..w_out1.len())
        .filter(|&i| w_out1[i].abs() > thr)
        .collect()
}

/// Teacher-forced state collection.
///
/// Starting from `x0`, the reservoir is driven with the measured input and the
/// measured output in the feedback term. Row `k` of `phi` is `(x(k), u(k-1))`
/// with target `y(k)`; the first `k0` rows are dropped. `x0.u_prev` stands in
/// for `u(-1)`.
pub fn collect<T: Real>(
    w: &ReservoirWeights<T>,
    d: &Dataset<T>,
    x0: &EsnState<T>,
) -> Result<RegressorMatrix<T>> {
    if d.len() <= d.k0 {
        return Err(Error::TooShort {
            len: d.len(),
            k0: d.k0,
        });
    }
    if d.u.len() != d.y.len() {
        return Err(Error::Dimension {
            what: "dataset output length",
            expected: d.u.len(),
            got: d.y.len(),
        });
    }
    let n = w.n();
    if x0.dim() != n {
        return Err(Error::Dimension {
            what: "initial state",
            expected: n,
            got: x0.dim(),
        });
    }
    let rows = d.len() - d.k0;
    let mut phi = DMatrix::<T>::zeros(rows, n + 1);
    let mut y_target = DVector::<T>::zeros(rows);
    let mut s = x0.clone();
    for k in 0..d.len() {
        if k >= d.k0 {
            let r = k - d.k0;
            phi.view_mut((r, 0), (1, n)).tr_copy_from(&s.x);
            phi[(r, n)] = s.u_prev;
            y_target[r] = d.y[k];
        }
        s = w.step(&s, d.u[k], d.y[k])?;
    }
    Ok(RegressorMatrix { phi, y_target })
}

/// Teacher-forced run over the first `steps` samples; returns the state at
/// time `steps` (ready to produce `y(steps)`).
pub fn warm_up<T: Real>(
    w: &ReservoirWeights<T>,
    u: &[T],
    y: &[T],
    steps: usize,
    x0: &EsnState<T>,
) -> Result<EsnState<T>> {
    if u.len() < steps || y.len() < steps {
        return Err(Error::TooShort {
            len: u.len().min(y.len()),
            k0: steps,
        });
    }
    let mut s = x0.clone();
    for k in 0..steps {
        s = w.step(&s, u[k], y[k])?;
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsFit<T: Real> {
    pub readout: ReadoutWeights<T>,
    pub rank: usize,
    pub rank_deficient: bool,
}

/// Relative singular-value cutoff used by [`train_ls`] unless overridden.
pub const DEFAULT_RCOND: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsOptions {
    /// Singular values of `Phi` below `rcond * sigma_max` are treated as zero.
    /// Sparse reservoirs carry many nodes driven only by the last input and
    /// output; their columns are numerically dependent and, left in, give
    /// readouts that are exact on the training data and unstable in free run.
    pub rcond: f64,
}

impl Default for LsOptions {
    fn default() -> Self {
        Self {
            rcond: DEFAULT_RCOND,
        }
    }
}

/// Minimum-norm least-squares readout `min ||y - Phi w||^2` at the default
/// numerical rank cutoff.
pub fn train_ls<T: Real>(r: &RegressorMatrix<T>) -> Result<LsFit<T>> {
    train_ls_with(r, &LsOptions::default())
}

/// Householder QR of `Phi` followed by an SVD of the triangular factor;
/// directions below the cutoff are dropped (truncated pseudo-inverse).
pub fn train_ls_with<T: Real>(r: &RegressorMatrix<T>, opts: &LsOptions) -> Result<LsFit<T>> {
    let (m, p) = r.phi.shape();
    if m <= p {
        return Err(Error::InvalidArgument(format!(
            "least squares needs more rows than columns ({m} x {p})"
        )));
    }
    if !(opts.rcond >= 0.0 && opts.rcond < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "rcond must lie in [0, 1), got {}",
            opts.rcond
        )));
    }
    let qr = r.phi.clone().qr();
    let mut qty = r.y_target.clone();
    qr.q_tr_mul(&mut qty);
    let head = qty.rows(0, p).into_owned();
    let svd = nalgebra::SVD::try_new(qr.r(), true, true, T::epsilon(), 100_000)
        .ok_or_else(|| Error::Degenerate("singular value decomposition did not converge".into()))?;
    let smax = svd.singular_values.amax();
    let floor = smax * T::lit(m as f64) * T::epsilon();
    let cut = (smax * T::lit(opts.rcond)).max(floor);
    let (u, v_t) = match (&svd.u, &svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Degenerate("missing singular vectors".into())),
    };
    let mut coef = u.tr_mul(&head);
    let mut rank = 0;
    for (c, &sv) in coef.iter_mut().zip(svd.singular_values.iter()) {
        if sv > cut {
            *c /= sv;
            rank += 1;
        } else {
            *c = T::zero();
        }
    }
    let w = v_t.tr_mul(&coef);
    Ok(LsFit {
        readout: ReadoutWeights::from_stacked(&w, T::zero()),
        rank,
        rank_deficient: rank < p,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoOptions {
    /// Converged when the largest coordinate change over a sweep is below
    /// `tol * max(1, max|w|)`.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_sweeps: 200_000,
        }
    }
}

/// Cyclic coordinate descent on the Gram form of a regression problem.
///
/// Reusing one solver across a penalty grid avoids recomputing `Phi' Phi`.
pub struct LassoSolver<'a, T: Real> {
    problem: &'a RegressorMatrix<T>,
    gram: DMatrix<T>,
    corr: DVector<T>,
}

impl<'a, T: Real> LassoSolver<'a, T> {
    pub fn new(problem: &'a RegressorMatrix<T>) -> Self {
        let gram = problem.phi.tr_mul(&problem.phi);
        let corr = problem.phi.tr_mul(&problem.y_target);
        Self {
            problem,
            gram,
            corr,
        }
    }

    /// Minimizes `||y - Phi w||^2 + lambda ||w||_1`, optionally warm-started.
    pub fn solve(
        &self,
        lambda: T,
        warm: Option<&DVector<T>>,
        opts: &LassoOptions,
    ) -> Result<ReadoutWeights<T>> {
        if !(lambda >= T::zero()) {
            return Err(Error::InvalidArgument("lambda must be nonnegative".into()));
        }
        let p = self.gram.nrows();
        let mut w = match warm {
            Some(w0) if w0.len() == p => w0.clone(),
            Some(w0) => {
                return Err(Error::Dimension {
                    what: "warm start",
                    expected: p,
                    got: w0.len(),
                })
            }
            None => DVector::zeros(p),
        };
        // q = G w, maintained incrementally
        let mut q = &self.gram * &w;
        let half = lambda * T::lit(0.5);
        let tol = T::lit(opts.tol);
        let mut last_change = T::zero();
        for _ in 0..opts.max_sweeps {
            let mut max_change = T::zero();
            for j in 0..p {
                let gjj = self.gram[(j, j)];
                if gjj == T::zero() {
                    continue;
                }
                let old = w[j];
                let rho = self.corr[j] - (q[j] - gjj * old);
                let new = soft_threshold(rho, half) / gjj;
                let delta = new - old;
                if delta != T::zero() {
                    w[j] = new;
                    q.axpy(delta, &self.gram.column(j), T::one());
                    max_change = max_change.max(delta.abs());
                }
            }
            last_change = max_change;
            if max_change <= tol * w.amax().max(T::one()) {
                return Ok(ReadoutWeights::from_stacked(&w, lambda));
            }
        }
        Err(Error::LassoNotConverged {
            sweeps: opts.max_sweeps,
            objective: self.problem.lasso_objective(&w, lambda).as_f64(),
            last_change: last_change.as_f64(),
            last_iterate: w.iter().map(|v| v.as_f64()).collect(),
        })
    }
}

/// `sign(v) * max(|v| - t, 0)`.
pub fn soft_threshold<T: Real>(v: T, t: T) -> T {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        T::zero()
    }
}

/// LASSO readout by cyclic coordinate descent with soft-thresholding.
pub fn train_lasso<T: Real>(
    r: &RegressorMatrix<T>,
    lambda: T,
    opts: &LassoOptions,
) -> Result<ReadoutWeights<T>> {
    LassoSolver::new(r).solve(lambda, None, opts)
}

/// `100 (1 - ||y_sys - y_model|| / ||y_sys - mean(y_sys)||)` in percent.
pub fn fitting<T: Real>(y_sys: &[T], y_model: &[T]) -> Result<f64> {
    if y_sys.len() != y_model.len() {
        return Err(Error::Dimension {
            what: "model output length",
            expected: y_sys.len(),
            got: y_model.len(),
        });
    }
    if y_sys.is_empty() {
        return Err(Error::ConstantOutput);
    }
    let ys: Vec<f64> = y_sys.iter().map(|v| v.as_f64()).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let den = ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(Error::ConstantOutput);
    }
    let num = ys
        .iter()
        .zip(y_model)
        .map(|(a, b)| (a - b.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(100.0 * (1.0 - num / den))
}

/// Closed-loop (validation mode) simulation: the feedback term is driven by
/// the model's own output. `y0` is the feedback value for the first update
/// (usually the last measurement); the returned sequence holds
/// `y(k) = readout(x(k))` for each input sample.
pub fn free_run<T: Real>(
    w: &ReservoirWeights<T>,
    rw: &ReadoutWeights<T>,
    u: &[T],
    x0: &EsnState<T>,
    y0: T,
) -> Result<Vec<T>> {
    let mut s = x0.clone();
    let mut out = Vec::with_capacity(u.len());
    for (k, &uk) in u.iter().enumerate() {
        let yk = readout(&s, rw)?;
        out.push(yk);
        let fb = if k == 0 { y0 } else { yk };
        s = w.step(&s, uk, fb)?;
    }
    Ok(out)
}

/// Validation score: warm up teacher-forced over the washout, free-run the
/// rest, and score the free-run part.
pub fn validation_fitting<T: Real>(
    w: &ReservoirWeights<T>,
    rw: &ReadoutWeights<T>,
    d: &Dataset<T>,
) -> Result<f64> {
    let (_, y) = validation_run(w, rw, d)?;
    fitting(&d.y[d.k0..], &y)
}

/// Free-run model output over the scored part of a validation dataset.
pub fn validation_run<T: Real>(
    w: &ReservoirWeights<T>,
    rw: &ReadoutWeights<T>,
    d: &Dataset<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    if d.len() <= d.k0 {
        return Err(Error::TooShort {
            len: d.len(),
            k0: d.k0,
        });
    }
    let k0 = d.k0;
    let mut x0 = EsnState::zeros(w.n());
    x0.u_prev = d.u[0];
    let s = warm_up(w, &d.u, &d.y, k0, &x0)?;
    // from k0 on the model feeds back its own output
    let y0 = readout(&s, rw)?;
    let y = free_run(w, rw, &d.u[k0..], &s, y0)?;
    Ok((d.u[k0..].to_vec(), y))
}

/// Washout long enough for the initial condition to decay below `1e-8`
/// under a certified contraction rate; 200 samples otherwise.
pub fn default_washout(alpha: Option<f64>) -> usize {
    match alpha {
        Some(a) if a > 0.0 && a < 1.0 => ((1e-8f64).ln() / a.ln()).ceil() as usize,
        Some(_) => 1,
        None => 200,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reservoir::ScalingTarget;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_problem(rng: &mut ChaCha20Rng, m: usize, p: usize) -> RegressorMatrix<f64> {
        let phi = DMatrix::from_fn(m, p, |_, _| rng.random_range(-1.0..1.0));
        let y_target = DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
        RegressorMatrix { phi, y_target }
    }

    #[test]
    fn dataset_invariants() {
        assert!(Dataset::new(vec![1.0, 2.0], vec![1.0], 10.0, 0).is_err());
        assert!(Dataset::new(vec![1.0, 2.0], vec![1.0, 2.0], 0.0, 0).is_err());
        assert!(matches!(
            Dataset::new(vec![1.0, 2.0], vec![1.0, 2.0], 1.0, 2),
            Err(Error::TooShort { .. })
        ));
        assert!(Dataset::new(vec![1.0, 2.0], vec![1.0, 2.0], 1.0, 1).is_ok());
    }

    #[test]
    fn zero_data_gives_zero_states() {
        let w = ReservoirWeights::<f64>::generate(6, 0.5, 1, ScalingTarget::norm(0.9)).unwrap();
        let d = Dataset::new(vec![0.0; 20], vec![0.0; 20], 1.0, 5).unwrap();
        let r = collect(&w, &d, &EsnState::zeros(6)).unwrap();
        assert_eq!(r.phi.shape(), (15, 7));
        assert!(r.phi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn collected_row_matches_hand_computation() {
        let w = ReservoirWeights {
            w_x: DMatrix::from_element(1, 1, 0.5),
            w_u: DVector::from_element(1, 1.0),
            w_y: DVector::from_element(1, -0.5),
            density: 1.0,
            seed: 0,
            scaling: ScalingTarget::norm(0.5),
        };
        let d = Dataset::new(vec![0.3, 0.7, 0.0], vec![0.2, 0.1, 0.0], 1.0, 1).unwrap();
        let r = collect(&w, &d, &EsnState::new(DVector::from_element(1, 0.4), 0.9)).unwrap();
        let x1 = (0.5f64 * 0.4 + 0.3 - 0.5 * 0.2).tanh();
        let x2 = (0.5 * x1 + 0.7 - 0.5 * 0.1).tanh();
        assert_relative_eq!(r.phi[(0, 0)], x1, epsilon = 1e-15);
        assert_relative_eq!(r.phi[(0, 1)], 0.3);
        assert_relative_eq!(r.phi[(1, 0)], x2, epsilon = 1e-15);
        assert_relative_eq!(r.phi[(1, 1)], 0.7);
        assert_eq!(r.y_target.as_slice(), &[0.1, 0.0]);
    }

    #[test]
    fn washout_forgets_initial_state() {
        let n = 20;
        let w = ReservoirWeights::<f64>::generate(n, 0.2, 4, ScalingTarget::norm(0.8)).unwrap();
        let alpha = w.certify().alpha.unwrap();
        let k0 = 60;
        let u: Vec<f64> = (0..200).map(|k| (k as f64 * 0.1).sin()).collect();
        let y: Vec<f64> = (0..200).map(|k| (k as f64 * 0.05).cos()).collect();
        let d = Dataset::new(u, y, 1.0, k0).unwrap();
        let a = EsnState::new(DVector::from_element(n, 0.9), 0.0);
        let b = EsnState::new(DVector::from_element(n, -0.9), 0.0);
        let ra = collect(&w, &d, &a).unwrap();
        let rb = collect(&w, &d, &b).unwrap();
        let bound = alpha.powi(k0 as i32) * (&a.x - &b.x).norm();
        assert!((&ra.phi - &rb.phi).amax() <= bound);
    }

    #[test]
    fn ls_zero_target() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut r = random_problem(&mut rng, 30, 5);
        r.y_target.fill(0.0);
        let fit = train_ls(&r).unwrap();
        assert!(fit.readout.stacked().iter().all(|v| *v == 0.0));
        assert!(!fit.rank_deficient);
    }

    #[test]
    fn ls_recovers_manufactured_weights() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut r = random_problem(&mut rng, 50, 8);
        let w_star = DVector::from_fn(8, |i, _| (i as f64) - 3.5);
        r.y_target = &r.phi * &w_star;
        let fit = train_ls(&r).unwrap();
        let w = fit.readout.stacked();
        assert!((w - w_star).amax() < 1e-8);
    }

    #[test]
    fn ls_residual_is_orthogonal_and_locally_optimal() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let r = random_problem(&mut rng, 40, 6);
        let w = train_ls(&r).unwrap().readout.stacked();
        let res = &r.y_target - &r.phi * &w;
        assert!(r.phi.tr_mul(&res).amax() < 1e-10);
        let base = res.norm_squared();
        for j in 0..6 {
            for eps in [1e-3, -1e-3] {
                let mut wp = w.clone();
                wp[j] += eps;
                assert!((&r.y_target - &r.phi * &wp).norm_squared() >= base);
            }
        }
    }

    #[test]
    fn ls_flags_rank_deficiency() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut r = random_problem(&mut rng, 30, 4);
        let c0 = r.phi.column(0).into_owned();
        r.phi.set_column(3, &(c0 * 2.0));
        let fit = train_ls(&r).unwrap();
        assert!(fit.rank_deficient);
        assert_eq!(fit.rank, 3);
        let w = fit.readout.stacked();
        // minimum norm splits the duplicated direction 1:2
        assert_relative_eq!(w[3], 2.0 * w[0], epsilon = 1e-9);
        assert!(r.phi.tr_mul(&(&r.y_target - &r.phi * &w)).amax() < 1e-9);
    }

    #[test]
    fn ls_cutoff_drops_weak_direction() {
        // two nearly parallel columns: exact LS separates them with huge
        // weights, the truncated solve keeps only their common direction
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let mut r = random_problem(&mut rng, 40, 3);
        let c0 = r.phi.column(0).into_owned();
        let noise = DVector::from_fn(40, |_, _| rng.random_range(-1e-7..1e-7));
        r.phi.set_column(1, &(&c0 + noise));
        let exact = train_ls_with(&r, &LsOptions { rcond: 0.0 }).unwrap();
        let cut = train_ls_with(&r, &LsOptions { rcond: 1e-4 }).unwrap();
        assert_eq!(exact.rank, 3);
        assert_eq!(cut.rank, 2);
        assert!(cut.rank_deficient);
        let w = cut.readout.stacked();
        assert_relative_eq!(w[0], w[1], epsilon = 1e-6);
        assert!(exact.readout.stacked().amax() > 1e3 * w.amax());
        assert!(train_ls_with(&r, &LsOptions { rcond: 1.5 }).is_err());
    }

    #[test]
    fn ls_rejects_wide_problem() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let r = random_problem(&mut rng, 4, 4);
        assert!(train_ls(&r).is_err());
    }

    #[test]
    fn lasso_zero_penalty_matches_ls() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let r = random_problem(&mut rng, 60, 7);
        let ls = train_ls(&r).unwrap().readout.stacked();
        let la = train_lasso(&r, 0.0, &LassoOptions::default()).unwrap();
        let f_ls = r.lasso_objective(&ls, 0.0);
        let f_la = r.lasso_objective(&la.stacked(), 0.0);
        assert!((f_la - f_ls).abs() <= 1e-6 * f_ls);
        assert_eq!(la.lambda, 0.0);
    }

    #[test]
    fn lasso_above_lambda_max_is_exactly_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let r = random_problem(&mut rng, 40, 6);
        let lmax = r.lambda_max();
        // subgradient optimality at zero: |2 Phi' y|_j <= lambda for all j
        let c = r.phi.tr_mul(&r.y_target) * 2.0;
        assert!(c.iter().all(|v| v.abs() <= lmax));
        for scale in [1.0, 1.5, 10.0] {
            let la = train_lasso(&r, lmax * scale, &LassoOptions::default()).unwrap();
            assert!(la.stacked().iter().all(|v| *v == 0.0));
            assert!(la.support.is_empty());
        }
        let below = train_lasso(&r, lmax * 0.9, &LassoOptions::default()).unwrap();
        assert!(!below.stacked().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lasso_single_column_is_soft_threshold() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..20 {
            let r = random_problem(&mut rng, 25, 1);
            let lambda = rng.random_range(0.0..r.lambda_max() * 1.2);
            let x = r.phi.column(0);
            let expected = soft_threshold(x.dot(&r.y_target), lambda / 2.0) / x.norm_squared();
            let got = train_lasso(&r, lambda, &LassoOptions::default()).unwrap();
            assert_eq!(got.n(), 0);
            assert_relative_eq!(got.w_out2, expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn lasso_rejects_negative_penalty() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let r = random_problem(&mut rng, 10, 3);
        assert!(train_lasso(&r, -1.0, &LassoOptions::default()).is_err());
    }

    #[test]
    fn lasso_reports_non_convergence() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut r = random_problem(&mut rng, 30, 4);
        // nearly collinear columns make coordinate descent crawl
        let c0 = r.phi.column(0).into_owned();
        r.phi.set_column(1, &(c0 * 1.000001));
        let opts = LassoOptions {
            tol: 1e-14,
            max_sweeps: 3,
        };
        match train_lasso(&r, 0.0, &opts) {
            Err(Error::LassoNotConverged {
                sweeps,
                last_iterate,
                objective,
                ..
            }) => {
                assert_eq!(sweeps, 3);
                assert_eq!(last_iterate.len(), 4);
                assert!(objective.is_finite());
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn lasso_objective_nonincreasing_along_decreasing_penalty() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let r = random_problem(&mut rng, 50, 8);
        let lmax = r.lambda_max();
        let solver = LassoSolver::new(&r);
        let mut prev = f64::INFINITY;
        let mut warm: Option<DVector<f64>> = None;
        for i in 0..15 {
            let lambda = lmax * 10f64.powf(-(i as f64) * 0.3);
            let w = solver
                .solve(lambda, warm.as_ref(), &LassoOptions::default())
                .unwrap();
            let obj = r.lasso_objective(&w.stacked(), lambda);
            assert!(obj <= prev + 1e-9);
            prev = obj;
            warm = Some(w.stacked());
        }
    }

    #[test]
    fn support_uses_relative_threshold() {
        let rw = ReadoutWeights::new(DVector::from_vec(vec![1.0, 1e-12, 0.0, -3.0]), 0.5, 0.1);
        assert_eq!(rw.support, vec![0, 3]);
        assert!(ReadoutWeights::<f64>::zeros(4).support.is_empty());
    }

    #[test]
    fn fitting_reference_values() {
        let y = vec![1.0, 3.0, 2.0, 5.0];
        assert_relative_eq!(fitting(&y, &y).unwrap(), 100.0);
        let mean = vec![2.75; 4];
        assert_relative_eq!(fitting(&y, &mean).unwrap(), 0.0, epsilon = 1e-12);
        let bad = vec![10.0, -10.0, 10.0, -10.0];
        assert!(fitting(&y, &bad).unwrap() < 0.0);
        assert!(matches!(
            fitting(&[2.0, 2.0], &[1.0, 2.0]),
            Err(Error::ConstantOutput)
        ));
        assert!(fitting(&y, &y[..3]).is_err());
    }

    #[test]
    fn free_run_of_zero_model_is_zero() {
        let w = ReservoirWeights::<f64>::generate(5, 0.5, 1, ScalingTarget::norm(0.9)).unwrap();
        let y = free_run(
            &w,
            &ReadoutWeights::zeros(5),
            &[0.0; 30],
            &EsnState::zeros(5),
            0.0,
        )
        .unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn free_run_equals_teacher_forcing_on_self_generated_data() {
        // data produced by the model itself: perfect fit, both modes agree
        let n = 10;
        let w = ReservoirWeights::<f64>::generate(n, 0.3, 2, ScalingTarget::norm(0.9)).unwrap();
        let rw = ReadoutWeights::new(DVector::from_fn(n, |i, _| 0.1 * i as f64 - 0.4), 0.3, 0.0);
        let u: Vec<f64> = (0..100).map(|k| (k as f64 * 0.2).sin()).collect();
        let x0 = EsnState::zeros(n);
        let y = free_run(&w, &rw, &u, &x0, 0.0).unwrap();
        // teacher forcing with y reproduces the same state trajectory
        let mut s = x0.clone();
        for k in 0..u.len() {
            assert_relative_eq!(readout(&s, &rw).unwrap(), y[k], epsilon = 1e-15);
            let fb = if k == 0 { 0.0 } else { y[k] };
            s = w.step(&s, u[k], fb).unwrap();
        }
    }

    #[test]
    fn default_washout_policy() {
        assert_eq!(default_washout(None), 200);
        let k = default_washout(Some(0.9));
        assert!(0.9f64.powi(k as i32) <= 1e-8);
        assert!(0.9f64.powi(k as i32 - 1) > 1e-8);
    }
}
