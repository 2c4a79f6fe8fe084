//! Echo state network reservoir: the fixed random part of the model.
//!
//! The state equation is
//!
//! ```text
//! x(k+1) = tanh(W_x x(k) + W_u u(k) + W_y y(k))
//! y(k)   = W_out1 x(k) + W_out2 u(k-1)
//! ```
//!
//! with `u(k-1)` carried in [`EsnState::u_prev`]. Carrying the previous input
//! as part of the state is the usual canonical form with the auxiliary state
//! `xi(k+1) = u(k)`; it is what makes the ESN a mixed network (tanh block plus
//! a linear block) and is the reason the input feedthrough never takes part
//! in state pruning.
//!
//! Incremental stability: if `||W_x|| < 1` (largest singular value), tanh being
//! 1-Lipschitz gives `||x1(k) - x2(k)|| <= alpha^k ||x1(0) - x2(0)||` with
//! `alpha = sqrt(1 - lambda_min(I - W_x' W_x))` for any common forcing. The
//! certificate computes `alpha` from `Q = I - W_x' W_x` explicitly.

use nalgebra::{DMatrix, DVector};
use petgraph::graph::{DiGraph, NodeIndex};
use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ident::ReadoutWeights;
use crate::scalar::Real;

/// Default fraction of nonzero reservoir couplings.
///
/// About 1.5 couplings per node: sparse enough that the observable closure
/// of a LASSO support leaves a sizeable part of the reservoir out.
pub const DEFAULT_DENSITY: f64 = 0.005;

/// Margin below 1 required before a reservoir is certified incrementally stable.
pub const DELTA_GAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMode {
    /// Scale so that the largest singular value hits the target (certifiable).
    Norm,
    /// Scale so that the spectral radius hits the target (classic heuristic).
    Radius,
}

impl std::fmt::Display for ScalingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScalingMode::Norm => f.write_str("norm"),
            ScalingMode::Radius => f.write_str("radius"),
        }
    }
}

impl std::str::FromStr for ScalingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm" => Ok(ScalingMode::Norm),
            "radius" => Ok(ScalingMode::Radius),
            other => Err(Error::InvalidArgument(format!(
                "unknown scaling mode {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingTarget {
    pub mode: ScalingMode,
    pub value: f64,
}

impl ScalingTarget {
    pub fn norm(value: f64) -> Self {
        Self {
            mode: ScalingMode::Norm,
            value,
        }
    }

    pub fn radius(value: f64) -> Self {
        Self {
            mode: ScalingMode::Radius,
            value,
        }
    }
}

impl Default for ScalingTarget {
    fn default() -> Self {
        Self::norm(0.9)
    }
}

/// The fixed random matrices of an echo state network.
#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirWeights<T: Real> {
    pub w_x: DMatrix<T>,
    pub w_u: DVector<T>,
    pub w_y: DVector<T>,
    /// Fraction of structurally nonzero entries of `w_x`.
    pub density: f64,
    pub seed: u64,
    pub scaling: ScalingTarget,
}

/// Reservoir activations plus the previous input (auxiliary input state).
#[derive(Debug, Clone, PartialEq)]
pub struct EsnState<T: Real> {
    pub x: DVector<T>,
    pub u_prev: T,
}

impl<T: Real> EsnState<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            x: DVector::zeros(n),
            u_prev: T::zero(),
        }
    }

    pub fn new(x: DVector<T>, u_prev: T) -> Self {
        Self { x, u_prev }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityCertificate<T: Real> {
    /// Largest singular value of `W_x`.
    pub operator_norm: T,
    pub spectral_radius: T,
    /// `operator_norm < 1 - DELTA_GAS_TOL`.
    pub delta_gas: bool,
    /// Contraction rate, present only when `delta_gas` holds.
    pub alpha: Option<T>,
}

/// Outcome of the two-trajectory echo-state probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult<T: Real> {
    pub initial_gap: T,
    pub gap: T,
}

/// Row-compressed view of `W_x` holding only the stored nonzeros.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows<T: Real> {
    pub row_start: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<T>,
}

impl<T: Real> SparseRows<T> {
    pub fn from_dense(m: &DMatrix<T>) -> Self {
        let mut row_start = Vec::with_capacity(m.nrows() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_start.push(0);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if v != T::zero() {
                    cols.push(j);
                    vals.push(v);
                }
            }
            row_start.push(cols.len());
        }
        Self {
            row_start,
            cols,
            vals,
        }
    }

    pub fn nrows(&self) -> usize {
        self.row_start.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.row_start[i]..self.row_start[i + 1];
        self.cols[r.clone()]
            .iter()
            .copied()
            .zip(self.vals[r].iter().copied())
    }

    /// `out = self * x`.
    pub fn mul_into(&self, x: &[T], out: &mut [T]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (j, v) in self.row(i) {
                acc += v * x[j];
            }
            *o = acc;
        }
    }

    /// `out += self' * v`.
    pub fn mul_transpose_add(&self, v: &[T], out: &mut [T]) {
        for (i, &vi) in v.iter().enumerate() {
            if vi == T::zero() {
                continue;
            }
            for (j, w) in self.row(i) {
                out[j] += w * vi;
            }
        }
    }
}

fn nonzero_uniform<R: Rng>(rng: &mut R, dist: &Uniform<f64>) -> f64 {
    loop {
        let v = dist.sample(rng);
        if v != 0.0 {
            return v;
        }
    }
}

/// Largest singular value.
pub fn operator_norm<T: Real>(m: &DMatrix<T>) -> T {
    if m.is_empty() {
        return T::zero();
    }
    let eps = T::epsilon();
    match nalgebra::SVD::try_new(m.clone(), false, false, eps, 10_000) {
        Some(svd) => svd
            .singular_values
            .iter()
            .copied()
            .fold(T::zero(), |a, b| a.max(b)),
        None => {
            let gram = m.tr_mul(m);
            gram.symmetric_eigenvalues()
                .iter()
                .copied()
                .fold(T::zero(), |a, b| a.max(b))
                .sqrt()
        }
    }
}

/// Largest eigenvalue modulus.
///
/// The coupling graph is split into strongly connected components first:
/// permuted to block-triangular form, the spectrum of `W` is the union of the
/// spectra of the diagonal blocks, and nodes on no cycle contribute zeros.
/// This keeps the eigen solver away from the large nilpotent parts of very
/// sparse reservoirs, where unshifted QR sweeps converge poorly.
pub fn spectral_radius<T: Real>(m: &DMatrix<T>) -> T {
    let mut rho = T::zero();
    for comp in strongly_connected_components(m) {
        let block = if comp.len() == 1 {
            let i = comp[0];
            m[(i, i)].abs()
        } else {
            let k = comp.len();
            let b = DMatrix::from_fn(k, k, |r, c| m[(comp[r], comp[c])]);
            block_spectral_radius(b)
        };
        rho = rho.max(block);
    }
    rho
}

fn block_spectral_radius<T: Real>(b: DMatrix<T>) -> T {
    match nalgebra::Schur::try_new(b.clone(), T::epsilon(), 100_000) {
        Some(schur) => schur
            .complex_eigenvalues()
            .iter()
            .map(|c| (c.re * c.re + c.im * c.im).sqrt())
            .fold(T::zero(), |a, v| a.max(v)),
        None => {
            // Gelfand: rho = lim ||B^k||^(1/k), by repeated squaring
            let mut p = b;
            let mut log_scale = T::zero();
            let mut power = T::one();
            for _ in 0..40 {
                let nrm = p.norm();
                if nrm == T::zero() {
                    return T::zero();
                }
                p /= nrm;
                log_scale += nrm.ln() / power;
                p = &p * &p;
                power *= T::lit(2.0);
            }
            (log_scale + p.norm().ln() / power).exp()
        }
    }
}

/// Directed graph with an edge `i -> j` for every stored `m[i][j] != 0`,
/// i.e. from each state to the states its update reads.
pub fn coupling_graph<T: Real>(m: &DMatrix<T>) -> DiGraph<(), ()> {
    let n = m.nrows();
    let mut g = DiGraph::with_capacity(n, 0);
    for _ in 0..n {
        g.add_node(());
    }
    for i in 0..n {
        for j in 0..m.ncols() {
            if m[(i, j)] != T::zero() {
                g.add_edge(NodeIndex::new(i), NodeIndex::new(j), ());
            }
        }
    }
    g
}

/// Strongly connected components of the coupling pattern, each sorted.
pub fn strongly_connected_components<T: Real>(m: &DMatrix<T>) -> Vec<Vec<usize>> {
    petgraph::algo::tarjan_scc(&coupling_graph(m))
        .into_iter()
        .map(|c| {
            let mut v: Vec<usize> = c.into_iter().map(|i| i.index()).collect();
            v.sort_unstable();
            v
        })
        .collect()
}

impl<T: Real> ReservoirWeights<T> {
    /// Draws a sparse random reservoir and scales `w_x` onto `target`.
    ///
    /// Exactly `round(density * n^2)` couplings are placed at uniformly sampled
    /// positions with values uniform on `[-1, 1]`; `w_u` and `w_y` are uniform
    /// on `[-1, 1]` and left unscaled. Drawing and scaling happen in `f64`.
    pub fn generate(n: usize, density: f64, seed: u64, target: ScalingTarget) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "reservoir size must be at least 1".into(),
            ));
        }
        if !(density > 0.0 && density <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "density {density} outside (0, 1]"
            )));
        }
        if !(target.value > 0.0 && target.value < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "scaling target {} outside (0, 1)",
                target.value
            )));
        }

        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dist = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
        let total = n * n;
        let nnz = ((density * total as f64).round() as usize).min(total);
        let mut w = DMatrix::<f64>::zeros(n, n);
        for idx in rand::seq::index::sample(&mut rng, total, nnz).iter() {
            w[(idx / n, idx % n)] = nonzero_uniform(&mut rng, &dist);
        }
        let w_u = DVector::from_fn(n, |_, _| dist.sample(&mut rng));
        let w_y = DVector::from_fn(n, |_, _| dist.sample(&mut rng));

        let current = match target.mode {
            ScalingMode::Norm => operator_norm(&w),
            ScalingMode::Radius => spectral_radius(&w),
        };
        if current == 0.0 {
            return Err(Error::Degenerate(format!(
                "w_x has zero {} (n = {n}, {nnz} couplings); cannot scale to {}",
                target.mode, target.value
            )));
        }
        w.apply(|v| *v = *v * target.value / current);

        Ok(Self {
            w_x: w.map(T::lit),
            w_u: w_u.map(T::lit),
            w_y: w_y.map(T::lit),
            density,
            seed,
            scaling: target,
        })
    }

    pub fn n(&self) -> usize {
        self.w_x.nrows()
    }

    pub fn nnz(&self) -> usize {
        self.w_x.iter().filter(|v| **v != T::zero()).count()
    }

    pub fn sparse_rows(&self) -> SparseRows<T> {
        SparseRows::from_dense(&self.w_x)
    }

    fn check_dims(&self) -> Result<()> {
        let n = self.n();
        if self.w_x.ncols() != n {
            return Err(Error::Dimension {
                what: "w_x columns",
                expected: n,
                got: self.w_x.ncols(),
            });
        }
        if self.w_u.len() != n {
            return Err(Error::Dimension {
                what: "w_u length",
                expected: n,
                got: self.w_u.len(),
            });
        }
        if self.w_y.len() != n {
            return Err(Error::Dimension {
                what: "w_y length",
                expected: n,
                got: self.w_y.len(),
            });
        }
        Ok(())
    }

    /// One state update `x' = tanh(W_x x + W_u u + W_y y)`, with `u_prev := u`.
    pub fn step(&self, s: &EsnState<T>, u: T, y: T) -> Result<EsnState<T>> {
        self.check_dims()?;
        if s.dim() != self.n() {
            return Err(Error::Dimension {
                what: "state",
                expected: self.n(),
                got: s.dim(),
            });
        }
        let mut pre = &self.w_x * &s.x;
        pre.axpy(u, &self.w_u, T::one());
        pre.axpy(y, &self.w_y, T::one());
        Ok(EsnState {
            x: pre.map(|v| v.tanh()),
            u_prev: u,
        })
    }

    /// `W_out1 x + W_out2 u_prev`.
    pub fn readout(&self, s: &EsnState<T>, rw: &ReadoutWeights<T>) -> Result<T> {
        readout(s, rw)
    }

    pub fn certify(&self) -> StabilityCertificate<T> {
        let n = self.n();
        let operator_norm = operator_norm(&self.w_x);
        // rho <= ||W|| holds exactly; the eigen solver can overshoot by roundoff
        // on normal matrices.
        let spectral_radius = spectral_radius(&self.w_x).min(operator_norm);
        let delta_gas = operator_norm < T::one() - T::lit(DELTA_GAS_TOL);
        let alpha = delta_gas.then(|| {
            let q = DMatrix::<T>::identity(n, n) - self.w_x.transpose() * &self.w_x;
            let lambda_min = q
                .symmetric_eigenvalues()
                .iter()
                .copied()
                .fold(T::max_value().expect("bounded"), |a, b| a.min(b));
            (T::one() - lambda_min).max(T::zero()).sqrt()
        });
        StabilityCertificate {
            operator_norm,
            spectral_radius,
            delta_gas,
            alpha,
        }
    }

    /// Drives two copies of the reservoir from independent random initial
    /// states (uniform on `(-1, 1)^n`, drawn from `seed`) with the same
    /// `(u, y)` forcing and returns the state gap after `k_probe` steps.
    pub fn echo_state_probe(
        &self,
        forcing: &[(T, T)],
        k_probe: usize,
        seed: u64,
    ) -> Result<ProbeResult<T>> {
        let n = self.n();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dist = Uniform::new(-1.0, 1.0).expect("valid range");
        let a = EsnState::new(
            DVector::from_fn(n, |_, _| T::lit(dist.sample(&mut rng))),
            T::zero(),
        );
        let b = EsnState::new(
            DVector::from_fn(n, |_, _| T::lit(dist.sample(&mut rng))),
            T::zero(),
        );
        self.probe_from(a, b, forcing, k_probe)
    }

    /// Two-trajectory probe from caller-chosen initial states.
    pub fn probe_from(
        &self,
        mut a: EsnState<T>,
        mut b: EsnState<T>,
        forcing: &[(T, T)],
        k_probe: usize,
    ) -> Result<ProbeResult<T>> {
        if k_probe == 0 {
            return Err(Error::InvalidArgument("k_probe must be at least 1".into()));
        }
        if forcing.len() < k_probe {
            return Err(Error::Dimension {
                what: "probe forcing length",
                expected: k_probe,
                got: forcing.len(),
            });
        }
        let initial_gap = (&a.x - &b.x).norm();
        for &(u, y) in &forcing[..k_probe] {
            a = self.step(&a, u, y)?;
            b = self.step(&b, u, y)?;
        }
        Ok(ProbeResult {
            initial_gap,
            gap: (&a.x - &b.x).norm(),
        })
    }

    /// Converts every weight to another scalar type.
    pub fn cast<U: Real>(&self) -> ReservoirWeights<U> {
        ReservoirWeights {
            w_x: self.w_x.map(|v| U::lit(v.as_f64())),
            w_u: self.w_u.map(|v| U::lit(v.as_f64())),
            w_y: self.w_y.map(|v| U::lit(v.as_f64())),
            density: self.density,
            seed: self.seed,
            scaling: self.scaling,
        }
    }
}

/// `W_out1 x + W_out2 u_prev`.
pub fn readout<T: Real>(s: &EsnState<T>, rw: &ReadoutWeights<T>) -> Result<T> {
    if rw.w_out1.len() != s.dim() {
        return Err(Error::Dimension {
            what: "readout width",
            expected: s.dim(),
            got: rw.w_out1.len(),
        });
    }
    Ok(rw.w_out1.dot(&s.x) + rw.w_out2 * s.u_prev)
}
