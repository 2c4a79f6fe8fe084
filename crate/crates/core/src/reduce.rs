//! Structural order reduction of a trained ESN.
//!
//! A state `j` can reach the output only through a chain of couplings ending
//! in a read-out state. The observable part is therefore the smallest set
//! `S` that contains the readout support and is closed under "is read by":
//! if `i` is in `S` and `W_x[i][j] != 0`, then `j` is in `S`.
//!
//! Removing the complement of such a set leaves the input-output map
//! untouched. The kept states' updates read only kept states, so their
//! trajectories are identical in both networks whatever the removed states
//! start from. The readout only reads kept states. The output feedback
//! `W_y y` enters every state through the (measured or predicted) output,
//! never through the removed states' values, so closure over `W_x` alone is
//! enough.
//!
//! Zeros are structural: a coupling counts when its stored value is nonzero,
//! with no threshold.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use petgraph::graph::NodeIndex;
use petgraph::visit::Dfs;

use crate::error::{Error, Result};
use crate::ident::{
    collect, train_ls_with, validation_fitting, Dataset, LsOptions, ReadoutWeights,
};
use crate::reservoir::{coupling_graph, EsnState, ReservoirWeights};
use crate::scalar::Real;

/// Sorted observable closure of the readout support.
pub fn observable_closure<T: Real>(
    w: &ReservoirWeights<T>,
    rw: &ReadoutWeights<T>,
) -> Result<Vec<usize>> {
    if rw.n() != w.n() {
        return Err(Error::Dimension {
            what: "readout",
            expected: w.n(),
            got: rw.n(),
        });
    }
    if rw.support.is_empty() {
        return Err(Error::EmptySupport);
    }
    let g = coupling_graph(&w.w_x);
    let mut dfs = Dfs::empty(&g);
    let mut keep = Vec::new();
    for &s in &rw.support {
        dfs.move_to(NodeIndex::new(s));
        while let Some(v) = dfs.next(&g) {
            keep.push(v.index());
        }
    }
    keep.sort_unstable();
    Ok(keep)
}

/// First coupling `(from, to)` that leaves `keep`, if any.
pub fn closure_violation<T: Real>(
    w: &ReservoirWeights<T>,
    keep: &[usize],
) -> Option<(usize, usize)> {
    let mut inside = vec![false; w.n()];
    for &k in keep {
        inside[k] = true;
    }
    for &i in keep {
        for j in 0..w.n() {
            if !inside[j] && w.w_x[(i, j)] != T::zero() {
                return Some((i, j));
            }
        }
    }
    None
}

/// Restricts the network to `keep` (sorted, unique, closed, covering the
/// readout support).
pub fn prune<T: Real>(
    w: &ReservoirWeights<T>,
    rw: &ReadoutWeights<T>,
    keep: &[usize],
) -> Result<(ReservoirWeights<T>, ReadoutWeights<T>)> {
    let n = w.n();
    if rw.n() != n {
        return Err(Error::Dimension {
            what: "readout",
            expected: n,
            got: rw.n(),
        });
    }
    if keep.is_empty() {
        return Err(Error::EmptySupport);
    }
    if keep.windows(2).any(|p| p[0] >= p[1]) || keep[keep.len() - 1] >= n {
        return Err(Error::InvalidArgument(format!(
            "keep set must be strictly increasing indices below {n}"
        )));
    }
    if let Some(&i) = rw.support.iter().find(|i| keep.binary_search(i).is_err()) {
        return Err(Error::DropsSupport(i));
    }
    if let Some((from, to)) = closure_violation(w, keep) {
        return Err(Error::NotClosed { from, to });
    }
    let m = keep.len();
    let w_x = DMatrix::from_fn(m, m, |r, c| w.w_x[(keep[r], keep[c])]);
    let nnz = w_x.iter().filter(|v| **v != T::zero()).count();
    let reduced = ReservoirWeights {
        w_x,
        w_u: DVector::from_fn(m, |r, _| w.w_u[keep[r]]),
        w_y: DVector::from_fn(m, |r, _| w.w_y[keep[r]]),
        density: nnz as f64 / (m * m) as f64,
        seed: w.seed,
        scaling: w.scaling,
    };
    let readout = ReadoutWeights::new(
        DVector::from_fn(m, |r, _| rw.w_out1[keep[r]]),
        rw.w_out2,
        rw.lambda,
    );
    Ok((reduced, readout))
}

/// Outcome of one closure, prune and retrain pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionReport {
    pub n_before: usize,
    pub n_after: usize,
    pub removed: Vec<usize>,
    pub kept: Vec<usize>,
    pub lambda: f64,
    pub fitting_before: f64,
    pub fitting_after_prune: f64,
    pub fitting_after_retrain: f64,
}

impl ReductionReport {
    /// Fraction of states removed.
    pub fn reduction(&self) -> f64 {
        1.0 - self.n_after as f64 / self.n_before as f64
    }

    /// Rows in the `algorithm / states / fitting` layout of the identify table.
    pub fn table_rows(&self) -> Vec<TableRow> {
        vec![
            TableRow::new("2 (step 1)", self.n_before, self.fitting_before),
            TableRow::new("2 (step 1-2)", self.n_after, self.fitting_after_prune),
            TableRow::new("2 full", self.n_after, self.fitting_after_retrain),
        ]
    }
}

impl fmt::Display for ReductionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n_before {}", self.n_before)?;
        writeln!(f, "n_after {}", self.n_after)?;
        writeln!(f, "reduction {:.4}", self.reduction())?;
        writeln!(f, "lambda {:e}", self.lambda)?;
        writeln!(f, "fitting_before {:.4}", self.fitting_before)?;
        writeln!(f, "fitting_after_prune {:.4}", self.fitting_after_prune)?;
        writeln!(f, "fitting_after_retrain {:.4}", self.fitting_after_retrain)?;
        write!(f, "removed")?;
        for i in &self.removed {
            write!(f, " {i}")?;
        }
        writeln!(f)
    }
}

/// One line of the identification table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub algorithm: String,
    pub states: usize,
    pub fitting: f64,
}

impl TableRow {
    pub fn new(algorithm: &str, states: usize, fitting: f64) -> Self {
        Self {
            algorithm: algorithm.to_string(),
            states,
            fitting,
        }
    }
}

pub const TABLE_HEADER: &str = "Algorithm | Number of states n | Fitting";

impl fmt::Display for TableRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} | {} | {:.2}%",
            self.algorithm, self.states, self.fitting
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reduction<T: Real> {
    pub reservoir: ReservoirWeights<T>,
    /// Sparse readout restricted to the kept states, before retraining.
    pub pruned_readout: ReadoutWeights<T>,
    pub readout: ReadoutWeights<T>,
    pub report: ReductionReport,
}

/// Closure, prune, and least-squares retrain on the reduced network.
/// Fittings are measured on `validation` in free run.
pub fn reduce_and_retrain<T: Real>(
    w: &ReservoirWeights<T>,
    rw: &ReadoutWeights<T>,
    training: &Dataset<T>,
    validation: &Dataset<T>,
    ls: &LsOptions,
) -> Result<Reduction<T>> {
    let kept = observable_closure(w, rw)?;
    let (reservoir, pruned_readout) = prune(w, rw, &kept)?;
    let regressors = collect(&reservoir, training, &EsnState::zeros(reservoir.n()))?;
    let mut readout = train_ls_with(&regressors, ls)?.readout;
    readout.lambda = T::zero();
    let removed = (0..w.n())
        .filter(|i| kept.binary_search(i).is_err())
        .collect();
    let report = ReductionReport {
        n_before: w.n(),
        n_after: kept.len(),
        removed,
        kept,
        lambda: rw.lambda.as_f64(),
        fitting_before: validation_fitting(w, rw, validation)?,
        fitting_after_prune: validation_fitting(&reservoir, &pruned_readout, validation)?,
        fitting_after_retrain: validation_fitting(&reservoir, &readout, validation)?,
    };
    Ok(Reduction {
        reservoir,
        pruned_readout,
        readout,
        report,
    })
}
