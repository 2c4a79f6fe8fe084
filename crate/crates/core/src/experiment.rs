//! The pH benchmark end to end: excitation, identification of the four
//! network variants, the tracking/disturbance scenario and the solve-time
//! comparison. Everything here runs in `f64` against [`PhPlant`].
//!
//! Identification variants, as labelled in the fitting table:
//!
//! | label          | network                                   |
//! |----------------|-------------------------------------------|
//! | `1`            | full reservoir, least-squares readout     |
//! | `2 (step 1)`   | full reservoir, LASSO readout             |
//! | `2 (step 1-2)` | pruned reservoir, LASSO readout           |
//! | `2 full`       | pruned reservoir, least-squares retrained |
//!
//! The LASSO weight is picked on a geometric grid below `lambda_max`: the
//! largest value whose retrained reduced network is within
//! `fit_margin` points of the least-squares fitting, falling back to the best
//! retrained fitting seen.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ident::{
    collect, default_washout, train_ls_with, validation_fitting, Dataset, LassoOptions,
    LassoSolver, LsOptions, ReadoutWeights, DEFAULT_RCOND,
};
use crate::model::{EsnModel, SignalScaling};
use crate::mpc::{Controller, EsnPredictor, LogRecord, MpcConfig};
use crate::plant::{
    evenly_spaced, generate_mprs, MprsConfig, PhPlant, Schedule, NOMINAL_Q2, SAMPLE_TIME,
};
use crate::reduce::{observable_closure, reduce_and_retrain, Reduction, ReductionReport, TableRow};
use crate::reservoir::{
    EsnState, ReservoirWeights, ScalingTarget, StabilityCertificate, DEFAULT_DENSITY,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReservoirConfig {
    pub n: usize,
    pub density: f64,
    pub seed: u64,
    pub scaling: ScalingTarget,
}

impl Default for ReservoirConfig {
    fn default() -> Self {
        Self {
            n: 300,
            density: DEFAULT_DENSITY,
            seed: 0,
            scaling: ScalingTarget::norm(0.9),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Washout in samples; derived from the stability certificate when absent.
    pub washout: Option<usize>,
    pub rcond: f64,
    /// Skip the grid and use `lambda = ratio * lambda_max`.
    pub lambda_ratio: Option<f64>,
    pub grid_points: usize,
    /// Grid spacing in decades.
    pub grid_step: f64,
    /// Accepted fitting loss of the retrained reduced network, percent points.
    pub fit_margin: f64,
    pub lasso_tol: f64,
    pub lasso_max_sweeps: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            washout: None,
            rcond: DEFAULT_RCOND,
            lambda_ratio: None,
            grid_points: 12,
            grid_step: 0.25,
            fit_margin: 5.0,
            lasso_tol: 1e-6,
            lasso_max_sweeps: 2000,
        }
    }
}

impl TrainingConfig {
    /// Ratios `lambda / lambda_max`, largest first.
    pub fn grid(&self) -> Vec<f64> {
        match self.lambda_ratio {
            Some(r) => vec![r],
            None => (1..=self.grid_points)
                .map(|i| 10f64.powf(-(i as f64) * self.grid_step))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExcitationConfig {
    pub levels: Vec<f64>,
    pub fast_period: f64,
    pub slow_period: f64,
    pub mix: f64,
    pub duration: f64,
    pub train_seed: u64,
    pub validation_seed: u64,
    /// Base flow the plant rests at before the excitation starts.
    pub initial_u: f64,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        let m = MprsConfig::default();
        Self {
            levels: evenly_spaced(12.7, 16.7, 5),
            fast_period: m.fast_period,
            slow_period: m.slow_period,
            mix: m.mix,
            duration: m.duration,
            train_seed: 1,
            validation_seed: 2,
            initial_u: 15.556,
        }
    }
}

impl ExcitationConfig {
    pub fn mprs(&self, seed: u64, t_s: f64) -> MprsConfig {
        MprsConfig {
            levels: self.levels.clone(),
            fast_period: self.fast_period,
            slow_period: self.slow_period,
            mix: self.mix,
            seed,
            duration: self.duration,
            t_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub duration: f64,
    pub initial_u: f64,
    pub reference_times: Vec<f64>,
    pub reference_values: Vec<f64>,
    pub disturbance_times: Vec<f64>,
    pub disturbance_values: Vec<f64>,
    /// Band around the reference used for settling times, pH units.
    pub settle_band: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            duration: 9000.0,
            initial_u: 15.556,
            reference_times: vec![500.0, 2000.0, 3500.0, 5000.0],
            reference_values: vec![8.0, 7.5, 6.5, 7.0],
            disturbance_times: vec![6000.0, 7000.0, 8000.0],
            disturbance_values: vec![0.45, 0.85, 0.35],
            settle_band: 0.02,
        }
    }
}

impl ScenarioConfig {
    /// Times at which the reference or the disturbance changes.
    pub fn events(&self) -> Vec<f64> {
        let mut e: Vec<f64> = self
            .reference_times
            .iter()
            .chain(&self.disturbance_times)
            .copied()
            .collect();
        e.sort_by(f64::total_cmp);
        e.dedup();
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out: String,
    pub train: String,
    pub validation: String,
    pub full_model: String,
    pub reduced_model: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out: "out".into(),
            train: "train.csv".into(),
            validation: "validation.csv".into(),
            full_model: "model_1.txt".into(),
            reduced_model: "model_2full.txt".into(),
        }
    }
}

/// Whole experiment; every section defaults to the benchmark settings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub reservoir: ReservoirConfig,
    pub training: TrainingConfig,
    pub excitation: ExcitationConfig,
    pub mpc: MpcConfig,
    pub scenario: ScenarioConfig,
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.reservoir.n == 0 {
            return bad("reservoir.n must be positive".into());
        }
        if !(self.reservoir.density > 0.0 && self.reservoir.density <= 1.0) {
            return bad(format!(
                "reservoir.density {} is not in (0, 1]",
                self.reservoir.density
            ));
        }
        if !(0.0..1.0).contains(&self.training.rcond) {
            return bad("training.rcond must lie in [0, 1)".into());
        }
        if self.training.lambda_ratio.is_none() && self.training.grid_points == 0 {
            return bad("training needs grid_points >= 1 or a fixed lambda_ratio".into());
        }
        if let Some(r) = self.training.lambda_ratio {
            if !(r > 0.0) {
                return bad("training.lambda_ratio must be positive".into());
            }
        }
        let s = &self.scenario;
        if s.reference_times.len() != s.reference_values.len()
            || s.disturbance_times.len() != s.disturbance_values.len()
        {
            return bad("scenario times and values must have equal lengths".into());
        }
        self.mpc.validate()
    }

    /// The resolved config as `#`-prefixed lines, for output headers.
    pub fn header(&self) -> Result<String> {
        Ok(self
            .to_toml()?
            .lines()
            .map(|l| format!("# {l}\n"))
            .collect())
    }
}

/// Open-loop response of the plant to an excitation, in plant units.
pub fn simulate_open_loop(u: &[f64], initial_u: f64, t_s: f64) -> Result<Vec<f64>> {
    let mut plant = PhPlant::nominal(initial_u)?;
    plant.t_s = t_s;
    let mut y = Vec::with_capacity(u.len());
    for &q3 in u {
        y.push(plant.ph()?);
        plant.step(q3, t_s)?;
    }
    Ok(y)
}

/// Training and validation records from two independent MPRS draws.
pub fn excite(c: &ExperimentConfig) -> Result<(Dataset<f64>, Dataset<f64>)> {
    let t_s = c.mpc.t_s;
    let run = |seed| -> Result<Dataset<f64>> {
        let u = generate_mprs(&c.excitation.mprs(seed, t_s))?;
        if u.is_empty() {
            return Err(Error::InvalidArgument(
                "excitation duration gives an empty dataset".into(),
            ));
        }
        let y = simulate_open_loop(&u, c.excitation.initial_u, t_s)?;
        Dataset::new(u, y, t_s, 0)
    };
    Ok((
        run(c.excitation.train_seed)?,
        run(c.excitation.validation_seed)?,
    ))
}

pub fn write_dataset(d: &Dataset<f64>, header: &str, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(header.as_bytes())?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["time", "u", "y"]).map_err(csv_err)?;
    for k in 0..d.len() {
        let t = k as f64 * d.t_s;
        w.write_record([t.to_string(), d.u[k].to_string(), d.y[k].to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

/// Reads a `time,u,y` file; the sampling time comes from the time column.
pub fn read_dataset(path: &Path) -> Result<Dataset<f64>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_dataset_from(file)
}

pub fn read_dataset_from<R: BufRead>(r: R) -> Result<Dataset<f64>> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let head = rd.headers().map_err(csv_err)?.clone();
    if head.iter().collect::<Vec<_>>() != ["time", "u", "y"] {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header time,u,y, found {head:?}"),
        });
    }
    let (mut t, mut u, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for rec in rd.deserialize::<(f64, f64, f64)>() {
        let (ti, ui, yi) = rec.map_err(csv_err)?;
        t.push(ti);
        u.push(ui);
        y.push(yi);
    }
    if u.is_empty() {
        return Err(Error::InvalidArgument("dataset has no samples".into()));
    }
    let t_s = if t.len() > 1 {
        t[1] - t[0]
    } else {
        SAMPLE_TIME
    };
    Dataset::new(u, y, t_s, 0)
}

/// Identification variant, as selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    LeastSquares,
    Lasso,
    Pruned,
    Retrained,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::LeastSquares,
        Variant::Lasso,
        Variant::Pruned,
        Variant::Retrained,
    ];

    /// Row label of the fitting table.
    pub fn label(self) -> &'static str {
        match self {
            Variant::LeastSquares => "1",
            Variant::Lasso => "2 (step 1)",
            Variant::Pruned => "2 (step 1-2)",
            Variant::Retrained => "2 full",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Variant::LeastSquares => "1",
            Variant::Lasso => "2a",
            Variant::Pruned => "2b",
            Variant::Retrained => "2full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown variant `{s}` (expected 1, 2a, 2b or 2full)"
                ))
            })
    }
}

/// One point of the LASSO grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaCandidate {
    pub ratio: f64,
    pub lambda: f64,
    pub support: usize,
    pub closure: usize,
    pub converged: bool,
    /// Retrained fitting of the reduced network; absent when nothing was pruned.
    pub fitting_retrain: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Identification {
    pub certificate: StabilityCertificate<f64>,
    pub washout: usize,
    pub lambda_max: f64,
    pub fitting_ls: f64,
    pub full: EsnModel<f64>,
    pub lasso: EsnModel<f64>,
    pub pruned: EsnModel<f64>,
    pub reduced: EsnModel<f64>,
    pub report: ReductionReport,
    pub candidates: Vec<LambdaCandidate>,
}

impl Identification {
    pub fn model(&self, v: Variant) -> &EsnModel<f64> {
        match v {
            Variant::LeastSquares => &self.full,
            Variant::Lasso => &self.lasso,
            Variant::Pruned => &self.pruned,
            Variant::Retrained => &self.reduced,
        }
    }

    pub fn row(&self, v: Variant) -> TableRow {
        let r = &self.report;
        match v {
            Variant::LeastSquares => TableRow::new(v.label(), r.n_before, self.fitting_ls),
            Variant::Lasso => TableRow::new(v.label(), r.n_before, r.fitting_before),
            Variant::Pruned => TableRow::new(v.label(), r.n_after, r.fitting_after_prune),
            Variant::Retrained => TableRow::new(v.label(), r.n_after, r.fitting_after_retrain),
        }
    }

    pub fn rows(&self) -> Vec<TableRow> {
        Variant::ALL.into_iter().map(|v| self.row(v)).collect()
    }
}

fn score(f: f64) -> f64 {
    if f.is_nan() {
        f64::NEG_INFINITY
    } else {
        f
    }
}

/// Trains all four variants on plant-unit datasets.
pub fn identify(
    c: &ExperimentConfig,
    train: &Dataset<f64>,
    validation: &Dataset<f64>,
) -> Result<Identification> {
    c.validate()?;
    let rc = &c.reservoir;
    let tc = &c.training;
    let w = ReservoirWeights::<f64>::generate(rc.n, rc.density, rc.seed, rc.scaling)?;
    let certificate = w.certify();
    let washout = tc
        .washout
        .unwrap_or_else(|| default_washout(certificate.alpha));
    let scaling = SignalScaling::from_data(&train.u, &train.y);
    let dt = scaling.normalize(&train.clone().with_washout(washout)?);
    let dv = scaling.normalize(&validation.clone().with_washout(washout)?);
    let ls_opts = LsOptions { rcond: tc.rcond };

    let regressors = collect(&w, &dt, &EsnState::zeros(w.n()))?;
    let ls = train_ls_with(&regressors, &ls_opts)?.readout;
    let fitting_ls = validation_fitting(&w, &ls, &dv)?;

    let solver = LassoSolver::new(&regressors);
    let lambda_max = regressors.lambda_max();
    let opts = LassoOptions {
        tol: tc.lasso_tol,
        max_sweeps: tc.lasso_max_sweeps,
    };
    let mut warm: Option<DVector<f64>> = None;
    let mut candidates = Vec::new();
    let mut best: Option<(f64, ReadoutWeights<f64>, Reduction<f64>)> = None;
    let mut fallback: Option<ReadoutWeights<f64>> = None;
    for ratio in tc.grid() {
        let lambda = ratio * lambda_max;
        let (rw, converged) = match solver.solve(lambda, warm.as_ref(), &opts) {
            Ok(rw) => (rw, true),
            Err(Error::LassoNotConverged { last_iterate, .. }) => (
                ReadoutWeights::from_stacked(&DVector::from_vec(last_iterate), lambda),
                false,
            ),
            Err(e) => return Err(e),
        };
        warm = Some(rw.stacked());
        if rw.support.is_empty() {
            candidates.push(LambdaCandidate {
                ratio,
                lambda,
                support: 0,
                closure: 0,
                converged,
                fitting_retrain: None,
            });
            continue;
        }
        let closure = observable_closure(&w, &rw)?.len();
        let mut cand = LambdaCandidate {
            ratio,
            lambda,
            support: rw.support.len(),
            closure,
            converged,
            fitting_retrain: None,
        };
        if closure == w.n() {
            candidates.push(cand);
            fallback.get_or_insert(rw);
            // supports only grow as lambda shrinks
            break;
        }
        let red = reduce_and_retrain(&w, &rw, &dt, &dv, &ls_opts)?;
        let f = score(red.report.fitting_after_retrain);
        cand.fitting_retrain = Some(red.report.fitting_after_retrain);
        candidates.push(cand);
        let accept = f >= fitting_ls - tc.fit_margin;
        if best.as_ref().is_none_or(|b| f > b.0) || accept {
            best = Some((f, rw, red));
        }
        if accept {
            break;
        }
    }

    let (lasso_readout, red) = match best {
        Some((_, rw, red)) => (rw, red),
        None => {
            let rw = fallback
                .ok_or_else(|| Error::Degenerate("every grid lambda zeroed the readout".into()))?;
            let red = reduce_and_retrain(&w, &rw, &dt, &dv, &ls_opts)?;
            (rw, red)
        }
    };
    let model = |reservoir: &ReservoirWeights<f64>, readout: &ReadoutWeights<f64>| EsnModel {
        reservoir: reservoir.clone(),
        readout: readout.clone(),
        scaling,
    };
    Ok(Identification {
        certificate,
        washout,
        lambda_max,
        fitting_ls,
        full: model(&w, &ls),
        lasso: model(&w, &lasso_readout),
        pruned: model(&red.reservoir, &red.pruned_readout),
        reduced: model(&red.reservoir, &red.readout),
        report: red.report,
        candidates,
    })
}

/// Free-run validation of a stored model: measured and simulated outputs
/// over the scored part of the record, plant units, plus the fitting.
pub fn validate(
    model: &EsnModel<f64>,
    validation: &Dataset<f64>,
    washout: usize,
) -> Result<ValidationRun> {
    let d = model
        .scaling
        .normalize(&validation.clone().with_washout(washout)?);
    let (_, y) = crate::ident::validation_run(&model.reservoir, &model.readout, &d)?;
    let fitting = crate::ident::fitting(&d.y[washout..], &y)?;
    let y_model = y.iter().map(|&v| model.scaling.y_from_net(v)).collect();
    Ok(ValidationRun {
        time: (washout..validation.len())
            .map(|k| k as f64 * validation.t_s)
            .collect(),
        y_sys: validation.y[washout..].to_vec(),
        y_model,
        fitting,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRun {
    pub time: Vec<f64>,
    pub y_sys: Vec<f64>,
    pub y_model: Vec<f64>,
    pub fitting: f64,
}

/// Per-segment figures between consecutive scenario events.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSummary {
    pub start: f64,
    pub end: f64,
    pub reference: f64,
    /// Time from the segment start until the output stays in the settling
    /// band; absent if it never does.
    pub settling_time: Option<f64>,
    /// Largest excursion past the reference in the direction of approach.
    pub overshoot: f64,
    /// `|y - ref|` at the last sample of the segment.
    pub steady_state_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSummary {
    pub segments: Vec<SegmentSummary>,
    pub mean_solve_time: f64,
    pub median_solve_time: f64,
    pub max_solve_time: f64,
    pub nonconverged: usize,
    pub inputs_within_bounds: bool,
}

impl fmt::Display for ScenarioSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "segment_start | segment_end | reference | settling_time_s | overshoot | steady_state_error")?;
        for s in &self.segments {
            let settle = s
                .settling_time
                .map_or_else(|| "-".to_string(), |t| format!("{t:.0}"));
            writeln!(
                f,
                "{:.0} | {:.0} | {:.3} | {} | {:.4} | {:.2e}",
                s.start, s.end, s.reference, settle, s.overshoot, s.steady_state_error
            )?;
        }
        writeln!(f, "mean_solve_time_s {:.6}", self.mean_solve_time)?;
        writeln!(f, "median_solve_time_s {:.6}", self.median_solve_time)?;
        writeln!(f, "max_solve_time_s {:.6}", self.max_solve_time)?;
        writeln!(f, "nonconverged_solves {}", self.nonconverged)?;
        write!(f, "inputs_within_bounds {}", self.inputs_within_bounds)
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub log: Vec<LogRecord>,
    pub summary: ScenarioSummary,
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Closed-loop tracking and disturbance-rejection run on the reactor.
pub fn run_scenario(
    model: &EsnModel<f64>,
    mpc: &MpcConfig,
    sc: &ScenarioConfig,
    washout: usize,
) -> Result<ScenarioRun> {
    let mut plant = PhPlant::nominal(sc.initial_u)?;
    plant.t_s = mpc.t_s;
    let y0 = plant.ph()?;
    let reference = Schedule::new(y0, sc.reference_times.clone(), sc.reference_values.clone())?;
    let disturbance = Schedule::new(
        NOMINAL_Q2,
        sc.disturbance_times.clone(),
        sc.disturbance_values.clone(),
    )?;
    let predictor = EsnPredictor::new(model)?;
    let initial = model.settle(sc.initial_u, y0, washout.max(1))?;
    let mut ctl = Controller::new(predictor, *mpc, initial, sc.initial_u, y0)?;
    let steps = (sc.duration / mpc.t_s).round() as usize;
    let mut log = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = k as f64 * mpc.t_s;
        plant.q2 = disturbance.value_at(t);
        ctl.set_reference(reference.value_at(t));
        log.push(ctl.step_closed_loop(&mut plant)?);
    }
    let summary = summarize(&log, sc, mpc, y0);
    Ok(ScenarioRun { log, summary })
}

pub fn summarize(
    log: &[LogRecord],
    sc: &ScenarioConfig,
    mpc: &MpcConfig,
    y0: f64,
) -> ScenarioSummary {
    let mut bounds = vec![0.0];
    bounds.extend(sc.events());
    bounds.push(sc.duration);
    bounds.dedup();
    let mut segments = Vec::new();
    let mut prev_ref = y0;
    for w in bounds.windows(2) {
        let (start, end) = (w[0], w[1]);
        let seg: Vec<&LogRecord> = log
            .iter()
            .filter(|r| r.time >= start && r.time < end)
            .collect();
        let Some(last) = seg.last() else { continue };
        let reference = last.y_ref;
        let dir = if reference >= prev_ref { 1.0 } else { -1.0 };
        let overshoot = seg
            .iter()
            .map(|r| dir * (r.y_sys - reference))
            .fold(0.0, f64::max);
        let outside = seg
            .iter()
            .rposition(|r| (r.y_sys - reference).abs() > sc.settle_band);
        let settling_time = match outside {
            None => Some(0.0),
            Some(i) if i + 1 < seg.len() => Some(seg[i + 1].time - start),
            Some(_) => None,
        };
        segments.push(SegmentSummary {
            start,
            end,
            reference,
            settling_time,
            overshoot,
            steady_state_error: (last.y_sys - reference).abs(),
        });
        prev_ref = reference;
    }
    let times: Vec<f64> = log.iter().map(|r| r.solve_time).collect();
    let eps = 1e-12;
    ScenarioSummary {
        segments,
        mean_solve_time: times.iter().sum::<f64>() / times.len().max(1) as f64,
        median_solve_time: median(&times),
        max_solve_time: times.iter().copied().fold(0.0, f64::max),
        nonconverged: log.iter().filter(|r| !r.converged).count(),
        inputs_within_bounds: log
            .iter()
            .all(|r| r.u >= mpc.u_min - eps && r.u <= mpc.u_max + eps),
    }
}

pub fn write_log(log: &[LogRecord], header: &str, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(header.as_bytes())?;
    writeln!(f, "{}", LogRecord::HEADER)?;
    for r in log {
        writeln!(f, "{}", r.csv_row())?;
    }
    f.flush()?;
    Ok(())
}

/// Solve times of the same scenario under two models.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub full_states: usize,
    pub reduced_states: usize,
    pub full_times: Vec<f64>,
    pub reduced_times: Vec<f64>,
}

impl Benchmark {
    pub fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Mean solve-time reduction of the reduced model, percent.
    pub fn reduction(&self) -> f64 {
        100.0 * (1.0 - Self::mean(&self.reduced_times) / Self::mean(&self.full_times))
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "model | states | mean_solve_time_s | median_solve_time_s"
        )?;
        for (name, n, t) in [
            ("full", self.full_states, &self.full_times),
            ("reduced", self.reduced_states, &self.reduced_times),
        ] {
            writeln!(f, "{name} | {n} | {:.6} | {:.6}", Self::mean(t), median(t))?;
        }
        write!(f, "mean_reduction_percent {:.2}", self.reduction())
    }
}

/// Runs the scenario serially with each model, full first.
pub fn bench(
    full: &EsnModel<f64>,
    reduced: &EsnModel<f64>,
    c: &ExperimentConfig,
    washout: usize,
) -> Result<Benchmark> {
    let a = run_scenario(full, &c.mpc, &c.scenario, washout)?;
    let b = run_scenario(reduced, &c.mpc, &c.scenario, washout)?;
    Ok(Benchmark {
        full_states: full.n(),
        reduced_states: reduced.n(),
        full_times: a.log.iter().map(|r| r.solve_time).collect(),
        reduced_times: b.log.iter().map(|r| r.solve_time).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let mut c = ExperimentConfig::default();
        c.reservoir.seed = 42;
        c.training.lambda_ratio = Some(0.01);
        c.mpc.feedback = crate::mpc::FeedbackMode::Predicted;
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        assert_eq!(
            ExperimentConfig::from_toml("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_toml("[reservoir]\nsize = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[reservoir]\ndensity = 0.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[mpc]\nhorizon = 0\n").is_err());
        assert!(ExperimentConfig::from_toml("[scenario]\nreference_times = [1.0]\n").is_err());
    }

    #[test]
    fn grid_is_geometric_and_descending() {
        let t = TrainingConfig::default();
        let g = t.grid();
        assert_eq!(g.len(), 12);
        for w in g.windows(2) {
            assert!((w[1] / w[0] - 10f64.powf(-0.25)).abs() < 1e-12);
        }
        let fixed = TrainingConfig {
            lambda_ratio: Some(0.3),
            ..t
        };
        assert_eq!(fixed.grid(), vec![0.3]);
    }

    #[test]
    fn variant_keys_parse() {
        for v in Variant::ALL {
            assert_eq!(v.key().parse::<Variant>().unwrap(), v);
        }
        assert!("3".parse::<Variant>().is_err());
        assert_eq!(Variant::Pruned.label(), "2 (step 1-2)");
    }

    #[test]
    fn dataset_csv_round_trip() {
        let d = Dataset::new(vec![12.7, 16.7, 14.0], vec![6.1, 8.2, 7.0 + 1e-13], 10.0, 0).unwrap();
        let mut buf = Vec::new();
        {
            let path = std::env::temp_dir().join(format!("esnmpc-ds-{}.csv", std::process::id()));
            write_dataset(&d, "# comment\n", &path).unwrap();
            buf.extend(std::fs::read(&path).unwrap());
            let back = read_dataset(&path).unwrap();
            std::fs::remove_file(&path).unwrap();
            assert_eq!(back.u, d.u);
            assert_eq!(back.y, d.y);
            assert_eq!(back.t_s, 10.0);
        }
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("# comment\ntime,u,y\n"));
        assert!(read_dataset_from("time,u,y\n".as_bytes()).is_err());
        assert!(read_dataset_from("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn zero_duration_excitation_is_an_error() {
        let mut c = ExperimentConfig::default();
        c.excitation.duration = 0.0;
        assert!(excite(&c).is_err());
    }

    #[test]
    fn excitation_is_reproducible_and_in_range() {
        let mut c = ExperimentConfig::default();
        c.excitation.duration = 4000.0;
        let (a, b) = excite(&c).unwrap();
        let (a2, _) = excite(&c).unwrap();
        assert_eq!(a.u, a2.u);
        assert_eq!(a.y, a2.y);
        assert_ne!(a.u, b.u);
        assert!(a.u.iter().all(|u| (12.7..=16.7).contains(u)));
        assert!(a.y.iter().all(|y| (5.5..9.0).contains(y)));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    fn rec(time: f64, y_ref: f64, y_sys: f64) -> LogRecord {
        LogRecord {
            time,
            y_ref,
            y_sys,
            y_model: y_sys,
            d_hat: 0.0,
            u: 15.0,
            delta_u: 0.0,
            cost: 0.0,
            iterations: 1,
            solve_time: time / 1000.0,
            converged: true,
        }
    }

    #[test]
    fn summary_measures_each_segment() {
        let sc = ScenarioConfig {
            duration: 60.0,
            reference_times: vec![20.0],
            reference_values: vec![8.0],
            disturbance_times: vec![],
            disturbance_values: vec![],
            ..Default::default()
        };
        let ys = [7.0, 7.0, 7.5, 8.3, 8.01, 8.0];
        let log: Vec<LogRecord> = ys
            .iter()
            .enumerate()
            .map(|(k, &y)| rec(10.0 * k as f64, if k < 2 { 7.0 } else { 8.0 }, y))
            .collect();
        let s = summarize(&log, &sc, &MpcConfig::default(), 7.0);
        assert_eq!(s.segments.len(), 2);
        assert_eq!(s.segments[0].settling_time, Some(0.0));
        let seg = &s.segments[1];
        assert_eq!(seg.reference, 8.0);
        assert!((seg.overshoot - 0.3).abs() < 1e-12);
        assert_eq!(seg.settling_time, Some(20.0));
        assert_eq!(seg.steady_state_error, 0.0);
        assert!((s.mean_solve_time - 0.025).abs() < 1e-15);
        assert!(s.inputs_within_bounds);
    }
}
