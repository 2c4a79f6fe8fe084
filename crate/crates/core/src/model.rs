//! Trained networks in plant units and their text file format.
//!
//! # File format
//!
//! Plain UTF-8 text, whitespace separated, one section per keyword. Reals
//! are written with 17 significant digits (`{:.16e}`), which round-trips
//! every `f64` exactly. Lines starting with `#` are comments.
//!
//! ```text
//! esnmpc-reservoir 1
//! n <n>
//! seed <u64>
//! density <real>
//! scaling <norm|radius> <target>
//! u_scaling <center> <half-range>
//! y_scaling <center> <half-range>
//! w_x <n> <n>
//! <n rows of n reals, row-major>
//! w_u <n>
//! <n reals>
//! w_y <n>
//! <n reals>
//! ```
//!
//! A trained model appends a readout section:
//!
//! ```text
//! readout
//! lambda <real>
//! w_out2 <real>
//! w_out1 <n>
//! <n reals>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ident::{Dataset, ReadoutWeights};
use crate::reservoir::{EsnState, ReservoirWeights, ScalingTarget};
use crate::scalar::Real;

const MAGIC: &str = "esnmpc-reservoir";
const VERSION: u32 = 1;

/// Affine map between plant units and the unit range the reservoir sees:
/// `normalized = (value - center) / half_range`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalScaling<T: Real> {
    pub u_center: T,
    pub u_half_range: T,
    pub y_center: T,
    pub y_half_range: T,
}

impl<T: Real> Default for SignalScaling<T> {
    fn default() -> Self {
        Self::identity()
    }
}

// The readout has no bias term, so the center is the sample mean: a
// mid-range center leaves a constant offset the network cannot produce.
fn center_half<T: Real>(v: &[T]) -> (T, T) {
    if v.is_empty() {
        return (T::zero(), T::one());
    }
    let mean = v.iter().copied().fold(T::zero(), |a, b| a + b) / T::lit(v.len() as f64);
    let half = v
        .iter()
        .copied()
        .fold(T::zero(), |a, b| a.max((b - mean).abs()));
    let half = if half > T::zero() { half } else { T::one() };
    (mean, half)
}

impl<T: Real> SignalScaling<T> {
    pub fn identity() -> Self {
        Self {
            u_center: T::zero(),
            u_half_range: T::one(),
            y_center: T::zero(),
            y_half_range: T::one(),
        }
    }

    /// Centers each signal on its mean and scales its largest deviation to 1.
    pub fn from_data(u: &[T], y: &[T]) -> Self {
        let (u_center, u_half_range) = center_half(u);
        let (y_center, y_half_range) = center_half(y);
        Self {
            u_center,
            u_half_range,
            y_center,
            y_half_range,
        }
    }

    pub fn u_to_net(&self, u: T) -> T {
        (u - self.u_center) / self.u_half_range
    }

    pub fn y_to_net(&self, y: T) -> T {
        (y - self.y_center) / self.y_half_range
    }

    pub fn y_from_net(&self, y: T) -> T {
        self.y_center + self.y_half_range * y
    }

    /// Dataset in network units; `t_s` and washout are kept.
    pub fn normalize(&self, d: &Dataset<T>) -> Dataset<T> {
        Dataset {
            u: d.u.iter().map(|&v| self.u_to_net(v)).collect(),
            y: d.y.iter().map(|&v| self.y_to_net(v)).collect(),
            t_s: d.t_s,
            k0: d.k0,
        }
    }
}

/// Reservoir, readout and unit scaling: everything needed to simulate or
/// control with an identified network.
#[derive(Debug, Clone, PartialEq)]
pub struct EsnModel<T: Real> {
    pub reservoir: ReservoirWeights<T>,
    pub readout: ReadoutWeights<T>,
    pub scaling: SignalScaling<T>,
}

impl<T: Real> EsnModel<T> {
    pub fn n(&self) -> usize {
        self.reservoir.n()
    }

    /// Model output in plant units.
    pub fn output(&self, s: &EsnState<T>) -> Result<T> {
        Ok(self
            .scaling
            .y_from_net(self.reservoir.readout(s, &self.readout)?))
    }

    /// State update from plant-unit input and output. `s.u_prev` is stored in
    /// network units.
    pub fn step(&self, s: &EsnState<T>, u: T, y: T) -> Result<EsnState<T>> {
        self.reservoir
            .step(s, self.scaling.u_to_net(u), self.scaling.y_to_net(y))
    }

    /// State after sitting at a constant operating point for `steps` samples.
    pub fn settle(&self, u: T, y: T, steps: usize) -> Result<EsnState<T>> {
        let mut s = EsnState::zeros(self.n());
        s.u_prev = self.scaling.u_to_net(u);
        for _ in 0..steps {
            s = self.step(&s, u, y)?;
        }
        Ok(s)
    }
}

fn fmt_real(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.16e}");
}

fn write_row<T: Real>(out: &mut String, vals: impl Iterator<Item = T>) {
    let mut first = true;
    for v in vals {
        if !first {
            out.push(' ');
        }
        first = false;
        fmt_real(out, v.as_f64());
    }
    out.push('\n');
}

pub fn reservoir_to_string<T: Real>(w: &ReservoirWeights<T>, scaling: &SignalScaling<T>) -> String {
    let n = w.n();
    let mut s = String::with_capacity(24 * (n * n + 3 * n) + 256);
    let _ = writeln!(s, "{MAGIC} {VERSION}");
    let _ = writeln!(s, "n {n}");
    let _ = writeln!(s, "seed {}", w.seed);
    s.push_str("density ");
    fmt_real(&mut s, w.density);
    let _ = write!(s, "\nscaling {} ", w.scaling.mode);
    fmt_real(&mut s, w.scaling.value);
    s.push_str("\nu_scaling ");
    write_row(&mut s, [scaling.u_center, scaling.u_half_range].into_iter());
    s.push_str("y_scaling ");
    write_row(&mut s, [scaling.y_center, scaling.y_half_range].into_iter());
    let _ = writeln!(s, "w_x {n} {n}");
    for i in 0..n {
        write_row(&mut s, w.w_x.row(i).iter().copied());
    }
    let _ = writeln!(s, "w_u {n}");
    write_row(&mut s, w.w_u.iter().copied());
    let _ = writeln!(s, "w_y {n}");
    write_row(&mut s, w.w_y.iter().copied());
    s
}

pub fn readout_to_string<T: Real>(rw: &ReadoutWeights<T>) -> String {
    let mut s = String::from("readout\nlambda ");
    fmt_real(&mut s, rw.lambda.as_f64());
    s.push_str("\nw_out2 ");
    fmt_real(&mut s, rw.w_out2.as_f64());
    let _ = writeln!(s, "\nw_out1 {}", rw.n());
    write_row(&mut s, rw.w_out1.iter().copied());
    s
}

pub fn model_to_string<T: Real>(m: &EsnModel<T>) -> String {
    let mut s = reservoir_to_string(&m.reservoir, &m.scaling);
    s.push_str(&readout_to_string(&m.readout));
    s
}

/// Parsed file contents; the readout is absent for bare reservoirs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile<T: Real> {
    pub reservoir: ReservoirWeights<T>,
    pub scaling: SignalScaling<T>,
    pub readout: Option<ReadoutWeights<T>>,
}

impl<T: Real> ModelFile<T> {
    pub fn into_model(self) -> Result<EsnModel<T>> {
        let readout = self.readout.ok_or_else(|| Error::Parse {
            line: 0,
            msg: "file holds no readout section".into(),
        })?;
        Ok(EsnModel {
            reservoir: self.reservoir,
            readout,
            scaling: self.scaling,
        })
    }
}

struct Tokens<'a> {
    items: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        let items = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim_start().starts_with('#'))
            .flat_map(|(i, l)| l.split_whitespace().map(move |t| (i + 1, t)))
            .collect();
        Self { items, pos: 0 }
    }

    fn line(&self) -> usize {
        self.items
            .get(self.pos)
            .or(self.items.last())
            .map_or(0, |t| t.0)
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line(),
            msg: msg.into(),
        }
    }

    fn next(&mut self) -> Result<&'a str> {
        let t = self
            .items
            .get(self.pos)
            .ok_or_else(|| self.err("unexpected end of file"))?
            .1;
        self.pos += 1;
        Ok(t)
    }

    fn peek(&self) -> Option<&'a str> {
        self.items.get(self.pos).map(|t| t.1)
    }

    fn expect(&mut self, key: &str) -> Result<()> {
        let t = self.next()?;
        if t != key {
            self.pos -= 1;
            return Err(self.err(format!("expected `{key}`, found `{t}`")));
        }
        Ok(())
    }

    fn parse<V: std::str::FromStr>(&mut self) -> Result<V> {
        let t = self.next()?;
        t.parse().map_err(|_| {
            self.pos -= 1;
            self.err(format!("cannot parse `{t}`"))
        })
    }

    fn real<T: Real>(&mut self) -> Result<T> {
        Ok(T::lit(self.parse::<f64>()?))
    }

    fn dim(&mut self, expected: usize) -> Result<()> {
        let got: usize = self.parse()?;
        if got != expected {
            self.pos -= 1;
            return Err(self.err(format!("dimension {got} does not match n = {expected}")));
        }
        Ok(())
    }
}

pub fn parse_model<T: Real>(text: &str) -> Result<ModelFile<T>> {
    let mut t = Tokens::new(text);
    t.expect(MAGIC)?;
    let version: u32 = t.parse()?;
    if version != VERSION {
        return Err(t.err(format!("unsupported format version {version}")));
    }
    t.expect("n")?;
    let n: usize = t.parse()?;
    t.expect("seed")?;
    let seed: u64 = t.parse()?;
    t.expect("density")?;
    let density: f64 = t.parse()?;
    t.expect("scaling")?;
    let mode = t.next()?.parse()?;
    let value: f64 = t.parse()?;

    let mut scaling = SignalScaling::identity();
    if t.peek() == Some("u_scaling") {
        t.next()?;
        scaling.u_center = t.real()?;
        scaling.u_half_range = t.real()?;
    }
    if t.peek() == Some("y_scaling") {
        t.next()?;
        scaling.y_center = t.real()?;
        scaling.y_half_range = t.real()?;
    }

    t.expect("w_x")?;
    t.dim(n)?;
    t.dim(n)?;
    let mut w_x = DMatrix::<T>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            w_x[(i, j)] = t.real()?;
        }
    }
    t.expect("w_u")?;
    t.dim(n)?;
    let mut w_u = DVector::<T>::zeros(n);
    for v in w_u.iter_mut() {
        *v = t.real()?;
    }
    t.expect("w_y")?;
    t.dim(n)?;
    let mut w_y = DVector::<T>::zeros(n);
    for v in w_y.iter_mut() {
        *v = t.real()?;
    }
    let reservoir = ReservoirWeights {
        w_x,
        w_u,
        w_y,
        density,
        seed,
        scaling: ScalingTarget { mode, value },
    };

    let readout = if t.peek().is_some() {
        t.expect("readout")?;
        t.expect("lambda")?;
        let lambda = t.real()?;
        t.expect("w_out2")?;
        let w_out2 = t.real()?;
        t.expect("w_out1")?;
        t.dim(n)?;
        let mut w_out1 = DVector::<T>::zeros(n);
        for v in w_out1.iter_mut() {
            *v = t.real()?;
        }
        if let Some(extra) = t.peek() {
            return Err(t.err(format!("trailing content `{extra}`")));
        }
        Some(ReadoutWeights::new(w_out1, w_out2, lambda))
    } else {
        None
    };
    Ok(ModelFile {
        reservoir,
        scaling,
        readout,
    })
}

pub fn save_model<T: Real>(m: &EsnModel<T>, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_string(m))?;
    Ok(())
}

pub fn load_model<T: Real>(path: &Path) -> Result<EsnModel<T>> {
    parse_model(&std::fs::read_to_string(path)?)?.into_model()
}
