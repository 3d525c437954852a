//! Fixed-step simulation and trajectory post-processing.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::phsys::{MechModel, State};

pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_HORIZON: f64 = 10.0;

/// Hysteresis band for zero-crossing counts, as a fraction of `|q_i(0) - q_i★|`.
pub const CROSSING_BAND: f64 = 0.005;
/// Settling band, as a fraction of `|q_i(0) - q_i★|`.
pub const SETTLING_BAND: f64 = 0.02;

/// Autonomous vector field on `(q, p)`.
pub trait Dynamics {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, x: &State) -> Result<State>;
}

/// Source of the plant input `u`.
pub trait InputLaw: Send + Sync {
    fn input(&self, model: &MechModel, t: f64, x: &State) -> Result<DVector<f64>>;
}

/// `u ≡ 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroInput;

impl InputLaw for ZeroInput {
    fn input(&self, model: &MechModel, _t: f64, _x: &State) -> Result<DVector<f64>> {
        Ok(DVector::zeros(model.m()))
    }
}

/// Open-loop input given as a function of time.
pub struct InputSchedule<F>(pub F);

impl<F> InputLaw for InputSchedule<F>
where
    F: Fn(f64) -> DVector<f64> + Send + Sync,
{
    fn input(&self, _model: &MechModel, t: f64, _x: &State) -> Result<DVector<f64>> {
        Ok((self.0)(t))
    }
}

/// Plant in feedback with an input law.
pub struct Driven<'a, L: ?Sized> {
    pub model: &'a MechModel,
    pub law: &'a L,
}

impl<L: InputLaw + ?Sized> Dynamics for Driven<'_, L> {
    fn dim(&self) -> usize {
        self.model.n()
    }

    fn rhs(&self, t: f64, x: &State) -> Result<State> {
        let u = self.law.input(self.model, t, x)?;
        self.model.open_loop_rhs(x, &u)
    }
}

fn axpy(x: &State, h: f64, k: &State) -> State {
    State {
        q: &x.q + &k.q * h,
        p: &x.p + &k.p * h,
    }
}

/// One classical Runge-Kutta step.
pub fn rk4_step<D: Dynamics + ?Sized>(sys: &D, t: f64, x: &State, dt: f64) -> Result<State> {
    let k1 = sys.rhs(t, x)?;
    let k2 = sys.rhs(t + 0.5 * dt, &axpy(x, 0.5 * dt, &k1))?;
    let k3 = sys.rhs(t + 0.5 * dt, &axpy(x, 0.5 * dt, &k2))?;
    let k4 = sys.rhs(t + dt, &axpy(x, dt, &k3))?;
    Ok(State {
        q: &x.q + (k1.q + k2.q * 2.0 + k3.q * 2.0 + k4.q) * (dt / 6.0),
        p: &x.p + (k1.p + k2.p * 2.0 + k3.p * 2.0 + k4.p) * (dt / 6.0),
    })
}

fn step_count(dt: f64, horizon: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
    }
    if !(horizon >= 10.0 * dt) {
        return Err(Error::InvalidParameter(format!(
            "horizon {horizon} shorter than ten steps of {dt}"
        )));
    }
    Ok((horizon / dt).round() as usize)
}

/// Integrates `sys` from `x0` and returns the `steps + 1` sampled states.
pub fn integrate_states<D: Dynamics + ?Sized>(
    sys: &D,
    x0: &State,
    dt: f64,
    horizon: f64,
) -> Result<Vec<State>> {
    integrate_states_substepped(sys, x0, dt, horizon, 1)
}

/// As [`integrate_states`], taking `substeps` RK4 steps of `dt / substeps`
/// between consecutive samples.
pub fn integrate_states_substepped<D: Dynamics + ?Sized>(
    sys: &D,
    x0: &State,
    dt: f64,
    horizon: f64,
    substeps: usize,
) -> Result<Vec<State>> {
    check_dim("initial state", sys.dim(), x0.dim())?;
    let (states, _) = march(x0, dt, horizon, substeps, |t, x, h| Ok((rk4_step(sys, t, x, h)?, 0.0)))?;
    Ok(states)
}

/// Fixed-step driver shared by the integrators. `step` advances one substep
/// and returns the new state with the work increment over it.
fn march<F>(x0: &State, dt: f64, horizon: f64, substeps: usize, mut step: F) -> Result<(Vec<State>, Vec<f64>)>
where
    F: FnMut(f64, &State, f64) -> Result<(State, f64)>,
{
    if substeps == 0 {
        return Err(Error::InvalidParameter("substeps must be at least 1".into()));
    }
    let steps = step_count(dt, horizon)?;
    let h = dt / substeps as f64;
    let mut states = Vec::with_capacity(steps + 1);
    let mut work = Vec::with_capacity(steps + 1);
    states.push(x0.clone());
    work.push(0.0);
    let mut x = x0.clone();
    let mut w = 0.0;
    for i in 0..steps {
        for j in 0..substeps {
            let t = i as f64 * dt + j as f64 * h;
            let diverged = Error::Diverged {
                last_finite: i,
                t: t + h,
            };
            (x, w) = match step(t, &x, h) {
                Ok((next, dw)) if next.is_finite() => (next, w + dw),
                Ok(_) | Err(Error::SingularMass { .. }) => return Err(diverged),
                Err(e) => return Err(e),
            };
        }
        states.push(x.clone());
        work.push(w);
    }
    Ok((states, work))
}

/// Plant vector field under `law` together with the supplied power
/// `uᵀy - q̇ᵀDq̇`.
fn driven_stage<L: InputLaw + ?Sized>(model: &MechModel, law: &L, t: f64, x: &State) -> Result<(State, f64)> {
    let u = law.input(model, t, x)?;
    let qdot = model.velocity(x)?;
    let force = model.input_force(&u)?;
    let power = force.dot(&qdot) - qdot.dot(&model.damping().component_mul(&qdot));
    let pdot = model.momentum_rate(&x.q, &qdot, &u)?;
    Ok((State { q: qdot, p: pdot }, power))
}

/// RK4 on the plant augmented with the work integral `ẇ = uᵀy - q̇ᵀDq̇`.
fn driven_rk4_step<L: InputLaw + ?Sized>(model: &MechModel, law: &L, t: f64, x: &State, dt: f64) -> Result<(State, f64)> {
    let (k1, w1) = driven_stage(model, law, t, x)?;
    let (k2, w2) = driven_stage(model, law, t + 0.5 * dt, &axpy(x, 0.5 * dt, &k1))?;
    let (k3, w3) = driven_stage(model, law, t + 0.5 * dt, &axpy(x, 0.5 * dt, &k2))?;
    let (k4, w4) = driven_stage(model, law, t + dt, &axpy(x, dt, &k3))?;
    let next = State {
        q: &x.q + (k1.q + k2.q * 2.0 + k3.q * 2.0 + k4.q) * (dt / 6.0),
        p: &x.p + (k1.p + k2.p * 2.0 + k3.p * 2.0 + k4.p) * (dt / 6.0),
    };
    Ok((next, (w1 + 2.0 * w2 + 2.0 * w3 + w4) * (dt / 6.0)))
}

/// Integration settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Record exact accelerations alongside the samples.
    pub exact_accel: bool,
    /// RK4 steps per recorded sample.
    pub substeps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            horizon: DEFAULT_HORIZON,
            exact_accel: false,
            substeps: 1,
        }
    }
}

/// Uniformly sampled record of `(q, q̇, u)` and optionally `q̈`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub q: Vec<DVector<f64>>,
    pub qdot: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub qddot: Option<Vec<DVector<f64>>>,
    /// Supplied work `∫(uᵀy - q̇ᵀDq̇)dt` accumulated by the integrator.
    pub work: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(
        dt: f64,
        q: Vec<DVector<f64>>,
        qdot: Vec<DVector<f64>>,
        u: Vec<DVector<f64>>,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter("sample period must be positive".into()));
        }
        let len = q.len();
        check_dim("velocity series length", len, qdot.len())?;
        check_dim("input series length", len, u.len())?;
        if len < 3 {
            return Err(Error::TooShort { len, min: 3 });
        }
        let n = q[0].len();
        let m = u[0].len();
        for i in 0..len {
            check_dim("q sample", n, q[i].len())?;
            check_dim("q̇ sample", n, qdot[i].len())?;
            check_dim("u sample", m, u[i].len())?;
        }
        Ok(Self {
            dt,
            q,
            qdot,
            u,
            qddot: None,
            work: None,
        })
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn n(&self) -> usize {
        self.q[0].len()
    }

    pub fn m(&self) -> usize {
        self.u[0].len()
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    pub fn duration(&self) -> f64 {
        self.time(self.len() - 1)
    }

    /// Column `k` of the velocity record.
    pub fn velocity_series(&self, k: usize) -> Vec<f64> {
        self.qdot.iter().map(|v| v[k]).collect()
    }
}

impl fmt::Display for Trajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "trajectory: {} samples, dt = {}, n = {}, m = {}",
            self.len(),
            self.dt,
            self.n(),
            self.m()
        )
    }
}

/// Integrates `model` driven by `law` and records `(q, q̇, u)` at every step.
pub fn integrate<L: InputLaw + ?Sized>(
    model: &MechModel,
    law: &L,
    x0: &State,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    check_dim("initial state", model.n(), x0.dim())?;
    let (states, work) = march(x0, cfg.dt, cfg.horizon, cfg.substeps, |t, x, h| {
        driven_rk4_step(model, law, t, x, h)
    })?;
    let mut q = Vec::with_capacity(states.len());
    let mut qdot = Vec::with_capacity(states.len());
    let mut u = Vec::with_capacity(states.len());
    let mut qddot = cfg.exact_accel.then(|| Vec::with_capacity(states.len()));
    for (i, x) in states.iter().enumerate() {
        let ui = law.input(model, i as f64 * cfg.dt, x)?;
        qdot.push(model.velocity(x)?);
        if let Some(acc) = qddot.as_mut() {
            acc.push(model.acceleration(x, &ui)?);
        }
        q.push(x.q.clone());
        u.push(ui);
    }
    let mut traj = Trajectory::new(cfg.dt, q, qdot, u)?;
    traj.qddot = qddot;
    traj.work = Some(work);
    Ok(traj)
}

/// Differentiates the velocity record: central differences inside,
/// second-order one-sided stencils at both ends.
pub fn reconstruct_accel(traj: &Trajectory) -> Result<Trajectory> {
    let len = traj.len();
    if len < 3 {
        return Err(Error::TooShort { len, min: 3 });
    }
    let v = &traj.qdot;
    let h2 = 2.0 * traj.dt;
    let mut acc = Vec::with_capacity(len);
    acc.push((&v[0] * -3.0 + &v[1] * 4.0 - &v[2]) / h2);
    for i in 1..len - 1 {
        acc.push((&v[i + 1] - &v[i - 1]) / h2);
    }
    acc.push((&v[len - 1] * 3.0 - &v[len - 2] * 4.0 + &v[len - 3]) / h2);
    let mut out = traj.clone();
    out.qddot = Some(acc);
    Ok(out)
}

/// Trapezoidal rule on a uniform grid.
pub fn trapezoid(values: &[f64], dt: f64) -> f64 {
    match values {
        [] | [_] => 0.0,
        [first, .., last] => dt * (values.iter().sum::<f64>() - 0.5 * (first + last)),
    }
}

/// Running trapezoidal integral, starting at 0.
pub fn cumulative_trapezoid(values: &[f64], dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in values.windows(2) {
        acc += 0.5 * dt * (w[0] + w[1]);
        out.push(acc);
    }
    out
}

/// Running integral, starting at 0: Simpson's rule across pairs of steps,
/// closed by a three-point quadratic stencil on odd indices.
pub fn cumulative_simpson(values: &[f64], dt: f64) -> Vec<f64> {
    let len = values.len();
    if len < 3 {
        return cumulative_trapezoid(values, dt);
    }
    let f = values;
    let mut out = vec![0.0; len];
    out[1] = dt / 12.0 * (5.0 * f[0] + 8.0 * f[1] - f[2]);
    for i in 2..len {
        out[i] = if i % 2 == 0 {
            out[i - 2] + dt / 3.0 * (f[i - 2] + 4.0 * f[i - 1] + f[i])
        } else {
            out[i - 1] + dt / 12.0 * (-f[i - 2] + 8.0 * f[i - 1] + 5.0 * f[i])
        };
    }
    out
}

/// Hamiltonian along a recorded trajectory, from `(q, q̇)`.
pub fn energy_series(model: &MechModel, traj: &Trajectory) -> Vec<f64> {
    traj.q
        .iter()
        .zip(&traj.qdot)
        .map(|(q, v)| 0.5 * v.dot(&(model.mass(q) * v)) + model.potential(q))
        .collect()
}

/// Largest deviation from the power balance
/// `H(t) - H(0) = ∫ (uᵀy - q̇ᵀDq̇) dτ` over all prefixes. Uses the
/// integrator's work record when present, else quadrature of the samples.
pub fn energy_audit(model: &MechModel, traj: &Trajectory) -> Result<f64> {
    check_dim("trajectory configuration", model.n(), traj.n())?;
    check_dim("trajectory input", model.m(), traj.m())?;
    let work = match &traj.work {
        Some(w) => w.clone(),
        None => cumulative_simpson(&supplied_power(model, traj), traj.dt),
    };
    let h = energy_series(model, traj);
    Ok(h.iter()
        .zip(&work)
        .map(|(hi, wi)| (hi - h[0] - wi).abs())
        .fold(0.0, f64::max))
}

/// `uᵀy - q̇ᵀDq̇` at every sample.
pub fn supplied_power(model: &MechModel, traj: &Trajectory) -> Vec<f64> {
    let g = model.input_matrix();
    let d = model.damping();
    let power: Vec<f64> = traj
        .qdot
        .iter()
        .zip(&traj.u)
        .map(|(v, u)| u.dot(&(g.transpose() * v)) - v.dot(&d.component_mul(v)))
        .collect();
    power
}

/// Transient-response figures for one coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateMetrics {
    /// Sign changes of `q_i - q_i★`, with hysteresis.
    pub zero_crossings: usize,
    /// Largest excursion past the target, as a fraction of the initial error.
    pub overshoot: f64,
    /// Entry time into the 2% band for good; `None` when still outside at the end.
    pub settling_time: Option<f64>,
    pub peak_count: usize,
    /// Started at the target.
    pub trivially_settled: bool,
}

impl CoordinateMetrics {
    fn at_target() -> Self {
        Self {
            zero_crossings: 0,
            overshoot: 0.0,
            settling_time: Some(0.0),
            peak_count: 0,
            trivially_settled: true,
        }
    }

    /// Overshoot that clears the crossing hysteresis band.
    pub fn overshoots(&self) -> bool {
        self.overshoot > CROSSING_BAND
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OscillationMetrics {
    pub coordinates: Vec<CoordinateMetrics>,
}

/// Per-coordinate metrics of an error signal sampled every `dt`.
pub fn coordinate_metrics(error: &[f64], dt: f64) -> CoordinateMetrics {
    let e0 = error[0];
    if e0 == 0.0 {
        return CoordinateMetrics::at_target();
    }
    let scale = e0.abs();
    let sign = e0.signum();
    // error measured positive on the starting side
    let s: Vec<f64> = error.iter().map(|e| sign * e).collect();

    let overshoot = s.iter().fold(0.0f64, |acc, &v| acc.max(-v)) / scale;

    let band = CROSSING_BAND * scale;
    let mut side = 1.0;
    let mut zero_crossings = 0;
    for &v in &s {
        if side > 0.0 && v < -band {
            side = -1.0;
            zero_crossings += 1;
        } else if side < 0.0 && v > band {
            side = 1.0;
            zero_crossings += 1;
        }
    }

    let settle = SETTLING_BAND * scale;
    let settling_time = match s.iter().rposition(|v| v.abs() > settle) {
        None => Some(0.0),
        Some(i) if i + 1 == s.len() => None,
        Some(i) => Some((i + 1) as f64 * dt),
    };

    let peak_count = s
        .windows(3)
        .filter(|w| (w[1] - w[0]) * (w[2] - w[1]) < 0.0 && w[1].abs() > band)
        .count();

    CoordinateMetrics {
        zero_crossings,
        overshoot,
        settling_time,
        peak_count,
        trivially_settled: false,
    }
}

pub fn oscillation_metrics(traj: &Trajectory, q_star: &DVector<f64>) -> Result<OscillationMetrics> {
    check_dim("target configuration", traj.n(), q_star.len())?;
    let coordinates = (0..traj.n())
        .map(|i| {
            let e: Vec<f64> = traj.q.iter().map(|q| q[i] - q_star[i]).collect();
            coordinate_metrics(&e, traj.dt)
        })
        .collect();
    Ok(OscillationMetrics { coordinates })
}

/// Adds zero-mean Gaussian noise of deviation `sigma` to the recorded velocities.
pub fn add_velocity_noise(traj: &mut Trajectory, sigma: f64, seed: u64) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::InvalidParameter(format!("noise sigma {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in traj.qdot.iter_mut() {
        for x in v.iter_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    // exact accelerations no longer describe the noisy record
    traj.qddot = None;
    Ok(())
}

/// Writes `t,q1..qn,qd1..qdn,u1..um`, shortest round-trip decimals.
pub fn write_csv<W: Write>(traj: &Trajectory, mut w: W) -> Result<()> {
    let n = traj.n();
    let m = traj.m();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("q{i}")));
    header.extend((1..=n).map(|i| format!("qd{i}")));
    header.extend((1..=m).map(|i| format!("u{i}")));
    writeln!(w, "{}", header.join(","))?;
    let mut line = String::new();
    for i in 0..traj.len() {
        line.clear();
        line.push_str(&format!("{:?}", traj.time(i)));
        for v in traj.q[i].iter().chain(traj.qdot[i].iter()).chain(traj.u[i].iter()) {
            line.push_str(&format!(",{v:?}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn write_csv_file(traj: &Trajectory, path: &Path) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_csv(traj, f)
}

fn parse_header(path: &str, header: &csv::StringRecord) -> Result<(usize, usize)> {
    let bad = |msg: String| Error::Parse {
        path: path.to_string(),
        line: 1,
        msg,
    };
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.first() != Some(&"t") {
        return Err(bad("first column must be `t`".into()));
    }
    let count = |prefix: &str| {
        cols.iter()
            .filter(|c| {
                c.strip_prefix(prefix)
                    .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
            })
            .count()
    };
    let n = count("q");
    let nd = count("qd");
    let m = count("u");
    let mut expected = vec!["t".to_string()];
    expected.extend((1..=n).map(|i| format!("q{i}")));
    expected.extend((1..=n).map(|i| format!("qd{i}")));
    expected.extend((1..=m).map(|i| format!("u{i}")));
    if n == 0 || nd != n || m == 0 || cols != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(bad(format!("unexpected header `{}`", cols.join(","))));
    }
    Ok((n, m))
}

/// Parses a trajectory CSV. `name` labels errors.
pub fn read_csv<R: Read>(reader: R, name: &str) -> Result<Trajectory> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Parse {
        path: name.to_string(),
        line: 1,
        msg: e.to_string(),
    })?;
    if header.is_empty() || (header.len() == 1 && header[0].trim().is_empty()) {
        return Err(Error::Parse {
            path: name.to_string(),
            line: 1,
            msg: "empty file".into(),
        });
    }
    let (n, m) = parse_header(name, &header.clone())?;
    let width = 1 + 2 * n + m;
    let mut t = Vec::new();
    let mut q = Vec::new();
    let mut qdot = Vec::new();
    let mut u = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::Parse {
            path: name.to_string(),
            line,
            msg: e.to_string(),
        })?;
        if rec.len() != width {
            return Err(Error::Parse {
                path: name.to_string(),
                line,
                msg: format!("expected {width} columns, found {}", rec.len()),
            });
        }
        let vals = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Parse {
                path: name.to_string(),
                line,
                msg: e.to_string(),
            })?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: name.to_string(),
                line,
                msg: "non-finite value".into(),
            });
        }
        t.push(vals[0]);
        q.push(DVector::from_column_slice(&vals[1..1 + n]));
        qdot.push(DVector::from_column_slice(&vals[1 + n..1 + 2 * n]));
        u.push(DVector::from_column_slice(&vals[1 + 2 * n..]));
    }
    if t.len() < 3 {
        return Err(Error::Parse {
            path: name.to_string(),
            line: t.len() + 1,
            msg: format!("{} samples, at least 3 required", t.len()),
        });
    }
    let dt = t[1] - t[0];
    for (i, w) in t.windows(2).enumerate() {
        if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1.0) {
            return Err(Error::Parse {
                path: name.to_string(),
                line: i + 3,
                msg: "non-uniform sampling".into(),
            });
        }
    }
    Trajectory::new(dt, q, qdot, u)
}

pub fn read_csv_file(path: &Path) -> Result<Trajectory> {
    let f = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(f), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;
    use approx::assert_relative_eq;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn scalar_traj(dt: f64, len: usize, q: impl Fn(f64) -> f64, v: impl Fn(f64) -> f64) -> Trajectory {
        let ts: Vec<f64> = (0..len).map(|i| i as f64 * dt).collect();
        Trajectory::new(
            dt,
            ts.iter().map(|&t| dv(&[q(t)])).collect(),
            ts.iter().map(|&t| dv(&[v(t)])).collect(),
            ts.iter().map(|_| dv(&[0.0])).collect(),
        )
        .unwrap()
    }

    #[test]
    fn undamped_oscillator_conserves_energy() {
        let m = models::linear_chain(&[1.0], &[0.0], &[1.0]).unwrap();
        let x0 = State::new(dv(&[1.0]), dv(&[0.0])).unwrap();
        let traj = integrate(&m, &ZeroInput, &x0, &SimConfig::default()).unwrap();
        let h = energy_series(&m, &traj);
        assert!(((h[h.len() - 1] - h[0]) / h[0]).abs() < 1e-8);
        assert!(energy_audit(&m, &traj).unwrap() < 1e-7);
    }

    #[test]
    fn damped_decay_matches_closed_form() {
        let m = models::linear_chain(&[1.0], &[0.5], &[0.0]).unwrap();
        let x0 = State::new(dv(&[0.0]), dv(&[1.0])).unwrap();
        let cfg = SimConfig {
            horizon: 2.0,
            ..Default::default()
        };
        let traj = integrate(&m, &ZeroInput, &x0, &cfg).unwrap();
        let last = traj.qdot.last().unwrap()[0];
        assert!((last - (-1.0f64).exp()).abs() < 1e-6);
        assert_eq!(traj.len(), 2001);
        let h = energy_series(&m, &traj);
        assert!(h.windows(2).all(|w| w[1] <= w[0]));
        assert!(energy_audit(&m, &traj).unwrap() < 1e-6);
    }

    #[test]
    fn work_record_matches_dissipated_energy() {
        // p(t) = e^{-t/2}, so the dissipated work is (e^{-t} - 1) / 2
        let m = models::linear_chain(&[1.0], &[0.5], &[0.0]).unwrap();
        let x0 = State::new(dv(&[0.0]), dv(&[1.0])).unwrap();
        let cfg = SimConfig {
            horizon: 2.0,
            substeps: 3,
            ..Default::default()
        };
        let mut traj = integrate(&m, &ZeroInput, &x0, &cfg).unwrap();
        let work = traj.work.clone().unwrap();
        for (i, w) in work.iter().enumerate() {
            let t = i as f64 * cfg.dt;
            assert!((w - 0.5 * ((-t).exp() - 1.0)).abs() < 1e-12);
        }
        assert!(energy_audit(&m, &traj).unwrap() < 1e-12);
        traj.work = None;
        let fallback = energy_audit(&m, &traj).unwrap();
        assert!(fallback > 1e-14 && fallback < 1e-9);
    }

    #[test]
    fn integration_is_deterministic() {
        let m = models::rigid_2dof(&Default::default()).unwrap();
        let law = InputSchedule(|t: f64| dv(&[t.sin(), 0.5 * t.cos()]));
        let x0 = State::zeros(2);
        let cfg = SimConfig {
            horizon: 1.0,
            ..Default::default()
        };
        let a = integrate(&m, &law, &x0, &cfg).unwrap();
        let b = integrate(&m, &law, &x0, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_step_settings() {
        let m = models::linear_chain(&[1.0], &[0.5], &[0.0]).unwrap();
        let x0 = State::zeros(1);
        for (dt, horizon) in [(0.0, 1.0), (-1e-3, 1.0), (0.1, 0.5)] {
            let cfg = SimConfig {
                dt,
                horizon,
                exact_accel: false,
                substeps: 1,
            };
            assert!(integrate(&m, &ZeroInput, &x0, &cfg).is_err());
        }
    }

    #[test]
    fn divergence_is_reported() {
        // explicit RK4 is unstable for |λ dt| beyond ~2.8
        let m = models::linear_chain(&[1.0], &[1e4], &[0.0]).unwrap();
        let x0 = State::new(dv(&[0.0]), dv(&[1.0])).unwrap();
        let cfg = SimConfig {
            dt: 1e-3,
            horizon: 10.0,
            exact_accel: false,
            substeps: 1,
        };
        match integrate(&m, &ZeroInput, &x0, &cfg) {
            Err(Error::Diverged { last_finite, .. }) => assert!(last_finite > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn accel_of_linear_velocity_is_exact() {
        let traj = scalar_traj(0.01, 200, |t| t * t, |t| 2.0 * t);
        let acc = reconstruct_accel(&traj).unwrap();
        for a in acc.qddot.unwrap() {
            assert!((a[0] - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn accel_of_sine_is_second_order() {
        let dt = 1e-3;
        let traj = scalar_traj(dt, 5000, f64::sin, f64::cos);
        let acc = reconstruct_accel(&traj).unwrap().qddot.unwrap();
        let err = acc
            .iter()
            .enumerate()
            .map(|(i, a)| (a[0] + (i as f64 * dt).sin()).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn accel_of_constant_is_zero() {
        let traj = scalar_traj(0.1, 10, |_| 3.0, |_| 0.0);
        assert!(reconstruct_accel(&traj)
            .unwrap()
            .qddot
            .unwrap()
            .iter()
            .all(|a| a[0] == 0.0));
    }

    #[test]
    fn too_short_record_rejected() {
        let r = Trajectory::new(0.1, vec![dv(&[0.0]); 2], vec![dv(&[0.0]); 2], vec![dv(&[0.0]); 2]);
        assert!(matches!(r, Err(Error::TooShort { .. })));
    }

    #[test]
    fn monotone_approach_has_no_oscillation() {
        let dt = 1e-3;
        let e: Vec<f64> = (0..10_000).map(|i| -(-(i as f64) * dt).exp()).collect();
        let c = coordinate_metrics(&e, dt);
        assert_eq!(c.zero_crossings, 0);
        assert_eq!(c.overshoot, 0.0);
        assert_eq!(c.peak_count, 0);
        // |e| = 0.02 at t = ln 50
        assert_relative_eq!(c.settling_time.unwrap(), 50f64.ln(), epsilon = 2e-3);
    }

    #[test]
    fn decaying_cosine_crosses_repeatedly() {
        let dt = 1e-3;
        let e: Vec<f64> = (0..10_000)
            .map(|i| {
                let t = i as f64 * dt;
                -(-t).exp() * (5.0 * t).cos()
            })
            .collect();
        let c = coordinate_metrics(&e, dt);
        assert!(c.zero_crossings >= 3, "{c:?}");
        assert!(c.overshoot > 0.3);
        assert!(c.peak_count >= 3);
    }

    #[test]
    fn target_start_is_trivially_settled() {
        let traj = scalar_traj(0.01, 100, |_| 1.0, |_| 0.0);
        let m = oscillation_metrics(&traj, &dv(&[1.0])).unwrap();
        assert!(m.coordinates[0].trivially_settled);
        assert_eq!(m.coordinates[0].settling_time, Some(0.0));
    }

    #[test]
    fn unsettled_signal_reports_none() {
        let e: Vec<f64> = (0..100).map(|i| 1.0 - 0.001 * i as f64).collect();
        assert_eq!(coordinate_metrics(&e, 0.1).settling_time, None);
    }

    #[test]
    fn trapezoid_rules() {
        assert_eq!(trapezoid(&[1.0, 1.0, 1.0], 0.5), 1.0);
        assert_eq!(cumulative_trapezoid(&[0.0, 2.0, 4.0], 1.0), vec![0.0, 1.0, 4.0]);
        // exact on cubics: ∫₀ᵗ 3τ² dτ = t³
        let f: Vec<f64> = (0..7).map(|i| 3.0 * (0.5 * i as f64).powi(2)).collect();
        for (i, v) in cumulative_simpson(&f, 0.5).iter().enumerate() {
            assert!((v - (0.5 * i as f64).powi(3)).abs() < 1e-12, "{i} {v}");
        }
        assert_eq!(trapezoid(&[3.0], 1.0), 0.0);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = models::rigid_2dof(&Default::default()).unwrap();
        let law = InputSchedule(|t: f64| dv(&[0.1 * t.sin(), 1.0 / 3.0]));
        let cfg = SimConfig {
            horizon: 0.05,
            ..Default::default()
        };
        let traj = integrate(&m, &law, &State::zeros(2), &cfg).unwrap();
        let mut buf = Vec::new();
        write_csv(&traj, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,q1,q2,qd1,qd2,u1,u2\n"));
        let back = read_csv(buf.as_slice(), "mem").unwrap();
        assert_eq!(back.q, traj.q);
        assert_eq!(back.qdot, traj.qdot);
        assert_eq!(back.u, traj.u);
    }

    #[test]
    fn csv_errors_name_lines() {
        assert!(matches!(read_csv("".as_bytes(), "empty.csv"), Err(Error::Parse { .. })));
        let bad = "t,q1,qd1,u1\n0,0,0,0\n0.1,0,0\n0.2,0,0,0\n";
        match read_csv(bad.as_bytes(), "bad.csv") {
            Err(Error::Parse { path, line, .. }) => {
                assert_eq!(path, "bad.csv");
                assert_eq!(line, 3);
            }
            other => panic!("{other:?}"),
        }
        let uneven = "t,q1,qd1,u1\n0,0,0,0\n0.1,0,0,0\n0.3,0,0,0\n";
        assert!(read_csv(uneven.as_bytes(), "u.csv").is_err());
        let header = "t,q1,qd2,u1\n0,0,0,0\n0.1,0,0,0\n0.2,0,0,0\n";
        assert!(read_csv(header.as_bytes(), "h.csv").is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let mut a = scalar_traj(0.01, 50, |_| 0.0, |_| 0.0);
        let mut b = a.clone();
        add_velocity_noise(&mut a, 0.1, 7).unwrap();
        add_velocity_noise(&mut b, 0.1, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.qdot.iter().any(|v| v[0] != 0.0));
    }
}
