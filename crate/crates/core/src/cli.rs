//! Scenario-driven batch commands behind the `phctl` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ebdi::{self, IdentificationReport, IdentifyOptions};
use crate::error::{check_dim, Error, Result};
use crate::models::ModelConfig;
use crate::pbc::{self, matrix_from_rows, ClosedLoop, Controller, ControllerKind, ControllerSpec, Gains};
use crate::phsys::{MechModel, State};
use crate::sim::{self, OscillationMetrics, SimConfig, Trajectory};
use crate::tuning::{self, GershgorinReport, TuningReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_UNIDENTIFIABLE: i32 = 4;
pub const EXIT_UNSUPPORTED: i32 = 5;

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "PHCTL_THREADS";

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Diverged { .. } | Error::SingularMass { .. } => EXIT_DIVERGED,
        Error::Unidentifiable { .. } | Error::IllConditioned { .. } => EXIT_UNIDENTIFIABLE,
        Error::Unsupported(_) => EXIT_UNSUPPORTED,
        _ => EXIT_CONFIG,
    }
}

/// Caps rayon's global pool from `PHCTL_THREADS`, if set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // a pool built earlier in the process keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationBlock {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(rename = "T", default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub q0: Option<Vec<f64>>,
    #[serde(default)]
    pub p0: Option<Vec<f64>>,
    /// RK4 steps per recorded sample.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_dt() -> f64 {
    sim::DEFAULT_DT
}

fn default_horizon() -> f64 {
    sim::DEFAULT_HORIZON
}

fn default_substeps() -> usize {
    1
}

impl Default for SimulationBlock {
    fn default() -> Self {
        Self {
            dt: default_dt(),
            horizon: default_horizon(),
            q0: None,
            p0: None,
            substeps: 1,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

/// One identification run; unset fields fall back to the scenario's
/// controller and simulation blocks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    #[serde(default)]
    pub q_star: Option<Vec<f64>>,
    #[serde(default)]
    pub q0: Option<Vec<f64>>,
    #[serde(default)]
    pub p0: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuneMode {
    #[default]
    Check,
    Synthesize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningBlock {
    #[serde(default)]
    pub mode: TuneMode,
    /// Damping used in place of the model's, e.g. an identified `γ`.
    #[serde(default)]
    pub d_star: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisBlock {
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub beta_max: Option<f64>,
    /// Second gain set analysed side by side with the main controller.
    #[serde(default)]
    pub compare: Option<ControllerSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: Option<String>,
    pub model: ModelConfig,
    #[serde(default)]
    pub controller: Option<ControllerSpec>,
    #[serde(default)]
    pub simulation: SimulationBlock,
    #[serde(default)]
    pub experiments: Vec<Experiment>,
    /// Trajectory CSV files, relative to the scenario file.
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
    #[serde(default)]
    pub tuning: Option<TuningBlock>,
    #[serde(default)]
    pub analysis: Option<AnalysisBlock>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))
    }

    /// Reads a scenario and resolves its relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut sc = Self::from_json(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in sc.inputs.iter_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(dir) = sc.output_dir.as_mut() {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        if sc.name.is_none() {
            sc.name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
        Ok(sc)
    }

    fn controller_spec(&self) -> Result<&ControllerSpec> {
        self.controller
            .as_ref()
            .ok_or_else(|| Error::Config("scenario has no controller block".into()))
    }

    fn sim_config(&self, exact_accel: bool) -> Result<SimConfig> {
        let s = &self.simulation;
        if !(s.dt > 0.0 && s.dt.is_finite()) {
            return Err(Error::Config(format!("simulation.dt must be positive, got {}", s.dt)));
        }
        if !(s.horizon > 0.0 && s.horizon.is_finite()) {
            return Err(Error::Config(format!("simulation.T must be positive, got {}", s.horizon)));
        }
        if !(s.noise_sigma >= 0.0) {
            return Err(Error::Config("simulation.noise_sigma must be non-negative".into()));
        }
        if s.substeps == 0 {
            return Err(Error::Config("simulation.substeps must be at least 1".into()));
        }
        Ok(SimConfig {
            dt: s.dt,
            horizon: s.horizon,
            exact_accel,
            substeps: s.substeps,
        })
    }
}

fn initial_state(n: usize, q0: Option<&Vec<f64>>, p0: Option<&Vec<f64>>) -> Result<State> {
    let vec = |name: &str, v: Option<&Vec<f64>>| -> Result<DVector<f64>> {
        match v {
            None => Ok(DVector::zeros(n)),
            Some(v) => {
                check_dim(name, n, v.len())?;
                Ok(DVector::from_column_slice(v))
            }
        }
    };
    State::new(vec("q0", q0)?, vec("p0", p0)?)
}

/// Command-line overrides shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub exact_accel: bool,
    pub epsilon: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Identify,
    Tune,
    Analyze,
}

/// Files written and a short human-readable summary.
#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub written: Vec<PathBuf>,
    pub lines: Vec<String>,
}

/// Files are collected first and written together once the command succeeded.
struct Outputs {
    dir: PathBuf,
    files: Vec<(PathBuf, String)>,
}

impl Outputs {
    fn new(scenario: &Scenario, opts: &RunOptions) -> Self {
        let dir = opts
            .out
            .clone()
            .or_else(|| scenario.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("phctl_out").join(scenario.name.as_deref().unwrap_or("scenario")));
        Self { dir, files: Vec::new() }
    }

    fn add(&mut self, name: &str, body: String) {
        self.files.push((self.dir.join(name), body));
    }

    fn flush(self) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(&self.dir)?;
        let mut written = Vec::with_capacity(self.files.len());
        for (path, body) in self.files {
            fs::write(&path, body)?;
            written.push(path);
        }
        Ok(written)
    }
}

pub fn run(cmd: Command, scenario: &Scenario, opts: &RunOptions) -> Result<RunSummary> {
    let mut out = Outputs::new(scenario, opts);
    let lines = match cmd {
        Command::Simulate => cmd_simulate(scenario, opts, &mut out)?,
        Command::Identify => cmd_identify(scenario, opts, &mut out)?,
        Command::Tune => cmd_tune(scenario, opts, &mut out)?,
        Command::Analyze => cmd_analyze(scenario, opts, &mut out)?,
    };
    Ok(RunSummary {
        written: out.flush()?,
        lines,
    })
}

pub fn run_file(cmd: Command, path: &Path, opts: &RunOptions) -> Result<RunSummary> {
    run(cmd, &Scenario::load(path)?, opts)
}

// ---------------------------------------------------------------- simulate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub scenario: String,
    pub model: String,
    pub controller: ControllerKind,
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub samples: usize,
    pub q_star: Vec<f64>,
    pub final_q: Vec<f64>,
    pub final_error_norm: f64,
    /// Largest deviation from the plant power balance along the run.
    pub energy_balance_residual: f64,
    pub metrics: OscillationMetrics,
}

/// Closed-loop run of one scenario's controller; returns the record and the controller.
pub fn simulate_scenario(scenario: &Scenario, exact_accel: bool) -> Result<(MechModel, Controller, Trajectory)> {
    let model = scenario.model.build()?;
    let ctrl = Controller::from_spec(scenario.controller_spec()?, &model)?;
    if !ctrl.allow_unstable {
        ClosedLoop::new(&model, &ctrl)?;
    }
    let cfg = scenario.sim_config(exact_accel)?;
    let x0 = initial_state(model.n(), scenario.simulation.q0.as_ref(), scenario.simulation.p0.as_ref())?;
    let traj = sim::integrate(&model, &ctrl, &x0, &cfg)?;
    Ok((model, ctrl, traj))
}

fn plot_csv(traj: &Trajectory, q_star: &DVector<f64>) -> String {
    let mut s = String::from("t");
    for i in 1..=traj.n() {
        let _ = write!(s, ",q{i},q{i}_star");
    }
    s.push('\n');
    for (k, q) in traj.q.iter().enumerate() {
        let _ = write!(s, "{:?}", traj.time(k));
        for i in 0..traj.n() {
            let _ = write!(s, ",{:?},{:?}", q[i], q_star[i]);
        }
        s.push('\n');
    }
    s
}

fn cmd_simulate(scenario: &Scenario, opts: &RunOptions, out: &mut Outputs) -> Result<Vec<String>> {
    let (model, ctrl, mut traj) = simulate_scenario(scenario, opts.exact_accel)?;
    let audit = sim::energy_audit(&model, &traj)?;
    let metrics = sim::oscillation_metrics(&traj, &ctrl.q_star)?;
    let sigma = scenario.simulation.noise_sigma;
    if sigma > 0.0 {
        sim::add_velocity_noise(&mut traj, sigma, opts.seed.unwrap_or(scenario.simulation.seed))?;
    }
    let last = traj.q.last().expect("trajectory has samples").clone();
    let report = SimulationReport {
        scenario: scenario.name.clone().unwrap_or_default(),
        model: model.name().into(),
        controller: ctrl.kind(),
        dt: traj.dt,
        horizon: traj.duration(),
        samples: traj.len(),
        q_star: ctrl.q_star.iter().copied().collect(),
        final_error_norm: (&last - &ctrl.q_star).norm(),
        final_q: last.iter().copied().collect(),
        energy_balance_residual: audit,
        metrics,
    };
    let mut csv = Vec::new();
    sim::write_csv(&traj, &mut csv)?;
    out.add("trajectory.csv", String::from_utf8(csv).expect("csv is utf-8"));
    out.add("plot.csv", plot_csv(&traj, &ctrl.q_star));
    out.add("metrics.json", to_json(&report)?);
    let mut lines = vec![format!(
        "simulated {} samples, final error {:.3e}, energy balance residual {:.3e}",
        report.samples, report.final_error_norm, audit
    )];
    for (i, c) in report.metrics.coordinates.iter().enumerate() {
        lines.push(format!(
            "q{}: crossings {}, overshoot {:.4}%, settling {}",
            i + 1,
            c.zero_crossings,
            100.0 * c.overshoot,
            c.settling_time.map_or("never".into(), |t| format!("{t:.3} s"))
        ));
    }
    Ok(lines)
}

// ---------------------------------------------------------------- identify

/// Runs every experiment of an identification scenario in parallel.
pub fn run_experiments(scenario: &Scenario, exact_accel: bool, seed: Option<u64>) -> Result<(MechModel, Vec<Trajectory>)> {
    let model = scenario.model.build()?;
    let base = scenario.controller_spec()?;
    if scenario.experiments.is_empty() {
        return Err(Error::Config("identify needs at least one experiment or input file".into()));
    }
    let cfg = scenario.sim_config(exact_accel)?;
    let sigma = scenario.simulation.noise_sigma;
    let seed = seed.unwrap_or(scenario.simulation.seed);
    let trajs = scenario
        .experiments
        .par_iter()
        .enumerate()
        .map(|(h, ex)| {
            let mut spec = base.clone();
            if let Some(q) = &ex.q_star {
                spec.q_star = q.clone();
            }
            let ctrl = Controller::from_spec(&spec, &model)?;
            let q0 = ex.q0.as_ref().or(scenario.simulation.q0.as_ref());
            let p0 = ex.p0.as_ref().or(scenario.simulation.p0.as_ref());
            let x0 = initial_state(model.n(), q0, p0)?;
            let mut traj = sim::integrate(&model, &ctrl, &x0, &cfg)?;
            if sigma > 0.0 {
                if exact_accel {
                    return Err(Error::Config("exact accelerations cannot be combined with velocity noise".into()));
                }
                sim::add_velocity_noise(&mut traj, sigma, seed.wrapping_add(h as u64))?;
            }
            Ok(traj)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((model, trajs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifyOutput {
    pub scenario: String,
    pub model: String,
    /// Damping of the simulated plant, when the data came from simulation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_error: Option<Vec<f64>>,
    pub report: IdentificationReport,
}

pub fn identify_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<(IdentifyOutput, Vec<Trajectory>)> {
    let id_opts = IdentifyOptions {
        exact_accel: opts.exact_accel,
    };
    if !scenario.inputs.is_empty() {
        let model = scenario.model.build()?;
        let report = ebdi::identify_from_files(&model, &scenario.inputs, id_opts)?;
        let out = IdentifyOutput {
            scenario: scenario.name.clone().unwrap_or_default(),
            model: model.name().into(),
            truth: None,
            relative_error: None,
            report,
        };
        return Ok((out, Vec::new()));
    }
    let (model, trajs) = run_experiments(scenario, opts.exact_accel, opts.seed)?;
    let (reg, est) = ebdi::identify(&model, &trajs, id_opts)?;
    let truth: Vec<f64> = model.damping().iter().copied().collect();
    let relative_error = est
        .gamma
        .iter()
        .zip(&truth)
        .map(|(g, d)| if *d == 0.0 { g.abs() } else { (g - d).abs() / d })
        .collect();
    let out = IdentifyOutput {
        scenario: scenario.name.clone().unwrap_or_default(),
        model: model.name().into(),
        truth: Some(truth),
        relative_error: Some(relative_error),
        report: IdentificationReport::new(&reg, &est, opts.exact_accel),
    };
    Ok((out, trajs))
}

fn cmd_identify(scenario: &Scenario, opts: &RunOptions, out: &mut Outputs) -> Result<Vec<String>> {
    let (result, trajs) = identify_scenario(scenario, opts)?;
    for (h, t) in trajs.iter().enumerate() {
        let mut csv = Vec::new();
        sim::write_csv(t, &mut csv)?;
        out.add(&format!("experiment_{}.csv", h + 1), String::from_utf8(csv).expect("csv is utf-8"));
    }
    out.add("identification.json", to_json(&result)?);
    let r = &result.report;
    let mut lines = vec![format!(
        "identified from {} experiments ({} acceleration), residual {:.3e}, cond {:.3e}",
        r.experiments, r.acceleration, r.residual, r.condition_number
    )];
    for (k, g) in r.gamma.iter().enumerate() {
        let rel = result
            .relative_error
            .as_ref()
            .map(|e| format!(" (relative error {:.3e})", e[k]))
            .unwrap_or_default();
        lines.push(format!("gamma[{}] = {g:.6}{rel}", k + 1));
    }
    lines.extend(r.warnings.iter().map(|w| format!("warning: {w}")));
    Ok(lines)
}

// ---------------------------------------------------------------- tune

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneOutput {
    pub scenario: String,
    pub model: String,
    pub controller: ControllerKind,
    pub mode: TuneMode,
    pub d_star: Vec<f64>,
    /// Smallest eigenvalue of the shaped-potential Hessian at `q★`.
    pub stability_min_eig: f64,
    pub stability_verdict: bool,
    pub report: TuningReport,
}

pub fn tune_scenario(scenario: &Scenario) -> Result<TuneOutput> {
    let block = scenario.tuning.clone().unwrap_or_default();
    let mut model = scenario.model.build()?;
    if let Some(d) = &block.d_star {
        check_dim("tuning.d_star", model.n(), d.len())?;
        model = model.with_damping(DVector::from_column_slice(d))?;
    }
    let spec = scenario.controller_spec()?;
    let (m, n) = (model.m(), model.n());
    let k_i = matrix_from_rows("KI", &spec.k_i, m, m)?;
    check_dim("q_star", n, spec.q_star.len())?;
    let q_star = DVector::from_column_slice(&spec.q_star);
    let stability = pbc::pi_pbc_stability_check(&model, &k_i, &q_star)?;
    let report = match (spec.kind, block.mode) {
        (ControllerKind::ModifiedPiPbc, TuneMode::Synthesize) => {
            return Err(Error::Unsupported(
                "gain synthesis is only defined for the PI-PBC; use mode \"check\"".into(),
            ))
        }
        (ControllerKind::PiPbc, TuneMode::Synthesize) => tuning::synthesize_min_kp(&model, &k_i, &q_star)?.1,
        (ControllerKind::PiPbc, TuneMode::Check) => {
            let ctrl = Controller::from_spec(spec, &model)?;
            let Gains::Pi { k_p } = &ctrl.gains else { unreachable!() };
            tuning::no_oscillation_margin(&model, k_p, &k_i, &q_star)?
        }
        (ControllerKind::ModifiedPiPbc, TuneMode::Check) => {
            let ctrl = Controller::from_spec(spec, &model)?;
            let Gains::Modified { k_pa, k_pu } = &ctrl.gains else { unreachable!() };
            tuning::simplified_modified_condition(&model, k_pa, k_pu)?
        }
    };
    Ok(TuneOutput {
        scenario: scenario.name.clone().unwrap_or_default(),
        model: model.name().into(),
        controller: spec.kind,
        mode: block.mode,
        d_star: model.damping().iter().copied().collect(),
        stability_min_eig: stability.min_eig,
        stability_verdict: stability.passed,
        report,
    })
}

fn cmd_tune(scenario: &Scenario, _opts: &RunOptions, out: &mut Outputs) -> Result<Vec<String>> {
    let t = tune_scenario(scenario)?;
    out.add("tuning.json", to_json(&t)?);
    let r = &t.report;
    let mut lines = vec![format!(
        "{}: lhs {:.6}, rhs {:.6}, margin {:.6e}, verdict {}",
        r.condition, r.lhs, r.rhs, r.margin, r.verdict
    )];
    if let Some(v) = r.exact_verdict {
        lines.push(format!("exact damping condition: min eigenvalue {:.6}, verdict {v}", r.exact_min_eig.unwrap_or(f64::NAN)));
    }
    if let Some(kp) = &r.synthesized_kp {
        let diag: Vec<String> = (0..kp.len()).map(|i| format!("{:.4}", kp[i][i])).collect();
        lines.push(format!("synthesized KP = diag{{{}}}", diag.join(", ")));
    }
    Ok(lines)
}

// ---------------------------------------------------------------- analyze

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpsilonAnalysis {
    pub controller: ControllerKind,
    pub epsilon: f64,
    pub q: Vec<f64>,
    /// Stationary `Υ_sym` at `(q★, p = 0)`, row-major.
    pub upsilon_sym: Vec<Vec<f64>>,
    pub gershgorin: GershgorinReport,
    /// `λ_min(Υ_sym)`, the stationary estimate of `μ`.
    pub min_eigenvalue: f64,
    pub a_norm: f64,
    /// Rate formula with `μ = λ_min`; absent when `λ_min ≤ 0`.
    pub convergence_rate: Option<f64>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `λ_min(compare) - λ_min(main)`.
    pub min_eigenvalue_change: f64,
    /// Per-row radius change on the momentum rows.
    pub momentum_radius_change: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOutput {
    pub scenario: String,
    pub model: String,
    pub main: UpsilonAnalysis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<UpsilonAnalysis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

pub fn analyze_controller(model: &MechModel, spec: &ControllerSpec, epsilon: f64, beta_max: f64) -> Result<UpsilonAnalysis> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be non-negative, got {epsilon}")));
    }
    let ctrl = Controller::from_spec(spec, model)?;
    let cl = ClosedLoop::new(model, &ctrl)?;
    let q = cl.q_star().clone();
    let ups = tuning::upsilon_sym(&cl, &q, epsilon)?;
    let gershgorin = tuning::gershgorin(&ups)?;
    let a_norm = tuning::spectral_norm(&tuning::cholesky_upper_inv_mass(model, &q)?);
    let min_eigenvalue = gershgorin.min_eigenvalue();
    let convergence_rate = (min_eigenvalue > 0.0)
        .then(|| tuning::convergence_rate(beta_max, min_eigenvalue, epsilon, a_norm))
        .transpose()?;
    let mut notes = vec!["evaluated at p = 0 with J3 and dA/dt taken as zero".to_string()];
    if ctrl.kind() == ControllerKind::PiPbc {
        notes.push("PI-PBC: J2 is the skew part of the velocity feedback (zero for symmetric G1 KP)".into());
    }
    Ok(UpsilonAnalysis {
        controller: ctrl.kind(),
        epsilon,
        q: q.iter().copied().collect(),
        upsilon_sym: pbc::matrix_to_rows(&ups),
        gershgorin,
        min_eigenvalue,
        a_norm,
        convergence_rate,
        notes,
    })
}

pub fn analyze_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<AnalyzeOutput> {
    let block = scenario.analysis.clone().unwrap_or_default();
    let epsilon = opts.epsilon.or(block.epsilon).unwrap_or(tuning::DEFAULT_EPSILON);
    let beta_max = block.beta_max.unwrap_or(tuning::DEFAULT_BETA_MAX);
    let model = scenario.model.build()?;
    let main = analyze_controller(&model, scenario.controller_spec()?, epsilon, beta_max)?;
    let compare = block
        .compare
        .as_ref()
        .map(|spec| analyze_controller(&model, spec, epsilon, beta_max))
        .transpose()?;
    let comparison = compare.as_ref().map(|c| {
        let n = model.n();
        Comparison {
            min_eigenvalue_change: c.min_eigenvalue - main.min_eigenvalue,
            momentum_radius_change: (n..2 * n)
                .map(|i| c.gershgorin.discs[i].radius - main.gershgorin.discs[i].radius)
                .collect(),
        }
    });
    Ok(AnalyzeOutput {
        scenario: scenario.name.clone().unwrap_or_default(),
        model: model.name().into(),
        main,
        compare,
        comparison,
    })
}

fn cmd_analyze(scenario: &Scenario, opts: &RunOptions, out: &mut Outputs) -> Result<Vec<String>> {
    let a = analyze_scenario(scenario, opts)?;
    out.add("analysis.json", to_json(&a)?);
    let describe = |label: &str, u: &UpsilonAnalysis| {
        format!(
            "{label}: lambda_min {:.6}, Gershgorin bound {:.6}, contained {}",
            u.min_eigenvalue, u.gershgorin.lower_bound, u.gershgorin.contained
        )
    };
    let mut lines = vec![describe("main", &a.main)];
    if let (Some(c), Some(cmp)) = (&a.compare, &a.comparison) {
        lines.push(describe("compare", c));
        lines.push(format!("lambda_min change {:.6e}", cmp.min_eigenvalue_change));
    }
    Ok(lines)
}

// ---------------------------------------------------------------- JSON

/// Pretty JSON with every float written to 17 significant digits, so reruns
/// are byte-identical and values round-trip exactly.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut s = String::new();
    write_value(&mut s, &v, 0);
    s.push('\n');
    Ok(s)
}

fn write_value(s: &mut String, v: &Value, indent: usize) {
    let pad = |s: &mut String, k: usize| s.extend(std::iter::repeat_n(' ', 2 * k));
    match v {
        Value::Null => s.push_str("null"),
        Value::Bool(b) => s.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                let _ = write!(s, "{:.16e}", n.as_f64().expect("f64 number"));
            } else {
                let _ = write!(s, "{n}");
            }
        }
        Value::String(t) => s.push_str(&serde_json::to_string(t).expect("string serializes")),
        Value::Array(items) => {
            if items.is_empty() {
                s.push_str("[]");
                return;
            }
            let flat = items.iter().all(|x| !x.is_array() && !x.is_object());
            s.push('[');
            for (i, x) in items.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                if flat {
                    if i > 0 {
                        s.push(' ');
                    }
                } else {
                    s.push('\n');
                    pad(s, indent + 1);
                }
                write_value(s, x, indent + 1);
            }
            if !flat {
                s.push('\n');
                pad(s, indent);
            }
            s.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                s.push_str("{}");
                return;
            }
            s.push('{');
            for (i, (k, x)) in map.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                s.push('\n');
                pad(s, indent + 1);
                s.push_str(&serde_json::to_string(k).expect("key serializes"));
                s.push_str(": ");
                write_value(s, x, indent + 1);
            }
            s.push('\n');
            pad(s, indent);
            s.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RIGID_CASE2: &str = r#"{
        "model": {"rigid2dof": {}},
        "controller": {"kind": "PI_PBC", "KI": [[30,0],[0,10]], "KP": [[3.2045,0],[0,1.4774]], "q_star": [0.6,0.8]},
        "simulation": {"dt": 0.001, "T": 2.0}
    }"#;

    #[test]
    fn json_floats_have_seventeen_digits() {
        let s = to_json(&serde_json::json!({"a": 0.1, "b": [1.0, 2], "c": {"d": null}})).unwrap();
        assert!(s.contains("\"a\": 1.0000000000000001e-1"));
        assert!(s.contains("[1.0000000000000000e0, 2]"));
        let back: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["a"].as_f64(), Some(0.1));
    }

    #[test]
    fn scenario_parses_and_rejects_unknown_fields() {
        let sc = Scenario::from_json(RIGID_CASE2).unwrap();
        assert_eq!(sc.simulation.horizon, 2.0);
        assert!(sc.experiments.is_empty());
        let bad = RIGID_CASE2.replace("\"T\"", "\"Tmax\"");
        let err = Scenario::from_json(&bad).unwrap_err();
        assert!(err.to_string().contains("Tmax"), "{err}");
        assert_eq!(exit_code(&err), EXIT_CONFIG);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Diverged { last_finite: 1, t: 0.1 }), EXIT_DIVERGED);
        assert_eq!(exit_code(&Error::Unidentifiable { coordinate: 1 }), EXIT_UNIDENTIFIABLE);
        assert_eq!(exit_code(&Error::Unsupported("x".into())), EXIT_UNSUPPORTED);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
    }

    #[test]
    fn tune_check_and_synthesize() {
        let mut sc = Scenario::from_json(RIGID_CASE2).unwrap();
        let t = tune_scenario(&sc).unwrap();
        assert!(t.report.verdict && t.stability_verdict);
        sc.tuning = Some(TuningBlock {
            mode: TuneMode::Synthesize,
            d_star: None,
        });
        let t = tune_scenario(&sc).unwrap();
        let kp = t.report.synthesized_kp.unwrap();
        assert!((kp[0][0] - 3.2045).abs() < 1e-3 && (kp[1][1] - 1.4774).abs() < 1e-3);
    }

    #[test]
    fn simulate_writes_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let sc = Scenario::from_json(RIGID_CASE2).unwrap();
        let opts = RunOptions {
            out: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let s = run(Command::Simulate, &sc, &opts).unwrap();
        assert_eq!(s.written.len(), 3);
        let plot = fs::read_to_string(dir.path().join("plot.csv")).unwrap();
        assert!(plot.starts_with("t,q1,q1_star,q2,q2_star\n"));
    }
}
