//! Energy-based identification of linear viscous damping.
//!
//! Multiplying the `k`-th momentum balance by `q̇_k` and integrating over a
//! record gives `-d_k ∫ q̇_k² dt = φ_k`, where
//!
//! ```text
//! φ_k = ∫ q̇_k [ e_kᵀ Ṁ q̇ + e_kᵀ M q̈ + ∂_k V - ½ q̇ᵀ (∂M/∂q_k) q̇ - e_kᵀ G u ] dt
//! ```
//!
//! Stacking `ℓ` records yields the overdetermined system `Ψ γ = Φ` with
//! `γ = (d_1, …, d_n)`, solved in the least-squares sense.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::phsys::MechModel;
use crate::sim::{self, trapezoid, Trajectory};

/// Upper bound on `cond(ΨᵀΨ)` accepted by [`solve_damping`].
pub const MAX_CONDITION: f64 = 1e12;

/// Per-sample integrand of `φ` for every coordinate.
fn phi_integrand(
    model: &MechModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    qddot: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    let mass = model.mass(q);
    let inertial = model.mass_dot(q, qdot) * qdot + mass * qddot;
    let grad_v = model.potential_grad(q);
    let coriolis = model.coriolis_term(q, qdot);
    let force = model.input_force(u)?;
    Ok((inertial + grad_v - coriolis - force).component_mul(qdot))
}

fn check_traj(model: &MechModel, traj: &Trajectory) -> Result<()> {
    check_dim("trajectory configuration", model.n(), traj.n())?;
    check_dim("trajectory input", model.m(), traj.m())
}

/// `(φ_1..φ_n, ∫q̇_1²..∫q̇_n²)` of one record.
pub fn experiment_energies(
    model: &MechModel,
    traj: &Trajectory,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_traj(model, traj)?;
    let acc = traj.qddot.as_ref().ok_or(Error::MissingAcceleration)?;
    let n = model.n();
    let mut integrand: Vec<Vec<f64>> = vec![Vec::with_capacity(traj.len()); n];
    let mut squares: Vec<Vec<f64>> = vec![Vec::with_capacity(traj.len()); n];
    for i in 0..traj.len() {
        let f = phi_integrand(model, &traj.q[i], &traj.qdot[i], &acc[i], &traj.u[i])?;
        for k in 0..n {
            integrand[k].push(f[k]);
            squares[k].push(traj.qdot[i][k] * traj.qdot[i][k]);
        }
    }
    let phi = DVector::from_iterator(n, integrand.iter().map(|s| trapezoid(s, traj.dt)));
    let sq = DVector::from_iterator(n, squares.iter().map(|s| trapezoid(s, traj.dt)));
    Ok((phi, sq))
}

/// `φ_k` for zero-based coordinate `k`. Uses the model's potential and
/// inertia, never its damping.
pub fn phi_k(model: &MechModel, traj: &Trajectory, k: usize) -> Result<f64> {
    if k >= model.n() {
        return Err(Error::InvalidParameter(format!(
            "coordinate index {k} out of range for n = {}",
            model.n()
        )));
    }
    Ok(experiment_energies(model, traj)?.0[k])
}

/// Stacked regressor `Ψ γ = Φ`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressorSystem {
    /// `(ℓ·n) × n`, block `h` equal to `-diag{∫q̇_k² dt}_h`.
    pub psi: DMatrix<f64>,
    pub phi: DVector<f64>,
    pub experiments: usize,
    /// `cond(ΨᵀΨ)` in the 2-norm.
    pub condition_number: f64,
}

impl RegressorSystem {
    pub fn n(&self) -> usize {
        self.psi.ncols()
    }

    /// `Ψ_h` diagonal of experiment `h`.
    pub fn psi_block(&self, h: usize) -> DVector<f64> {
        let n = self.n();
        DVector::from_fn(n, |k, _| self.psi[(h * n + k, k)])
    }

    pub fn phi_block(&self, h: usize) -> DVector<f64> {
        let n = self.n();
        self.phi.rows(h * n, n).into_owned()
    }
}

fn condition_of_normal_matrix(psi: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(psi.transpose() * psi).eigenvalues;
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Builds `Ψ` and `Φ` from `ℓ ≥ 1` records carrying accelerations.
pub fn assemble_regressor(model: &MechModel, trajs: &[Trajectory]) -> Result<RegressorSystem> {
    if trajs.is_empty() {
        return Err(Error::InvalidParameter("at least one experiment is required".into()));
    }
    let blocks: Vec<(DVector<f64>, DVector<f64>)> = trajs
        .par_iter()
        .map(|t| experiment_energies(model, t))
        .collect::<Result<_>>()?;
    let n = model.n();
    let l = trajs.len();
    for k in 0..n {
        if blocks.iter().all(|(_, sq)| sq[k] == 0.0) {
            return Err(Error::Unidentifiable { coordinate: k + 1 });
        }
    }
    let mut psi = DMatrix::zeros(l * n, n);
    let mut phi = DVector::zeros(l * n);
    for (h, (ph, sq)) in blocks.iter().enumerate() {
        for k in 0..n {
            psi[(h * n + k, k)] = -sq[k];
            phi[h * n + k] = ph[k];
        }
    }
    let condition_number = condition_of_normal_matrix(&psi);
    Ok(RegressorSystem {
        psi,
        phi,
        experiments: l,
        condition_number,
    })
}

/// Least-squares damping estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct DampingEstimate {
    pub gamma: DVector<f64>,
    /// `‖Ψγ - Φ‖`.
    pub residual: f64,
    /// Residual of each coordinate's energy balance across experiments.
    pub per_coordinate_residual: DVector<f64>,
    pub condition_number: f64,
    pub warnings: Vec<String>,
}

/// `γ = argmin ‖Ψγ - Φ‖` via a thin QR factorization of `Ψ`.
pub fn solve_damping(reg: &RegressorSystem) -> Result<DampingEstimate> {
    let cond = reg.condition_number;
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::IllConditioned { condition: cond });
    }
    let n = reg.n();
    let qr = reg.psi.clone().qr();
    let qt_phi = qr.q().transpose() * &reg.phi;
    let gamma = qr
        .r()
        .solve_upper_triangular(&qt_phi)
        .ok_or(Error::IllConditioned { condition: cond })?;
    let resid = &reg.psi * &gamma - &reg.phi;
    let per_coordinate_residual = DVector::from_fn(n, |k, _| {
        (0..reg.experiments)
            .map(|h| resid[h * n + k].powi(2))
            .sum::<f64>()
            .sqrt()
    });
    let warnings = gamma
        .iter()
        .enumerate()
        .filter(|(_, g)| **g <= 0.0)
        .map(|(k, g)| format!("coordinate {} has non-positive damping estimate {g:e}", k + 1))
        .collect();
    Ok(DampingEstimate {
        residual: resid.norm(),
        gamma,
        per_coordinate_residual,
        condition_number: cond,
        warnings,
    })
}

/// Energy figures of one experiment, as written to reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentEnergies {
    /// `φ_k` for each coordinate, J.
    pub phi: Vec<f64>,
    /// `∫ q̇_k² dt` for each coordinate.
    pub velocity_square_integral: Vec<f64>,
}

/// Identification report as serialized to JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub gamma: Vec<f64>,
    pub residual: f64,
    pub per_coordinate_residual: Vec<f64>,
    pub condition_number: f64,
    pub experiments: usize,
    pub acceleration: String,
    pub per_experiment_energies: Vec<ExperimentEnergies>,
    pub warnings: Vec<String>,
}

impl IdentificationReport {
    pub fn new(reg: &RegressorSystem, est: &DampingEstimate, exact_accel: bool) -> Self {
        let per_experiment_energies = (0..reg.experiments)
            .map(|h| ExperimentEnergies {
                phi: reg.phi_block(h).iter().copied().collect(),
                velocity_square_integral: reg.psi_block(h).iter().map(|v| -v).collect(),
            })
            .collect();
        Self {
            gamma: est.gamma.iter().copied().collect(),
            residual: est.residual,
            per_coordinate_residual: est.per_coordinate_residual.iter().copied().collect(),
            condition_number: est.condition_number,
            experiments: reg.experiments,
            acceleration: if exact_accel { "exact" } else { "finite-difference" }.into(),
            per_experiment_energies,
            warnings: est.warnings.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IdentifyOptions {
    /// Use accelerations recorded by the simulator instead of differentiating q̇.
    pub exact_accel: bool,
}

/// Full pipeline over in-memory records: accelerations, regressor, solve.
pub fn identify(
    model: &MechModel,
    trajs: &[Trajectory],
    opts: IdentifyOptions,
) -> Result<(RegressorSystem, DampingEstimate)> {
    let prepared: Vec<Trajectory> = trajs
        .iter()
        .map(|t| {
            if opts.exact_accel {
                if t.qddot.is_none() {
                    return Err(Error::MissingAcceleration);
                }
                Ok(t.clone())
            } else {
                sim::reconstruct_accel(t)
            }
        })
        .collect::<Result<_>>()?;
    let reg = assemble_regressor(model, &prepared)?;
    let est = solve_damping(&reg)?;
    Ok((reg, est))
}

/// Reads trajectory CSVs and runs [`identify`] on them.
pub fn identify_from_files<P: AsRef<Path>>(
    model: &MechModel,
    paths: &[P],
    opts: IdentifyOptions,
) -> Result<IdentificationReport> {
    if opts.exact_accel {
        return Err(Error::Config(
            "exact accelerations are not stored in trajectory CSV files".into(),
        ));
    }
    let mut trajs = Vec::with_capacity(paths.len());
    for p in paths {
        let p = p.as_ref();
        let t = sim::read_csv_file(p)?;
        if t.n() != model.n() || t.m() != model.m() {
            return Err(Error::Dimension {
                what: format!("{} (n, m) = ({}, {})", p.display(), t.n(), t.m()),
                expected: model.n(),
                found: t.n(),
            });
        }
        trajs.push(t);
    }
    let (reg, est) = identify(model, &trajs, opts)?;
    Ok(IdentificationReport::new(&reg, &est, false))
}
