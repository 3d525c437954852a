//! Gain certification and synthesis, the Cholesky factor of `M⁻¹`, the
//! stationary `Υ_sym` matrix and Gershgorin disc bounds.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::pbc::{self, matrix_to_rows, max_eigenvalue, min_eigenvalue, ClosedLoop};
use crate::phsys::{gather, MechModel};

/// Relative slack on the no-oscillation inequality: the verdict passes when
/// `margin ≥ -NO_OSCILLATION_REL_TOL · rhs`, which absorbs the four-digit
/// rounding of published gains.
pub const NO_OSCILLATION_REL_TOL: f64 = 1e-4;
pub const DEFAULT_EPSILON: f64 = 0.01;
pub const DEFAULT_BETA_MAX: f64 = 1.0;

/// Smallest and largest eigenvalue of one named matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenExtremes {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

impl EigenExtremes {
    fn of(name: &str, a: &DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(a.clone()).eigenvalues;
        Self {
            name: name.into(),
            min: eig.min(),
            max: eig.max(),
        }
    }
}

/// Outcome of a gain-certification inequality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub condition: String,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub eigen_extremes: Vec<EigenExtremes>,
    pub verdict: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesized_kp: Option<Vec<Vec<f64>>>,
    /// Smallest eigenvalue of the exact damping condition, when it applies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_min_eig: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_verdict: Option<bool>,
}

/// `λ̲(GK_PGᵀ + D★)² - 4 λ̄(GK_IGᵀ + ∇²V★) λ̄(M★)`, with `D★` the model's damping.
pub fn no_oscillation_margin(
    model: &MechModel,
    k_p: &DMatrix<f64>,
    k_i: &DMatrix<f64>,
    q_star: &DVector<f64>,
) -> Result<TuningReport> {
    let m = model.m();
    check_dim("KP", m, k_p.nrows())?;
    check_dim("KP", m, k_p.ncols())?;
    check_dim("KI", m, k_i.nrows())?;
    check_dim("KI", m, k_i.ncols())?;
    check_dim("q_star", model.n(), q_star.len())?;
    let g = model.input_matrix();
    let damp = &g * k_p * g.transpose() + model.damping_matrix();
    let stiff = &g * k_i * g.transpose() + model.potential_hessian(q_star);
    let mass = model.mass(q_star);
    let ext = vec![
        EigenExtremes::of("G KP G^T + D*", &damp),
        EigenExtremes::of("G KI G^T + hess V*", &stiff),
        EigenExtremes::of("M*", &mass),
    ];
    let lhs = ext[0].min.powi(2);
    let rhs = 4.0 * ext[1].max * ext[2].max;
    let margin = lhs - rhs;
    Ok(TuningReport {
        condition: "no-oscillation".into(),
        lhs,
        rhs,
        margin,
        eigen_extremes: ext,
        verdict: margin >= -NO_OSCILLATION_REL_TOL * rhs,
        synthesized_kp: None,
        exact_min_eig: None,
        exact_verdict: None,
    })
}

/// Diagonal `K_P` putting the no-oscillation inequality at equality, and its report.
pub fn synthesize_min_kp(
    model: &MechModel,
    k_i: &DMatrix<f64>,
    q_star: &DVector<f64>,
) -> Result<(DMatrix<f64>, TuningReport)> {
    let g1 = model.actuation().gain();
    let off_diag = (0..g1.nrows())
        .flat_map(|i| (0..g1.ncols()).map(move |j| (i, j)))
        .any(|(i, j)| i != j && g1[(i, j)] != 0.0);
    if off_diag {
        return Err(Error::Unsupported(
            "K_P synthesis needs a diagonal G1; use the check mode to verify given gains".into(),
        ));
    }
    let m = model.m();
    check_dim("KI", m, k_i.nrows())?;
    check_dim("q_star", model.n(), q_star.len())?;
    let g = model.input_matrix();
    let stiff = &g * k_i * g.transpose() + model.potential_hessian(q_star);
    let target = 2.0 * (max_eigenvalue(&stiff) * max_eigenvalue(&model.mass(q_star))).sqrt();
    let d_a = gather(model.damping(), model.actuation().indices());
    let k_p = DMatrix::from_diagonal(&DVector::from_fn(m, |k, _| {
        ((target - d_a[k]) / g1[(k, k)].powi(2)).max(0.0)
    }));
    let mut report = no_oscillation_margin(model, &k_p, k_i, q_star)?;
    report.synthesized_kp = Some(matrix_to_rows(&k_p));
    Ok((k_p, report))
}

/// `4λ̲(D_a + G₁K_PaG₁ᵀ) > λ̄(G₁K_Pu D_u⁻¹ K_Puᵀ G₁ᵀ)`, reported together with
/// the exact damping condition it implies.
pub fn simplified_modified_condition(
    model: &MechModel,
    k_pa: &DMatrix<f64>,
    k_pu: &DMatrix<f64>,
) -> Result<TuningReport> {
    let exact = pbc::modified_damping_condition(model, k_pa, k_pu)?;
    let act = model.actuation();
    let unact = act.unactuated(model.n());
    let g1 = act.gain();
    let d = model.damping();
    let d_a = DMatrix::from_diagonal(&gather(d, act.indices()));
    let d_u_inv = DMatrix::from_diagonal(&gather(d, &unact).map(|v| 1.0 / v));
    let left = d_a + g1 * k_pa * g1.transpose();
    let g1k = g1 * k_pu;
    let right = &g1k * d_u_inv * g1k.transpose();
    let ext = vec![
        EigenExtremes::of("D_a + G1 KPa G1^T", &left),
        EigenExtremes::of("G1 KPu D_u^-1 KPu^T G1^T", &right),
    ];
    let lhs = 4.0 * ext[0].min;
    let rhs = ext[1].max;
    Ok(TuningReport {
        condition: "modified-damping-simplified".into(),
        lhs,
        rhs,
        margin: lhs - rhs,
        eigen_extremes: ext,
        verdict: lhs > rhs,
        synthesized_kp: None,
        exact_min_eig: Some(exact.min_eig),
        exact_verdict: Some(exact.passed),
    })
}

/// Upper-triangular `A(q)` with `AᵀA = M⁻¹(q)`.
pub fn cholesky_upper_inv_mass(model: &MechModel, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    let m_inv = model.mass_cholesky(q)?.inverse();
    let sym = (&m_inv + m_inv.transpose()) * 0.5;
    let chol = sym.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
        what: "inverse mass".into(),
        min_eig: min_eigenvalue(&m_inv),
    })?;
    Ok(chol.l().transpose())
}

/// Spectral norm.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    a.clone().svd(false, false).singular_values.max()
}

/// Stationary `Υ_sym` at `(q, p = 0)`: the `J₃` and `Ȧ` contributions vanish there.
///
/// ```text
/// [ ε M⁻¹          ε/2 · A ℱ       ]
/// [ (ε/2 · A ℱ)ᵀ   𝒟 - ε Aᵀ∇²V_d A ]
/// ```
/// with `𝒟 = AᵀR₂A` and `ℱ = Aᵀ(R₂ - J₂)A`.
pub fn upsilon_sym(cl: &ClosedLoop, q: &DVector<f64>, epsilon: f64) -> Result<DMatrix<f64>> {
    let model = cl.model();
    let n = model.n();
    check_dim("q", n, q.len())?;
    let a = cholesky_upper_inv_mass(model, q)?;
    let m_inv = a.transpose() * &a;
    let d = a.transpose() * cl.r2() * &a;
    let f = a.transpose() * (cl.r2() - cl.j2()) * &a;
    let upper = &a * f * (0.5 * epsilon);
    let lower = d - a.transpose() * cl.shaped_potential_hessian(q) * &a * epsilon;
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(&(m_inv * epsilon));
    out.view_mut((0, n), (n, n)).copy_from(&upper);
    out.view_mut((n, 0), (n, n)).copy_from(&upper.transpose());
    out.view_mut((n, n), (n, n)).copy_from(&lower);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GershgorinDisc {
    pub center: f64,
    pub radius: f64,
}

impl GershgorinDisc {
    pub fn contains(&self, z: f64, tol: f64) -> bool {
        (z - self.center).abs() <= self.radius + tol
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GershgorinReport {
    pub discs: Vec<GershgorinDisc>,
    /// `min_i (υ_ii - r_i)`.
    pub lower_bound: f64,
    /// Eigenvalues in increasing order.
    pub eigenvalues: Vec<f64>,
    /// Every eigenvalue lies in the union of the discs.
    pub contained: bool,
}

impl GershgorinReport {
    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }
}

pub fn gershgorin(a: &DMatrix<f64>) -> Result<GershgorinReport> {
    if !a.is_square() {
        return Err(Error::Dimension {
            what: "Gershgorin input columns".into(),
            expected: a.nrows(),
            found: a.ncols(),
        });
    }
    let scale = a.amax().max(1.0);
    if (a - a.transpose()).amax() > 1e-12 * scale {
        return Err(Error::InvalidParameter("Gershgorin input must be symmetric".into()));
    }
    let n = a.nrows();
    let discs: Vec<GershgorinDisc> = (0..n)
        .map(|i| GershgorinDisc {
            center: a[(i, i)],
            radius: (0..n).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum(),
        })
        .collect();
    let lower_bound = discs
        .iter()
        .map(|d| d.center - d.radius)
        .fold(f64::INFINITY, f64::min);
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(a.clone()).eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(f64::total_cmp);
    let tol = 1e-10 * scale;
    let contained = eigenvalues
        .iter()
        .all(|&z| discs.iter().any(|d| d.contains(z, tol)));
    Ok(GershgorinReport {
        discs,
        lower_bound,
        eigenvalues,
        contained,
    })
}

/// `β_max μ / (1 + ε ‖A‖ β_max)`.
pub fn convergence_rate(beta_max: f64, mu: f64, epsilon: f64, a_norm: f64) -> Result<f64> {
    let named = [("beta_max", beta_max), ("mu", mu)];
    for (name, v) in named {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
        }
    }
    for (name, v) in [("epsilon", epsilon), ("a_norm", a_norm)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::InvalidParameter(format!("{name} must be non-negative, got {v}")));
        }
    }
    Ok(beta_max * mu / (1.0 + epsilon * a_norm * beta_max))
}
