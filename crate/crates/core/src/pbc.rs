//! PI passivity-based controllers and their closed loops.
//!
//! Two laws act on the actuated coordinates `q_a` (zero-based indices from the
//! plant's [`Actuation`](crate::phsys::Actuation)):
//!
//! ```text
//! PI-PBC:    u = -K_P q̇_a - K_I (q_a - q_a★ - K_I⁻¹ ∇_{q_a} V(q★))
//! modified:  u = -K_I G₁ᵀ (q_a - q_a★) - K_Pa G₁ᵀ q̇_a - K_Pu q̇_u
//! ```

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::phsys::{gather, MechModel, State};
use crate::sim::{Dynamics, InputLaw};

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ControllerKind {
    #[serde(alias = "pi_pbc", alias = "pi-pbc")]
    PiPbc,
    #[serde(alias = "modified_pi_pbc", alias = "modified")]
    ModifiedPiPbc,
}

/// Controller block of a scenario file. Matrices are row-major nested arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerSpec {
    pub kind: ControllerKind,
    #[serde(rename = "KI")]
    pub k_i: Vec<Vec<f64>>,
    #[serde(rename = "KP", default, skip_serializing_if = "Option::is_none")]
    pub k_p: Option<Vec<Vec<f64>>>,
    #[serde(rename = "KPa", default, skip_serializing_if = "Option::is_none")]
    pub k_pa: Option<Vec<Vec<f64>>>,
    #[serde(rename = "KPu", default, skip_serializing_if = "Option::is_none")]
    pub k_pu: Option<Vec<Vec<f64>>>,
    pub q_star: Vec<f64>,
    /// Build the closed loop even when a stability precondition fails.
    #[serde(rename = "override", default)]
    pub allow_unstable: bool,
}

/// Row-major nested array to matrix, checking the shape.
pub fn matrix_from_rows(name: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    check_dim(&format!("{name} rows"), nrows, rows.len())?;
    for r in rows {
        check_dim(&format!("{name} columns"), ncols, r.len())?;
    }
    let m = DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("{name} has non-finite entries")));
    }
    Ok(m)
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn is_symmetric(a: &DMatrix<f64>) -> bool {
    let scale = a.amax().max(1.0);
    (a - a.transpose()).amax() <= SYMMETRY_TOL * scale
}

pub(crate) fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone()).eigenvalues.min()
}

pub(crate) fn max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone()).eigenvalues.max()
}

fn require_definite(name: &str, a: &DMatrix<f64>, strict: bool) -> Result<()> {
    if !is_symmetric(a) {
        return Err(Error::InvalidParameter(format!("{name} must be symmetric")));
    }
    let min_eig = min_eigenvalue(a);
    let ok = if strict { min_eig > 0.0 } else { min_eig >= -SYMMETRY_TOL * a.amax().max(1.0) };
    if ok {
        Ok(())
    } else {
        Err(Error::NotPositiveDefinite {
            what: name.into(),
            min_eig,
        })
    }
}

/// `S A Sᵀ` on the index sets `rows`, `cols` of an `n×n` zero matrix.
pub(crate) fn scatter(n: usize, rows: &[usize], cols: &[usize], a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, n);
    for (i, &ri) in rows.iter().enumerate() {
        for (j, &cj) in cols.iter().enumerate() {
            out[(ri, cj)] = a[(i, j)];
        }
    }
    out
}

/// Velocity gains of each law.
#[derive(Clone, Debug, PartialEq)]
pub enum Gains {
    Pi { k_p: DMatrix<f64> },
    Modified { k_pa: DMatrix<f64>, k_pu: DMatrix<f64> },
}

/// Validated controller bound to a plant's dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Controller {
    pub k_i: DMatrix<f64>,
    pub gains: Gains,
    pub q_star: DVector<f64>,
    /// `∇_{q_a} V(q★)`, zero for the modified law.
    pub feedforward: DVector<f64>,
    pub allow_unstable: bool,
}

impl Controller {
    pub fn from_spec(spec: &ControllerSpec, model: &MechModel) -> Result<Self> {
        let (n, m, r) = (model.n(), model.m(), model.r());
        let k_i = matrix_from_rows("KI", &spec.k_i, m, m)?;
        check_dim("q_star", n, spec.q_star.len())?;
        let q_star = DVector::from_column_slice(&spec.q_star);
        let gains = match spec.kind {
            ControllerKind::PiPbc => {
                let k_p = spec
                    .k_p
                    .as_ref()
                    .ok_or_else(|| Error::Config("PI_PBC controller needs KP".into()))?;
                Gains::Pi {
                    k_p: matrix_from_rows("KP", k_p, m, m)?,
                }
            }
            ControllerKind::ModifiedPiPbc => {
                let k_pa = spec
                    .k_pa
                    .as_ref()
                    .ok_or_else(|| Error::Config("MODIFIED_PI_PBC controller needs KPa".into()))?;
                let k_pu = spec
                    .k_pu
                    .as_ref()
                    .ok_or_else(|| Error::Config("MODIFIED_PI_PBC controller needs KPu".into()))?;
                if r == 0 {
                    return Err(Error::Unsupported(
                        "the modified PI-PBC needs an underactuated plant".into(),
                    ));
                }
                Gains::Modified {
                    k_pa: matrix_from_rows("KPa", k_pa, m, m)?,
                    k_pu: matrix_from_rows("KPu", k_pu, m, r)?,
                }
            }
        };
        Self::new(model, k_i, gains, q_star, spec.allow_unstable)
    }

    pub fn new(
        model: &MechModel,
        k_i: DMatrix<f64>,
        gains: Gains,
        q_star: DVector<f64>,
        allow_unstable: bool,
    ) -> Result<Self> {
        let (n, m, r) = (model.n(), model.m(), model.r());
        check_dim("q_star", n, q_star.len())?;
        check_dim("KI", m, k_i.nrows())?;
        check_dim("KI", m, k_i.ncols())?;
        require_definite("KI", &k_i, true)?;
        match &gains {
            Gains::Pi { k_p } => {
                check_dim("KP", m, k_p.nrows())?;
                check_dim("KP", m, k_p.ncols())?;
                require_definite("KP", k_p, false)?;
            }
            Gains::Modified { k_pa, k_pu } => {
                if r == 0 {
                    return Err(Error::Unsupported(
                        "the modified PI-PBC needs an underactuated plant".into(),
                    ));
                }
                check_dim("KPa", m, k_pa.nrows())?;
                check_dim("KPa", m, k_pa.ncols())?;
                check_dim("KPu rows", m, k_pu.nrows())?;
                check_dim("KPu columns", r, k_pu.ncols())?;
                require_definite("KPa", k_pa, true)?;
            }
        }
        let eq = model.is_assignable_equilibrium(&q_star);
        if !eq.admissible {
            return Err(Error::InvalidParameter(format!(
                "q_star is not an assignable equilibrium (unactuated gradient norm {:.3e})",
                eq.residual
            )));
        }
        let feedforward = match gains {
            Gains::Pi { .. } => gather(&model.potential_grad(&q_star), model.actuation().indices()),
            Gains::Modified { .. } => DVector::zeros(m),
        };
        Ok(Self {
            k_i,
            gains,
            q_star,
            feedforward,
            allow_unstable,
        })
    }

    pub fn kind(&self) -> ControllerKind {
        match self.gains {
            Gains::Pi { .. } => ControllerKind::PiPbc,
            Gains::Modified { .. } => ControllerKind::ModifiedPiPbc,
        }
    }

    pub fn q_star_actuated(&self, model: &MechModel) -> DVector<f64> {
        gather(&self.q_star, model.actuation().indices())
    }

    pub fn to_spec(&self) -> ControllerSpec {
        let (k_p, k_pa, k_pu) = match &self.gains {
            Gains::Pi { k_p } => (Some(matrix_to_rows(k_p)), None, None),
            Gains::Modified { k_pa, k_pu } => (None, Some(matrix_to_rows(k_pa)), Some(matrix_to_rows(k_pu))),
        };
        ControllerSpec {
            kind: self.kind(),
            k_i: matrix_to_rows(&self.k_i),
            k_p,
            k_pa,
            k_pu,
            q_star: self.q_star.iter().copied().collect(),
            allow_unstable: self.allow_unstable,
        }
    }
}

/// PI-PBC law on already extracted actuated quantities.
pub fn pi_pbc_law(
    k_p: &DMatrix<f64>,
    k_i: &DMatrix<f64>,
    feedforward: &DVector<f64>,
    q_a: &DVector<f64>,
    q_a_star: &DVector<f64>,
    qdot_a: &DVector<f64>,
) -> DVector<f64> {
    -(k_p * qdot_a) - k_i * (q_a - q_a_star) + feedforward
}

/// Modified PI-PBC law on already extracted quantities.
pub fn modified_pi_pbc_law(
    k_i: &DMatrix<f64>,
    k_pa: &DMatrix<f64>,
    k_pu: &DMatrix<f64>,
    g1: &DMatrix<f64>,
    q_a: &DVector<f64>,
    q_a_star: &DVector<f64>,
    qdot_a: &DVector<f64>,
    qdot_u: &DVector<f64>,
) -> DVector<f64> {
    let g1t = g1.transpose();
    -(k_i * &g1t * (q_a - q_a_star)) - k_pa * &g1t * qdot_a - k_pu * qdot_u
}

pub fn pi_pbc_control(ctrl: &Controller, model: &MechModel, x: &State) -> Result<DVector<f64>> {
    let Gains::Pi { k_p } = &ctrl.gains else {
        return Err(Error::InvalidParameter("controller is not a PI-PBC".into()));
    };
    let idx = model.actuation().indices();
    let qdot = model.velocity(x)?;
    Ok(pi_pbc_law(
        k_p,
        &ctrl.k_i,
        &ctrl.feedforward,
        &gather(&x.q, idx),
        &ctrl.q_star_actuated(model),
        &gather(&qdot, idx),
    ))
}

pub fn modified_pi_pbc_control(ctrl: &Controller, model: &MechModel, x: &State) -> Result<DVector<f64>> {
    let Gains::Modified { k_pa, k_pu } = &ctrl.gains else {
        return Err(Error::InvalidParameter("controller is not a modified PI-PBC".into()));
    };
    let idx = model.actuation().indices();
    let unact = model.actuation().unactuated(model.n());
    let qdot = model.velocity(x)?;
    Ok(modified_pi_pbc_law(
        &ctrl.k_i,
        k_pa,
        k_pu,
        model.actuation().gain(),
        &gather(&x.q, idx),
        &ctrl.q_star_actuated(model),
        &gather(&qdot, idx),
        &gather(&qdot, &unact),
    ))
}

impl InputLaw for Controller {
    fn input(&self, model: &MechModel, _t: f64, x: &State) -> Result<DVector<f64>> {
        match self.gains {
            Gains::Pi { .. } => pi_pbc_control(self, model, x),
            Gains::Modified { .. } => modified_pi_pbc_control(self, model, x),
        }
    }
}

/// Matrix, its smallest eigenvalue and the positivity verdict.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenCheck {
    pub matrix: DMatrix<f64>,
    pub min_eig: f64,
    pub passed: bool,
}

impl EigenCheck {
    fn of(matrix: DMatrix<f64>) -> Self {
        let min_eig = min_eigenvalue(&matrix);
        Self {
            passed: min_eig > 0.0,
            matrix,
            min_eig,
        }
    }
}

/// `∇²V(q★) + G K_I Gᵀ`.
pub fn pi_pbc_stability_check(model: &MechModel, k_i: &DMatrix<f64>, q_star: &DVector<f64>) -> Result<EigenCheck> {
    check_dim("KI", model.m(), k_i.nrows())?;
    check_dim("q_star", model.n(), q_star.len())?;
    let g = model.input_matrix();
    Ok(EigenCheck::of(model.potential_hessian(q_star) + &g * k_i * g.transpose()))
}

/// `D_a + G₁K_PaG₁ᵀ - ¼ G₁K_Pu D_u⁻¹ K_Puᵀ G₁ᵀ`.
pub fn modified_damping_condition(model: &MechModel, k_pa: &DMatrix<f64>, k_pu: &DMatrix<f64>) -> Result<EigenCheck> {
    let (m, r) = (model.m(), model.r());
    check_dim("KPa", m, k_pa.nrows())?;
    check_dim("KPu rows", m, k_pu.nrows())?;
    check_dim("KPu columns", r, k_pu.ncols())?;
    let act = model.actuation();
    let unact = act.unactuated(model.n());
    let d = model.damping();
    let d_a = DMatrix::from_diagonal(&gather(d, act.indices()));
    let d_u = gather(d, &unact);
    if d_u.iter().any(|v| *v <= 0.0) {
        return Err(Error::InvalidParameter(
            "unactuated damping D_u must be positive to invert".into(),
        ));
    }
    let d_u_inv = DMatrix::from_diagonal(&d_u.map(|v| 1.0 / v));
    let g1 = act.gain();
    let g1k = g1 * k_pu;
    let mat = d_a + g1 * k_pa * g1.transpose() - &g1k * d_u_inv * g1k.transpose() * 0.25;
    Ok(EigenCheck::of(mat))
}

/// Closed loop `ẋ = F(q,p) ∇H_d` with
/// `F = [[0, I], [-I, J₂ - R₂]]` and `H_d = ½pᵀM⁻¹p + V_d(q)`.
#[derive(Clone, Debug)]
pub struct ClosedLoop {
    model: MechModel,
    q_star: DVector<f64>,
    /// Scattered integral weight: `G₁K_I` (PI-PBC) or `G₁K_IG₁ᵀ` (modified).
    weight: DMatrix<f64>,
    /// Scattered `G₁ ∇_{q_a}V(q★)`.
    offset: DVector<f64>,
    r2: DMatrix<f64>,
    j2: DMatrix<f64>,
}

impl ClosedLoop {
    pub fn new(model: &MechModel, ctrl: &Controller) -> Result<Self> {
        let n = model.n();
        let act = model.actuation();
        let idx = act.indices();
        let unact = act.unactuated(n);
        let g1 = act.gain();
        let (weight_a, feedback) = match &ctrl.gains {
            Gains::Pi { k_p } => {
                let w = g1 * &ctrl.k_i;
                if !is_symmetric(&w) {
                    return Err(Error::Unsupported(
                        "G1 KI is not symmetric; the PI-PBC closed loop has no potential".into(),
                    ));
                }
                (w, scatter(n, idx, idx, &(g1 * k_p)))
            }
            Gains::Modified { k_pa, k_pu } => {
                let fb = scatter(n, idx, idx, &(g1 * k_pa * g1.transpose()))
                    + scatter(n, idx, &unact, &(g1 * k_pu));
                (g1 * &ctrl.k_i * g1.transpose(), fb)
            }
        };
        if !ctrl.allow_unstable {
            let check = pi_pbc_stability_check(model, &ctrl.k_i, &ctrl.q_star)?;
            if !check.passed {
                return Err(Error::Unstable(format!(
                    "Hessian of the shaped potential at q_star has min eigenvalue {:.6e}",
                    check.min_eig
                )));
            }
            if let Gains::Modified { k_pa, k_pu } = &ctrl.gains {
                let check = modified_damping_condition(model, k_pa, k_pu)?;
                if !check.passed {
                    return Err(Error::Unstable(format!(
                        "damping condition has min eigenvalue {:.6e}",
                        check.min_eig
                    )));
                }
            }
        }
        let weight = scatter(n, idx, idx, &weight_a);
        let mut offset = DVector::zeros(n);
        for (j, &i) in idx.iter().enumerate() {
            offset[i] = (g1 * &ctrl.feedforward)[j];
        }
        let sym = (&feedback + feedback.transpose()) * 0.5;
        let skew = (&feedback - feedback.transpose()) * 0.5;
        Ok(Self {
            model: model.clone(),
            q_star: ctrl.q_star.clone(),
            weight,
            offset,
            r2: model.damping_matrix() + sym,
            j2: -skew,
        })
    }

    pub fn model(&self) -> &MechModel {
        &self.model
    }

    pub fn q_star(&self) -> &DVector<f64> {
        &self.q_star
    }

    pub fn r2(&self) -> &DMatrix<f64> {
        &self.r2
    }

    pub fn j2(&self) -> &DMatrix<f64> {
        &self.j2
    }

    /// Scattered integral weight entering `V_d`.
    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }

    /// `F` as a `2n×2n` matrix.
    pub fn interconnection(&self) -> DMatrix<f64> {
        let n = self.model.n();
        let mut f = DMatrix::zeros(2 * n, 2 * n);
        f.view_mut((0, n), (n, n)).copy_from(&DMatrix::identity(n, n));
        f.view_mut((n, 0), (n, n)).copy_from(&-DMatrix::<f64>::identity(n, n));
        f.view_mut((n, n), (n, n)).copy_from(&(&self.j2 - &self.r2));
        f
    }

    /// `V_d(q) = V(q) + ½‖q - q★‖²_W - (q - q★)ᵀ offset`.
    pub fn shaped_potential(&self, q: &DVector<f64>) -> f64 {
        let e = q - &self.q_star;
        self.model.potential(q) + 0.5 * e.dot(&(&self.weight * &e)) - e.dot(&self.offset)
    }

    pub fn shaped_potential_grad(&self, q: &DVector<f64>) -> DVector<f64> {
        self.model.potential_grad(q) + &self.weight * (q - &self.q_star) - &self.offset
    }

    pub fn shaped_potential_hessian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        self.model.potential_hessian(q) + &self.weight
    }

    pub fn hamiltonian(&self, x: &State) -> Result<f64> {
        let qdot = self.model.velocity(x)?;
        Ok(0.5 * x.p.dot(&qdot) + self.shaped_potential(&x.q))
    }

    /// `(∇_q H_d, ∇_p H_d)`.
    pub fn gradient(&self, x: &State) -> Result<State> {
        let qdot = self.model.velocity(x)?;
        let dq = self.shaped_potential_grad(&x.q) - self.model.coriolis_term(&x.q, &qdot);
        Ok(State { q: dq, p: qdot })
    }

    /// `Ḣ_d = -∇_pH_dᵀ R₂ ∇_pH_d`.
    pub fn dissipation_rate(&self, x: &State) -> Result<f64> {
        let v = self.model.velocity(x)?;
        Ok(-v.dot(&(&self.r2 * &v)))
    }

    pub fn equilibrium(&self) -> State {
        State::at_rest(self.q_star.clone())
    }
}

impl Dynamics for ClosedLoop {
    fn dim(&self) -> usize {
        self.model.n()
    }

    fn rhs(&self, _t: f64, x: &State) -> Result<State> {
        let g = self.gradient(x)?;
        let pdot = -g.q + (&self.j2 - &self.r2) * &g.p;
        Ok(State { q: g.p, p: pdot })
    }
}
