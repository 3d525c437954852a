//! Port-Hamiltonian mechanical systems
//!
//! ```text
//!   q̇ = ∇_p H
//!   ṗ = -∇_q H - D ∇_p H + G u,      H(q, p) = ½ pᵀ M⁻¹(q) p + V(q)
//! ```
//!
//! with constant diagonal damping `D ≥ 0` and an input matrix `G` obtained by
//! scattering the rows of a square gain `G₁` into the actuated coordinates.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{check_dim, Error, Result};

/// Step used for finite-difference mass partials when a plant gives none.
pub const MASS_PARTIAL_FD_STEP: f64 = 1e-5;

/// Default admissibility tolerance on `‖∇_{q_u} V(q)‖`.
pub const DEFAULT_EQUILIBRIUM_TOL: f64 = 1e-9;

/// Canonical state `(q, p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub q: DVector<f64>,
    pub p: DVector<f64>,
}

impl State {
    pub fn new(q: DVector<f64>, p: DVector<f64>) -> Result<Self> {
        check_dim("state momentum", q.len(), p.len())?;
        if q.iter().chain(p.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("state has non-finite entries".into()));
        }
        Ok(Self { q, p })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            q: DVector::zeros(n),
            p: DVector::zeros(n),
        }
    }

    /// Configuration `q` with zero momentum.
    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            q,
            p: DVector::zeros(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// Stacked `[q; p]`.
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.dim();
        DVector::from_fn(2 * n, |i, _| if i < n { self.q[i] } else { self.p[i - n] })
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        let n = v.len() / 2;
        Self {
            q: v.rows(0, n).into_owned(),
            p: v.rows(n, n).into_owned(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.p.iter()).all(|v| v.is_finite())
    }
}

/// Configuration-dependent energy of a plant: inertia and potential.
pub trait EnergyTerms: Send + Sync + fmt::Debug {
    fn dof(&self) -> usize;

    fn mass(&self, q: &DVector<f64>) -> DMatrix<f64>;

    /// Analytic `∂M/∂q_k`. `None` selects the central-difference fallback.
    fn mass_partial(&self, _q: &DVector<f64>, _k: usize) -> Option<DMatrix<f64>> {
        None
    }

    fn potential(&self, q: &DVector<f64>) -> f64;

    fn potential_grad(&self, q: &DVector<f64>) -> DVector<f64>;

    fn potential_hessian(&self, q: &DVector<f64>) -> DMatrix<f64>;
}

/// Actuated coordinate set together with the square input gain `G₁`.
#[derive(Clone, Debug, PartialEq)]
pub struct Actuation {
    indices: Vec<usize>,
    gain: DMatrix<f64>,
}

impl Actuation {
    /// `indices` are zero-based coordinate indices, in the order matching
    /// the rows of `gain`.
    pub fn new(n: usize, indices: Vec<usize>, gain: DMatrix<f64>) -> Result<Self> {
        let m = indices.len();
        if m == 0 || m > n {
            return Err(Error::InvalidParameter(format!(
                "actuated set must have between 1 and {n} entries, got {m}"
            )));
        }
        if gain.nrows() != m || gain.ncols() != m {
            return Err(Error::Dimension {
                what: "input gain G1".into(),
                expected: m,
                found: gain.nrows().max(gain.ncols()),
            });
        }
        let mut seen = vec![false; n];
        for &i in &indices {
            if i >= n || seen[i] {
                return Err(Error::InvalidParameter(format!(
                    "actuated index {i} is out of range or repeated"
                )));
            }
            seen[i] = true;
        }
        let invertible = gain
            .clone()
            .try_inverse()
            .is_some_and(|inv| inv.iter().all(|v| v.is_finite()));
        if !invertible {
            return Err(Error::InvalidParameter("input gain G1 is singular".into()));
        }
        Ok(Self { indices, gain })
    }

    /// Every coordinate actuated with `G₁ = I`.
    pub fn full(n: usize) -> Self {
        Self {
            indices: (0..n).collect(),
            gain: DMatrix::identity(n, n),
        }
    }

    pub fn m(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    /// Unactuated indices in increasing order.
    pub fn unactuated(&self, n: usize) -> Vec<usize> {
        (0..n).filter(|i| !self.indices.contains(i)).collect()
    }

    /// Selection matrix `S` (n×m) with `S[indices[j], j] = 1`.
    pub fn selector(&self, n: usize) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(n, self.m());
        for (j, &i) in self.indices.iter().enumerate() {
            s[(i, j)] = 1.0;
        }
        s
    }

    /// `G = S G₁`.
    pub fn input_matrix(&self, n: usize) -> DMatrix<f64> {
        self.selector(n) * &self.gain
    }
}

pub(crate) fn gather(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

/// Result of an assignable-equilibrium test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquilibriumCheck {
    pub residual: f64,
    pub admissible: bool,
}

/// One mechanical plant.
#[derive(Clone)]
pub struct MechModel {
    name: String,
    terms: Arc<dyn EnergyTerms>,
    damping: DVector<f64>,
    actuation: Actuation,
}

impl fmt::Debug for MechModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MechModel")
            .field("name", &self.name)
            .field("n", &self.n())
            .field("damping", &self.damping.as_slice())
            .field("actuated", &self.actuation.indices)
            .finish()
    }
}

impl MechModel {
    pub fn new(
        name: impl Into<String>,
        terms: Arc<dyn EnergyTerms>,
        damping: DVector<f64>,
        actuation: Actuation,
    ) -> Result<Self> {
        let n = terms.dof();
        check_dim("damping diagonal", n, damping.len())?;
        if damping.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidParameter(
                "damping entries must be finite and non-negative".into(),
            ));
        }
        if actuation.indices.iter().any(|&i| i >= n) {
            return Err(Error::InvalidParameter("actuated index out of range".into()));
        }
        let model = Self {
            name: name.into(),
            terms,
            damping,
            actuation,
        };
        model.mass_cholesky(&DVector::zeros(n))?;
        Ok(model)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.terms.dof()
    }

    pub fn m(&self) -> usize {
        self.actuation.m()
    }

    /// Number of unactuated coordinates.
    pub fn r(&self) -> usize {
        self.n() - self.m()
    }

    pub fn damping(&self) -> &DVector<f64> {
        &self.damping
    }

    pub fn damping_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.damping)
    }

    /// Same plant with a different damping diagonal.
    pub fn with_damping(&self, damping: DVector<f64>) -> Result<Self> {
        Self::new(
            self.name.clone(),
            Arc::clone(&self.terms),
            damping,
            self.actuation.clone(),
        )
    }

    pub fn terms(&self) -> Arc<dyn EnergyTerms> {
        Arc::clone(&self.terms)
    }

    pub fn actuation(&self) -> &Actuation {
        &self.actuation
    }

    pub fn input_matrix(&self) -> DMatrix<f64> {
        self.actuation.input_matrix(self.n())
    }

    pub fn mass(&self, q: &DVector<f64>) -> DMatrix<f64> {
        self.terms.mass(q)
    }

    pub fn has_analytic_mass_partial(&self) -> bool {
        self.terms.mass_partial(&DVector::zeros(self.n()), 0).is_some()
    }

    pub fn mass_partial(&self, q: &DVector<f64>, k: usize) -> DMatrix<f64> {
        self.terms
            .mass_partial(q, k)
            .unwrap_or_else(|| self.mass_partial_fd(q, k, MASS_PARTIAL_FD_STEP))
    }

    /// Central difference `(M(q + h e_k) - M(q - h e_k)) / 2h`.
    pub fn mass_partial_fd(&self, q: &DVector<f64>, k: usize, h: f64) -> DMatrix<f64> {
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[k] += h;
        qm[k] -= h;
        (self.terms.mass(&qp) - self.terms.mass(&qm)) / (2.0 * h)
    }

    /// `Ṁ = Σ_k (∂M/∂q_k) q̇_k`.
    pub fn mass_dot(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n();
        let mut md = DMatrix::zeros(n, n);
        for k in 0..n {
            if qdot[k] != 0.0 {
                md += self.mass_partial(q, k) * qdot[k];
            }
        }
        md
    }

    pub fn potential(&self, q: &DVector<f64>) -> f64 {
        self.terms.potential(q)
    }

    pub fn potential_grad(&self, q: &DVector<f64>) -> DVector<f64> {
        self.terms.potential_grad(q)
    }

    pub fn potential_hessian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        self.terms.potential_hessian(q)
    }

    pub(crate) fn mass_cholesky(&self, q: &DVector<f64>) -> Result<Cholesky<f64, Dyn>> {
        let m = self.terms.mass(q);
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularMass {
                q: q.iter().copied().collect(),
            });
        }
        Cholesky::new(m).ok_or_else(|| Error::SingularMass {
            q: q.iter().copied().collect(),
        })
    }

    fn check_state(&self, x: &State) -> Result<()> {
        check_dim("state q", self.n(), x.q.len())?;
        check_dim("state p", self.n(), x.p.len())
    }

    /// `q̇ = M⁻¹(q) p`.
    pub fn velocity(&self, x: &State) -> Result<DVector<f64>> {
        self.check_state(x)?;
        Ok(self.mass_cholesky(&x.q)?.solve(&x.p))
    }

    /// `p = M(q) q̇`.
    pub fn momentum(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> DVector<f64> {
        self.mass(q) * qdot
    }

    pub fn hamiltonian(&self, x: &State) -> Result<f64> {
        let qdot = self.velocity(x)?;
        Ok(0.5 * x.p.dot(&qdot) + self.potential(&x.q))
    }

    /// Passive output `y = Gᵀ q̇`.
    pub fn passive_output(&self, x: &State) -> Result<DVector<f64>> {
        let qdot = self.velocity(x)?;
        Ok(self.input_matrix().transpose() * qdot)
    }

    /// `½ Σ_k e_k q̇ᵀ (∂M/∂q_k) q̇`.
    pub fn coriolis_term(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n(), |k, _| {
            0.5 * (qdot.transpose() * self.mass_partial(q, k) * qdot)[(0, 0)]
        })
    }

    /// Generalized force `G u`.
    pub fn input_force(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("input u", self.m(), u.len())?;
        let gu = &self.actuation.gain * u;
        let mut f = DVector::zeros(self.n());
        for (j, &i) in self.actuation.indices.iter().enumerate() {
            f[i] = gu[j];
        }
        Ok(f)
    }

    /// Time derivative of the state under input `u`, returned as `(q̇, ṗ)`.
    pub fn open_loop_rhs(&self, x: &State, u: &DVector<f64>) -> Result<State> {
        let qdot = self.velocity(x)?;
        let pdot = self.momentum_rate(&x.q, &qdot, u)?;
        Ok(State { q: qdot, p: pdot })
    }

    /// `ṗ = -∇V + ½ Σ e_k q̇ᵀ ∂_k M q̇ - D q̇ + G u`.
    pub fn momentum_rate(
        &self,
        q: &DVector<f64>,
        qdot: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let damping = self.damping.component_mul(qdot);
        Ok(-self.potential_grad(q) + self.coriolis_term(q, qdot) - damping + self.input_force(u)?)
    }

    /// Exact acceleration `q̈ = M⁻¹ (ṗ - Ṁ q̇)`.
    pub fn acceleration(&self, x: &State, u: &DVector<f64>) -> Result<DVector<f64>> {
        let chol = self.mass_cholesky(&x.q)?;
        let qdot = chol.solve(&x.p);
        let pdot = self.momentum_rate(&x.q, &qdot, u)?;
        let rhs = pdot - self.mass_dot(&x.q, &qdot) * &qdot;
        Ok(chol.solve(&rhs))
    }

    /// Membership test for `𝓔 = {∇_{q_u} V(q) = 0, p = 0}` at configuration `q`.
    pub fn is_assignable_equilibrium(&self, q: &DVector<f64>) -> EquilibriumCheck {
        self.is_assignable_equilibrium_tol(q, DEFAULT_EQUILIBRIUM_TOL)
    }

    pub fn is_assignable_equilibrium_tol(&self, q: &DVector<f64>, tol: f64) -> EquilibriumCheck {
        let grad = self.potential_grad(q);
        let unact = self.actuation.unactuated(self.n());
        let residual = gather(&grad, &unact).norm();
        EquilibriumCheck {
            residual,
            admissible: residual <= tol,
        }
    }

    /// Largest `‖FD(∂M/∂q_k) - ∂M/∂q_k‖` over `k` at `q`.
    pub fn mass_partial_error(&self, q: &DVector<f64>, h: f64) -> f64 {
        (0..self.n())
            .map(|k| (self.mass_partial_fd(q, k, h) - self.mass_partial(q, k)).norm())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{self, Flexible2DofParams, Rigid2DofParams};
    use approx::assert_relative_eq;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn hamiltonian_zero_at_rest_origin() {
        let m = models::rigid_2dof(&Rigid2DofParams::default()).unwrap();
        assert_eq!(m.hamiltonian(&State::zeros(2)).unwrap(), 0.0);
    }

    #[test]
    fn hamiltonian_scalar_hand_value() {
        // M = 2, V = ½ q²
        let m = models::linear_chain(&[2.0], &[0.1], &[1.0]).unwrap();
        let x = State::new(dv(&[1.0]), dv(&[2.0])).unwrap();
        assert_relative_eq!(m.hamiltonian(&x).unwrap(), 1.5, epsilon = 1e-15);
    }

    #[test]
    fn hamiltonian_flexible_spring_at_rest() {
        let m = models::flexible_2dof(&Flexible2DofParams::default()).unwrap();
        let x = State::at_rest(dv(&[0.6, 0.8, 0.6, 0.8]));
        assert_eq!(m.hamiltonian(&x).unwrap(), 0.0);
    }

    #[test]
    fn open_loop_rhs_linear_case() {
        let m = models::linear_chain(&[1.0], &[0.5], &[0.0]).unwrap();
        let x = State::new(dv(&[0.0]), dv(&[1.0])).unwrap();
        let d = m.open_loop_rhs(&x, &dv(&[0.0])).unwrap();
        assert_eq!(d.q[0], 1.0);
        assert_eq!(d.p[0], -0.5);
    }

    #[test]
    fn open_loop_rhs_vanishes_at_equilibrium_with_matching_input() {
        let m = models::linear_chain(&[1.0, 2.0], &[0.3, 0.4], &[2.0, 1.0]).unwrap();
        let q = dv(&[0.3, -0.2]);
        // G = I, so u* = ∇V(q)
        let u = m.potential_grad(&q);
        let d = m.open_loop_rhs(&State::at_rest(q), &u).unwrap();
        assert!(d.q.norm() == 0.0 && d.p.norm() < 1e-15);
    }

    #[test]
    fn open_loop_rhs_rejects_wrong_input_len() {
        let m = models::rigid_2dof(&Rigid2DofParams::default()).unwrap();
        assert!(matches!(
            m.open_loop_rhs(&State::zeros(2), &dv(&[1.0])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn coriolis_matches_momentum_rate_along_short_integration() {
        // Unforced rigid arm: ṗ from the Hamiltonian expansion must equal
        // d/dt (M q̇) estimated by central differences of a fine integration.
        let m = models::rigid_2dof(&Rigid2DofParams::default()).unwrap();
        let x0 = State::new(dv(&[0.0, 0.0]), dv(&[0.1, 0.1])).unwrap();
        let u = dv(&[0.0, 0.0]);
        let h = 1e-6;
        let step = |x: &State, dt: f64| -> State {
            let f = |s: &State| m.open_loop_rhs(s, &u).unwrap().to_vector();
            let v = x.to_vector();
            let k1 = f(x);
            let k2 = f(&State::from_vector(&(&v + &k1 * (dt / 2.0))));
            let k3 = f(&State::from_vector(&(&v + &k2 * (dt / 2.0))));
            let k4 = f(&State::from_vector(&(&v + &k3 * dt)));
            State::from_vector(&(v + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)))
        };
        let fwd = step(&x0, h);
        let bwd = step(&x0, -h);
        let mv = |x: &State| m.momentum(&x.q, &m.velocity(x).unwrap());
        let fd = (mv(&fwd) - mv(&bwd)) / (2.0 * h);
        let rhs = m.open_loop_rhs(&x0, &u).unwrap();
        let err = (&fd - &rhs.p).norm();
        assert!(err < 1e-6 * rhs.p.norm(), "fd {fd:?} vs rhs {:?}", rhs.p);
        // ∂M/∂q2 ∝ sin q2 vanishes at the start, but not along the motion
        assert_eq!(m.coriolis_term(&x0.q, &m.velocity(&x0).unwrap()).norm(), 0.0);
        let later = m.coriolis_term(&fwd.q, &m.velocity(&fwd).unwrap());
        assert!(later[1] != 0.0);
    }

    #[test]
    fn assignable_equilibria() {
        let rigid = models::rigid_2dof(&Rigid2DofParams::default()).unwrap();
        let c = rigid.is_assignable_equilibrium(&dv(&[1.3, -2.0]));
        assert!(c.admissible && c.residual == 0.0);

        let flex = models::flexible_2dof(&Flexible2DofParams::default()).unwrap();
        assert!(flex.is_assignable_equilibrium(&dv(&[0.6, 0.8, 0.6, 0.8])).admissible);
        let c = flex.is_assignable_equilibrium(&dv(&[0.6, 0.8, 0.0, 0.0]));
        assert!(!c.admissible);
        let expected = (5.058f64.powi(2) + 13.488f64.powi(2)).sqrt();
        assert_relative_eq!(c.residual, expected, epsilon = 1e-9);
        assert_relative_eq!(c.residual, 14.405, epsilon = 1e-3);
    }

    #[test]
    fn kinematic_row_is_pure_velocity() {
        let m = models::flexible_2dof(&Flexible2DofParams::default()).unwrap();
        let x = State::new(dv(&[0.1, -0.4, 0.3, 0.2]), dv(&[0.01, -0.02, 0.03, 0.004])).unwrap();
        let a = m.open_loop_rhs(&x, &dv(&[0.0, 0.0])).unwrap();
        let b = m.open_loop_rhs(&x, &dv(&[50.0, -20.0])).unwrap();
        assert_eq!(a.q, b.q);
        assert_eq!(a.q, m.velocity(&x).unwrap());
    }

    #[test]
    fn actuation_validation() {
        let g = DMatrix::identity(2, 2);
        assert!(Actuation::new(3, vec![0, 0], g.clone()).is_err());
        assert!(Actuation::new(3, vec![0, 3], g.clone()).is_err());
        assert!(Actuation::new(3, vec![0, 2], DMatrix::zeros(2, 2)).is_err());
        let a = Actuation::new(3, vec![2, 0], g).unwrap();
        assert_eq!(a.unactuated(3), vec![1]);
        let gm = a.input_matrix(3);
        assert_eq!(gm[(2, 0)], 1.0);
        assert_eq!(gm[(0, 1)], 1.0);
    }

    #[test]
    fn singular_mass_is_reported() {
        #[derive(Debug)]
        struct Degenerate;
        impl EnergyTerms for Degenerate {
            fn dof(&self) -> usize {
                1
            }
            fn mass(&self, q: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::from_element(1, 1, 1.0 + q[0])
            }
            fn potential(&self, _q: &DVector<f64>) -> f64 {
                0.0
            }
            fn potential_grad(&self, _q: &DVector<f64>) -> DVector<f64> {
                DVector::zeros(1)
            }
            fn potential_hessian(&self, _q: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::zeros(1, 1)
            }
        }
        let m = MechModel::new("deg", Arc::new(Degenerate), dv(&[1.0]), Actuation::full(1)).unwrap();
        let x = State::new(dv(&[-1.0]), dv(&[1.0])).unwrap();
        match m.hamiltonian(&x) {
            Err(Error::SingularMass { q }) => assert_eq!(q, vec![-1.0]),
            other => panic!("expected singular mass, got {other:?}"),
        }
    }
}
