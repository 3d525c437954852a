//! Plant library: two-link planar arm (rigid and flexible joints) and a
//! linear mass-spring-damper chain with closed-form behaviour.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phsys::{Actuation, EnergyTerms, MechModel};

/// Identified link damping of the rigid arm, N·m·s/rad.
pub const RIGID_DAMPING: [f64; 2] = [1.5964, 0.6971];

/// Identified damping of the flexible arm: links 1-2, then motors 1-2.
pub const FLEXIBLE_DAMPING: [f64; 4] = [0.0331, 0.0077, 2.9758, 2.8064];

/// Input gain diagonal. The second entry is the 5/3 gear ratio, quoted as
/// 1.6667 in the hardware manual.
pub const INPUT_GAIN: [f64; 2] = [1.0, 5.0 / 3.0];

/// Inertia constants of `M_l(q₂)`, kg·m².
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkInertia {
    pub a1: f64,
    pub a2: f64,
    pub b: f64,
}

impl Default for LinkInertia {
    fn default() -> Self {
        Self {
            a1: 0.1547,
            a2: 0.0111,
            b: 0.0168,
        }
    }
}

impl LinkInertia {
    /// `M_l(q₂)`.
    pub fn matrix(&self, q2: f64) -> [[f64; 2]; 2] {
        let c = q2.cos();
        let off = self.a2 + self.b * c;
        [[self.a1 + self.a2 + 2.0 * self.b * c, off], [off, self.a2]]
    }

    /// `dM_l/dq₂ = -b sin q₂ [[2, 1], [1, 0]]`.
    pub fn derivative(&self, q2: f64) -> [[f64; 2]; 2] {
        let s = -self.b * q2.sin();
        [[2.0 * s, s], [s, 0.0]]
    }

    fn validate(&self) -> Result<()> {
        if !(self.a1 > 0.0 && self.a2 > 0.0 && self.b.is_finite()) {
            return Err(Error::InvalidParameter(
                "link inertia constants a1, a2 must be positive".into(),
            ));
        }
        // positive definiteness on a 100-point grid over one revolution
        for i in 0..100 {
            let q2 = -PI + 2.0 * PI * i as f64 / 99.0;
            let m = self.matrix(q2);
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            if !(m[0][0] > 0.0 && det > 0.0) {
                return Err(Error::NotPositiveDefinite {
                    what: format!("link mass matrix at q2 = {q2:.4}"),
                    min_eig: det.min(m[0][0]),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Rigid2DofParams {
    #[serde(flatten)]
    pub link: LinkInertia,
    pub damping: [f64; 2],
    pub input_gain: [f64; 2],
}

impl Default for Rigid2DofParams {
    fn default() -> Self {
        Self {
            link: LinkInertia::default(),
            damping: RIGID_DAMPING,
            input_gain: INPUT_GAIN,
        }
    }
}

/// Which side of the elastic joints receives the torque.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlexActuation {
    /// `q_a = (q₁, q₂)`, the link coordinates.
    #[default]
    Links,
    /// `q_a = (q₃, q₄)`, the motor coordinates.
    Motors,
}

impl FlexActuation {
    pub fn indices(self) -> Vec<usize> {
        match self {
            FlexActuation::Links => vec![0, 1],
            FlexActuation::Motors => vec![2, 3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Flexible2DofParams {
    #[serde(flatten)]
    pub link: LinkInertia,
    pub motor_inertia: [f64; 2],
    pub stiffness: [f64; 2],
    pub damping: [f64; 4],
    pub input_gain: [f64; 2],
    pub actuation: FlexActuation,
}

impl Default for Flexible2DofParams {
    fn default() -> Self {
        Self {
            link: LinkInertia::default(),
            motor_inertia: [0.0628, 0.0026],
            stiffness: [8.43, 16.86],
            damping: FLEXIBLE_DAMPING,
            input_gain: INPUT_GAIN,
            actuation: FlexActuation::Links,
        }
    }
}

#[derive(Debug)]
struct RigidArm {
    link: LinkInertia,
}

impl EnergyTerms for RigidArm {
    fn dof(&self) -> usize {
        2
    }

    fn mass(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let m = self.link.matrix(q[1]);
        DMatrix::from_row_slice(2, 2, &[m[0][0], m[0][1], m[1][0], m[1][1]])
    }

    fn mass_partial(&self, q: &DVector<f64>, k: usize) -> Option<DMatrix<f64>> {
        if k == 1 {
            let d = self.link.derivative(q[1]);
            Some(DMatrix::from_row_slice(2, 2, &[d[0][0], d[0][1], d[1][0], d[1][1]]))
        } else {
            Some(DMatrix::zeros(2, 2))
        }
    }

    fn potential(&self, _q: &DVector<f64>) -> f64 {
        0.0
    }

    fn potential_grad(&self, _q: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(2)
    }

    fn potential_hessian(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(2, 2)
    }
}

/// Links `(q₁, q₂)` coupled to motors `(q₃, q₄)` through torsional springs.
#[derive(Debug)]
struct FlexibleArm {
    link: LinkInertia,
    motor_inertia: [f64; 2],
    stiffness: [f64; 2],
}

impl EnergyTerms for FlexibleArm {
    fn dof(&self) -> usize {
        4
    }

    fn mass(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let m = self.link.matrix(q[1]);
        let mut out = DMatrix::zeros(4, 4);
        out[(0, 0)] = m[0][0];
        out[(0, 1)] = m[0][1];
        out[(1, 0)] = m[1][0];
        out[(1, 1)] = m[1][1];
        out[(2, 2)] = self.motor_inertia[0];
        out[(3, 3)] = self.motor_inertia[1];
        out
    }

    fn mass_partial(&self, q: &DVector<f64>, k: usize) -> Option<DMatrix<f64>> {
        let mut out = DMatrix::zeros(4, 4);
        if k == 1 {
            let d = self.link.derivative(q[1]);
            out[(0, 0)] = d[0][0];
            out[(0, 1)] = d[0][1];
            out[(1, 0)] = d[1][0];
        }
        Some(out)
    }

    fn potential(&self, q: &DVector<f64>) -> f64 {
        (0..2)
            .map(|i| 0.5 * self.stiffness[i] * (q[i] - q[i + 2]).powi(2))
            .sum()
    }

    fn potential_grad(&self, q: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(4);
        for i in 0..2 {
            let f = self.stiffness[i] * (q[i] - q[i + 2]);
            g[i] = f;
            g[i + 2] = -f;
        }
        g
    }

    fn potential_hessian(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(4, 4);
        for i in 0..2 {
            let k = self.stiffness[i];
            h[(i, i)] = k;
            h[(i + 2, i + 2)] = k;
            h[(i, i + 2)] = -k;
            h[(i + 2, i)] = -k;
        }
        h
    }
}

#[derive(Debug)]
struct LinearChain {
    mass: DMatrix<f64>,
    stiffness: DMatrix<f64>,
}

impl EnergyTerms for LinearChain {
    fn dof(&self) -> usize {
        self.mass.nrows()
    }

    fn mass(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        self.mass.clone()
    }

    fn mass_partial(&self, _q: &DVector<f64>, _k: usize) -> Option<DMatrix<f64>> {
        let n = self.dof();
        Some(DMatrix::zeros(n, n))
    }

    fn potential(&self, q: &DVector<f64>) -> f64 {
        0.5 * q.dot(&(&self.stiffness * q))
    }

    fn potential_grad(&self, q: &DVector<f64>) -> DVector<f64> {
        &self.stiffness * q
    }

    fn potential_hessian(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        self.stiffness.clone()
    }
}

fn diag_gain(g: [f64; 2]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(&g))
}

/// Fully actuated planar arm, `V ≡ 0`.
pub fn rigid_2dof(params: &Rigid2DofParams) -> Result<MechModel> {
    params.link.validate()?;
    let actuation = Actuation::new(2, vec![0, 1], diag_gain(params.input_gain))?;
    MechModel::new(
        "rigid2dof",
        Arc::new(RigidArm { link: params.link }),
        DVector::from_column_slice(&params.damping),
        actuation,
    )
}

/// Planar arm with elastic joints, `V = ½‖q_links - q_motors‖²_{K_s}`.
pub fn flexible_2dof(params: &Flexible2DofParams) -> Result<MechModel> {
    params.link.validate()?;
    if params
        .motor_inertia
        .iter()
        .chain(params.stiffness.iter())
        .any(|v| !(*v > 0.0))
    {
        return Err(Error::InvalidParameter(
            "motor inertia and joint stiffness must be positive".into(),
        ));
    }
    let actuation = Actuation::new(4, params.actuation.indices(), diag_gain(params.input_gain))?;
    MechModel::new(
        "flexible2dof",
        Arc::new(FlexibleArm {
            link: params.link,
            motor_inertia: params.motor_inertia,
            stiffness: params.stiffness,
        }),
        DVector::from_column_slice(&params.damping),
        actuation,
    )
}

/// Fully actuated chain of point masses. `stiffnesses[0]` ties mass 1 to
/// ground; `stiffnesses[i]` joins masses `i` and `i + 1`.
pub fn linear_chain(masses: &[f64], dampings: &[f64], stiffnesses: &[f64]) -> Result<MechModel> {
    let n = masses.len();
    if n == 0 || dampings.len() != n || stiffnesses.len() != n {
        return Err(Error::Dimension {
            what: "linear chain parameter vectors".into(),
            expected: n,
            found: if dampings.len() != n {
                dampings.len()
            } else {
                stiffnesses.len()
            },
        });
    }
    if masses.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::InvalidParameter("chain masses must be positive".into()));
    }
    if stiffnesses.iter().any(|k| !(*k >= 0.0)) {
        return Err(Error::InvalidParameter(
            "chain stiffnesses must be non-negative".into(),
        ));
    }
    let mut k = DMatrix::zeros(n, n);
    for (i, &ki) in stiffnesses.iter().enumerate() {
        k[(i, i)] += ki;
        if i > 0 {
            k[(i - 1, i - 1)] += ki;
            k[(i - 1, i)] -= ki;
            k[(i, i - 1)] -= ki;
        }
    }
    MechModel::new(
        "linchain",
        Arc::new(LinearChain {
            mass: DMatrix::from_diagonal(&DVector::from_column_slice(masses)),
            stiffness: k,
        }),
        DVector::from_column_slice(dampings),
        Actuation::full(n),
    )
}

/// Model description as it appears in scenario files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelConfig {
    Rigid2dof(Rigid2DofParams),
    Flexible2dof(Flexible2DofParams),
    Linchain {
        masses: Vec<f64>,
        dampings: Vec<f64>,
        stiffnesses: Vec<f64>,
    },
}

impl ModelConfig {
    pub fn build(&self) -> Result<MechModel> {
        match self {
            ModelConfig::Rigid2dof(p) => rigid_2dof(p),
            ModelConfig::Flexible2dof(p) => flexible_2dof(p),
            ModelConfig::Linchain {
                masses,
                dampings,
                stiffnesses,
            } => linear_chain(masses, dampings, stiffnesses),
        }
    }
}
