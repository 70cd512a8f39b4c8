//! Dynamic-system and cost models, plus the three benchmark problems.
//!
//! A [`SystemModel`] wraps a [`Dynamics`] implementation together with its
//! equilibrium and control bounds. Costs are quadratic and centered at the
//! equilibrium, see [`CostModel`].

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Continuous-time dynamics `x' = f(x, u)`.
///
/// Implementations provide analytic first derivatives. Control-affine
/// systems also expose `f_a`, `g_a` through [`Dynamics::affine_parts`], and
/// systems that know their second derivatives expose them through
/// [`Dynamics::costate_hessians`] so state-transition matrices can be
/// assembled without finite differences.
pub trait Dynamics: fmt::Debug + Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn eval(&self, x: &Vector, u: &Vector) -> Result<Vector>;
    fn jac_x(&self, x: &Vector, u: &Vector) -> Result<Matrix>;
    fn jac_u(&self, x: &Vector, u: &Vector) -> Result<Matrix>;

    /// `(f_a(x), g_a(x))` with `f(x, u) = f_a(x) + g_a(x) u`, if the system is control affine.
    fn affine_parts(&self, _x: &Vector) -> Result<Option<(Vector, Matrix)>> {
        Ok(None)
    }

    /// Second derivatives of the scalar `pᵀ f(x, u)`: `(∂²/∂x², ∂²/∂x∂u)`,
    /// shaped `n×n` and `n×m`. `None` when not provided.
    fn costate_hessians(
        &self,
        _x: &Vector,
        _u: &Vector,
        _p: &Vector,
    ) -> Result<Option<(Matrix, Matrix)>> {
        Ok(None)
    }
}

#[derive(Clone, Debug)]
pub struct SystemModel {
    pub name: String,
    pub params: BTreeMap<String, f64>,
    pub x_e: Vector,
    pub u_e: Vector,
    pub u_lo: Vector,
    pub u_hi: Vector,
    dynamics: Arc<dyn Dynamics>,
    affine: bool,
}

impl SystemModel {
    pub fn new(
        name: impl Into<String>,
        dynamics: Arc<dyn Dynamics>,
        x_e: Vector,
        u_e: Vector,
        u_lo: Vector,
        u_hi: Vector,
    ) -> Result<Self> {
        let n = dynamics.state_dim();
        let m = dynamics.control_dim();
        check_dim("equilibrium state", n, x_e.len())?;
        check_dim("equilibrium control", m, u_e.len())?;
        check_dim("lower control bound", m, u_lo.len())?;
        check_dim("upper control bound", m, u_hi.len())?;
        for i in 0..m {
            if !(u_lo[i] <= u_e[i] && u_e[i] <= u_hi[i]) {
                return Err(Error::InvalidArgument(format!(
                    "control channel {i}: bounds [{}, {}] do not contain u_e = {}",
                    u_lo[i], u_hi[i], u_e[i]
                )));
            }
        }
        let affine = matches!(dynamics.affine_parts(&x_e), Ok(Some(_)));
        Ok(Self {
            name: name.into(),
            params: BTreeMap::new(),
            x_e,
            u_e,
            u_lo,
            u_hi,
            dynamics,
            affine,
        })
    }

    /// Unbounded model.
    pub fn unbounded(
        name: impl Into<String>,
        dynamics: Arc<dyn Dynamics>,
        x_e: Vector,
        u_e: Vector,
    ) -> Result<Self> {
        let m = dynamics.control_dim();
        Self::new(
            name,
            dynamics,
            x_e,
            u_e,
            Vector::from_element(m, f64::NEG_INFINITY),
            Vector::from_element(m, f64::INFINITY),
        )
    }

    pub fn n(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn m(&self) -> usize {
        self.dynamics.control_dim()
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }

    fn check_args(&self, x: &Vector, u: &Vector) -> Result<()> {
        check_dim("state", self.n(), x.len())?;
        check_dim("control", self.m(), u.len())
    }

    pub fn eval_dynamics(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        self.check_args(x, u)?;
        self.dynamics.eval(x, u)
    }

    /// `(∂f/∂x, ∂f/∂u)` at `(x, u)`.
    pub fn jacobians(&self, x: &Vector, u: &Vector) -> Result<(Matrix, Matrix)> {
        self.check_args(x, u)?;
        Ok((self.dynamics.jac_x(x, u)?, self.dynamics.jac_u(x, u)?))
    }

    pub fn affine_parts(&self, x: &Vector) -> Result<Option<(Vector, Matrix)>> {
        check_dim("state", self.n(), x.len())?;
        self.dynamics.affine_parts(x)
    }

    pub fn is_affine(&self) -> bool {
        self.affine
    }

    pub fn costate_hessians(
        &self,
        x: &Vector,
        u: &Vector,
        p: &Vector,
    ) -> Result<Option<(Matrix, Matrix)>> {
        self.check_args(x, u)?;
        check_dim("costate", self.n(), p.len())?;
        self.dynamics.costate_hessians(x, u, p)
    }

    pub fn is_bounded(&self) -> bool {
        self.u_lo.iter().any(|v| v.is_finite()) || self.u_hi.iter().any(|v| v.is_finite())
    }

    /// Componentwise projection onto `[u_lo, u_hi]`.
    pub fn clamp_control(&self, u: &Vector) -> Vector {
        Vector::from_iterator(
            u.len(),
            u.iter()
                .enumerate()
                .map(|(i, v)| v.clamp(self.u_lo[i], self.u_hi[i])),
        )
    }
}

/// Quadratic running cost `r = (x-x_e)ᵀQ(x-x_e) + (u-u_e)ᵀR(u-u_e)`.
#[derive(Clone, Debug)]
pub struct CostModel {
    pub q: Matrix,
    pub r: Matrix,
    pub x_e: Vector,
    pub u_e: Vector,
}

impl CostModel {
    pub fn new(q: Matrix, r: Matrix, x_e: Vector, u_e: Vector) -> Result<Self> {
        let n = x_e.len();
        let m = u_e.len();
        if q.shape() != (n, n) || r.shape() != (m, m) {
            return Err(Error::InvalidArgument(format!(
                "cost weights must be {n}x{n} and {m}x{m}, got {:?} and {:?}",
                q.shape(),
                r.shape()
            )));
        }
        if (&q - q.transpose()).amax() > 1e-12 || (&r - r.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidArgument("cost weights must be symmetric".into()));
        }
        let q_min = q.clone().symmetric_eigenvalues().min();
        if q_min < -1e-12 {
            return Err(Error::InvalidArgument(format!(
                "Q must be positive semidefinite (min eigenvalue {q_min})"
            )));
        }
        if r.clone().cholesky().is_none() {
            return Err(Error::InvalidArgument("R must be positive definite".into()));
        }
        Ok(Self { q, r, x_e, u_e })
    }

    pub fn running_cost(&self, x: &Vector, u: &Vector) -> f64 {
        let dx = x - &self.x_e;
        let du = u - &self.u_e;
        dx.dot(&(&self.q * &dx)) + du.dot(&(&self.r * &du))
    }

    pub fn grad_x(&self, x: &Vector, _u: &Vector) -> Vector {
        2.0 * (&self.q * (x - &self.x_e))
    }

    pub fn grad_u(&self, _x: &Vector, u: &Vector) -> Vector {
        2.0 * (&self.r * (u - &self.u_e))
    }

    pub fn r_is_diagonal(&self) -> bool {
        let m = self.r.nrows();
        (0..m).all(|i| (0..m).all(|j| i == j || self.r[(i, j)] == 0.0))
    }
}

/// `x' = A x + B u`, equilibrium at the origin.
#[derive(Clone, Debug)]
pub struct LinearDynamics {
    pub a: Matrix,
    pub b: Matrix,
}

impl LinearDynamics {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if !a.is_square() || a.nrows() != b.nrows() {
            return Err(Error::InvalidArgument(format!(
                "incompatible A {:?} and B {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self { a, b })
    }
}

impl Dynamics for LinearDynamics {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn eval(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        Ok(&self.a * x + &self.b * u)
    }
    fn jac_x(&self, _x: &Vector, _u: &Vector) -> Result<Matrix> {
        Ok(self.a.clone())
    }
    fn jac_u(&self, _x: &Vector, _u: &Vector) -> Result<Matrix> {
        Ok(self.b.clone())
    }
    fn affine_parts(&self, x: &Vector) -> Result<Option<(Vector, Matrix)>> {
        Ok(Some((&self.a * x, self.b.clone())))
    }
    fn costate_hessians(&self, _x: &Vector, _u: &Vector, _p: &Vector) -> Result<Option<(Matrix, Matrix)>> {
        let n = self.state_dim();
        Ok(Some((Matrix::zeros(n, n), Matrix::zeros(n, self.control_dim()))))
    }
}

/// Second-order nonlinear system with a known quadratic optimal value:
///
/// ```text
/// x1' = -x1 + x2
/// x2' = -0.5 x1 - 0.5 x2 (1 - (cos 2x1 + 2)^2) + (cos 2x1 + 2) u
/// ```
#[derive(Clone, Copy, Debug, Default)]
pub struct Nl2;

impl Nl2 {
    /// `(c, c', c'')` for `c(x1) = cos 2x1 + 2`.
    fn gain(x1: f64) -> (f64, f64, f64) {
        let (s, c) = (2.0 * x1).sin_cos();
        (c + 2.0, -2.0 * s, -4.0 * c)
    }
}

impl Dynamics for Nl2 {
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        let (c, _, _) = Self::gain(x[0]);
        Ok(Vector::from_vec(vec![
            -x[0] + x[1],
            -0.5 * x[0] - 0.5 * x[1] * (1.0 - c * c) + c * u[0],
        ]))
    }
    fn jac_x(&self, x: &Vector, u: &Vector) -> Result<Matrix> {
        let (c, dc, _) = Self::gain(x[0]);
        Ok(Matrix::from_row_slice(
            2,
            2,
            &[
                -1.0,
                1.0,
                -0.5 + x[1] * c * dc + dc * u[0],
                -0.5 * (1.0 - c * c),
            ],
        ))
    }
    fn jac_u(&self, x: &Vector, _u: &Vector) -> Result<Matrix> {
        let (c, _, _) = Self::gain(x[0]);
        Ok(Matrix::from_column_slice(2, 1, &[0.0, c]))
    }
    fn affine_parts(&self, x: &Vector) -> Result<Option<(Vector, Matrix)>> {
        let (c, _, _) = Self::gain(x[0]);
        let fa = Vector::from_vec(vec![
            -x[0] + x[1],
            -0.5 * x[0] - 0.5 * x[1] * (1.0 - c * c),
        ]);
        Ok(Some((fa, Matrix::from_column_slice(2, 1, &[0.0, c]))))
    }
    fn costate_hessians(&self, x: &Vector, u: &Vector, p: &Vector) -> Result<Option<(Matrix, Matrix)>> {
        let (c, dc, ddc) = Self::gain(x[0]);
        let f2_11 = x[1] * (dc * dc + c * ddc) + ddc * u[0];
        let f2_12 = c * dc;
        let sxx = Matrix::from_row_slice(2, 2, &[f2_11, f2_12, f2_12, 0.0]) * p[1];
        let sxu = Matrix::from_column_slice(2, 1, &[dc * p[1], 0.0]);
        Ok(Some((sxx, sxu)))
    }
}

/// Simplified longitudinal altitude dynamics with angle of attack as input.
///
/// ```text
/// h'  = hdot
/// h'' = K exp(-h/H) sqrt(1 - (hdot/V)^2) alpha - G (1 - (hdot/V)^2)
/// ```
#[derive(Clone, Copy, Debug)]
pub struct WingedCone {
    pub lift_gain: f64,
    pub gravity_term: f64,
    pub scale_height: f64,
    pub cruise_speed: f64,
}

impl Default for WingedCone {
    fn default() -> Self {
        Self {
            lift_gain: 64345.28,
            gravity_term: 20.69,
            scale_height: 24000.0,
            cruise_speed: 15060.0,
        }
    }
}

impl WingedCone {
    /// Angle of attack that makes `h'' = 0` at altitude `h` with zero climb rate.
    pub fn trim_alpha(&self, h: f64) -> f64 {
        self.gravity_term / (self.lift_gain * (-h / self.scale_height).exp())
    }

    fn terms(&self, x: &Vector) -> (f64, f64, f64) {
        let e = self.lift_gain * (-x[0] / self.scale_height).exp();
        let s = 1.0 - (x[1] / self.cruise_speed).powi(2);
        (e, s, s.max(0.0).sqrt())
    }
}

impl Dynamics for WingedCone {
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        let (e, s, q) = self.terms(x);
        Ok(Vector::from_vec(vec![x[1], e * q * u[0] - self.gravity_term * s]))
    }
    fn jac_x(&self, x: &Vector, u: &Vector) -> Result<Matrix> {
        let (e, _, q) = self.terms(x);
        let v2 = self.cruise_speed * self.cruise_speed;
        let a = u[0];
        Ok(Matrix::from_row_slice(
            2,
            2,
            &[
                0.0,
                1.0,
                -e * q * a / self.scale_height,
                -e * a * x[1] / (v2 * q) + 2.0 * self.gravity_term * x[1] / v2,
            ],
        ))
    }
    fn jac_u(&self, x: &Vector, _u: &Vector) -> Result<Matrix> {
        let (e, _, q) = self.terms(x);
        Ok(Matrix::from_column_slice(2, 1, &[0.0, e * q]))
    }
    fn affine_parts(&self, x: &Vector) -> Result<Option<(Vector, Matrix)>> {
        let (e, s, q) = self.terms(x);
        Ok(Some((
            Vector::from_vec(vec![x[1], -self.gravity_term * s]),
            Matrix::from_column_slice(2, 1, &[0.0, e * q]),
        )))
    }
    fn costate_hessians(&self, x: &Vector, u: &Vector, p: &Vector) -> Result<Option<(Matrix, Matrix)>> {
        let (e, _, q) = self.terms(x);
        let v2 = self.cruise_speed * self.cruise_speed;
        let hs = self.scale_height;
        let a = u[0];
        let f11 = e * q * a / (hs * hs);
        let f12 = e * a * x[1] / (hs * v2 * q);
        let f22 = -e * a / (v2 * q * q * q) + 2.0 * self.gravity_term / v2;
        let sxx = Matrix::from_row_slice(2, 2, &[f11, f12, f12, f22]) * p[1];
        let sxu = Matrix::from_column_slice(2, 1, &[-e * q / hs * p[1], -e * x[1] / (v2 * q) * p[1]]);
        Ok(Some((sxx, sxu)))
    }
}

/// Rigid body with Euler-angle (roll, pitch, yaw) kinematics and body-rate
/// dynamics; state `(phi, theta, psi, p, q, r)`, control body torques.
#[derive(Clone, Copy, Debug)]
pub struct RigidBodyAttitude {
    pub ixx: f64,
    pub iyy: f64,
    pub izz: f64,
}

impl Default for RigidBodyAttitude {
    fn default() -> Self {
        Self {
            ixx: 0.0025,
            iyy: 0.0025,
            izz: 0.0035,
        }
    }
}

const PITCH_SINGULARITY_MARGIN: f64 = 1e-6;

impl RigidBodyAttitude {
    fn check_pitch(theta: f64) -> Result<()> {
        if theta.abs() >= FRAC_PI_2 - PITCH_SINGULARITY_MARGIN || !theta.is_finite() {
            Err(Error::Singularity { theta: theta.abs() })
        } else {
            Ok(())
        }
    }

    fn input_matrix(&self) -> Matrix {
        let mut g = Matrix::zeros(6, 3);
        g[(3, 0)] = 1.0 / self.ixx;
        g[(4, 1)] = 1.0 / self.iyy;
        g[(5, 2)] = 1.0 / self.izz;
        g
    }

    fn drift(&self, x: &Vector) -> Result<Vector> {
        let (phi, theta) = (x[0], x[1]);
        Self::check_pitch(theta)?;
        let (p, q, r) = (x[3], x[4], x[5]);
        let (sp, cp) = phi.sin_cos();
        let (tt, ct) = (theta.tan(), theta.cos());
        let a = sp * q + cp * r;
        let b = cp * q - sp * r;
        Ok(Vector::from_vec(vec![
            p + tt * a,
            b,
            a / ct,
            q * r * (self.iyy - self.izz) / self.ixx,
            p * r * (self.izz - self.ixx) / self.iyy,
            p * q * (self.ixx - self.iyy) / self.izz,
        ]))
    }
}

impl Dynamics for RigidBodyAttitude {
    fn state_dim(&self) -> usize {
        6
    }
    fn control_dim(&self) -> usize {
        3
    }
    fn eval(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        Ok(self.drift(x)? + self.input_matrix() * u)
    }
    fn jac_x(&self, x: &Vector, _u: &Vector) -> Result<Matrix> {
        let (phi, theta) = (x[0], x[1]);
        Self::check_pitch(theta)?;
        let (p, q, r) = (x[3], x[4], x[5]);
        let (sp, cp) = phi.sin_cos();
        let (tt, ct) = (theta.tan(), theta.cos());
        let sec = 1.0 / ct;
        let a = sp * q + cp * r;
        let b = cp * q - sp * r;
        let mut j = Matrix::zeros(6, 6);
        j[(0, 0)] = tt * b;
        j[(0, 1)] = sec * sec * a;
        j[(0, 3)] = 1.0;
        j[(0, 4)] = tt * sp;
        j[(0, 5)] = tt * cp;
        j[(1, 0)] = -a;
        j[(1, 4)] = cp;
        j[(1, 5)] = -sp;
        j[(2, 0)] = sec * b;
        j[(2, 1)] = sec * tt * a;
        j[(2, 4)] = sec * sp;
        j[(2, 5)] = sec * cp;
        j[(3, 4)] = r * (self.iyy - self.izz) / self.ixx;
        j[(3, 5)] = q * (self.iyy - self.izz) / self.ixx;
        j[(4, 3)] = r * (self.izz - self.ixx) / self.iyy;
        j[(4, 5)] = p * (self.izz - self.ixx) / self.iyy;
        j[(5, 3)] = q * (self.ixx - self.iyy) / self.izz;
        j[(5, 4)] = p * (self.ixx - self.iyy) / self.izz;
        Ok(j)
    }
    fn jac_u(&self, x: &Vector, _u: &Vector) -> Result<Matrix> {
        Self::check_pitch(x[1])?;
        Ok(self.input_matrix())
    }
    fn affine_parts(&self, x: &Vector) -> Result<Option<(Vector, Matrix)>> {
        Ok(Some((self.drift(x)?, self.input_matrix())))
    }
    fn costate_hessians(&self, x: &Vector, _u: &Vector, l: &Vector) -> Result<Option<(Matrix, Matrix)>> {
        let (phi, theta) = (x[0], x[1]);
        Self::check_pitch(theta)?;
        let (q, r) = (x[4], x[5]);
        let (sp, cp) = phi.sin_cos();
        let (tt, ct) = (theta.tan(), theta.cos());
        let sec = 1.0 / ct;
        let sec2 = sec * sec;
        let a = sp * q + cp * r;
        let b = cp * q - sp * r;

        let mut h = Matrix::zeros(6, 6);
        let mut add = |i: usize, j: usize, v: f64| {
            h[(i, j)] += v;
            if i != j {
                h[(j, i)] += v;
            }
        };
        // roll kinematics
        add(0, 0, l[0] * (-tt * a));
        add(0, 1, l[0] * (sec2 * b));
        add(1, 1, l[0] * (2.0 * sec2 * tt * a));
        add(0, 4, l[0] * (tt * cp));
        add(0, 5, l[0] * (-tt * sp));
        add(1, 4, l[0] * (sec2 * sp));
        add(1, 5, l[0] * (sec2 * cp));
        // pitch kinematics
        add(0, 0, l[1] * (-b));
        add(0, 4, l[1] * (-sp));
        add(0, 5, l[1] * (-cp));
        // yaw kinematics
        add(0, 0, l[2] * (-sec * a));
        add(0, 1, l[2] * (sec * tt * b));
        add(1, 1, l[2] * (a * (sec * tt * tt + sec * sec2)));
        add(0, 4, l[2] * (sec * cp));
        add(0, 5, l[2] * (-sec * sp));
        add(1, 4, l[2] * (sec * tt * sp));
        add(1, 5, l[2] * (sec * tt * cp));
        // gyroscopic coupling
        add(4, 5, l[3] * (self.iyy - self.izz) / self.ixx);
        add(3, 5, l[4] * (self.izz - self.ixx) / self.iyy);
        add(3, 4, l[5] * (self.ixx - self.iyy) / self.izz);

        Ok(Some((h, Matrix::zeros(6, 3))))
    }
}

/// Benchmark identifiers accepted by [`make_benchmark`].
pub const BENCHMARKS: [&str; 3] = ["nl2", "winged_cone", "attitude"];

fn take_params(
    system: &str,
    defaults: &[(&str, f64)],
    overrides: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, f64>> {
    let mut out: BTreeMap<String, f64> = defaults.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    for (k, v) in overrides {
        match out.get_mut(k) {
            Some(slot) => {
                if !v.is_finite() {
                    return Err(Error::InvalidArgument(format!("parameter `{k}` must be finite")));
                }
                *slot = *v;
            }
            None => {
                return Err(Error::UnknownParameter {
                    system: system.to_string(),
                    param: k.clone(),
                })
            }
        }
    }
    Ok(out)
}

/// Builds one of the benchmark problems, applying parameter overrides on top
/// of the published defaults.
pub fn make_benchmark(name: &str, overrides: &BTreeMap<String, f64>) -> Result<(SystemModel, CostModel)> {
    match name {
        "nl2" => {
            let p = take_params(name, &[("q1", 1.0), ("q2", 1.0), ("r", 1.0)], overrides)?;
            let x_e = Vector::zeros(2);
            let u_e = Vector::zeros(1);
            let mut sys = SystemModel::unbounded(name, Arc::new(Nl2), x_e.clone(), u_e.clone())?;
            let cost = CostModel::new(
                Matrix::from_diagonal(&Vector::from_vec(vec![p["q1"], p["q2"]])),
                Matrix::from_element(1, 1, p["r"]),
                x_e,
                u_e,
            )?;
            sys.params = p;
            Ok((sys, cost))
        }
        "winged_cone" => {
            let d = WingedCone::default();
            let p = take_params(
                name,
                &[
                    ("lift_gain", d.lift_gain),
                    ("gravity_term", d.gravity_term),
                    ("scale_height", d.scale_height),
                    ("cruise_speed", d.cruise_speed),
                    ("target_height", 110000.0),
                    ("alpha_max", 0.0872),
                    ("q_h", 1e-4),
                    ("q_hdot", 1e-4),
                    ("r", 1000.0),
                ],
                overrides,
            )?;
            let model = WingedCone {
                lift_gain: p["lift_gain"],
                gravity_term: p["gravity_term"],
                scale_height: p["scale_height"],
                cruise_speed: p["cruise_speed"],
            };
            let x_e = Vector::from_vec(vec![p["target_height"], 0.0]);
            let u_e = Vector::from_element(1, model.trim_alpha(p["target_height"]));
            let amax = p["alpha_max"];
            let mut sys = SystemModel::new(
                name,
                Arc::new(model),
                x_e.clone(),
                u_e.clone(),
                Vector::from_element(1, -amax),
                Vector::from_element(1, amax),
            )?;
            let cost = CostModel::new(
                Matrix::from_diagonal(&Vector::from_vec(vec![p["q_h"], p["q_hdot"]])),
                Matrix::from_element(1, 1, p["r"]),
                x_e,
                u_e,
            )?;
            sys.params = p;
            Ok((sys, cost))
        }
        "attitude" => {
            let d = RigidBodyAttitude::default();
            let p = take_params(
                name,
                &[("ixx", d.ixx), ("iyy", d.iyy), ("izz", d.izz), ("q", 1.0), ("r", 1e4)],
                overrides,
            )?;
            let model = RigidBodyAttitude {
                ixx: p["ixx"],
                iyy: p["iyy"],
                izz: p["izz"],
            };
            let x_e = Vector::zeros(6);
            let u_e = Vector::zeros(3);
            let mut sys = SystemModel::unbounded(name, Arc::new(model), x_e.clone(), u_e.clone())?;
            let cost = CostModel::new(
                Matrix::identity(6, 6) * p["q"],
                Matrix::identity(3, 3) * p["r"],
                x_e,
                u_e,
            )?;
            sys.params = p;
            Ok((sys, cost))
        }
        other => Err(Error::UnknownBenchmark(other.to_string())),
    }
}

/// Linear test system with its equilibrium at the origin and unbounded control.
pub fn linear_system(a: Matrix, b: Matrix) -> Result<SystemModel> {
    let dynamics = LinearDynamics::new(a, b)?;
    let (n, m) = (dynamics.state_dim(), dynamics.control_dim());
    SystemModel::unbounded("linear", Arc::new(dynamics), Vector::zeros(n), Vector::zeros(m))
}

/// Central finite-difference Jacobians, used for validation.
pub fn finite_difference_jacobians(
    sys: &SystemModel,
    x: &Vector,
    u: &Vector,
    rel_step: f64,
) -> Result<(Matrix, Matrix)> {
    let (n, m) = (sys.n(), sys.m());
    let mut jx = Matrix::zeros(n, n);
    for j in 0..n {
        let h = rel_step * x[j].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (sys.eval_dynamics(&xp, u)? - sys.eval_dynamics(&xm, u)?) / (2.0 * h);
        jx.set_column(j, &col);
    }
    let mut ju = Matrix::zeros(n, m);
    for j in 0..m {
        let h = rel_step * u[j].abs().max(1.0);
        let mut up = u.clone();
        let mut um = u.clone();
        up[j] += h;
        um[j] -= h;
        let col = (sys.eval_dynamics(x, &up)? - sys.eval_dynamics(x, &um)?) / (2.0 * h);
        ju.set_column(j, &col);
    }
    Ok((jx, ju))
}
