//! Lyapunov-decrease correction of a learned policy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::ValueNetwork;
use crate::simulate::Policy;
use crate::systems::{Matrix, SystemModel, Vector};

/// Anything that supplies `V(x)` and `∂V/∂x`.
pub trait ValueFunction {
    fn value(&self, x: &Vector) -> f64;
    fn gradient(&self, x: &Vector) -> Vector;
}

impl ValueFunction for ValueNetwork {
    fn value(&self, x: &Vector) -> f64 {
        ValueNetwork::value(self, x)
    }
    fn gradient(&self, x: &Vector) -> Vector {
        ValueNetwork::gradient(self, x)
    }
}

/// `V(x) = (x − x_e)ᵀ S (x − x_e)` for a symmetric `S`.
#[derive(Clone, Debug)]
pub struct QuadraticValue {
    pub s: Matrix,
    pub x_e: Vector,
}

impl ValueFunction for QuadraticValue {
    fn value(&self, x: &Vector) -> f64 {
        let d = x - &self.x_e;
        d.dot(&(&self.s * &d))
    }
    fn gradient(&self, x: &Vector) -> Vector {
        (&self.s + self.s.transpose()) * (x - &self.x_e)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerMode {
    /// Correct only where `V̇ > 0`.
    Paper,
    /// Correct wherever `V̇ > −k‖x − x_e‖`.
    #[default]
    Margin,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionReport {
    pub x: Vector,
    pub u_net: Vector,
    pub vdot_before: f64,
    pub corrected: bool,
    pub delta_u: Vector,
    pub vdot_after: f64,
    pub degenerate: bool,
    pub clamped: bool,
}

/// A policy network wrapped in the minimum-norm correction that enforces
/// `V̇ ≤ −k‖x − x_e‖`.
#[derive(Clone, Debug)]
pub struct StabilizedPolicy<V, P> {
    pub value: V,
    pub policy: P,
    pub sys: SystemModel,
    pub k: f64,
    pub mode: TriggerMode,
    /// Relative threshold on `‖A‖` below which no correction is attempted;
    /// the absolute threshold is `eps · (1 + ‖∇V‖)`.
    pub degenerate_eps: f64,
}

impl<V: ValueFunction, P: Policy> StabilizedPolicy<V, P> {
    pub fn new(value: V, policy: P, sys: SystemModel, k: f64, mode: TriggerMode) -> Result<Self> {
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::InvalidArgument(format!("decrease margin k must be positive, got {k}")));
        }
        Ok(Self {
            value,
            policy,
            sys,
            k,
            mode,
            degenerate_eps: 1e-8,
        })
    }

    /// `V̇ = ∇V(x) · f(x, u)`.
    pub fn vdot(&self, x: &Vector, u: &Vector) -> Result<f64> {
        Ok(self.value.gradient(x).dot(&self.sys.eval_dynamics(x, u)?))
    }

    pub fn correct_control(&self, x: &Vector) -> Result<(Vector, CorrectionReport)> {
        let m = self.sys.m();
        let u_net = self.policy.control(x)?;
        let grad = self.value.gradient(x);
        let vdot_before = grad.dot(&self.sys.eval_dynamics(x, &u_net)?);
        let margin = self.k * (x - &self.sys.x_e).norm();
        let mut report = CorrectionReport {
            x: x.clone(),
            u_net: u_net.clone(),
            vdot_before,
            corrected: false,
            delta_u: Vector::zeros(m),
            vdot_after: vdot_before,
            degenerate: false,
            clamped: false,
        };
        let trigger = match self.mode {
            TriggerMode::Paper => vdot_before > 0.0,
            TriggerMode::Margin => vdot_before > -margin,
        };
        if !trigger {
            return Ok((u_net, report));
        }
        let eps = self.degenerate_eps * (1.0 + grad.norm());
        let delta = match self.sys.affine_parts(x)? {
            Some((_, g)) => {
                let a = g.transpose() * &grad;
                if a.norm() <= eps {
                    None
                } else {
                    Some(-&a * ((vdot_before + margin) / a.norm_squared()))
                }
            }
            None => self.general_correction(x, &grad, &u_net, margin, eps)?,
        };
        let Some(delta) = delta else {
            report.degenerate = true;
            return Ok((u_net, report));
        };
        let raw = &u_net + &delta;
        let u = self.sys.clamp_control(&raw);
        report.corrected = true;
        report.clamped = u != raw;
        report.delta_u = &u - &u_net;
        report.vdot_after = grad.dot(&self.sys.eval_dynamics(x, &u)?);
        Ok((u, report))
    }

    /// Gauss–Newton on the scalar constraint `∇V·f(x, u) = −margin` for
    /// dynamics that are not control affine, each step of minimum norm.
    fn general_correction(&self, x: &Vector, grad: &Vector, u_net: &Vector, margin: f64, eps: f64) -> Result<Option<Vector>> {
        let mut u = u_net.clone();
        for _ in 0..20 {
            let c = grad.dot(&self.sys.eval_dynamics(x, &u)?) + margin;
            if c.abs() <= 1e-12 * (1.0 + margin) {
                break;
            }
            let (_, fu) = self.sys.jacobians(x, &u)?;
            let a = fu.transpose() * grad;
            if a.norm() <= eps {
                return Ok(None);
            }
            u -= &a * (c / a.norm_squared());
        }
        Ok(Some(u - u_net))
    }
}

impl<V: ValueFunction, P: Policy> Policy for StabilizedPolicy<V, P> {
    fn control(&self, x: &Vector) -> Result<Vector> {
        Ok(self.correct_control(x)?.0)
    }

    fn control_with_report(&self, x: &Vector) -> Result<(Vector, Option<CorrectionReport>)> {
        let (u, r) = self.correct_control(x)?;
        Ok((u, Some(r)))
    }
}
