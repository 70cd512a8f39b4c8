//! Backward generation of optimal trajectories for infinite-horizon regulation.
//!
//! Starting from a terminal state `x_f` close to the equilibrium, where the
//! Riccati solution gives both the remaining cost `x_fᵀ P x_f` and the
//! costate `2 P x_f`, the state/costate system is integrated backward in
//! time. Every point of the result lies on an optimal trajectory, so the
//! recorded controls and accumulated costs are optimal labels.

use crate::error::{check_dim, Error, Result};
use crate::lqr::{terminal_costate, RiccatiSolution};
use crate::ode::{rk4_step, step_count};
use crate::systems::{CostModel, Matrix, SystemModel, Vector};

/// Augmented state/costate pair, packed as `Z = (x, p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HamiltonianState {
    pub x: Vector,
    pub p: Vector,
}

impl HamiltonianState {
    pub fn new(x: Vector, p: Vector) -> Self {
        Self { x, p }
    }

    pub fn pack(&self) -> Vector {
        let n = self.x.len();
        Vector::from_fn(2 * n, |i, _| if i < n { self.x[i] } else { self.p[i - n] })
    }

    pub fn unpack(z: &Vector) -> Self {
        let n = z.len() / 2;
        Self {
            x: z.rows(0, n).into_owned(),
            p: z.rows(n, n).into_owned(),
        }
    }
}

/// Punctured neighborhood `0 < ‖(x − x_e) ⊘ scale‖₂ ≤ delta` of the equilibrium.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodSpec {
    pub delta: f64,
    pub scale: Vector,
}

impl NeighborhoodSpec {
    pub fn ball(delta: f64, n: usize) -> Result<Self> {
        Self::ellipsoid(delta, Vector::from_element(n, 1.0))
    }

    pub fn ellipsoid(delta: f64, scale: Vector) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("neighborhood radius must be positive, got {delta}")));
        }
        if scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("neighborhood scales must be positive".into()));
        }
        Ok(Self { delta, scale })
    }

    pub fn scaled_norm(&self, dx: &Vector) -> f64 {
        dx.component_div(&self.scale).norm()
    }

    /// True for `x ∈ 𝓑` (the equilibrium itself excluded).
    pub fn contains(&self, x: &Vector, x_e: &Vector) -> bool {
        let d = self.scaled_norm(&(x - x_e));
        d > 0.0 && d <= self.delta * (1.0 + 1e-12)
    }

    /// Rescales `x` toward `x_e` so it lies in the closed neighborhood.
    pub fn project(&self, x: &Vector, x_e: &Vector) -> Vector {
        let dx = x - x_e;
        let d = self.scaled_norm(&dx);
        if d <= self.delta {
            x.clone()
        } else {
            x_e + dx * (self.delta / d)
        }
    }

    /// Point on the boundary in direction `dir` (any nonzero vector).
    pub fn boundary_point(&self, dir: &Vector, x_e: &Vector) -> Vector {
        let d = self.scaled_norm(dir);
        x_e + dir * (self.delta / d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimalTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub controls: Vec<Vector>,
    pub costates: Vec<Vector>,
    pub cost_to_go: Vec<f64>,
    pub terminal_state: Vector,
    pub terminal_time: f64,
}

impl OptimalTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn initial_state(&self) -> &Vector {
        &self.states[0]
    }

    /// Hamiltonian evaluated at every node.
    pub fn hamiltonian_values(&self, sys: &SystemModel, cost: &CostModel) -> Result<Vec<f64>> {
        self.states
            .iter()
            .zip(&self.costates)
            .zip(&self.controls)
            .map(|((x, p), u)| Ok(cost.running_cost(x, u) + p.dot(&sys.eval_dynamics(x, u)?)))
            .collect()
    }

    /// Checks the monotone, non-negative cost-to-go invariant.
    pub fn check_cost_to_go(&self) -> Result<()> {
        for (i, w) in self.cost_to_go.windows(2).enumerate() {
            if w[1] > w[0] + 1e-12 * (1.0 + w[0].abs()) {
                return Err(Error::Corrupt(format!(
                    "cost-to-go increases at node {} ({} -> {})",
                    i + 1,
                    w[0],
                    w[1]
                )));
            }
        }
        if let Some(j) = self.cost_to_go.iter().find(|j| !(**j >= 0.0)) {
            return Err(Error::Corrupt(format!("negative or non-finite cost-to-go {j}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            grad_tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BgoeOptions {
    pub step: f64,
    pub neighborhood: NeighborhoodSpec,
    /// Abort when `‖x − x_e‖₂` exceeds this bound.
    pub divergence_bound: f64,
    pub newton: NewtonOptions,
}

/// The control Hamiltonian `H(x, p, u) = r(x, u) + pᵀ f(x, u)` of one problem.
#[derive(Clone, Copy, Debug)]
pub struct Hamiltonian<'a> {
    pub sys: &'a SystemModel,
    pub cost: &'a CostModel,
    pub newton: NewtonOptions,
}

impl<'a> Hamiltonian<'a> {
    pub fn new(sys: &'a SystemModel, cost: &'a CostModel) -> Self {
        Self {
            sys,
            cost,
            newton: NewtonOptions::default(),
        }
    }

    pub fn value_at(&self, x: &Vector, p: &Vector, u: &Vector) -> Result<f64> {
        Ok(self.cost.running_cost(x, u) + p.dot(&self.sys.eval_dynamics(x, u)?))
    }

    /// Pointwise minimizer of `H` over the admissible control box.
    pub fn minimize(&self, x: &Vector, p: &Vector, warm: Option<&Vector>) -> Result<Vector> {
        check_dim("state", self.sys.n(), x.len())?;
        check_dim("costate", self.sys.n(), p.len())?;
        if let Some((_, g)) = self.sys.affine_parts(x)? {
            let rhs = g.transpose() * p * 0.5;
            let diagonal = self.cost.r_is_diagonal();
            let step = if diagonal {
                rhs.component_div(&self.cost.r.diagonal())
            } else {
                self.cost
                    .r
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::InvalidArgument("R is not positive definite".into()))?
                    .solve(&rhs)
            };
            let unconstrained = &self.cost.u_e - step;
            let clamped = self.sys.clamp_control(&unconstrained);
            if clamped == unconstrained || diagonal {
                return Ok(clamped);
            }
            return self.projected_newton(x, p, &clamped);
        }
        let start = warm.cloned().unwrap_or_else(|| self.cost.u_e.clone());
        self.projected_newton(x, p, &self.sys.clamp_control(&start))
    }

    fn grad_u(&self, x: &Vector, p: &Vector, u: &Vector) -> Result<Vector> {
        let (_, fu) = self.sys.jacobians(x, u)?;
        Ok(self.cost.grad_u(x, u) + fu.transpose() * p)
    }

    fn hess_uu(&self, x: &Vector, p: &Vector, u: &Vector) -> Result<Matrix> {
        let m = self.sys.m();
        let mut h = &self.cost.r * 2.0;
        if self.sys.is_affine() {
            return Ok(h);
        }
        for j in 0..m {
            let d = 1e-6 * u[j].abs().max(1.0);
            let (mut up, mut um) = (u.clone(), u.clone());
            up[j] += d;
            um[j] -= d;
            let (_, fup) = self.sys.jacobians(x, &up)?;
            let (_, fum) = self.sys.jacobians(x, &um)?;
            let col = (fup.transpose() * p - fum.transpose() * p) / (2.0 * d);
            for i in 0..m {
                h[(i, j)] += col[i];
            }
        }
        Ok((&h + h.transpose()) * 0.5)
    }

    fn projected_newton(&self, x: &Vector, p: &Vector, start: &Vector) -> Result<Vector> {
        let (lo, hi) = (&self.sys.u_lo, &self.sys.u_hi);
        let m = self.sys.m();
        let mut u = start.clone();
        let mut g = self.grad_u(x, p, &u)?;
        let scale = 1.0 + g.amax();
        for _ in 0..self.newton.max_iters {
            let active: Vec<bool> = (0..m)
                .map(|i| (u[i] <= lo[i] && g[i] > 0.0) || (u[i] >= hi[i] && g[i] < 0.0))
                .collect();
            let pg = Vector::from_fn(m, |i, _| if active[i] { 0.0 } else { g[i] });
            if pg.amax() <= self.newton.grad_tol * scale {
                return Ok(u);
            }
            let free: Vec<usize> = (0..m).filter(|i| !active[*i]).collect();
            let h = self.hess_uu(x, p, &u)?;
            let hff = Matrix::from_fn(free.len(), free.len(), |i, j| h[(free[i], free[j])]);
            let gf = Vector::from_fn(free.len(), |i, _| g[free[i]]);
            let df = match hff.cholesky() {
                Some(c) => -c.solve(&gf),
                None => -gf,
            };
            let mut dir = Vector::zeros(m);
            for (k, &i) in free.iter().enumerate() {
                dir[i] = df[k];
            }
            let phi0 = self.value_at(x, p, &u)?;
            let mut alpha = 1.0;
            loop {
                let trial = self.sys.clamp_control(&(&u + &dir * alpha));
                let phi = self.value_at(x, p, &trial)?;
                if phi <= phi0 + 1e-4 * g.dot(&(&trial - &u)) || alpha < 1e-12 {
                    u = trial;
                    break;
                }
                alpha *= 0.5;
            }
            g = self.grad_u(x, p, &u)?;
        }
        Err(Error::Optimization {
            iters: self.newton.max_iters,
            grad_norm: g.norm(),
        })
    }

    /// `(ẋ, ṗ, u*)` with `ẋ = f(x,u*)`, `ṗ = −(∂r/∂x + (∂f/∂x)ᵀ p)`.
    pub fn rhs(&self, x: &Vector, p: &Vector, warm: Option<&Vector>) -> Result<(Vector, Vector, Vector)> {
        let u = self.minimize(x, p, warm)?;
        let xdot = self.sys.eval_dynamics(x, &u)?;
        let (fx, _) = self.sys.jacobians(x, &u)?;
        let pdot = -(self.cost.grad_x(x, &u) + fx.transpose() * p);
        Ok((xdot, pdot, u))
    }

    /// Jacobian `F_Z` of the state/costate right-hand side. Assembled from
    /// analytic second derivatives for control-affine systems that provide
    /// them; otherwise central differences on [`Hamiltonian::rhs`].
    pub fn jacobian(&self, x: &Vector, p: &Vector, u: &Vector) -> Result<Matrix> {
        if self.sys.is_affine() {
            if let Some((sxx, sxu)) = self.sys.costate_hessians(x, u, p)? {
                return self.assemble_jacobian(x, u, &sxx, &sxu);
            }
        }
        self.jacobian_fd(x, p)
    }

    fn assemble_jacobian(&self, x: &Vector, u: &Vector, sxx: &Matrix, sxu: &Matrix) -> Result<Matrix> {
        let (n, m) = (self.sys.n(), self.sys.m());
        let (fx, fu) = self.sys.jacobians(x, u)?;
        // sensitivities of the minimizer over the channels not pinned at a bound
        let free: Vec<usize> = (0..m)
            .filter(|&i| u[i] > self.sys.u_lo[i] && u[i] < self.sys.u_hi[i])
            .collect();
        let (ux, up) = if free.len() == m && self.cost.r_is_diagonal() {
            let gain = self.cost.r.diagonal().map(|r| -0.5 / r);
            let mut ux = sxu.transpose();
            let mut up = fu.transpose();
            for i in 0..m {
                ux.row_mut(i).scale_mut(gain[i]);
                up.row_mut(i).scale_mut(gain[i]);
            }
            (ux, up)
        } else {
            let mut ux = Matrix::zeros(m, n);
            let mut up = Matrix::zeros(m, n);
            if !free.is_empty() {
                let huu = &self.cost.r * 2.0;
                let hff = Matrix::from_fn(free.len(), free.len(), |i, j| huu[(free[i], free[j])]);
                let chol = hff
                    .cholesky()
                    .ok_or_else(|| Error::InvalidArgument("R is not positive definite".into()))?;
                let bx = Matrix::from_fn(free.len(), n, |i, j| sxu[(j, free[i])]);
                let bp = Matrix::from_fn(free.len(), n, |i, j| fu[(j, free[i])]);
                let sx = -chol.solve(&bx);
                let sp = -chol.solve(&bp);
                for (k, &i) in free.iter().enumerate() {
                    ux.set_row(i, &sx.row(k));
                    up.set_row(i, &sp.row(k));
                }
            }
            (ux, up)
        };
        let mut fz = Matrix::zeros(2 * n, 2 * n);
        fz.view_mut((0, 0), (n, n)).copy_from(&(&fx + &fu * &ux));
        fz.view_mut((0, n), (n, n)).copy_from(&(&fu * &up));
        fz.view_mut((n, 0), (n, n))
            .copy_from(&(-(&self.cost.q * 2.0 + sxx + sxu * &ux)));
        fz.view_mut((n, n), (n, n)).copy_from(&(-(fx.transpose() + sxu * &up)));
        Ok(fz)
    }

    /// Central-difference `F_Z` (relative step `1e-6`).
    pub fn jacobian_fd(&self, x: &Vector, p: &Vector) -> Result<Matrix> {
        let n = self.sys.n();
        let z = HamiltonianState::new(x.clone(), p.clone()).pack();
        let mut fz = Matrix::zeros(2 * n, 2 * n);
        for j in 0..2 * n {
            let h = 1e-6 * z[j].abs().max(1.0);
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[j] += h;
            zm[j] -= h;
            let a = HamiltonianState::unpack(&zp);
            let b = HamiltonianState::unpack(&zm);
            let (xa, pa, _) = self.rhs(&a.x, &a.p, None)?;
            let (xb, pb, _) = self.rhs(&b.x, &b.p, None)?;
            for i in 0..n {
                fz[(i, j)] = (xa[i] - xb[i]) / (2.0 * h);
                fz[(n + i, j)] = (pa[i] - pb[i]) / (2.0 * h);
            }
        }
        Ok(fz)
    }
}

/// `argmin_u r(x,u) + pᵀ f(x,u)` over the admissible controls.
pub fn minimize_hamiltonian(sys: &SystemModel, cost: &CostModel, x: &Vector, p: &Vector) -> Result<Vector> {
    Hamiltonian::new(sys, cost).minimize(x, p, None)
}

/// Time derivative of the state/costate pair under the minimizing control.
pub fn hamiltonian_rhs(sys: &SystemModel, cost: &CostModel, z: &HamiltonianState) -> Result<HamiltonianState> {
    let (xdot, pdot, _) = Hamiltonian::new(sys, cost).rhs(&z.x, &z.p, None)?;
    Ok(HamiltonianState::new(xdot, pdot))
}

/// `H(x, p, u*)`.
pub fn hamiltonian_value(sys: &SystemModel, cost: &CostModel, z: &HamiltonianState) -> Result<f64> {
    let ham = Hamiltonian::new(sys, cost);
    let u = ham.minimize(&z.x, &z.p, None)?;
    ham.value_at(&z.x, &z.p, &u)
}

/// Output of one backward sweep, with the flattened sensitivity when requested.
pub(crate) struct Sweep {
    pub trajectory: OptimalTrajectory,
    pub stm: Option<Matrix>,
}

/// Integrates `(x, p, J)` and optionally `Φ` backward from `t = T` to `0` with
/// fixed-step RK4 on a uniform grid.
pub(crate) fn sweep(
    sys: &SystemModel,
    cost: &CostModel,
    rs: &RiccatiSolution,
    x_f: &Vector,
    horizon: f64,
    opts: &BgoeOptions,
    with_stm: bool,
) -> Result<Sweep> {
    let n = sys.n();
    check_dim("terminal state", n, x_f.len())?;
    if !opts.neighborhood.contains(x_f, &sys.x_e) {
        return Err(Error::Domain(format!(
            "scaled distance {} from the equilibrium, radius {}",
            opts.neighborhood.scaled_norm(&(x_f - &sys.x_e)),
            opts.neighborhood.delta
        )));
    }
    // A zero horizon is only meaningful for sensitivities (Φ(T, T) = I).
    let horizon_ok = horizon.is_finite() && (horizon > 0.0 || (with_stm && horizon == 0.0));
    if !horizon_ok {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }
    if !(opts.step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {}", opts.step)));
    }
    let ham = Hamiltonian {
        sys,
        cost,
        newton: opts.newton,
    };
    let steps = if horizon == 0.0 { 0 } else { step_count(horizon, opts.step) };
    let h = if steps == 0 { 0.0 } else { horizon / steps as f64 };
    let dim = 2 * n + 1 + if with_stm { 4 * n * n } else { 0 };

    let p_f = terminal_costate(rs, x_f)?;
    let mut y = Vector::zeros(dim);
    y.rows_mut(0, n).copy_from(x_f);
    y.rows_mut(n, n).copy_from(&p_f);
    y[2 * n] = rs.quadratic_value(x_f);
    if with_stm {
        for i in 0..2 * n {
            y[2 * n + 1 + i * 2 * n + i] = 1.0;
        }
    }

    let mut warm: Option<Vector> = None;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut costates = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps + 1);
    let mut cost_to_go = Vec::with_capacity(steps + 1);

    let mut record = |y: &Vector, t: f64, warm: &mut Option<Vector>| -> Result<()> {
        let x = y.rows(0, n).into_owned();
        let p = y.rows(n, n).into_owned();
        let u = ham.minimize(&x, &p, warm.as_ref())?;
        *warm = Some(u.clone());
        times.push(t);
        states.push(x);
        costates.push(p);
        controls.push(u);
        cost_to_go.push(y[2 * n]);
        Ok(())
    };
    record(&y, horizon, &mut warm)?;

    for k in 0..steps {
        let mut stage_warm = warm.clone();
        y = rk4_step(&y, -h, |y| {
            let x = y.rows(0, n).into_owned();
            let p = y.rows(n, n).into_owned();
            let (xdot, pdot, u) = ham.rhs(&x, &p, stage_warm.as_ref())?;
            let mut dy = Vector::zeros(dim);
            dy.rows_mut(0, n).copy_from(&xdot);
            dy.rows_mut(n, n).copy_from(&pdot);
            dy[2 * n] = -cost.running_cost(&x, &u);
            if with_stm {
                let fz = ham.jacobian(&x, &p, &u)?;
                let phi = Matrix::from_column_slice(2 * n, 2 * n, &y.as_slice()[2 * n + 1..]);
                let dphi = fz * phi;
                dy.rows_mut(2 * n + 1, 4 * n * n).copy_from_slice(dphi.as_slice());
            }
            stage_warm = Some(u);
            Ok(dy)
        })?;
        let t = if k + 1 == steps {
            0.0
        } else {
            horizon - (k + 1) as f64 * h
        };
        let distance = (y.rows(0, n) - &sys.x_e).norm();
        if !(distance <= opts.divergence_bound) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { t, distance });
        }
        record(&y, t, &mut warm)?;
    }

    let stm = with_stm.then(|| Matrix::from_column_slice(2 * n, 2 * n, &y.as_slice()[2 * n + 1..]));
    times.reverse();
    states.reverse();
    costates.reverse();
    controls.reverse();
    cost_to_go.reverse();
    Ok(Sweep {
        trajectory: OptimalTrajectory {
            times,
            states,
            controls,
            costates,
            cost_to_go,
            terminal_state: x_f.clone(),
            terminal_time: horizon,
        },
        stm,
    })
}

/// One optimal trajectory ending at `x_f` after `horizon` seconds.
pub fn backward_generate(
    sys: &SystemModel,
    cost: &CostModel,
    rs: &RiccatiSolution,
    x_f: &Vector,
    horizon: f64,
    opts: &BgoeOptions,
) -> Result<OptimalTrajectory> {
    Ok(sweep(sys, cost, rs, x_f, horizon, opts, false)?.trajectory)
}

/// Largest `|H(x_f, 2P(x_f − x_e))| / r(x_f, u_LQR(x_f))` over `samples`
/// boundary points of the neighborhood; measures how well the quadratic
/// terminal value approximates the true one there.
pub fn terminal_hamiltonian_ratio(
    sys: &SystemModel,
    cost: &CostModel,
    rs: &RiccatiSolution,
    neighborhood: &NeighborhoodSpec,
    directions: &[Vector],
) -> Result<f64> {
    let ham = Hamiltonian::new(sys, cost);
    let mut worst: f64 = 0.0;
    for dir in directions {
        let x_f = neighborhood.boundary_point(dir, &sys.x_e);
        let p = terminal_costate(rs, &x_f)?;
        let u = ham.minimize(&x_f, &p, None)?;
        let h = ham.value_at(&x_f, &p, &u)?.abs();
        let u_lqr = sys.clamp_control(&(&rs.u_e - &rs.k * (&x_f - &sys.x_e)));
        worst = worst.max(h / cost.running_cost(&x_f, &u_lqr));
    }
    Ok(worst)
}
