//! Sensitivity-guided targeting of backward-generated trajectories.
//!
//! The state transition matrix of the state/costate system maps a change of
//! the terminal condition to a change of the generated initial state. A
//! Newton-style iteration on `(x_f, T)` uses it to steer the start of each
//! trajectory onto prescribed points of a desired region.

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use std::cell::Cell;

use crate::bgoe::{sweep, BgoeOptions, NeighborhoodSpec, OptimalTrajectory};
use crate::error::{check_dim, Error, Result};
use crate::lqr::{linearize, RiccatiSolution};
use crate::systems::{CostModel, Matrix, SystemModel, Vector};

/// `Φ(T, t₀) = ∂Z(t₀)/∂Z(T)` for one propagated trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTransitionMatrix {
    pub phi: Matrix,
    pub t_start: f64,
    pub t_end: f64,
    /// 2-norm condition number of `phi`.
    pub condition: f64,
    pub warning: Option<String>,
}

const CONDITION_WARNING: f64 = 1e12;

/// Backward generation with the state transition matrix carried alongside.
pub fn propagate_with_stm(
    sys: &SystemModel,
    cost: &CostModel,
    rs: &RiccatiSolution,
    x_f: &Vector,
    horizon: f64,
    opts: &BgoeOptions,
) -> Result<(OptimalTrajectory, StateTransitionMatrix)> {
    let out = sweep(sys, cost, rs, x_f, horizon, opts, true)?;
    let phi = out.stm.expect("sweep with sensitivities returns Φ");
    let sv = phi.clone().singular_values();
    let condition = sv.max() / sv.min();
    let warning = (!(condition <= CONDITION_WARNING)).then(|| {
        format!("state transition matrix condition number {condition:.3e} exceeds {CONDITION_WARNING:e}")
    });
    if let Some(w) = &warning {
        warn!("{w}");
    }
    Ok((
        out.trajectory,
        StateTransitionMatrix {
            phi,
            t_start: horizon,
            t_end: 0.0,
            condition,
            warning,
        },
    ))
}

/// `M = [I 0] Φ [I; 2P]`, the sensitivity `∂x(t₀)/∂x_f` when the terminal
/// costate follows `2P(x_f − x_e)`.
pub fn initial_state_sensitivity(stm: &StateTransitionMatrix, rs: &RiccatiSolution) -> Matrix {
    let n = rs.p.nrows();
    let top = stm.phi.rows(0, n);
    top.columns(0, n) + top.columns(n, n) * (&rs.p * 2.0)
}

/// Update `(δx_f, δt)` such that `M δx_f + ẋ(t₀) δt ≈ dx0`, where `δt` moves
/// the start time (the new horizon is `T − δt`).
///
/// Small requests are solved directly with `δt = 0`; otherwise `δt` is chosen
/// to minimize the (neighborhood-scaled) norm of `δx_f`, the new terminal
/// state is pulled back into the closed neighborhood and `δt` is refitted to
/// what remains.
pub fn solve_target_update(
    m: &Matrix,
    xdot0: &Vector,
    dx0: &Vector,
    x_f: &Vector,
    x_e: &Vector,
    neighborhood: &NeighborhoodSpec,
) -> Result<(Vector, f64)> {
    let (dx_f, dt, _) = target_update(m, xdot0, dx0, x_f, x_e, neighborhood)?;
    Ok((dx_f, dt))
}

/// [`solve_target_update`] that also reports whether the terminal state had
/// to be pulled back into the neighborhood.
fn target_update(
    m: &Matrix,
    xdot0: &Vector,
    dx0: &Vector,
    x_f: &Vector,
    x_e: &Vector,
    neighborhood: &NeighborhoodSpec,
) -> Result<(Vector, f64, bool)> {
    let n = m.nrows();
    check_dim("sensitivity columns", n, m.ncols())?;
    check_dim("state derivative", n, xdot0.len())?;
    check_dim("state delta", n, dx0.len())?;
    check_dim("terminal state", n, x_f.len())?;
    if dx0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite target offset".into()));
    }
    if dx0.iter().all(|v| *v == 0.0) {
        return Ok((Vector::zeros(n), 0.0, false));
    }
    // work in neighborhood-scaled terminal coordinates: δx_f = S w
    let s = Matrix::from_diagonal(&neighborhood.scale);
    let ms = m * &s;
    let svd = ms.clone().svd(true, true);
    let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
    if !(smin > smax * 1e-14) {
        return Err(Error::Conditioning(format!(
            "sensitivity matrix is singular (singular values {smin:e} / {smax:e})"
        )));
    }
    let solve = |b: &Vector| -> Result<Vector> {
        svd.solve(b, 0.0)
            .map_err(|e| Error::Conditioning(e.to_string()))
    };

    let w_direct = solve(dx0)?;
    let direct = &s * &w_direct;
    if neighborhood.scaled_norm(dx0) <= 0.1 * neighborhood.delta
        && neighborhood.scaled_norm(&(x_f + &direct - x_e)) <= neighborhood.delta
    {
        return Ok((direct, 0.0, false));
    }

    // least-norm solution of [M S, ẋ₀] (w, δt) = δx₀
    let mut wide = ms.insert_column(n, 0.0);
    wide.set_column(n, xdot0);
    let sol = wide
        .svd(true, true)
        .solve(dx0, 0.0)
        .map_err(|e| Error::Conditioning(e.to_string()))?;
    let dt = sol[n];
    let dx_f = &s * sol.rows(0, n);
    let target = x_f + &dx_f;
    if neighborhood.scaled_norm(&(&target - x_e)) <= neighborhood.delta {
        return Ok((dx_f, dt, false));
    }
    let dx_f = neighborhood.project(&target, x_e) - x_f;
    let xx = xdot0.norm_squared();
    let dt = if xx > 0.0 {
        xdot0.dot(&(dx0 - m * &dx_f)) / xx
    } else {
        0.0
    };
    Ok((dx_f, dt, true))
}

/// Least-squares update with the terminal state moving tangentially to the
/// neighborhood boundary (`on_sphere`) and/or a prescribed `δt`.
#[allow(clippy::too_many_arguments)]
fn constrained_update(
    m: &Matrix,
    xdot0: &Vector,
    dx0: &Vector,
    x_f: &Vector,
    x_e: &Vector,
    neighborhood: &NeighborhoodSpec,
    on_sphere: bool,
    dt_fixed: Option<f64>,
) -> Result<(Vector, f64)> {
    let n = m.nrows();
    let s = Matrix::from_diagonal(&neighborhood.scale);
    // directions available to the scaled terminal state
    let basis = if on_sphere {
        let w = (x_f - x_e).component_div(&neighborhood.scale).normalize();
        tangent_basis(&w)
    } else {
        Matrix::identity(n, n)
    };
    let k = basis.ncols();
    let mut cols = m * &s * &basis;
    let rhs = match dt_fixed {
        Some(dt) => dx0 - xdot0 * dt,
        None => {
            cols = cols.insert_column(k, 0.0);
            cols.set_column(k, xdot0);
            dx0.clone()
        }
    };
    let sol = cols
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::Conditioning(e.to_string()))?;
    let dx_f = &s * &basis * sol.rows(0, k);
    let dt = dt_fixed.unwrap_or_else(|| sol[k]);
    Ok((dx_f, dt))
}

/// Orthonormal basis of the complement of the unit vector `w`.
fn tangent_basis(w: &Vector) -> Matrix {
    let n = w.len();
    let mut out: Vec<Vector> = Vec::with_capacity(n - 1);
    let skip = w.iamax();
    for i in (0..n).filter(|&i| i != skip) {
        let mut v = Vector::zeros(n);
        v[i] = 1.0;
        v -= w * w[i];
        for b in &out {
            let c = b.dot(&v);
            v -= b * c;
        }
        out.push(v.normalize());
    }
    Matrix::from_columns(&out)
}

/// Shape of a desired region of initial states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionKind {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

/// Desired region together with the ordered list of targets inside it.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSpec {
    pub kind: RegionKind,
    pub grid: Vec<Vector>,
    /// Largest allowed scaled distance between consecutive grid points.
    pub max_spacing: f64,
}

impl RegionKind {
    pub fn dim(&self) -> usize {
        match self {
            RegionKind::Box { lo, .. } => lo.len(),
            RegionKind::Ball { center, .. } => center.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            RegionKind::Box { lo, hi } => {
                check_dim("box upper bounds", lo.len(), hi.len())?;
                if lo.is_empty() || lo.iter().zip(hi).any(|(a, b)| !(a <= b) || !a.is_finite() || !b.is_finite()) {
                    return Err(Error::InvalidArgument("box bounds must be finite with lo ≤ hi".into()));
                }
            }
            RegionKind::Ball { center, radius } => {
                if center.is_empty() || !(*radius > 0.0 && radius.is_finite()) {
                    return Err(Error::InvalidArgument("ball needs a center and a positive radius".into()));
                }
            }
        }
        Ok(())
    }

    /// Per-dimension normalization: box half-widths (1 on degenerate
    /// dimensions) or ones for a ball.
    pub fn scale(&self) -> Vector {
        match self {
            RegionKind::Box { lo, hi } => Vector::from_iterator(
                lo.len(),
                lo.iter().zip(hi).map(|(a, b)| if b > a { 0.5 * (b - a) } else { 1.0 }),
            ),
            RegionKind::Ball { center, .. } => Vector::from_element(center.len(), 1.0),
        }
    }

    pub fn contains(&self, x: &Vector) -> bool {
        let tol = 1e-9;
        match self {
            RegionKind::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(v, (a, b))| *v >= a - tol * (1.0 + a.abs()) && *v <= b + tol * (1.0 + b.abs())),
            RegionKind::Ball { center, radius } => {
                (x - Vector::from_column_slice(center)).norm() <= radius * (1.0 + tol)
            }
        }
    }

    /// Euclidean diameter in state units.
    pub fn diameter(&self) -> f64 {
        match self {
            RegionKind::Box { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(a, b)| (b - a).powi(2))
                .sum::<f64>()
                .sqrt(),
            RegionKind::Ball { radius, .. } => 2.0 * radius,
        }
    }

    /// `count` points spread uniformly over the boundary.
    ///
    /// Balls use equal angles in the plane of the first two coordinates.
    /// Boxes must have one or two non-degenerate dimensions; in two
    /// dimensions the corners come first-class (from four points on) and the
    /// rest is spread evenly over the normalized perimeter.
    pub fn boundary_points(&self, count: usize) -> Result<Vec<Vector>> {
        if count == 0 {
            return Err(Error::InvalidArgument("boundary point count must be at least 1".into()));
        }
        match self {
            RegionKind::Ball { center, radius } => {
                if center.len() != 2 {
                    return Err(Error::InvalidArgument("ball boundary sampling needs a 2-dimensional ball".into()));
                }
                Ok((0..count)
                    .map(|i| {
                        let a = std::f64::consts::TAU * i as f64 / count as f64;
                        Vector::from_column_slice(&[center[0] + radius * a.cos(), center[1] + radius * a.sin()])
                    })
                    .collect())
            }
            RegionKind::Box { lo, hi } => {
                let active: Vec<usize> = (0..lo.len()).filter(|&i| hi[i] > lo[i]).collect();
                let base = Vector::from_iterator(lo.len(), lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)));
                let place = |coords: &[(usize, f64)]| {
                    let mut x = base.clone();
                    for &(i, v) in coords {
                        x[i] = v;
                    }
                    x
                };
                match active.as_slice() {
                    [i] => Ok((0..count)
                        .map(|k| place(&[(*i, if k % 2 == 0 { lo[*i] } else { hi[*i] })]))
                        .collect()),
                    [i, j] => {
                        // unit-square perimeter parameterized from (lo, lo) counterclockwise
                        let at = |s: f64| -> (f64, f64) {
                            let s = s.rem_euclid(4.0);
                            match s {
                                s if s < 1.0 => (s, 0.0),
                                s if s < 2.0 => (1.0, s - 1.0),
                                s if s < 3.0 => (3.0 - s, 1.0),
                                s => (0.0, 4.0 - s),
                            }
                        };
                        let params: Vec<f64> = if count >= 4 {
                            let extra = count - 4;
                            let mut per_edge = [extra / 4; 4];
                            for e in per_edge.iter_mut().take(extra % 4) {
                                *e += 1;
                            }
                            let mut out = Vec::with_capacity(count);
                            for (edge, k) in per_edge.iter().enumerate() {
                                for l in 0..=*k {
                                    out.push(edge as f64 + l as f64 / (*k + 1) as f64);
                                }
                            }
                            out
                        } else {
                            (0..count).map(|k| 4.0 * k as f64 / count as f64).collect()
                        };
                        Ok(params
                            .into_iter()
                            .map(|s| {
                                let (a, b) = at(s);
                                place(&[
                                    (*i, lo[*i] + a * (hi[*i] - lo[*i])),
                                    (*j, lo[*j] + b * (hi[*j] - lo[*j])),
                                ])
                            })
                            .collect())
                    }
                    _ => Err(Error::InvalidArgument(format!(
                        "box boundary sampling needs 1 or 2 non-degenerate dimensions, got {}",
                        active.len()
                    ))),
                }
            }
        }
    }
}

impl RegionSpec {
    /// Region with an explicit visit order; validates membership and spacing.
    pub fn with_grid(kind: RegionKind, grid: Vec<Vector>, max_spacing: f64) -> Result<Self> {
        kind.validate()?;
        if grid.is_empty() {
            return Err(Error::InvalidArgument("region grid is empty".into()));
        }
        let scale = kind.scale();
        for (i, x) in grid.iter().enumerate() {
            check_dim("grid point", kind.dim(), x.len())?;
            if !kind.contains(x) {
                return Err(Error::InvalidArgument(format!("grid point {i} lies outside the region")));
            }
        }
        for (i, w) in grid.windows(2).enumerate() {
            let d = (&w[1] - &w[0]).component_div(&scale).norm();
            if d > max_spacing * (1.0 + 1e-9) {
                return Err(Error::InvalidArgument(format!(
                    "grid points {i} and {} are {d} apart, above the spacing limit {max_spacing}",
                    i + 1
                )));
            }
        }
        Ok(Self { kind, grid, max_spacing })
    }

    /// Ball grid of exactly `count` points visited from the boundary inward.
    ///
    /// In two dimensions the points sit on concentric rings whose sizes grow
    /// with the radius, walked in alternating directions so that each ring
    /// starts next to where the previous one ended. The center itself is not
    /// a target. Other dimensions fall back to a boustrophedon lattice
    /// clipped to the ball (the count is then approximate).
    pub fn ball(center: Vector, radius: f64, count: usize) -> Result<Self> {
        let kind = RegionKind::Ball {
            center: center.as_slice().to_vec(),
            radius,
        };
        kind.validate()?;
        if count == 0 {
            return Err(Error::InvalidArgument("grid count must be at least 1".into()));
        }
        let n = center.len();
        if n != 2 {
            let res = ((count as f64 * 2f64.powi(n as i32) / unit_ball_volume(n)).powf(1.0 / n as f64)).ceil() as usize;
            let lo: Vec<f64> = center.iter().map(|c| c - radius).collect();
            let hi: Vec<f64> = center.iter().map(|c| c + radius).collect();
            let grid: Vec<Vector> = boustrophedon(&lo, &hi, &vec![res.max(2); n])
                .into_iter()
                .filter(|x| kind.contains(x) && (x - &center).norm() > 0.0)
                .collect();
            let spacing = 2.0 * radius / (res.max(2) - 1) as f64;
            return Self::with_grid(kind, grid, spacing * (n as f64).sqrt() * 1.01);
        }

        let rings = ((count as f64 / std::f64::consts::PI).sqrt().round() as usize).clamp(1, count);
        let radii: Vec<f64> = (0..rings).map(|k| radius * (rings - k) as f64 / rings as f64).collect();
        let total: f64 = radii.iter().sum();
        let mut sizes: Vec<usize> = radii
            .iter()
            .map(|r| ((count as f64 * r / total).round() as usize).max(1))
            .collect();
        // fix the total on the outer ring
        let assigned: usize = sizes.iter().sum();
        if assigned > count {
            let mut excess = assigned - count;
            for s in sizes.iter_mut().rev() {
                let take = excess.min(*s - 1);
                *s -= take;
                excess -= take;
            }
            if excess > 0 {
                sizes.truncate(count);
            }
        } else {
            sizes[0] += count - assigned;
        }

        let mut grid = Vec::with_capacity(count);
        let mut angle = 0.0;
        for (k, (&r, &size)) in radii.iter().zip(&sizes).enumerate() {
            let dir = if k % 2 == 0 { 1.0 } else { -1.0 };
            let step = std::f64::consts::TAU / size as f64;
            for j in 0..size {
                if j > 0 {
                    angle += dir * step;
                }
                grid.push(Vector::from_column_slice(&[center[0] + r * angle.cos(), center[1] + r * angle.sin()]));
            }
        }
        let ring_gap = radius / rings as f64;
        let arc = radii
            .iter()
            .zip(&sizes)
            .map(|(r, s)| if *s > 1 { 2.0 * r * (std::f64::consts::PI / *s as f64).sin() } else { 0.0 })
            .fold(0.0, f64::max);
        Self::with_grid(kind, grid, arc.max(ring_gap) * 1.01)
    }

    /// Box lattice with `resolution[i]` points along dimension `i` (1 on a
    /// degenerate dimension), visited in boustrophedon order.
    pub fn box_grid(lo: Vector, hi: Vector, resolution: &[usize]) -> Result<Self> {
        let kind = RegionKind::Box {
            lo: lo.as_slice().to_vec(),
            hi: hi.as_slice().to_vec(),
        };
        kind.validate()?;
        check_dim("grid resolution", lo.len(), resolution.len())?;
        for (i, &r) in resolution.iter().enumerate() {
            if r == 0 || (r > 1 && hi[i] == lo[i]) || (r == 1 && hi[i] > lo[i]) {
                return Err(Error::InvalidArgument(format!(
                    "resolution {r} does not fit dimension {i} of the box"
                )));
            }
        }
        let grid = boustrophedon(lo.as_slice(), hi.as_slice(), resolution);
        // normalized spacing is 2/(r−1) along each active axis
        let spacing = resolution
            .iter()
            .filter(|r| **r > 1)
            .map(|r| 2.0 / (*r - 1) as f64)
            .fold(0.0, f64::max);
        Self::with_grid(kind, grid, spacing * 1.01)
    }

    pub fn scale(&self) -> Vector {
        self.kind.scale()
    }

    pub fn scaled_distance(&self, a: &Vector, b: &Vector) -> f64 {
        (a - b).component_div(&self.scale()).norm()
    }
}

fn unit_ball_volume(n: usize) -> f64 {
    match n {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * std::f64::consts::PI / n as f64 * unit_ball_volume(n - 2),
    }
}

/// Lattice points ordered so that consecutive points differ in one index by one.
fn boustrophedon(lo: &[f64], hi: &[f64], res: &[usize]) -> Vec<Vector> {
    let n = lo.len();
    let coord = |i: usize, k: usize| {
        if res[i] == 1 {
            lo[i]
        } else {
            lo[i] + (hi[i] - lo[i]) * k as f64 / (res[i] - 1) as f64
        }
    };
    // reflected mixed-radix counter, first dimension varies slowest
    let total: usize = res.iter().product();
    let mut out = Vec::with_capacity(total);
    for idx in 0..total {
        let mut digits = vec![0usize; n];
        let mut rem = idx;
        for i in (0..n).rev() {
            digits[i] = rem % res[i];
            rem /= res[i];
        }
        // reflect each digit when the prefix above it is odd
        let mut parity = 0;
        let mut x = Vector::zeros(n);
        for i in 0..n {
            let d = if parity % 2 == 1 { res[i] - 1 - digits[i] } else { digits[i] };
            parity += digits[i];
            x[i] = coord(i, d);
        }
        out.push(x);
    }
    out
}

/// Outcome of steering one trajectory onto a desired initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetingResult {
    pub trajectory: OptimalTrajectory,
    pub achieved_x0: Vector,
    pub target_x0: Vector,
    /// Scaled distance between achieved and target initial states.
    pub residual: f64,
    pub newton_iters: usize,
    /// Updates spent on intermediate targets before the final Newton run.
    pub lead_in_iters: usize,
    pub final_t: f64,
    pub converged: bool,
    /// Residual before each accepted update, ending with the final one.
    pub residual_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetingOptions {
    pub bgoe: BgoeOptions,
    pub horizon: f64,
    pub horizon_min: f64,
    pub horizon_max: f64,
    /// Convergence tolerance in region-scaled units.
    pub tol: f64,
    pub max_iters: usize,
    /// Step halvings tried before an update is declared failed.
    pub max_halvings: usize,
    pub retry_failed: bool,
    /// Cap on backward sweeps per target (per attempt), continuation
    /// included.
    pub max_propagations: usize,
}

impl TargetingOptions {
    /// Defaults tied to the closed-loop time scale: `T = 4/|Re λ_slow|`,
    /// clipped to `[1/|Re λ_slow|, 10 T]`.
    pub fn for_problem(rs: &RiccatiSolution, bgoe: BgoeOptions) -> Self {
        let slow = rs.slowest_decay_rate();
        let horizon = 4.0 / slow;
        Self {
            bgoe,
            horizon,
            horizon_min: 1.0 / slow,
            horizon_max: 10.0 * horizon,
            tol: 1e-3,
            max_iters: 8,
            max_halvings: 5,
            retry_failed: true,
            max_propagations: 60,
        }
    }
}

#[derive(Clone)]
struct Iterate {
    x_f: Vector,
    horizon: f64,
    trajectory: OptimalTrajectory,
    m: Matrix,
}

impl Iterate {
    fn x0(&self) -> &Vector {
        self.trajectory.initial_state()
    }
}

struct Targeter<'a> {
    sys: &'a SystemModel,
    cost: &'a CostModel,
    rs: &'a RiccatiSolution,
    scale: Vector,
    opts: &'a TargetingOptions,
    /// Propagations spent on the current target.
    spent: Cell<usize>,
}

impl Targeter<'_> {
    fn exhausted(&self) -> bool {
        self.spent.get() >= self.opts.max_propagations
    }

    fn propagate(&self, x_f: &Vector, horizon: f64) -> Result<Iterate> {
        self.spent.set(self.spent.get() + 1);
        let (trajectory, stm) = propagate_with_stm(self.sys, self.cost, self.rs, x_f, horizon, &self.opts.bgoe)?;
        Ok(Iterate {
            x_f: x_f.clone(),
            horizon,
            trajectory,
            m: initial_state_sensitivity(&stm, self.rs),
        })
    }

    fn residual(&self, it: &Iterate, target: &Vector) -> f64 {
        (target - it.x0()).component_div(&self.scale).norm()
    }

    /// One damped update toward `target`; `None` when no step size improves
    /// the residual.
    /// Slides the start along the current trajectory (an exact change of
    /// horizon) to the point nearest `target`, extending the trajectory
    /// backward when the target lies beyond its start.
    fn retime(&self, it: &Iterate, target: &Vector) -> Result<Option<Iterate>> {
        let (t_lo, t_hi) = (self.opts.horizon_min, self.opts.horizon_max);
        let nearest = |traj: &OptimalTrajectory| {
            traj.states
                .iter()
                .map(|x| (target - x).component_div(&self.scale).norm())
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k)
                .unwrap_or(0)
        };
        let k = nearest(&it.trajectory);
        let horizon = if k > 0 {
            it.horizon - it.trajectory.times[k]
        } else {
            let longer = (1.5 * it.horizon).min(t_hi);
            if longer <= it.horizon {
                return Ok(None);
            }
            match self.propagate(&it.x_f, longer) {
                Ok(ext) => {
                    let k = nearest(&ext.trajectory);
                    if k == 0 {
                        return Ok(Some(ext));
                    }
                    longer - ext.trajectory.times[k]
                }
                Err(Error::Divergence { .. } | Error::Singularity { .. }) => return Ok(None),
                Err(e) => return Err(e),
            }
        }
        .clamp(t_lo, t_hi);
        if (horizon - it.horizon).abs() < 2.0 * self.opts.bgoe.step {
            return Ok(None);
        }
        match self.propagate(&it.x_f, horizon) {
            Ok(next) => Ok(Some(next)),
            Err(Error::Divergence { .. } | Error::Singularity { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// One update toward `target`: re-timing followed by a damped linear
    /// step on the terminal state. Returns the new iterate and the step
    /// fraction that was accepted, or `None` when nothing improves the
    /// residual.
    fn update(&self, it: &Iterate, target: &Vector) -> Result<Option<(Iterate, f64)>> {
        let current = self.residual(it, target);
        let retimed = if current > 10.0 * self.opts.tol {
            self.retime(it, target)?.filter(|r| self.residual(r, target) < current)
        } else {
            None
        };
        let base = retimed.as_ref().unwrap_or(it);
        if let Some(step) = self.linear_step(base, target, current)? {
            return Ok(Some(step));
        }
        Ok(retimed.map(|r| (r, 0.0)))
    }

    fn linear_step(&self, it: &Iterate, target: &Vector, current: f64) -> Result<Option<(Iterate, f64)>> {
        let sys = self.sys;
        let nb = &self.opts.bgoe.neighborhood;
        let (t_lo, t_hi) = (self.opts.horizon_min, self.opts.horizon_max);
        let x0 = it.x0();
        let dx0 = target - x0;
        let xdot0 = sys.eval_dynamics(x0, &it.trajectory.controls[0])?;
        // From the neighborhood boundary, hold the terminal state on it and
        // let the horizon absorb the rest (n − 1 tangential directions plus
        // δt). From the interior, first try keeping the horizon. When the
        // horizon limits bind, δt is pinned and the terminal state may move
        // inward again.
        let solve = |on_sphere: bool, dt: Option<f64>| {
            constrained_update(&it.m, &xdot0, &dx0, &it.x_f, &sys.x_e, nb, on_sphere, dt)
        };
        let leaves = |dx_f: &Vector| nb.scaled_norm(&(&it.x_f + dx_f - &sys.x_e)) > nb.delta;
        let boundary = nb.scaled_norm(&(&it.x_f - &sys.x_e)) > nb.delta * (1.0 - 1e-9);
        let (mut dx_f, mut dt) = (Vector::zeros(sys.n()), 0.0);
        let mut on_sphere = true;
        if !boundary {
            (dx_f, dt) = solve(false, Some(0.0))?;
            on_sphere = leaves(&dx_f);
        }
        if on_sphere {
            (dx_f, dt) = solve(true, None)?;
            let horizon = it.horizon - dt;
            if horizon < t_lo || horizon > t_hi {
                dt = it.horizon - horizon.clamp(t_lo, t_hi);
                (dx_f, _) = solve(false, Some(dt))?;
                on_sphere = leaves(&dx_f);
                if on_sphere {
                    (dx_f, _) = solve(true, Some(dt))?;
                }
            }
        }

        let mut lambda = 1.0;
        for _ in 0..=self.opts.max_halvings {
            if self.exhausted() {
                break;
            }
            let step = &it.x_f + &dx_f * lambda;
            let x_f = if on_sphere {
                nb.boundary_point(&(&step - &sys.x_e), &sys.x_e)
            } else {
                nb.project(&step, &sys.x_e)
            };
            let horizon = (it.horizon - dt * lambda).clamp(t_lo, t_hi);
            if nb.contains(&x_f, &sys.x_e) {
                match self.propagate(&x_f, horizon) {
                    Ok(next) if self.residual(&next, target) < current => {
                        return Ok(Some((next, lambda)));
                    }
                    Ok(_) | Err(Error::Divergence { .. } | Error::Singularity { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
            lambda *= 0.5;
        }
        Ok(None)
    }

    /// Newton iteration from `start`; returns the last iterate, the residual
    /// history and the number of accepted updates. With `bail`, stops as soon
    /// as an update needs heavy damping (the target is out of linear reach).
    fn solve(&self, start: Iterate, target: &Vector, max_iters: usize, bail: bool) -> Result<(Iterate, Vec<f64>, usize)> {
        let mut it = start;
        let mut history = vec![self.residual(&it, target)];
        let mut iters = 0;
        while iters < max_iters && *history.last().unwrap() > self.opts.tol && !self.exhausted() {
            match self.update(&it, target)? {
                Some((next, lambda)) => {
                    it = next;
                    iters += 1;
                    history.push(self.residual(&it, target));
                    if bail && lambda < 0.25 {
                        break;
                    }
                }
                None => break,
            }
        }
        Ok((it, history, iters))
    }

    /// Continuation toward `target` through intermediate targets at most
    /// `spacing` apart, shrinking the spacing where the map bends too much.
    /// Returns the closest iterate reached and the updates spent.
    fn approach(&self, mut it: Iterate, target: &Vector, spacing: f64) -> Result<(Iterate, usize)> {
        let mut s = spacing;
        let mut spent = 0;
        while s >= spacing / 16.0 && !self.exhausted() {
            let gap = self.residual(&it, target);
            if gap <= s {
                break;
            }
            let x0 = it.x0().clone();
            let waypoint = &x0 + (target - &x0) * (s / gap);
            let (next, _, k) = self.solve(it.clone(), &waypoint, self.opts.max_iters, true)?;
            spent += k;
            if self.residual(&next, target) < gap - 0.5 * s {
                it = next;
                s = (2.0 * s).min(spacing);
            } else {
                s *= 0.5;
            }
        }
        Ok((it, spent))
    }

    /// Newton on `target` from `start`, falling back to continuation when the
    /// target is out of linear reach. The reported iteration count is that of
    /// the final Newton run; the continuation work is returned separately.
    fn reach(&self, start: Iterate, target: &Vector, spacing: f64) -> Result<(Iterate, Vec<f64>, usize, usize)> {
        let (it, history, iters) = self.solve(start.clone(), target, self.opts.max_iters, true)?;
        if *history.last().unwrap() <= self.opts.tol {
            return Ok((it, history, iters, 0));
        }
        let from = if self.residual(&it, target) < self.residual(&start, target) { it } else { start };
        let gap = self.residual(&from, target);
        let (near, spent) = self.approach(from, target, spacing.min(0.5 * gap))?;
        let (it, history, final_iters) = self.solve(near, target, self.opts.max_iters, false)?;
        Ok((it, history, final_iters, iters + spent))
    }

    /// Short-horizon seed whose terminal state is the linearized closed-loop
    /// image of `target`, placed on the neighborhood boundary.
    fn seed(&self, target: &Vector) -> Result<Iterate> {
        let lin = linearize(self.sys, self.cost)?;
        let acl = &lin.a - &lin.b * &self.rs.k;
        let horizon = self.opts.horizon_min;
        let mut dir = expm(&(acl * horizon)) * (target - &self.sys.x_e);
        if dir.norm() == 0.0 {
            dir = Vector::from_element(self.sys.n(), 1.0);
        }
        let x_f = self.opts.bgoe.neighborhood.boundary_point(&dir, &self.sys.x_e);
        self.propagate(&x_f, horizon)
    }

    fn from_result(&self, r: &TargetingResult) -> Result<Iterate> {
        self.propagate(&r.trajectory.terminal_state, r.trajectory.terminal_time)
    }
}

fn finish(outcome: (Iterate, Vec<f64>, usize, usize), target: &Vector, tol: f64) -> TargetingResult {
    let (it, history, iters, lead_in_iters) = outcome;
    let residual = *history.last().unwrap();
    TargetingResult {
        lead_in_iters,
        achieved_x0: it.x0().clone(),
        target_x0: target.clone(),
        residual,
        newton_iters: iters,
        final_t: it.horizon,
        converged: residual <= tol,
        residual_history: history,
        trajectory: it.trajectory,
    }
}

/// Steers one trajectory per grid point of `region` onto that point.
///
/// Grid points are visited in order and each warm-starts from the previous
/// success. Points inside the terminal neighborhood are skipped (trajectories
/// cannot start there by construction). Failures are retried once from the
/// nearest successful point, then once more from the three nearest final
/// successes, and are otherwise reported with their residual;
/// the returned list holds one entry per targeted point.
pub fn generate_covering_dataset(
    sys: &SystemModel,
    cost: &CostModel,
    rs: &RiccatiSolution,
    region: &RegionSpec,
    opts: &TargetingOptions,
) -> Result<Vec<TargetingResult>> {
    check_dim("region", sys.n(), region.kind.dim())?;
    if region.grid.is_empty() {
        return Err(Error::InvalidArgument("region grid is empty".into()));
    }
    let targeter = Targeter {
        sys,
        cost,
        rs,
        scale: region.scale(),
        opts,
        spent: Cell::new(0),
    };
    let nb = &opts.bgoe.neighborhood;
    let targets: Vec<&Vector> = region
        .grid
        .iter()
        .filter(|x| nb.scaled_norm(&(*x - &sys.x_e)) > nb.delta)
        .collect();
    if targets.len() < region.grid.len() {
        info!(
            "skipping {} grid points inside the terminal neighborhood",
            region.grid.len() - targets.len()
        );
    }
    let Some(first) = targets.first() else {
        return Ok(Vec::new());
    };

    let seed = targeter.seed(first)?;
    let mut warm = targeter.approach(seed, first, region.max_spacing)?.0;
    let mut results: Vec<TargetingResult> = Vec::with_capacity(targets.len());
    for (idx, target) in targets.iter().enumerate() {
        targeter.spent.set(0);
        let outcome = targeter.reach(warm.clone(), target, region.max_spacing)?;
        if *outcome.1.last().unwrap() <= opts.tol {
            // warm start the next point from the latest success
            warm = outcome.0.clone();
        }
        let mut result = finish(outcome, target, opts.tol);
        if !result.converged && opts.retry_failed {
            let neighbor = results
                .iter()
                .filter(|r| r.converged)
                .min_by(|a, b| {
                    let da = region.scaled_distance(&a.achieved_x0, target);
                    let db = region.scaled_distance(&b.achieved_x0, target);
                    da.total_cmp(&db)
                });
            if let Some(neighbor) = neighbor {
                targeter.spent.set(0);
                let start = targeter.from_result(neighbor)?;
                let outcome = targeter.reach(start, target, region.max_spacing)?;
                let residual = *outcome.1.last().unwrap();
                if residual < result.residual {
                    if residual <= opts.tol {
                        warm = outcome.0.clone();
                    }
                    result = finish(outcome, target, opts.tol);
                }
            }
        }
        info!(
            "target {idx}: residual {:.3e}, iterations {}, T {:.4}{}",
            result.residual,
            result.newton_iters,
            result.final_t,
            if result.converged { "" } else { " (failed)" }
        );
        debug!("warm start x_f = {:?}", warm.x_f.as_slice());
        results.push(result);
    }

    // Later (mostly inner) successes give the failures new starting points.
    if opts.retry_failed {
        for i in 0..results.len() {
            if results[i].converged {
                continue;
            }
            let target = results[i].target_x0.clone();
            let mut near: Vec<&TargetingResult> = results.iter().filter(|r| r.converged).collect();
            near.sort_by(|a, b| {
                let da = region.scaled_distance(&a.achieved_x0, &target);
                let db = region.scaled_distance(&b.achieved_x0, &target);
                da.total_cmp(&db)
            });
            let starts: Vec<Iterate> = near
                .iter()
                .take(3)
                .map(|r| targeter.from_result(r))
                .collect::<Result<_>>()?;
            for start in starts {
                targeter.spent.set(0);
                let outcome = targeter.reach(start, &target, region.max_spacing)?;
                if *outcome.1.last().unwrap() < results[i].residual {
                    results[i] = finish(outcome, &target, opts.tol);
                }
                if results[i].converged {
                    info!("target {i}: recovered, residual {:.3e}", results[i].residual);
                    break;
                }
            }
        }
    }
    Ok(results)
}

/// Matrix exponential by scaling and squaring of a Taylor series.
pub(crate) fn expm(a: &Matrix) -> Matrix {
    let norm = a.abs().row_sum().max();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(squarings);
    let n = a.nrows();
    let mut term = Matrix::identity(n, n);
    let mut sum = Matrix::identity(n, n);
    for k in 1..=20 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}
