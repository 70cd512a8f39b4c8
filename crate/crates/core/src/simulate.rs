//! Closed-loop rollouts and policy comparison.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bgoe::NeighborhoodSpec;
use crate::dataset::{csv_header, fmt_f64};
use crate::error::{check_dim, Error, Result};
use crate::ode::rk4_step;
use crate::stable_policy::CorrectionReport;
use crate::systems::{CostModel, SystemModel, Vector};

/// State-feedback control law.
pub trait Policy {
    fn control(&self, x: &Vector) -> Result<Vector>;

    /// The control together with the correction diagnostics, when the policy
    /// has any.
    fn control_with_report(&self, x: &Vector) -> Result<(Vector, Option<CorrectionReport>)> {
        Ok((self.control(x)?, None))
    }
}

impl<P: Policy + ?Sized> Policy for &P {
    fn control(&self, x: &Vector) -> Result<Vector> {
        (**self).control(x)
    }
    fn control_with_report(&self, x: &Vector) -> Result<(Vector, Option<CorrectionReport>)> {
        (**self).control_with_report(x)
    }
}

/// Adapts a closure into a [`Policy`].
#[derive(Clone, Copy, Debug)]
pub struct FnPolicy<F>(pub F);

impl<F: Fn(&Vector) -> Result<Vector>> Policy for FnPolicy<F> {
    fn control(&self, x: &Vector) -> Result<Vector> {
        (self.0)(x)
    }
}

/// Uses `terminal` inside the neighborhood of `x_e` and `outer` elsewhere;
/// without a neighborhood it is just `outer`.
#[derive(Clone, Debug)]
pub struct TerminalHandoff<P, Q> {
    pub outer: P,
    pub terminal: Q,
    pub x_e: Vector,
    pub neighborhood: Option<NeighborhoodSpec>,
}

impl<P: Policy, Q: Policy> TerminalHandoff<P, Q> {
    fn inside(&self, x: &Vector) -> bool {
        self.neighborhood
            .as_ref()
            .is_some_and(|nb| nb.scaled_norm(&(x - &self.x_e)) <= nb.delta)
    }
}

impl<P: Policy, Q: Policy> Policy for TerminalHandoff<P, Q> {
    fn control(&self, x: &Vector) -> Result<Vector> {
        if self.inside(x) {
            self.terminal.control(x)
        } else {
            self.outer.control(x)
        }
    }

    fn control_with_report(&self, x: &Vector) -> Result<(Vector, Option<CorrectionReport>)> {
        if self.inside(x) {
            self.terminal.control_with_report(x)
        } else {
            self.outer.control_with_report(x)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutOptions {
    pub t_end: f64,
    pub step: f64,
    /// Per-state tolerance on `|x_i − x_e,i|`.
    pub conv_tol: Vec<f64>,
    /// How long the tolerance must hold before the rollout stops early.
    pub settle_time: f64,
    pub divergence_radius: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CorrectionStats {
    pub corrected: usize,
    pub degenerate: usize,
    pub clamped: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClosedLoopResult {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    /// Control held over `[t_k, t_{k+1})`; the last entry repeats the final
    /// evaluation.
    pub controls: Vec<Vector>,
    pub cost: Vec<f64>,
    pub accumulated_cost: f64,
    pub converged: bool,
    pub corrections: CorrectionStats,
    pub reports: Vec<CorrectionReport>,
}

fn within(tol: &[f64], dx: &Vector) -> bool {
    dx.iter().zip(tol).all(|(d, t)| d.abs() <= *t)
}

/// Forward RK4 under a zero-order hold, integrating the running cost
/// alongside the state.
pub fn rollout(
    sys: &SystemModel,
    cost: &CostModel,
    policy: &dyn Policy,
    x0: &Vector,
    opts: &RolloutOptions,
) -> Result<ClosedLoopResult> {
    let n = sys.n();
    check_dim("initial state", n, x0.len())?;
    check_dim("convergence tolerance", n, opts.conv_tol.len())?;
    if !(opts.t_end > 0.0 && opts.step > 0.0) {
        return Err(Error::InvalidArgument("t_end and step must be positive".into()));
    }
    let steps = crate::ode::step_count(opts.t_end, opts.step);
    let h = opts.t_end / steps as f64;
    let mut res = ClosedLoopResult::default();
    let mut y = Vector::zeros(n + 1);
    y.rows_mut(0, n).copy_from(x0);
    let mut settled_since: Option<f64> = None;

    for k in 0..=steps {
        let t = k as f64 * h;
        let x = y.rows(0, n).into_owned();
        let (u, report) = policy.control_with_report(&x)?;
        if let Some(r) = report {
            res.corrections.corrected += r.corrected as usize;
            res.corrections.degenerate += r.degenerate as usize;
            res.corrections.clamped += r.clamped as usize;
            res.reports.push(r);
        }
        res.times.push(t);
        res.states.push(x.clone());
        res.controls.push(u.clone());
        res.cost.push(y[n]);

        let dx = &x - &sys.x_e;
        if within(&opts.conv_tol, &dx) {
            let since = *settled_since.get_or_insert(t);
            if t - since >= opts.settle_time - 1e-9 {
                break;
            }
        } else {
            settled_since = None;
        }
        if k == steps {
            break;
        }
        y = rk4_step(&y, h, |y| {
            let x = y.rows(0, n).into_owned();
            let mut dy = Vector::zeros(n + 1);
            dy.rows_mut(0, n).copy_from(&sys.eval_dynamics(&x, &u)?);
            dy[n] = cost.running_cost(&x, &u);
            Ok(dy)
        })?;
        let dist = (y.rows(0, n) - &sys.x_e).norm();
        if !(dist <= opts.divergence_radius) {
            res.accumulated_cost = y[n];
            return Err(Error::RolloutDiverged {
                t: t + h,
                partial: Box::new(res),
            });
        }
    }
    res.accumulated_cost = *res.cost.last().unwrap();
    res.converged = within(&opts.conv_tol, &(res.states.last().unwrap() - &sys.x_e));
    Ok(res)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub idx: usize,
    pub x0: Vec<f64>,
    pub j_learned: f64,
    pub j_lqr: f64,
    pub abs_improvement: f64,
    pub rel_improvement: f64,
    pub learned_converged: bool,
    pub baseline_converged: bool,
    /// Set when either rollout failed; the costs are then infinite.
    pub failure: Option<String>,
}

impl ComparisonRow {
    pub fn learned_wins(&self) -> bool {
        self.failure.is_none() && self.learned_converged && self.j_learned < self.j_lqr
    }
}

/// One rollout per policy per point, identical options for both.
pub fn compare_policies(
    sys: &SystemModel,
    cost: &CostModel,
    learned: &dyn Policy,
    baseline: &dyn Policy,
    points: &[Vector],
    opts: &RolloutOptions,
) -> Vec<ComparisonRow> {
    points
        .iter()
        .enumerate()
        .map(|(idx, x0)| {
            let a = rollout(sys, cost, learned, x0, opts);
            let b = rollout(sys, cost, baseline, x0, opts);
            let failure = match (&a, &b) {
                (Err(e), _) => Some(format!("learned: {e}")),
                (_, Err(e)) => Some(format!("baseline: {e}")),
                _ => None,
            };
            let j = |r: &Result<ClosedLoopResult>| r.as_ref().map_or(f64::INFINITY, |r| r.accumulated_cost);
            let (jl, jb) = (j(&a), j(&b));
            let abs = jb - jl;
            ComparisonRow {
                idx,
                x0: x0.iter().copied().collect(),
                j_learned: jl,
                j_lqr: jb,
                abs_improvement: abs,
                rel_improvement: if failure.is_none() && jb > 0.0 { abs / jb } else { 0.0 },
                learned_converged: a.as_ref().is_ok_and(|r| r.converged),
                baseline_converged: b.as_ref().is_ok_and(|r| r.converged),
                failure,
            }
        })
        .collect()
}

fn write_rows(path: &Path, header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).map_err(|e| Error::format(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::format(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `t,x_1..x_n,u_1..u_m,J_accum`.
pub fn export_profiles(result: &ClosedLoopResult, path: &Path) -> Result<()> {
    if result.times.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let (n, m) = (result.states[0].len(), result.controls[0].len());
    let rows = (0..result.times.len()).map(|k| {
        let mut row = vec![fmt_f64(result.times[k])];
        row.extend(result.states[k].iter().chain(result.controls[k].iter()).map(|v| fmt_f64(*v)));
        row.push(fmt_f64(result.cost[k]));
        row
    });
    write_rows(path, csv_header(&[("x", n), ("u", m)], &["J_accum"]), rows)
}

/// `t,x_1..x_n,corrected,degenerate,vdot_before,vdot_after`, one row per
/// controller evaluation.
pub fn export_corrections(result: &ClosedLoopResult, path: &Path) -> Result<()> {
    let n = result.states.first().map_or(0, |x| x.len());
    let rows = result.reports.iter().zip(&result.times).map(|(r, t)| {
        let mut row = vec![fmt_f64(*t)];
        row.extend(r.x.iter().map(|v| fmt_f64(*v)));
        row.push((r.corrected as u8).to_string());
        row.push((r.degenerate as u8).to_string());
        row.push(fmt_f64(r.vdot_before));
        row.push(fmt_f64(r.vdot_after));
        row
    });
    write_rows(
        path,
        csv_header(&[("x", n)], &["corrected", "degenerate", "vdot_before", "vdot_after"]),
        rows,
    )
}

/// `idx,x0_1..x0_n,J_learned,J_lqr,abs_impr,rel_impr`.
pub fn export_comparison(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    let n = rows.first().map_or(0, |r| r.x0.len());
    let mut header = vec!["idx".to_string()];
    header.extend((1..=n).map(|i| format!("x0_{i}")));
    header.extend(["J_learned", "J_lqr", "abs_impr", "rel_impr"].map(String::from));
    let body = rows.iter().map(|r| {
        let mut row = vec![r.idx.to_string()];
        row.extend(r.x0.iter().map(|v| fmt_f64(*v)));
        row.extend([r.j_learned, r.j_lqr, r.abs_improvement, r.rel_improvement].map(fmt_f64));
        row
    });
    write_rows(path, header, body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqr::{lqr_policy, solve_for_system};
    use crate::systems::make_benchmark;
    use std::collections::BTreeMap;

    fn nl2_opts(step: f64) -> RolloutOptions {
        RolloutOptions {
            t_end: 10.0,
            step,
            conv_tol: vec![1e-3; 2],
            settle_time: 1.0,
            divergence_radius: 72.0,
        }
    }

    fn analytic() -> FnPolicy<impl Fn(&Vector) -> Result<Vector>> {
        FnPolicy(|x: &Vector| Ok(Vector::from_element(1, -((2.0 * x[0]).cos() + 2.0) * x[1])))
    }

    #[test]
    fn equilibrium_start_costs_nothing() {
        let (sys, cost) = make_benchmark("nl2", &BTreeMap::new()).unwrap();
        let r = rollout(&sys, &cost, &analytic(), &Vector::zeros(2), &nl2_opts(1e-2)).unwrap();
        assert!(r.converged);
        assert!(r.accumulated_cost <= 1e-10);
        assert!((r.times.last().unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn analytic_policy_cost_equals_value() {
        let (sys, cost) = make_benchmark("nl2", &BTreeMap::new()).unwrap();
        let x0 = Vector::from_column_slice(&[3.6, 0.0]);
        let r = rollout(&sys, &cost, &analytic(), &x0, &nl2_opts(1e-3)).unwrap();
        assert!(r.converged);
        assert!((r.accumulated_cost - 6.48).abs() <= 0.01 * 6.48, "{}", r.accumulated_cost);
        assert!(r.cost.windows(2).all(|w| w[1] >= w[0]));

        let rs = solve_for_system(&sys, &cost).unwrap();
        let lqr = rollout(&sys, &cost, &lqr_policy(&rs, &sys), &x0, &nl2_opts(1e-3)).unwrap();
        assert!(lqr.accumulated_cost >= r.accumulated_cost);
    }

    #[test]
    fn identical_policies_tie() {
        let (sys, cost) = make_benchmark("nl2", &BTreeMap::new()).unwrap();
        let p = analytic();
        let pts = [Vector::from_column_slice(&[1.0, -2.0])];
        let rows = compare_policies(&sys, &cost, &p, &p, &pts, &nl2_opts(1e-2));
        assert_eq!(rows[0].abs_improvement, 0.0);
        assert!(!rows[0].learned_wins());
    }

    #[test]
    fn divergence_carries_partial_trajectory() {
        let (sys, cost) = make_benchmark("nl2", &BTreeMap::new()).unwrap();
        let push = FnPolicy(|_: &Vector| Ok(Vector::from_element(1, 50.0)));
        let mut o = nl2_opts(1e-2);
        o.divergence_radius = 5.0;
        match rollout(&sys, &cost, &push, &Vector::from_column_slice(&[1.0, 0.0]), &o) {
            Err(Error::RolloutDiverged { partial, .. }) => assert!(!partial.times.is_empty()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn profile_headers() {
        let dir = tempfile::tempdir().unwrap();
        let r2 = ClosedLoopResult {
            times: vec![0.0],
            states: vec![Vector::zeros(2)],
            controls: vec![Vector::zeros(1)],
            cost: vec![0.0],
            ..Default::default()
        };
        let path = dir.path().join("a.csv");
        export_profiles(&r2, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,x_1,x_2,u_1,J_accum");

        let r6 = ClosedLoopResult {
            times: vec![0.0],
            states: vec![Vector::zeros(6)],
            controls: vec![Vector::zeros(3)],
            cost: vec![0.0],
            ..Default::default()
        };
        export_profiles(&r6, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,x_1,x_2,x_3,x_4,x_5,x_6,u_1,u_2,u_3,J_accum");

        assert!(export_profiles(&ClosedLoopResult::default(), &path).is_err());
    }
}
