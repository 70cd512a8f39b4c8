//! Run configuration and the generate → train → simulate → compare stages.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::bgoe::{BgoeOptions, NeighborhoodSpec, NewtonOptions};
use crate::dataset::{boundary_test_points, load_dataset, save_dataset, train_val_split, DatasetContext, DatasetManifest};
use crate::error::{check_dim, Error, Result};
use crate::lqr::{lqr_policy, solve_for_system, LqrPolicy, RiccatiSolution};
use crate::neural::{
    load_checkpoint, save_checkpoint, train, EpochRecord, NetworkSetup, Normalizer, PolicyNetwork, TrainConfig,
    TrainOutput, ValueNetwork,
};
use crate::simulate::{
    compare_policies, export_comparison, export_corrections, export_profiles, rollout, ClosedLoopResult,
    ComparisonRow, RolloutOptions, TerminalHandoff,
};
use crate::stable_policy::{StabilizedPolicy, TriggerMode};
use crate::stm::{generate_covering_dataset, RegionSpec, TargetingOptions, TargetingResult};
use crate::systems::{make_benchmark, CostModel, SystemModel, Vector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionConfig {
    /// `points` grid points on concentric rings (2-D) or a clipped lattice.
    Ball { center: Vec<f64>, radius: f64, points: usize },
    /// Boustrophedon lattice with `resolution[i]` points per dimension;
    /// dimensions with `lo == hi` are held fixed.
    Box { lo: Vec<f64>, hi: Vec<f64>, resolution: Vec<usize> },
}

impl RegionConfig {
    pub fn build(&self) -> Result<RegionSpec> {
        match self {
            RegionConfig::Ball { center, radius, points } => {
                RegionSpec::ball(Vector::from_column_slice(center), *radius, *points)
            }
            RegionConfig::Box { lo, hi, resolution } => {
                RegionSpec::box_grid(Vector::from_column_slice(lo), Vector::from_column_slice(hi), resolution)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// Neighborhood radius δ (in scaled units when `scale` is set).
    pub delta: f64,
    pub scale: Option<Vec<f64>>,
    pub step: f64,
    /// Seed horizon; defaults to `4/|Re λ_slow|`.
    pub horizon: Option<f64>,
    pub divergence_bound: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            delta: 0.05,
            scale: None,
            step: 1e-3,
            horizon: None,
            divergence_bound: 1e3,
            tol: 1e-3,
            max_iters: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StableConfig {
    pub k: f64,
    pub mode: TriggerMode,
}

impl Default for StableConfig {
    fn default() -> Self {
        Self {
            k: 0.1,
            mode: TriggerMode::Margin,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub t_end: f64,
    pub step: f64,
    /// Per-state convergence tolerance; a single entry applies to all states.
    pub conv_tol: Vec<f64>,
    pub settle_time: f64,
    /// Divergence radius; defaults to 10× the region diameter.
    pub divergence_radius: Option<f64>,
    pub test_points: usize,
    /// Switch to the LQR law inside the terminal neighborhood.
    pub terminal_lqr: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            t_end: 10.0,
            step: 1e-3,
            conv_tol: vec![1e-3],
            settle_time: 1.0,
            divergence_radius: None,
            test_points: 20,
            terminal_lqr: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub system: String,
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
    pub region: RegionConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_split")]
    pub split_fraction: f64,
    #[serde(default)]
    pub stable: StableConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_split() -> f64 {
    0.8
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.generation;
        let s = &self.simulate;
        let positive = [g.delta, g.step, g.divergence_bound, g.tol, self.stable.k, s.t_end, s.step]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite());
        if !positive || g.max_iters == 0 || s.test_points == 0 || s.settle_time < 0.0 {
            return Err(Error::InvalidArgument("generation/simulation options must be positive".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("split_fraction {} not in (0, 1)", self.split_fraction)));
        }
        if s.conv_tol.is_empty() || s.conv_tol.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::InvalidArgument("conv_tol entries must be positive".into()));
        }
        self.train.validate()
    }

    /// The training configuration with the root seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

/// Everything derived from a configuration before any stage runs.
pub struct Problem {
    pub sys: SystemModel,
    pub cost: CostModel,
    pub rs: RiccatiSolution,
    pub region: RegionSpec,
    pub targeting: TargetingOptions,
}

impl Problem {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let (sys, cost) = make_benchmark(&cfg.system, &cfg.overrides)?;
        let rs = solve_for_system(&sys, &cost)?;
        let region = cfg.region.build()?;
        check_dim("region", sys.n(), region.kind.dim())?;
        let g = &cfg.generation;
        let neighborhood = match &g.scale {
            Some(s) => NeighborhoodSpec::ellipsoid(g.delta, Vector::from_column_slice(s))?,
            None => NeighborhoodSpec::ball(g.delta, sys.n())?,
        };
        check_dim("neighborhood scale", sys.n(), neighborhood.scale.len())?;
        let bgoe = BgoeOptions {
            step: g.step,
            neighborhood,
            divergence_bound: g.divergence_bound,
            newton: NewtonOptions::default(),
        };
        let mut targeting = TargetingOptions::for_problem(&rs, bgoe);
        if let Some(t) = g.horizon {
            targeting.horizon = t;
            targeting.horizon_max = 10.0 * t;
        }
        targeting.tol = g.tol;
        targeting.max_iters = g.max_iters;
        Ok(Self {
            sys,
            cost,
            rs,
            region,
            targeting,
        })
    }

    pub fn rollout_options(&self, cfg: &RunConfig) -> RolloutOptions {
        let s = &cfg.simulate;
        let n = self.sys.n();
        let conv_tol = if s.conv_tol.len() == 1 { vec![s.conv_tol[0]; n] } else { s.conv_tol.clone() };
        RolloutOptions {
            t_end: s.t_end,
            step: s.step,
            conv_tol,
            settle_time: s.settle_time,
            divergence_radius: s.divergence_radius.unwrap_or(10.0 * self.region.kind.diameter()),
        }
    }

    pub fn test_points(&self, cfg: &RunConfig) -> Result<Vec<Vector>> {
        boundary_test_points(&self.region, cfg.simulate.test_points)
    }

    pub fn lqr(&self) -> LqrPolicy {
        lqr_policy(&self.rs, &self.sys)
    }

    pub fn network_setup(&self, manifest: &DatasetManifest) -> NetworkSetup {
        NetworkSetup {
            norm: Normalizer {
                mean: manifest.norm_mean.clone(),
                scale: manifest.norm_scale.clone(),
            },
            x_e: self.sys.x_e.clone(),
            u_e: self.sys.u_e.clone(),
            bounds: self.sys.is_bounded().then(|| (self.sys.u_lo.clone(), self.sys.u_hi.clone())),
        }
    }

    pub fn stabilized(
        &self,
        cfg: &RunConfig,
        value: ValueNetwork,
        policy: PolicyNetwork,
    ) -> Result<StabilizedPolicy<ValueNetwork, PolicyNetwork>> {
        StabilizedPolicy::new(value, policy, self.sys.clone(), cfg.stable.k, cfg.stable.mode)
    }

    /// The corrected learned policy as used in rollouts, with the optional
    /// LQR hand-off near the equilibrium.
    pub fn closed_loop(&self, cfg: &RunConfig, value: ValueNetwork, policy: PolicyNetwork) -> Result<ClosedLoop> {
        let sp = self.stabilized(cfg, value, policy)?;
        Ok(TerminalHandoff {
            outer: sp,
            terminal: self.lqr(),
            x_e: self.sys.x_e.clone(),
            neighborhood: cfg.simulate.terminal_lqr.then(|| self.targeting.bgoe.neighborhood.clone()),
        })
    }
}

pub type ClosedLoop = TerminalHandoff<StabilizedPolicy<ValueNetwork, PolicyNetwork>, LqrPolicy>;

#[derive(Clone, Debug)]
pub struct GenerateReport {
    pub attempted: usize,
    pub converged: usize,
    pub mean_residual: f64,
    pub results: Vec<TargetingResult>,
    pub manifest: DatasetManifest,
}

impl GenerateReport {
    pub fn failure_fraction(&self) -> f64 {
        1.0 - self.converged as f64 / self.attempted.max(1) as f64
    }
}

pub const DATASET_DIR: &str = "dataset";
pub const VALUE_CHECKPOINT: &str = "value.json";
pub const POLICY_CHECKPOINT: &str = "policy.json";

/// Runs the covering sweep and writes `dataset/` and `coverage.csv` under `out`.
pub fn generate(cfg: &RunConfig, problem: &Problem, out: &Path) -> Result<GenerateReport> {
    let results = generate_covering_dataset(&problem.sys, &problem.cost, &problem.rs, &problem.region, &problem.targeting)?;
    let converged = results.iter().filter(|r| r.converged).count();
    let mean_residual = results.iter().map(|r| r.residual).sum::<f64>() / results.len().max(1) as f64;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ctx = DatasetContext {
        sys: &problem.sys,
        cost: &problem.cost,
        rs: &problem.rs,
        region: Some(&problem.region),
        delta: cfg.generation.delta,
        t_default: problem.targeting.horizon,
        step: cfg.generation.step,
        generated_at: None,
    };
    let manifest = save_dataset(&results, &ctx, &out.join(DATASET_DIR))?;
    write_coverage(&results, &out.join("coverage.csv"))?;
    info!("coverage {converged}/{} (mean residual {mean_residual:.3e})", results.len());
    Ok(GenerateReport {
        attempted: results.len(),
        converged,
        mean_residual,
        results,
        manifest,
    })
}

fn write_coverage(results: &[TargetingResult], path: &Path) -> Result<()> {
    use crate::dataset::fmt_f64;
    let n = results.first().map_or(0, |r| r.target_x0.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (1..=n).map(|i| format!("target_{i}")).collect();
    header.extend((1..=n).map(|i| format!("achieved_{i}")));
    header.extend(["residual", "newton_iters", "T", "converged"].map(String::from));
    w.write_record(&header).map_err(|e| Error::format(path, e))?;
    for r in results {
        let mut row: Vec<String> = r.target_x0.iter().chain(r.achieved_x0.iter()).map(|v| fmt_f64(*v)).collect();
        row.push(fmt_f64(r.residual));
        row.push(r.newton_iters.to_string());
        row.push(fmt_f64(r.final_t));
        row.push((r.converged as u8).to_string());
        w.write_record(&row).map_err(|e| Error::format(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Trains on `dataset_dir` and writes both checkpoints and `history.csv`.
pub fn train_stage(cfg: &RunConfig, problem: &Problem, dataset_dir: &Path, out: &Path) -> Result<TrainOutput> {
    let (manifest, samples) = load_dataset(dataset_dir)?;
    let (tr, va) = train_val_split(&samples, cfg.split_fraction, cfg.seed)?;
    let output = train(&tr, &va, &problem.network_setup(&manifest), &cfg.train_config())?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_checkpoint(&output.value.to_checkpoint(), &out.join(VALUE_CHECKPOINT))?;
    save_checkpoint(&output.policy.to_checkpoint(), &out.join(POLICY_CHECKPOINT))?;
    write_history(&output.history, &out.join("history.csv"))?;
    Ok(output)
}

fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for rec in history {
        w.serialize(rec).map_err(|e| Error::format(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_networks(dir: &Path) -> Result<(ValueNetwork, PolicyNetwork)> {
    Ok((
        ValueNetwork::from_checkpoint(&load_checkpoint(&dir.join(VALUE_CHECKPOINT))?)?,
        PolicyNetwork::from_checkpoint(&load_checkpoint(&dir.join(POLICY_CHECKPOINT))?)?,
    ))
}

/// Rolls out the corrected policy from each `x0`, writing
/// `profiles/profile_XX.csv` and `profiles/corrections_XX.csv`.
pub fn simulate_stage(
    cfg: &RunConfig,
    problem: &Problem,
    checkpoints: &Path,
    x0s: &[Vector],
    out: &Path,
) -> Result<Vec<Result<ClosedLoopResult>>> {
    let (value, policy) = load_networks(checkpoints)?;
    let sp = problem.closed_loop(cfg, value, policy)?;
    let opts = problem.rollout_options(cfg);
    let dir = out.join("profiles");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut results = Vec::with_capacity(x0s.len());
    for (i, x0) in x0s.iter().enumerate() {
        let r = rollout(&problem.sys, &problem.cost, &sp, x0, &opts);
        let written = match &r {
            Ok(res) => Some(res),
            Err(Error::RolloutDiverged { partial, .. }) => Some(partial.as_ref()),
            Err(_) => None,
        };
        if let Some(res) = written.filter(|res| !res.times.is_empty()) {
            export_profiles(res, &dir.join(format!("profile_{i:02}.csv")))?;
            export_corrections(res, &dir.join(format!("corrections_{i:02}.csv")))?;
        }
        results.push(r);
    }
    Ok(results)
}

/// Learned (corrected) policy against LQR on the boundary test points;
/// writes `comparison.csv`.
pub fn compare_stage(cfg: &RunConfig, problem: &Problem, checkpoints: &Path, out: &Path) -> Result<Vec<ComparisonRow>> {
    let (value, policy) = load_networks(checkpoints)?;
    let sp = problem.closed_loop(cfg, value, policy)?;
    let rows = compare_policies(
        &problem.sys,
        &problem.cost,
        &sp,
        &problem.lqr(),
        &problem.test_points(cfg)?,
        &problem.rollout_options(cfg),
    );
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    export_comparison(&rows, &out.join("comparison.csv"))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_fill_in() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"system": "nl2", "region": {"kind": "ball", "center": [0, 0], "radius": 3.6, "points": 20}}"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.hidden, vec![64, 64]);
        assert_eq!(cfg.simulate.test_points, 20);
        let p = Problem::new(&cfg).unwrap();
        assert_eq!(p.region.grid.len(), 20);
        assert_eq!(p.rollout_options(&cfg).conv_tol, vec![1e-3; 2]);
    }

    #[test]
    fn bad_split_is_rejected() {
        let mut cfg: RunConfig = serde_json::from_str(
            r#"{"system": "nl2", "region": {"kind": "ball", "center": [0, 0], "radius": 1, "points": 5}}"#,
        )
        .unwrap();
        cfg.split_fraction = 1.0;
        assert!(cfg.validate().is_err());
    }
}
