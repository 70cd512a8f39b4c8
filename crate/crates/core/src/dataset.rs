//! On-disk trajectory datasets: one CSV per trajectory plus a JSON manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lqr::RiccatiSolution;
use crate::stm::{RegionKind, RegionSpec, TargetingResult};
use crate::systems::{CostModel, Matrix, SystemModel, Vector};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One node of one optimal trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePoint {
    pub x: Vector,
    pub u_star: Vector,
    pub j_star: f64,
    pub p_star: Vector,
    pub traj_id: usize,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub file: String,
    pub rows: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub system: String,
    pub params: BTreeMap<String, f64>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    pub region: Option<RegionKind>,
    pub delta: f64,
    #[serde(rename = "T_default")]
    pub t_default: f64,
    pub step: f64,
    pub n_traj: usize,
    pub n_samples: usize,
    pub norm_mean: Vec<f64>,
    pub norm_scale: Vec<f64>,
    pub state_dim: usize,
    pub control_dim: usize,
    pub x_e: Vec<f64>,
    pub u_e: Vec<f64>,
    pub files: Vec<TrajectoryFile>,
    /// Left out by default so repeated runs produce identical manifests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<String>,
}

/// Problem data recorded alongside the trajectories.
#[derive(Clone, Debug)]
pub struct DatasetContext<'a> {
    pub sys: &'a SystemModel,
    pub cost: &'a CostModel,
    pub rs: &'a RiccatiSolution,
    pub region: Option<&'a RegionSpec>,
    pub delta: f64,
    pub t_default: f64,
    pub step: f64,
    pub generated_at: Option<String>,
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Shortest text that parses back to the same double (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn csv_header(prefixes: &[(&str, usize)], trailing: &[&str]) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for (p, k) in prefixes {
        h.extend((1..=*k).map(|i| format!("{p}_{i}")));
    }
    h.extend(trailing.iter().map(|s| s.to_string()));
    h
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-dimension mean and standard deviation (1 where a dimension is constant).
pub fn normalization(samples: &[SamplePoint]) -> (Vector, Vector) {
    let n = samples[0].x.len();
    let count = samples.len() as f64;
    let mean = samples.iter().fold(Vector::zeros(n), |acc, s| acc + &s.x) / count;
    let var = samples
        .iter()
        .fold(Vector::zeros(n), |acc, s| acc + (&s.x - &mean).map(|d| d * d))
        / count;
    let scale = var.map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 });
    (mean, scale)
}

pub fn trajectory_samples(result: &TargetingResult, traj_id: usize) -> Vec<SamplePoint> {
    let tr = &result.trajectory;
    (0..tr.len())
        .map(|k| SamplePoint {
            x: tr.states[k].clone(),
            u_star: tr.controls[k].clone(),
            j_star: tr.cost_to_go[k],
            p_star: tr.costates[k].clone(),
            traj_id,
            t: tr.times[k],
        })
        .collect()
}

/// Writes every converged result as `traj_XXXXX.csv` plus the manifest.
pub fn save_dataset(results: &[TargetingResult], ctx: &DatasetContext, dir: &Path) -> Result<DatasetManifest> {
    let kept: Vec<&TargetingResult> = results.iter().filter(|r| r.converged).collect();
    if kept.is_empty() {
        return Err(Error::InvalidArgument("no converged trajectories to save".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (n, m) = (ctx.sys.n(), ctx.sys.m());
    let header = csv_header(&[("x", n), ("u", m), ("p", n)], &["J"]);

    let mut files = Vec::with_capacity(kept.len());
    let mut all = Vec::new();
    for (id, r) in kept.iter().enumerate() {
        let samples = trajectory_samples(r, id);
        let name = format!("traj_{id:05}.csv");
        let path = dir.join(&name);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&header).map_err(|e| Error::format(&path, e))?;
        for s in &samples {
            let mut row = vec![fmt_f64(s.t)];
            row.extend(s.x.iter().chain(s.u_star.iter()).chain(s.p_star.iter()).map(|v| fmt_f64(*v)));
            row.push(fmt_f64(s.j_star));
            w.write_record(&row).map_err(|e| Error::format(&path, e))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format(&path, e))?;
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        files.push(TrajectoryFile {
            file: name,
            rows: samples.len(),
            sha256: sha256_hex(&bytes),
        });
        all.extend(samples);
    }

    let (mean, scale) = normalization(&all);
    let manifest = DatasetManifest {
        system: ctx.sys.name.clone(),
        params: ctx.sys.params.clone(),
        q: rows_of(&ctx.cost.q),
        r: rows_of(&ctx.cost.r),
        p: rows_of(&ctx.rs.p),
        region: ctx.region.map(|r| r.kind.clone()),
        delta: ctx.delta,
        t_default: ctx.t_default,
        step: ctx.step,
        n_traj: files.len(),
        n_samples: all.len(),
        norm_mean: mean.iter().copied().collect(),
        norm_scale: scale.iter().copied().collect(),
        state_dim: n,
        control_dim: m,
        x_e: ctx.sys.x_e.iter().copied().collect(),
        u_e: ctx.sys.u_e.iter().copied().collect(),
        files,
        generated_at: ctx.generated_at.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e))
}

fn parse_file(path: &PathBuf, bytes: &[u8], man: &DatasetManifest, id: usize) -> Result<Vec<SamplePoint>> {
    let (n, m) = (man.state_dim, man.control_dim);
    let width = 2 + 2 * n + m;
    let mut rd = csv::Reader::from_reader(bytes);
    let header = rd.headers().map_err(|e| Error::format(path, e))?;
    let expected = csv_header(&[("x", n), ("u", m), ("p", n)], &["J"]);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Corrupt(format!("{}: unexpected header", path.display())));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        if rec.len() != width {
            return Err(Error::Corrupt(format!("{}: row of width {}", path.display(), rec.len())));
        }
        let v: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::format(path, e)))
            .collect::<Result<_>>()?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Corrupt(format!("{}: non-finite entry", path.display())));
        }
        out.push(SamplePoint {
            t: v[0],
            x: Vector::from_column_slice(&v[1..1 + n]),
            u_star: Vector::from_column_slice(&v[1 + n..1 + n + m]),
            p_star: Vector::from_column_slice(&v[1 + n + m..1 + 2 * n + m]),
            j_star: v[width - 1],
            traj_id: id,
        });
    }
    Ok(out)
}

fn check_cost_to_go(samples: &[SamplePoint], file: &str) -> Result<()> {
    for w in samples.windows(2) {
        if w[1].t <= w[0].t {
            return Err(Error::Corrupt(format!("{file}: times not ascending")));
        }
        if w[1].j_star > w[0].j_star + 1e-12 * (1.0 + w[0].j_star.abs()) {
            return Err(Error::Corrupt(format!("{file}: cost-to-go increases at t = {}", w[1].t)));
        }
    }
    if samples.iter().any(|s| s.j_star < 0.0) {
        return Err(Error::Corrupt(format!("{file}: negative cost-to-go")));
    }
    Ok(())
}

/// Reads a dataset written by [`save_dataset`], verifying checksums, shapes
/// and the cost-to-go invariant of every trajectory.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SamplePoint>)> {
    let man = read_manifest(dir)?;
    if man.files.len() != man.n_traj {
        return Err(Error::Corrupt(format!("manifest lists {} files for {} trajectories", man.files.len(), man.n_traj)));
    }
    if man.norm_scale.iter().any(|s| !(*s > 0.0)) || man.norm_scale.len() != man.state_dim {
        return Err(Error::Corrupt("normalization scale must be positive per state".into()));
    }
    let mut all = Vec::with_capacity(man.n_samples);
    for (id, f) in man.files.iter().enumerate() {
        let path = dir.join(&f.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != f.sha256 {
            return Err(Error::Corrupt(format!("{}: checksum mismatch", f.file)));
        }
        let samples = parse_file(&path, &bytes, &man, id)?;
        if samples.len() != f.rows {
            return Err(Error::Corrupt(format!("{}: {} rows, manifest says {}", f.file, samples.len(), f.rows)));
        }
        check_cost_to_go(&samples, &f.file)?;
        all.extend(samples);
    }
    if all.len() != man.n_samples {
        return Err(Error::Corrupt(format!("{} samples, manifest says {}", all.len(), man.n_samples)));
    }
    Ok((man, all))
}

/// Splits by trajectory id. The train share is `ceil(fraction · count)`,
/// capped so that validation keeps at least one trajectory.
pub fn train_val_split(samples: &[SamplePoint], fraction: f64, seed: u64) -> Result<(Vec<SamplePoint>, Vec<SamplePoint>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Split(format!("fraction must lie in (0, 1), got {fraction}")));
    }
    let mut ids: Vec<usize> = samples.iter().map(|s| s.traj_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::Split(format!("need at least 2 trajectories, got {}", ids.len())));
    }
    let n_train = ((fraction * ids.len() as f64).ceil() as usize).clamp(1, ids.len() - 1);
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train_ids = ids[..n_train].to_vec();
    train_ids.sort_unstable();
    let (train, val) = samples
        .iter()
        .cloned()
        .partition(|s| train_ids.binary_search(&s.traj_id).is_ok());
    Ok((train, val))
}

/// Evenly spaced points on the boundary of `region`.
pub fn boundary_test_points(region: &RegionSpec, count: usize) -> Result<Vec<Vector>> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    region.kind.boundary_points(count)
}
