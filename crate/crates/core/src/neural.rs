//! Feed-forward networks for the value function and the policy, with manual
//! reverse-mode differentiation and an Adam trainer.

use std::fs;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SamplePoint;
use crate::error::{check_dim, Error, Result};
use crate::simulate::Policy;
use crate::systems::{Matrix, Vector};

/// Lower bound added to the softplus diagonal of the Cholesky factor.
pub const DIAG_FLOOR: f64 = 1e-6;

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Multilayer perceptron with tanh hidden layers and a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer widths {widths:?}")));
        }
        let weights = widths
            .windows(2)
            .map(|w| {
                let a = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Matrix::from_fn(w[1], w[0], |_, _| rng.gen_range(-a..a))
            })
            .collect();
        let biases = widths[1..].iter().map(|&k| Vector::zeros(k)).collect();
        Ok(Self { weights, biases })
    }

    pub fn zeros(widths: &[usize]) -> Self {
        Self {
            weights: widths.windows(2).map(|w| Matrix::zeros(w[1], w[0])).collect(),
            biases: widths[1..].iter().map(|&k| Vector::zeros(k)).collect(),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.weights[0].ncols()];
        w.extend(self.weights.iter().map(|m| m.nrows()));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Activations of every layer for a batch stored column-wise; the first
    /// entry is the input, the last the output.
    fn forward_batch(&self, z: &Matrix) -> Vec<Matrix> {
        let last = self.weights.len() - 1;
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(z.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut pre = w * acts.last().unwrap();
            for mut col in pre.column_iter_mut() {
                col += b;
            }
            if l < last {
                pre.apply(|v| *v = v.tanh());
            }
            acts.push(pre);
        }
        acts
    }

    /// Back-propagates `d_out` (gradient w.r.t. the outputs), accumulating
    /// parameter gradients into `grads` when given. Returns the gradient
    /// w.r.t. the inputs.
    fn backward_batch(&self, acts: &[Matrix], d_out: Matrix, mut grads: Option<&mut Mlp>) -> Matrix {
        let layers = self.weights.len();
        let mut delta = d_out;
        for l in (0..layers).rev() {
            if l + 1 < layers {
                delta.zip_apply(&acts[l + 1], |d, a| *d *= 1.0 - a * a);
            }
            if let Some(g) = grads.as_deref_mut() {
                g.weights[l].gemm(1.0, &delta, &acts[l].transpose(), 1.0);
                g.biases[l] += delta.column_sum();
            }
            delta = self.weights[l].transpose() * &delta;
        }
        delta
    }

    pub fn forward(&self, z: &Vector) -> Vector {
        let z = Matrix::from_column_slice(z.len(), 1, z.as_slice());
        self.forward_batch(&z).pop().unwrap().column(0).into_owned()
    }

    fn zip_params(&mut self, other: &Mlp, mut f: impl FnMut(&mut f64, f64)) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.zip_apply(b, &mut f);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.zip_apply(b, &mut f);
        }
    }
}

/// Affine input normalization `z = (x − mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    fn apply_batch(&self, xs: &Matrix) -> Matrix {
        Matrix::from_fn(xs.nrows(), xs.ncols(), |i, j| (xs[(i, j)] - self.mean[i]) / self.scale[i])
    }

    fn validate(&self, n: usize) -> Result<()> {
        check_dim("normalization mean", n, self.mean.len())?;
        check_dim("normalization scale", n, self.scale.len())?;
        if self.scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("normalization scale must be positive".into()));
        }
        Ok(())
    }
}

/// `V(x) = (x − x_e)ᵀ L Lᵀ (x − x_e)` with `L(x)` lower triangular, read
/// row by row from the trunk output; the diagonal goes through softplus.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueNetwork {
    pub trunk: Mlp,
    pub x_e: Vector,
    pub norm: Normalizer,
}

/// Per-sample quantities of one batched value evaluation.
struct ValueBatch {
    acts: Vec<Matrix>,
    values: Vec<f64>,
    /// ∂V/∂(trunk output), column per sample.
    dv_dout: Matrix,
    /// ∂V/∂x through the explicit `x − x_e` factors only.
    dv_dx_direct: Matrix,
}

impl ValueNetwork {
    pub fn new(n: usize, hidden: &[usize], norm: Normalizer, x_e: Vector, rng: &mut impl Rng) -> Result<Self> {
        check_dim("equilibrium", n, x_e.len())?;
        norm.validate(n)?;
        let mut widths = vec![n];
        widths.extend_from_slice(hidden);
        widths.push(n * (n + 1) / 2);
        Ok(Self {
            trunk: Mlp::new(&widths, rng)?,
            x_e,
            norm,
        })
    }

    pub fn n(&self) -> usize {
        self.x_e.len()
    }

    fn factor_from(&self, o: &[f64]) -> Matrix {
        let n = self.n();
        let mut l = Matrix::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in 0..=i {
                l[(i, j)] = if i == j { softplus(o[k]) + DIAG_FLOOR } else { o[k] };
                k += 1;
            }
        }
        l
    }

    pub fn cholesky_factor(&self, x: &Vector) -> Matrix {
        let z = self.norm.apply_batch(&Matrix::from_column_slice(x.len(), 1, x.as_slice()));
        let out = self.trunk.forward_batch(&z).pop().unwrap();
        self.factor_from(out.as_slice())
    }

    fn eval_batch(&self, xs: &Matrix) -> ValueBatch {
        let n = self.n();
        let acts = self.trunk.forward_batch(&self.norm.apply_batch(xs));
        let out = acts.last().unwrap();
        let b = xs.ncols();
        let mut values = Vec::with_capacity(b);
        let mut dv_dout = Matrix::zeros(out.nrows(), b);
        let mut dv_dx_direct = Matrix::zeros(n, b);
        for s in 0..b {
            let o = out.column(s);
            let l = self.factor_from(o.as_slice());
            let d = xs.column(s) - &self.x_e;
            let w = l.transpose() * &d;
            values.push(w.norm_squared());
            dv_dx_direct.set_column(s, &(&l * &w * 2.0));
            // ∂V/∂L_ij = 2 d_i w_j
            let mut k = 0;
            for i in 0..n {
                for j in 0..=i {
                    let g = 2.0 * d[i] * w[j];
                    dv_dout[(k, s)] = if i == j { g * sigmoid(o[k]) } else { g };
                    k += 1;
                }
            }
        }
        ValueBatch {
            acts,
            values,
            dv_dout,
            dv_dx_direct,
        }
    }

    /// Input gradients `∂V/∂x` for a batch, column per sample.
    fn gradient_batch(&self, vb: &ValueBatch) -> Matrix {
        let dz = self.trunk.backward_batch(&vb.acts, vb.dv_dout.clone(), None);
        let mut g = vb.dv_dx_direct.clone();
        for (i, s) in self.norm.scale.iter().enumerate() {
            let row = dz.row(i) / *s;
            let mut gr = g.row_mut(i);
            gr += row;
        }
        g
    }

    pub fn value(&self, x: &Vector) -> f64 {
        self.eval_batch(&Matrix::from_column_slice(x.len(), 1, x.as_slice())).values[0]
    }

    /// Exact `∂V/∂x`, including the dependence of `L` on `x`.
    pub fn gradient(&self, x: &Vector) -> Vector {
        let vb = self.eval_batch(&Matrix::from_column_slice(x.len(), 1, x.as_slice()));
        self.gradient_batch(&vb).column(0).into_owned()
    }
}

/// `u(x) = u_e + o(x)`, or squashed into `[u_lo, u_hi]` through a logistic
/// shifted so that a zero trunk output still gives `u_e`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNetwork {
    pub trunk: Mlp,
    pub u_e: Vector,
    pub norm: Normalizer,
    pub bounds: Option<(Vector, Vector)>,
}

impl PolicyNetwork {
    pub fn new(
        n: usize,
        hidden: &[usize],
        norm: Normalizer,
        u_e: Vector,
        bounds: Option<(Vector, Vector)>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        norm.validate(n)?;
        if let Some((lo, hi)) = &bounds {
            check_dim("lower bound", u_e.len(), lo.len())?;
            check_dim("upper bound", u_e.len(), hi.len())?;
            for i in 0..u_e.len() {
                if !(lo[i] < u_e[i] && u_e[i] < hi[i] && lo[i].is_finite() && hi[i].is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "squashing needs finite bounds strictly around u_e on channel {i}"
                    )));
                }
            }
        }
        let mut widths = vec![n];
        widths.extend_from_slice(hidden);
        widths.push(u_e.len());
        Ok(Self {
            trunk: Mlp::new(&widths, rng)?,
            u_e,
            norm,
            bounds,
        })
    }

    /// Controls and `∂u/∂o` for a batch of trunk outputs.
    fn head(&self, out: &Matrix) -> (Matrix, Matrix) {
        match &self.bounds {
            None => (
                Matrix::from_fn(out.nrows(), out.ncols(), |i, j| self.u_e[i] + out[(i, j)]),
                Matrix::from_element(out.nrows(), out.ncols(), 1.0),
            ),
            Some((lo, hi)) => {
                let mut u = out.clone();
                let mut du = out.clone();
                for i in 0..out.nrows() {
                    let w = hi[i] - lo[i];
                    let r = (self.u_e[i] - lo[i]) / w;
                    let shift = (r / (1.0 - r)).ln();
                    for j in 0..out.ncols() {
                        let s = sigmoid(out[(i, j)] + shift);
                        u[(i, j)] = lo[i] + w * s;
                        du[(i, j)] = w * s * (1.0 - s);
                    }
                }
                (u, du)
            }
        }
    }

    pub fn control(&self, x: &Vector) -> Vector {
        let z = self.norm.apply_batch(&Matrix::from_column_slice(x.len(), 1, x.as_slice()));
        let out = self.trunk.forward_batch(&z).pop().unwrap();
        self.head(&out).0.column(0).into_owned()
    }
}

impl Policy for PolicyNetwork {
    fn control(&self, x: &Vector) -> Result<Vector> {
        check_dim("state", self.norm.mean.len(), x.len())?;
        Ok(PolicyNetwork::control(self, x))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate factor applied when validation loss stalls.
    pub lr_decay: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub w_v: f64,
    pub w_u: f64,
    pub w_grad: f64,
    /// Keep every `stride`-th node of each trajectory.
    pub stride: usize,
    /// When set, thin by path length instead: a node is kept once the
    /// normalized state has travelled this far since the last kept one.
    /// Trajectories linger near the equilibrium, so time-uniform thinning
    /// starves the outer region.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arc_spacing: Option<f64>,
    /// Policy samples are weighted by `1 + c‖(x − x_e)/scale‖²`; the far
    /// part of each trajectory is short and otherwise fitted loosely.
    pub policy_radial_weight: f64,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 256,
            lr: 1e-3,
            lr_decay: 0.5,
            plateau_patience: 50,
            early_stop_patience: 150,
            seed: 0,
            w_v: 1.0,
            w_u: 1.0,
            w_grad: 0.1,
            stride: 20,
            arc_spacing: None,
            policy_radial_weight: 0.0,
            hidden: vec![64, 64],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.lr >= 0.0
            && self.lr.is_finite()
            && self.lr_decay > 0.0
            && self.lr_decay <= 1.0
            && self.stride > 0
            && self.arc_spacing.is_none_or(|d| d > 0.0 && d.is_finite())
            && [self.w_v, self.w_u, self.w_grad, self.policy_radial_weight].iter().all(|w| *w >= 0.0 && w.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid training configuration {self:?}")))
        }
    }
}

/// What the networks need to know about the problem.
#[derive(Clone, Debug)]
pub struct NetworkSetup {
    pub norm: Normalizer,
    pub x_e: Vector,
    pub u_e: Vector,
    /// Squash policy outputs into these bounds.
    pub bounds: Option<(Vector, Vector)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_value_mse: f64,
    pub val_policy_mse: f64,
    pub val_gradient_mse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub value: ValueNetwork,
    pub policy: PolicyNetwork,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

struct Adam {
    m: Mlp,
    v: Mlp,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &Mlp) -> Self {
        let widths = net.widths();
        Self {
            m: Mlp::zeros(&widths),
            v: Mlp::zeros(&widths),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut Mlp, grad: &Mlp, lr: f64) {
        self.t += 1;
        self.m.zip_params(grad, |m, g| *m = Self::B1 * *m + (1.0 - Self::B1) * g);
        self.v.zip_params(grad, |v, g| *v = Self::B2 * *v + (1.0 - Self::B2) * g * g);
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let mut update = self.m.clone();
        update.zip_params(&self.v, |m, v| *m = lr * (*m / c1) / ((v / c2).sqrt() + Self::EPS));
        net.zip_params(&update, |p, u| *p -= u);
    }
}

/// Batched training data.
struct Batch {
    x: Matrix,
    j: Vec<f64>,
    u: Matrix,
    p: Matrix,
}

impl Batch {
    fn gather(samples: &[&SamplePoint]) -> Self {
        let b = samples.len();
        let n = samples[0].x.len();
        let m = samples[0].u_star.len();
        Self {
            x: Matrix::from_fn(n, b, |i, s| samples[s].x[i]),
            j: samples.iter().map(|s| s.j_star).collect(),
            u: Matrix::from_fn(m, b, |i, s| samples[s].u_star[i]),
            p: Matrix::from_fn(n, b, |i, s| samples[s].p_star[i]),
        }
    }
}

/// Target variances used to put the loss terms on a common footing.
#[derive(Clone, Debug)]
struct LossScales {
    j: f64,
    u: Vec<f64>,
    p: f64,
}

impl LossScales {
    fn from(samples: &[&SamplePoint]) -> Self {
        let var = |vals: &mut dyn Iterator<Item = f64>| {
            let v: Vec<f64> = vals.collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
            if var > 1e-12 {
                var
            } else {
                1.0
            }
        };
        let n = samples[0].x.len();
        let m = samples[0].u_star.len();
        let p = (0..n).map(|i| var(&mut samples.iter().map(|s| s.p_star[i]))).sum::<f64>() / n as f64;
        Self {
            j: var(&mut samples.iter().map(|s| s.j_star)),
            u: (0..m).map(|i| var(&mut samples.iter().map(|s| s.u_star[i]))).collect(),
            p,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct LossParts {
    value_mse: f64,
    policy_mse: f64,
    gradient_mse: f64,
    total: f64,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    scales: LossScales,
}

impl Trainer<'_> {
    fn combine(&self, sq_v: f64, sq_u: &[f64], weighted_u: &[f64], sq_g: f64, b: usize, n: usize) -> LossParts {
        let bf = b as f64;
        let policy: f64 = weighted_u.iter().zip(&self.scales.u).map(|(s, v)| s / bf / v).sum();
        let value_mse = sq_v / bf;
        let gradient_mse = sq_g / (bf * n as f64);
        LossParts {
            value_mse,
            policy_mse: sq_u.iter().sum::<f64>() / (bf * sq_u.len() as f64),
            gradient_mse,
            total: self.cfg.w_v * value_mse / self.scales.j
                + self.cfg.w_u * policy
                + self.cfg.w_grad * gradient_mse / self.scales.p,
        }
    }

    /// Loss on a batch; with gradients requested, also the parameter
    /// gradients of both networks.
    fn evaluate(
        &self,
        value: &ValueNetwork,
        policy: &PolicyNetwork,
        batch: &Batch,
        grads: Option<(&mut Mlp, &mut Mlp)>,
    ) -> LossParts {
        let (n, b) = (batch.x.nrows(), batch.x.ncols());
        let bf = b as f64;
        let vb = value.eval_batch(&batch.x);
        let g = if self.cfg.w_grad > 0.0 || grads.is_none() {
            value.gradient_batch(&vb)
        } else {
            Matrix::zeros(n, b)
        };
        let dv: Vec<f64> = vb.values.iter().zip(&batch.j).map(|(v, j)| v - j).collect();
        let dg = &g - &batch.p;

        let pacts = policy.trunk.forward_batch(&policy.norm.apply_batch(&batch.x));
        let (u, du_do) = policy.head(pacts.last().unwrap());
        let du = &u - &batch.u;
        let weights: Vec<f64> = batch
            .x
            .column_iter()
            .map(|x| {
                let r2: f64 = (0..n).map(|i| ((x[i] - value.x_e[i]) / policy.norm.scale[i]).powi(2)).sum();
                1.0 + self.cfg.policy_radial_weight * r2
            })
            .collect();
        let sq_u: Vec<f64> = du.row_iter().map(|r| r.norm_squared()).collect();
        let weighted_u: Vec<f64> = du
            .row_iter()
            .map(|r| r.iter().zip(&weights).map(|(d, w)| w * d * d).sum())
            .collect();
        let parts = self.combine(
            dv.iter().map(|d| d * d).sum(),
            &sq_u,
            &weighted_u,
            dg.norm_squared(),
            b,
            n,
        );

        if let Some((gv, gp)) = grads {
            // value term
            let mut seed = vb.dv_dout.clone();
            for (s, mut col) in seed.column_iter_mut().enumerate() {
                col *= 2.0 * self.cfg.w_v * dv[s] / (bf * self.scales.j);
            }
            value.trunk.backward_batch(&vb.acts, seed, Some(&mut *gv));

            // gradient-matching term: ∇_θ Σ_s ∂V/∂x(x_s)·c_s with c_s held
            // fixed, taken as a central difference of ∇_θ V along c_s
            if self.cfg.w_grad > 0.0 {
                let coef = 2.0 * self.cfg.w_grad / (bf * n as f64 * self.scales.p);
                let norms: Vec<f64> = dg.column_iter().map(|c| c.norm()).collect();
                let mut dir = dg.clone();
                for (s, mut col) in dir.column_iter_mut().enumerate() {
                    if norms[s] > 0.0 {
                        col /= norms[s];
                    }
                }
                let h = 1e-4 * value.norm.scale.iter().sum::<f64>() / n as f64;
                for sign in [1.0, -1.0] {
                    let xs = &batch.x + &dir * (sign * h);
                    let shifted = value.eval_batch(&xs);
                    let mut seed = shifted.dv_dout.clone();
                    for (s, mut col) in seed.column_iter_mut().enumerate() {
                        col *= sign * coef * norms[s] / (2.0 * h);
                    }
                    value.trunk.backward_batch(&shifted.acts, seed, Some(&mut *gv));
                }
            }

            // policy term
            let mut seed = du.component_mul(&du_do);
            for (i, mut row) in seed.row_iter_mut().enumerate() {
                row *= 2.0 * self.cfg.w_u / (bf * self.scales.u[i]);
            }
            for (s, mut col) in seed.column_iter_mut().enumerate() {
                col *= weights[s];
            }
            policy.trunk.backward_batch(&pacts, seed, Some(gp));
        }
        parts
    }

    fn evaluate_all(&self, value: &ValueNetwork, policy: &PolicyNetwork, samples: &[&SamplePoint]) -> LossParts {
        let mut acc = LossParts::default();
        let mut count = 0.0;
        for chunk in samples.chunks(4096) {
            let parts = self.evaluate(value, policy, &Batch::gather(chunk), None);
            let w = chunk.len() as f64;
            acc.value_mse += parts.value_mse * w;
            acc.policy_mse += parts.policy_mse * w;
            acc.gradient_mse += parts.gradient_mse * w;
            acc.total += parts.total * w;
            count += w;
        }
        acc.value_mse /= count;
        acc.policy_mse /= count;
        acc.gradient_mse /= count;
        acc.total /= count;
        acc
    }
}

fn thin<'a>(samples: &'a [SamplePoint], cfg: &TrainConfig, norm: &Normalizer) -> Vec<&'a SamplePoint> {
    let mut out = Vec::new();
    let mut last_id = None;
    let mut k = 0;
    let mut travelled = 0.0;
    let mut prev: Option<&SamplePoint> = None;
    for s in samples {
        if last_id != Some(s.traj_id) {
            last_id = Some(s.traj_id);
            k = 0;
            travelled = 0.0;
            prev = None;
        }
        let keep = match (cfg.arc_spacing, prev) {
            (Some(d), Some(q)) => {
                travelled += (0..s.x.len()).map(|i| ((s.x[i] - q.x[i]) / norm.scale[i]).powi(2)).sum::<f64>().sqrt();
                if travelled >= d {
                    travelled = 0.0;
                    true
                } else {
                    false
                }
            }
            (Some(_), None) => true,
            (None, _) => k % cfg.stride == 0,
        };
        if keep {
            out.push(s);
        }
        prev = Some(s);
        k += 1;
    }
    out
}

/// Fits both networks by mini-batch Adam; returns the parameters with the
/// best validation loss.
pub fn train(train: &[SamplePoint], val: &[SamplePoint], setup: &NetworkSetup, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let train_set = thin(train, cfg, &setup.norm);
    let val_set = thin(val, cfg, &setup.norm);
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let n = setup.x_e.len();
    check_dim("sample state", n, train_set[0].x.len())?;
    check_dim("sample control", setup.u_e.len(), train_set[0].u_star.len())?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut value = ValueNetwork::new(n, &cfg.hidden, setup.norm.clone(), setup.x_e.clone(), &mut rng)?;
    let mut policy = PolicyNetwork::new(
        n,
        &cfg.hidden,
        setup.norm.clone(),
        setup.u_e.clone(),
        setup.bounds.clone(),
        &mut rng,
    )?;
    let trainer = Trainer {
        cfg,
        scales: LossScales::from(&train_set),
    };
    let mut adam_v = Adam::new(&value.trunk);
    let mut adam_p = Adam::new(&policy.trunk);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut lr = cfg.lr;
    let mut best = (trainer.evaluate_all(&value, &policy, &val_set).total, 0usize);
    let mut best_nets = (value.clone(), policy.clone());
    let mut since_decay = 0;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let picked: Vec<&SamplePoint> = idx.iter().map(|&i| train_set[i]).collect();
            let batch = Batch::gather(&picked);
            let mut gv = Mlp::zeros(&value.trunk.widths());
            let mut gp = Mlp::zeros(&policy.trunk.widths());
            let parts = trainer.evaluate(&value, &policy, &batch, Some((&mut gv, &mut gp)));
            if !parts.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            train_loss += parts.total * picked.len() as f64;
            adam_v.step(&mut value.trunk, &gv, lr);
            adam_p.step(&mut policy.trunk, &gp, lr);
        }
        train_loss /= train_set.len() as f64;
        let v = trainer.evaluate_all(&value, &policy, &val_set);
        if !v.total.is_finite() || !value.trunk.is_finite() || !policy.trunk.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss: v.total,
            val_value_mse: v.value_mse,
            val_policy_mse: v.policy_mse,
            val_gradient_mse: v.gradient_mse,
        });
        if epoch % 25 == 0 || epoch == cfg.epochs {
            info!(
                "epoch {epoch}: train {train_loss:.3e}, val {:.3e} (V {:.3e}, u {:.3e}), lr {lr:.1e}",
                v.total, v.value_mse, v.policy_mse
            );
        }
        if v.total < best.0 {
            best = (v.total, epoch);
            best_nets = (value.clone(), policy.clone());
            since_decay = 0;
        } else {
            since_decay += 1;
            if since_decay >= cfg.plateau_patience {
                lr *= cfg.lr_decay;
                since_decay = 0;
            }
            if epoch - best.1 >= cfg.early_stop_patience {
                info!("early stop at epoch {epoch}, best {}", best.1);
                break;
            }
        }
    }
    Ok(TrainOutput {
        value: best_nets.0,
        policy: best_nets.1,
        history,
        best_epoch: best.1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerJson {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Self-contained checkpoint of one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: String,
    pub layers: Vec<LayerJson>,
    pub norm: Normalizer,
    pub x_e: Vec<f64>,
    pub u_e: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<(Vec<f64>, Vec<f64>)>,
}

fn layers_json(mlp: &Mlp) -> Vec<LayerJson> {
    mlp.weights
        .iter()
        .zip(&mlp.biases)
        .map(|(w, b)| LayerJson {
            rows: w.nrows(),
            cols: w.ncols(),
            weights: w.transpose().iter().copied().collect(),
            bias: b.iter().copied().collect(),
        })
        .collect()
}

fn mlp_from_json(layers: &[LayerJson]) -> Result<Mlp> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("checkpoint has no layers".into()));
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (i, l) in layers.iter().enumerate() {
        if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
            return Err(Error::InvalidArgument(format!("layer {i} has inconsistent shapes")));
        }
        if i > 0 && layers[i - 1].rows != l.cols {
            return Err(Error::InvalidArgument(format!("layer {i} does not chain with layer {}", i - 1)));
        }
        weights.push(Matrix::from_row_slice(l.rows, l.cols, &l.weights));
        biases.push(Vector::from_column_slice(&l.bias));
    }
    let mlp = Mlp { weights, biases };
    if !mlp.is_finite() {
        return Err(Error::InvalidArgument("checkpoint holds non-finite parameters".into()));
    }
    Ok(mlp)
}

impl ValueNetwork {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "value".into(),
            layers: layers_json(&self.trunk),
            norm: self.norm.clone(),
            x_e: self.x_e.iter().copied().collect(),
            u_e: Vec::new(),
            bounds: None,
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.kind != "value" {
            return Err(Error::InvalidArgument(format!("expected a value checkpoint, got `{}`", c.kind)));
        }
        let trunk = mlp_from_json(&c.layers)?;
        let n = c.x_e.len();
        check_dim("value trunk input", n, trunk.input_dim())?;
        check_dim("value trunk output", n * (n + 1) / 2, trunk.output_dim())?;
        c.norm.validate(n)?;
        Ok(Self {
            trunk,
            x_e: Vector::from_column_slice(&c.x_e),
            norm: c.norm.clone(),
        })
    }
}

impl PolicyNetwork {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "policy".into(),
            layers: layers_json(&self.trunk),
            norm: self.norm.clone(),
            x_e: Vec::new(),
            u_e: self.u_e.iter().copied().collect(),
            bounds: self
                .bounds
                .as_ref()
                .map(|(lo, hi)| (lo.iter().copied().collect(), hi.iter().copied().collect())),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.kind != "policy" {
            return Err(Error::InvalidArgument(format!("expected a policy checkpoint, got `{}`", c.kind)));
        }
        let trunk = mlp_from_json(&c.layers)?;
        check_dim("policy trunk output", c.u_e.len(), trunk.output_dim())?;
        c.norm.validate(trunk.input_dim())?;
        Ok(Self {
            trunk,
            u_e: Vector::from_column_slice(&c.u_e),
            norm: c.norm.clone(),
            bounds: c
                .bounds
                .as_ref()
                .map(|(lo, hi)| (Vector::from_column_slice(lo), Vector::from_column_slice(hi))),
        })
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(c).map_err(|e| Error::format(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn identity_factor_net(n: usize) -> ValueNetwork {
        let mut net = ValueNetwork::new(n, &[4], Normalizer::identity(n), Vector::from_element(n, 0.5), &mut rng()).unwrap();
        for w in &mut net.trunk.weights {
            w.fill(0.0);
        }
        // softplus(o) + floor = 1 on the diagonal, zero below it
        let diag = ((1.0 - DIAG_FLOOR).exp() - 1.0).ln();
        let mut k = 0;
        let last = net.trunk.biases.len() - 1;
        for i in 0..n {
            for j in 0..=i {
                net.trunk.biases[last][k] = if i == j { diag } else { 0.0 };
                k += 1;
            }
        }
        net
    }

    #[test]
    fn identity_factor_gives_squared_distance() {
        let net = identity_factor_net(3);
        let x = Vector::from_column_slice(&[1.0, -2.0, 0.25]);
        let d = &x - &net.x_e;
        assert_relative_eq!(net.value(&x), d.norm_squared(), max_relative = 1e-12);
        assert!((net.gradient(&x) - d * 2.0).amax() < 1e-12);
        assert_eq!(net.value(&net.x_e), 0.0);
    }

    #[test]
    fn value_gradient_matches_finite_differences() {
        let mut r = rng();
        for _ in 0..5 {
            let norm = Normalizer {
                mean: vec![0.3, -0.1],
                scale: vec![2.0, 0.5],
            };
            let net = ValueNetwork::new(2, &[8, 8], norm, Vector::from_column_slice(&[0.1, 0.2]), &mut r).unwrap();
            let x = Vector::from_fn(2, |_, _| r.gen_range(-2.0..2.0));
            let g = net.gradient(&x);
            for i in 0..2 {
                let h = 1e-5;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (net.value(&xp) - net.value(&xm)) / (2.0 * h);
                assert_relative_eq!(g[i], fd, max_relative = 1e-5, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn zero_trunk_policy_returns_equilibrium_control() {
        let u_e = Vector::from_element(1, 0.0314);
        let bounds = Some((Vector::from_element(1, -0.0872), Vector::from_element(1, 0.0872)));
        for b in [None, bounds] {
            let mut p = PolicyNetwork::new(2, &[4], Normalizer::identity(2), u_e.clone(), b, &mut rng()).unwrap();
            p.trunk = Mlp::zeros(&p.trunk.widths());
            assert_relative_eq!(p.control(&Vector::from_column_slice(&[3.0, -1.0]))[0], 0.0314, epsilon = 1e-15);
        }
    }

    #[test]
    fn squashed_policy_stays_in_bounds() {
        let bounds = Some((Vector::from_element(1, -0.0872), Vector::from_element(1, 0.0872)));
        let p = PolicyNetwork::new(2, &[4], Normalizer::identity(2), Vector::from_element(1, 0.03), bounds, &mut rng()).unwrap();
        let mut big = p.clone();
        big.trunk.weights[0] *= 1e3;
        for x in [[1e4, 0.0], [-1e4, 3.0], [0.0, 0.0]] {
            let u = big.control(&Vector::from_column_slice(&x))[0];
            assert!((-0.0872..=0.0872).contains(&u), "{u}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let v = ValueNetwork::new(2, &[5], Normalizer::identity(2), Vector::zeros(2), &mut rng()).unwrap();
        assert_eq!(ValueNetwork::from_checkpoint(&v.to_checkpoint()).unwrap(), v);
        let b = Some((Vector::from_element(1, -1.0), Vector::from_element(1, 1.0)));
        let p = PolicyNetwork::new(2, &[5], Normalizer::identity(2), Vector::zeros(1), b, &mut rng()).unwrap();
        let text = serde_json::to_string(&p.to_checkpoint()).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(PolicyNetwork::from_checkpoint(&back).unwrap(), p);
        assert!(ValueNetwork::from_checkpoint(&back).is_err());
    }
}
