//! Initialisation, gradients and the Adam ascent loop.

use log::{debug, info, warn};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::elbo::{elbo_flat, elbo_flat_with_gradient, ModelState, NoiseModel, TrainingData};
use crate::error::{invalid, Error, Result};
use crate::kernels::{
    latent_cov, hier_block_cov, HierarchicalKernelSpec, KernelFamily, ReplicaInputs,
    StationaryKernelSpec,
};
use crate::latent::{InducingState, LatentPosterior};
use crate::linalg::{cholesky_jitter, Matrix, DEFAULT_BASE_JITTER};
use crate::params::{self, FlatParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Analytic,
    Numeric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub gradient_mode: GradientMode,
    /// Relative step for central differences.
    pub fd_step: f64,
    pub seed: u64,
    /// Parameter spans held at their initial values.
    pub frozen: Vec<String>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            iterations: 10_000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            gradient_mode: GradientMode::Analytic,
            fd_step: 1e-5,
            seed: 0,
            frozen: vec![params::KH_LOG_VARIANCE.to_string()],
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("optimizer.learning_rate", "must be positive"));
        }
        if self.iterations == 0 {
            return Err(invalid("optimizer.iterations", "must be at least 1"));
        }
        for (name, b) in [("optimizer.adam_beta1", self.adam_beta1), ("optimizer.adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(name, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(invalid("optimizer.adam_eps", "must be positive"));
        }
        if !(self.fd_step > 0.0) {
            return Err(invalid("optimizer.fd_step", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InducingCount {
    PerReplica(usize),
    /// Spread as evenly as possible over the replicas, earlier replicas
    /// taking the remainder.
    Total(usize),
}

impl InducingCount {
    pub fn sizes(&self, replicas: usize) -> Vec<usize> {
        match *self {
            InducingCount::PerReplica(m) => vec![m; replicas],
            InducingCount::Total(m) => (0..replicas)
                .map(|r| m / replicas + usize::from(r < m % replicas))
                .collect(),
        }
    }
}

/// Structural choices used to build an initial state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub inducing_latent: usize,
    pub inducing: InducingCount,
    pub kg_family: KernelFamily,
    pub kf_family: KernelFamily,
    /// Drop `k_g`, making replicas independent given the output.
    pub flat: bool,
    pub per_output_noise: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            inducing_latent: 2,
            inducing: InducingCount::PerReplica(5),
            kg_family: KernelFamily::Matern32,
            kf_family: KernelFamily::Matern32,
            flat: false,
            per_output_noise: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(invalid("model.latent_dim", "must be at least 1"));
        }
        if self.inducing_latent == 0 {
            return Err(invalid("model.inducing_latent", "must be at least 1"));
        }
        let m = match self.inducing {
            InducingCount::PerReplica(m) | InducingCount::Total(m) => m,
        };
        if m == 0 {
            return Err(invalid("model.inducing", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum InitStrategy {
    Heuristic(ModelConfig),
    FromState(Box<ModelState>),
}

fn variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

/// Rows taken at evenly spaced positions of `x` sorted by first coordinate.
fn strided_rows(x: &Matrix, m: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = (0..x.rows()).map(|i| x.row(i).to_vec()).collect();
    rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
    rows.dedup();
    if rows.len() <= m {
        return rows;
    }
    (0..m)
        .map(|k| {
            let pos = ((k as f64 + 0.5) * rows.len() as f64 / m as f64).floor() as usize;
            rows[pos.min(rows.len() - 1)].clone()
        })
        .collect()
}

/// Latent coordinates from the leading principal directions of a smoothed
/// summary of each output on a common set of inputs, scaled to unit variance.
fn pca_latent(data: &TrainingData, q: usize, grid: &Matrix, bandwidth: f64) -> Option<Matrix> {
    let dn = data.outputs();
    if dn < 2 || grid.rows() == 0 {
        return None;
    }
    let g = grid.rows();
    let mut summary = DMatrix::<f64>::zeros(dn, g);
    for d in 0..dn {
        let (x, y) = data.output(d);
        let xs = x.stacked().x;
        if y.is_empty() {
            return None;
        }
        for j in 0..g {
            let mut wsum = 0.0;
            let mut acc = 0.0;
            for (i, yi) in y.iter().enumerate() {
                let d2: f64 = xs
                    .row(i)
                    .iter()
                    .zip(grid.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let w = (-0.5 * d2 / (bandwidth * bandwidth)).exp() + 1e-300;
                wsum += w;
                acc += w * yi;
            }
            summary[(d, j)] = acc / wsum;
        }
    }
    for j in 0..g {
        let mean = summary.column(j).mean();
        for d in 0..dn {
            summary[(d, j)] -= mean;
        }
    }
    let svd = summary.svd(true, false);
    let u = svd.u?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut out = Matrix::zeros(dn, q);
    for k in 0..q.min(order.len()) {
        let col = order[k];
        if svd.singular_values[col] <= 1e-12 {
            continue;
        }
        let scores: Vec<f64> = (0..dn).map(|d| u[(d, col)] * svd.singular_values[col]).collect();
        let sd = variance(&scores).sqrt();
        if sd > 0.0 {
            for d in 0..dn {
                out[(d, k)] = scores[d] / sd;
            }
        }
    }
    Some(out)
}

/// Conventional starting point for a latent-variable GP.
///
/// Latent means come from principal directions of the outputs smoothed onto
/// a common grid (small random values if an output has no data), latent
/// variances are 0.5, `Z^X` is a strided subset of each replica's observed
/// inputs, `Z^H` is a standard-normal draw, `M = 0`, the `q(U)` factors are
/// `0.1` times the prior factors and noise is a tenth of the target variance.
pub fn initialize(data: &TrainingData, cfg: &ModelConfig, seed: u64) -> Result<ModelState> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dn, r, v, q) = (data.outputs(), data.replicas(), data.input_dim(), cfg.latent_dim);
    let per = data.to_per_output();
    let TrainingData::PerOutput { x: xs, y: ys } = &per else {
        unreachable!()
    };
    let all_y: Vec<f64> = ys.iter().flatten().copied().collect();
    if all_y.is_empty() {
        return Err(invalid("data", "no observations"));
    }
    let var_y = variance(&all_y).max(1e-6);

    let mut pooled: Vec<Vec<Vec<f64>>> = vec![Vec::new(); r];
    for x in xs {
        for (rr, block) in x.blocks().iter().enumerate() {
            for i in 0..block.rows() {
                pooled[rr].push(block.row(i).to_vec());
            }
        }
    }
    let everything: Vec<&Vec<f64>> = pooled.iter().flatten().collect();
    let lo: Vec<f64> = (0..v).map(|k| everything.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min)).collect();
    let hi: Vec<f64> = (0..v).map(|k| everything.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let range: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| (b - a).max(1e-3)).collect();

    let ls: Vec<f64> = range.iter().map(|w| 0.5 * w).collect();
    let kf = StationaryKernelSpec::new(cfg.kf_family, 0.8 * var_y, ls.clone())?;
    let hier_kernel = if cfg.flat {
        HierarchicalKernelSpec::flat(StationaryKernelSpec::new(cfg.kf_family, var_y, ls.clone())?)?
    } else {
        HierarchicalKernelSpec::new(StationaryKernelSpec::new(cfg.kg_family, 0.2 * var_y, ls)?, kf)?
    };
    let latent_kernel = StationaryKernelSpec::rbf(1.0, vec![1.0; q])?;

    let sizes = cfg.inducing.sizes(r);
    let mut zx_blocks = Vec::with_capacity(r);
    for (rr, &m) in sizes.iter().enumerate() {
        let obs = Matrix::from_raw(pooled[rr].len(), v, pooled[rr].concat());
        let mut rows = strided_rows(&obs, m);
        while rows.len() < m {
            rows.push((0..v).map(|k| lo[k] + range[k] * rng.random::<f64>()).collect());
        }
        zx_blocks.push(Matrix::from_rows(&rows).unwrap_or_else(|_| Matrix::zeros(0, v)));
    }
    let zx = ReplicaInputs::new(zx_blocks)?;

    let grid_rows: Vec<Vec<f64>> = {
        let all = Matrix::from_raw(everything.len(), v, everything.iter().flat_map(|p| p.iter().copied()).collect());
        strided_rows(&all, 20)
    };
    let grid = Matrix::from_rows(&grid_rows).unwrap_or_else(|_| Matrix::zeros(0, v));
    let bandwidth = 0.1 * range.iter().map(|w| w * w).sum::<f64>().sqrt();
    let means = match pca_latent(data, q, &grid, bandwidth) {
        Some(m) => {
            debug!("latent means initialised from principal directions");
            m
        }
        None => Matrix::from_fn(dn, q, |_, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            0.1 * e
        }),
    };
    let latent = LatentPosterior::new(means, Matrix::filled(dn, q, 0.5))?;
    let zh = Matrix::from_fn(cfg.inducing_latent, q, |_, _| StandardNormal.sample(&mut rng));

    let kx = hier_block_cov(&hier_kernel, &zx, &zx)?;
    let kh = latent_cov(&latent_kernel, &zh, &zh)?;
    let cov_x_factor = cholesky_jitter(&kx, DEFAULT_BASE_JITTER)?.lower.scale(0.1);
    let cov_h_factor = cholesky_jitter(&kh, DEFAULT_BASE_JITTER)?.lower.scale(0.1);
    let inducing = InducingState {
        mean: Matrix::zeros(zx.total_points(), zh.rows()),
        zx,
        zh,
        cov_h_factor,
        cov_x_factor,
    };
    let noise = if cfg.per_output_noise {
        NoiseModel::PerOutput(
            ys.iter()
                .map(|y| {
                    let s = variance(y);
                    0.1 * if y.len() >= 2 && s > 0.0 { s } else { var_y }
                })
                .collect(),
        )
    } else {
        NoiseModel::Shared(0.1 * var_y)
    };
    let state = ModelState {
        hier_kernel,
        latent_kernel,
        latent,
        inducing,
        noise,
    };
    state.validate()?;
    Ok(state)
}

/// Gradient of the bound with respect to every unconstrained coordinate.
pub fn grad_elbo(
    p: &FlatParams,
    data: &TrainingData,
    mode: GradientMode,
    fd_step: f64,
) -> Result<Vec<f64>> {
    match mode {
        GradientMode::Analytic => Ok(elbo_flat_with_gradient(p, data)?.gradient),
        GradientMode::Numeric => numeric_gradient(p, data, fd_step),
    }
}

/// Central differences with step `fd_step · max(1, |x_i|)`.
pub fn numeric_gradient(p: &FlatParams, data: &TrainingData, fd_step: f64) -> Result<Vec<f64>> {
    let mut g = vec![0.0; p.values.len()];
    let mut work = p.clone();
    for i in 0..p.values.len() {
        let x = p.values[i];
        let h = fd_step * x.abs().max(1.0);
        work.values[i] = x + h;
        let up = elbo_flat(&work, data)?.total;
        work.values[i] = x - h;
        let down = elbo_flat(&work, data)?.total;
        work.values[i] = x;
        g[i] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam ascent step at iteration `t ≥ 1`.
pub fn adam_step(
    params: &[f64],
    grads: &[f64],
    moments: &AdamMoments,
    cfg: &OptimizerConfig,
    t: usize,
) -> (Vec<f64>, AdamMoments) {
    assert!(t >= 1, "Adam iterations are counted from 1");
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let mut out = params.to_vec();
    let mut next = moments.clone();
    for i in 0..params.len() {
        next.m[i] = b1 * moments.m[i] + (1.0 - b1) * grads[i];
        next.v[i] = b2 * moments.v[i] + (1.0 - b2) * grads[i] * grads[i];
        let mhat = next.m[i] / c1;
        let vhat = next.v[i] / c2;
        out[i] += cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
    }
    (out, next)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub initial_elbo: f64,
    pub best_elbo: f64,
    /// Steps rejected because the bound could not be evaluated.
    pub rejected_steps: usize,
    pub final_learning_rate: f64,
    /// Evaluations in which some Cholesky factorisation needed jitter.
    pub jitter_evaluations: usize,
    pub max_jitter: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// State with the highest bound seen.
    pub state: ModelState,
    /// Bound at every successfully evaluated iterate, in order.
    pub trace: Vec<f64>,
    pub best_iteration: usize,
    pub diagnostics: FitDiagnostics,
}

const MAX_REJECTIONS: usize = 20;
const PLATEAU_WINDOW: usize = 500;

fn recoverable(e: &Error) -> bool {
    matches!(
        e,
        Error::Indefinite { .. } | Error::NonFinite { .. } | Error::InvalidParameter { .. }
    )
}

/// Maximises the bound with Adam for a fixed number of iterations and
/// returns the best iterate.
pub fn fit(data: &TrainingData, cfg: &OptimizerConfig, init: InitStrategy) -> Result<FitResult> {
    cfg.validate()?;
    let state = match init {
        InitStrategy::Heuristic(mc) => initialize(data, &mc, cfg.seed)?,
        InitStrategy::FromState(s) => *s,
    };
    let mut p = FlatParams::pack(&state)?;
    let frozen = p.indices_of(&cfg.frozen)?;
    let n = p.values.len();
    let mut moments = AdamMoments::zeros(n);
    let mut lr = cfg.learning_rate;
    let mut diag = FitDiagnostics::default();
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut best = (f64::NEG_INFINITY, 0usize, p.values.clone());
    let mut last_good = p.values.clone();
    let mut t = 0usize;
    let mut iter = 0usize;
    while iter <= cfg.iterations {
        let eval = match cfg.gradient_mode {
            GradientMode::Analytic => elbo_flat_with_gradient(&p, data),
            GradientMode::Numeric => elbo_flat(&p, data).and_then(|e| {
                numeric_gradient(&p, data, cfg.fd_step).map(|g| crate::elbo::ElboGradient {
                    elbo: e,
                    gradient: g,
                    jitter: Vec::new(),
                })
            }),
        };
        let eval = match eval {
            Ok(e) => e,
            Err(e) if recoverable(&e) && iter > 0 => {
                diag.rejected_steps += 1;
                if diag.rejected_steps > MAX_REJECTIONS {
                    return Err(Error::FitFailed(format!(
                        "bound not evaluable after {MAX_REJECTIONS} step reductions: {e}"
                    )));
                }
                warn!("iteration {iter}: {e}; reverting and halving the learning rate");
                p.values.clone_from(&last_good);
                lr *= 0.5;
                moments = AdamMoments::zeros(n);
                t = 0;
                continue;
            }
            Err(e) => return Err(e),
        };
        let value = eval.elbo.total;
        if iter == 0 {
            diag.initial_elbo = value;
        }
        if eval.jitter.iter().any(|j| *j > 0.0) {
            diag.jitter_evaluations += 1;
            diag.max_jitter = eval.jitter.iter().copied().fold(diag.max_jitter, f64::max);
        }
        trace.push(value);
        if value > best.0 {
            best = (value, trace.len() - 1, p.values.clone());
        }
        if iter > 0 && iter % PLATEAU_WINDOW == 0 {
            let prev = trace[trace.len() - 1 - PLATEAU_WINDOW.min(trace.len() - 1)];
            if (value - prev).abs() <= 1e-6 * value.abs().max(1.0) {
                info!("iteration {iter}: bound has plateaued at {value:.6}");
            } else {
                debug!("iteration {iter}: bound {value:.6}");
            }
        }
        if iter == cfg.iterations {
            break;
        }
        last_good.clone_from(&p.values);
        let mut g = eval.gradient;
        for &i in &frozen {
            g[i] = 0.0;
        }
        t += 1;
        let step_cfg = OptimizerConfig {
            learning_rate: lr,
            ..cfg.clone()
        };
        let (next, m) = adam_step(&p.values, &g, &moments, &step_cfg, t);
        p.values = next;
        moments = m;
        iter += 1;
    }
    diag.best_elbo = best.0;
    diag.final_learning_rate = lr;
    let state = p.with_values(best.2)?.unpack()?;
    Ok(FitResult {
        state,
        trace,
        best_iteration: best.1,
        diagnostics: diag,
    })
}
