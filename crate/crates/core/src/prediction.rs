//! Predictive moments at new inputs of existing outputs.
//!
//! For fixed latent coordinates `h` the prediction is Gaussian with mean
//! `K_{*U} K_UU⁻¹ vec(M)` and covariance
//! `K_{**} − K_{*U} K_UU⁻¹ K_{U*} + K_{*U} K_UU⁻¹ Σ^U K_UU⁻¹ K_{U*}`; every
//! Kronecker factor is handled separately. Averaging over `q(h_d)` is done by
//! Monte Carlo.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::elbo::ModelState;
use crate::error::{invalid, mismatch, Result};
use crate::kernels::{hier_cov_tagged, ReplicaInputs, TaggedPoints};
use crate::latent::psi1_entry;
use crate::linalg::{cholesky_jitter, tri_solve, CholeskyFactor, Matrix, DEFAULT_BASE_JITTER};

pub const DEFAULT_MC_SAMPLES: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveMoments {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Full covariance, only when requested.
    pub covariance: Option<Matrix>,
    /// Monte-Carlo standard error of each mean entry, for mixture moments.
    pub mean_std_err: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PredictOptions {
    /// Add the noise variance of this output.
    pub noise_output: Option<usize>,
    pub full_covariance: bool,
}

/// Factorisations of a fitted state reused across predictions.
pub struct Predictor<'s> {
    state: &'s ModelState,
    lx: CholeskyFactor,
    lh: CholeskyFactor,
    /// `K_X⁻¹ M K_H⁻¹`
    a: Matrix,
    /// `K_H⁻¹ Σ^H K_H⁻¹`
    sh: Matrix,
    /// `K_X⁻¹ Σ^X K_X⁻¹`
    sx: Matrix,
}

struct XParts {
    /// `K_{*X} A`, `n* × M_H`
    kxa: Matrix,
    kxx: Vec<f64>,
    nys: Vec<f64>,
    sig: Vec<f64>,
    full: Option<(Matrix, Matrix, Matrix)>,
}

fn quad_form(v: &[f64], m: &Matrix) -> f64 {
    let mv = m.matvec(v);
    v.iter().zip(&mv).map(|(a, b)| a * b).sum()
}

impl<'s> Predictor<'s> {
    pub fn new(state: &'s ModelState) -> Result<Self> {
        state.validate()?;
        let ind = &state.inducing;
        let kx = crate::kernels::hier_block_cov(&state.hier_kernel, &ind.zx, &ind.zx)?;
        let kh = crate::kernels::latent_cov(&state.latent_kernel, &ind.zh, &ind.zh)?;
        let lx = cholesky_jitter(&kx, DEFAULT_BASE_JITTER)?;
        let lh = cholesky_jitter(&kh, DEFAULT_BASE_JITTER)?;
        let b = tri_solve(&lx, &ind.mean)?;
        let a = tri_solve(&lh, &b.transpose())?.transpose();
        let sh = tri_solve(&lh, &tri_solve(&lh, &ind.cov_h())?.transpose())?;
        let sx = tri_solve(&lx, &tri_solve(&lx, &ind.cov_x())?.transpose())?;
        Ok(Self {
            state,
            lx,
            lh,
            a,
            sh,
            sx,
        })
    }

    fn x_parts(&self, xstar: &TaggedPoints, full: bool) -> Result<XParts> {
        let st = self.state;
        xstar.check_tags(st.replicas())?;
        if !xstar.is_empty() && xstar.x.cols() != st.hier_kernel.input_dim() {
            return Err(mismatch("prediction inputs", st.hier_kernel.input_dim(), xstar.x.cols()));
        }
        let z = st.inducing.zx.stacked();
        let kxs = hier_cov_tagged(&st.hier_kernel, xstar, &z);
        let kxa = kxs.matmul(&self.a);
        let kinv_kxs_t = tri_solve(&self.lx, &kxs.transpose())?;
        let n = xstar.len();
        let nys = (0..n)
            .map(|i| kxs.row(i).iter().zip(kinv_kxs_t.column(i)).map(|(a, b)| a * b).sum())
            .collect();
        let sig = (0..n).map(|i| quad_form(kxs.row(i), &self.sx)).collect();
        let kxx = vec![st.hier_kernel.diag_value(); n];
        let full = if full {
            let kss = hier_cov_tagged(&st.hier_kernel, xstar, xstar);
            let ny = kxs.matmul(&kinv_kxs_t);
            let sg = kxs.matmul(&self.sx).matmul(&kxs.transpose());
            Some((kss, ny, sg))
        } else {
            None
        };
        Ok(XParts {
            kxa,
            kxx,
            nys,
            sig,
            full,
        })
    }

    fn latent_row(&self, h: &[f64]) -> Vec<f64> {
        let zh = &self.state.inducing.zh;
        (0..zh.rows())
            .map(|m| self.state.latent_kernel.eval_pair(h, zh.row(m)))
            .collect()
    }

    fn check_output(&self, d: usize) -> Result<()> {
        if d >= self.state.outputs() {
            return Err(invalid(
                "output",
                format!("index {d} out of range for {} outputs", self.state.outputs()),
            ));
        }
        Ok(())
    }

    fn noise(&self, opts: &PredictOptions) -> Result<f64> {
        match opts.noise_output {
            Some(d) => {
                self.check_output(d)?;
                Ok(self.state.noise.variance(d))
            }
            None => Ok(0.0),
        }
    }

    fn moments_at(&self, xp: &XParts, kh: &[f64]) -> (Vec<f64>, Vec<f64>, f64, f64) {
        let vh = self.state.latent_kernel.variance;
        let kinv_kh = tri_solve(&self.lh, &Matrix::column_vector(kh))
            .expect("dimensions fixed by Z^H")
            .into_data();
        let nys_h: f64 = kh.iter().zip(&kinv_kh).map(|(a, b)| a * b).sum();
        let sig_h = quad_form(kh, &self.sh);
        let mean = xp.kxa.matvec(kh);
        let var = (0..mean.len())
            .map(|i| vh * xp.kxx[i] - nys_h * xp.nys[i] + sig_h * xp.sig[i])
            .collect();
        (mean, var, nys_h, sig_h)
    }

    /// Gaussian moments with the latent coordinates fixed at `h`.
    pub fn conditional(
        &self,
        xstar: &TaggedPoints,
        h: &[f64],
        opts: &PredictOptions,
    ) -> Result<PredictiveMoments> {
        if h.len() != self.state.latent.latent_dim() {
            return Err(mismatch("latent point", self.state.latent.latent_dim(), h.len()));
        }
        let noise = self.noise(opts)?;
        let xp = self.x_parts(xstar, opts.full_covariance)?;
        let kh = self.latent_row(h);
        let (mean, var, nys_h, sig_h) = self.moments_at(&xp, &kh);
        let covariance = xp.full.as_ref().map(|(kss, ny, sg)| {
            let vh = self.state.latent_kernel.variance;
            kss.scale(vh)
                .sub(&ny.scale(nys_h))
                .add(&sg.scale(sig_h))
                .add_diagonal(noise)
        });
        Ok(PredictiveMoments {
            mean,
            variance: finish_variance(var, noise),
            covariance,
            mean_std_err: None,
        })
    }

    /// Moments of the mixture over `q(h_d)`, estimated from `samples` draws.
    pub fn marginal(
        &self,
        xstar: &TaggedPoints,
        d: usize,
        samples: usize,
        seed: u64,
        opts: &PredictOptions,
    ) -> Result<PredictiveMoments> {
        self.check_output(d)?;
        if samples == 0 {
            return Err(invalid("mc_samples", "must be at least 1"));
        }
        let noise = self.noise(opts)?;
        let xp = self.x_parts(xstar, false)?;
        let q = &self.state.latent;
        let n = xstar.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mean_acc = vec![0.0; n];
        let mut mean_sq = vec![0.0; n];
        let mut var_acc = vec![0.0; n];
        let mut h = vec![0.0; q.latent_dim()];
        for _ in 0..samples {
            for (j, hj) in h.iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *hj = q.means[(d, j)] + q.variances[(d, j)].sqrt() * e;
            }
            let kh = self.latent_row(&h);
            let (m, v, _, _) = self.moments_at(&xp, &kh);
            for i in 0..n {
                mean_acc[i] += m[i];
                mean_sq[i] += m[i] * m[i];
                var_acc[i] += v[i];
            }
        }
        let s = samples as f64;
        let mut mean = Vec::with_capacity(n);
        let mut variance = Vec::with_capacity(n);
        let mut se = Vec::with_capacity(n);
        for i in 0..n {
            let mu = mean_acc[i] / s;
            let spread = (mean_sq[i] / s - mu * mu).max(0.0);
            mean.push(mu);
            variance.push(var_acc[i] / s + spread);
            se.push(if samples > 1 {
                (spread * s / (s - 1.0) / s).sqrt()
            } else {
                0.0
            });
        }
        Ok(PredictiveMoments {
            mean,
            variance: finish_variance(variance, noise),
            covariance: None,
            mean_std_err: Some(se),
        })
    }

    /// Mixture mean through the closed-form expectation of `k_H` (ARD-RBF).
    pub fn mean_closed_form(&self, xstar: &TaggedPoints, d: usize) -> Result<Vec<f64>> {
        self.check_output(d)?;
        let kh = &self.state.latent_kernel;
        if kh.family != crate::kernels::KernelFamily::Rbf {
            return Err(crate::error::Error::UnsupportedFamily {
                family: kh.family.to_string(),
            });
        }
        let xp = self.x_parts(xstar, false)?;
        let q = &self.state.latent;
        let zh = &self.state.inducing.zh;
        let psi: Vec<f64> = (0..zh.rows())
            .map(|m| psi1_entry(kh, q.means.row(d), q.variances.row(d), zh.row(m)))
            .collect();
        Ok(xp.kxa.matvec(&psi))
    }
}

fn finish_variance(mut var: Vec<f64>, noise: f64) -> Vec<f64> {
    for v in var.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-10 {
                warn!("predictive variance {v:e} is negative beyond round-off; clipped to 0");
            } else {
                warn!("predictive variance {v:e} clipped to 0");
            }
            *v = 0.0;
        }
        *v += noise;
    }
    var
}

pub fn predict_conditional(
    state: &ModelState,
    xstar: &TaggedPoints,
    h: &[f64],
    opts: &PredictOptions,
) -> Result<PredictiveMoments> {
    Predictor::new(state)?.conditional(xstar, h, opts)
}

pub fn predict_marginal(
    state: &ModelState,
    xstar: &TaggedPoints,
    d: usize,
    samples: usize,
    seed: u64,
    opts: &PredictOptions,
) -> Result<PredictiveMoments> {
    Predictor::new(state)?.marginal(xstar, d, samples, seed, opts)
}

pub fn predict_mean_closed_form(state: &ModelState, xstar: &TaggedPoints, d: usize) -> Result<Vec<f64>> {
    Predictor::new(state)?.mean_closed_form(xstar, d)
}

/// Prediction over `grid` for replica `r` of output `d`, which need not have
/// any training data.
pub fn predict_missing_replica(
    state: &ModelState,
    d: usize,
    r: usize,
    grid: &Matrix,
    samples: usize,
    seed: u64,
    opts: &PredictOptions,
) -> Result<PredictiveMoments> {
    let xstar = TaggedPoints::new(grid.clone(), vec![r; grid.rows()])?;
    predict_marginal(state, &xstar, d, samples, seed, opts)
}

/// Tags every point of `x` with its replica.
pub fn tagged(x: &ReplicaInputs) -> TaggedPoints {
    x.stacked()
}
