//! Variational distributions over the latent output coordinates `q(H)` and the
//! inducing variables `q(U)`, the kernel expectations under `q(H)` and the two
//! KL divergences of the bound.
//!
//! `q(H)` factorises over outputs into diagonal Gaussians. `q(U)` has mean
//! `vec(M)` with `M` of shape `M_X × M_H` and covariance `Σ^H ⊗ Σ^X`, each factor
//! stored through its lower Cholesky factor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::kernels::{KernelFamily, ReplicaInputs, StationaryKernelSpec};
use crate::linalg::{cholesky_jitter, logdet, tri_solve, Matrix, DEFAULT_BASE_JITTER};

/// Factorised Gaussian `q(h_d) = N(means[d], diag(variances[d]))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPosterior {
    pub means: Matrix,
    pub variances: Matrix,
}

impl LatentPosterior {
    pub fn new(means: Matrix, variances: Matrix) -> Result<Self> {
        let q = Self { means, variances };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.shape() != self.variances.shape() {
            return Err(mismatch(
                "LatentPosterior",
                format!("{:?}", self.means.shape()),
                format!("{:?}", self.variances.shape()),
            ));
        }
        if self.means.rows() == 0 || self.means.cols() == 0 {
            return Err(invalid("latent posterior", "need D ≥ 1 and Q_H ≥ 1"));
        }
        if self.variances.data().iter().any(|s| !(*s > 0.0)) {
            return Err(invalid("latent.variances", "must be strictly positive"));
        }
        Ok(())
    }

    pub fn outputs(&self) -> usize {
        self.means.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.means.cols()
    }
}

/// Inducing locations and the Kronecker-factorised Gaussian over `vec(U)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducingState {
    /// Inducing inputs, one block per replica.
    pub zx: ReplicaInputs,
    /// Inducing latent locations, `M_H × Q_H`.
    pub zh: Matrix,
    /// Variational mean `M`, `M_X × M_H`.
    pub mean: Matrix,
    /// Lower factor of `Σ^H`.
    pub cov_h_factor: Matrix,
    /// Lower factor of `Σ^X`.
    pub cov_x_factor: Matrix,
}

impl InducingState {
    pub fn m_x(&self) -> usize {
        self.zx.total_points()
    }

    pub fn m_h(&self) -> usize {
        self.zh.rows()
    }

    pub fn cov_h(&self) -> Matrix {
        self.cov_h_factor.matmul(&self.cov_h_factor.transpose())
    }

    pub fn cov_x(&self) -> Matrix {
        self.cov_x_factor.matmul(&self.cov_x_factor.transpose())
    }

    pub fn validate(&self) -> Result<()> {
        let (mx, mh) = (self.m_x(), self.m_h());
        if self.mean.shape() != (mx, mh) {
            return Err(mismatch(
                "InducingState.mean",
                format!("{mx}x{mh}"),
                format!("{:?}", self.mean.shape()),
            ));
        }
        for (name, l, n) in [
            ("cov_h_factor", &self.cov_h_factor, mh),
            ("cov_x_factor", &self.cov_x_factor, mx),
        ] {
            if l.shape() != (n, n) {
                return Err(mismatch("InducingState", n, l.rows()));
            }
            for i in 0..n {
                if !(l[(i, i)] > 0.0) {
                    return Err(invalid(name, "diagonal must be positive"));
                }
                for j in (i + 1)..n {
                    if l[(i, j)] != 0.0 {
                        return Err(invalid(name, "must be lower triangular"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Expectations of the latent kernel under `q(H)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiStats {
    /// `⟨k_H(h_d, h_d)⟩` per output.
    pub psi0: Vec<f64>,
    /// `Ψ^H`, `D × M_H`, row d is `⟨k_H(h_d, Z^H)⟩`.
    pub psi1: Matrix,
    /// `Φ^H = Σ_d Φ^H_d`.
    pub psi2: Matrix,
    /// `Φ^H_d = ⟨k_H(Z^H, h_d) k_H(h_d, Z^H)⟩` per output.
    pub psi2_per_output: Vec<Matrix>,
}

fn require_rbf(kh: &StationaryKernelSpec) -> Result<()> {
    if kh.family != KernelFamily::Rbf {
        return Err(Error::UnsupportedFamily {
            family: kh.family.to_string(),
        });
    }
    Ok(())
}

fn check_latent_shapes(q: &LatentPosterior, kh: &StationaryKernelSpec, zh: &Matrix) -> Result<()> {
    if kh.input_dim() != q.latent_dim() {
        return Err(mismatch("psi statistics", q.latent_dim(), kh.input_dim()));
    }
    if zh.cols() != q.latent_dim() {
        return Err(mismatch("psi statistics Z^H", q.latent_dim(), zh.cols()));
    }
    Ok(())
}

/// `⟨k(h, z_m)⟩` for `h ~ N(mu, diag(s))` under an ARD-RBF kernel.
pub(crate) fn psi1_entry(kh: &StationaryKernelSpec, mu: &[f64], s: &[f64], z: &[f64]) -> f64 {
    let mut log = kh.variance.ln();
    for q in 0..mu.len() {
        let l2 = kh.lengthscales[q] * kh.lengthscales[q];
        let den = l2 + s[q];
        let d = mu[q] - z[q];
        log += 0.5 * (l2 / den).ln() - 0.5 * d * d / den;
    }
    log.exp()
}

/// `⟨k(z_a, h) k(h, z_b)⟩` for `h ~ N(mu, diag(s))` under an ARD-RBF kernel.
pub(crate) fn psi2_entry(
    kh: &StationaryKernelSpec,
    mu: &[f64],
    s: &[f64],
    za: &[f64],
    zb: &[f64],
) -> f64 {
    let mut log = 2.0 * kh.variance.ln();
    for q in 0..mu.len() {
        let l2 = kh.lengthscales[q] * kh.lengthscales[q];
        let den = l2 + 2.0 * s[q];
        let dz = za[q] - zb[q];
        let e = mu[q] - 0.5 * (za[q] + zb[q]);
        log += 0.5 * (l2 / den).ln() - dz * dz / (4.0 * l2) - e * e / den;
    }
    log.exp()
}

pub(crate) fn psi1_matrix(kh: &StationaryKernelSpec, mu: &Matrix, s: &Matrix, z: &Matrix) -> Matrix {
    Matrix::from_fn(mu.rows(), z.rows(), |d, m| psi1_entry(kh, mu.row(d), s.row(d), z.row(m)))
}

pub(crate) fn psi2_single(kh: &StationaryKernelSpec, mu: &[f64], s: &[f64], z: &Matrix) -> Matrix {
    let m = z.rows();
    let mut out = Matrix::zeros(m, m);
    for a in 0..m {
        for b in 0..=a {
            let v = psi2_entry(kh, mu, s, z.row(a), z.row(b));
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
    }
    out
}

/// Closed-form kernel expectations for an ARD-RBF latent kernel.
pub fn psi_stats_closed_form(
    q: &LatentPosterior,
    kh: &StationaryKernelSpec,
    zh: &Matrix,
) -> Result<PsiStats> {
    require_rbf(kh)?;
    check_latent_shapes(q, kh, zh)?;
    let psi1 = psi1_matrix(kh, &q.means, &q.variances, zh);
    let per: Vec<Matrix> = (0..q.outputs())
        .map(|d| psi2_single(kh, q.means.row(d), q.variances.row(d), zh))
        .collect();
    let mut psi2 = Matrix::zeros(zh.rows(), zh.rows());
    for p in &per {
        psi2.add_assign(p);
    }
    Ok(PsiStats {
        psi0: vec![kh.variance; q.outputs()],
        psi1,
        psi2,
        psi2_per_output: per,
    })
}

/// Sample-mean estimates of the same expectations, plus the standard errors
/// of the `psi1` entries.
#[derive(Clone, Debug)]
pub struct McPsiStats {
    pub stats: PsiStats,
    pub psi1_std_err: Matrix,
    pub psi2_std_err: Vec<Matrix>,
}

/// Monte-Carlo estimate of the kernel expectations under `q(H)`; works for any
/// stationary family and is deterministic for a fixed seed.
pub fn psi_stats_mc(
    q: &LatentPosterior,
    kh: &StationaryKernelSpec,
    zh: &Matrix,
    samples: usize,
    seed: u64,
) -> Result<McPsiStats> {
    if samples == 0 {
        return Err(invalid("samples", "must be at least 1"));
    }
    check_latent_shapes(q, kh, zh)?;
    let (dn, qn, m) = (q.outputs(), q.latent_dim(), zh.rows());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut psi0 = vec![0.0; dn];
    let mut s1 = Matrix::zeros(dn, m);
    let mut ss1 = Matrix::zeros(dn, m);
    let mut s2 = vec![Matrix::zeros(m, m); dn];
    let mut ss2 = vec![Matrix::zeros(m, m); dn];
    let mut h = vec![0.0; qn];
    let mut k = vec![0.0; m];
    for d in 0..dn {
        for _ in 0..samples {
            for (j, hj) in h.iter_mut().enumerate() {
                let eps: f64 = StandardNormal.sample(&mut rng);
                *hj = q.means[(d, j)] + q.variances[(d, j)].sqrt() * eps;
            }
            psi0[d] += kh.eval_pair(&h, &h);
            for (mi, kv) in k.iter_mut().enumerate() {
                *kv = kh.eval_pair(&h, zh.row(mi));
                s1[(d, mi)] += *kv;
                ss1[(d, mi)] += *kv * *kv;
            }
            for a in 0..m {
                for b in 0..m {
                    let v = k[a] * k[b];
                    s2[d][(a, b)] += v;
                    ss2[d][(a, b)] += v * v;
                }
            }
        }
    }
    let n = samples as f64;
    let se = |sum: f64, sumsq: f64| -> f64 {
        if samples < 2 {
            return 0.0;
        }
        let mean = sum / n;
        let var = ((sumsq / n - mean * mean) * n / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    };
    let psi1 = s1.scale(1.0 / n);
    let psi1_std_err = Matrix::from_fn(dn, m, |d, j| se(s1[(d, j)], ss1[(d, j)]));
    let per: Vec<Matrix> = s2.iter().map(|s| s.scale(1.0 / n)).collect();
    let psi2_std_err = (0..dn)
        .map(|d| Matrix::from_fn(m, m, |a, b| se(s2[d][(a, b)], ss2[d][(a, b)])))
        .collect();
    let mut psi2 = Matrix::zeros(m, m);
    for p in &per {
        psi2.add_assign(p);
    }
    Ok(McPsiStats {
        stats: PsiStats {
            psi0: psi0.iter().map(|v| v / n).collect(),
            psi1,
            psi2,
            psi2_per_output: per,
        },
        psi1_std_err,
        psi2_std_err,
    })
}

/// Gradient of `Σ_dm G_dm psi1_dm` with respect to the inputs of the
/// closed-form expectation.
pub(crate) struct PsiGradient {
    pub variance: f64,
    pub lengthscales: Vec<f64>,
    pub means: Matrix,
    pub variances: Matrix,
    pub z: Matrix,
}

pub(crate) fn psi1_backward(
    kh: &StationaryKernelSpec,
    mu: &Matrix,
    s: &Matrix,
    z: &Matrix,
    upstream: &Matrix,
) -> PsiGradient {
    let qn = mu.cols();
    let mut g = PsiGradient {
        variance: 0.0,
        lengthscales: vec![0.0; qn],
        means: Matrix::zeros(mu.rows(), qn),
        variances: Matrix::zeros(mu.rows(), qn),
        z: Matrix::zeros(z.rows(), qn),
    };
    for d in 0..mu.rows() {
        for m in 0..z.rows() {
            let u = upstream[(d, m)];
            if u == 0.0 {
                continue;
            }
            let p = psi1_entry(kh, mu.row(d), s.row(d), z.row(m));
            let up = u * p;
            g.variance += up / kh.variance;
            for q in 0..qn {
                let l = kh.lengthscales[q];
                let den = l * l + s[(d, q)];
                let delta = mu[(d, q)] - z[(m, q)];
                let r = delta / den;
                g.means[(d, q)] -= up * r;
                g.z[(m, q)] += up * r;
                g.variances[(d, q)] += up * (-0.5 / den + 0.5 * r * r);
                g.lengthscales[q] += up * (1.0 / l - l / den + l * r * r);
            }
        }
    }
    g
}

/// Gradient of `Σ_ab G_ab Φ^H_d[a, b]` for a single output row `d`.
pub(crate) fn psi2_backward(
    kh: &StationaryKernelSpec,
    mu: &[f64],
    s: &[f64],
    z: &Matrix,
    upstream: &Matrix,
) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>, Matrix) {
    let qn = mu.len();
    let mut dv = 0.0;
    let mut dl = vec![0.0; qn];
    let mut dmu = vec![0.0; qn];
    let mut ds = vec![0.0; qn];
    let mut dz = Matrix::zeros(z.rows(), qn);
    for a in 0..z.rows() {
        for b in 0..z.rows() {
            let u = upstream[(a, b)];
            if u == 0.0 {
                continue;
            }
            let p = psi2_entry(kh, mu, s, z.row(a), z.row(b));
            let up = u * p;
            dv += 2.0 * up / kh.variance;
            for q in 0..qn {
                let l = kh.lengthscales[q];
                let l2 = l * l;
                let den = l2 + 2.0 * s[q];
                let delta = z[(a, q)] - z[(b, q)];
                let e = mu[q] - 0.5 * (z[(a, q)] + z[(b, q)]);
                dmu[q] -= up * 2.0 * e / den;
                ds[q] += up * (-1.0 / den + 2.0 * e * e / (den * den));
                dl[q] += up
                    * (1.0 / l - l / den + delta * delta / (2.0 * l2 * l)
                        + 2.0 * l * e * e / (den * den));
                dz[(a, q)] += up * (-delta / (2.0 * l2) + e / den);
                dz[(b, q)] += up * (delta / (2.0 * l2) + e / den);
            }
        }
    }
    (dv, dl, dmu, ds, dz)
}

/// `KL(q(H) ‖ N(0, I))` for the factorised diagonal posterior.
pub fn kl_latent(q: &LatentPosterior) -> f64 {
    q.means
        .data()
        .iter()
        .zip(q.variances.data())
        .map(|(m, s)| 0.5 * (s + m * m - 1.0 - s.ln()))
        .sum()
}

/// `KL(N(vec M, Σ^H ⊗ Σ^X) ‖ N(0, K^H ⊗ K^X))` using only the factors.
pub fn kl_inducing_kron(state: &InducingState, kuu_h: &Matrix, kuu_x: &Matrix) -> Result<f64> {
    state.validate()?;
    let (mx, mh) = (state.m_x() as f64, state.m_h() as f64);
    if kuu_h.shape() != (state.m_h(), state.m_h()) || kuu_x.shape() != (state.m_x(), state.m_x()) {
        return Err(mismatch(
            "kl_inducing_kron",
            format!("{}x{} and {}x{}", state.m_h(), state.m_h(), state.m_x(), state.m_x()),
            format!("{:?} and {:?}", kuu_h.shape(), kuu_x.shape()),
        ));
    }
    let lh = cholesky_jitter(kuu_h, DEFAULT_BASE_JITTER)?;
    let lx = cholesky_jitter(kuu_x, DEFAULT_BASE_JITTER)?;
    let logdet_sh = 2.0 * state.cov_h_factor.diag().iter().map(|d| d.ln()).sum::<f64>();
    let logdet_sx = 2.0 * state.cov_x_factor.diag().iter().map(|d| d.ln()).sum::<f64>();
    // Tr(Mᵀ Kx⁻¹ M Kh⁻¹) = Σ M ∘ (Kx⁻¹ M Kh⁻¹)
    let kx_inv_m = tri_solve(&lx, &state.mean)?;
    let a = tri_solve(&lh, &kx_inv_m.transpose())?.transpose();
    let quad = state.mean.dot(&a);
    let tr_h = tri_solve(&lh, &state.cov_h())?.trace();
    let tr_x = tri_solve(&lx, &state.cov_x())?.trace();
    Ok(0.5
        * (mx * (logdet(&lh) - logdet_sh) + mh * (logdet(&lx) - logdet_sx) + quad + tr_h * tr_x
            - mh * mx))
}
