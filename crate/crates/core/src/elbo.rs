//! The evidence lower bound `ℒ = ℱ − KL(q(U)) − KL(q(H))`.
//!
//! The production path evaluates `ℱ` through the Kronecker factorisation of
//! `K_UU`, `Ψ` and `Φ` on a [`Tape`], so the same code yields the value and the
//! gradient. A dense path without any factorisation is kept alongside as the
//! reference for tests.

use std::f64::consts::PI;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{gram, psi1, psi2_row, Tape, Var};
use crate::error::{invalid, mismatch, Error, Result};
use crate::kernels::{
    hier_block_cov, hier_cov_tagged, latent_cov, HierarchicalKernelSpec, ReplicaInputs,
    StationaryKernelSpec, TaggedPoints,
};
use crate::latent::{psi_stats_closed_form, InducingState, LatentPosterior};
use crate::linalg::{cholesky_jitter, kron, logdet, tri_solve, Matrix, DEFAULT_BASE_JITTER};
use crate::params::{self, FlatParams, ParamLayout};

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    Shared(f64),
    PerOutput(Vec<f64>),
}

impl NoiseModel {
    pub fn variance(&self, d: usize) -> f64 {
        match self {
            NoiseModel::Shared(s) => *s,
            NoiseModel::PerOutput(v) => v[d],
        }
    }
}

/// Every free quantity of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub hier_kernel: HierarchicalKernelSpec,
    pub latent_kernel: StationaryKernelSpec,
    pub latent: LatentPosterior,
    pub inducing: InducingState,
    pub noise: NoiseModel,
}

impl ModelState {
    pub fn outputs(&self) -> usize {
        self.latent.outputs()
    }

    pub fn replicas(&self) -> usize {
        self.inducing.zx.replica_count()
    }

    pub fn validate(&self) -> Result<()> {
        self.hier_kernel.validate()?;
        self.latent_kernel.validate("latent_kernel")?;
        self.latent.validate()?;
        self.inducing.validate()?;
        let q = self.latent.latent_dim();
        if self.latent_kernel.input_dim() != q {
            return Err(mismatch("latent kernel dimension", q, self.latent_kernel.input_dim()));
        }
        if self.inducing.zh.cols() != q {
            return Err(mismatch("Z^H dimension", q, self.inducing.zh.cols()));
        }
        if self.inducing.m_x() > 0 && self.inducing.zx.dim() != self.hier_kernel.input_dim() {
            return Err(mismatch(
                "Z^X dimension",
                self.hier_kernel.input_dim(),
                self.inducing.zx.dim(),
            ));
        }
        match &self.noise {
            NoiseModel::Shared(s) if !(*s > 0.0 && s.is_finite()) => {
                Err(invalid("noise", "variance must be positive"))
            }
            NoiseModel::PerOutput(v) if v.len() != self.outputs() => {
                Err(mismatch("per-output noise", self.outputs(), v.len()))
            }
            NoiseModel::PerOutput(v) if v.iter().any(|s| !(*s > 0.0 && s.is_finite())) => {
                Err(invalid("noise", "variances must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// Terms of the bound; `total = f_term − kl_u − kl_h`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub f_term: f64,
    pub kl_u: f64,
    pub kl_h: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn new(f_term: f64, kl_u: f64, kl_h: f64) -> Self {
        Self {
            f_term,
            kl_u,
            kl_h,
            total: f_term - kl_u - kl_h,
        }
    }
}

/// Observations in one of the two input regimes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrainingData {
    /// All outputs observed at the same inputs; `y` is `n × D`, column `d`
    /// holding output `d`.
    Shared { x: ReplicaInputs, y: Matrix },
    /// Output `d` observed at `x[d]` with targets `y[d]` stacked replica by
    /// replica.
    PerOutput {
        x: Vec<ReplicaInputs>,
        y: Vec<Vec<f64>>,
    },
}

impl TrainingData {
    /// `y` stacked output-major, i.e. `vec` of the `n × D` target matrix.
    pub fn shared(x: ReplicaInputs, y: &[f64]) -> Result<Self> {
        let n = x.total_points();
        if n == 0 || y.len() % n != 0 || y.is_empty() {
            return Err(mismatch("shared targets", format!("a multiple of {n}"), y.len()));
        }
        let y = Matrix::unvec(y, n, y.len() / n)?;
        Ok(Self::Shared { x, y })
    }

    pub fn per_output(x: Vec<ReplicaInputs>, y: Vec<Vec<f64>>) -> Result<Self> {
        if x.len() != y.len() || x.is_empty() {
            return Err(mismatch("per-output data", x.len(), y.len()));
        }
        let r = x[0].replica_count();
        for (xd, yd) in x.iter().zip(&y) {
            if xd.total_points() != yd.len() {
                return Err(mismatch("per-output targets", xd.total_points(), yd.len()));
            }
            if xd.replica_count() != r {
                return Err(mismatch("per-output replicas", r, xd.replica_count()));
            }
        }
        Ok(Self::PerOutput { x, y })
    }

    pub fn outputs(&self) -> usize {
        match self {
            TrainingData::Shared { y, .. } => y.cols(),
            TrainingData::PerOutput { y, .. } => y.len(),
        }
    }

    pub fn replicas(&self) -> usize {
        match self {
            TrainingData::Shared { x, .. } => x.replica_count(),
            TrainingData::PerOutput { x, .. } => x[0].replica_count(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            TrainingData::Shared { x, .. } => x.dim(),
            TrainingData::PerOutput { x, .. } => x[0].dim(),
        }
    }

    pub fn observation_count(&self) -> usize {
        match self {
            TrainingData::Shared { y, .. } => y.rows() * y.cols(),
            TrainingData::PerOutput { y, .. } => y.iter().map(Vec::len).sum(),
        }
    }

    /// The same observations in the per-output regime.
    pub fn to_per_output(&self) -> Self {
        match self {
            TrainingData::Shared { x, y } => Self::PerOutput {
                x: vec![x.clone(); y.cols()],
                y: (0..y.cols()).map(|d| y.column(d)).collect(),
            },
            other => other.clone(),
        }
    }

    /// Inputs and targets of output `d`.
    pub fn output(&self, d: usize) -> (ReplicaInputs, Vec<f64>) {
        match self {
            TrainingData::Shared { x, y } => (x.clone(), y.column(d)),
            TrainingData::PerOutput { x, y } => (x[d].clone(), y[d].clone()),
        }
    }

    fn check_against(&self, shape: &params::ModelShape) -> Result<()> {
        if self.outputs() != shape.outputs {
            return Err(mismatch("outputs", shape.outputs, self.outputs()));
        }
        if self.replicas() != shape.replicas() {
            return Err(mismatch("replicas", shape.replicas(), self.replicas()));
        }
        if self.observation_count() > 0 && self.input_dim() != shape.input_dim {
            return Err(mismatch("input dimension", shape.input_dim, self.input_dim()));
        }
        Ok(())
    }
}

struct Kern<'t> {
    family: crate::kernels::KernelFamily,
    var: Var<'t>,
    ls: Var<'t>,
}

/// Model quantities on the tape, already mapped to constrained space.
struct Leaves<'t> {
    raw: Vec<Var<'t>>,
    kg: Option<Kern<'t>>,
    kf: Kern<'t>,
    kh: Kern<'t>,
    mu: Var<'t>,
    log_s: Var<'t>,
    zx: Var<'t>,
    zx_tags: Rc<Vec<usize>>,
    zh: Var<'t>,
    mean: Var<'t>,
    l_sh: Var<'t>,
    l_sx: Var<'t>,
    log_noise: Var<'t>,
}

impl<'t> Leaves<'t> {
    fn new(tape: &'t Tape, p: &FlatParams) -> Self {
        let layout = &p.layout;
        let shape = &layout.shape;
        let mut raw = Vec::with_capacity(layout.spans.len());
        let mut get = |name: &str| {
            let v = tape.leaf(p.block(name));
            raw.push(v);
            v
        };
        let kg = shape.kg_family.map(|family| Kern {
            family,
            var: get(params::KG_LOG_VARIANCE).exp(),
            ls: get(params::KG_LOG_LENGTHSCALES).exp(),
        });
        let kf = Kern {
            family: shape.kf_family,
            var: get(params::KF_LOG_VARIANCE).exp(),
            ls: get(params::KF_LOG_LENGTHSCALES).exp(),
        };
        let kh = Kern {
            family: shape.kh_family,
            var: get(params::KH_LOG_VARIANCE).exp(),
            ls: get(params::KH_LOG_LENGTHSCALES).exp(),
        };
        let mu = get(params::LATENT_MEANS);
        let log_s = get(params::LATENT_LOG_VARIANCES);
        let zx = get(params::INDUCING_ZX);
        let zh = get(params::INDUCING_ZH);
        let mean = get(params::QU_MEAN);
        let l_sh = get(params::QU_COV_H).tril_exp(shape.inducing_latent);
        let l_sx = get(params::QU_COV_X).tril_exp(shape.m_x());
        let log_noise = get(params::NOISE_LOG_VARIANCE);
        let zx_tags = Rc::new(
            shape
                .inducing_sizes
                .iter()
                .enumerate()
                .flat_map(|(r, &n)| std::iter::repeat_n(r, n))
                .collect(),
        );
        Self {
            raw,
            kg,
            kf,
            kh,
            mu,
            log_s,
            zx,
            zx_tags,
            zh,
            mean,
            l_sh,
            l_sx,
            log_noise,
        }
    }

    /// Hierarchical cross-covariance between tagged points and `Z^X`.
    fn hier_to_z(&self, x: Var<'t>, tags: Rc<Vec<usize>>) -> Var<'t> {
        self.hier(x, tags, self.zx, Rc::clone(&self.zx_tags))
    }

    fn hier(&self, a: Var<'t>, ta: Rc<Vec<usize>>, b: Var<'t>, tb: Rc<Vec<usize>>) -> Var<'t> {
        let k = gram(self.kf.family, self.kf.var, self.kf.ls, a, b, Some((ta, tb)));
        match &self.kg {
            Some(g) => k.add(gram(g.family, g.var, g.ls, a, b, None)),
            None => k,
        }
    }

    /// `k_h(x, x) = v_f + v_g`.
    fn hier_diag(&self) -> Var<'t> {
        match &self.kg {
            Some(g) => self.kf.var.add(g.var),
            None => self.kf.var,
        }
    }
}

struct BoundVars<'t> {
    f_term: Var<'t>,
    kl_u: Var<'t>,
    kl_h: Var<'t>,
    total: Var<'t>,
}

/// Pieces shared by both regimes.
struct Common<'t> {
    lx: Var<'t>,
    lh: Var<'t>,
    /// `K_X⁻¹ M K_H⁻¹`
    a: Var<'t>,
    /// `K_X⁻¹ L_Σx L_Σxᵀ K_X⁻¹` and the H counterpart.
    wwx: Var<'t>,
    wwh: Var<'t>,
    psi1: Var<'t>,
    /// `v_H (v_f + v_g)`
    psi0: Var<'t>,
}

fn common<'t>(tape: &'t Tape, l: &Leaves<'t>, jitter: f64) -> Result<Common<'t>> {
    let kx = l.hier(l.zx, Rc::clone(&l.zx_tags), l.zx, Rc::clone(&l.zx_tags));
    let lx = kx.chol(jitter)?;
    let kh = gram(l.kh.family, l.kh.var, l.kh.ls, l.zh, l.zh, None);
    let lh = kh.chol(jitter)?;
    let b = lx.chol_solve(l.mean);
    let a = lh.chol_solve(b.t()).t();
    let wx = lx.chol_solve(l.l_sx);
    let wh = lh.chol_solve(l.l_sh);
    let s = l.log_s.exp();
    let p1 = psi1(l.kh.var, l.kh.ls, l.mu, s, l.zh);
    let _ = tape;
    Ok(Common {
        lx,
        lh,
        a,
        wwx: wx.matmul(wx.t()),
        wwh: wh.matmul(wh.t()),
        psi1: p1,
        psi0: l.kh.var.scale_by(l.hier_diag()),
    })
}

fn kl_terms<'t>(tape: &'t Tape, l: &Leaves<'t>, c: &Common<'t>) -> (Var<'t>, Var<'t>) {
    let (mx, mh) = (l.l_sx.shape().0 as f64, l.l_sh.shape().0 as f64);
    let ld_kh = c.lh.log_diag_sum().scale(2.0);
    let ld_kx = c.lx.log_diag_sum().scale(2.0);
    let ld_sh = l.l_sh.log_diag_sum().scale(2.0);
    let ld_sx = l.l_sx.log_diag_sum().scale(2.0);
    let quad = l.mean.dot(c.a);
    let tr = c
        .lh
        .solve_lower(l.l_sh)
        .sq_norm()
        .scale_by(c.lx.solve_lower(l.l_sx).sq_norm());
    let kl_u = ld_kh
        .sub(ld_sh)
        .scale(mx)
        .add(ld_kx.sub(ld_sx).scale(mh))
        .add(quad)
        .add(tr)
        .add_const(-mh * mx)
        .scale(0.5);
    let (d, q) = l.mu.shape();
    let kl_h = l
        .log_s
        .exp()
        .add(l.mu.hadamard(l.mu))
        .sub(l.log_s)
        .sum()
        .add_const(-((d * q) as f64))
        .scale(0.5);
    let _ = tape;
    (kl_u, kl_h)
}

/// One output's (or the pooled shared) contribution to `ℱ`, given the
/// `n × M_X` cross-covariance, the `n × k` targets with matching `k × M_H`
/// expectation rows, the summed `Φ^H` and the noise.
#[allow(clippy::too_many_arguments)]
fn f_block<'t>(
    tape: &'t Tape,
    c: &Common<'t>,
    kfu: Var<'t>,
    y: &Matrix,
    psi1_rows: Var<'t>,
    phi_h: Var<'t>,
    log_noise: Var<'t>,
    obs: f64,
) -> Var<'t> {
    let yv = tape.leaf(y.clone());
    let data = yv.dot(kfu.matmul(c.a).matmul(psi1_rows.t()));
    let phi_x = kfu.t().matmul(kfu);
    let quad = c.a.dot(phi_x.matmul(c.a).matmul(phi_h));
    let sig = phi_h.dot(c.wwh).scale_by(phi_x.dot(c.wwx));
    let corr = c
        .lh
        .chol_solve(phi_h)
        .trace()
        .scale_by(c.lx.solve_lower(kfu.t()).sq_norm());
    let psi = c.psi0.scale(obs);
    let yy = y.dot(y);
    let inner = data.sub(
        quad.add(sig)
            .add(psi)
            .sub(corr)
            .add_const(yy)
            .scale(0.5),
    );
    let inv_noise = log_noise.scale(-1.0).exp();
    inner
        .scale_by(inv_noise)
        .sub(log_noise.scale(0.5 * obs))
        .add_const(-0.5 * obs * LOG_2PI)
}

fn tagged_leaf<'t>(tape: &'t Tape, x: &ReplicaInputs) -> (Var<'t>, Rc<Vec<usize>>) {
    let tp = x.stacked();
    (tape.leaf(tp.x), Rc::new(tp.tags))
}

fn build<'t>(tape: &'t Tape, p: &FlatParams, data: &TrainingData) -> Result<(Leaves<'t>, BoundVars<'t>)> {
    let shape = &p.layout.shape;
    data.check_against(shape)?;
    if shape.kh_family != crate::kernels::KernelFamily::Rbf {
        return Err(Error::UnsupportedFamily {
            family: shape.kh_family.to_string(),
        });
    }
    let l = Leaves::new(tape, p);
    let c = common(tape, &l, DEFAULT_BASE_JITTER)?;
    let s = l.log_s.exp();
    let mut f_term = tape.scalar(0.0);
    match data {
        TrainingData::Shared { x, y } => {
            if shape.per_output_noise {
                return Err(invalid("noise", "the shared-input bound uses a single noise variance"));
            }
            let (xv, tags) = tagged_leaf(tape, x);
            let kfu = l.hier_to_z(xv, tags);
            let mut phi_h = psi2_row(l.kh.var, l.kh.ls, l.mu, s, l.zh, 0);
            for d in 1..shape.outputs {
                phi_h = phi_h.add(psi2_row(l.kh.var, l.kh.ls, l.mu, s, l.zh, d));
            }
            let obs = (y.rows() * y.cols()) as f64;
            let ln = l.log_noise.elem(0, 0);
            f_term = f_block(tape, &c, kfu, y, c.psi1, phi_h, ln, obs);
        }
        TrainingData::PerOutput { x, y } => {
            for d in 0..shape.outputs {
                let n = y[d].len();
                if n == 0 {
                    continue;
                }
                let (xv, tags) = tagged_leaf(tape, &x[d]);
                let kfu = l.hier_to_z(xv, tags);
                let phi_h = psi2_row(l.kh.var, l.kh.ls, l.mu, s, l.zh, d);
                let ln = if shape.per_output_noise {
                    l.log_noise.elem(d, 0)
                } else {
                    l.log_noise.elem(0, 0)
                };
                let yd = Matrix::column_vector(&y[d]);
                let fd = f_block(tape, &c, kfu, &yd, c.psi1.row(d), phi_h, ln, n as f64);
                f_term = f_term.add(fd);
            }
        }
    }
    let (kl_u, kl_h) = kl_terms(tape, &l, &c);
    let total = f_term.sub(kl_u).sub(kl_h);
    Ok((
        l,
        BoundVars {
            f_term,
            kl_u,
            kl_h,
            total,
        },
    ))
}

fn breakdown(b: &BoundVars<'_>) -> Result<ElboBreakdown> {
    let out = ElboBreakdown::new(b.f_term.scalar_value(), b.kl_u.scalar_value(), b.kl_h.scalar_value());
    for (name, v) in [("f_term", out.f_term), ("kl_u", out.kl_u), ("kl_h", out.kl_h)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { span: name.into() });
        }
    }
    Ok(out)
}

/// Bound at a flat parameter vector.
pub fn elbo_flat(p: &FlatParams, data: &TrainingData) -> Result<ElboBreakdown> {
    let tape = Tape::new();
    let (_, b) = build(&tape, p, data)?;
    breakdown(&b)
}

/// Bound, its gradient with respect to every flat coordinate, and the jitter
/// used by each Cholesky factorisation.
#[derive(Clone, Debug)]
pub struct ElboGradient {
    pub elbo: ElboBreakdown,
    pub gradient: Vec<f64>,
    pub jitter: Vec<f64>,
}

pub fn elbo_flat_with_gradient(p: &FlatParams, data: &TrainingData) -> Result<ElboGradient> {
    let tape = Tape::new();
    let (l, b) = build(&tape, p, data)?;
    let elbo = breakdown(&b)?;
    let grads = tape.gradient(b.total);
    let mut gradient = vec![0.0; p.values.len()];
    for (span, leaf) in p.layout.spans.iter().zip(&l.raw) {
        let g = grads.wrt(*leaf);
        if !g.is_finite() {
            return Err(Error::NonFinite {
                span: format!("gradient of {}", span.name),
            });
        }
        gradient[span.range()].copy_from_slice(g.data());
    }
    Ok(ElboGradient {
        elbo,
        gradient,
        jitter: tape.jitter_events(),
    })
}

/// Bound for outputs sharing the inputs `x`; `y` is stacked output-major.
pub fn elbo_shared(state: &ModelState, x: &ReplicaInputs, y: &[f64]) -> Result<ElboBreakdown> {
    let data = TrainingData::shared(x.clone(), y)?;
    elbo_flat(&FlatParams::pack(state)?, &data)
}

/// Bound with each output observed on its own inputs and its own noise.
pub fn elbo_per_output(
    state: &ModelState,
    x: &[ReplicaInputs],
    y: &[Vec<f64>],
) -> Result<ElboBreakdown> {
    let data = TrainingData::per_output(x.to_vec(), y.to_vec())?;
    elbo_flat(&FlatParams::pack(state)?, &data)
}

/// Either regime.
pub fn elbo(state: &ModelState, data: &TrainingData) -> Result<ElboBreakdown> {
    elbo_flat(&FlatParams::pack(state)?, data)
}

const NAIVE_MAX_INDUCING: usize = 200;
const NAIVE_MAX_OBS: usize = 400;

/// Dense per-output ingredients: `Ψ_d`, `Φ_d`, `ψ_d`, targets and noise.
struct DenseTerms {
    kuu: Matrix,
    blocks: Vec<(Matrix, Matrix, f64, Vec<f64>, f64)>,
}

fn dense_terms(state: &ModelState, data: &TrainingData) -> Result<DenseTerms> {
    state.validate()?;
    let ind = &state.inducing;
    let total = ind.m_x() * ind.m_h();
    if total > NAIVE_MAX_INDUCING {
        return Err(Error::SizeGuard {
            what: format!("{total} inducing values (limit {NAIVE_MAX_INDUCING})"),
        });
    }
    if data.observation_count() > NAIVE_MAX_OBS {
        return Err(Error::SizeGuard {
            what: format!("{} observations (limit {NAIVE_MAX_OBS})", data.observation_count()),
        });
    }
    data.check_against(&params::ModelShape::of(state))?;
    let psi = psi_stats_closed_form(&state.latent, &state.latent_kernel, &ind.zh)?;
    let kx = hier_block_cov(&state.hier_kernel, &ind.zx, &ind.zx)?;
    let kh = latent_cov(&state.latent_kernel, &ind.zh, &ind.zh)?;
    let kuu = kron(&kh, &kx);
    let mut blocks = Vec::new();
    match data {
        TrainingData::Shared { x, y } => {
            let kfu = hier_block_cov(&state.hier_kernel, x, &ind.zx)?;
            let big_psi = kron(&psi.psi1, &kfu);
            let big_phi = kron(&psi.psi2, &kfu.transpose().matmul(&kfu));
            let kff = hier_block_cov(&state.hier_kernel, x, x)?;
            let small: f64 = psi.psi0.iter().sum::<f64>() * kff.trace();
            let noise = match state.noise {
                NoiseModel::Shared(s) => s,
                _ => return Err(invalid("noise", "the shared-input bound uses a single noise variance")),
            };
            blocks.push((big_psi, big_phi, small, y.vec(), noise));
        }
        TrainingData::PerOutput { x, y } => {
            for d in 0..y.len() {
                if y[d].is_empty() {
                    continue;
                }
                let kfu = hier_block_cov(&state.hier_kernel, &x[d], &ind.zx)?;
                let row = Matrix::row_vector(psi.psi1.row(d));
                let big_psi = kron(&row, &kfu);
                let big_phi = kron(&psi.psi2_per_output[d], &kfu.transpose().matmul(&kfu));
                let kff = hier_block_cov(&state.hier_kernel, &x[d], &x[d])?;
                let small = psi.psi0[d] * kff.trace();
                blocks.push((big_psi, big_phi, small, y[d].clone(), state.noise.variance(d)));
            }
        }
    }
    Ok(DenseTerms { kuu, blocks })
}

/// Dense Gaussian `KL(N(m, S) ‖ N(0, K))`.
pub fn kl_gaussian_dense(m: &[f64], s: &Matrix, k: &Matrix) -> Result<f64> {
    let lk = cholesky_jitter(k, DEFAULT_BASE_JITTER)?;
    let ls = cholesky_jitter(s, DEFAULT_BASE_JITTER)?;
    let mv = Matrix::column_vector(m);
    let quad = mv.dot(&tri_solve(&lk, &mv)?);
    let tr = tri_solve(&lk, s)?.trace();
    Ok(0.5 * (tr + quad - m.len() as f64 + logdet(&lk) - logdet(&ls)))
}

/// Reference bound with an arbitrary dense `q(U) = N(m, S)`, evaluated without
/// any Kronecker factorisation. Tiny problems only.
pub fn bound_dense(
    state: &ModelState,
    data: &TrainingData,
    m: &[f64],
    s: &Matrix,
) -> Result<ElboBreakdown> {
    let t = dense_terms(state, data)?;
    let k = t.kuu.rows();
    if m.len() != k || s.shape() != (k, k) {
        return Err(mismatch("dense q(U)", k, m.len()));
    }
    let lk = cholesky_jitter(&t.kuu, DEFAULT_BASE_JITTER)?;
    let mv = Matrix::column_vector(m);
    let kinv_m = tri_solve(&lk, &mv)?;
    let second = mv.matmul(&mv.transpose()).add(s);
    let mut f = 0.0;
    for (big_psi, big_phi, small, y, noise) in &t.blocks {
        let n = y.len() as f64;
        let yv = Matrix::column_vector(y);
        let kinv_phi = tri_solve(&lk, big_phi)?;
        let data_fit = yv.dot(&big_psi.matmul(&kinv_m));
        let tr_kphi = kinv_phi.trace();
        let tr_quad = kinv_phi.matmul(&tri_solve(&lk, &second)?).trace();
        f += -0.5 * n * (2.0 * PI * noise).ln() - 0.5 * yv.dot(&yv) / noise + data_fit / noise
            - 0.5 * (small - tr_kphi) / noise
            - 0.5 * tr_quad / noise;
    }
    let kl_u = kl_gaussian_dense(m, s, &t.kuu)?;
    let kl_h = crate::latent::kl_latent(&state.latent);
    Ok(ElboBreakdown::new(f, kl_u, kl_h))
}

/// The bound computed densely from `q(U) = N(vec M, Σ^H ⊗ Σ^X)`.
pub fn elbo_naive_oracle(state: &ModelState, data: &TrainingData) -> Result<ElboBreakdown> {
    let ind = &state.inducing;
    let s = kron(&ind.cov_h(), &ind.cov_x());
    bound_dense(state, data, &ind.mean.vec(), &s)
}

/// The free-form `q(U)` maximising the bound for the current kernels, `Z` and
/// `q(H)`: `S = K (K + Σ σ_d⁻² Φ_d)⁻¹ K`, `m = S K⁻¹ Σ σ_d⁻² Ψ_dᵀ y_d`.
pub fn optimal_q_u_dense(state: &ModelState, data: &TrainingData) -> Result<(Vec<f64>, Matrix)> {
    let t = dense_terms(state, data)?;
    let k = t.kuu.rows();
    let mut prec = t.kuu.clone();
    let mut rhs = Matrix::zeros(k, 1);
    for (big_psi, big_phi, _, y, noise) in &t.blocks {
        prec.add_assign(&big_phi.scale(1.0 / noise));
        rhs.add_assign(&big_psi.transpose().matmul(&Matrix::column_vector(y)).scale(1.0 / noise));
    }
    let lp = cholesky_jitter(&prec.symmetrize(), DEFAULT_BASE_JITTER)?;
    let s = t.kuu.matmul(&tri_solve(&lp, &t.kuu)?).symmetrize();
    let m = t.kuu.matmul(&tri_solve(&lp, &rhs)?);
    Ok((m.into_data(), s))
}

/// Sets `q(U)` of `state` to the free-form optimum. Only possible when
/// `M_H = 1`, where `Σ^H ⊗ Σ^X` can represent any covariance.
pub fn optimal_inducing_kron(state: &ModelState, data: &TrainingData) -> Result<InducingState> {
    if state.inducing.m_h() != 1 {
        return Err(invalid(
            "inducing_latent",
            "the Kronecker q(U) reaches the free-form optimum only with one latent inducing point",
        ));
    }
    let (m, s) = optimal_q_u_dense(state, data)?;
    let mx = state.inducing.m_x();
    let mut out = state.inducing.clone();
    out.mean = Matrix::unvec(&m, mx, 1)?;
    out.cov_h_factor = Matrix::scalar(1.0);
    out.cov_x_factor = cholesky_jitter(&s, DEFAULT_BASE_JITTER)?.lower;
    Ok(out)
}

/// `log N(y | 0, K_ff + noise)` with `H` fixed at the posterior means of
/// `q(H)`. Small problems only.
pub fn exact_log_marginal_fixed_h(state: &ModelState, data: &TrainingData) -> Result<f64> {
    state.validate()?;
    let per = data.to_per_output();
    let TrainingData::PerOutput { x, y } = &per else {
        unreachable!()
    };
    if data.observation_count() > 2000 {
        return Err(Error::SizeGuard {
            what: format!("{} observations for a dense marginal", data.observation_count()),
        });
    }
    let h = &state.latent.means;
    let kh = latent_cov(&state.latent_kernel, h, h)?;
    let stacked: Vec<TaggedPoints> = x.iter().map(ReplicaInputs::stacked).collect();
    let offsets: Vec<usize> = y
        .iter()
        .scan(0, |acc, yd| {
            let o = *acc;
            *acc += yd.len();
            Some(o)
        })
        .collect();
    let n = data.observation_count();
    let mut cov = Matrix::zeros(n, n);
    for d in 0..y.len() {
        for e in 0..y.len() {
            let block = hier_cov_tagged(&state.hier_kernel, &stacked[d], &stacked[e]);
            for i in 0..y[d].len() {
                for j in 0..y[e].len() {
                    cov[(offsets[d] + i, offsets[e] + j)] = kh[(d, e)] * block[(i, j)];
                }
            }
        }
        for i in 0..y[d].len() {
            cov[(offsets[d] + i, offsets[d] + i)] += state.noise.variance(d);
        }
    }
    let yv: Vec<f64> = y.iter().flatten().copied().collect();
    let l = cholesky_jitter(&cov, 0.0)?;
    let yc = Matrix::column_vector(&yv);
    let alpha = tri_solve(&l, &yc)?;
    Ok(-0.5 * (yc.dot(&alpha) + logdet(&l) + n as f64 * LOG_2PI))
}

/// Layout for a state, useful when only the shape is needed.
pub fn layout_of(state: &ModelState) -> ParamLayout {
    ParamLayout::new(params::ModelShape::of(state))
}
