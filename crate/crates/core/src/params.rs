//! Flat unconstrained parameter vector and its mapping to [`ModelState`].
//!
//! Positive quantities are stored as logarithms; the two Cholesky factors of
//! `q(U)` are stored row by row over their lower triangle with the diagonal
//! in log-space.

use serde::{Deserialize, Serialize};

use crate::elbo::{ModelState, NoiseModel};
use crate::error::{invalid, mismatch, Result};
use crate::kernels::{HierarchicalKernelSpec, KernelFamily, ReplicaInputs, StationaryKernelSpec};
use crate::latent::{InducingState, LatentPosterior};
use crate::linalg::Matrix;

/// Sizes and fixed structural choices; everything that is not optimised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub outputs: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    pub inducing_sizes: Vec<usize>,
    pub inducing_latent: usize,
    pub kg_family: Option<KernelFamily>,
    pub kf_family: KernelFamily,
    pub kh_family: KernelFamily,
    pub per_output_noise: bool,
}

impl ModelShape {
    pub fn replicas(&self) -> usize {
        self.inducing_sizes.len()
    }

    pub fn m_x(&self) -> usize {
        self.inducing_sizes.iter().sum()
    }

    pub fn of(state: &ModelState) -> Self {
        Self {
            outputs: state.latent.outputs(),
            latent_dim: state.latent.latent_dim(),
            input_dim: state.hier_kernel.input_dim(),
            inducing_sizes: state.inducing.zx.block_sizes(),
            inducing_latent: state.inducing.m_h(),
            kg_family: state.hier_kernel.kg.as_ref().map(|k| k.family),
            kf_family: state.hier_kernel.kf.family,
            kh_family: state.latent_kernel.family,
            per_output_noise: matches!(state.noise, NoiseModel::PerOutput(_)),
        }
    }
}

/// A named, contiguous slice of the flat vector holding a `rows × cols`
/// block in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub name: String,
    pub start: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len()
    }
}

pub const KG_LOG_VARIANCE: &str = "kg.log_variance";
pub const KG_LOG_LENGTHSCALES: &str = "kg.log_lengthscales";
pub const KF_LOG_VARIANCE: &str = "kf.log_variance";
pub const KF_LOG_LENGTHSCALES: &str = "kf.log_lengthscales";
pub const KH_LOG_VARIANCE: &str = "kh.log_variance";
pub const KH_LOG_LENGTHSCALES: &str = "kh.log_lengthscales";
pub const LATENT_MEANS: &str = "latent.means";
pub const LATENT_LOG_VARIANCES: &str = "latent.log_variances";
pub const INDUCING_ZX: &str = "inducing.zx";
pub const INDUCING_ZH: &str = "inducing.zh";
pub const QU_MEAN: &str = "q_u.mean";
pub const QU_COV_H: &str = "q_u.cov_h";
pub const QU_COV_X: &str = "q_u.cov_x";
pub const NOISE_LOG_VARIANCE: &str = "noise.log_variance";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub shape: ModelShape,
    pub spans: Vec<Span>,
}

impl ParamLayout {
    pub fn new(shape: ModelShape) -> Self {
        let (d, q, v) = (shape.outputs, shape.latent_dim, shape.input_dim);
        let (mx, mh) = (shape.m_x(), shape.inducing_latent);
        let mut blocks: Vec<(&str, usize, usize)> = Vec::new();
        if shape.kg_family.is_some() {
            blocks.push((KG_LOG_VARIANCE, 1, 1));
            blocks.push((KG_LOG_LENGTHSCALES, 1, v));
        }
        blocks.extend([
            (KF_LOG_VARIANCE, 1, 1),
            (KF_LOG_LENGTHSCALES, 1, v),
            (KH_LOG_VARIANCE, 1, 1),
            (KH_LOG_LENGTHSCALES, 1, q),
            (LATENT_MEANS, d, q),
            (LATENT_LOG_VARIANCES, d, q),
            (INDUCING_ZX, mx, v),
            (INDUCING_ZH, mh, q),
            (QU_MEAN, mx, mh),
            (QU_COV_H, mh * (mh + 1) / 2, 1),
            (QU_COV_X, mx * (mx + 1) / 2, 1),
            (NOISE_LOG_VARIANCE, if shape.per_output_noise { d } else { 1 }, 1),
        ]);
        let mut start = 0;
        let spans = blocks
            .into_iter()
            .map(|(name, rows, cols)| {
                let s = Span {
                    name: name.to_string(),
                    start,
                    rows,
                    cols,
                };
                start += rows * cols;
                s
            })
            .collect();
        Self { shape, spans }
    }

    pub fn len(&self) -> usize {
        self.spans.last().map_or(0, |s| s.start + s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn span(&self, name: &str) -> Option<&Span> {
        self.spans.iter().find(|s| s.name == name)
    }

    /// The span containing flat index `i`.
    pub fn span_of(&self, i: usize) -> Option<&Span> {
        self.spans.iter().find(|s| s.range().contains(&i))
    }

    pub fn block(&self, values: &[f64], name: &str) -> Matrix {
        let s = self.span(name).expect("span present in layout");
        Matrix::from_raw(s.rows, s.cols, values[s.range()].to_vec())
    }
}

/// Unconstrained parameter vector together with its layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatParams {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

fn pack_tril(l: &Matrix) -> Vec<f64> {
    let n = l.rows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in 0..=i {
            out.push(if i == j { l[(i, j)].ln() } else { l[(i, j)] });
        }
    }
    out
}

fn unpack_tril(v: &[f64], n: usize) -> Matrix {
    let mut l = Matrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            l[(i, j)] = if i == j { v[k].exp() } else { v[k] };
            k += 1;
        }
    }
    l
}

impl FlatParams {
    pub fn pack(state: &ModelState) -> Result<Self> {
        state.validate()?;
        let layout = ParamLayout::new(ModelShape::of(state));
        let mut values = vec![0.0; layout.len()];
        let mut put = |name: &str, data: Vec<f64>| {
            let s = layout.span(name).expect("span present in layout");
            values[s.range()].copy_from_slice(&data);
        };
        let logs = |v: &[f64]| v.iter().map(|x| x.ln()).collect::<Vec<_>>();
        if let Some(kg) = &state.hier_kernel.kg {
            put(KG_LOG_VARIANCE, vec![kg.variance.ln()]);
            put(KG_LOG_LENGTHSCALES, logs(&kg.lengthscales));
        }
        let kf = &state.hier_kernel.kf;
        put(KF_LOG_VARIANCE, vec![kf.variance.ln()]);
        put(KF_LOG_LENGTHSCALES, logs(&kf.lengthscales));
        let kh = &state.latent_kernel;
        put(KH_LOG_VARIANCE, vec![kh.variance.ln()]);
        put(KH_LOG_LENGTHSCALES, logs(&kh.lengthscales));
        put(LATENT_MEANS, state.latent.means.data().to_vec());
        put(LATENT_LOG_VARIANCES, logs(state.latent.variances.data()));
        put(INDUCING_ZX, state.inducing.zx.stacked().x.into_data());
        put(INDUCING_ZH, state.inducing.zh.data().to_vec());
        put(QU_MEAN, state.inducing.mean.data().to_vec());
        put(QU_COV_H, pack_tril(&state.inducing.cov_h_factor));
        put(QU_COV_X, pack_tril(&state.inducing.cov_x_factor));
        let noise = match &state.noise {
            NoiseModel::Shared(s) => vec![s.ln()],
            NoiseModel::PerOutput(v) => logs(v),
        };
        put(NOISE_LOG_VARIANCE, noise);
        Ok(Self { values, layout })
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.layout.len() {
            return Err(mismatch("FlatParams::with_values", self.layout.len(), values.len()));
        }
        Ok(Self {
            values,
            layout: self.layout.clone(),
        })
    }

    pub fn block(&self, name: &str) -> Matrix {
        self.layout.block(&self.values, name)
    }

    pub fn unpack(&self) -> Result<ModelState> {
        if self.values.iter().any(|v| !v.is_finite()) {
            let i = self.values.iter().position(|v| !v.is_finite()).unwrap_or(0);
            let span = self.layout.span_of(i).map_or("?".into(), |s| s.name.clone());
            return Err(crate::error::Error::NonFinite { span });
        }
        let shape = &self.layout.shape;
        let exp_all = |m: Matrix| m.map(f64::exp);
        let kernel = |family, var: &str, ls: &str| {
            StationaryKernelSpec::new(
                family,
                self.block(var).as_scalar().exp(),
                exp_all(self.block(ls)).into_data(),
            )
        };
        let kf = kernel(shape.kf_family, KF_LOG_VARIANCE, KF_LOG_LENGTHSCALES)?;
        let hier_kernel = match shape.kg_family {
            Some(f) => HierarchicalKernelSpec::new(kernel(f, KG_LOG_VARIANCE, KG_LOG_LENGTHSCALES)?, kf)?,
            None => HierarchicalKernelSpec::flat(kf)?,
        };
        let latent_kernel = kernel(shape.kh_family, KH_LOG_VARIANCE, KH_LOG_LENGTHSCALES)?;
        let latent = LatentPosterior::new(
            self.block(LATENT_MEANS),
            exp_all(self.block(LATENT_LOG_VARIANCES)),
        )?;
        let (mx, mh) = (shape.m_x(), shape.inducing_latent);
        let inducing = InducingState {
            zx: ReplicaInputs::from_stacked(&self.block(INDUCING_ZX), &shape.inducing_sizes)?,
            zh: self.block(INDUCING_ZH),
            mean: self.block(QU_MEAN),
            cov_h_factor: unpack_tril(self.block(QU_COV_H).data(), mh),
            cov_x_factor: unpack_tril(self.block(QU_COV_X).data(), mx),
        };
        let nv = exp_all(self.block(NOISE_LOG_VARIANCE)).into_data();
        let noise = if shape.per_output_noise {
            NoiseModel::PerOutput(nv)
        } else {
            NoiseModel::Shared(nv[0])
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

    /// Indices of the coordinates belonging to the named spans.
    pub fn indices_of(&self, names: &[String]) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for n in names {
            match self.layout.span(n) {
                Some(s) => out.extend(s.range()),
                None if n.starts_with("kg.") && self.layout.shape.kg_family.is_none() => {}
                None => return Err(invalid("frozen", format!("unknown parameter span {n}"))),
            }
        }
        Ok(out)
    }
}
