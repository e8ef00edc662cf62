//! Stationary covariance functions, the hierarchical replica kernel and the
//! latent output kernel.
//!
//! The hierarchical kernel adds `k_f` to `k_g` for pairs of points from the same
//! replica and uses `k_g` alone across replicas. A model without `k_g` (the flat
//! ablation) keeps only the same-replica `k_f` blocks.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::linalg::{kron, Matrix};

const SQRT3: f64 = 1.732_050_807_568_877_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Rbf,
    Matern32,
}

impl std::fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelFamily::Rbf => write!(f, "rbf"),
            KernelFamily::Matern32 => write!(f, "matern32"),
        }
    }
}

/// Stationary kernel with one lengthscale per input dimension (ARD).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryKernelSpec {
    pub family: KernelFamily,
    pub variance: f64,
    pub lengthscales: Vec<f64>,
}

impl StationaryKernelSpec {
    pub fn new(family: KernelFamily, variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let spec = Self {
            family,
            variance,
            lengthscales,
        };
        spec.validate("kernel")?;
        Ok(spec)
    }

    pub fn rbf(variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        Self::new(KernelFamily::Rbf, variance, lengthscales)
    }

    pub fn matern32(variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        Self::new(KernelFamily::Matern32, variance, lengthscales)
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(invalid(format!("{name}.variance"), "must be positive and finite"));
        }
        if self.lengthscales.is_empty() {
            return Err(invalid(format!("{name}.lengthscales"), "need at least one"));
        }
        if self.lengthscales.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(invalid(
                format!("{name}.lengthscales"),
                "must be positive and finite",
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn scaled_sq_dist(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| {
                let d = (x - y) / l;
                d * d
            })
            .sum()
    }

    /// Kernel value for one pair of points.
    pub fn eval_pair(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2 = self.scaled_sq_dist(a, b);
        match self.family {
            KernelFamily::Rbf => self.variance * (-0.5 * r2).exp(),
            KernelFamily::Matern32 => {
                let sr = SQRT3 * r2.sqrt();
                self.variance * (1.0 + sr) * (-sr).exp()
            }
        }
    }

    /// Partial derivatives of one kernel entry. Returns `(∂k/∂variance,
    /// ∂k/∂ℓ_q, ∂k/∂a_q)`; the gradient for `b` is the negation of the one
    /// for `a`.
    fn pair_partials(&self, a: &[f64], b: &[f64], dl: &mut [f64], da: &mut [f64]) -> f64 {
        let r2 = self.scaled_sq_dist(a, b);
        match self.family {
            KernelFamily::Rbf => {
                let k = self.variance * (-0.5 * r2).exp();
                for q in 0..a.len() {
                    let l = self.lengthscales[q];
                    let d = a[q] - b[q];
                    dl[q] = k * d * d / (l * l * l);
                    da[q] = -k * d / (l * l);
                }
                k / self.variance
            }
            KernelFamily::Matern32 => {
                let sr = SQRT3 * r2.sqrt();
                let e = (-sr).exp();
                // dk/dΔ_q = −3 v e^{−√3 r} Δ_q / ℓ_q², finite at r = 0.
                let c = 3.0 * self.variance * e;
                for q in 0..a.len() {
                    let l = self.lengthscales[q];
                    let d = a[q] - b[q];
                    dl[q] = c * d * d / (l * l * l);
                    da[q] = -c * d / (l * l);
                }
                (1.0 + sr) * e
            }
        }
    }
}

fn check_dim(spec: &StationaryKernelSpec, x: &Matrix, op: &'static str) -> Result<()> {
    if x.rows() > 0 && x.cols() != spec.input_dim() {
        return Err(mismatch(
            op,
            format!("{} columns", spec.input_dim()),
            x.cols(),
        ));
    }
    Ok(())
}

/// Gram matrix `k(x1_i, x2_j)`.
pub fn eval_stationary(spec: &StationaryKernelSpec, x1: &Matrix, x2: &Matrix) -> Result<Matrix> {
    check_dim(spec, x1, "eval_stationary")?;
    check_dim(spec, x2, "eval_stationary")?;
    Ok(masked_gram(spec, x1, x2, None))
}

/// Gram matrix restricted to pairs whose tags agree when `mask` is given
/// (other entries are zero).
pub(crate) fn masked_gram(
    spec: &StationaryKernelSpec,
    x1: &Matrix,
    x2: &Matrix,
    mask: Option<(&[usize], &[usize])>,
) -> Matrix {
    Matrix::from_fn(x1.rows(), x2.rows(), |i, j| match mask {
        Some((t1, t2)) if t1[i] != t2[j] => 0.0,
        _ => spec.eval_pair(x1.row(i), x2.row(j)),
    })
}

/// Vector-Jacobian product of a (masked) Gram matrix.
#[derive(Clone, Debug)]
pub struct GramGradient {
    pub variance: f64,
    pub lengthscales: Vec<f64>,
    pub x1: Matrix,
    pub x2: Matrix,
}

/// Contracts `upstream` (same shape as the Gram matrix) with the Jacobian of
/// each Gram entry with respect to the kernel parameters and both point sets.
pub fn gram_backward(
    spec: &StationaryKernelSpec,
    x1: &Matrix,
    x2: &Matrix,
    mask: Option<(&[usize], &[usize])>,
    upstream: &Matrix,
) -> GramGradient {
    let q = spec.input_dim();
    let mut g = GramGradient {
        variance: 0.0,
        lengthscales: vec![0.0; q],
        x1: Matrix::zeros(x1.rows(), x1.cols()),
        x2: Matrix::zeros(x2.rows(), x2.cols()),
    };
    let mut dl = vec![0.0; q];
    let mut da = vec![0.0; q];
    for i in 0..x1.rows() {
        for j in 0..x2.rows() {
            if let Some((t1, t2)) = mask {
                if t1[i] != t2[j] {
                    continue;
                }
            }
            let u = upstream[(i, j)];
            if u == 0.0 {
                continue;
            }
            let dv = spec.pair_partials(x1.row(i), x2.row(j), &mut dl, &mut da);
            g.variance += u * dv;
            for k in 0..q {
                g.lengthscales[k] += u * dl[k];
                g.x1[(i, k)] += u * da[k];
                g.x2[(j, k)] -= u * da[k];
            }
        }
    }
    g
}

/// Hierarchical kernel: `k_g` shared across replicas (absent in the flat
/// ablation) plus `k_f` within a replica.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalKernelSpec {
    pub kg: Option<StationaryKernelSpec>,
    pub kf: StationaryKernelSpec,
}

impl HierarchicalKernelSpec {
    pub fn new(kg: StationaryKernelSpec, kf: StationaryKernelSpec) -> Result<Self> {
        let spec = Self { kg: Some(kg), kf };
        spec.validate()?;
        Ok(spec)
    }

    /// Replicas independent given the output (`k_g ≡ 0`).
    pub fn flat(kf: StationaryKernelSpec) -> Result<Self> {
        let spec = Self { kg: None, kf };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.kf.validate("kf")?;
        if let Some(kg) = &self.kg {
            kg.validate("kg")?;
            if kg.input_dim() != self.kf.input_dim() {
                return Err(mismatch("HierarchicalKernelSpec", self.kf.input_dim(), kg.input_dim()));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.kf.input_dim()
    }

    /// `k_h(x, x)`, the prior variance of a single function value.
    pub fn diag_value(&self) -> f64 {
        self.kf.variance + self.kg.as_ref().map_or(0.0, |k| k.variance)
    }

    pub fn eval_pair(&self, a: &[f64], ra: usize, b: &[f64], rb: usize) -> f64 {
        let g = self.kg.as_ref().map_or(0.0, |k| k.eval_pair(a, b));
        if ra == rb {
            g + self.kf.eval_pair(a, b)
        } else {
            g
        }
    }
}

/// Points with a replica tag per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggedPoints {
    pub x: Matrix,
    pub tags: Vec<usize>,
}

impl TaggedPoints {
    pub fn new(x: Matrix, tags: Vec<usize>) -> Result<Self> {
        if x.rows() != tags.len() {
            return Err(mismatch("TaggedPoints", x.rows(), tags.len()));
        }
        Ok(Self { x, tags })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub(crate) fn check_tags(&self, replicas: usize) -> Result<()> {
        match self.tags.iter().find(|&&t| t >= replicas) {
            Some(&tag) => Err(Error::ReplicaTag { tag, replicas }),
            None => Ok(()),
        }
    }
}

/// One input block per replica, all sharing the same input dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaInputs {
    blocks: Vec<Matrix>,
    dim: usize,
}

impl ReplicaInputs {
    pub fn new(blocks: Vec<Matrix>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(invalid("replica inputs", "need at least one replica"));
        }
        let dim = blocks
            .iter()
            .find(|b| b.rows() > 0)
            .map_or(blocks[0].cols(), Matrix::cols);
        for b in &blocks {
            if b.rows() > 0 && b.cols() != dim {
                return Err(mismatch("ReplicaInputs", dim, b.cols()));
            }
        }
        let blocks = blocks
            .into_iter()
            .map(|b| if b.rows() == 0 { Matrix::zeros(0, dim) } else { b })
            .collect();
        Ok(Self { blocks, dim })
    }

    /// `replicas` copies of the same block.
    pub fn repeated(block: &Matrix, replicas: usize) -> Result<Self> {
        Self::new(vec![block.clone(); replicas])
    }

    pub fn replica_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[Matrix] {
        &self.blocks
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(Matrix::rows).collect()
    }

    pub fn total_points(&self) -> usize {
        self.blocks.iter().map(Matrix::rows).sum()
    }

    /// All points stacked replica by replica, each tagged with its replica.
    pub fn stacked(&self) -> TaggedPoints {
        let x = Matrix::vstack(&self.blocks).expect("blocks share a dimension");
        let tags = self
            .blocks
            .iter()
            .enumerate()
            .flat_map(|(r, b)| std::iter::repeat_n(r, b.rows()))
            .collect();
        TaggedPoints { x, tags }
    }

    /// Inverse of [`ReplicaInputs::stacked`] given the block sizes.
    pub fn from_stacked(x: &Matrix, sizes: &[usize]) -> Result<Self> {
        if sizes.iter().sum::<usize>() != x.rows() {
            return Err(mismatch("ReplicaInputs::from_stacked", x.rows(), sizes.iter().sum::<usize>()));
        }
        let mut start = 0;
        let mut blocks = Vec::with_capacity(sizes.len());
        for &n in sizes {
            let idx: Vec<usize> = (start..start + n).collect();
            let mut b = x.select_rows(&idx);
            if n == 0 {
                b = Matrix::zeros(0, x.cols());
            }
            blocks.push(b);
            start += n;
        }
        Self::new(blocks)
    }
}

/// Hierarchical covariance between tagged point sets (unchecked shapes).
pub(crate) fn hier_cov_tagged(
    spec: &HierarchicalKernelSpec,
    a: &TaggedPoints,
    b: &TaggedPoints,
) -> Matrix {
    let mut k = masked_gram(&spec.kf, &a.x, &b.x, Some((&a.tags, &b.tags)));
    if let Some(kg) = &spec.kg {
        k.add_assign(&masked_gram(kg, &a.x, &b.x, None));
    }
    k
}

/// R×R grid of blocks: `k_g + k_f` on diagonal blocks and `k_g` off the
/// diagonal. Serves `K_ff^X`, `K_UU^X` and `K_fU^X`.
pub fn hier_block_cov(
    spec: &HierarchicalKernelSpec,
    a: &ReplicaInputs,
    b: &ReplicaInputs,
) -> Result<Matrix> {
    if a.replica_count() != b.replica_count() {
        return Err(mismatch(
            "hier_block_cov replicas",
            a.replica_count(),
            b.replica_count(),
        ));
    }
    for x in [a, b] {
        if x.total_points() > 0 && x.dim() != spec.input_dim() {
            return Err(mismatch("hier_block_cov input dim", spec.input_dim(), x.dim()));
        }
    }
    Ok(hier_cov_tagged(spec, &a.stacked(), &b.stacked()))
}

/// Gram matrix of the latent output kernel between latent coordinates.
pub fn latent_cov(spec: &StationaryKernelSpec, h1: &Matrix, h2: &Matrix) -> Result<Matrix> {
    check_dim(spec, h1, "latent_cov")?;
    check_dim(spec, h2, "latent_cov")?;
    Ok(masked_gram(spec, h1, h2, None))
}

/// `K^H ⊗ K^X`, ordered output-major (the output index varies slowest).
pub fn full_cov(kh: &Matrix, kx: &Matrix) -> Result<Matrix> {
    for m in [kh, kx] {
        if !m.is_square() {
            return Err(Error::NotSquare {
                op: "full_cov",
                rows: m.rows(),
                cols: m.cols(),
            });
        }
    }
    Ok(kron(kh, kx))
}
