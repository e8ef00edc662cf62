#![allow(dead_code)]

use hmogp::elbo::{ModelState, NoiseModel, TrainingData};
use hmogp::{
    HierarchicalKernelSpec, InducingState, KernelFamily, LatentPosterior, Matrix, ReplicaInputs,
    StationaryKernelSpec,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Points whose first coordinate is stratified over `[lo, hi)`.
pub fn stratified(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let w = (hi - lo) / rows.max(1) as f64;
    Matrix::from_fn(rows, cols, |i, j| {
        if j == 0 {
            lo + w * (i as f64 + rng.random_range(0.2..0.8))
        } else {
            rng.random_range(lo..hi)
        }
    })
}

pub fn lower_factor(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    Matrix::from_fn(n, n, |i, j| {
        if i == j {
            rng.random_range(0.3..1.2)
        } else if j < i {
            rng.random_range(-0.3..0.3)
        } else {
            0.0
        }
    })
}

pub fn kernel(rng: &mut ChaCha8Rng, family: KernelFamily, dim: usize) -> StationaryKernelSpec {
    StationaryKernelSpec::new(
        family,
        rng.random_range(0.3..1.5),
        (0..dim).map(|_| rng.random_range(0.4..1.5)).collect(),
    )
    .unwrap()
}

pub struct Sizes {
    pub d: usize,
    pub r: usize,
    pub n: usize,
    pub m_r: usize,
    pub m_h: usize,
    pub q: usize,
    pub v: usize,
    pub flat: bool,
    pub per_output_noise: bool,
}

impl Sizes {
    pub fn tiny(rng: &mut ChaCha8Rng) -> Self {
        Sizes {
            d: rng.random_range(1..=3),
            r: rng.random_range(1..=3),
            n: rng.random_range(1..=4),
            m_r: rng.random_range(1..=2),
            m_h: rng.random_range(1..=3),
            q: rng.random_range(1..=2),
            v: 1,
            flat: false,
            per_output_noise: false,
        }
    }
}

pub fn random_state(rng: &mut ChaCha8Rng, s: &Sizes) -> ModelState {
    let kf = kernel(rng, KernelFamily::Matern32, s.v);
    let hier_kernel = if s.flat {
        HierarchicalKernelSpec::flat(kf).unwrap()
    } else {
        HierarchicalKernelSpec::new(kernel(rng, KernelFamily::Matern32, s.v), kf).unwrap()
    };
    let latent = LatentPosterior::new(
        uniform(rng, s.d, s.q, -1.0, 1.0),
        uniform(rng, s.d, s.q, 0.05, 0.8),
    )
    .unwrap();
    let zx = ReplicaInputs::new((0..s.r).map(|_| stratified(rng, s.m_r, s.v, 0.0, 1.0)).collect()).unwrap();
    let mx = s.m_r * s.r;
    let inducing = InducingState {
        zx,
        zh: stratified(rng, s.m_h, s.q, -1.5, 1.5),
        mean: uniform(rng, mx, s.m_h, -1.0, 1.0),
        cov_h_factor: lower_factor(rng, s.m_h),
        cov_x_factor: lower_factor(rng, mx),
    };
    let noise = if s.per_output_noise {
        NoiseModel::PerOutput((0..s.d).map(|_| rng.random_range(0.05..0.5)).collect())
    } else {
        NoiseModel::Shared(rng.random_range(0.05..0.5))
    };
    ModelState {
        hier_kernel,
        latent_kernel: kernel(rng, KernelFamily::Rbf, s.q),
        latent,
        inducing,
        noise,
    }
}

pub fn shared_data(rng: &mut ChaCha8Rng, s: &Sizes) -> TrainingData {
    let x = ReplicaInputs::new((0..s.r).map(|_| uniform(rng, s.n, s.v, 0.0, 1.0)).collect()).unwrap();
    let y: Vec<f64> = (0..s.d * s.r * s.n).map(|_| rng.random_range(-1.5..1.5)).collect();
    TrainingData::shared(x, &y).unwrap()
}

/// Ragged per-output data; some replicas of some outputs may be empty.
pub fn per_output_data(rng: &mut ChaCha8Rng, s: &Sizes) -> TrainingData {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..s.d {
        let blocks: Vec<Matrix> = (0..s.r)
            .map(|_| {
                let n = rng.random_range(0..=s.n.max(1));
                uniform(rng, n, s.v, 0.0, 1.0)
            })
            .collect();
        let x = ReplicaInputs::new(blocks).unwrap();
        ys.push((0..x.total_points()).map(|_| rng.random_range(-1.5..1.5)).collect());
        xs.push(x);
    }
    TrainingData::per_output(xs, ys).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}
