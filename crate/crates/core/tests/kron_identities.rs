mod common;

use common::*;
use hmogp::linalg::{cholesky_jitter, kron, kron_matvec, logdet, trace_kron, tri_solve};
use hmogp::Matrix;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn max_rel(a: &Matrix, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    (0..a.rows())
        .flat_map(|i| (0..a.cols()).map(move |j| (i, j)))
        .map(|(i, j)| (a[(i, j)] - b[(i, j)]).abs() / scale)
        .fold(0.0, f64::max)
}

/// `(A ⊗ B)[i·p + k, j·q + l] = A[i,j]·B[k,l]`, written out by index.
fn kron_by_definition(a: &Matrix, b: &Matrix) -> DMatrix<f64> {
    let (p, q) = b.shape();
    DMatrix::from_fn(a.rows() * p, a.cols() * q, |r, c| a[(r / p, c / q)] * b[(r % p, c % q)])
}

fn spd(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Matrix {
    let g = uniform(rng, n, n, -1.0, 1.0);
    g.matmul(&g.transpose()).add_diagonal(0.5)
}

#[test]
fn small_examples() {
    assert_eq!(kron(&Matrix::identity(2), &Matrix::identity(3)), Matrix::identity(6));
    let b = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
    assert_eq!(kron(&Matrix::scalar(2.0), &b), b.scale(2.0));
    let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let swap = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let expected = Matrix::from_rows(&[
        vec![0.0, 1.0, 0.0, 2.0],
        vec![1.0, 0.0, 2.0, 0.0],
        vec![0.0, 3.0, 0.0, 4.0],
        vec![3.0, 0.0, 4.0, 0.0],
    ])
    .unwrap();
    assert_eq!(kron(&a, &swap), expected);

    let x = [0.3, -1.0, 2.0, 0.5, 4.0, -0.25];
    assert_eq!(kron_matvec(&Matrix::identity(2), &Matrix::identity(3), &x).unwrap(), x.to_vec());
    let b3 = Matrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64 - 4.0);
    let scaled = kron_matvec(&Matrix::scalar(-1.5), &b3, &x[..3]).unwrap();
    let direct: Vec<f64> = b3.matvec(&x[..3]).iter().map(|v| -1.5 * v).collect();
    assert_eq!(scaled, direct);

    assert_eq!(trace_kron(&Matrix::identity(2), &Matrix::identity(3)).unwrap(), 6.0);
    assert_eq!(trace_kron(&Matrix::zeros(2, 2), &b3).unwrap(), 0.0);
    assert!(trace_kron(&Matrix::zeros(2, 3), &b3).is_err());
    assert!(kron_matvec(&a, &b3, &x[..5]).is_err());
}

#[test]
fn cholesky_examples() {
    let c = cholesky_jitter(&Matrix::identity(3), 1e-6).unwrap();
    assert_eq!(c.lower, Matrix::identity(3));
    assert_eq!(c.jitter_used, 0.0);

    let c = cholesky_jitter(&Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap(), 1e-6).unwrap();
    let expected = [2.0, 0.0, 1.0, 2f64.sqrt()];
    for (a, b) in c.lower.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }

    let c = cholesky_jitter(&Matrix::filled(2, 2, 1.0), 1e-6).unwrap();
    assert!(c.jitter_used > 0.0);

    let d = cholesky_jitter(&Matrix::diagonal(&[4.0, 9.0]), 1e-6).unwrap();
    assert!((logdet(&d) - 36f64.ln()).abs() < 1e-14);
    let rhs = Matrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64);
    let id = cholesky_jitter(&Matrix::identity(3), 1e-6).unwrap();
    assert_eq!(tri_solve(&id, &rhs).unwrap(), rhs);

    assert!(cholesky_jitter(&Matrix::diagonal(&[1.0, -5.0]), 1e-6).is_err());
}

/// Fifty random instances of every identity against nalgebra.
#[test]
fn identities_against_dense_oracle() {
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (m, n, p, q) = (
            r.random_range(1..=4),
            r.random_range(1..=4),
            r.random_range(1..=4),
            r.random_range(1..=4),
        );
        let a = uniform(&mut r, m, n, -2.0, 2.0);
        let b = uniform(&mut r, p, q, -2.0, 2.0);
        let k = kron(&a, &b);
        worst = worst.max(max_rel(&k, &kron_by_definition(&a, &b)));

        let x: Vec<f64> = (0..n * q).map(|_| r.random_range(-1.0..1.0)).collect();
        let fast = kron_matvec(&a, &b, &x).unwrap();
        let dense = na(&k) * nalgebra::DVector::from_column_slice(&x);
        worst = worst.max(max_rel(&Matrix::column_vector(&fast), &DMatrix::from_column_slice(m * p, 1, dense.as_slice())));

        let (s, t) = (r.random_range(1..=3), r.random_range(1..=3));
        let c = uniform(&mut r, n, s, -2.0, 2.0);
        let d = uniform(&mut r, q, t, -2.0, 2.0);
        let lhs = kron(&a, &b).matmul(&kron(&c, &d));
        let rhs = kron_by_definition(&a.matmul(&c), &b.matmul(&d));
        worst = worst.max(max_rel(&lhs, &rhs));

        let sa = uniform(&mut r, m, m, -2.0, 2.0);
        let sb = uniform(&mut r, p, p, -2.0, 2.0);
        let tr = trace_kron(&sa, &sb).unwrap();
        let dense_tr = kron_by_definition(&sa, &sb).trace();
        assert!((tr - dense_tr).abs() <= 1e-12 * dense_tr.abs().max(1.0));

        let a5 = spd(&mut r, 5);
        let f = cholesky_jitter(&a5, 1e-6).unwrap();
        let rhs = uniform(&mut r, 5, 2, -1.0, 1.0);
        let sol = tri_solve(&f, &rhs).unwrap();
        let oracle = na(&a5).try_inverse().unwrap() * na(&rhs);
        worst = worst.max(max_rel(&sol, &oracle));
        let ld = na(&a5).determinant().ln();
        assert!((logdet(&f) - ld).abs() < 1e-10 * ld.abs().max(1.0));
    }
    assert!(worst < 1e-10, "worst relative error {worst:e}");
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn conformable() -> impl Strategy<Value = (Matrix, Matrix, Vec<f64>)> {
    (1usize..=4, 1usize..=4, 1usize..=4, 1usize..=4).prop_flat_map(|(m, n, p, q)| {
        (matrix(m, n), matrix(p, q), prop::collection::vec(-3.0f64..3.0, n * q))
    })
}

proptest! {
    #[test]
    fn kron_matvec_equals_dense((a, b, x) in conformable()) {
        let fast = kron_matvec(&a, &b, &x).unwrap();
        let dense = na(&kron(&a, &b)) * nalgebra::DVector::from_column_slice(&x);
        let scale = dense.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (u, v) in fast.iter().zip(dense.iter()) {
            prop_assert!((u - v).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn mixed_product(
        (a, c) in (1usize..=3, 1usize..=3, 1usize..=3).prop_flat_map(|(m, n, s)| (matrix(m, n), matrix(n, s))),
        (b, d) in (1usize..=3, 1usize..=3, 1usize..=3).prop_flat_map(|(p, q, t)| (matrix(p, q), matrix(q, t))),
    ) {
        let lhs = kron(&a, &b).matmul(&kron(&c, &d));
        let rhs = kron_by_definition(&a.matmul(&c), &b.matmul(&d));
        prop_assert!(max_rel(&lhs, &rhs) < 1e-10);
    }

    #[test]
    fn trace_identity((a, b) in (1usize..=4, 1usize..=4).prop_flat_map(|(m, p)| (matrix(m, m), matrix(p, p)))) {
        let tr = trace_kron(&a, &b).unwrap();
        let dense = kron_by_definition(&a, &b).trace();
        prop_assert!((tr - dense).abs() <= 1e-12 * dense.abs().max(1.0));
    }

    #[test]
    fn cholesky_reconstructs(g in (1usize..=6).prop_flat_map(|n| matrix(n, n)), shift in 0.0f64..1.0) {
        // Gram matrices are PSD but may be singular, so jitter is sometimes needed.
        let a = g.matmul(&g.transpose()).add_diagonal(shift * 1e-3);
        let f = cholesky_jitter(&a, 1e-6).unwrap();
        let n = a.rows();
        for i in 0..n {
            prop_assert!(f.lower[(i, i)] > 0.0);
            for j in i + 1..n {
                prop_assert_eq!(f.lower[(i, j)], 0.0);
            }
        }
        let residual = f.lower.matmul(&f.lower.transpose()).sub(&a.add_diagonal(f.jitter_used));
        prop_assert!(residual.max_abs() < 1e-8 * (1.0 + a.max_abs()));
    }

    #[test]
    fn vec_unvec_round_trip(m in (1usize..=5, 1usize..=5).prop_flat_map(|(r, c)| matrix(r, c))) {
        let v = m.vec();
        for j in 0..m.cols() {
            for i in 0..m.rows() {
                prop_assert_eq!(v[j * m.rows() + i], m[(i, j)]);
            }
        }
        prop_assert_eq!(Matrix::unvec(&v, m.rows(), m.cols()).unwrap(), m);
    }
}
