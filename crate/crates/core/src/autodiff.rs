//! A small reverse-mode tape over dense matrices.
//!
//! Every node stores its value and a closure mapping the node's adjoint to the
//! adjoints of its parents. Scalars are 1×1 matrices. Only the operations the
//! bound needs are provided, each with a hand-written vector-Jacobian product.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::Result;
use crate::kernels::{gram_backward, masked_gram, KernelFamily, StationaryKernelSpec};
use crate::latent::{psi1_backward, psi1_matrix, psi2_backward, psi2_single};
use crate::linalg::{cholesky_jitter, solve_lower, solve_lower_transpose, Matrix};

type Backward = Box<dyn Fn(&Matrix) -> Vec<Matrix>>;

struct Node {
    value: Rc<Matrix>,
    parents: Vec<usize>,
    backward: Option<Backward>,
}

/// Records operations for one evaluation; drop it to free the graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    jitter: RefCell<Vec<f64>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Adjoints of every node with respect to one scalar output.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Matrix {
        match &self.grads[v.idx] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.idx];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Jitter added by each Cholesky factorisation recorded so far.
    pub fn jitter_events(&self) -> Vec<f64> {
        self.jitter.borrow().clone()
    }

    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(value, Vec::new(), None)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Matrix::scalar(value))
    }

    fn push(&self, value: Matrix, parents: Vec<usize>, backward: Option<Backward>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn op(&self, value: Matrix, parents: &[Var<'_>], backward: Backward) -> Var<'_> {
        self.push(value, parents.iter().map(|p| p.idx).collect(), Some(backward))
    }

    /// Back-propagates from a 1×1 output.
    pub fn gradient(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.idx].value.shape(), (1, 1), "gradient of a non-scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[output.idx] = Some(Matrix::scalar(1.0));
        for i in (0..=output.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(bw) = &node.backward {
                for (p, pg) in node.parents.iter().zip(bw(&g)) {
                    match &mut grads[*p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape()).collect(),
        }
    }
}

fn tril(m: &Matrix) -> Matrix {
    m.lower_triangle()
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Matrix> {
        Rc::clone(&self.tape.nodes.borrow()[self.idx].value)
    }

    pub fn scalar_value(&self) -> f64 {
        self.value().as_scalar()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn matmul(self, b: Var<'t>) -> Var<'t> {
        let (av, bv) = (self.value(), b.value());
        let c = av.matmul(&bv);
        self.tape.op(
            c,
            &[self, b],
            Box::new(move |g| vec![g.matmul(&bv.transpose()), av.transpose().matmul(g)]),
        )
    }

    pub fn t(self) -> Var<'t> {
        let v = self.value().transpose();
        self.tape.op(v, &[self], Box::new(|g| vec![g.transpose()]))
    }

    pub fn add(self, b: Var<'t>) -> Var<'t> {
        let v = self.value().add(&b.value());
        self.tape
            .op(v, &[self, b], Box::new(|g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(self, b: Var<'t>) -> Var<'t> {
        let v = self.value().sub(&b.value());
        self.tape
            .op(v, &[self, b], Box::new(|g| vec![g.clone(), g.scale(-1.0)]))
    }

    pub fn hadamard(self, b: Var<'t>) -> Var<'t> {
        let (av, bv) = (self.value(), b.value());
        let v = av.hadamard(&bv);
        self.tape.op(
            v,
            &[self, b],
            Box::new(move |g| vec![g.hadamard(&bv), g.hadamard(&av)]),
        )
    }

    /// Product with a 1×1 variable.
    pub fn scale_by(self, s: Var<'t>) -> Var<'t> {
        let (av, sv) = (self.value(), s.scalar_value());
        let v = av.scale(sv);
        self.tape.op(
            v,
            &[self, s],
            Box::new(move |g| vec![g.scale(sv), Matrix::scalar(g.dot(&av))]),
        )
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().scale(c);
        self.tape.op(v, &[self], Box::new(move |g| vec![g.scale(c)]))
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.tape.op(v, &[self], Box::new(|g| vec![g.clone()]))
    }

    pub fn sum(self) -> Var<'t> {
        let (r, c) = self.shape();
        let v = Matrix::scalar(self.value().sum());
        self.tape.op(
            v,
            &[self],
            Box::new(move |g| vec![Matrix::filled(r, c, g.as_scalar())]),
        )
    }

    pub fn trace(self) -> Var<'t> {
        let n = self.shape().0;
        let v = Matrix::scalar(self.value().trace());
        self.tape.op(
            v,
            &[self],
            Box::new(move |g| vec![Matrix::identity(n).scale(g.as_scalar())]),
        )
    }

    /// Squared Frobenius norm.
    pub fn sq_norm(self) -> Var<'t> {
        let av = self.value();
        let v = Matrix::scalar(av.dot(&av));
        self.tape
            .op(v, &[self], Box::new(move |g| vec![av.scale(2.0 * g.as_scalar())]))
    }

    /// `Σ (self ∘ b)`.
    pub fn dot(self, b: Var<'t>) -> Var<'t> {
        let (av, bv) = (self.value(), b.value());
        let v = Matrix::scalar(av.dot(&bv));
        self.tape.op(
            v,
            &[self, b],
            Box::new(move |g| {
                let s = g.as_scalar();
                vec![bv.scale(s), av.scale(s)]
            }),
        )
    }

    pub fn exp(self) -> Var<'t> {
        let v = Rc::new(self.value().map(f64::exp));
        let out = (*v).clone();
        self.tape
            .op(out, &[self], Box::new(move |g| vec![g.hadamard(&v)]))
    }

    pub fn ln(self) -> Var<'t> {
        let av = self.value();
        let v = av.map(f64::ln);
        self.tape.op(
            v,
            &[self],
            Box::new(move |g| vec![g.hadamard(&av.map(|x| 1.0 / x))]),
        )
    }

    pub fn recip(self) -> Var<'t> {
        let av = self.value();
        let v = av.map(|x| 1.0 / x);
        self.tape.op(
            v,
            &[self],
            Box::new(move |g| vec![g.hadamard(&av.map(|x| -1.0 / (x * x)))]),
        )
    }

    pub fn row(self, i: usize) -> Var<'t> {
        let av = self.value();
        let (r, c) = av.shape();
        let v = Matrix::row_vector(av.row(i));
        self.tape.op(
            v,
            &[self],
            Box::new(move |g| {
                let mut out = Matrix::zeros(r, c);
                out.row_mut(i).copy_from_slice(g.data());
                vec![out]
            }),
        )
    }

    pub fn elem(self, i: usize, j: usize) -> Var<'t> {
        let (r, c) = self.shape();
        let v = Matrix::scalar(self.value()[(i, j)]);
        self.tape.op(
            v,
            &[self],
            Box::new(move |g| {
                let mut out = Matrix::zeros(r, c);
                out[(i, j)] = g.as_scalar();
                vec![out]
            }),
        )
    }

    /// Lower Cholesky factor, with jitter escalation treated as a constant.
    pub fn chol(self, base_jitter: f64) -> Result<Var<'t>> {
        let f = cholesky_jitter(&self.value(), base_jitter)?;
        self.tape.jitter.borrow_mut().push(f.jitter_used);
        let l = Rc::new(f.lower);
        let out = (*l).clone();
        Ok(self.tape.op(
            out,
            &[self],
            Box::new(move |g| {
                let n = l.rows();
                let mut p = l.transpose().matmul(&tril(g));
                for i in 0..n {
                    p[(i, i)] *= 0.5;
                    for j in (i + 1)..n {
                        p[(i, j)] = 0.0;
                    }
                }
                let s = solve_lower_transpose(&l, &solve_lower_transpose(&l, &p).transpose());
                vec![s.symmetrize()]
            }),
        ))
    }

    /// `L⁻¹ b` with `self` lower triangular.
    pub fn solve_lower(self, b: Var<'t>) -> Var<'t> {
        let l = self.value();
        let x = Rc::new(solve_lower(&l, &b.value()));
        let out = (*x).clone();
        self.tape.op(
            out,
            &[self, b],
            Box::new(move |g| {
                let bb = solve_lower_transpose(&l, g);
                let lb = tril(&bb.matmul(&x.transpose())).scale(-1.0);
                vec![lb, bb]
            }),
        )
    }

    /// `L⁻ᵀ b` with `self` lower triangular.
    pub fn solve_lower_t(self, b: Var<'t>) -> Var<'t> {
        let l = self.value();
        let x = Rc::new(solve_lower_transpose(&l, &b.value()));
        let out = (*x).clone();
        self.tape.op(
            out,
            &[self, b],
            Box::new(move |g| {
                let bb = solve_lower(&l, g);
                let lb = tril(&x.matmul(&bb.transpose())).scale(-1.0);
                vec![lb, bb]
            }),
        )
    }

    /// `(L Lᵀ)⁻¹ b` with `self = L`.
    pub fn chol_solve(self, b: Var<'t>) -> Var<'t> {
        self.solve_lower_t(self.solve_lower(b))
    }

    /// `Σ log L_ii`.
    pub fn log_diag_sum(self) -> Var<'t> {
        let l = self.value();
        let n = l.rows();
        let v = Matrix::scalar(l.diag().iter().map(|d| d.ln()).sum());
        self.tape.op(
            v,
            &[self],
            Box::new(move |g| {
                let s = g.as_scalar();
                vec![Matrix::from_fn(n, n, |i, j| if i == j { s / l[(i, j)] } else { 0.0 })]
            }),
        )
    }

    /// Unpacks a column of `n(n+1)/2` entries, row by row, into a lower
    /// triangular matrix whose diagonal is exponentiated.
    pub fn tril_exp(self, n: usize) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.rows() * v.cols(), n * (n + 1) / 2, "tril_exp size");
        let mut l = Matrix::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in 0..=i {
                let x = v.data()[k];
                l[(i, j)] = if i == j { x.exp() } else { x };
                k += 1;
            }
        }
        let (r, c) = v.shape();
        let lc = l.clone();
        self.tape.op(
            l,
            &[self],
            Box::new(move |g| {
                let mut out = Matrix::zeros(r, c);
                let mut k = 0;
                for i in 0..n {
                    for j in 0..=i {
                        out.data_mut()[k] = if i == j { g[(i, j)] * lc[(i, j)] } else { g[(i, j)] };
                        k += 1;
                    }
                }
                vec![out]
            }),
        )
    }
}

fn spec_from(family: KernelFamily, var: &Matrix, ls: &Matrix) -> StationaryKernelSpec {
    StationaryKernelSpec {
        family,
        variance: var.as_scalar(),
        lengthscales: ls.data().to_vec(),
    }
}

/// Gram matrix `k(x1, x2)` of a stationary kernel with variance `var` (1×1)
/// and lengthscales `ls` (1×Q). With `tags`, pairs from different groups are
/// zero.
pub fn gram<'t>(
    family: KernelFamily,
    var: Var<'t>,
    ls: Var<'t>,
    x1: Var<'t>,
    x2: Var<'t>,
    tags: Option<(Rc<Vec<usize>>, Rc<Vec<usize>>)>,
) -> Var<'t> {
    let (vv, lv, a, b) = (var.value(), ls.value(), x1.value(), x2.value());
    let spec = spec_from(family, &vv, &lv);
    let mask = tags.as_ref().map(|(t1, t2)| (t1.as_slice(), t2.as_slice()));
    let k = masked_gram(&spec, &a, &b, mask);
    var.tape.op(
        k,
        &[var, ls, x1, x2],
        Box::new(move |g| {
            let mask = tags.as_ref().map(|(t1, t2)| (t1.as_slice(), t2.as_slice()));
            let gg = gram_backward(&spec, &a, &b, mask, g);
            vec![
                Matrix::scalar(gg.variance),
                Matrix::row_vector(&gg.lengthscales),
                gg.x1,
                gg.x2,
            ]
        }),
    )
}

/// `Ψ^H`: expectations `⟨k_H(h_d, z_m)⟩` under diagonal Gaussians with means
/// `mu` and variances `s` (ARD-RBF only).
pub fn psi1<'t>(var: Var<'t>, ls: Var<'t>, mu: Var<'t>, s: Var<'t>, z: Var<'t>) -> Var<'t> {
    let spec = spec_from(KernelFamily::Rbf, &var.value(), &ls.value());
    let (mv, sv, zv) = (mu.value(), s.value(), z.value());
    let p = psi1_matrix(&spec, &mv, &sv, &zv);
    var.tape.op(
        p,
        &[var, ls, mu, s, z],
        Box::new(move |g| {
            let gr = psi1_backward(&spec, &mv, &sv, &zv, g);
            vec![
                Matrix::scalar(gr.variance),
                Matrix::row_vector(&gr.lengthscales),
                gr.means,
                gr.variances,
                gr.z,
            ]
        }),
    )
}

/// `Φ^H_d` for row `d` of `mu` and `s` (ARD-RBF only).
pub fn psi2_row<'t>(
    var: Var<'t>,
    ls: Var<'t>,
    mu: Var<'t>,
    s: Var<'t>,
    z: Var<'t>,
    d: usize,
) -> Var<'t> {
    let spec = spec_from(KernelFamily::Rbf, &var.value(), &ls.value());
    let (mv, sv, zv) = (mu.value(), s.value(), z.value());
    let p = psi2_single(&spec, mv.row(d), sv.row(d), &zv);
    var.tape.op(
        p,
        &[var, ls, mu, s, z],
        Box::new(move |g| {
            let (dv, dl, dmu, ds, dz) = psi2_backward(&spec, mv.row(d), sv.row(d), &zv, g);
            let mut gm = Matrix::zeros(mv.rows(), mv.cols());
            gm.row_mut(d).copy_from_slice(&dmu);
            let mut gs = Matrix::zeros(sv.rows(), sv.cols());
            gs.row_mut(d).copy_from_slice(&ds);
            vec![Matrix::scalar(dv), Matrix::row_vector(&dl), gm, gs, dz]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Central differences of `f` around `x`.
    fn fd(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            let mut p = x.clone();
            p[(i, j)] += h;
            let mut q = x.clone();
            q[(i, j)] -= h;
            (f(&p) - f(&q)) / (2.0 * h)
        })
    }

    fn close(a: &Matrix, b: &Matrix, tol: f64) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn matmul_and_sum() {
        let a0 = m(&[&[1.0, 2.0], &[3.0, -1.0]]);
        let b0 = m(&[&[0.5], &[2.0]]);
        let t = Tape::new();
        let (a, b) = (t.leaf(a0.clone()), t.leaf(b0.clone()));
        let y = a.matmul(b).sum();
        let g = t.gradient(y);
        close(&g.wrt(a), &fd(&a0, |x| x.matmul(&b0).sum()), 1e-7);
        close(&g.wrt(b), &fd(&b0, |x| a0.matmul(x).sum()), 1e-7);
    }

    #[test]
    fn cholesky_logdet_gradient() {
        // d log|A| / dA = A⁻¹
        let a0 = m(&[&[4.0, 1.0, 0.5], &[1.0, 3.0, 0.2], &[0.5, 0.2, 2.0]]);
        let t = Tape::new();
        let a = t.leaf(a0.clone());
        let y = a.chol(0.0).unwrap().log_diag_sum().scale(2.0);
        let g = t.gradient(y);
        let inv = cholesky_jitter(&a0, 0.0).unwrap().inverse();
        close(&g.wrt(a), &inv, 1e-10);
    }

    #[test]
    fn solves_match_finite_differences() {
        let l0 = m(&[&[2.0, 0.0], &[0.3, 1.5]]);
        let b0 = m(&[&[1.0, -0.5], &[0.2, 0.7]]);
        let w = m(&[&[0.3, 1.0], &[-2.0, 0.4]]);
        for transposed in [false, true] {
            let t = Tape::new();
            let (l, b, wv) = (t.leaf(l0.clone()), t.leaf(b0.clone()), t.leaf(w.clone()));
            let x = if transposed { l.solve_lower_t(b) } else { l.solve_lower(b) };
            let y = x.dot(wv);
            let g = t.gradient(y);
            let f = |lm: &Matrix, bm: &Matrix| {
                let x = if transposed {
                    solve_lower_transpose(lm, bm)
                } else {
                    solve_lower(lm, bm)
                };
                x.dot(&w)
            };
            close(&g.wrt(b), &fd(&b0, |bm| f(&l0, bm)), 1e-6);
            close(&g.wrt(l), &tril(&fd(&l0, |lm| f(&lm.lower_triangle(), &b0))), 1e-6);
        }
    }

    #[test]
    fn cholesky_backward_through_solve() {
        let a0 = m(&[&[2.0, 0.4], &[0.4, 1.0]]);
        let b0 = m(&[&[1.0], &[-1.0]]);
        let f = |a: &Matrix| {
            let l = cholesky_jitter(a, 0.0).unwrap().lower;
            let x = solve_lower(&l, &b0);
            x.dot(&x)
        };
        let t = Tape::new();
        let a = t.leaf(a0.clone());
        let b = t.leaf(b0.clone());
        let y = a.chol(0.0).unwrap().solve_lower(b).sq_norm();
        let g = t.gradient(y).wrt(a);
        // Symmetric perturbations only.
        let h = 1e-6;
        for (i, j) in [(0, 0), (1, 1), (0, 1)] {
            let mut p = a0.clone();
            let mut q = a0.clone();
            p[(i, j)] += h;
            q[(i, j)] -= h;
            if i != j {
                p[(j, i)] += h;
                q[(j, i)] -= h;
            }
            let num = (f(&p) - f(&q)) / (2.0 * h);
            let ana = if i == j { g[(i, j)] } else { g[(i, j)] + g[(j, i)] };
            assert!((num - ana).abs() < 1e-6, "{num} vs {ana}");
        }
    }

    #[test]
    fn tril_exp_round_trip() {
        let t = Tape::new();
        let v = t.leaf(Matrix::column_vector(&[0.0, 0.5, 1.0_f64.ln()]));
        let l = v.tril_exp(2);
        assert_eq!(*l.value(), m(&[&[1.0, 0.0], &[0.5, 1.0]]));
        let g = t.gradient(l.sum());
        assert_eq!(g.wrt(v).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn elementwise_ops() {
        let x0 = m(&[&[0.3, 1.2]]);
        let t = Tape::new();
        let x = t.leaf(x0.clone());
        let y = x.exp().add(x.ln()).add(x.recip()).hadamard(x).sum();
        let g = t.gradient(y).wrt(x);
        let num = fd(&x0, |v| {
            v.data().iter().map(|a| (a.exp() + a.ln() + 1.0 / a) * a).sum()
        });
        close(&g, &num, 1e-7);
    }
}
