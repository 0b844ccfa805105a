//! Dense fp64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable node in a dynamically built computation
//! graph. Operations record a backward closure; [`backward`] walks the graph
//! in reverse topological order and returns per-node gradient buffers.
//! Graphs are rebuilt every step, so gradients never accumulate across steps
//! unless the caller asks for it.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::linalg;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Gradient closure: given the output node and the upstream gradient, return
/// one optional gradient buffer per parent (None for parents that do not
/// require gradients).
pub(crate) type BackwardFn = Box<dyn Fn(&Node, &[f64]) -> Vec<Option<Vec<f64>>>>;

pub struct Node {
    id: u64,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A shared handle to an immutable graph node.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.node.id, self.node.shape)
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn assert_finite(op: &'static str, values: &[f64]) {
    if !values.iter().all(|v| v.is_finite()) {
        panic!("tensor op '{op}' produced a non-finite value");
    }
}

impl Tensor {
    fn construct(
        op: &'static str,
        shape: Vec<usize>,
        values: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        assert_eq!(
            numel_of(&shape),
            values.len(),
            "tensor op '{op}': shape {shape:?} does not match {} values",
            values.len()
        );
        assert_finite(op, &values);
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values,
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// A constant tensor: participates in forward math, never receives a gradient.
    pub fn new(shape: &[usize], values: Vec<f64>) -> Tensor {
        Tensor::construct("new", shape.to_vec(), values, false, vec![], None)
    }

    /// A differentiable leaf (an optimizable parameter's unconstrained value).
    pub fn leaf(shape: &[usize], values: Vec<f64>) -> Tensor {
        Tensor::construct("leaf", shape.to_vec(), values, true, vec![], None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape, vec![0.0; numel_of(shape)])
    }

    pub fn eye(n: usize) -> Tensor {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        Tensor::new(&[n, n], v)
    }

    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let backward = if requires_grad { Some(backward) } else { None };
        Tensor::construct(op, shape, values, requires_grad, parents, backward)
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.node.values
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on a tensor with {} elements", self.numel());
        self.node.values[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape().len());
        let mut flat = 0;
        for (d, &i) in index.iter().enumerate() {
            assert!(i < self.shape()[d]);
            flat = flat * self.shape()[d] + i;
        }
        self.node.values[flat]
    }

    fn rows_cols(&self, op: &'static str) -> (usize, usize) {
        assert_eq!(self.shape().len(), 2, "'{op}' expects a matrix, got {:?}", self.shape());
        (self.shape()[0], self.shape()[1])
    }

    // ---- elementwise unary ----------------------------------------------

    fn unary(
        &self,
        op: &'static str,
        fwd: impl Fn(f64) -> f64,
        // (input value, output value) -> local derivative
        dfdx: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let values: Vec<f64> = self.values().iter().map(|&v| fwd(v)).collect();
        Tensor::from_op(
            op,
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |node, g| {
                let x = &node.parents[0];
                let grad: Vec<f64> = x
                    .values()
                    .iter()
                    .zip(node.values.iter())
                    .zip(g)
                    .map(|((&xv, &yv), &gv)| gv * dfdx(xv, yv))
                    .collect();
                vec![Some(grad)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.unary("neg", |v| -v, |_, _| -1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    /// Natural log. Non-positive inputs are an operation-boundary error.
    pub fn ln(&self) -> Tensor {
        if let Some(v) = self.values().iter().find(|v| **v <= 0.0) {
            panic!("tensor op 'ln' applied to non-positive value {v}");
        }
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |v| v * v, |x, _| 2.0 * x)
    }

    pub fn abs(&self) -> Tensor {
        self.unary("abs", f64::abs, |x, _| if x < 0.0 { -1.0 } else { 1.0 })
    }

    /// Numerically stable log(1 + eˣ).
    pub fn softplus(&self) -> Tensor {
        self.unary("softplus", softplus_val, |x, _| sigmoid_val(x))
    }

    /// max(x, floor); the gradient vanishes on the clamped set.
    pub fn clamp_min(&self, floor: f64) -> Tensor {
        self.unary("clamp_min", move |v| v.max(floor), move |x, _| if x > floor { 1.0 } else { 0.0 })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary("scale", move |v| v * c, move |_, _| c)
    }

    pub fn shift(&self, c: f64) -> Tensor {
        self.unary("shift", move |v| v + c, |_, _| 1.0)
    }

    // ---- elementwise binary with broadcasting ----------------------------

    fn binary(
        &self,
        other: &Tensor,
        op: &'static str,
        fwd: impl Fn(f64, f64) -> f64,
        dfda: impl Fn(f64, f64) -> f64 + 'static,
        dfdb: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let out_shape = broadcast_shape(op, self.shape(), other.shape());
        let n = numel_of(&out_shape);
        let mut values = vec![0.0; n];
        if self.shape() == other.shape() {
            for ((o, a), b) in values.iter_mut().zip(self.values()).zip(other.values()) {
                *o = fwd(*a, *b);
            }
        } else {
            let av = self.values();
            let bv = other.values();
            for_each_broadcast(&out_shape, self.shape(), other.shape(), |o, ai, bi| {
                values[o] = fwd(av[ai], bv[bi]);
            });
        }
        Tensor::from_op(
            op,
            out_shape.clone(),
            values,
            vec![self.clone(), other.clone()],
            Box::new(move |node, g| {
                let a = &node.parents[0];
                let b = &node.parents[1];
                let mut ga = if a.requires_grad() { Some(vec![0.0; a.numel()]) } else { None };
                let mut gb = if b.requires_grad() { Some(vec![0.0; b.numel()]) } else { None };
                let av = a.values();
                let bv = b.values();
                for_each_broadcast(&node.shape, a.shape(), b.shape(), |o, ai, bi| {
                    let gv = g[o];
                    if let Some(ga) = ga.as_mut() {
                        ga[ai] += gv * dfda(av[ai], bv[bi]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[bi] += gv * dfdb(av[ai], bv[bi]);
                    }
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.binary(other, "div", |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    // ---- shape ops --------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel_of(shape),
            self.numel(),
            "reshape {:?} -> {shape:?} changes the element count",
            self.shape()
        );
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.values().to_vec(),
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.to_vec())]),
        )
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = self.rows_cols("transpose");
        let values = linalg::transpose_vals(self.values(), m, n);
        Tensor::from_op(
            "transpose",
            vec![n, m],
            values,
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(linalg::transpose_vals(g, n, m))]),
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack0(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "stack0 of zero tensors");
        let inner = parts[0].shape().to_vec();
        let inner_n = parts[0].numel();
        let mut values = Vec::with_capacity(parts.len() * inner_n);
        for p in parts {
            assert_eq!(p.shape(), &inner[..], "stack0 with mismatched shapes");
            values.extend_from_slice(p.values());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        Tensor::from_op(
            "stack0",
            shape,
            values,
            parts.to_vec(),
            Box::new(move |node, g| {
                node.parents
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        p.requires_grad()
                            .then(|| g[i * inner_n..(i + 1) * inner_n].to_vec())
                    })
                    .collect()
            }),
        )
    }

    /// out[k] = self[map[k]]; the workhorse behind patch extraction.
    pub fn gather(&self, map: Rc<Vec<usize>>, out_shape: &[usize]) -> Tensor {
        assert_eq!(map.len(), numel_of(out_shape), "gather map length mismatch");
        let src = self.values();
        let values: Vec<f64> = map.iter().map(|&i| src[i]).collect();
        let src_n = self.numel();
        let bmap = Rc::clone(&map);
        Tensor::from_op(
            "gather",
            out_shape.to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut grad = vec![0.0; src_n];
                for (&i, &gv) in bmap.iter().zip(g) {
                    grad[i] += gv;
                }
                vec![Some(grad)]
            }),
        )
    }

    /// Contiguous row slice of a matrix: rows [start, start+len).
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        let (m, n) = self.rows_cols("slice_rows");
        assert!(start + len <= m, "slice_rows [{start}, {}) out of {m} rows", start + len);
        let values = self.values()[start * n..(start + len) * n].to_vec();
        Tensor::from_op(
            "slice_rows",
            vec![len, n],
            values,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut grad = vec![0.0; m * n];
                grad[start * n..(start + len) * n].copy_from_slice(g);
                vec![Some(grad)]
            }),
        )
    }

    /// For a matrix [r, c] and per-row column indices, returns [r].
    pub fn take_per_row(&self, cols: &[usize]) -> Tensor {
        let (r, c) = self.rows_cols("take_per_row");
        assert_eq!(cols.len(), r, "take_per_row needs one index per row");
        for &j in cols {
            assert!(j < c, "take_per_row column {j} out of range {c}");
        }
        let values: Vec<f64> = cols
            .iter()
            .enumerate()
            .map(|(i, &j)| self.values()[i * c + j])
            .collect();
        let cols = cols.to_vec();
        Tensor::from_op(
            "take_per_row",
            vec![r],
            values,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut grad = vec![0.0; r * c];
                for (i, &j) in cols.iter().enumerate() {
                    grad[i * c + j] = g[i];
                }
                vec![Some(grad)]
            }),
        )
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.values().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum_all",
            vec![],
            vec![s],
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Column sums of a matrix: [m, n] -> [n].
    pub fn sum_axis0(&self) -> Tensor {
        let (m, n) = self.rows_cols("sum_axis0");
        let mut values = vec![0.0; n];
        for row in self.values().chunks(n) {
            for (o, v) in values.iter_mut().zip(row) {
                *o += v;
            }
        }
        Tensor::from_op(
            "sum_axis0",
            vec![n],
            values,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut grad = vec![0.0; m * n];
                for row in grad.chunks_mut(n) {
                    row.copy_from_slice(g);
                }
                vec![Some(grad)]
            }),
        )
    }

    /// Overflow-safe log-sum-exp over the last axis.
    pub fn logsumexp_last(&self) -> Tensor {
        let rank = self.shape().len();
        assert!(rank >= 1, "logsumexp_last needs rank >= 1");
        let c = self.shape()[rank - 1];
        let rows = self.numel() / c;
        let mut values = vec![0.0; rows];
        for (r, row) in self.values().chunks(c).enumerate() {
            values[r] = logsumexp_row(row);
        }
        let out_shape = self.shape()[..rank - 1].to_vec();
        Tensor::from_op(
            "logsumexp_last",
            out_shape,
            values,
            vec![self.clone()],
            Box::new(move |node, g| {
                let x = node.parents[0].values();
                let mut grad = vec![0.0; x.len()];
                for r in 0..rows {
                    let lse = node.values[r];
                    let gv = g[r];
                    for j in 0..c {
                        grad[r * c + j] = gv * (x[r * c + j] - lse).exp();
                    }
                }
                vec![Some(grad)]
            }),
        )
    }

    // ---- square-matrix helpers ---------------------------------------------

    pub fn diag_part(&self) -> Tensor {
        let (n, n2) = self.rows_cols("diag_part");
        assert_eq!(n, n2, "diag_part expects a square matrix");
        let values: Vec<f64> = (0..n).map(|i| self.values()[i * n + i]).collect();
        Tensor::from_op(
            "diag_part",
            vec![n],
            values,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut grad = vec![0.0; n * n];
                for i in 0..n {
                    grad[i * n + i] = g[i];
                }
                vec![Some(grad)]
            }),
        )
    }

    /// A + c·I for square A.
    pub fn add_diag(&self, c: f64) -> Tensor {
        let (n, n2) = self.rows_cols("add_diag");
        assert_eq!(n, n2, "add_diag expects a square matrix");
        let mut values = self.values().to_vec();
        for i in 0..n {
            values[i * n + i] += c;
        }
        Tensor::from_op(
            "add_diag",
            vec![n, n],
            values,
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.to_vec())]),
        )
    }

    /// Zeroes the strictly upper triangle.
    pub fn tril(&self) -> Tensor {
        let (n, n2) = self.rows_cols("tril");
        assert_eq!(n, n2, "tril expects a square matrix");
        let mut values = self.values().to_vec();
        for i in 0..n {
            for j in (i + 1)..n {
                values[i * n + j] = 0.0;
            }
        }
        Tensor::from_op(
            "tril",
            vec![n, n],
            values,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut grad = g.to_vec();
                for i in 0..n {
                    for j in (i + 1)..n {
                        grad[i * n + j] = 0.0;
                    }
                }
                vec![Some(grad)]
            }),
        )
    }

    // ---- linear algebra ------------------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = self.rows_cols("matmul");
        let (k2, n) = other.rows_cols("matmul");
        assert_eq!(k, k2, "matmul inner extents disagree: {k} vs {k2}");
        let values = linalg::matmul_nn(self.values(), other.values(), m, k, n);
        Tensor::from_op(
            "matmul",
            vec![m, n],
            values,
            vec![self.clone(), other.clone()],
            Box::new(move |node, g| {
                let a = &node.parents[0];
                let b = &node.parents[1];
                let ga = a
                    .requires_grad()
                    .then(|| linalg::matmul_nt(g, b.values(), m, n, k));
                let gb = b
                    .requires_grad()
                    .then(|| linalg::matmul_tn(a.values(), g, m, k, n));
                vec![ga, gb]
            }),
        )
    }

    /// Lower Cholesky factor of (A + Aᵀ)/2 + jitter·I; differentiable.
    pub fn cholesky(&self, jitter: f64) -> Result<Tensor> {
        let (n, n2) = self.rows_cols("cholesky");
        if n != n2 {
            return Err(Error::ShapeMismatch {
                op: "cholesky",
                detail: format!("matrix is {n}x{n2}"),
            });
        }
        let a = self.values();
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                l[i * n + j] = 0.5 * (a[i * n + j] + a[j * n + i]);
            }
            l[i * n + i] += jitter;
        }
        linalg::cholesky_in_place(&mut l, n)
            .map_err(|minor| Error::CholeskyFailure { minor, jitter })?;
        Ok(Tensor::from_op(
            "cholesky",
            vec![n, n],
            l,
            vec![self.clone()],
            Box::new(move |node, g| {
                let lvals = &node.values;
                // middle = Phi(Lᵀ·ḡ): lower triangle with halved diagonal
                let mut middle = linalg::matmul_tn(lvals, g, n, n, n);
                for i in 0..n {
                    middle[i * n + i] *= 0.5;
                    for j in (i + 1)..n {
                        middle[i * n + j] = 0.0;
                    }
                }
                // temp = L^{-T} · middle · L^{-1}
                linalg::tri_solve_in_place(lvals, n, &mut middle, n, true, true)
                    .expect("cholesky backward: factor became singular");
                let mut mt = linalg::transpose_vals(&middle, n, n);
                linalg::tri_solve_in_place(lvals, n, &mut mt, n, true, true)
                    .expect("cholesky backward: factor became singular");
                // grad = (temp + tempᵀ)/2, with temp = mtᵀ
                let mut grad = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        grad[i * n + j] = 0.5 * (mt[j * n + i] + mt[i * n + j]);
                    }
                }
                vec![Some(grad)]
            }),
        ))
    }

    /// Cholesky with jitter escalation: starts at `base_jitter` and multiplies
    /// by 10 up to 1e-2 before giving up. Returns the factor and the jitter used.
    pub fn cholesky_escalating(&self, base_jitter: f64) -> Result<(Tensor, f64)> {
        let mut jitter = base_jitter;
        loop {
            match self.cholesky(jitter) {
                Ok(l) => return Ok((l, jitter)),
                Err(e) => {
                    let next = if jitter == 0.0 { crate::DEFAULT_JITTER } else { jitter * 10.0 };
                    if next > crate::MAX_JITTER {
                        return Err(e);
                    }
                    jitter = next;
                }
            }
        }
    }

    /// Solves op(T)·X = B where T = self is triangular.
    pub fn triangular_solve(&self, b: &Tensor, lower: bool) -> Result<Tensor> {
        let (n, n2) = self.rows_cols("triangular_solve");
        if n != n2 {
            return Err(Error::ShapeMismatch {
                op: "triangular_solve",
                detail: format!("triangular matrix is {n}x{n2}"),
            });
        }
        let (bn, k) = b.rows_cols("triangular_solve");
        if bn != n {
            return Err(Error::ShapeMismatch {
                op: "triangular_solve",
                detail: format!("rhs has {bn} rows, expected {n}"),
            });
        }
        let mut x = b.values().to_vec();
        linalg::tri_solve_in_place(self.values(), n, &mut x, k, lower, false)
            .map_err(|row| Error::SingularTriangular { row })?;
        Ok(Tensor::from_op(
            "triangular_solve",
            vec![n, k],
            x,
            vec![self.clone(), b.clone()],
            Box::new(move |node, g| {
                let t = &node.parents[0];
                let b = &node.parents[1];
                // b̄ = op(T)^{-T} ḡ
                let mut gb = g.to_vec();
                linalg::tri_solve_in_place(t.values(), n, &mut gb, k, lower, true)
                    .expect("triangular_solve backward: zero diagonal");
                // T̄ = -b̄ xᵀ restricted to the active triangle
                let gt = t.requires_grad().then(|| {
                    let full = linalg::matmul_nt(&gb, &node.values, n, k, n);
                    let mut masked = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..n {
                            let in_tri = if lower { j <= i } else { j >= i };
                            if in_tri {
                                masked[i * n + j] = -full[i * n + j];
                            }
                        }
                    }
                    masked
                });
                let gb = b.requires_grad().then_some(gb);
                vec![gt, gb]
            }),
        ))
    }
}

pub(crate) fn softplus_val(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid_val(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable inverse of softplus: y with softplus(y) = x, for x > 0.
pub(crate) fn inv_softplus_val(x: f64) -> f64 {
    assert!(x > 0.0, "inv_softplus of non-positive value {x}");
    if x > 30.0 {
        x
    } else {
        x.exp_m1().ln()
    }
}

fn logsumexp_row(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

// ---- broadcasting ------------------------------------------------------------

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let ad = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
        let bd = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
        out[d] = if ad == bd || bd == 1 {
            ad
        } else if ad == 1 {
            bd
        } else {
            panic!("tensor op '{op}': shapes {a:?} and {b:?} do not broadcast");
        };
    }
    out
}

fn bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let offset = out_shape.len() - shape.len();
    let mut nat = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        nat[d] = acc;
        acc *= shape[d];
    }
    let mut s = vec![0usize; out_shape.len()];
    for d in 0..out_shape.len() {
        if d >= offset {
            let sd = shape[d - offset];
            s[d] = if sd == 1 && out_shape[d] != 1 { 0 } else { nat[d - offset] };
        }
    }
    s
}

fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel_of(out_shape);
    if n == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let a_str = bcast_strides(a_shape, out_shape);
    let b_str = bcast_strides(b_shape, out_shape);
    let mut idx = vec![0usize; rank];
    let mut ao = 0usize;
    let mut bo = 0usize;
    for flat in 0..n {
        f(flat, ao, bo);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ao += a_str[d];
            bo += b_str[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ao -= a_str[d] * out_shape[d];
            bo -= b_str[d] * out_shape[d];
        }
    }
}

// ---- reverse pass --------------------------------------------------------------

/// Per-node gradient buffers produced by [`backward`].
pub struct Gradients {
    map: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }
}

/// Reverse-mode sweep from a scalar objective. Returns gradients for every
/// differentiable node reachable from it (leaves included).
pub fn backward(objective: &Tensor) -> Gradients {
    assert_eq!(
        objective.numel(),
        1,
        "backward objective must be scalar, got shape {:?}",
        objective.shape()
    );
    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    if !objective.requires_grad() {
        return Gradients { map: grads };
    }

    // Reverse post-order DFS over the requires-grad subgraph.
    enum Visit {
        Enter(Tensor),
        Exit(Tensor),
    }
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack = vec![Visit::Enter(objective.clone())];
    while let Some(v) = stack.pop() {
        match v {
            Visit::Enter(t) => {
                if !visited.insert(t.id()) {
                    continue;
                }
                stack.push(Visit::Exit(t.clone()));
                for p in &t.node.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push(Visit::Enter(p.clone()));
                    }
                }
            }
            Visit::Exit(t) => order.push(t),
        }
    }

    grads.insert(objective.id(), vec![1.0]);
    for t in order.iter().rev() {
        let Some(upstream) = grads.get(&t.id()).cloned() else {
            continue;
        };
        let Some(backward_fn) = t.node.backward.as_ref() else {
            continue; // leaf: keep the accumulated gradient
        };
        let parent_grads = backward_fn(&t.node, &upstream);
        assert_eq!(parent_grads.len(), t.node.parents.len());
        for (p, pg) in t.node.parents.iter().zip(parent_grads) {
            if let Some(pg) = pg {
                assert_eq!(pg.len(), p.numel(), "gradient shape mismatch into {:?}", p);
                grads
                    .entry(p.id())
                    .and_modify(|acc| {
                        for (a, v) in acc.iter_mut().zip(&pg) {
                            *a += v;
                        }
                    })
                    .or_insert(pg);
            }
        }
        if !t.node.parents.is_empty() {
            grads.remove(&t.id());
        }
    }
    Gradients { map: grads }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::leaf(shape, v.to_vec())
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = t(&[2, 2], &[3.0, -1.0, 2.0, 5.0]);
        let i2 = Tensor::eye(2);
        assert_eq!(i2.matmul(&a).values(), a.values());

        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let v = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(m.matmul(&v).values(), &[3.0, 7.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let x = t(&[2], &[1.0, 2.0]);
        let y = x.square().sum_all();
        let g = backward(&y);
        assert_eq!(g.wrt(&x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_ignores_unused_parameters() {
        let x = t(&[2], &[1.0, 2.0]);
        let p = t(&[3], &[5.0, 6.0, 7.0]);
        let y = x.sum_all();
        let g = backward(&y);
        assert_eq!(g.wrt(&x).unwrap(), &[1.0, 1.0]);
        assert!(g.wrt(&p).is_none());
    }

    #[test]
    fn backward_accumulates_through_shared_nodes() {
        let x = t(&[], &[3.0]);
        // y = x*x + x  => dy/dx = 2x + 1 = 7
        let y = x.mul(&x).add(&x);
        let g = backward(&y);
        assert_eq!(g.wrt(&x).unwrap(), &[7.0]);
    }

    #[test]
    fn broadcasting_add_row_and_col() {
        let a = t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let row = t(&[1, 3], &[10.0, 20.0, 30.0]);
        let col = t(&[2, 1], &[100.0, 200.0]);
        let out = a.add(&row).add(&col);
        assert_eq!(out.values(), &[110.0, 121.0, 132.0, 213.0, 224.0, 235.0]);
        let g = backward(&out.sum_all());
        assert_eq!(g.wrt(&row).unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.wrt(&col).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn logsumexp_matches_and_is_stable() {
        let x = Tensor::new(&[2], vec![0.0, 0.0]);
        assert!((x.logsumexp_last().item() - 2.0_f64.ln()).abs() < 1e-15);
        let big = Tensor::new(&[2], vec![1000.0, 1000.0]);
        let lse = big.logsumexp_last().item();
        assert!((lse - (1000.0 + 2.0_f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn softplus_at_zero_is_log_two() {
        let x = Tensor::new(&[], vec![0.0]);
        assert!((x.softplus().item() - 2.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cholesky_diagonal_and_hand_case() {
        let a = Tensor::new(&[3, 3], vec![4.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 4.0]);
        let l = a.cholesky(0.0).unwrap();
        let mut expect = vec![0.0; 9];
        for i in 0..3 {
            expect[i * 3 + i] = 2.0;
        }
        assert_eq!(l.values(), &expect[..]);

        let a = Tensor::new(&[2, 2], vec![4.0, 2.0, 2.0, 5.0]);
        let l = a.cholesky(0.0).unwrap();
        assert_eq!(l.values(), &[2.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn cholesky_failure_carries_minor_index() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 2.0, 1.0]);
        match a.cholesky(0.0) {
            Err(Error::CholeskyFailure { minor, .. }) => assert_eq!(minor, 2),
            other => panic!("expected decomposition failure, got {other:?}"),
        }
    }

    #[test]
    fn triangular_solve_identity_and_hand_case() {
        let i = Tensor::eye(3);
        let b = Tensor::new(&[3, 1], vec![1.0, 2.0, 3.0]);
        assert_eq!(i.triangular_solve(&b, true).unwrap().values(), b.values());

        let l = Tensor::new(&[2, 2], vec![2.0, 0.0, 1.0, 2.0]);
        let b = Tensor::new(&[2, 1], vec![2.0, 3.0]);
        assert_eq!(l.triangular_solve(&b, true).unwrap().values(), &[1.0, 1.0]);
    }

    #[test]
    fn triangular_solve_zero_diag_errors() {
        let l = Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 2.0]);
        let b = Tensor::new(&[2, 1], vec![1.0, 1.0]);
        match l.triangular_solve(&b, true) {
            Err(Error::SingularTriangular { row }) => assert_eq!(row, 1),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    #[should_panic(expected = "non-positive")]
    fn ln_of_nonpositive_panics() {
        let x = Tensor::new(&[1], vec![-1.0]);
        let _ = x.ln();
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn non_finite_is_caught_at_op_boundary() {
        let x = Tensor::new(&[1], vec![1e308]);
        let _ = x.mul(&x); // overflows to +inf
    }

    #[test]
    fn gather_and_scatter_grad() {
        let x = t(&[4], &[10.0, 11.0, 12.0, 13.0]);
        let map = Rc::new(vec![3usize, 0, 3]);
        let y = x.gather(map, &[3]);
        assert_eq!(y.values(), &[13.0, 10.0, 13.0]);
        let g = backward(&y.sum_all());
        assert_eq!(g.wrt(&x).unwrap(), &[1.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn take_per_row_picks_labels() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.take_per_row(&[2, 0]);
        assert_eq!(y.values(), &[3.0, 4.0]);
        let g = backward(&y.sum_all());
        assert_eq!(g.wrt(&x).unwrap(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "objective must be scalar")]
    fn backward_rejects_non_scalar() {
        let x = t(&[2], &[1.0, 2.0]);
        let _ = backward(&x);
    }
}
