//! Wengert-list reverse-mode differentiation over dense tensors.
//!
//! Operations append nodes to a [`Tape`] in creation order, so the node list is
//! already topologically sorted; [`Tape::backward`] walks it once in reverse.
//! Parameters enter the tape by `Arc` so registering a large weight matrix does
//! not copy it, and frozen weights can be entered as constants so no gradient
//! is ever computed for them.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use super::tensor::{gemm, gemm_strided, Tensor};
use super::NumericsError;

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(String),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
        transpose_b: bool,
    },
    MatMulBlock {
        a: usize,
        b: usize,
    },
    AddBias {
        a: usize,
        bias: usize,
    },
    Silu(usize),
    Exp(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    Clamp {
        a: usize,
        lo: f64,
        hi: f64,
    },
    Minimum(usize, usize),
    SliceCols {
        a: usize,
        start: usize,
    },
    Standardize {
        a: usize,
        rule: StandardizeRule,
    },
}

/// How a [`Var::standardize`] node normalised its input; determines the
/// backward rule.
#[derive(Debug, Clone, Copy)]
enum StandardizeRule {
    /// Population std at or above the floor: full standardisation Jacobian.
    Scaled { std: f64 },
    /// Distinct values with std below the floor: divided by the floor.
    Floored { floor: f64 },
    /// All inputs identical: output is exactly zero, gradient is centred.
    Flat,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::MatMulBlock { .. } => "matmul_block",
            Op::AddBias { .. } => "add_bias",
            Op::Silu(..) => "silu",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSum(..) => "row_sum",
            Op::Clamp { .. } => "clamp",
            Op::Minimum(..) => "minimum",
            Op::SliceCols { .. } => "slice_cols",
            Op::Standardize { .. } => "standardize",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records tensor operations for a single backward pass.
///
/// A tape is single-threaded; build one per worker.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.map.insert(name.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// L2 norm over every parameter jointly.
    pub fn global_norm(&self) -> f64 {
        self.map.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    /// Adds `other` into `self`, inserting missing names.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<(), NumericsError> {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(acc) => {
                    acc.check_same_shape(g)?;
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
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
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    pub fn constant_arc(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push_arc(value, Op::Constant, false)
    }

    /// Registers a tracked parameter. Registering the same name twice sums
    /// both contributions in the gradient map.
    pub fn param(&self, name: impl Into<String>, value: Arc<Tensor>) -> Var<'_> {
        self.push_arc(value, Op::Param(name.into()), true)
    }

    /// Reverse pass from a scalar root.
    ///
    /// Every parameter registered on this tape appears in the result; a
    /// parameter the root does not depend on gets a zero tensor.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, NumericsError> {
        assert!(
            std::ptr::eq(root.tape, self),
            "root belongs to another tape"
        );
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.id].value;
        if !root_val.is_scalar() {
            return Err(NumericsError::NonScalarRoot(root_val.shape().to_vec()));
        }

        let mut out = Gradients::default();
        for node in nodes.iter() {
            if let Op::Param(name) = &node.op {
                out.map
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::filled(root_val.shape(), 1.0));

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if !node.value.all_finite() || !g.all_finite() {
                return Err(NumericsError::NonFinite { op: node.op.name() });
            }
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            let req = |i: usize| nodes[i].requires_grad;
            let send = |i: usize, contrib: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !req(i) {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };

            match &node.op {
                Op::Constant => {}
                Op::Param(name) => {
                    let acc = out.map.get_mut(name).expect("registered above");
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                Op::Add(a, b) => {
                    if req(*b) {
                        send(*b, g.clone(), &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    if req(*b) {
                        send(*b, g.map(|v| -v), &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    if req(*a) {
                        send(*a, g.zip_map(val(*b), |x, y| x * y)?, &mut grads);
                    }
                    if req(*b) {
                        send(*b, g.zip_map(val(*a), |x, y| x * y)?, &mut grads);
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    send(*a, g.map(|v| v * c), &mut grads);
                }
                Op::AddScalar(a) => send(*a, g, &mut grads),
                Op::MatMul { a, b, transpose_b } => {
                    let av = val(*a);
                    let bv = val(*b);
                    let (m, k) = av.as_matrix_dims();
                    let n = g.as_matrix_dims().1;
                    if req(*a) {
                        // dA = G · Bᵀ
                        let mut da = vec![0.0; m * k];
                        gemm(
                            m,
                            n,
                            k,
                            g.data(),
                            false,
                            bv.data(),
                            !transpose_b,
                            &mut da,
                            false,
                        );
                        send(*a, Tensor::new(av.shape().to_vec(), da)?, &mut grads);
                    }
                    if req(*b) {
                        let mut db = vec![0.0; k * n];
                        if *transpose_b {
                            // stored [n, k]: dBᵀ = Gᵀ · A
                            gemm(n, m, k, g.data(), true, av.data(), false, &mut db, false);
                        } else {
                            gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                        }
                        send(*b, Tensor::new(bv.shape().to_vec(), db)?, &mut grads);
                    }
                }
                Op::MatMulBlock { a, b } => {
                    let av = val(*a);
                    let bv = val(*b);
                    let (m, k) = av.as_matrix_dims();
                    let full_n = bv.as_matrix_dims().1;
                    let n = g.as_matrix_dims().1;
                    if req(*a) {
                        // dA = G · B_blockᵀ
                        let mut da = vec![0.0; m * k];
                        gemm_strided(
                            m,
                            n,
                            k,
                            g.data(),
                            (n, 1),
                            bv.data(),
                            (1, full_n),
                            &mut da,
                            k,
                            false,
                        );
                        send(*a, Tensor::new(av.shape().to_vec(), da)?, &mut grads);
                    }
                    if req(*b) {
                        // dB_block = Aᵀ · G; rows and columns outside the block get zero
                        let mut db = vec![0.0; bv.len()];
                        gemm_strided(
                            k,
                            m,
                            n,
                            av.data(),
                            (1, k),
                            g.data(),
                            (n, 1),
                            &mut db,
                            full_n,
                            false,
                        );
                        send(*b, Tensor::new(bv.shape().to_vec(), db)?, &mut grads);
                    }
                }
                Op::AddBias { a, bias } => {
                    if req(*bias) {
                        let (rows, cols) = g.as_matrix_dims();
                        let mut db = vec![0.0; val(*bias).len()];
                        for r in 0..rows {
                            for (d, v) in db.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                                *d += v;
                            }
                        }
                        send(
                            *bias,
                            Tensor::new(val(*bias).shape().to_vec(), db)?,
                            &mut grads,
                        );
                    }
                    send(*a, g, &mut grads);
                }
                Op::Silu(a) => {
                    let dx = g.zip_map(val(*a), |gv, x| {
                        let s = sigmoid(x);
                        gv * s * (1.0 + x * (1.0 - s))
                    })?;
                    send(*a, dx, &mut grads);
                }
                Op::Exp(a) => {
                    send(*a, g.zip_map(&node.value, |gv, y| gv * y)?, &mut grads);
                }
                Op::Square(a) => {
                    send(*a, g.zip_map(val(*a), |gv, x| 2.0 * x * gv)?, &mut grads);
                }
                Op::Sum(a) => {
                    send(*a, Tensor::filled(val(*a).shape(), g.item()), &mut grads);
                }
                Op::Mean(a) => {
                    let n = val(*a).len() as f64;
                    send(
                        *a,
                        Tensor::filled(val(*a).shape(), g.item() / n),
                        &mut grads,
                    );
                }
                Op::RowSum(a) => {
                    let av = val(*a);
                    let (rows, cols) = av.as_matrix_dims();
                    let mut d = vec![0.0; rows * cols];
                    for r in 0..rows {
                        d[r * cols..(r + 1) * cols].fill(g.data()[r]);
                    }
                    send(*a, Tensor::new(av.shape().to_vec(), d)?, &mut grads);
                }
                Op::Clamp { a, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let dx =
                        g.zip_map(val(*a), |gv, x| if x >= lo && x <= hi { gv } else { 0.0 })?;
                    send(*a, dx, &mut grads);
                }
                Op::Minimum(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if req(*a) {
                        let d: Vec<f64> = g
                            .data()
                            .iter()
                            .zip(av.data().iter().zip(bv.data()))
                            .map(|(gv, (x, y))| if x <= y { *gv } else { 0.0 })
                            .collect();
                        send(*a, Tensor::new(av.shape().to_vec(), d)?, &mut grads);
                    }
                    if req(*b) {
                        let d: Vec<f64> = g
                            .data()
                            .iter()
                            .zip(av.data().iter().zip(bv.data()))
                            .map(|(gv, (x, y))| if x <= y { 0.0 } else { *gv })
                            .collect();
                        send(*b, Tensor::new(bv.shape().to_vec(), d)?, &mut grads);
                    }
                }
                Op::SliceCols { a, start } => {
                    let av = val(*a);
                    let (rows, cols) = av.as_matrix_dims();
                    let width = g.as_matrix_dims().1;
                    let mut d = vec![0.0; rows * cols];
                    for r in 0..rows {
                        d[r * cols + start..r * cols + start + width]
                            .copy_from_slice(&g.data()[r * width..(r + 1) * width]);
                    }
                    send(*a, Tensor::new(av.shape().to_vec(), d)?, &mut grads);
                }
                Op::Standardize { a, rule } => {
                    let n = g.len() as f64;
                    let gmean = g.mean();
                    let dx = match *rule {
                        StandardizeRule::Scaled { std } => {
                            let y = &node.value;
                            let gy: f64 = g
                                .data()
                                .iter()
                                .zip(y.data())
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                / n;
                            g.zip_map(y, |gv, yv| (gv - gmean - yv * gy) / std)?
                        }
                        StandardizeRule::Floored { floor } => g.map(|gv| (gv - gmean) / floor),
                        StandardizeRule::Flat => g.map(|gv| gv - gmean),
                    };
                    send(*a, dx, &mut grads);
                }
            }
        }
        Ok(out)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn elementwise(self, other: Var<'t>, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'t> {
        let v = self
            .value()
            .zip_map(&other.value(), f)
            .unwrap_or_else(|e| panic!("{}: {e}", op.name()));
        self.binary(other, v, op)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    /// `self · rhs` for `[m, k] · [k, n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.matmul_impl(rhs, false)
    }

    /// `self · rhsᵀ` where `rhs` is stored as `[n, k]`.
    pub fn matmul_t(self, rhs: Var<'t>) -> Var<'t> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(self, rhs: Var<'t>, transpose_b: bool) -> Var<'t> {
        let a = self.value();
        let b = rhs.value();
        let (m, k) = a.as_matrix_dims();
        let (br, bc) = b.as_matrix_dims();
        let (bk, n) = if transpose_b { (bc, br) } else { (br, bc) };
        assert_eq!(k, bk, "matmul inner dims {:?} · {:?}", a.shape(), b.shape());
        let mut c = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            a.data(),
            false,
            b.data(),
            transpose_b,
            &mut c,
            false,
        );
        self.binary(
            rhs,
            Tensor::matrix(m, n, c),
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                transpose_b,
            },
        )
    }

    /// `self · rhs[..k, ..n]` for `self: [m, k]` and `rhs: [K, N]` with
    /// `K ≥ k`, `N ≥ n`: multiplies by the top-left block of `rhs`.
    ///
    /// Equivalent to zero-padding `self` to `K` columns, multiplying and
    /// keeping the first `n` output columns, without materialising either.
    pub fn matmul_block(self, rhs: Var<'t>, n: usize) -> Var<'t> {
        let a = self.value();
        let b = rhs.value();
        let (m, k) = a.as_matrix_dims();
        let (full_k, full_n) = b.as_matrix_dims();
        assert!(
            k <= full_k && n <= full_n,
            "block {k}x{n} exceeds {:?}",
            b.shape()
        );
        let mut c = vec![0.0; m * n];
        gemm_strided(
            m,
            k,
            n,
            a.data(),
            (k, 1),
            b.data(),
            (full_n, 1),
            &mut c,
            n,
            false,
        );
        self.binary(
            rhs,
            Tensor::matrix(m, n, c),
            Op::MatMulBlock {
                a: self.id,
                b: rhs.id,
            },
        )
    }

    /// Adds a bias to every row of a `[m, n]` matrix. The bias may be longer
    /// than `n`, in which case only its first `n` entries are used.
    pub fn add_bias(self, bias: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = bias.value();
        let (rows, cols) = a.as_matrix_dims();
        assert!(b.len() >= cols, "bias length {} < {cols}", b.len());
        let mut out = a.data().to_vec();
        for r in 0..rows {
            for (o, bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let v = Tensor::new(a.shape().to_vec(), out).expect("same shape");
        self.binary(
            bias,
            v,
            Op::AddBias {
                a: self.id,
                bias: bias.id,
            },
        )
    }

    /// `x · sigmoid(x)`.
    pub fn silu(self) -> Var<'t> {
        let v = self.value().map(|x| x * sigmoid(x));
        self.unary(v, Op::Silu(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().mean());
        self.unary(v, Op::Mean(self.id))
    }

    /// Sums each row of a `[m, n]` matrix into a `[m]` vector.
    pub fn row_sum(self) -> Var<'t> {
        let a = self.value();
        let (rows, cols) = a.as_matrix_dims();
        let sums: Vec<f64> = (0..rows)
            .map(|r| a.data()[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        self.unary(Tensor::vector(sums), Op::RowSum(self.id))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.unary(v, Op::Clamp { a: self.id, lo, hi })
    }

    pub fn minimum(self, other: Var<'t>) -> Var<'t> {
        self.elementwise(other, f64::min, Op::Minimum(self.id, other.id))
    }

    /// Columns `start..start + len` of a `[m, n]` matrix.
    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        let a = self.value();
        let (rows, cols) = a.as_matrix_dims();
        assert!(
            start + len <= cols,
            "slice {start}+{len} exceeds {cols} columns"
        );
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&a.data()[r * cols + start..r * cols + start + len]);
        }
        self.unary(
            Tensor::matrix(rows, len, out),
            Op::SliceCols { a: self.id, start },
        )
    }

    /// Centres a vector by its mean and divides by `max(population std, floor)`.
    ///
    /// When every entry is identical the output is exactly zero and the
    /// gradient is passed through centred but unscaled.
    pub fn standardize(self, floor: f64) -> Var<'t> {
        let x = self.value();
        let n = x.len() as f64;
        let mean = x.mean();
        let std = (x
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n)
            .sqrt();
        let all_equal = x.data().iter().all(|&v| v == x.data()[0]);
        let (v, rule) = if all_equal {
            (Tensor::zeros(x.shape()), StandardizeRule::Flat)
        } else if std >= floor {
            (x.map(|v| (v - mean) / std), StandardizeRule::Scaled { std })
        } else {
            (
                x.map(|v| (v - mean) / floor),
                StandardizeRule::Floored { floor },
            )
        };
        self.unary(v, Op::Standardize { a: self.id, rule })
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.elementwise(rhs, |a, b| a + b, Op::Add(self.id, rhs.id))
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.elementwise(rhs, |a, b| a - b, Op::Sub(self.id, rhs.id))
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.elementwise(rhs, |a, b| a * b, Op::Mul(self.id, rhs.id))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}
