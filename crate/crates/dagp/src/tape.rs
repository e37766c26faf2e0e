//! Matrix-valued reverse-mode automatic differentiation.
//!
//! The training objective is assembled as a graph of matrix operations on
//! a [`Tape`]; a single backward sweep then yields gradients for every
//! leaf. Operations are matrix-granular (matmul, Cholesky, triangular
//! solve, kernel gram, softmax, reductions) rather than scalar-granular,
//! so the hot loops stay in plain `f64` code and the graph itself stays
//! small — a few hundred nodes per objective evaluation.
//!
//! Every adjoint here is validated against central finite differences in
//! the test module below.

use crate::error::{Error, Result};
use crate::kernels;
use crate::math::{cholesky_with_jitter, solve_lower, DenseMatrix, TriSide};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    AddConst(NodeId),
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Cholesky(NodeId),
    TriSolve { l: NodeId, b: NodeId, side: TriSide },
    AssembleLower { strict: NodeId, diag: NodeId },
    Softplus(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Recip(NodeId),
    ClampMin(NodeId, f64),
    SeDiag { variance: NodeId },
    GramSe { variance: NodeId, lengthscales: NodeId, x1: NodeId, x2: NodeId },
    GramWhite { variance: NodeId, same_set: bool },
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    GatherRows { a: NodeId, indices: Vec<usize> },
    SliceCol(NodeId, usize),
    MulColVec { a: NodeId, v: NodeId },
    ColSumSq(NodeId),
    RowSum(NodeId),
    Sum(NodeId),
    SumSq(NodeId),
    LogDetChol(NodeId),
    ScaleByScalar { a: NodeId, s: NodeId },
    AddScalar { a: NodeId, s: NodeId },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: DenseMatrix,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Grads {
    by_node: Vec<Option<DenseMatrix>>,
}

impl Grads {
    /// Gradient with respect to a node; `None` when the node does not
    /// influence the differentiated scalar (or requires no gradient).
    pub fn wrt(&self, id: NodeId) -> Option<&DenseMatrix> {
        self.by_node[id.0].as_ref()
    }
}

/// Computation graph recording values and structure for reverse mode.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value held at a node.
    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.shape(), (1, 1));
        self.nodes[id.0].value.get(0, 0)
    }

    fn push(&mut self, op: Op, value: DenseMatrix, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Trainable leaf: gradients flow to it.
    pub fn leaf(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Constant leaf: data, noise draws, fixed hyperparameters.
    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Constant `1 x 1` leaf.
    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.constant(DenseMatrix::from_vec(1, 1, vec![v]).expect("1x1"))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add(a, b), value, req))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Sub(a, b), value, req))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).hadamard(self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Hadamard(a, b), value, req))
    }

    pub fn scale_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).scale(c);
        let req = self.requires(a);
        self.push(Op::ScaleConst(a, c), value, req)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|v| v + c);
        let req = self.requires(a);
        self.push(Op::AddConst(a), value, req)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let value = crate::math::matmul_flags(self.value(a), self.value(b), ta, tb)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::MatMul { a, b, ta, tb }, value, req))
    }

    /// Cholesky factor of a symmetric positive definite node, using the
    /// standard jitter ladder. The jitter is a constant diagonal shift, so
    /// the adjoint is that of the exact factorization actually performed.
    pub fn cholesky(&mut self, a: NodeId) -> Result<NodeId> {
        let f = cholesky_with_jitter(self.value(a), 4)?;
        let req = self.requires(a);
        Ok(self.push(Op::Cholesky(a), f.lower().clone(), req))
    }

    pub fn tri_solve(&mut self, l: NodeId, b: NodeId, side: TriSide) -> Result<NodeId> {
        let value = solve_lower(self.value(l), self.value(b), side)?;
        let req = self.requires(l) || self.requires(b);
        Ok(self.push(Op::TriSolve { l, b, side }, value, req))
    }

    /// Assemble an `n x n` lower-triangular matrix from a packed
    /// strictly-lower column (`n (n - 1) / 2 x 1`, row-major order) and a
    /// diagonal column (`n x 1`).
    pub fn assemble_lower(&mut self, strict: NodeId, diag: NodeId) -> Result<NodeId> {
        let n = self.value(diag).rows();
        let expect = n * (n - 1) / 2;
        if self.value(diag).cols() != 1
            || self.value(strict).cols() != 1
            || self.value(strict).rows() != expect
        {
            return Err(Error::dims(
                "assemble_lower",
                format!(
                    "diag {:?}, strict {:?}, expected strict {expect}x1",
                    self.value(diag).shape(),
                    self.value(strict).shape()
                ),
            ));
        }
        let mut value = DenseMatrix::zeros(n, n);
        let mut p = 0;
        for i in 0..n {
            for j in 0..i {
                value.set(i, j, self.value(strict).get(p, 0));
                p += 1;
            }
            value.set(i, i, self.value(diag).get(i, 0));
        }
        let req = self.requires(strict) || self.requires(diag);
        Ok(self.push(Op::AssembleLower { strict, diag }, value, req))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(kernels::positive_transform);
        let req = self.requires(a);
        self.push(Op::Softplus(a), value, req)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::ln);
        let req = self.requires(a);
        self.push(Op::Ln(a), value, req)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::sqrt);
        let req = self.requires(a);
        self.push(Op::Sqrt(a), value, req)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v * v);
        let req = self.requires(a);
        self.push(Op::Square(a), value, req)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::recip);
        let req = self.requires(a);
        self.push(Op::Recip(a), value, req)
    }

    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        let value = self.value(a).map(|v| v.max(floor));
        let req = self.requires(a);
        self.push(Op::ClampMin(a, floor), value, req)
    }

    /// `rows x 1` column holding the squared-exponential prior variance —
    /// the diagonal of its gram matrix.
    pub fn se_diag(&mut self, variance: NodeId, rows: usize) -> Result<NodeId> {
        if self.value(variance).shape() != (1, 1) {
            return Err(Error::dims("se_diag", "variance must be 1x1".to_string()));
        }
        let v = self.scalar(variance);
        let value = DenseMatrix::from_vec(rows, 1, vec![v; rows])?;
        let req = self.requires(variance);
        Ok(self.push(Op::SeDiag { variance }, value, req))
    }

    /// Squared-exponential gram matrix node. `variance` is `1 x 1`,
    /// `lengthscales` is `D x 1`, inputs are `N x D`. Gradients flow to
    /// all four arguments; `x1` and `x2` may be the same node.
    pub fn gram_se(
        &mut self,
        variance: NodeId,
        lengthscales: NodeId,
        x1: NodeId,
        x2: NodeId,
    ) -> Result<NodeId> {
        let d = self.value(x1).cols();
        if self.value(variance).shape() != (1, 1)
            || self.value(lengthscales).shape() != (d, 1)
            || self.value(x2).cols() != d
        {
            return Err(Error::dims(
                "gram_se",
                format!(
                    "variance {:?}, lengthscales {:?}, x1 {:?}, x2 {:?}",
                    self.value(variance).shape(),
                    self.value(lengthscales).shape(),
                    self.value(x1).shape(),
                    self.value(x2).shape()
                ),
            ));
        }
        let v = self.scalar(variance);
        let ls = self.value(lengthscales).col(0);
        let value = kernels::se_gram(v, &ls, self.value(x1), self.value(x2));
        let req = self.requires(variance)
            || self.requires(lengthscales)
            || self.requires(x1)
            || self.requires(x2);
        Ok(self.push(Op::GramSe { variance, lengthscales, x1, x2 }, value, req))
    }

    /// White-noise gram node. The indicator structure is treated as
    /// constant; only the variance receives gradient.
    pub fn gram_white(&mut self, variance: NodeId, x1: NodeId, x2: NodeId) -> Result<NodeId> {
        if self.value(variance).shape() != (1, 1) {
            return Err(Error::dims("gram_white", "variance must be 1x1".to_string()));
        }
        let same_set = self.value(x1) == self.value(x2);
        let v = self.scalar(variance);
        let value = kernels::white_gram(v, self.value(x1), self.value(x2));
        let req = self.requires(variance);
        Ok(self.push(Op::GramWhite { variance, same_set }, value, req))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = softmax_rows(self.value(a));
        let req = self.requires(a);
        self.push(Op::SoftmaxRows(a), value, req)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = log_softmax_rows(self.value(a));
        let req = self.requires(a);
        self.push(Op::LogSoftmaxRows(a), value, req)
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let src = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.rows()) {
            return Err(Error::dims(
                "gather_rows",
                format!("index {bad} out of range for {} rows", src.rows()),
            ));
        }
        let mut value = DenseMatrix::zeros(indices.len(), src.cols());
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).copy_from_slice(src.row(i));
        }
        let req = self.requires(a);
        Ok(self.push(Op::GatherRows { a, indices: indices.to_vec() }, value, req))
    }

    pub fn slice_col(&mut self, a: NodeId, col: usize) -> Result<NodeId> {
        let src = self.value(a);
        if col >= src.cols() {
            return Err(Error::dims(
                "slice_col",
                format!("column {col} out of range for {} columns", src.cols()),
            ));
        }
        let value = DenseMatrix::from_vec(src.rows(), 1, src.col(col))?;
        let req = self.requires(a);
        Ok(self.push(Op::SliceCol(a, col), value, req))
    }

    /// Scale row `i` of `a` by `v[i]`: `C[i, j] = A[i, j] * v[i]`.
    pub fn mul_col_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(a).shape();
        if self.value(v).shape() != (rows, 1) {
            return Err(Error::dims(
                "mul_col_vec",
                format!("matrix {:?} vs column {:?}", self.value(a).shape(), self.value(v).shape()),
            ));
        }
        let av = self.value(a);
        let vv = self.value(v);
        let value = DenseMatrix::from_fn(rows, cols, |i, j| av.get(i, j) * vv.get(i, 0));
        let req = self.requires(a) || self.requires(v);
        Ok(self.push(Op::MulColVec { a, v }, value, req))
    }

    /// Column sums of squares: output is `cols x 1`.
    pub fn col_sum_sq(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut value = DenseMatrix::zeros(src.cols(), 1);
        for i in 0..src.rows() {
            let row = src.row(i);
            for (j, &x) in row.iter().enumerate() {
                value.set(j, 0, value.get(j, 0) + x * x);
            }
        }
        let req = self.requires(a);
        self.push(Op::ColSumSq(a), value, req)
    }

    /// Row sums: output is `rows x 1`.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let value = DenseMatrix::from_fn(src.rows(), 1, |i, _| src.row(i).iter().sum());
        let req = self.requires(a);
        self.push(Op::RowSum(a), value, req)
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = DenseMatrix::from_vec(1, 1, vec![self.value(a).sum()]).expect("1x1");
        let req = self.requires(a);
        self.push(Op::Sum(a), value, req)
    }

    /// Sum of squared entries as a `1 x 1` node.
    pub fn sum_sq(&mut self, a: NodeId) -> NodeId {
        let value = DenseMatrix::from_vec(1, 1, vec![self.value(a).sum_sq()]).expect("1x1");
        let req = self.requires(a);
        self.push(Op::SumSq(a), value, req)
    }

    /// `log det(L L^T) = 2 sum_i ln L_ii` for a lower-triangular node.
    pub fn log_det_chol(&mut self, l: NodeId) -> Result<NodeId> {
        let lv = self.value(l);
        if !lv.is_square() {
            return Err(Error::dims("log_det_chol", format!("got {:?}", lv.shape())));
        }
        let ld = (0..lv.rows()).map(|i| lv.get(i, i).ln()).sum::<f64>() * 2.0;
        let value = DenseMatrix::from_vec(1, 1, vec![ld])?;
        let req = self.requires(l);
        Ok(self.push(Op::LogDetChol(l), value, req))
    }

    /// Multiply every entry of `a` by the `1 x 1` node `s`.
    pub fn scale_by_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).shape() != (1, 1) {
            return Err(Error::dims("scale_by_scalar", "scale must be 1x1".to_string()));
        }
        let sv = self.scalar(s);
        let value = self.value(a).scale(sv);
        let req = self.requires(a) || self.requires(s);
        Ok(self.push(Op::ScaleByScalar { a, s }, value, req))
    }

    /// Add the `1 x 1` node `s` to every entry of `a`.
    pub fn add_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).shape() != (1, 1) {
            return Err(Error::dims("add_scalar", "addend must be 1x1".to_string()));
        }
        let sv = self.scalar(s);
        let value = self.value(a).map(|v| v + sv);
        let req = self.requires(a) || self.requires(s);
        Ok(self.push(Op::AddScalar { a, s }, value, req))
    }

    /// Reverse sweep from a `1 x 1` root. Returns per-node cotangents;
    /// leaves created with [`Tape::leaf`] carry the gradients of interest.
    pub fn backward(&self, root: NodeId) -> Result<Grads> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::dims(
                "backward",
                format!("root must be 1x1, got {:?}", self.value(root).shape()),
            ));
        }
        let mut adj: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(DenseMatrix::from_vec(1, 1, vec![1.0])?);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                adj[idx] = None;
                continue;
            }
            let Some(cot) = adj[idx].take() else { continue };
            self.propagate(idx, &cot, &mut adj)?;
            if matches!(self.nodes[idx].op, Op::Leaf) {
                adj[idx] = Some(cot);
            }
        }
        Ok(Grads { by_node: adj })
    }

    fn accumulate(adj: &mut [Option<DenseMatrix>], target: NodeId, delta: DenseMatrix) {
        match &mut adj[target.0] {
            Some(existing) => {
                *existing = existing.add(&delta).expect("adjoint shapes match");
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn add_if_required(
        &self,
        adj: &mut [Option<DenseMatrix>],
        target: NodeId,
        delta: impl FnOnce() -> DenseMatrix,
    ) {
        if self.requires(target) {
            Self::accumulate(adj, target, delta());
        }
    }

    fn propagate(
        &self,
        idx: usize,
        cot: &DenseMatrix,
        adj: &mut Vec<Option<DenseMatrix>>,
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_if_required(adj, *a, || cot.clone());
                self.add_if_required(adj, *b, || cot.clone());
            }
            Op::Sub(a, b) => {
                self.add_if_required(adj, *a, || cot.clone());
                self.add_if_required(adj, *b, || cot.scale(-1.0));
            }
            Op::Hadamard(a, b) => {
                self.add_if_required(adj, *a, || {
                    cot.hadamard(self.value(*b)).expect("shape")
                });
                self.add_if_required(adj, *b, || {
                    cot.hadamard(self.value(*a)).expect("shape")
                });
            }
            Op::ScaleConst(a, c) => {
                self.add_if_required(adj, *a, || cot.scale(*c));
            }
            Op::AddConst(a) => {
                self.add_if_required(adj, *a, || cot.clone());
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mm = crate::math::matmul_flags;
                self.add_if_required(adj, *a, || {
                    match (ta, tb) {
                        (false, false) => mm(cot, bv, false, true),
                        (true, false) => mm(bv, cot, false, true),
                        (false, true) => mm(cot, bv, false, false),
                        (true, true) => mm(bv, cot, true, true),
                    }
                    .expect("adjoint shapes match")
                });
                self.add_if_required(adj, *b, || {
                    match (ta, tb) {
                        (false, false) => mm(av, cot, true, false),
                        (true, false) => mm(av, cot, false, false),
                        (false, true) => mm(cot, av, true, false),
                        (true, true) => mm(cot, av, true, true),
                    }
                    .expect("adjoint shapes match")
                });
            }
            Op::Cholesky(a) => {
                self.add_if_required(adj, *a, || {
                    cholesky_adjoint(&self.nodes[idx].value, cot)
                });
            }
            Op::TriSolve { l, b, side } => {
                let lv = self.value(*l);
                let x = &self.nodes[idx].value;
                // Gradient w.r.t. the right-hand side, reused for the
                // factor adjoint below.
                let g = match side {
                    TriSide::Lower => {
                        solve_lower(lv, cot, TriSide::LowerTransposed).expect("shapes")
                    }
                    TriSide::LowerTransposed => {
                        solve_lower(lv, cot, TriSide::Lower).expect("shapes")
                    }
                };
                self.add_if_required(adj, *l, || {
                    let full = match side {
                        // L^-1 B = X:  Lbar -= G X^T
                        TriSide::Lower => {
                            crate::math::matmul_flags(&g, x, false, true).expect("shapes")
                        }
                        // L^-T B = X:  Lbar -= X G^T
                        TriSide::LowerTransposed => {
                            crate::math::matmul_flags(x, &g, false, true).expect("shapes")
                        }
                    };
                    let n = lv.rows();
                    DenseMatrix::from_fn(n, n, |i, j| if j <= i { -full.get(i, j) } else { 0.0 })
                });
                self.add_if_required(adj, *b, || g.clone());
            }
            Op::AssembleLower { strict, diag } => {
                let n = self.value(*diag).rows();
                self.add_if_required(adj, *strict, || {
                    let mut out = DenseMatrix::zeros(n * (n - 1) / 2, 1);
                    let mut p = 0;
                    for i in 0..n {
                        for j in 0..i {
                            out.set(p, 0, cot.get(i, j));
                            p += 1;
                        }
                    }
                    out
                });
                self.add_if_required(adj, *diag, || {
                    DenseMatrix::from_fn(n, 1, |i, _| cot.get(i, i))
                });
            }
            Op::Softplus(a) => {
                let av = self.value(*a);
                self.add_if_required(adj, *a, || {
                    DenseMatrix::from_fn(av.rows(), av.cols(), |i, j| {
                        cot.get(i, j) * sigmoid(av.get(i, j))
                    })
                });
            }
            Op::Ln(a) => {
                let av = self.value(*a);
                self.add_if_required(adj, *a, || {
                    cot.hadamard(&av.map(f64::recip)).expect("shape")
                });
            }
            Op::Sqrt(a) => {
                let out = &self.nodes[idx].value;
                self.add_if_required(adj, *a, || {
                    cot.hadamard(&out.map(|y| 0.5 / y)).expect("shape")
                });
            }
            Op::Square(a) => {
                let av = self.value(*a);
                self.add_if_required(adj, *a, || {
                    cot.hadamard(&av.scale(2.0)).expect("shape")
                });
            }
            Op::Recip(a) => {
                let out = &self.nodes[idx].value;
                self.add_if_required(adj, *a, || {
                    cot.hadamard(&out.map(|y| -y * y)).expect("shape")
                });
            }
            Op::ClampMin(a, floor) => {
                let av = self.value(*a);
                self.add_if_required(adj, *a, || {
                    DenseMatrix::from_fn(av.rows(), av.cols(), |i, j| {
                        if av.get(i, j) > *floor { cot.get(i, j) } else { 0.0 }
                    })
                });
            }
            Op::SeDiag { variance } => {
                self.add_if_required(adj, *variance, || {
                    DenseMatrix::from_vec(1, 1, vec![cot.sum()]).expect("1x1")
                });
            }
            Op::GramSe { variance, lengthscales, x1, x2 } => {
                self.gram_se_adjoint(idx, cot, adj, *variance, *lengthscales, *x1, *x2);
            }
            Op::GramWhite { variance, same_set } => {
                if *same_set {
                    self.add_if_required(adj, *variance, || {
                        let tr = (0..cot.rows()).map(|i| cot.get(i, i)).sum();
                        DenseMatrix::from_vec(1, 1, vec![tr]).expect("1x1")
                    });
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                self.add_if_required(adj, *a, || {
                    let mut out = DenseMatrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let dot: f64 = cot
                            .row(i)
                            .iter()
                            .zip(y.row(i))
                            .map(|(&c, &s)| c * s)
                            .sum();
                        for j in 0..y.cols() {
                            out.set(i, j, y.get(i, j) * (cot.get(i, j) - dot));
                        }
                    }
                    out
                });
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                self.add_if_required(adj, *a, || {
                    let mut out = DenseMatrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let row_total: f64 = cot.row(i).iter().sum();
                        for j in 0..y.cols() {
                            out.set(i, j, cot.get(i, j) - y.get(i, j).exp() * row_total);
                        }
                    }
                    out
                });
            }
            Op::GatherRows { a, indices } => {
                let src = self.value(*a);
                self.add_if_required(adj, *a, || {
                    let mut out = DenseMatrix::zeros(src.rows(), src.cols());
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..src.cols() {
                            out.set(i, j, out.get(i, j) + cot.get(r, j));
                        }
                    }
                    out
                });
            }
            Op::SliceCol(a, col) => {
                let src = self.value(*a);
                self.add_if_required(adj, *a, || {
                    let mut out = DenseMatrix::zeros(src.rows(), src.cols());
                    for i in 0..src.rows() {
                        out.set(i, *col, cot.get(i, 0));
                    }
                    out
                });
            }
            Op::MulColVec { a, v } => {
                let (av, vv) = (self.value(*a), self.value(*v));
                self.add_if_required(adj, *a, || {
                    DenseMatrix::from_fn(av.rows(), av.cols(), |i, j| {
                        cot.get(i, j) * vv.get(i, 0)
                    })
                });
                self.add_if_required(adj, *v, || {
                    DenseMatrix::from_fn(av.rows(), 1, |i, _| {
                        (0..av.cols()).map(|j| cot.get(i, j) * av.get(i, j)).sum()
                    })
                });
            }
            Op::ColSumSq(a) => {
                let av = self.value(*a);
                self.add_if_required(adj, *a, || {
                    DenseMatrix::from_fn(av.rows(), av.cols(), |i, j| {
                        2.0 * av.get(i, j) * cot.get(j, 0)
                    })
                });
            }
            Op::RowSum(a) => {
                let av = self.value(*a);
                self.add_if_required(adj, *a, || {
                    DenseMatrix::from_fn(av.rows(), av.cols(), |i, _| cot.get(i, 0))
                });
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                let c = cot.get(0, 0);
                self.add_if_required(adj, *a, || {
                    DenseMatrix::from_fn(av.rows(), av.cols(), |_, _| c)
                });
            }
            Op::SumSq(a) => {
                let av = self.value(*a);
                let c = cot.get(0, 0);
                self.add_if_required(adj, *a, || av.scale(2.0 * c));
            }
            Op::LogDetChol(l) => {
                let lv = self.value(*l);
                let c = cot.get(0, 0);
                self.add_if_required(adj, *l, || {
                    DenseMatrix::from_fn(lv.rows(), lv.cols(), |i, j| {
                        if i == j { 2.0 * c / lv.get(i, i) } else { 0.0 }
                    })
                });
            }
            Op::ScaleByScalar { a, s } => {
                let (av, sv) = (self.value(*a), self.scalar(*s));
                self.add_if_required(adj, *a, || cot.scale(sv));
                self.add_if_required(adj, *s, || {
                    let dot = cot.hadamard(av).expect("shape").sum();
                    DenseMatrix::from_vec(1, 1, vec![dot]).expect("1x1")
                });
            }
            Op::AddScalar { a, s } => {
                self.add_if_required(adj, *a, || cot.clone());
                self.add_if_required(adj, *s, || {
                    DenseMatrix::from_vec(1, 1, vec![cot.sum()]).expect("1x1")
                });
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn gram_se_adjoint(
        &self,
        idx: usize,
        cot: &DenseMatrix,
        adj: &mut [Option<DenseMatrix>],
        variance: NodeId,
        lengthscales: NodeId,
        x1: NodeId,
        x2: NodeId,
    ) {
        let k = &self.nodes[idx].value;
        let v = self.scalar(variance);
        let ls = self.value(lengthscales).col(0);
        let (x1v, x2v) = (self.value(x1), self.value(x2));
        let d = x1v.cols();
        // Shared weight: w_ij = cot_ij * K_ij.
        let w = cot.hadamard(k).expect("shape");
        self.add_if_required(adj, variance, || {
            DenseMatrix::from_vec(1, 1, vec![w.sum() / v]).expect("1x1")
        });
        self.add_if_required(adj, lengthscales, || {
            let mut out = DenseMatrix::zeros(d, 1);
            for i in 0..x1v.rows() {
                for j in 0..x2v.rows() {
                    let wij = w.get(i, j);
                    if wij != 0.0 {
                        for dd in 0..d {
                            let diff = x1v.get(i, dd) - x2v.get(j, dd);
                            let l = ls[dd];
                            out.set(dd, 0, out.get(dd, 0) + wij * diff * diff / (l * l * l));
                        }
                    }
                }
            }
            out
        });
        // d k_ij / d x1_id = -K_ij (x1_id - x2_jd) / l_d^2; the x2
        // derivative is its negation. When x1 == x2 both contributions
        // accumulate onto the same node, which is exactly the chain rule
        // for a repeated argument.
        if self.requires(x1) {
            let mut out = DenseMatrix::zeros(x1v.rows(), d);
            for i in 0..x1v.rows() {
                for j in 0..x2v.rows() {
                    let wij = w.get(i, j);
                    if wij != 0.0 {
                        for dd in 0..d {
                            let diff = x1v.get(i, dd) - x2v.get(j, dd);
                            let l = ls[dd];
                            out.set(i, dd, out.get(i, dd) - wij * diff / (l * l));
                        }
                    }
                }
            }
            Self::accumulate(adj, x1, out);
        }
        if self.requires(x2) {
            let mut out = DenseMatrix::zeros(x2v.rows(), d);
            for i in 0..x1v.rows() {
                for j in 0..x2v.rows() {
                    let wij = w.get(i, j);
                    if wij != 0.0 {
                        for dd in 0..d {
                            let diff = x1v.get(i, dd) - x2v.get(j, dd);
                            let l = ls[dd];
                            out.set(j, dd, out.get(j, dd) + wij * diff / (l * l));
                        }
                    }
                }
            }
            Self::accumulate(adj, x2, out);
        }
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

/// Row-wise softmax with the usual max-shift stabilization.
pub(crate) fn softmax_rows(a: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let row = a.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let mut total = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out.set(i, j, e);
            total += e;
        }
        for j in 0..a.cols() {
            out.set(i, j, out.get(i, j) / total);
        }
    }
    out
}

/// Row-wise log-softmax.
pub(crate) fn log_softmax_rows(a: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let row = a.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for (j, &v) in row.iter().enumerate() {
            out.set(i, j, v - lse);
        }
    }
    out
}

/// Reverse-mode adjoint of `L = chol(A)`: maps the cotangent on `L` to the
/// cotangent on (symmetric) `A`.
fn cholesky_adjoint(l: &DenseMatrix, l_bar: &DenseMatrix) -> DenseMatrix {
    let n = l.rows();
    // Phi = lower(L^T Lbar) with halved diagonal.
    let s = crate::math::matmul_flags(l, l_bar, true, false).expect("square");
    let phi = DenseMatrix::from_fn(n, n, |i, j| {
        if i > j {
            s.get(i, j)
        } else if i == j {
            0.5 * s.get(i, j)
        } else {
            0.0
        }
    });
    // R = L^-T Phi L^-1, computed as two triangular solves.
    let t = solve_lower(l, &phi, TriSide::LowerTransposed).expect("shapes");
    let r = solve_lower(l, &t.transpose(), TriSide::LowerTransposed)
        .expect("shapes")
        .transpose();
    // Symmetrize: the forward map only reads the symmetric part of A.
    DenseMatrix::from_fn(n, n, |i, j| 0.5 * (r.get(i, j) + r.get(j, i)))
}


#[cfg(test)]
mod tests {
    use super::testutil::{fd_check, weighted_sum};
    use super::*;

    fn mat(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, f)
    }

    #[test]
    fn grads_add_sub_hadamard_scale() {
        let a = mat(2, 3, |i, j| 0.5 + i as f64 - 0.3 * j as f64);
        let b = mat(2, 3, |i, j| -0.2 + 0.4 * i as f64 + 0.1 * j as f64);
        fd_check(&[a, b], |t, ids| {
            let s = t.add(ids[0], ids[1]).unwrap();
            let d = t.sub(s, ids[1]).unwrap();
            let h = t.hadamard(d, ids[1]).unwrap();
            let sc = t.scale_const(h, 1.7);
            let sc = t.add_const(sc, 0.3);
            weighted_sum(t, sc)
        }, 1e-6);
    }

    #[test]
    fn grads_matmul_all_flag_combinations() {
        let a = mat(3, 2, |i, j| 0.3 * i as f64 - 0.5 * j as f64 + 0.2);
        let b = mat(2, 4, |i, j| 0.1 * i as f64 + 0.25 * j as f64 - 0.4);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let (lhs, rhs) = match (ta, tb) {
                (false, false) => (a.clone(), b.clone()),
                (true, false) => (a.transpose(), b.clone()),
                (false, true) => (a.clone(), b.transpose()),
                (true, true) => (a.transpose(), b.transpose()),
            };
            fd_check(&[lhs, rhs], |t, ids| {
                let c = t.matmul(ids[0], ids[1], ta, tb).unwrap();
                weighted_sum(t, c)
            }, 1e-6);
        }
    }

    #[test]
    fn grads_cholesky() {
        // A = B B^T + 2 I stays SPD under FD perturbations of B.
        let b = mat(3, 3, |i, j| 0.4 * i as f64 - 0.3 * j as f64 + 0.6);
        fd_check(&[b], |t, ids| {
            let bbt = t.matmul(ids[0], ids[0], false, true).unwrap();
            let eye = t.constant(DenseMatrix::identity(3).scale(2.0));
            let a = t.add(bbt, eye).unwrap();
            let l = t.cholesky(a).unwrap();
            weighted_sum(t, l)
        }, 1e-5);
    }

    #[test]
    fn grads_log_det_through_cholesky() {
        let b = mat(3, 3, |i, j| 0.2 * (i * 3 + j) as f64 - 0.5);
        fd_check(&[b], |t, ids| {
            let bbt = t.matmul(ids[0], ids[0], false, true).unwrap();
            let eye = t.constant(DenseMatrix::identity(3).scale(1.5));
            let a = t.add(bbt, eye).unwrap();
            let l = t.cholesky(a).unwrap();
            t.log_det_chol(l).unwrap()
        }, 1e-5);
    }

    #[test]
    fn grads_tri_solve_both_sides_and_assemble() {
        let strict = mat(3, 1, |i, _| 0.3 + 0.2 * i as f64);
        let diag_raw = mat(3, 1, |i, _| 0.5 + 0.3 * i as f64);
        let rhs = mat(3, 2, |i, j| 0.7 - 0.4 * i as f64 + 0.3 * j as f64);
        for side in [TriSide::Lower, TriSide::LowerTransposed] {
            fd_check(&[strict.clone(), diag_raw.clone(), rhs.clone()], move |t, ids| {
                let diag = t.softplus(ids[1]);
                let l = t.assemble_lower(ids[0], diag).unwrap();
                let x = t.tri_solve(l, ids[2], side).unwrap();
                weighted_sum(t, x)
            }, 1e-5);
        }
    }

    #[test]
    fn grads_elementwise_chain() {
        let a = mat(2, 2, |i, j| 0.8 + 0.5 * i as f64 + 0.2 * j as f64);
        fd_check(&[a], |t, ids| {
            let sq = t.square(ids[0]);
            let sqrt = t.sqrt(sq);
            let ln = t.ln(sqrt);
            let sp = t.softplus(ln);
            let rc = t.recip(sp);
            weighted_sum(t, rc)
        }, 1e-6);
    }

    #[test]
    fn grads_clamp_passes_above_floor_and_blocks_below() {
        let a = mat(1, 2, |_, j| if j == 0 { 2.0 } else { -1.0 });
        let mut tape = Tape::new();
        let id = tape.leaf(a);
        let c = tape.clamp_min(id, 0.5);
        assert_eq!(tape.value(c).data(), &[2.0, 0.5]);
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(id).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn grads_gram_se_distinct_inputs() {
        let var_raw = mat(1, 1, |_, _| 0.4);
        let ls_raw = mat(2, 1, |i, _| 0.3 + 0.4 * i as f64);
        let x1 = mat(3, 2, |i, j| 0.5 * i as f64 - 0.2 * j as f64);
        let x2 = mat(2, 2, |i, j| -0.3 + 0.4 * i as f64 + 0.3 * j as f64);
        fd_check(&[var_raw, ls_raw, x1, x2], |t, ids| {
            let v = t.softplus(ids[0]);
            let ls = t.softplus(ids[1]);
            let g = t.gram_se(v, ls, ids[2], ids[3]).unwrap();
            weighted_sum(t, g)
        }, 1e-5);
    }

    #[test]
    fn grads_gram_se_same_node_input() {
        let var_raw = mat(1, 1, |_, _| 0.2);
        let ls_raw = mat(1, 1, |_, _| 0.5);
        let x = mat(4, 1, |i, _| -1.0 + 0.7 * i as f64);
        fd_check(&[var_raw, ls_raw, x], |t, ids| {
            let v = t.softplus(ids[0]);
            let ls = t.softplus(ids[1]);
            let g = t.gram_se(v, ls, ids[2], ids[2]).unwrap();
            weighted_sum(t, g)
        }, 1e-5);
    }

    #[test]
    fn grads_softmax_and_log_softmax() {
        let a = mat(3, 3, |i, j| 0.4 * i as f64 - 0.6 * j as f64 + 0.1);
        fd_check(&[a.clone()], |t, ids| {
            let s = t.softmax_rows(ids[0]);
            weighted_sum(t, s)
        }, 1e-6);
        fd_check(&[a], |t, ids| {
            let s = t.log_softmax_rows(ids[0]);
            weighted_sum(t, s)
        }, 1e-6);
    }

    #[test]
    fn grads_gather_slice_mul_col() {
        let a = mat(4, 3, |i, j| 0.2 * i as f64 + 0.3 * j as f64 - 0.5);
        let v = mat(3, 1, |i, _| 0.6 + 0.2 * i as f64);
        fd_check(&[a, v], |t, ids| {
            let g = t.gather_rows(ids[0], &[2, 0, 2]).unwrap();
            let m = t.mul_col_vec(g, ids[1]).unwrap();
            let c = t.slice_col(m, 1).unwrap();
            weighted_sum(t, c)
        }, 1e-6);
    }

    #[test]
    fn grads_reductions() {
        let a = mat(3, 2, |i, j| 0.5 * i as f64 - 0.4 * j as f64 + 0.3);
        fd_check(&[a.clone()], |t, ids| {
            let c = t.col_sum_sq(ids[0]);
            weighted_sum(t, c)
        }, 1e-6);
        fd_check(&[a.clone()], |t, ids| {
            let r = t.row_sum(ids[0]);
            weighted_sum(t, r)
        }, 1e-6);
        fd_check(&[a.clone()], |t, ids| t.sum_sq(ids[0]), 1e-6);
        fd_check(&[a], |t, ids| {
            let s = t.sum(ids[0]);
            let sq = t.square(s);
            t.sum(sq)
        }, 1e-6);
    }

    #[test]
    fn grads_scalar_broadcast_ops() {
        let a = mat(2, 3, |i, j| 0.4 * i as f64 + 0.1 * j as f64 - 0.2);
        let s = mat(1, 1, |_, _| 0.7);
        fd_check(&[a.clone(), s.clone()], |t, ids| {
            let m = t.scale_by_scalar(ids[0], ids[1]).unwrap();
            weighted_sum(t, m)
        }, 1e-6);
        fd_check(&[a, s], |t, ids| {
            let m = t.add_scalar(ids[0], ids[1]).unwrap();
            weighted_sum(t, m)
        }, 1e-6);
    }

    #[test]
    fn gram_white_gradient_flows_to_variance_only_for_same_set() {
        let x = mat(3, 1, |i, _| i as f64);
        let mut tape = Tape::new();
        let v = tape.leaf(mat(1, 1, |_, _| 0.5));
        let xs = tape.constant(x.clone());
        let g = tape.gram_white(v, xs, xs).unwrap();
        let s = tape.sum(g);
        assert_eq!(tape.scalar(s), 1.5);
        let grads = tape.backward(s).unwrap();
        // d(sum of v*I)/dv = trace weight = 3.
        assert_eq!(grads.wrt(v).unwrap().get(0, 0), 3.0);

        let mut tape = Tape::new();
        let v = tape.leaf(mat(1, 1, |_, _| 0.5));
        let xs = tape.constant(x.clone());
        let other = tape.constant(mat(2, 1, |i, _| 10.0 + i as f64));
        let g = tape.gram_white(v, xs, other).unwrap();
        let s = tape.sum(g);
        assert_eq!(tape.scalar(s), 0.0);
        let grads = tape.backward(s).unwrap();
        assert!(grads.wrt(v).is_none());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(mat(2, 2, |i, j| (i + j) as f64 + 0.5));
        let c = tape.constant(mat(2, 2, |_, _| 2.0));
        let h = tape.hadamard(a, c).unwrap();
        let s = tape.sum(h);
        let grads = tape.backward(s).unwrap();
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(a).unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_log_softmax() {
        let a = mat(2, 3, |i, j| (i * 3 + j) as f64 * 0.7 - 1.0);
        let s = softmax_rows(&a);
        for i in 0..2 {
            let total: f64 = s.row(i).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let ls = log_softmax_rows(&a);
        for i in 0..2 {
            for j in 0..3 {
                assert!((ls.get(i, j) - s.get(i, j).ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let a = tape.leaf(mat(2, 2, |_, _| 1.0));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn shared_subexpression_accumulates_both_paths() {
        // y = sum(a) * sum(a) -> dy/da = 2 * sum(a).
        let mut tape = Tape::new();
        let a = tape.leaf(mat(2, 1, |i, _| 1.0 + i as f64));
        let s = tape.sum(a);
        let prod = tape.hadamard(s, s).unwrap();
        let grads = tape.backward(prod).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), &[6.0, 6.0]);
    }
}
