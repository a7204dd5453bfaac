//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Values are dense row-major f64 matrices. The tape is define-by-run: each
//! op evaluates eagerly when recorded, and `backward` walks the tape once in
//! reverse accumulating vector-Jacobian products. A training step records a
//! fresh tape; parameters live outside the tape and are re-inserted as leaves
//! each step.
//!
//! Domain-specific ops (rasterization, SSIM, temporal activation) plug in
//! through the [`CustomOp`] trait so this module stays generic.

/// Node handle into a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Id(pub(crate) usize);

/// (rows, cols) of a node value, row-major.
pub type Shape = (usize, usize);

/// A differentiable operation with arbitrary inputs, implemented outside the
/// tape. `backward` returns one optional gradient per input (None = zero).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[(&[f64], Shape)]) -> (Vec<f64>, Shape);
    fn backward(
        &self,
        inputs: &[(&[f64], Shape)],
        output: (&[f64], Shape),
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddScalar,
    MulScalar(f64),
    MatMul,
    /// (m,n) + (1,n)
    AddRow,
    /// (m,n) ⊙ (1,n)
    MulRow,
    /// (m,n) + (m,1)
    AddCol,
    /// (m,n) ⊙ (m,1)
    MulCol,
    Tanh,
    Sigmoid,
    Exp,
    Ln,
    Softplus,
    Square,
    NormalCdf,
    ClampMin(f64),
    ClampMax(f64),
    SumAll,
    SliceCols(usize, usize),
    ConcatCols,
    SelectRows(Vec<usize>),
    /// Reinterpret (m,n) as (rows,cols) with rows*cols == m*n.
    Reshape,
    /// (m,n) -> (m, k*n) by repeating the row contents k times.
    TileCols(usize),
    NormalizeRows,
    /// Forward: 1 if x > threshold else 0. Backward: identity (straight-through).
    SteGate,
    Custom(Box<dyn CustomOp>),
}

struct Node {
    op: Op,
    parents: Vec<Id>,
    shape: Shape,
    value: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Grads {
    g: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, id: Id) -> Option<&[f64]> {
        self.g[id.0].as_deref()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: Id) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: Id) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: Id) -> f64 {
        debug_assert_eq!(self.nodes[id.0].shape, (1, 1));
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, op: Op, parents: Vec<Id>, shape: Shape, value: Vec<f64>) -> Id {
        debug_assert_eq!(shape.0 * shape.1, value.len());
        self.nodes.push(Node { op, parents, shape, value });
        Id(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: Shape) -> Id {
        self.push(Op::Leaf, vec![], shape, data)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Shape) -> Id {
        self.push(Op::Constant, vec![], shape, data)
    }

    pub fn scalar(&mut self, v: f64) -> Id {
        self.constant(vec![v], (1, 1))
    }

    fn binary_elementwise(&mut self, op: Op, a: Id, b: Id, f: impl Fn(f64, f64) -> f64) -> Id {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert_eq!(sa, sb, "elementwise shape mismatch");
        let v: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.push(op, vec![a, b], sa, v)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        self.binary_elementwise(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        self.binary_elementwise(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        self.binary_elementwise(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Id, b: Id) -> Id {
        self.binary_elementwise(Op::Div, a, b, |x, y| x / y)
    }

    pub fn neg(&mut self, a: Id) -> Id {
        let s = self.shape(a);
        let v = self.value(a).iter().map(|x| -x).collect();
        self.push(Op::Neg, vec![a], s, v)
    }

    pub fn add_scalar(&mut self, a: Id, c: f64) -> Id {
        let s = self.shape(a);
        let v = self.value(a).iter().map(|x| x + c).collect();
        self.push(Op::AddScalar, vec![a], s, v)
    }

    pub fn mul_scalar(&mut self, a: Id, c: f64) -> Id {
        let s = self.shape(a);
        let v = self.value(a).iter().map(|x| x * c).collect();
        self.push(Op::MulScalar(c), vec![a], s, v)
    }

    /// (m,k) x (k,n) -> (m,n)
    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims: {k} vs {k2}");
        let v = matmul_raw(self.value(a), self.value(b), m, k, n);
        self.push(Op::MatMul, vec![a, b], (m, n), v)
    }

    pub fn add_row(&mut self, a: Id, row: Id) -> Id {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row shape");
        let rv = self.value(row).to_vec();
        let v: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + rv[i % n])
            .collect();
        self.push(Op::AddRow, vec![a, row], (m, n), v)
    }

    pub fn mul_row(&mut self, a: Id, row: Id) -> Id {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "mul_row shape");
        let rv = self.value(row).to_vec();
        let v: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * rv[i % n])
            .collect();
        self.push(Op::MulRow, vec![a, row], (m, n), v)
    }

    pub fn add_col(&mut self, a: Id, col: Id) -> Id {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(col), (m, 1), "add_col shape");
        let cv = self.value(col).to_vec();
        let v: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + cv[i / n])
            .collect();
        self.push(Op::AddCol, vec![a, col], (m, n), v)
    }

    pub fn mul_col(&mut self, a: Id, col: Id) -> Id {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(col), (m, 1), "mul_col shape");
        let cv = self.value(col).to_vec();
        let v: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * cv[i / n])
            .collect();
        self.push(Op::MulCol, vec![a, col], (m, n), v)
    }

    fn unary(&mut self, op: Op, a: Id, f: impl Fn(f64) -> f64) -> Id {
        let s = self.shape(a);
        let v = self.value(a).iter().map(|x| f(*x)).collect();
        self.push(op, vec![a], s, v)
    }

    pub fn tanh(&mut self, a: Id) -> Id {
        self.unary(Op::Tanh, a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Id) -> Id {
        self.unary(Op::Sigmoid, a, sigmoid)
    }

    pub fn exp(&mut self, a: Id) -> Id {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn ln(&mut self, a: Id) -> Id {
        self.unary(Op::Ln, a, f64::ln)
    }

    pub fn softplus(&mut self, a: Id) -> Id {
        self.unary(Op::Softplus, a, softplus)
    }

    pub fn square(&mut self, a: Id) -> Id {
        self.unary(Op::Square, a, |x| x * x)
    }

    pub fn normal_cdf(&mut self, a: Id) -> Id {
        self.unary(Op::NormalCdf, a, crate::special::std_normal_cdf)
    }

    pub fn clamp_min(&mut self, a: Id, c: f64) -> Id {
        self.unary(Op::ClampMin(c), a, |x| x.max(c))
    }

    pub fn clamp_max(&mut self, a: Id, c: f64) -> Id {
        self.unary(Op::ClampMax(c), a, |x| x.min(c))
    }

    pub fn sum_all(&mut self, a: Id) -> Id {
        let v = self.value(a).iter().sum();
        self.push(Op::SumAll, vec![a], (1, 1), vec![v])
    }

    pub fn mean_all(&mut self, a: Id) -> Id {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    pub fn slice_cols(&mut self, a: Id, c0: usize, c1: usize) -> Id {
        let (m, n) = self.shape(a);
        assert!(c0 < c1 && c1 <= n, "slice_cols range");
        let w = c1 - c0;
        let av = self.value(a);
        let mut v = Vec::with_capacity(m * w);
        for i in 0..m {
            v.extend_from_slice(&av[i * n + c0..i * n + c1]);
        }
        self.push(Op::SliceCols(c0, c1), vec![a], (m, w), v)
    }

    pub fn concat_cols(&mut self, parts: &[Id]) -> Id {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut v = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                let (pm, pn) = self.shape(*p);
                assert_eq!(pm, m, "concat_cols row mismatch");
                let pv = self.value(*p);
                v.extend_from_slice(&pv[i * pn..(i + 1) * pn]);
            }
        }
        self.push(Op::ConcatCols, parts.to_vec(), (m, total), v)
    }

    pub fn select_rows(&mut self, a: Id, indices: &[usize]) -> Id {
        let (m, n) = self.shape(a);
        let av = self.value(a);
        let mut v = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            assert!(i < m, "select_rows index");
            v.extend_from_slice(&av[i * n..(i + 1) * n]);
        }
        self.push(Op::SelectRows(indices.to_vec()), vec![a], (indices.len(), n), v)
    }

    pub fn reshape(&mut self, a: Id, rows: usize, cols: usize) -> Id {
        let (m, n) = self.shape(a);
        assert_eq!(m * n, rows * cols, "reshape size");
        let v = self.value(a).to_vec();
        self.push(Op::Reshape, vec![a], (rows, cols), v)
    }

    pub fn tile_cols(&mut self, a: Id, k: usize) -> Id {
        let (m, n) = self.shape(a);
        let av = self.value(a);
        let mut v = Vec::with_capacity(m * n * k);
        for i in 0..m {
            for _ in 0..k {
                v.extend_from_slice(&av[i * n..(i + 1) * n]);
            }
        }
        self.push(Op::TileCols(k), vec![a], (m, n * k), v)
    }

    pub fn normalize_rows(&mut self, a: Id) -> Id {
        let (m, n) = self.shape(a);
        let av = self.value(a);
        let mut v = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in row {
                v.push(x / norm);
            }
        }
        self.push(Op::NormalizeRows, vec![a], (m, n), v)
    }

    pub fn ste_gate(&mut self, a: Id, threshold: f64) -> Id {
        self.unary(Op::SteGate, a, |x| if x > threshold { 1.0 } else { 0.0 })
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Id]) -> Id {
        let in_refs: Vec<(&[f64], Shape)> = inputs
            .iter()
            .map(|id| (&self.nodes[id.0].value[..], self.nodes[id.0].shape))
            .collect();
        let (value, shape) = op.forward(&in_refs);
        self.push(Op::Custom(op), inputs.to_vec(), shape, value)
    }

    /// Reverse pass from a scalar node. Panics if `loss` is not (1,1).
    pub fn backward(&self, loss: Id) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let go = match g[idx].take() {
                Some(v) => v,
                None => continue,
            };
            let node = &self.nodes[idx];
            // Leaves keep their accumulated gradient.
            if matches!(node.op, Op::Leaf) {
                g[idx] = Some(go);
                continue;
            }
            if matches!(node.op, Op::Constant) {
                continue;
            }
            let parent_grads = self.node_backward(node, &go);
            for (pid, pg) in node.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    match &mut g[pid.0] {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&pg) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        Grads { g }
    }

    fn node_backward(&self, node: &Node, go: &[f64]) -> Vec<Option<Vec<f64>>> {
        let pv = |i: usize| -> &[f64] { &self.nodes[node.parents[i].0].value };
        let ps = |i: usize| -> Shape { self.nodes[node.parents[i].0].shape };
        match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add => vec![Some(go.to_vec()), Some(go.to_vec())],
            Op::Sub => vec![Some(go.to_vec()), Some(go.iter().map(|x| -x).collect())],
            Op::Mul => {
                let a = pv(0);
                let b = pv(1);
                vec![
                    Some(go.iter().zip(b).map(|(g, y)| g * y).collect()),
                    Some(go.iter().zip(a).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Div => {
                let a = pv(0);
                let b = pv(1);
                vec![
                    Some(go.iter().zip(b).map(|(g, y)| g / y).collect()),
                    Some(
                        go.iter()
                            .zip(a.iter().zip(b))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect(),
                    ),
                ]
            }
            Op::Neg => vec![Some(go.iter().map(|x| -x).collect())],
            Op::AddScalar => vec![Some(go.to_vec())],
            Op::MulScalar(c) => vec![Some(go.iter().map(|x| x * c).collect())],
            Op::MatMul => {
                let (m, k) = ps(0);
                let (_, n) = ps(1);
                let a = pv(0);
                let b = pv(1);
                // dA = dC * B^T ; dB = A^T * dC
                let bt = transpose_raw(b, k, n);
                let da = matmul_raw(go, &bt, m, n, k);
                let at = transpose_raw(a, m, k);
                let db = matmul_raw(&at, go, k, m, n);
                vec![Some(da), Some(db)]
            }
            Op::AddRow => {
                let (m, n) = node.shape;
                let mut dr = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dr[j] += go[i * n + j];
                    }
                }
                vec![Some(go.to_vec()), Some(dr)]
            }
            Op::MulRow => {
                let (m, n) = node.shape;
                let row = pv(1);
                let a = pv(0);
                let mut da = vec![0.0; m * n];
                let mut dr = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = go[i * n + j] * row[j];
                        dr[j] += go[i * n + j] * a[i * n + j];
                    }
                }
                vec![Some(da), Some(dr)]
            }
            Op::AddCol => {
                let (m, n) = node.shape;
                let mut dc = vec![0.0; m];
                for i in 0..m {
                    for j in 0..n {
                        dc[i] += go[i * n + j];
                    }
                }
                vec![Some(go.to_vec()), Some(dc)]
            }
            Op::MulCol => {
                let (m, n) = node.shape;
                let col = pv(1);
                let a = pv(0);
                let mut da = vec![0.0; m * n];
                let mut dc = vec![0.0; m];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = go[i * n + j] * col[i];
                        dc[i] += go[i * n + j] * a[i * n + j];
                    }
                }
                vec![Some(da), Some(dc)]
            }
            Op::Tanh => {
                let y = &node.value;
                vec![Some(go.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect())]
            }
            Op::Sigmoid => {
                let y = &node.value;
                vec![Some(go.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect())]
            }
            Op::Exp => {
                let y = &node.value;
                vec![Some(go.iter().zip(y).map(|(g, e)| g * e).collect())]
            }
            Op::Ln => {
                let x = pv(0);
                vec![Some(go.iter().zip(x).map(|(g, v)| g / v).collect())]
            }
            Op::Softplus => {
                let x = pv(0);
                vec![Some(go.iter().zip(x).map(|(g, v)| g * sigmoid(*v)).collect())]
            }
            Op::Square => {
                let x = pv(0);
                vec![Some(go.iter().zip(x).map(|(g, v)| g * 2.0 * v).collect())]
            }
            Op::NormalCdf => {
                let x = pv(0);
                vec![Some(
                    go.iter()
                        .zip(x)
                        .map(|(g, v)| g * crate::special::std_normal_pdf(*v))
                        .collect(),
                )]
            }
            Op::ClampMin(c) => {
                let x = pv(0);
                vec![Some(
                    go.iter()
                        .zip(x)
                        .map(|(g, v)| if *v > *c { *g } else { 0.0 })
                        .collect(),
                )]
            }
            Op::ClampMax(c) => {
                let x = pv(0);
                vec![Some(
                    go.iter()
                        .zip(x)
                        .map(|(g, v)| if *v < *c { *g } else { 0.0 })
                        .collect(),
                )]
            }
            Op::SumAll => {
                let (m, n) = ps(0);
                vec![Some(vec![go[0]; m * n])]
            }
            Op::SliceCols(c0, c1) => {
                let (m, n) = ps(0);
                let w = c1 - c0;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..w {
                        da[i * n + c0 + j] = go[i * w + j];
                    }
                }
                vec![Some(da)]
            }
            Op::ConcatCols => {
                let (m, _) = node.shape;
                let widths: Vec<usize> =
                    node.parents.iter().map(|p| self.nodes[p.0].shape.1).collect();
                let total: usize = widths.iter().sum();
                let mut out: Vec<Option<Vec<f64>>> =
                    widths.iter().map(|w| Some(vec![0.0; m * w])).collect();
                for i in 0..m {
                    let mut off = 0;
                    for (pi, w) in widths.iter().enumerate() {
                        let dst = out[pi].as_mut().unwrap();
                        dst[i * w..(i + 1) * w]
                            .copy_from_slice(&go[i * total + off..i * total + off + w]);
                        off += w;
                    }
                }
                out
            }
            Op::SelectRows(indices) => {
                let (m, n) = ps(0);
                let mut da = vec![0.0; m * n];
                for (out_i, &src) in indices.iter().enumerate() {
                    for j in 0..n {
                        da[src * n + j] += go[out_i * n + j];
                    }
                }
                vec![Some(da)]
            }
            Op::Reshape => vec![Some(go.to_vec())],
            Op::TileCols(k) => {
                let (m, n) = ps(0);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for rep in 0..*k {
                        for j in 0..n {
                            da[i * n + j] += go[i * n * k + rep * n + j];
                        }
                    }
                }
                vec![Some(da)]
            }
            Op::NormalizeRows => {
                let (m, n) = ps(0);
                let x = pv(0);
                let y = &node.value;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let xi = &x[i * n..(i + 1) * n];
                    let yi = &y[i * n..(i + 1) * n];
                    let gi = &go[i * n..(i + 1) * n];
                    let norm = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = yi.iter().zip(gi).map(|(u, g)| u * g).sum();
                    for j in 0..n {
                        da[i * n + j] = (gi[j] - yi[j] * dot) / norm;
                    }
                }
                vec![Some(da)]
            }
            Op::SteGate => vec![Some(go.to_vec())],
            Op::Custom(op) => {
                let in_refs: Vec<(&[f64], Shape)> = node
                    .parents
                    .iter()
                    .map(|p| (&self.nodes[p.0].value[..], self.nodes[p.0].shape))
                    .collect();
                op.backward(&in_refs, (&node.value, node.shape), go)
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
