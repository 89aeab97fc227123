use super::{kernels, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, m: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, bias: Var, n: usize },
    Scale { a: Var, c: f64 },
    SoftmaxRows { a: Var, n: usize },
    SliceRows { a: Var, start: usize, n: usize },
    SliceCols { a: Var, start: usize, width: usize, n: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<(Var, usize)>, n: usize },
    Gather { a: Var, indices: Vec<usize> },
    GatherRows { a: Var, rows: Vec<usize>, n: usize },
    MeanRows { a: Var, m: usize, n: usize },
    Sum { a: Var },
    Mean { a: Var },
    ClampMin { a: Var, floor: f64 },
    Log { a: Var },
    DivScalar { a: Var, s: Var },
    Gelu { a: Var },
    Rotary { a: Var, cos: Vec<f64>, sin: Vec<f64> },
    Reshape { a: Var },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations in execution order so that every node's
/// parents precede it. Single owner; not shared across threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the node does not depend on any `requires_grad` leaf or
    /// does not reach the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Stores the adjoint of `v` in `tensor.grad`, zeros when unreachable.
    pub fn write_into(&self, v: Var, tensor: &mut Tensor) -> Result<(), TensorError> {
        let g = self
            .get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tensor.numel()]);
        tensor.set_grad(g)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `t` as a leaf; it participates in backward iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A gradient-free copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = &self.nodes[v.0];
        let (shape, value) = (node.shape.clone(), node.value.clone());
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold valid shapes")
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        match self.nodes[v.0].shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.nodes[v.0].shape.clone(),
            }),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let value = kernels::matmul(self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2("transpose", a)?;
        let value = kernels::transpose(self.value(a), m, n);
        Ok(self.push(vec![n, m], value, Op::Transpose { a, m, n }, &[a]))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        self.same_shape(op_name, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a length-`n` vector (any shape with `n` elements) to every row of
    /// `x[m×n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2("add_row", x)?;
        if self.value(bias).len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: vec![m, n],
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        Ok(self.push(vec![m, n], value, Op::AddRow { x, bias, n }, &[x, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::Scale { a, c }, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2("softmax_rows", a)?;
        let value = kernels::softmax_rows(self.value(a), m, n);
        Ok(self.push(vec![m, n], value, Op::SoftmaxRows { a, n }, &[a]))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (m, n) = self.dims2("slice_rows", a)?;
        if start >= end || end > m {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: end,
                extent: m,
            });
        }
        let value = self.value(a)[start * n..end * n].to_vec();
        Ok(self.push(vec![end - start, n], value, Op::SliceRows { a, start, n }, &[a]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (m, n) = self.dims2("slice_cols", a)?;
        if start >= end || end > n {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: end,
                extent: n,
            });
        }
        let width = end - start;
        let src = self.value(a);
        let mut value = Vec::with_capacity(m * width);
        for i in 0..m {
            value.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        Ok(self.push(
            vec![m, width],
            value,
            Op::SliceCols { a, start, width, n },
            &[a],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows of zero parts".into()))?;
        let (_, n) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let (m, n2) = self.dims2("concat_rows", p)?;
            if n2 != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, n],
                    rhs: vec![m, n2],
                });
            }
            rows += m;
            value.extend_from_slice(self.value(p));
        }
        Ok(self.push(
            vec![rows, n],
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of zero parts".into()))?;
        let (m, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (m2, w) = self.dims2("concat_cols", p)?;
            if m2 != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![m, 0],
                    rhs: vec![m2, w],
                });
            }
            widths.push((p, w));
        }
        let n: usize = widths.iter().map(|&(_, w)| w).sum();
        let mut value = Vec::with_capacity(m * n);
        for i in 0..m {
            for &(p, w) in &widths {
                value.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![m, n], value, Op::ConcatCols { parts: widths, n }, parts))
    }

    /// Elements at the given flat indices, as a rank-1 tensor.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let len = self.value(a).len();
        if indices.is_empty() {
            return Err(TensorError::Contract("gather of zero indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(TensorError::Index {
                op: "gather",
                index: bad,
                extent: len,
            });
        }
        let src = self.value(a);
        let value = indices.iter().map(|&i| src[i]).collect();
        Ok(self.push(
            vec![indices.len()],
            value,
            Op::Gather {
                a,
                indices: indices.to_vec(),
            },
            &[a],
        ))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let (m, n) = self.dims2("gather_rows", a)?;
        if rows.is_empty() {
            return Err(TensorError::Contract("gather_rows of zero rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(TensorError::Index {
                op: "gather_rows",
                index: bad,
                extent: m,
            });
        }
        let src = self.value(a);
        let mut value = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            value.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        Ok(self.push(
            vec![rows.len(), n],
            value,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
                n,
            },
            &[a],
        ))
    }

    /// Column means of `a[m×n]`, shape `[1×n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2("mean_rows", a)?;
        let src = self.value(a);
        let mut value = vec![0.0; n];
        for i in 0..m {
            for (acc, x) in value.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                *acc += x;
            }
        }
        for v in value.iter_mut() {
            *v /= m as f64;
        }
        Ok(self.push(vec![1, n], value, Op::MeanRows { a, m, n }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![s], Op::Mean { a }, &[a])
    }

    /// `max(a, floor)`; the gradient is blocked where `a < floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).iter().map(|&x| x.max(floor)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::ClampMin { a, floor }, &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::Log { a }, &[a])
    }

    /// `a / s` for a one-element `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "div_scalar",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[s.0].shape.clone(),
            });
        }
        let d = self.value(s)[0];
        let value = self.value(a).iter().map(|x| x / d).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, Op::DivScalar { a, s }, &[a, s]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| gelu(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::Gelu { a }, &[a])
    }

    /// Rotates consecutive pairs `(x[2i], x[2i+1])` by the angles whose
    /// cosines and sines are given (one per pair, in flat order).
    pub fn rotary(&mut self, a: Var, cos: Vec<f64>, sin: Vec<f64>) -> Result<Var, TensorError> {
        let len = self.value(a).len();
        if !len.is_multiple_of(2) || cos.len() * 2 != len || sin.len() != cos.len() {
            return Err(TensorError::ShapeMismatch {
                op: "rotary",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: vec![cos.len(), 2],
            });
        }
        let x = self.value(a);
        let mut value = vec![0.0; len];
        for p in 0..cos.len() {
            let (x0, x1) = (x[2 * p], x[2 * p + 1]);
            value[2 * p] = x0 * cos[p] - x1 * sin[p];
            value[2 * p + 1] = x0 * sin[p] + x1 * cos[p];
        }
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, Op::Rotary { a, cos, sin }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let len = self.value(a).len();
        if shape.iter().product::<usize>() != len || shape.contains(&0) {
            return Err(TensorError::InvalidShape { shape, len });
        }
        let value = self.value(a).to_vec();
        Ok(self.push(shape, value, Op::Reshape { a }, &[a]))
    }

    /// Reverse sweep from a one-element `loss`. Each node is visited once,
    /// in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Adjoints of non-differentiable nodes are meaningless; drop them.
        for (idx, g) in grads.iter_mut().enumerate() {
            if !self.nodes[idx].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &[f64], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                // dA = G·Bᵀ, dB = Aᵀ·G
                let bt = kernels::transpose(self.value(b), k, n);
                let da = kernels::matmul(g, &bt, m, n, k);
                acc(a, &mut |s| add_into(s, &da));
                let at = kernels::transpose(self.value(a), m, k);
                let db = kernels::matmul(&at, g, k, m, n);
                acc(b, &mut |s| add_into(s, &db));
            }
            &Op::Transpose { a, m, n } => {
                let ga = kernels::transpose(g, n, m);
                acc(a, &mut |s| add_into(s, &ga));
            }
            &Op::Add { a, b } => {
                acc(a, &mut |s| add_into(s, g));
                acc(b, &mut |s| add_into(s, g));
            }
            &Op::Sub { a, b } => {
                acc(a, &mut |s| add_into(s, g));
                acc(b, &mut |s| {
                    for (x, gi) in s.iter_mut().zip(g) {
                        *x -= gi;
                    }
                });
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (self.value(a), self.value(b));
                acc(a, &mut |s| {
                    for ((x, gi), y) in s.iter_mut().zip(g).zip(vb) {
                        *x += gi * y;
                    }
                });
                acc(b, &mut |s| {
                    for ((x, gi), y) in s.iter_mut().zip(g).zip(va) {
                        *x += gi * y;
                    }
                });
            }
            &Op::AddRow { x, bias, n } => {
                acc(x, &mut |s| add_into(s, g));
                acc(bias, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[i % n] += gi;
                    }
                });
            }
            &Op::Scale { a, c } => acc(a, &mut |s| {
                for (x, gi) in s.iter_mut().zip(g) {
                    *x += c * gi;
                }
            }),
            &Op::SoftmaxRows { a, n } => acc(a, &mut |s| {
                for (row, (yr, gr)) in out.chunks(n).zip(g.chunks(n)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gi)| y * gi).sum();
                    for j in 0..n {
                        s[row * n + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }),
            &Op::SliceRows { a, start, n } => acc(a, &mut |s| {
                add_into(&mut s[start * n..start * n + g.len()], g);
            }),
            &Op::SliceCols { a, start, width, n } => acc(a, &mut |s| {
                for (i, gr) in g.chunks(width).enumerate() {
                    add_into(&mut s[i * n + start..i * n + start + width], gr);
                }
            }),
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc(p, &mut |s| add_into(s, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols { parts, n } => {
                let m = g.len() / n;
                let mut col = 0;
                for &(p, w) in parts {
                    acc(p, &mut |s| {
                        for i in 0..m {
                            add_into(&mut s[i * w..(i + 1) * w], &g[i * n + col..i * n + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::Gather { a, indices } => acc(*a, &mut |s| {
                for (&i, gi) in indices.iter().zip(g) {
                    s[i] += gi;
                }
            }),
            Op::GatherRows { a, rows, n } => acc(*a, &mut |s| {
                for (&r, gr) in rows.iter().zip(g.chunks(*n)) {
                    add_into(&mut s[r * n..(r + 1) * n], gr);
                }
            }),
            &Op::MeanRows { a, m, n } => acc(a, &mut |s| {
                for i in 0..m {
                    for j in 0..n {
                        s[i * n + j] += g[j] / m as f64;
                    }
                }
            }),
            &Op::Sum { a } => acc(a, &mut |s| {
                for x in s.iter_mut() {
                    *x += g[0];
                }
            }),
            &Op::Mean { a } => acc(a, &mut |s| {
                let len = s.len() as f64;
                for x in s.iter_mut() {
                    *x += g[0] / len;
                }
            }),
            &Op::ClampMin { a, floor } => {
                let va = self.value(a);
                acc(a, &mut |s| {
                    for ((x, gi), &v) in s.iter_mut().zip(g).zip(va) {
                        if v >= floor {
                            *x += gi;
                        }
                    }
                })
            }
            &Op::Log { a } => {
                let va = self.value(a);
                acc(a, &mut |s| {
                    for ((x, gi), v) in s.iter_mut().zip(g).zip(va) {
                        *x += gi / v;
                    }
                })
            }
            &Op::DivScalar { a, s: d } => {
                let dv = self.value(d)[0];
                acc(a, &mut |s| {
                    for (x, gi) in s.iter_mut().zip(g) {
                        *x += gi / dv;
                    }
                });
                let va = self.value(a);
                let gd: f64 = -g.iter().zip(va).map(|(gi, v)| gi * v).sum::<f64>() / (dv * dv);
                acc(d, &mut |s| s[0] += gd);
            }
            &Op::Gelu { a } => {
                let va = self.value(a);
                acc(a, &mut |s| {
                    for ((x, gi), &v) in s.iter_mut().zip(g).zip(va) {
                        *x += gi * gelu_grad(v);
                    }
                })
            }
            Op::Rotary { a, cos, sin } => acc(*a, &mut |s| {
                for p in 0..cos.len() {
                    let (g0, g1) = (g[2 * p], g[2 * p + 1]);
                    s[2 * p] += g0 * cos[p] + g1 * sin[p];
                    s[2 * p + 1] += -g0 * sin[p] + g1 * cos[p];
                }
            }),
            &Op::Reshape { a } => acc(a, &mut |s| add_into(s, g)),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0)).with_requires_grad(true)
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_fn(&[3, 4], |i| i as f64).with_requires_grad(true));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 12]);
    }

    #[test]
    fn half_square_gives_identity() {
        let t = Tensor::from_fn(&[5], |i| i as f64 - 2.5).with_requires_grad(true);
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), t.data());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2, 2]).with_requires_grad(true));
        assert_eq!(
            tape.backward(x).unwrap_err(),
            TensorError::NonScalarLoss(vec![2, 2])
        );
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0).with_requires_grad(true));
        let c = tape.constant(&Tensor::scalar(3.0));
        let y = tape.mul(x, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn write_into_sets_tensor_grad() {
        let mut t = Tensor::from_fn(&[2], |i| i as f64 + 1.0).with_requires_grad(true);
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let l = tape.log(x);
        let loss = tape.sum(l);
        let g = tape.backward(loss).unwrap();
        g.write_into(x, &mut t).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0, 0.5]);
    }

    #[test]
    fn softmax_ce_tape_matches_closed_form() {
        let logits = [0.3, -1.2, 2.0, 0.7];
        let (loss, grad) = crate::tensor::softmax_cross_entropy(&logits, 1);
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![1, 4], logits.to_vec()).unwrap().with_requires_grad(true));
        let p = tape.softmax_rows(x).unwrap();
        let pick = tape.gather(p, &[1]).unwrap();
        let lp = tape.log(pick);
        let l = tape.scale(lp, -1.0);
        let g = tape.backward(l).unwrap();
        assert!((tape.scalar(l) - loss).abs() < 1e-12);
        for (a, b) in g.get(x).unwrap().iter().zip(&grad) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    // Every primitive against central differences on random inputs in [-2, 2].
    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let c = rand_tensor(&mut rng, &[3, 4]);
        let bias = rand_tensor(&mut rng, &[4]);
        let pos = Tensor::from_fn(&[3, 4], |_| rng.random_range(0.5..2.0)).with_requires_grad(true);
        let params = vec![a, b, c, bias, pos];
        let angles: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.5).collect();
        let (cos, sin): (Vec<f64>, Vec<f64>) = angles.iter().map(|t| (t.cos(), t.sin())).unzip();

        type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>>;
        let cases: Vec<(&str, Build)> = vec![
            ("matmul", Box::new(|t, p| { let y = t.matmul(p[0], p[1])?; let y2 = t.mul(y, y)?; Ok(t.sum(y2)) })),
            ("transpose", Box::new(|t, p| { let y = t.transpose(p[0])?; let y = t.matmul(y, p[2])?; let y2 = t.mul(y, y)?; Ok(t.sum(y2)) })),
            ("add_sub_mul", Box::new(|t, p| { let s = t.add(p[0], p[2])?; let d = t.sub(p[0], p[2])?; let m = t.mul(s, d)?; let m = t.mul(m, p[0])?; Ok(t.sum(m)) })),
            ("add_row", Box::new(|t, p| { let y = t.add_row(p[0], p[3])?; let y2 = t.mul(y, y)?; Ok(t.mean(y2)) })),
            ("softmax", Box::new(|t, p| { let y = t.softmax_rows(p[0])?; let y = t.mul(y, p[2])?; Ok(t.sum(y)) })),
            ("slices", Box::new(|t, p| { let r = t.slice_rows(p[0], 1, 3)?; let c = t.slice_cols(r, 1, 4)?; let c2 = t.mul(c, c)?; Ok(t.sum(c2)) })),
            ("concat", Box::new(|t, p| { let r = t.concat_rows(&[p[0], p[2]])?; let c = t.concat_cols(&[p[0], p[2]])?; let r2 = t.mul(r, r)?; let c = t.gelu(c); let s1 = t.sum(r2); let s2 = t.sum(c); t.add(s1, s2) })),
            ("gather", Box::new(|t, p| { let g = t.gather(p[0], &[0, 5, 5, 11])?; let r = t.gather_rows(p[2], &[2, 0, 2])?; let m = t.mean_rows(r)?; let g2 = t.mul(g, g)?; let s1 = t.sum(g2); let m2 = t.mul(m, m)?; let s2 = t.sum(m2); t.add(s1, s2) })),
            ("log_div", Box::new(|t, p| { let l = t.log(p[4]); let s = t.sum(p[4]); let d = t.div_scalar(l, s)?; let d2 = t.mul(d, p[0])?; Ok(t.sum(d2)) })),
            ("clamp_log", Box::new(|t, p| { let c = t.clamp_min(p[4], 1e-12); let l = t.log(c); Ok(t.sum(l)) })),
            ("gelu", Box::new(|t, p| { let g = t.gelu(p[0]); let g = t.mul(g, p[2])?; Ok(t.sum(g)) })),
            ("rotary", Box::new(move |t, p| { let r = t.rotary(p[0], cos.clone(), sin.clone())?; let r = t.mul(r, p[2])?; Ok(t.sum(r)) })),
            ("reshape", Box::new(|t, p| { let r = t.reshape(p[0], vec![4, 3])?; let r = t.matmul(r, p[0])?; let r2 = t.mul(r, r)?; Ok(t.sum(r2)) })),
        ];
        for (name, build) in cases {
            let report = finite_difference_check(|t, p| build(t, p), &params, 1e-5).unwrap();
            assert!(report.max_rel_error < 1e-6, "{name}: {report:?}");
        }
    }
}
