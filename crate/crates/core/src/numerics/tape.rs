//! Define-by-run reverse-mode automatic differentiation.
//!
//! Values are computed eagerly as operations are recorded, so the tape is
//! append-only and its index order is already a topological order. Backward
//! walks the tape once in reverse, skipping nodes that no trainable leaf
//! feeds into.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Scale(Var, f64),
    GatherRows(Var, Vec<usize>),
    Segment(Var, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Relu(..) => "relu",
            Op::Concat(..) => "concat",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Square(..) => "square",
            Op::Scale(..) => "scale",
            Op::GatherRows(..) => "gather_rows",
            Op::Segment(..) => "segment",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    trainable: bool,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every trainable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.map.get(&var)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.map.iter().map(|(v, t)| (*v, t))
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::shape(op, format!("expected a 2-D operand, got {s:?}"))),
    }
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

    /// Trainable leaf: backward reports a gradient for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_node(Op::Leaf, value, true, true)
    }

    /// Non-trainable leaf (inputs, noise draws, masks).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(Op::Leaf, value, false, false)
    }

    /// Cached forward value of a node.
    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push_node(&mut self, op: Op, value: Tensor, trainable: bool, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            trainable,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::Concat(parts) => parts.iter().any(|p| self.nodes[p.0].needs_grad),
            Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Square(a)
            | Op::Scale(a, _)
            | Op::GatherRows(a, _)
            | Op::Segment(a, _) => self.nodes[a.0].needs_grad,
        };
        Ok(self.push_node(op, value, false, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).as_slice(),
            false,
            self.value(b).as_slice(),
            false,
            0.0,
            &mut out,
        );
        self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out))
    }

    /// Elementwise sum. `b` may also be a single row (`[cols]` or `[1, cols]`)
    /// broadcast over the rows of a 2-D `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            ta.as_slice().iter().zip(tb.as_slice()).map(|(x, y)| x + y).collect()
        } else {
            let cols = Self::broadcast_cols(ta, tb)?;
            let row = tb.as_slice();
            ta.as_slice()
                .chunks_exact(cols)
                .flat_map(|r| r.iter().zip(row).map(|(x, y)| x + y))
                .collect()
        };
        let shape = ta.shape().to_vec();
        self.push(Op::Add(a, b), Tensor::from_parts(shape, out))
    }

    fn broadcast_cols(ta: &Tensor, tb: &Tensor) -> Result<usize> {
        let (_, cols) = matrix_dims("add", ta)?;
        let ok = matches!(tb.shape(), &[c] | &[1, c] if c == cols);
        if !ok {
            return Err(Error::shape(
                "add",
                format!("cannot broadcast {:?} onto {:?}", tb.shape(), ta.shape()),
            ));
        }
        Ok(cols)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let out = ta.as_slice().iter().zip(tb.as_slice()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Mul(a, b), Tensor::from_parts(shape, out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(a), out)
    }

    /// Concatenate 2-D tensors with equal row counts along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no operands"));
        }
        let dims = parts
            .iter()
            .map(|p| matrix_dims("concat", self.value(*p)))
            .collect::<Result<Vec<_>>>()?;
        let rows = dims[0].0;
        if dims.iter().any(|d| d.0 != rows) {
            return Err(Error::shape("concat", format!("row counts differ: {dims:?}")));
        }
        let cols: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (p, &(_, c)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(*p).as_slice()[r * c..(r + 1) * c]);
            }
        }
        self.push(Op::Concat(parts.to_vec()), Tensor::from_parts(vec![rows, cols], out))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).as_slice().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.as_slice().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v * v);
        self.push(Op::Square(a), out)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push(Op::Scale(a, factor), out)
    }

    /// Select rows of a 2-D tensor (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, c) = matrix_dims("gather_rows", self.value(a))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {n}")));
        }
        if rows.is_empty() {
            return Err(Error::shape("gather_rows", "empty row selection"));
        }
        let src = self.value(a).as_slice();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(&src[r * c..(r + 1) * c]);
        }
        self.push(
            Op::GatherRows(a, rows.to_vec()),
            Tensor::from_parts(vec![rows.len(), c], out),
        )
    }

    /// Contiguous flat segment of `a`, viewed with a new shape. Used to carve
    /// weight matrices and bias rows out of a flat weight vector.
    pub fn segment(&mut self, a: Var, start: usize, shape: Vec<usize>) -> Result<Var> {
        let view = self.value(a).segment(start, shape)?;
        let needs_grad = self.nodes[a.0].needs_grad;
        Ok(self.push_node(Op::Segment(a, start), view, false, needs_grad))
    }

    /// Sign pattern of every ReLU input on the tape, in recording order.
    /// Finite-difference checks use it to detect perturbations that cross a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                pattern.extend(self.value(a).as_slice().iter().map(|&v| v > 0.0));
            }
        }
        pattern
    }

    /// Gradient of the scalar `root` with respect to every trainable leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_shape = self.value(root).shape();
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(root_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if let Some(seed) = self.accumulate(&mut grads, root) {
            seed[0] = 1.0;
        }

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf | Op::Segment(..)) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let mut map = BTreeMap::new();
        for (idx, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[idx];
            if let (true, Some(g)) = (node.trainable, g) {
                map.insert(Var(idx), Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        Ok(Gradients { map })
    }

    /// Gradient buffer of `target`. Segment nodes own no buffer: their
    /// gradient is the matching slice of the parent's buffer.
    fn accumulate<'g>(
        &self,
        grads: &'g mut [Option<Vec<f64>>],
        target: Var,
    ) -> Option<&'g mut [f64]> {
        if !self.nodes[target.0].needs_grad {
            return None;
        }
        let len = self.nodes[target.0].value.len();
        let (mut owner, mut start) = (target, 0);
        while let Op::Segment(parent, off) = self.nodes[owner.0].op {
            owner = parent;
            start += off;
        }
        let total = self.nodes[owner.0].value.len();
        let buf = grads[owner.0].get_or_insert_with(|| vec![0.0; total]);
        Some(&mut buf[start..start + len])
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if let Some(ga) = self.accumulate(grads, *a) {
                    gemm(m, n, k, 1.0, g, false, tb.as_slice(), true, 1.0, ga);
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    gemm(k, m, n, 1.0, ta.as_slice(), true, g, false, 1.0, gb);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let same = self.value(*a).shape() == self.value(*b).shape();
                if let Some(gb) = self.accumulate(grads, *b) {
                    if same {
                        gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    } else {
                        let cols = gb.len();
                        for row in g.chunks_exact(cols) {
                            gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).as_slice(), self.value(*b).as_slice());
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(va) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a).as_slice();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((x, gi), ai) in ga.iter_mut().zip(g).zip(va) {
                        if *ai > 0.0 {
                            *x += gi;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let rows = node.value.shape()[0];
                let cols = node.value.shape()[1];
                let mut col0 = 0;
                for p in parts {
                    let c = self.value(*p).shape()[1];
                    if let Some(gp) = self.accumulate(grads, *p) {
                        for r in 0..rows {
                            let src = &g[r * cols + col0..r * cols + col0 + c];
                            gp[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    col0 += c;
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                if let Some(ga) = self.accumulate(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::Square(a) => {
                let va = self.value(*a).as_slice();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((x, gi), ai) in ga.iter_mut().zip(g).zip(va) {
                        *x += 2.0 * ai * gi;
                    }
                }
            }
            Op::Scale(a, factor) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y);
                }
            }
            Op::GatherRows(a, rows) => {
                let c = self.value(*a).shape()[1];
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (k, &r) in rows.iter().enumerate() {
                        ga[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(&g[k * c..(k + 1) * c])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            // gradients were written straight into the parent's buffer
            Op::Segment(..) => {}
        }
    }
}
