//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op evaluates
//! eagerly and appends a node; nodes whose inputs never require a gradient
//! are stored as constants, so a forward pass over non-trainable leaves
//! doubles as an inference mode.

use super::gemm::{gemm, Layout};
use super::{check_shape, NumericsError, Real, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution hyper-parameters. Padding is always "valid".
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_h: usize,
    in_w: usize,
    in_c: usize,
    kernel: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    out_c: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }
}

enum Op<T> {
    Constant,
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Reshape { x: Var },
    Relu { x: Var },
    LogSoftmax { x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale { x: Var, factor: T },
    Exp { x: Var },
    Square { x: Var },
    Clamp { x: Var, lo: T, hi: T },
    Minimum(Var, Var),
    Maximum(Var, Var),
    Sum { x: Var },
    Mean { x: Var },
    SumLastAxis { x: Var },
    Gather { x: Var, indices: Vec<usize> },
    MaskFill { x: Var, mask: Vec<bool> },
    SliceLast { x: Var, start: usize },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation graph, in topological order by construction.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Numerically stable `log_softmax` of one row: `(x - max) - ln Σ exp(x - max)`.
pub fn log_softmax_row<T: Real>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = x.iter().map(|&v| (v - max).exp()).sum();
    let log_sum = sum.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max) - log_sum;
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("tensor shapes are non-empty")
}

fn leading_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold valid shapes")
    }

    /// Records a tensor as a leaf; it is differentiable iff `requires_grad` is set on it.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let op = if t.requires_grad() { Op::Leaf } else { Op::Constant };
        self.push(t.shape().to_vec(), t.values().to_vec(), t.requires_grad(), op)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        check_shape(&shape, values.len())?;
        Ok(self.push(shape, values, false, Op::Constant))
    }

    /// Differentiable input that does not come from a [`Tensor`].
    pub fn variable(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        check_shape(&shape, values.len())?;
        Ok(self.push(shape, values, true, Op::Leaf))
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Constant },
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// `x·w + b` with `x: [batch, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if bs != [ws[1]] {
            return Err(NumericsError::ShapeMismatch {
                op: "linear",
                lhs: ws.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[1]);
        let mut y = Vec::with_capacity(batch * out);
        for _ in 0..batch {
            y.extend_from_slice(self.value(b));
        }
        gemm(
            batch,
            inp,
            out,
            self.value(x),
            Layout::Normal,
            self.value(w),
            Layout::Normal,
            T::one(),
            &mut y,
        );
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(vec![batch, out], y, rg, Op::Linear { x, w, b }))
    }

    /// 2-d convolution over channels-last input.
    ///
    /// `x: [batch, h, w, c_in]`, `w: [k, k, c_in, c_out]`, `b: [c_out]`;
    /// output `[batch, (h-k)/s+1, (w-k)/s+1, c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let mismatch = || NumericsError::ShapeMismatch {
            op: "conv2d",
            lhs: xs.clone(),
            rhs: ws.clone(),
        };
        if xs.len() != 4 || ws.len() != 4 || spec.stride == 0 || spec.kernel == 0 {
            return Err(mismatch());
        }
        let k = spec.kernel;
        if ws[0] != k || ws[1] != k || ws[2] != xs[3] || xs[1] < k || xs[2] < k {
            return Err(mismatch());
        }
        if self.shape(b) != [ws[3]] {
            return Err(NumericsError::ShapeMismatch {
                op: "conv2d",
                lhs: ws.clone(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_h: xs[1],
            in_w: xs[2],
            in_c: xs[3],
            kernel: k,
            stride: spec.stride,
            out_h: (xs[1] - k) / spec.stride + 1,
            out_w: (xs[2] - k) / spec.stride + 1,
            out_c: ws[3],
        };
        let cols = im2col(self.value(x), &geom);
        let mut y = Vec::with_capacity(geom.rows() * geom.out_c);
        for _ in 0..geom.rows() {
            y.extend_from_slice(self.value(b));
        }
        gemm(
            geom.rows(),
            geom.patch(),
            geom.out_c,
            &cols,
            Layout::Normal,
            self.value(w),
            Layout::Normal,
            T::one(),
            &mut y,
        );
        let rg = self.rg(&[x, w, b]);
        let keep_cols = if self.requires_grad(w) { cols } else { Vec::new() };
        let shape = vec![geom.batch, geom.out_h, geom.out_w, geom.out_c];
        Ok(self.push(
            shape,
            y,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: keep_cols,
            },
        ))
    }

    /// Non-overlapping max pooling (kernel = stride = `size`) over `[batch, h, w, c]`.
    /// `size == 1` is the identity.
    pub fn maxpool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || size == 0 || xs[1] < size || xs[2] < size {
            return Err(NumericsError::InvalidArgument {
                op: "maxpool2d",
                msg: format!("pool size {size} does not fit input {xs:?}"),
            });
        }
        if size == 1 {
            let value = self.value(x).to_vec();
            let rg = self.rg(&[x]);
            return Ok(self.push(xs, value, rg, Op::Reshape { x }));
        }
        let (batch, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / size, w / size);
        let src = self.value(x);
        let mut y = Vec::with_capacity(batch * oh * ow * c);
        let mut argmax = Vec::with_capacity(batch * oh * ow * c);
        for bi in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        for dy in 0..size {
                            for dx in 0..size {
                                let idx = ((bi * h + oy * size + dy) * w + ox * size + dx) * c + ch;
                                if best == usize::MAX || src[idx] > src[best] {
                                    best = idx;
                                }
                            }
                        }
                        y.push(src[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![batch, oh, ow, c], y, rg, Op::MaxPool2d { x, argmax }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        check_shape(&shape, self.value(x).len())?;
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, rg, Op::Reshape { x }))
    }

    /// `[batch, ...] -> [batch, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let batch = xs[0];
        let rest = xs[1..].iter().product::<usize>().max(1);
        self.reshape(x, vec![batch, rest])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), y, rg, Op::Relu { x }))
    }

    /// `log_softmax` over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        let src = self.value(x);
        let mut y = vec![T::zero(); src.len()];
        for (row, out) in src.chunks_exact(n).zip(y.chunks_exact_mut(n)) {
            log_softmax_row(row, out);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), y, rg, Op::LogSoftmax { x }))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Vec<T>, bool)> {
        self.same_shape(op, a, b)?;
        let y = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&p, &q)| f(p, q))
            .collect();
        Ok((y, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (y, rg) = self.zip_with("add", a, b, |p, q| p + q)?;
        Ok(self.push(self.shape(a).to_vec(), y, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (y, rg) = self.zip_with("sub", a, b, |p, q| p - q)?;
        Ok(self.push(self.shape(a).to_vec(), y, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (y, rg) = self.zip_with("mul", a, b, |p, q| p * q)?;
        Ok(self.push(self.shape(a).to_vec(), y, rg, Op::Mul(a, b)))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (y, rg) = self.zip_with("minimum", a, b, |p, q| if p <= q { p } else { q })?;
        Ok(self.push(self.shape(a).to_vec(), y, rg, Op::Minimum(a, b)))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (y, rg) = self.zip_with("maximum", a, b, |p, q| if p >= q { p } else { q })?;
        Ok(self.push(self.shape(a).to_vec(), y, rg, Op::Maximum(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let y = self.value(x).iter().map(|&v| v * factor).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), y, rg, Op::Scale { x, factor }))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).iter().map(|&v| v.exp()).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), y, rg, Op::Exp { x }))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).iter().map(|&v| v * v).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), y, rg, Op::Square { x }))
    }

    /// Elementwise clamp; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(NumericsError::InvalidArgument {
                op: "clamp",
                msg: format!("lower bound {lo} exceeds upper bound {hi}"),
            });
        }
        let y = self.value(x).iter().map(|&v| v.max(lo).min(hi)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), y, rg, Op::Clamp { x, lo, hi }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1], vec![s], rg, Op::Sum { x }))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::from_usize(self.value(x).len()).expect("length fits");
        let s: T = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1], vec![s / n], rg, Op::Mean { x }))
    }

    /// Sums over the last axis: `[.., n] -> [..]` (`[n] -> [1]`).
    pub fn sum_last_axis(&mut self, x: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        let y = self.value(x).chunks_exact(n).map(|r| r.iter().copied().sum()).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(leading_shape(self.shape(x)), y, rg, Op::SumLastAxis { x }))
    }

    /// Picks one entry per row along the last axis.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let n = last_dim(self.shape(x));
        let rows = self.value(x).len() / n;
        if indices.len() != rows {
            return Err(NumericsError::ShapeMismatch {
                op: "gather",
                lhs: self.shape(x).to_vec(),
                rhs: vec![indices.len()],
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(NumericsError::InvalidArgument {
                op: "gather",
                msg: format!("index {bad} out of range for last axis of length {n}"),
            });
        }
        let src = self.value(x);
        let y = indices.iter().enumerate().map(|(r, &i)| src[r * n + i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            leading_shape(self.shape(x)),
            y,
            rg,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Keeps `x` where `mask` is true and writes the constant `fill` elsewhere.
    ///
    /// This is a select, not an arithmetic shift: the filled coordinates are a
    /// constant function of `x`, so their gradient is exactly zero.
    pub fn mask_fill(&mut self, x: Var, mask: &[bool], fill: T) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(NumericsError::ShapeMismatch {
                op: "mask_fill",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let y = self
            .value(x)
            .iter()
            .zip(mask)
            .map(|(&v, &keep)| if keep { v } else { fill })
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            self.shape(x).to_vec(),
            y,
            rg,
            Op::MaskFill {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = last_dim(&shape);
        if len == 0 || start + len > n {
            return Err(NumericsError::InvalidArgument {
                op: "slice_last",
                msg: format!("range {start}..{} outside last axis of length {n}", start + len),
            });
        }
        let y = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = len;
        let rg = self.rg(&[x]);
        Ok(self.push(out_shape, y, rg, Op::SliceLast { x, start }))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every node is visited once, in reverse recording order; contributions
    /// from multiple consumers add up.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(NumericsError::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (batch, out) = (node.shape[0], node.shape[1]);
                let inp = self.nodes[x.0].shape[1];
                if let Some(dx) = self.acc(grads, *x) {
                    gemm(batch, out, inp, g, Layout::Normal, val(*w), Layout::Transposed, T::one(), dx);
                }
                if let Some(dw) = self.acc(grads, *w) {
                    gemm(inp, batch, out, val(*x), Layout::Transposed, g, Layout::Normal, T::one(), dw);
                }
                if let Some(db) = self.acc(grads, *b) {
                    for row in g.chunks_exact(out) {
                        db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (rows, patch, oc) = (geom.rows(), geom.patch(), geom.out_c);
                if let Some(db) = self.acc(grads, *b) {
                    for row in g.chunks_exact(oc) {
                        db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                    }
                }
                if let Some(dw) = self.acc(grads, *w) {
                    gemm(patch, rows, oc, cols, Layout::Transposed, g, Layout::Normal, T::one(), dw);
                }
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![T::zero(); rows * patch];
                    gemm(rows, oc, patch, g, Layout::Normal, val(*w), Layout::Transposed, T::zero(), &mut dcols);
                    if let Some(dx) = self.acc(grads, *x) {
                        col2im_add(&dcols, geom, dx);
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src] += gv;
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::Relu { x } => {
                let xv = val(*x);
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, &gv), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        if xi > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::LogSoftmax { x } => {
                let n = last_dim(&node.shape);
                if let Some(dx) = self.acc(grads, *x) {
                    for ((drow, grow), yrow) in dx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(node.value.chunks_exact(n))
                    {
                        let gsum: T = grow.iter().copied().sum();
                        for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += gv - y.exp() * gsum;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, &gv), &o) in d.iter_mut().zip(g).zip(bv) {
                        *d += gv * o;
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((d, &gv), &o) in d.iter_mut().zip(g).zip(av) {
                        *d += gv * o;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *factor);
                }
            }
            Op::Exp { x } => {
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, &gv), &y) in d.iter_mut().zip(g).zip(&node.value) {
                        *d += gv * y;
                    }
                }
            }
            Op::Square { x } => {
                let xv = val(*x);
                let two = T::one() + T::one();
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, &gv), &xi) in d.iter_mut().zip(g).zip(xv) {
                        *d += gv * two * xi;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, &gv), &xi) in d.iter_mut().zip(g).zip(xv) {
                        if xi >= *lo && xi <= *hi {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let pick_a = matches!(node.op, Op::Minimum(..));
                let (av, bv) = (val(*a), val(*b));
                let chose_a: Vec<bool> = av
                    .iter()
                    .zip(bv)
                    .map(|(&p, &q)| if pick_a { p <= q } else { p >= q })
                    .collect();
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, &gv), &c) in d.iter_mut().zip(g).zip(&chose_a) {
                        if c {
                            *d += gv;
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((d, &gv), &c) in d.iter_mut().zip(g).zip(&chose_a) {
                        if !c {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { x } => {
                let n = T::from_usize(val(*x).len()).expect("length fits");
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::SumLastAxis { x } => {
                let n = last_dim(&self.nodes[x.0].shape);
                if let Some(d) = self.acc(grads, *x) {
                    for (row, &gv) in d.chunks_exact_mut(n).zip(g) {
                        row.iter_mut().for_each(|d| *d += gv);
                    }
                }
            }
            Op::Gather { x, indices } => {
                let n = last_dim(&self.nodes[x.0].shape);
                if let Some(d) = self.acc(grads, *x) {
                    for (r, (&idx, &gv)) in indices.iter().zip(g).enumerate() {
                        d[r * n + idx] += gv;
                    }
                }
            }
            Op::MaskFill { x, mask } => {
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, &gv), &keep) in d.iter_mut().zip(g).zip(mask) {
                        if keep {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SliceLast { x, start } => {
                let n = last_dim(&self.nodes[x.0].shape);
                let len = last_dim(&node.shape);
                if let Some(d) = self.acc(grads, *x) {
                    for (drow, grow) in d.chunks_exact_mut(n).zip(g.chunks_exact(len)) {
                        drow[*start..*start + len]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, &gv)| *d += gv);
                    }
                }
            }
        }
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst_row = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel {
                    let iy = oy * g.stride + ky;
                    let src = ((b * g.in_h + iy) * g.in_w + ox * g.stride) * g.in_c;
                    let len = g.kernel * g.in_c;
                    let dst = ky * len;
                    dst_row[dst..dst + len].copy_from_slice(&x[src..src + len]);
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let patch = g.patch();
    let len = g.kernel * g.in_c;
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src_row = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel {
                    let iy = oy * g.stride + ky;
                    let dst = ((b * g.in_h + iy) * g.in_w + ox * g.stride) * g.in_c;
                    dx[dst..dst + len]
                        .iter_mut()
                        .zip(&src_row[ky * len..(ky + 1) * len])
                        .for_each(|(d, &s)| *d += s);
                }
                row += 1;
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when `v` does not require a gradient or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, or zeros of length `len` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }

    /// Adds the gradient of `v` into `tensor`'s gradient buffer.
    pub fn assign(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}
