use super::{gemm, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::str::FromStr;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
}

impl ElementwiseKind {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }
}

impl FromStr for ElementwiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Self::Add),
            "sub" => Ok(Self::Sub),
            "mul" => Ok(Self::Mul),
            "relu" => Ok(Self::Relu),
            "sigmoid" => Ok(Self::Sigmoid),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

/// Deliberately broken gradient rules, used as negative controls for the
/// gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    NegateLayerNormGrad,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    WhereRows {
        take_a: Vec<bool>,
        a: Var,
        b: Var,
    },
    Sum(Var),
    SineEncode {
        points: Var,
        freqs: Vec<f64>,
    },
    BoxDecode {
        centers: Var,
        disp: Var,
        raw: Vec<f64>,
    },
    SigmoidFocal {
        logits: Var,
        targets: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
    L1 {
        x: Var,
        target: Vec<f64>,
    },
    Giou {
        x: Var,
        target: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::WhereRows { a, b, .. } => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Sum(a)
            | Op::Softmax { x: a, .. }
            | Op::SliceLast { x: a, .. }
            | Op::GatherRows { x: a, .. }
            | Op::SineEncode { points: a, .. }
            | Op::SigmoidFocal { logits: a, .. }
            | Op::L1 { x: a, .. }
            | Op::Giou { x: a, .. } => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::BoxDecode { centers, disp, .. } => vec![*centers, *disp],
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// which is a topological order of the graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<(String, Var)>,
    bound: HashMap<String, Var>,
    fault: Option<Fault>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = if cols == 0 {
        shape[..shape.len().saturating_sub(1)].iter().product()
    } else {
        shape.iter().product::<usize>() / cols
    };
    (rows, cols)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.push_with(shape, value, op, requires_grad)
    }

    fn push_with(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push_with(
            tensor.shape().to_vec(),
            tensor.values().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::shape("constant", &shape, &[values.len()]));
        }
        Ok(self.push_with(shape, values, Op::Leaf, false))
    }

    /// Records a trainable leaf under `name`; its gradient can later be
    /// collected by name. Binding a name again returns the existing leaf.
    pub fn bind(&mut self, name: &str, tensor: &Tensor) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let var = self.push_with(
            tensor.shape().to_vec(),
            tensor.values().to_vec(),
            Op::Leaf,
            true,
        );
        self.bindings.push((name.to_string(), var));
        self.bound.insert(name.to_string(), var);
        var
    }

    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
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
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    // ---- primitives ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(a)))
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (ElementwiseKind::Add, Some(b)) => self.add(a, b),
            (ElementwiseKind::Sub, Some(b)) => self.sub(a, b),
            (ElementwiseKind::Mul, Some(b)) => self.mul(a, b),
            (ElementwiseKind::Relu, None) => Ok(self.relu(a)),
            (ElementwiseKind::Sigmoid, None) => Ok(self.sigmoid(a)),
            (k, _) => Err(Error::Invalid(format!(
                "{k:?} expects {} operand(s)",
                if k.is_binary() { 2 } else { 1 }
            ))),
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            let out = self
                .value(a)
                .iter()
                .zip(self.value(b))
                .map(|(&x, &y)| f(x, y))
                .collect();
            let shape = sa.to_vec();
            let op = match name {
                "add" => Op::Add(a, b),
                "sub" => Op::Sub(a, b),
                _ => Op::Mul(a, b),
            };
            Ok(self.push(shape, out, op))
        } else if name == "add" && sb.len() == 1 && sa.last() == Some(&sb[0]) {
            self.add_bias(a, b)
        } else {
            Err(Error::shape(name, sa, sb))
        }
    }

    /// Elementwise sum. A rank-1 `b` matching the trailing axis of `a` is
    /// broadcast as a bias.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", sa, sb));
        }
        let d = sb[0];
        let bv = self.value(bias);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % d])
            .collect();
        let shape = sa.to_vec();
        Ok(self.push(shape, out, Op::AddBias(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Sigmoid(a))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(x, axis, None)
    }

    /// Softmax along `axis`. Entries whose `mask` flag is set receive weight
    /// exactly 0; a fully masked slice is all zeros.
    pub fn softmax_masked(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        if let Some(m) = mask {
            if m.len() != self.value(x).len() {
                return Err(Error::shape("softmax mask", &shape, &[m.len()]));
            }
        }
        let (outer, len, inner) = outer_inner(&shape, axis);
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        let masked = |i: usize| mask.is_some_and(|m| m[i]);
        for o in 0..outer {
            for q in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + q;
                let mut max = f64::NEG_INFINITY;
                for k in 0..len {
                    if !masked(idx(k)) {
                        max = max.max(src[idx(k)]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for k in 0..len {
                    if !masked(idx(k)) {
                        let e = (src[idx(k)] - max).exp();
                        out[idx(k)] = e;
                        total += e;
                    }
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { x, axis }))
    }

    /// Normalizes over the last axis then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::Invalid("layer_norm eps must be positive".into()));
        }
        let (rows, _) = rows_cols(&shape);
        let src = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = outer_inner(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(*v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&shape);
        if start > end || end > cols {
            return Err(Error::shape("slice", &shape, &[start, end]));
        }
        let w = end - start;
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let mut new_shape = shape;
        *new_shape.last_mut().unwrap() = w;
        Ok(self.push(new_shape, out, Op::SliceLast { x, start }))
    }

    /// Rows of a rank-2 tensor, in the given order (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || rows.iter().any(|&r| r >= shape[0]) {
            return Err(Error::shape("gather_rows", &shape, &[rows.len()]));
        }
        let c = shape[1];
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(&src[r * c..(r + 1) * c]);
        }
        Ok(self.push(
            vec![rows.len(), c],
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Row `i` of the result is row `i` of `a` where `take_a[i]`, else of `b`.
    pub fn where_rows(&mut self, take_a: &[bool], a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape != self.shape(b) || shape.len() != 2 || take_a.len() != shape[0] {
            return Err(Error::shape("where_rows", &shape, self.shape(b)));
        }
        let c = shape[1];
        let mut out = self.value(b).to_vec();
        let av = self.value(a);
        for (r, &t) in take_a.iter().enumerate() {
            if t {
                out[r * c..(r + 1) * c].copy_from_slice(&av[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::WhereRows {
                take_a: take_a.to_vec(),
                a,
                b,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sinusoidal encoding of `N×2` points: for each coordinate and angular
    /// frequency, a `(sin, cos)` pair. Output width is `4·freqs.len()`.
    pub fn sine_encode(&mut self, points: Var, freqs: &[f64]) -> Result<Var> {
        let shape = self.shape(points).to_vec();
        if shape.len() != 2 || shape[1] != 2 {
            return Err(Error::shape("sine_encode", &shape, &[2]));
        }
        let n = shape[0];
        let width = 4 * freqs.len();
        let src = self.value(points);
        let mut out = vec![0.0; n * width];
        for i in 0..n {
            for c in 0..2 {
                let p = src[i * 2 + c];
                for (k, w) in freqs.iter().enumerate() {
                    let base = i * width + c * 2 * freqs.len() + 2 * k;
                    out[base] = (w * p).sin();
                    out[base + 1] = (w * p).cos();
                }
            }
        }
        Ok(self.push(
            vec![n, width],
            out,
            Op::SineEncode {
                points,
                freqs: freqs.to_vec(),
            },
        ))
    }

    /// Corner-displacement box decoding in logit space.
    ///
    /// `centers` holds `N×2` reference logits `(lx, ly)`, `disp` holds `N×4`
    /// displacements. Raw corners are `σ(lx − d0), σ(ly − d1), σ(lx + d2),
    /// σ(ly + d3)`; the output is reordered so that `x1 ≤ x2`, `y1 ≤ y2`.
    pub fn box_decode(&mut self, centers: Var, disp: Var) -> Result<Var> {
        let (sc, sd) = (self.shape(centers), self.shape(disp));
        if sc.len() != 2 || sd.len() != 2 || sc[1] != 2 || sd[1] != 4 || sc[0] != sd[0] {
            return Err(Error::shape("box_decode", sc, sd));
        }
        let n = sc[0];
        let (c, d) = (self.value(centers), self.value(disp));
        let mut raw = vec![0.0; n * 4];
        let mut out = vec![0.0; n * 4];
        for i in 0..n {
            let (lx, ly) = (c[2 * i], c[2 * i + 1]);
            let r = [
                sigmoid(lx - d[4 * i]),
                sigmoid(ly - d[4 * i + 1]),
                sigmoid(lx + d[4 * i + 2]),
                sigmoid(ly + d[4 * i + 3]),
            ];
            raw[4 * i..4 * i + 4].copy_from_slice(&r);
            out[4 * i] = r[0].min(r[2]);
            out[4 * i + 1] = r[1].min(r[3]);
            out[4 * i + 2] = r[0].max(r[2]);
            out[4 * i + 3] = r[1].max(r[3]);
        }
        Ok(self.push(vec![n, 4], out, Op::BoxDecode { centers, disp, raw }))
    }

    /// Sum over all entries of the per-class sigmoid focal loss. `targets`
    /// holds 0/1 labels with the same shape as `logits`.
    pub fn sigmoid_focal(&mut self, logits: Var, targets: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(Error::shape("sigmoid_focal", self.shape(logits), &[targets.len()]));
        }
        let total = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| focal_term(z, t, alpha, gamma).0)
            .sum();
        Ok(self.push(
            vec![1],
            vec![total],
            Op::SigmoidFocal {
                logits,
                targets: targets.to_vec(),
                alpha,
                gamma,
            },
        ))
    }

    /// Sum of absolute differences against a constant target.
    pub fn l1_loss(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let v = self.value(x);
        if v.len() != target.len() {
            return Err(Error::shape("l1_loss", self.shape(x), &[target.len()]));
        }
        let total = v.iter().zip(target).map(|(a, b)| (a - b).abs()).sum();
        Ok(self.push(
            vec![1],
            vec![total],
            Op::L1 {
                x,
                target: target.to_vec(),
            },
        ))
    }

    /// Sum over rows of `1 − giou(pred, target)` for `N×4` corner boxes.
    pub fn giou_loss(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[1] != 4 || target.len() != s[0] * 4 {
            return Err(Error::shape("giou_loss", s, &[target.len()]));
        }
        let v = self.value(x);
        let total = (0..s[0])
            .map(|i| 1.0 - giou_with_grad(&v[4 * i..4 * i + 4], &target[4 * i..4 * i + 4]).0)
            .sum();
        Ok(self.push(
            vec![1],
            vec![total],
            Op::Giou {
                x,
                target: target.to_vec(),
            },
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every gradient-requiring leaf.
    /// Calling it twice without [`Tape::zero_grad`] doubles the gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                match &mut self.leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = node.shape[1];
                acc(*a, &|da| gemm(m, n, k, g, false, &self.nodes[b.0].value, true, da, 1.0));
                acc(*b, &|db| gemm(k, m, n, &self.nodes[a.0].value, true, g, false, db, 1.0));
            }
            Op::Transpose(a) => {
                let (r, c) = (node.shape[1], node.shape[0]);
                acc(*a, &|da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|da| da.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &|db| db.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &|da| da.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &|db| db.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, &|da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &|db| {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddBias(a, b) => {
                acc(*a, &|da| da.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let d = self.nodes[b.0].value.len();
                acc(*b, &|db| {
                    for (i, gi) in g.iter().enumerate() {
                        db[i % d] += gi;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|da| da.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::Relu(a) => {
                let av = &self.nodes[a.0].value;
                acc(*a, &|da| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &|da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = outer_inner(&node.shape, *axis);
                acc(*x, &|dx| {
                    for o in 0..outer {
                        for q in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + q;
                            let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..len {
                                dx[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.nodes[gamma.0].value.len();
                let rows = inv_std.len();
                let gv = &self.nodes[gamma.0].value;
                acc(*gamma, &|dg| {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*beta, &|db| {
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                });
                let sign = if self.fault == Some(Fault::NegateLayerNormGrad) {
                    -1.0
                } else {
                    1.0
                };
                acc(*x, &|dx| {
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            m1 += dh;
                            m2 += dh * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            dx[r * d + j] += sign * inv_std[r] * (dh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = outer_inner(&node.shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.nodes[v.0].shape[*axis];
                    let chunk = len * inner;
                    acc(*v, &|dv| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            for (t, s) in dv[o * chunk..(o + 1) * chunk].iter_mut().zip(&g[src..src + chunk]) {
                                *t += s;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::SliceLast { x, start } => {
                let cols = *self.nodes[x.0].shape.last().unwrap();
                let w = *node.shape.last().unwrap();
                let rows = if w == 0 { 0 } else { g.len() / w };
                acc(*x, &|dx| {
                    for r in 0..rows {
                        for j in 0..w {
                            dx[r * cols + start + j] += g[r * w + j];
                        }
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let c = node.shape[1];
                acc(*x, &|dx| {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            dx[r * c + j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::WhereRows { take_a, a, b } => {
                let c = node.shape[1];
                for (v, want) in [(*a, true), (*b, false)] {
                    acc(v, &|dv| {
                        for (r, &t) in take_a.iter().enumerate() {
                            if t == want {
                                for j in 0..c {
                                    dv[r * c + j] += g[r * c + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => acc(*a, &|da| da.iter_mut().for_each(|x| *x += g[0])),
            Op::SineEncode { points, freqs } => {
                let p = &self.nodes[points.0].value;
                let n = node.shape[0];
                let width = node.shape[1];
                acc(*points, &|dp| {
                    for i in 0..n {
                        for c in 0..2 {
                            let pv = p[i * 2 + c];
                            for (k, w) in freqs.iter().enumerate() {
                                let base = i * width + c * 2 * freqs.len() + 2 * k;
                                dp[i * 2 + c] += g[base] * w * (w * pv).cos() - g[base + 1] * w * (w * pv).sin();
                            }
                        }
                    }
                });
            }
            Op::BoxDecode { centers, disp, raw } => {
                let n = node.shape[0];
                // gradient w.r.t. the four raw (pre-reorder) corners
                let mut graw = vec![0.0; n * 4];
                for i in 0..n {
                    let r = &raw[4 * i..4 * i + 4];
                    for axis in 0..2 {
                        let (lo, hi) = (axis, axis + 2);
                        let (g_min, g_max) = (g[4 * i + lo], g[4 * i + hi]);
                        if r[lo] <= r[hi] {
                            graw[4 * i + lo] += g_min;
                            graw[4 * i + hi] += g_max;
                        } else {
                            graw[4 * i + hi] += g_min;
                            graw[4 * i + lo] += g_max;
                        }
                    }
                    for k in 0..4 {
                        graw[4 * i + k] *= r[k] * (1.0 - r[k]);
                    }
                }
                acc(*centers, &|dc| {
                    for i in 0..n {
                        dc[2 * i] += graw[4 * i] + graw[4 * i + 2];
                        dc[2 * i + 1] += graw[4 * i + 1] + graw[4 * i + 3];
                    }
                });
                acc(*disp, &|dd| {
                    for i in 0..n {
                        dd[4 * i] -= graw[4 * i];
                        dd[4 * i + 1] -= graw[4 * i + 1];
                        dd[4 * i + 2] += graw[4 * i + 2];
                        dd[4 * i + 3] += graw[4 * i + 3];
                    }
                });
            }
            Op::SigmoidFocal {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let z = &self.nodes[logits.0].value;
                acc(*logits, &|dz| {
                    for i in 0..z.len() {
                        dz[i] += g[0] * focal_term(z[i], targets[i], *alpha, *gamma).1;
                    }
                });
            }
            Op::L1 { x, target } => {
                let v = &self.nodes[x.0].value;
                acc(*x, &|dx| {
                    for i in 0..v.len() {
                        let diff = v[i] - target[i];
                        if diff != 0.0 {
                            dx[i] += g[0] * diff.signum();
                        }
                    }
                });
            }
            Op::Giou { x, target } => {
                let v = &self.nodes[x.0].value;
                acc(*x, &|dx| {
                    for i in 0..v.len() / 4 {
                        let (_, dg) = giou_with_grad(&v[4 * i..4 * i + 4], &target[4 * i..4 * i + 4]);
                        for k in 0..4 {
                            dx[4 * i + k] -= g[0] * dg[k];
                        }
                    }
                });
            }
        }
    }
}

pub(crate) const FOCAL_CLAMP: f64 = 1e-7;

/// Focal value and its derivative w.r.t. the logit `z` for one entry.
fn focal_term(z: f64, t: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let raw = sigmoid(z);
    let p = raw.clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
    let clamped = p != raw;
    if t > 0.5 {
        let value = -alpha * (1.0 - p).powf(gamma) * p.ln();
        let grad = if clamped {
            0.0
        } else {
            alpha * gamma * (1.0 - p).powf(gamma) * p * p.ln() - alpha * (1.0 - p).powf(gamma + 1.0)
        };
        (value, grad)
    } else {
        let value = -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln();
        let grad = if clamped {
            0.0
        } else {
            -(1.0 - alpha) * (gamma * p.powf(gamma) * (1.0 - p) * (1.0 - p).ln() - p.powf(gamma + 1.0))
        };
        (value, grad)
    }
}

/// GIoU of corner boxes `a` and constant `b`, with `d giou / d a`.
pub(crate) fn giou_with_grad(a: &[f64], b: &[f64]) -> (f64, [f64; 4]) {
    let (x1, y1, x2, y2) = (a[0], a[1], a[2], a[3]);
    let (bx1, by1, bx2, by2) = (b[0], b[1], b[2], b[3]);
    let (w, h) = (x2 - x1, y2 - y1);
    let area_a = w * h;
    let area_b = (bx2 - bx1) * (by2 - by1);
    let iw_raw = x2.min(bx2) - x1.max(bx1);
    let ih_raw = y2.min(by2) - y1.max(by1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    let cw = x2.max(bx2) - x1.min(bx1);
    let ch = y2.max(by2) - y1.min(by1);
    let enc = cw * ch;

    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let giou = if enc > 0.0 { iou - (enc - union) / enc } else { iou };

    // partial derivatives, ordered (x1, y1, x2, y2)
    let d_area = [-h, -w, h, w];
    let mut d_iw = [0.0; 4];
    let mut d_ih = [0.0; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        if x1 > bx1 {
            d_iw[0] = -1.0;
        }
        if x2 < bx2 {
            d_iw[2] = 1.0;
        }
        if y1 > by1 {
            d_ih[1] = -1.0;
        }
        if y2 < by2 {
            d_ih[3] = 1.0;
        }
    }
    let mut d_cw = [0.0; 4];
    let mut d_ch = [0.0; 4];
    if x1 < bx1 {
        d_cw[0] = -1.0;
    }
    if x2 > bx2 {
        d_cw[2] = 1.0;
    }
    if y1 < by1 {
        d_ch[1] = -1.0;
    }
    if y2 > by2 {
        d_ch[3] = 1.0;
    }
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_inter = ih * d_iw[k] + iw * d_ih[k];
        let d_union = d_area[k] - d_inter;
        let d_enc = ch * d_cw[k] + cw * d_ch[k];
        let mut gk = 0.0;
        if union > 0.0 {
            gk += (d_inter * union - inter * d_union) / (union * union);
        }
        if enc > 0.0 {
            gk += (d_union * enc - union * d_enc) / (enc * enc);
        }
        grad[k] = gk;
    }
    (giou, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(t: &mut Tape, shape: &[usize], v: &[f64]) -> Var {
        t.leaf(&Tensor::new(shape.to_vec(), v.to_vec()).unwrap().with_requires_grad(true))
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let mut t = Tape::new();
        let i = leaf(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = leaf(&mut t, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let p = t.matmul(i, m).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);
        let a = leaf(&mut t, &[1, 2], &[1.0, 0.0]);
        let b = leaf(&mut t, &[2, 1], &[0.0, 1.0]);
        let p = t.matmul(a, b).unwrap();
        assert_eq!(t.value(p), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2, 3], &[0.0; 6]);
        let b = leaf(&mut t, &[2, 3], &[0.0; 6]);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let z = leaf(&mut t, &[1], &[0.0]);
        let s = t.sigmoid(z);
        assert_eq!(t.value(s), &[0.5]);
        let n = leaf(&mut t, &[1], &[-3.2]);
        let r = t.relu(n);
        assert_eq!(t.value(r), &[0.0]);
        let a = leaf(&mut t, &[2], &[1.0, 2.0]);
        let b = leaf(&mut t, &[2], &[3.0, 4.0]);
        let c = t.elementwise("add".parse().unwrap(), a, Some(b)).unwrap();
        assert_eq!(t.value(c), &[4.0, 6.0]);
        assert!(matches!("tanh".parse::<ElementwiseKind>(), Err(Error::UnknownKind(_))));
        let c3 = leaf(&mut t, &[3], &[1.0, 2.0, 3.0]);
        assert!(t.mul(a, c3).is_err());
    }

    #[test]
    fn sigmoid_stays_in_open_interval() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[4], &[-30.0, -5.0, 5.0, 30.0]);
        let s = t.sigmoid(x);
        assert!(t.value(s).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], &[0.0, 0.0]);
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y), &[0.5, 0.5]);
        let x = leaf(&mut t, &[2], &[1000.0, 0.0]);
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y)[0], 1.0);
        assert!(t.value(y)[1] < 1e-300);
        assert!(t.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_mask_gives_exact_zero() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mask = [false, true, false, true, true, true];
        let y = t.softmax_masked(x, 1, Some(&mask)).unwrap();
        let v = t.value(y);
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
        assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let g = leaf(&mut t, &[2], &[1.0, 1.0]);
        let b = leaf(&mut t, &[2], &[0.0, 0.0]);
        let x = leaf(&mut t, &[1, 2], &[1.0, -1.0]);
        let y = t.layer_norm(x, g, b, 1e-12).unwrap();
        for (got, want) in t.value(y).iter().zip([1.0, -1.0]) {
            assert!((got - want).abs() < 1e-9);
        }
        let g3 = leaf(&mut t, &[3], &[1.0; 3]);
        let b3 = leaf(&mut t, &[3], &[0.0; 3]);
        let c = leaf(&mut t, &[1, 3], &[5.0, 5.0, 5.0]);
        let y = t.layer_norm(c, g3, b3, 1e-5).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0, 0.0]);
        assert!(t.layer_norm(x, g3, b3, 1e-5).is_err());
    }

    #[test]
    fn concat_examples() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[1, 1], &[1.0]);
        let b = leaf(&mut t, &[1, 1], &[2.0]);
        let r = t.concat(&[a, b], 0).unwrap();
        assert_eq!((t.shape(r), t.value(r)), (&[2usize, 1][..], &[1.0, 2.0][..]));
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[1, 2]);
        let blocks: Vec<Var> = (0..3).map(|_| leaf(&mut t, &[4, 5], &[0.0; 20])).collect();
        let s = t.concat(&blocks, 0).unwrap();
        assert_eq!(t.shape(s), &[12, 5]);
        let wrong = leaf(&mut t, &[4, 6], &[0.0; 24]);
        assert!(t.concat(&[blocks[0], wrong], 0).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[3], &[1.0, 2.0, 3.0]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = leaf(&mut t, &[1], &[2.0]);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0]);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[8.0]);
        assert!(matches!(t.backward(x).ok(), Some(())));
        let v = leaf(&mut t, &[2], &[1.0, 1.0]);
        assert!(matches!(t.backward(v), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn focal_known_value() {
        // target class at p = 0.5: 0.25 · 0.25 · ln 2
        let (v, _) = focal_term(0.0, 1.0, 0.25, 2.0);
        assert!((v - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
    }
}
