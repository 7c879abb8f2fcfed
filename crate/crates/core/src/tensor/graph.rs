//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in creation order, so the tape is already a topological
//! order: `backward` walks it once from the end and each node is visited exactly
//! once. Every forward op checks its output for NaN/Inf.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Variance floor inside batch normalization.
pub const BN_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Per-feature statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    BatchMatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    AddBias(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { input: NodeId, axis: usize, start: usize },
    Reshape(NodeId),
    SwapLast2(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MeanAxis { input: NodeId, axis: usize },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout { input: NodeId, mask: Vec<f64> },
    Conv1d { input: NodeId, weight: NodeId, bias: NodeId },
    Gather { input: NodeId, indices: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddBias(..) => "add_bias",
            Op::MulCol(..) => "mul_col",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::SwapLast2(..) => "swap_last2",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Softmax(..) => "softmax",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanAxis { .. } => "mean_axis",
            Op::BatchNorm { .. } => "batch_norm",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::Dropout { .. } => "dropout",
            Op::Conv1d { .. } => "conv1d",
            Op::Gather { .. } => "gather",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::BatchMatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::MulCol(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Reshape(a)
            | Op::SwapLast2(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { input, .. }
            | Op::MeanAxis { input, .. }
            | Op::Dropout { input, .. }
            | Op::Gather { input, .. } => vec![*input],
            Op::BatchNorm {
                input, gamma, beta, ..
            }
            | Op::BatchNormEval {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Conv1d {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Rows and feature width when the last axis is treated as features.
fn rows_last(shape: &[usize]) -> (usize, usize) {
    let f = shape.last().copied().unwrap_or(1);
    let len: usize = shape.iter().product();
    (if f == 0 { 0 } else { len / f }, f)
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("output of {}", op.name())));
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Numeric("leaf input".into()));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A value that takes no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    /// A named learnable leaf; its gradient is reported by [`Graph::param_grads`].
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        let id = self
            .leaf(value, true)
            .map_err(|e| e.context(&format!("parameter {name}")))?;
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    /// An unnamed leaf that still receives a gradient (useful for checks on inputs).
    pub fn variable(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradients of every registered parameter, zero-filled where none flowed.
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(name, id)| {
                let g = self.grads[id.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*id)));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn param_ids(&self) -> &[(String, NodeId)] {
        &self.params
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(bv).map_err(|_| Error::shape("matmul", av.shape(), bv.shape()))?;
        self.push(out, Op::MatMul(a, b))
    }

    /// `[B, r, k] x [B, k, c] -> [B, r, c]`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1];
        if !ok {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let (bn, r, k, c) = (sa[0], sa[1], sa[2], sb[2]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(bn * r * c);
        for i in 0..bn {
            out.extend(matmul_raw(
                &ad[i * r * k..(i + 1) * r * k],
                &bd[i * k * c..(i + 1) * k * c],
                r,
                k,
                c,
            ));
        }
        self.push(Tensor::new(&[bn, r, c], out)?, Op::BatchMatMul(a, b))
    }

    // ---- element-wise ----

    fn zip_same(
        &self,
        op: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("hadamard", a, b, |x, y| x * y)?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    /// Adds a `[F]` bias to every row of a tensor whose last axis is `F`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, f) = rows_last(xv.shape());
        if bv.len() != f || bv.rank() != 1 {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let b = bv.data();
        let data = xv
            .data()
            .chunks(f.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let out = Tensor::new(xv.shape(), data)?;
        self.push(out, Op::AddBias(x, bias))
    }

    /// Multiplies each last-axis row of `x` by the matching entry of `col`
    /// (`col` has the same leading shape and a trailing axis of 1).
    pub fn mul_col(&mut self, x: NodeId, col: NodeId) -> Result<NodeId> {
        let (xv, cv) = (self.value(x), self.value(col));
        let (rows, f) = rows_last(xv.shape());
        let (crows, cf) = rows_last(cv.shape());
        if cf != 1 || crows != rows {
            return Err(Error::shape("mul_col", xv.shape(), cv.shape()));
        }
        let c = cv.data();
        let data = xv
            .data()
            .chunks(f.max(1))
            .zip(c)
            .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
            .collect();
        let out = Tensor::new(xv.shape(), data)?;
        self.push(out, Op::MulCol(x, col))
    }

    // ---- structural ----

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = match inputs.first() {
            Some(f) => self.shape(*f).to_vec(),
            None => return Err(Error::Config("concat of zero tensors".into())),
        };
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &id in inputs {
            let s = self.shape(id);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = around(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &id in inputs {
                let v = self.value(id);
                let d = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let (outer, d, inner) = around(&shape, axis);
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        self.push(out, Op::Slice { input, axis, start })
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(input);
        let out = v
            .reshape(shape)
            .map_err(|_| Error::shape("reshape", v.shape(), shape))?;
        self.push(out, Op::Reshape(input))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn swap_last2(&mut self, input: NodeId) -> Result<NodeId> {
        let v = self.value(input);
        let out = swap_last2(v)?;
        self.push(out, Op::SwapLast2(input))
    }

    // ---- non-linearities ----

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let (_, f) = rows_last(v.shape());
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(f.max(1)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let out = Tensor::new(v.shape(), data)?;
        self.push(out, Op::Softmax(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::shape("mean", v.shape(), &[1]));
        }
        let m = v.sum() / v.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("mean_axis", &shape, &[axis]));
        }
        let (outer, d, inner) = around(&shape, axis);
        let src = self.value(input).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..d {
                let base = (o * d + k) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        for x in &mut data {
            *x /= d as f64;
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let out = Tensor::new(&out_shape, data)?;
        self.push(out, Op::MeanAxis { input, axis })
    }

    // ---- layers ----

    /// Training-mode batch normalization over every axis but the last.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(NodeId, BatchStats)> {
        let xv = self.value(input);
        let (rows, f) = rows_last(xv.shape());
        self.check_affine("batch_norm", input, gamma, beta)?;
        if rows == 0 {
            return Err(Error::shape("batch_norm", xv.shape(), &[1, f]));
        }
        let x = xv.data();
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for row in x.chunks(f) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        for row in x.chunks(f) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xhat: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(k, v)| (v - mean[k % f]) * inv_std[k % f])
            .collect();
        let out = self.affine(&xhat, gamma, beta, xv.shape())?;
        let id = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )?;
        Ok((id, BatchStats { mean, var }))
    }

    /// Evaluation-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &BatchStats,
    ) -> Result<NodeId> {
        self.check_affine("batch_norm_eval", input, gamma, beta)?;
        let xv = self.value(input);
        let (_, f) = rows_last(xv.shape());
        if stats.mean.len() != f || stats.var.len() != f {
            return Err(Error::shape("batch_norm_eval", xv.shape(), &[stats.mean.len()]));
        }
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xhat: Vec<f64> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| (v - stats.mean[k % f]) * inv_std[k % f])
            .collect();
        let out = self.affine(&xhat, gamma, beta, xv.shape())?;
        self.push(
            out,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    fn check_affine(&self, op: &str, input: NodeId, gamma: NodeId, beta: NodeId) -> Result<()> {
        let (_, f) = rows_last(self.shape(input));
        for p in [gamma, beta] {
            if self.shape(p) != [f] {
                return Err(Error::shape(op, self.shape(input), self.shape(p)));
            }
        }
        Ok(())
    }

    fn affine(&self, xhat: &[f64], gamma: NodeId, beta: NodeId, shape: &[usize]) -> Result<Tensor> {
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let f = g.len();
        let data = xhat
            .iter()
            .enumerate()
            .map(|(k, v)| v * g[k % f] + b[k % f])
            .collect();
        Tensor::new(shape, data)
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    pub fn dropout(&mut self, input: NodeId, rate: f64, seed: u64, train: bool) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(input);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let v = self.value(input);
        let mask: Vec<f64> = (0..v.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(v.shape(), data)?;
        self.push(out, Op::Dropout { input, mask })
    }

    /// 1-D convolution with "same" zero padding.
    ///
    /// `input` is `[B, L, C_in]`, `weight` is `[K, C_in, C_out]` with odd `K`,
    /// `bias` is `[C_out]`; the kernel slides along `L`.
    pub fn conv1d(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.shape(input).to_vec(),
            self.shape(weight).to_vec(),
            self.shape(bias).to_vec(),
        );
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[2] || bs != [ws[2]] {
            return Err(Error::shape("conv1d", &xs, &ws));
        }
        if ws[0] % 2 == 0 {
            return Err(Error::Config(format!(
                "conv1d kernel size {} must be odd for same padding",
                ws[0]
            )));
        }
        let (b, l, ci) = (xs[0], xs[1], xs[2]);
        let (k, co) = (ws[0], ws[2]);
        let pad = k / 2;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let bias_v = self.value(bias).data();
        let mut out = vec![0.0; b * l * co];
        for bi in 0..b {
            for li in 0..l {
                let o = &mut out[(bi * l + li) * co..(bi * l + li + 1) * co];
                o.copy_from_slice(bias_v);
                for ki in 0..k {
                    let src = li + ki;
                    if src < pad || src - pad >= l {
                        continue;
                    }
                    let xr = &x[(bi * l + src - pad) * ci..(bi * l + src - pad + 1) * ci];
                    for (c_in, &xv) in xr.iter().enumerate() {
                        let wr = &w[(ki * ci + c_in) * co..(ki * ci + c_in + 1) * co];
                        for (ov, wv) in o.iter_mut().zip(wr) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[b, l, co], out)?;
        self.push(
            out,
            Op::Conv1d {
                input,
                weight,
                bias,
            },
        )
    }

    /// Picks entries by flat index into a rank-1 result.
    pub fn gather(&mut self, input: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(input);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.len()) {
            return Err(Error::shape("gather", v.shape(), &[bad]));
        }
        let data = indices.iter().map(|&i| v.data()[i]).collect();
        let out = Tensor::new(&[indices.len()], data)?;
        self.push(
            out,
            Op::Gather {
                input,
                indices: indices.to_vec(),
            },
        )
    }

    // ---- composites ----

    /// `x · w + b` over the last axis; `w` is `[in, out]`, `b` is `[out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (rows, f) = rows_last(&xs);
        if ws.len() != 2 || ws[0] != f {
            return Err(Error::shape("dense", &xs, &ws));
        }
        let flat = if xs.len() == 2 { x } else { self.reshape(x, &[rows, f])? };
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        if xs.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = xs;
            *out_shape.last_mut().unwrap() = ws[1];
            self.reshape(y, &out_shape)
        }
    }

    // ---- backward ----

    /// Accumulates d(output)/d(node) for every node that requires a gradient.
    /// `output` must hold exactly one element.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        let shape = self.shape(output).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::shape("backward", &shape, &[1]));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[output.0] = Some(Tensor::ones(&shape));
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.local_backward(i, &g)?;
            self.grads[i] = Some(g);
            for (pid, pg) in contributions {
                if !self.nodes[pid.0].requires_grad {
                    continue;
                }
                match &mut self.grads[pid.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(pg.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, i: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |id: NodeId| &self.nodes[id.0].value;
        let like = |id: NodeId, data: Vec<f64>| Tensor::new(val(id).shape(), data);
        let gd = g.data();
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let da = g.matmul(&bv.transpose()?)?;
                let db = av.transpose()?.matmul(g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (bn, r, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let c = bv.shape()[2];
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for n in 0..bn {
                    let gs = Tensor::new(&[r, c], gd[n * r * c..(n + 1) * r * c].to_vec())?;
                    let as_ = Tensor::new(&[r, k], av.data()[n * r * k..(n + 1) * r * k].to_vec())?;
                    let bs = Tensor::new(&[k, c], bv.data()[n * k * c..(n + 1) * k * c].to_vec())?;
                    da.extend(gs.matmul(&bs.transpose()?)?.into_data());
                    db.extend(as_.transpose()?.matmul(&gs)?.into_data());
                }
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let da = gd.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                let db = gd.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * s))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::AddBias(x, b) => {
                let f = val(*b).len();
                let mut db = vec![0.0; f];
                for row in gd.chunks(f.max(1)) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                vec![(*x, g.clone()), (*b, like(*b, db)?)]
            }
            Op::MulCol(x, c) => {
                let (xv, cv) = (val(*x), val(*c));
                let (_, f) = rows_last(xv.shape());
                let f = f.max(1);
                let mut dx = Vec::with_capacity(xv.len());
                let mut dc = Vec::with_capacity(cv.len());
                for ((grow, xrow), &s) in gd.chunks(f).zip(xv.data().chunks(f)).zip(cv.data()) {
                    dx.extend(grow.iter().map(|v| v * s));
                    dc.push(grow.iter().zip(xrow).map(|(a, b)| a * b).sum());
                }
                vec![(*x, like(*x, dx)?), (*c, like(*c, dc)?)]
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = around(y.shape(), *axis);
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|id| Vec::with_capacity(val(*id).len()))
                    .collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (k, id) in inputs.iter().enumerate() {
                        let d = val(*id).shape()[*axis];
                        parts[k].extend_from_slice(&gd[off..off + d * inner]);
                        off += d * inner;
                    }
                }
                inputs
                    .iter()
                    .zip(parts)
                    .map(|(id, p)| Ok((*id, like(*id, p)?)))
                    .collect::<Result<_>>()?
            }
            Op::Slice { input, axis, start } => {
                let src_shape = val(*input).shape();
                let (outer, d, inner) = around(src_shape, *axis);
                let len = y.shape()[*axis];
                let mut dx = vec![0.0; val(*input).len()];
                for o in 0..outer {
                    let base = o * d * inner + start * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*input, like(*input, dx)?)]
            }
            Op::Reshape(a) => vec![(*a, like(*a, gd.to_vec())?)],
            Op::SwapLast2(a) => vec![(*a, swap_last2(g)?)],
            Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*a, like(*a, d)?)]
            }
            Op::Sigmoid(a) => {
                let d = gd.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                vec![(*a, like(*a, d)?)]
            }
            Op::Tanh(a) => {
                let d = gd.iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
                vec![(*a, like(*a, d)?)]
            }
            Op::Softmax(a) => {
                let (_, f) = rows_last(y.shape());
                let f = f.max(1);
                let mut d = Vec::with_capacity(y.len());
                for (grow, yrow) in gd.chunks(f).zip(y.data().chunks(f)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    d.extend(grow.iter().zip(yrow).map(|(g, s)| s * (g - dot)));
                }
                vec![(*a, like(*a, d)?)]
            }
            Op::Log(a) => {
                let d = gd.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
                vec![(*a, like(*a, d)?)]
            }
            Op::Square(a) => {
                let d = gd.iter().zip(val(*a).data()).map(|(g, x)| 2.0 * g * x).collect();
                vec![(*a, like(*a, d)?)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), gd[0]))],
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                vec![(*a, Tensor::full(val(*a).shape(), gd[0] / n))]
            }
            Op::MeanAxis { input, axis } => {
                let (outer, d, inner) = around(val(*input).shape(), *axis);
                let mut dx = vec![0.0; outer * d * inner];
                for o in 0..outer {
                    for k in 0..d {
                        for i in 0..inner {
                            dx[(o * d + k) * inner + i] = gd[o * inner + i] / d as f64;
                        }
                    }
                }
                vec![(*input, like(*input, dx)?)]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = val(*gamma).data();
                let f = gam.len();
                let rows = (xhat.len() / f) as f64;
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                let mut sum_dxhat = vec![0.0; f];
                let mut sum_dxhat_xhat = vec![0.0; f];
                for (k, (&gv, &xh)) in gd.iter().zip(xhat).enumerate() {
                    let j = k % f;
                    dgamma[j] += gv * xh;
                    dbeta[j] += gv;
                    let dxh = gv * gam[j];
                    sum_dxhat[j] += dxh;
                    sum_dxhat_xhat[j] += dxh * xh;
                }
                let dx = gd
                    .iter()
                    .zip(xhat)
                    .enumerate()
                    .map(|(k, (&gv, &xh))| {
                        let j = k % f;
                        let dxh = gv * gam[j];
                        inv_std[j] / rows * (rows * dxh - sum_dxhat[j] - xh * sum_dxhat_xhat[j])
                    })
                    .collect();
                vec![
                    (*input, like(*input, dx)?),
                    (*gamma, like(*gamma, dgamma)?),
                    (*beta, like(*beta, dbeta)?),
                ]
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = val(*gamma).data();
                let f = gam.len();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                let mut dx = Vec::with_capacity(xhat.len());
                for (k, (&gv, &xh)) in gd.iter().zip(xhat).enumerate() {
                    let j = k % f;
                    dgamma[j] += gv * xh;
                    dbeta[j] += gv;
                    dx.push(gv * gam[j] * inv_std[j]);
                }
                vec![
                    (*input, like(*input, dx)?),
                    (*gamma, like(*gamma, dgamma)?),
                    (*beta, like(*beta, dbeta)?),
                ]
            }
            Op::Dropout { input, mask } => {
                let d = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                vec![(*input, like(*input, d)?)]
            }
            Op::Conv1d {
                input,
                weight,
                bias,
            } => {
                let (xv, wv) = (val(*input), val(*weight));
                let (b, l, ci) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (k, co) = (wv.shape()[0], wv.shape()[2]);
                let pad = k / 2;
                let (x, w) = (xv.data(), wv.data());
                let mut dx = vec![0.0; x.len()];
                let mut dw = vec![0.0; w.len()];
                let mut db = vec![0.0; co];
                for bi in 0..b {
                    for li in 0..l {
                        let grow = &gd[(bi * l + li) * co..(bi * l + li + 1) * co];
                        db.iter_mut().zip(grow).for_each(|(d, v)| *d += v);
                        for ki in 0..k {
                            let src = li + ki;
                            if src < pad || src - pad >= l {
                                continue;
                            }
                            let xo = (bi * l + src - pad) * ci;
                            for c_in in 0..ci {
                                let wo = (ki * ci + c_in) * co;
                                let mut acc = 0.0;
                                for c_out in 0..co {
                                    acc += grow[c_out] * w[wo + c_out];
                                    dw[wo + c_out] += grow[c_out] * x[xo + c_in];
                                }
                                dx[xo + c_in] += acc;
                            }
                        }
                    }
                }
                vec![
                    (*input, like(*input, dx)?),
                    (*weight, like(*weight, dw)?),
                    (*bias, like(*bias, db)?),
                ]
            }
            Op::Gather { input, indices } => {
                let mut dx = vec![0.0; val(*input).len()];
                for (&i, gv) in indices.iter().zip(gd) {
                    dx[i] += gv;
                }
                vec![(*input, like(*input, dx)?)]
            }
        })
    }
}

fn swap_last2(v: &Tensor) -> Result<Tensor> {
    let s = v.shape();
    let (b, r, c) = match *s {
        [r, c] => (1, r, c),
        [b, r, c] => (b, r, c),
        _ => return Err(Error::shape("swap_last2", s, &[0, 0])),
    };
    let src = v.data();
    let mut out = vec![0.0; src.len()];
    for n in 0..b {
        let base = n * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = src[base + i * c + j];
            }
        }
    }
    let shape: Vec<usize> = if s.len() == 2 { vec![c, r] } else { vec![b, c, r] };
    Tensor::new(&shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences of a scalar function of one tensor.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        let mut out = Tensor::zeros(x.shape());
        for k in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[k] += h;
            let mut m = x.clone();
            m.data_mut()[k] -= h;
            out.data_mut()[k] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        diff / a.norm().max(b.norm()).max(1e-12)
    }

    /// Checks d(build(x))/dx against finite differences.
    fn check(x: Tensor, build: impl Fn(&mut Graph, NodeId) -> Result<NodeId>) {
        let f = |t: &Tensor| {
            let mut g = Graph::new();
            let id = g.constant(t.clone()).unwrap();
            let out = build(&mut g, id).unwrap();
            g.value(out).item()
        };
        let mut g = Graph::new();
        let id = g.variable(x.clone()).unwrap();
        let out = build(&mut g, id).unwrap();
        g.backward(out).unwrap();
        let analytic = g.grad(id).unwrap().clone();
        let numeric = numeric_grad(&x, &f);
        let e = rel_err(&analytic, &numeric);
        assert!(e < 1e-4, "relative error {e}: {analytic:?} vs {numeric:?}");
    }

    /// Random weights to contract an arbitrary output into a scalar.
    fn contract(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
        let w = rand_tensor(g.shape(y), seed);
        let w = g.constant(w)?;
        let p = g.hadamard(y, w)?;
        g.sum(p)
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap()).unwrap();
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let s = g.square(x).unwrap();
        let l = g.sum(s).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        match g.matmul(a, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        let c = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn non_finite_trips_numeric_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1], vec![0.0]).unwrap()).unwrap();
        assert!(matches!(g.log(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn elementwise_gradients() {
        let x = rand_tensor(&[4, 3], 1);
        check(x.clone(), |g, x| {
            let y = g.tanh(x)?;
            contract(g, y, 2)
        });
        check(x.clone(), |g, x| {
            let y = g.sigmoid(x)?;
            contract(g, y, 3)
        });
        check(x.clone(), |g, x| {
            let y = g.relu(x)?;
            contract(g, y, 4)
        });
        check(x.clone(), |g, x| {
            let y = g.softmax(x)?;
            contract(g, y, 5)
        });
        check(x.map(|v| v.abs() + 0.5), |g, x| {
            let y = g.log(x)?;
            contract(g, y, 6)
        });
        check(x.clone(), |g, x| {
            let y = g.square(x)?;
            let y = g.scale(y, 0.7)?;
            let y = g.add_scalar(y, 1.0)?;
            g.mean(y)
        });
    }

    #[test]
    fn structural_gradients() {
        let x = rand_tensor(&[2, 3, 4], 7);
        check(x.clone(), |g, x| {
            let a = g.slice(x, 1, 1, 2)?;
            let b = g.slice(x, 2, 0, 3)?;
            let c = g.concat(&[x, x], 2)?;
            let d = g.swap_last2(x)?;
            let e = g.reshape(d, &[6, 4])?;
            let m = g.mean_axis(x, 1)?;
            let s1 = contract(g, a, 1)?;
            let s2 = contract(g, b, 2)?;
            let s3 = contract(g, c, 3)?;
            let s4 = contract(g, e, 4)?;
            let s5 = contract(g, m, 5)?;
            let t = g.add(s1, s2)?;
            let t = g.add(t, s3)?;
            let t = g.add(t, s4)?;
            g.add(t, s5)
        });
    }

    #[test]
    fn linear_gradients() {
        let x = rand_tensor(&[4, 3], 11);
        let w = rand_tensor(&[3, 5], 12);
        let b = rand_tensor(&[5], 13);
        check(x.clone(), |g, x| {
            let w = g.constant(w.clone())?;
            let b = g.constant(b.clone())?;
            let y = g.dense(x, w, Some(b))?;
            contract(g, y, 14)
        });
        check(w.clone(), |g, w| {
            let x = g.constant(x.clone())?;
            let b = g.constant(b.clone())?;
            let y = g.dense(x, w, Some(b))?;
            contract(g, y, 15)
        });
        check(b.clone(), |g, b| {
            let x = g.constant(x.clone())?;
            let w = g.constant(w.clone())?;
            let y = g.dense(x, w, Some(b))?;
            contract(g, y, 16)
        });
        let a = rand_tensor(&[2, 3, 4], 17);
        let c = rand_tensor(&[2, 4, 2], 18);
        check(a.clone(), |g, a| {
            let c = g.constant(c.clone())?;
            let y = g.batch_matmul(a, c)?;
            contract(g, y, 19)
        });
        check(c.clone(), |g, c| {
            let a = g.constant(a.clone())?;
            let y = g.batch_matmul(a, c)?;
            contract(g, y, 20)
        });
    }

    #[test]
    fn broadcast_gradients() {
        let x = rand_tensor(&[3, 4], 21);
        let col = rand_tensor(&[3, 1], 22);
        check(x.clone(), |g, x| {
            let c = g.constant(col.clone())?;
            let y = g.mul_col(x, c)?;
            contract(g, y, 23)
        });
        check(col.clone(), |g, c| {
            let x = g.constant(x.clone())?;
            let y = g.mul_col(x, c)?;
            contract(g, y, 24)
        });
        check(x.clone(), |g, x| {
            let y = g.gather(x, &[0, 5, 5, 11])?;
            contract(g, y, 25)
        });
    }

    #[test]
    fn batch_norm_gradients_and_moments() {
        let x = rand_tensor(&[5, 3], 31);
        let gamma = rand_tensor(&[3], 32).map(|v| v + 1.5);
        let beta = rand_tensor(&[3], 33);
        check(x.clone(), |g, x| {
            let ga = g.constant(gamma.clone())?;
            let be = g.constant(beta.clone())?;
            let (y, _) = g.batch_norm(x, ga, be)?;
            contract(g, y, 34)
        });
        check(gamma.clone(), |g, ga| {
            let x = g.constant(x.clone())?;
            let be = g.constant(beta.clone())?;
            let (y, _) = g.batch_norm(x, ga, be)?;
            contract(g, y, 35)
        });
        let stats = BatchStats {
            mean: vec![0.1, -0.2, 0.3],
            var: vec![0.5, 1.5, 2.0],
        };
        check(x.clone(), |g, x| {
            let ga = g.constant(gamma.clone())?;
            let be = g.constant(beta.clone())?;
            let y = g.batch_norm_eval(x, ga, be, &stats)?;
            contract(g, y, 36)
        });

        let mut g = Graph::new();
        let xs = g.constant(rand_tensor(&[64, 4], 37).map(|v| 3.0 * v + 2.0)).unwrap();
        let ga = g.constant(Tensor::ones(&[4])).unwrap();
        let be = g.constant(Tensor::zeros(&[4])).unwrap();
        let (y, _) = g.batch_norm(xs, ga, be).unwrap();
        let v = g.value(y);
        for j in 0..4 {
            let col: Vec<f64> = (0..64).map(|i| v.get(&[i, j])).collect();
            let mean = col.iter().sum::<f64>() / 64.0;
            let var = col.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-8);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv1d_gradients() {
        let x = rand_tensor(&[2, 5, 3], 41);
        let w = rand_tensor(&[3, 3, 2], 42);
        let b = rand_tensor(&[2], 43);
        check(x.clone(), |g, x| {
            let w = g.constant(w.clone())?;
            let b = g.constant(b.clone())?;
            let y = g.conv1d(x, w, b)?;
            contract(g, y, 44)
        });
        check(w.clone(), |g, w| {
            let x = g.constant(x.clone())?;
            let b = g.constant(b.clone())?;
            let y = g.conv1d(x, w, b)?;
            contract(g, y, 45)
        });
        check(b, |g, b| {
            let x = g.constant(x.clone())?;
            let w = g.constant(w.clone())?;
            let y = g.conv1d(x, w, b)?;
            contract(g, y, 46)
        });
    }

    #[test]
    fn conv1d_same_padding_by_hand() {
        // one channel, kernel [1, 2, 3]: y[l] = x[l-1] + 2 x[l] + 3 x[l+1]
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let w = g.constant(Tensor::new(&[3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let b = g.constant(Tensor::zeros(&[1])).unwrap();
        let y = g.conv1d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[8.0, 14.0, 8.0]);
        let w2 = g.constant(Tensor::zeros(&[2, 1, 1])).unwrap();
        assert!(matches!(g.conv1d(x, w2, b), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&[4, 4], 51)).unwrap();
        assert_eq!(g.dropout(x, 0.0, 1, true).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, 1, false).unwrap(), x);
        let a = g.dropout(x, 0.5, 9, true).unwrap();
        let b = g.dropout(x, 0.5, 9, true).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert!(g.dropout(x, 1.0, 1, true).is_err());
        check(rand_tensor(&[3, 3], 52), |g, x| {
            let y = g.dropout(x, 0.3, 5, true)?;
            contract(g, y, 53)
        });
    }

    /// Composite of three dense layers with mixed activations, checked on
    /// every input at once.
    #[test]
    fn three_layer_composite_matches_finite_differences() {
        let x = rand_tensor(&[4, 3], 61);
        let build = |g: &mut Graph, x: NodeId| -> Result<NodeId> {
            let w1 = g.constant(rand_tensor(&[3, 5], 62))?;
            let w2 = g.constant(rand_tensor(&[5, 4], 63))?;
            let w3 = g.constant(rand_tensor(&[4, 2], 64))?;
            let h = g.dense(x, w1, None)?;
            let h = g.tanh(h)?;
            let h = g.dense(h, w2, None)?;
            let h = g.sigmoid(h)?;
            let h = g.dense(h, w3, None)?;
            let h = g.softmax(h)?;
            contract(g, h, 65)
        };
        check(x, build);
    }

    #[test]
    fn shared_node_visited_once_and_accumulates() {
        // y = x*x + x, dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(&[1], vec![3.0]).unwrap()).unwrap();
        let sq = g.hadamard(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[7.0]);
        // running backward twice does not double count
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[7.0]);
    }
}
