use rand::Rng;

use super::kernels::{matmul_into, matmul_tn_acc, transpose_2d};
use super::{axis_split, Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Work counters accumulated while recording and differentiating.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounters {
    /// Multiply-accumulates in 2-D `matmul`.
    pub matmul_macs: u64,
    /// Multiply-accumulates in batched `A·B` (attention-weighted values).
    pub bmm_macs: u64,
    /// Multiply-accumulates in batched `A·Bᵀ` (attention scores).
    pub score_macs: u64,
    /// Nodes whose backward rule ran during the last `backward` call.
    pub backward_visits: u64,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BmmNt {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddBroadcast {
        x: Var,
        y: Var,
    },
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Softmax {
        x: Var,
        n: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        d: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Reshape(Var),
    /// `src[i]` is the input offset of output run `i`, each `run` elements long.
    Permute {
        x: Var,
        src: Vec<usize>,
        run: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Expand(Var),
    Sum(Var),
    Mean(Var),
    FocalLoss {
        logits: Var,
        labels: Vec<usize>,
        coeff: Vec<T>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Define-by-run computation tape.
///
/// Nodes are appended in execution order, so the node list is always a
/// topological order and [`Graph::backward`] walks it in reverse once.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    counters: OpCounters,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            counters: OpCounters::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    /// Records a leaf. Leaves with `requires_grad` accumulate gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass (accumulated for leaves).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Clears every stored gradient.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// 2-D matrix product `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.counters.matmul_macs += (m * k * n) as u64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul { a, b, m, k, n }))
    }

    /// Batched product `[B×m×k]·[B×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(self.shape_err("bmm", a, b));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                matmul_into(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        self.counters.bmm_macs += (batch * m * k * n) as u64;
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(value, rg, Op::Bmm { a, b, batch, m, k, n }))
    }

    /// Batched product against a transposed right operand: `[B×m×k]·[B×n×k]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(self.shape_err("bmm_nt", a, b));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let bt = transpose_2d(&bv[i * n * k..(i + 1) * n * k], n, k);
                matmul_into(
                    &av[i * m * k..(i + 1) * m * k],
                    &bt,
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        self.counters.score_macs += (batch * m * k * n) as u64;
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(value, rg, Op::BmmNt { a, b, batch, m, k, n }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Add(a, b)))
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s (bias, positional table).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var, TensorError> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(self.shape_err("add_broadcast", x, y));
        }
        let yv = self.value(y).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_exact_mut(yv.len()) {
            for (o, &b) in chunk.iter_mut().zip(yv) {
                *o += b;
            }
        }
        let shape = sx.to_vec();
        let rg = self.any_grad(&[x, y]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::AddBroadcast { x, y }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&e| e * c).collect(),
        };
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v
                .data
                .iter()
                .map(|&e| if e > T::zero() { e } else { T::zero() })
                .collect(),
        };
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Relu(x))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let v = self.value(x);
        let mask: Vec<T> = (0..v.len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let value = Tensor {
            shape: v.shape.clone(),
            data: zip_map(&v.data, &mask, |a, m| a * m),
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Dropout { x, mask }))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = *v.shape.last().expect("rank >= 1");
        let mut data = v.data.clone();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Softmax { x, n })
    }

    /// Layer normalization over the last axis followed by `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let d = *self.shape(x).last().expect("rank >= 1");
        if self.shape(gamma) != [d] {
            return Err(self.shape_err("layer_norm", x, gamma));
        }
        if self.shape(beta) != [d] {
            return Err(self.shape_err("layer_norm", x, beta));
        }
        let eps = T::from_f64(eps);
        let dt = T::from_f64(d as f64);
        let v = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = v.len() / d;
        let mut xhat = Vec::with_capacity(v.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(v.len());
        for row in v.data.chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / dt;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &e) in row.iter().enumerate() {
                let h = (e - mean) * is;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let shape = v.shape.clone();
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                d,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = Tensor::new(shape.to_vec(), self.value(x).data.clone())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        for &a in axes {
            if a >= rank || seen[a] {
                return Err(TensorError::Axis { axis: a, rank });
            }
            seen[a] = true;
        }
        if axes.len() != rank {
            return Err(TensorError::Axis { axis: axes.len(), rank });
        }
        let mut in_strides = vec![1usize; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        // trailing axes left in place are copied as contiguous runs
        let mut kept = rank;
        while kept > 0 && axes[kept - 1] == kept - 1 {
            kept -= 1;
        }
        let run: usize = shape[kept..].iter().product();
        let step: Vec<usize> = axes[..kept].iter().map(|&a| in_strides[a]).collect();
        let total: usize = out_shape[..kept].iter().product();
        let mut src = Vec::with_capacity(total);
        let mut idx = vec![0usize; kept];
        let mut s = 0usize;
        for _ in 0..total {
            src.push(s);
            for d in (0..kept).rev() {
                idx[d] += 1;
                s += step[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                s -= step[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(total * run);
        for &i in &src {
            data.extend_from_slice(&xv[i..i + run]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(out_shape, data)?, rg, Op::Permute { x, src, run }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::Config("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis { axis, rank: base.len() });
        }
        let mut total_axis = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(self.shape_err("concat", first, v));
            }
            total_axis += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total_axis;
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                axis,
                rank: shape.len(),
            });
        }
        if start >= end || end > shape[axis] {
            return Err(TensorError::Config(format!(
                "slice {start}..{end} out of range for axis {axis} of {shape:?}"
            )));
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            data.extend_from_slice(&xv[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(out_shape, data)?, rg, Op::Slice { x, axis, start }))
    }

    /// Repeats `x` along a new leading axis of size `n`.
    pub fn expand(&mut self, x: Var, n: usize) -> Result<Var, TensorError> {
        let v = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(&v.shape);
        let mut data = Vec::with_capacity(n * v.len());
        for _ in 0..n {
            data.extend_from_slice(&v.data);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Expand(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum::<T>();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data.iter().copied().sum::<T>() / T::from_f64(v.len() as f64);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Batch-mean focal loss `α_y (1 − p_y)^γ (−log p_y)` over `logits[B×C]`.
    ///
    /// `log p_y` is clamped below at `ln 1e-12`.
    pub fn focal_loss(&mut self, logits: Var, labels: &[usize], alpha: &[T], gamma: T) -> Result<Var, TensorError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[1] != alpha.len() {
            return Err(TensorError::Shape {
                op: "focal_loss",
                lhs: shape,
                rhs: vec![labels.len(), alpha.len()],
            });
        }
        if gamma < T::zero() {
            return Err(TensorError::Config("focal gamma must be >= 0".into()));
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::Config(format!("label {bad} out of range for {c} classes")));
        }
        let log_floor = T::from_f64(1e-12f64.ln());
        let mut probs = self.value(logits).data.clone();
        let mut coeff = Vec::with_capacity(labels.len());
        let mut total = T::zero();
        for (row, &y) in probs.chunks_exact_mut(c).zip(labels) {
            let logp = log_softmax_at(row, y).max(log_floor);
            softmax_in_place(row);
            let p = logp.exp();
            let q = T::one() - p;
            let modulating = q.powf(gamma);
            let a = alpha[y];
            total += a * modulating * (-logp);
            let focus = if gamma > T::zero() && q > T::zero() {
                gamma * q.powf(gamma - T::one()) * p * logp
            } else {
                T::zero()
            };
            coeff.push(a * (focus - modulating));
        }
        let batch = T::from_f64(labels.len() as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / batch),
            rg,
            Op::FocalLoss {
                logits,
                labels: labels.to_vec(),
                coeff,
                probs,
            },
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Intermediate gradients are recomputed; leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *grad = None;
            }
        }
        self.counters.backward_visits = 0;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        slot(&self.nodes, &mut self.grads, loss).expect("loss requires grad")[0] += T::one();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.counters.backward_visits += 1;
            propagate(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for e in row.iter_mut() {
        *e = (*e - max).exp();
        sum += *e;
    }
    for e in row.iter_mut() {
        *e = *e / sum;
    }
}

fn log_softmax_at<T: Scalar>(row: &[T], y: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&e| (e - max).exp()).sum();
    row[y] - max - sum.ln()
}

/// Zero-initialized gradient buffer for `v`, or `None` if it needs no grad.
fn slot<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut [T]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn propagate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if let Some(da) = slot(nodes, grads, a) {
                let bt = transpose_2d(val(b), k, n);
                matmul_into(g, &bt, da, m, n, k);
            }
            if let Some(db) = slot(nodes, grads, b) {
                matmul_tn_acc(val(a), g, db, m, k, n);
            }
        }
        &Op::Bmm { a, b, batch, m, k, n } => {
            if let Some(da) = slot(nodes, grads, a) {
                let bv = val(b);
                for s in 0..batch {
                    let bt = transpose_2d(&bv[s * k * n..(s + 1) * k * n], k, n);
                    matmul_into(
                        &g[s * m * n..(s + 1) * m * n],
                        &bt,
                        &mut da[s * m * k..(s + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                let av = val(a);
                for s in 0..batch {
                    matmul_tn_acc(
                        &av[s * m * k..(s + 1) * m * k],
                        &g[s * m * n..(s + 1) * m * n],
                        &mut db[s * k * n..(s + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        &Op::BmmNt { a, b, batch, m, k, n } => {
            if let Some(da) = slot(nodes, grads, a) {
                let bv = val(b);
                for s in 0..batch {
                    matmul_into(
                        &g[s * m * n..(s + 1) * m * n],
                        &bv[s * n * k..(s + 1) * n * k],
                        &mut da[s * m * k..(s + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                let av = val(a);
                for s in 0..batch {
                    matmul_tn_acc(
                        &g[s * m * n..(s + 1) * m * n],
                        &av[s * m * k..(s + 1) * m * k],
                        &mut db[s * n * k..(s + 1) * n * k],
                        m,
                        n,
                        k,
                    );
                }
            }
        }
        &Op::Add(a, b) => {
            if let Some(da) = slot(nodes, grads, a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, grads, b) {
                add_into(db, g);
            }
        }
        &Op::AddBroadcast { x, y } => {
            if let Some(dx) = slot(nodes, grads, x) {
                add_into(dx, g);
            }
            if let Some(dy) = slot(nodes, grads, y) {
                let len = dy.len();
                for chunk in g.chunks_exact(len) {
                    add_into(dy, chunk);
                }
            }
        }
        &Op::Mul(a, b) => {
            if let Some(da) = slot(nodes, grads, a) {
                for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(val(b)) {
                    *d += gv * bv;
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for ((d, &gv), &av) in db.iter_mut().zip(g).zip(val(a)) {
                    *d += gv * av;
                }
            }
        }
        &Op::Scale(x, c) => {
            if let Some(dx) = slot(nodes, grads, x) {
                for (d, &gv) in dx.iter_mut().zip(g) {
                    *d += gv * c;
                }
            }
        }
        &Op::Relu(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(val(x)) {
                    if xv > T::zero() {
                        *d += gv;
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &gv), &mv) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gv * mv;
                }
            }
        }
        &Op::Softmax { x, n } => {
            let y = nodes[i].value.data();
            if let Some(dx) = slot(nodes, grads, x) {
                for ((drow, grow), yrow) in dx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yv * (gv - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            d,
            xhat,
            inv_std,
        } => {
            let d = *d;
            let gm = val(*gamma);
            if let Some(dg) = slot(nodes, grads, *gamma) {
                for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for ((o, &gv), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                        *o += gv * h;
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *beta) {
                for grow in g.chunks_exact(d) {
                    add_into(db, grow);
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let dt = T::from_f64(d as f64);
                let mut dh = vec![T::zero(); d];
                for (((drow, grow), hrow), &is) in dx
                    .chunks_exact_mut(d)
                    .zip(g.chunks_exact(d))
                    .zip(xhat.chunks_exact(d))
                    .zip(inv_std)
                {
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..d {
                        dh[j] = grow[j] * gm[j];
                        sum_dh += dh[j];
                        sum_dh_h += dh[j] * hrow[j];
                    }
                    for j in 0..d {
                        drow[j] += is / dt * (dt * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                    }
                }
            }
        }
        &Op::Reshape(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                add_into(dx, g);
            }
        }
        Op::Permute { x, src, run } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (&s, gr) in src.iter().zip(g.chunks_exact(*run)) {
                    add_into(&mut dx[s..s + run], gr);
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let out_shape = nodes[i].value.shape();
            let (outer, _, inner) = axis_split(out_shape, *axis);
            let mut offset = 0;
            let row = out_shape[*axis] * inner;
            for &v in inputs {
                let chunk = nodes[v.0].value.shape()[*axis] * inner;
                if let Some(dv) = slot(nodes, grads, v) {
                    for o in 0..outer {
                        add_into(
                            &mut dv[o * chunk..(o + 1) * chunk],
                            &g[o * row + offset..o * row + offset + chunk],
                        );
                    }
                }
                offset += chunk;
            }
        }
        &Op::Slice { x, axis, start } => {
            let in_shape = nodes[x.0].value.shape();
            let (outer, dim, inner) = axis_split(in_shape, axis);
            let width = nodes[i].value.shape()[axis] * inner;
            if let Some(dx) = slot(nodes, grads, x) {
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    add_into(&mut dx[base..base + width], &g[o * width..(o + 1) * width]);
                }
            }
        }
        &Op::Expand(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                let len = dx.len();
                for chunk in g.chunks_exact(len) {
                    add_into(dx, chunk);
                }
            }
        }
        &Op::Sum(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Mean(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                let s = g[0] / T::from_f64(dx.len() as f64);
                dx.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::FocalLoss {
            logits,
            labels,
            coeff,
            probs,
        } => {
            if let Some(dz) = slot(nodes, grads, *logits) {
                let c = probs.len() / labels.len();
                let scale = g[0] / T::from_f64(labels.len() as f64);
                for (((drow, prow), &y), &k) in dz.chunks_exact_mut(c).zip(probs.chunks_exact(c)).zip(labels).zip(coeff)
                {
                    for (j, (d, &p)) in drow.iter_mut().zip(prow).enumerate() {
                        let indicator = if j == y { T::one() } else { T::zero() };
                        *d += scale * k * (indicator - p);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let eye = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let r = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(r).data(), &[1., 2., 3., 4.]);

        let row = g.constant(t(&[1, 2], &[1., 0.]));
        let col = g.constant(t(&[2, 1], &[5., 7.]));
        let r = g.matmul(row, col).unwrap();
        assert_eq!(g.value(r).data(), &[5.]);

        let b = g.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let r = g.matmul(m, b).unwrap();
        assert_eq!(g.value(r).data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        for (input, expect) in [
            ([0.0, 0.0], [0.5, 0.5]),
            ([1000.0, 1000.0], [0.5, 0.5]),
            ([2f64.ln(), 0.0], [2.0 / 3.0, 1.0 / 3.0]),
        ] {
            let x = g.constant(t(&[2], &input));
            let y = g.softmax_lastdim(x);
            for (a, b) in g.value(y).data().iter().zip(expect) {
                assert!((a - b).abs() < 1e-12, "{input:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let ones = |g: &mut Graph<f64>, d| g.constant(Tensor::full(&[d], 1.0));
        let zeros = |g: &mut Graph<f64>, d| g.constant(Tensor::zeros(&[d]));

        let x = g.constant(t(&[4], &[3.0; 4]));
        let (ga, be) = (ones(&mut g, 4), zeros(&mut g, 4));
        let y = g.layer_norm(x, ga, be, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.constant(t(&[2], &[-1.0, 1.0]));
        let (ga, be) = (ones(&mut g, 2), zeros(&mut g, 2));
        let y = g.layer_norm(x, ga, be, 1e-12).unwrap();
        for (a, b) in g.value(y).data().iter().zip([-1.0, 1.0]) {
            assert!((a - b).abs() < 1e-9);
        }

        // mean 2, population variance 8/3
        let x = g.constant(t(&[3], &[0.0, 2.0, 4.0]));
        let (ga, be) = (ones(&mut g, 3), zeros(&mut g, 3));
        let y = g.layer_norm(x, ga, be, 1e-5).unwrap();
        let s = (8.0f64 / 3.0 + 1e-5).sqrt();
        for (a, b) in g.value(y).data().iter().zip([-2.0 / s, 0.0, 2.0 / s]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((g.value(y).data()[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn relu_and_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let d = g.dropout(x, 0.15, false, &mut rng).unwrap();
        assert_eq!(d, x);
        let d = g.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(d, x);
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
        assert!(g.dropout(x, -0.1, false, &mut rng).is_err());

        let ones = g.constant(Tensor::full(&[100_000], 1.0));
        let d = g.dropout(ones, 0.15, true, &mut rng).unwrap();
        let mean = g.value(d).data().iter().map(|&v| v as f64).sum::<f64>() / 100_000.0;
        assert!((0.98..=1.02).contains(&mean), "mean {mean}");
    }

    #[test]
    fn backward_linear_and_square() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[2, 3], &[0.1, -2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 6]);

        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[1], &[3.0]));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[6.0]);

        // leaf gradients accumulate until zeroed
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[12.0]);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn backward_visits_each_grad_node_once() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[2, 2], &[1., 2., 3., 4.]));
        let c = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let a = g.matmul(w, c).unwrap();
        let b = g.relu(a);
        let s = g.sum(b);
        g.backward(s).unwrap();
        assert_eq!(g.counters().backward_visits, 4);
    }

    #[test]
    fn permute_and_concat_and_slice_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[0., 1., 2., 3., 4., 5.]));
        let p = g.permute(x, &[1, 0]).unwrap();
        assert_eq!(g.shape(p), &[3, 2]);
        assert_eq!(g.value(p).data(), &[0., 3., 1., 4., 2., 5.]);

        let y = g.constant(t(&[2, 1], &[9., 8.]));
        let c = g.concat(&[y, x], 1).unwrap();
        assert_eq!(g.value(c).data(), &[9., 0., 1., 2., 8., 3., 4., 5.]);

        let s = g.slice(c, 1, 1, 3).unwrap();
        assert_eq!(g.value(s).data(), &[0., 1., 3., 4.]);
        assert!(g.slice(c, 1, 3, 3).is_err());
    }
}
