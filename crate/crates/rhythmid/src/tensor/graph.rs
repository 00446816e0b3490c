//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] owns the values of every recorded node, so backward passes
//! read parent values in place instead of cloning them into closures.
//! Nodes are appended in topological order by construction; backward is a
//! single reverse sweep that visits each node once.

use std::sync::Arc;

use super::kernels;
use super::{Tensor, TensorError};
use crate::scalar::Scalar;
use crate::tensor::rng::RngState;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

enum Op<T> {
    Leaf,
    Matmul,
    Transpose,
    Add,
    /// `x [r,c] + bias [c]` broadcast over rows.
    AddBias,
    Mul,
    Scale(T),
    ConcatRows,
    ConcatCols,
    SliceRows {
        start: usize,
    },
    SliceCols {
        start: usize,
    },
    /// Softmax over the last dim of `x + mask`; the additive mask is an
    /// attribute, not a node, so `-inf` entries never appear as an op
    /// output. Backward needs only the output, so the mask is not kept.
    RowSoftmax,
    /// Parents: `x [r,c]`, `gain [c]`, `bias [c]`; normalizes each row.
    LayerNorm {
        eps: T,
    },
    Gelu,
    Relu,
    /// Parent: embedding table `[vocab, d]`; gathers `ids` rows.
    EmbeddingLookup {
        ids: Arc<Vec<usize>>,
    },
    /// Inverted dropout; `keep[i]` marks survivors, which are scaled by
    /// `1/(1-rate)`. Identity cases never record a node.
    Dropout {
        keep: Arc<Vec<bool>>,
        scale: T,
    },
    /// Rows of `x [batch*width, d]` averaged per batch row over positions
    /// where `mask` is true.
    MeanPoolMasked {
        width: usize,
        mask: Arc<Vec<bool>>,
        counts: Vec<usize>,
    },
    /// Mean negative log-likelihood of `targets` under row softmax of the
    /// parent logits. Softmax probabilities are cached for backward.
    CrossEntropy {
        targets: Vec<usize>,
        probs: Tensor<T>,
    },
    Sum,
}

struct Node<T> {
    op: Op<T>,
    parents: Vec<usize>,
    value: Tensor<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
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
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any was
    /// accumulated.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, with untouched tensors reported as zeros.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape().to_vec()),
        }
    }

    /// Leaf that participates in gradient accumulation.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(Op::Leaf, vec![], value, true)
    }

    /// Leaf excluded from gradient accumulation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(Op::Leaf, vec![], value, false)
    }

    fn push_unchecked(
        &mut self,
        op: Op<T>,
        parents: Vec<usize>,
        value: Tensor<T>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            op,
            parents,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        op: Op<T>,
        parents: Vec<Var>,
        value: Tensor<T>,
    ) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(
            op,
            parents.into_iter().map(|v| v.0).collect(),
            value,
            requires_grad,
        ))
    }

    fn dims2_of(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        let shape = self.nodes[v.0].value.shape();
        match shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::BadRank {
                op,
                expected: 2,
                shape: shape.to_vec(),
            }),
        }
    }

    // ---- forward ops -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2_of("matmul", a)?;
        let (k2, _n) = self.dims2_of("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: self.nodes[b.0].value.shape().to_vec(),
            });
        }
        let value = kernels::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push("matmul", Op::Matmul, vec![a, b], value)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        self.dims2_of("transpose", x)?;
        let value = self.nodes[x.0].value.transposed()?;
        self.push("transpose", Op::Transpose, vec![x], value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut value = av.clone();
        value.add_assign(bv);
        self.push("add", Op::Add, vec![a, b], value)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2_of("add_bias", x)?;
        let bshape = self.nodes[bias.0].value.shape().to_vec();
        if bshape != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: vec![r, c],
                rhs: bshape,
            });
        }
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for (j, &b) in bv.data().iter().enumerate() {
                data.push(xv.data()[i * c + j] + b);
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        self.push("add_bias", Op::AddBias, vec![x, bias], value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("mul", Op::Mul, vec![a, b], value)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, TensorError> {
        let value = self.nodes[x.0].value.map(|v| v * c);
        self.push("scale", Op::Scale(c), vec![x], value)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::BadRank {
                op: "concat_rows",
                expected: 2,
                shape: vec![],
            });
        }
        let (_, c) = self.dims2_of("concat_rows", parts[0])?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims2_of("concat_rows", p)?;
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, c],
                    rhs: vec![pr, pc],
                });
            }
            rows += pr;
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        self.push("concat_rows", Op::ConcatRows, parts.to_vec(), value)
    }

    /// Concatenation along the last dimension of rank-2 operands.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::BadRank {
                op: "concat_cols",
                expected: 2,
                shape: vec![],
            });
        }
        let (r, _) = self.dims2_of("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2_of("concat_cols", p)?;
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![r],
                    rhs: vec![pr, pc],
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = &self.nodes[p.0].value;
                data.extend_from_slice(&pv.data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        self.push("concat_cols", Op::ConcatCols, parts.to_vec(), value)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims2_of("slice_rows", x)?;
        if start + len > r {
            return Err(TensorError::ShapeMismatch {
                op: "slice_rows",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let data = self.nodes[x.0].value.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        self.push("slice_rows", Op::SliceRows { start }, vec![x], value)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims2_of("slice_cols", x)?;
        if start + len > c {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let xv = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.data()[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        self.push("slice_cols", Op::SliceCols { start }, vec![x], value)
    }

    /// Softmax over each row of `x + mask`. Masked entries (`-inf` in the
    /// additive mask) receive exactly zero weight; a row with no finite
    /// entry is an error.
    pub fn row_softmax(
        &mut self,
        x: Var,
        mask: Option<Arc<Tensor<T>>>,
    ) -> Result<Var, TensorError> {
        let (r, c) = self.dims2_of("row_softmax", x)?;
        if let Some(m) = &mask {
            if m.shape() != [r, c] {
                return Err(TensorError::ShapeMismatch {
                    op: "row_softmax",
                    lhs: vec![r, c],
                    rhs: m.shape().to_vec(),
                });
            }
        }
        let xv = &self.nodes[x.0].value;
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            let row = xv.row(i);
            let masked = |j: usize| match &mask {
                Some(m) => row[j] + m.row(i)[j],
                None => row[j],
            };
            let mut max = T::neg_infinity();
            for j in 0..c {
                let z = masked(j);
                if z > max {
                    max = z;
                }
            }
            if !max.is_finite() {
                return Err(TensorError::FullyMaskedRow { row: i });
            }
            let mut denom = T::zero();
            for j in 0..c {
                let z = masked(j);
                let e = if z.is_finite() {
                    (z - max).exp()
                } else {
                    T::zero()
                };
                data[i * c + j] = e;
                denom += e;
            }
            for v in &mut data[i * c..(i + 1) * c] {
                *v /= denom;
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        self.push("row_softmax", Op::RowSoftmax, vec![x], value)
    }

    /// Per-row layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2_of("layer_norm", x)?;
        for v in [gain, bias] {
            let shape = self.nodes[v.0].value.shape();
            if shape != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![r, c],
                    rhs: shape.to_vec(),
                });
            }
        }
        let eps = T::of(1e-5);
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        let inv_c = T::one() / T::of(c as f64);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = xv.row(i);
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_c;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_c;
            let inv_std = T::one() / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                data.push((v - mean) * inv_std * gv.data()[j] + bv.data()[j]);
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        self.push("layer_norm", Op::LayerNorm { eps }, vec![x, gain, bias], value)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var, TensorError> {
        match kind {
            Activation::Gelu => self.gelu(x),
            Activation::Relu => self.relu(x),
        }
    }

    /// Tanh-form GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.nodes[x.0].value.map(gelu_value);
        self.push("gelu", Op::Gelu, vec![x], value)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.nodes[x.0].value.map(|v| v.max(T::zero()));
        self.push("relu", Op::Relu, vec![x], value)
    }

    /// Gathers `ids` rows of the `[vocab, d]` table into `[ids.len(), d]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (vocab, d) = self.dims2_of("embedding_lookup", table)?;
        let tv = &self.nodes[table.0].value;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IdOutOfRange { id, vocab });
            }
            data.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            "embedding_lookup",
            Op::EmbeddingLookup {
                ids: Arc::new(ids.to_vec()),
            },
            vec![table],
            value,
        )
    }

    /// Inverted dropout: during training, each element survives with
    /// probability `1-rate` and survivors are scaled by `1/(1-rate)`.
    /// With `rate == 0` or `training == false` this is the identity and
    /// consumes no randomness.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut RngState,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::BadDropoutRate { rate });
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let n = self.nodes[x.0].value.numel();
        let keep: Vec<bool> = (0..n).map(|_| rng.unit() >= rate).collect();
        let scale = T::of(1.0 / (1.0 - rate));
        let xv = &self.nodes[x.0].value;
        let data = xv
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { T::zero() })
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(
            "dropout",
            Op::Dropout {
                keep: Arc::new(keep),
                scale,
            },
            vec![x],
            value,
        )
    }

    /// Mean over mask-true positions of each batch row. `x` is
    /// `[batch*width, d]`; `mask` flags real (non-padding) positions.
    pub fn mean_pool_masked(
        &mut self,
        x: Var,
        mask: &Arc<Vec<bool>>,
        width: usize,
    ) -> Result<Var, TensorError> {
        let (rows, d) = self.dims2_of("mean_pool_masked", x)?;
        if width == 0 || rows % width != 0 || mask.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "mean_pool_masked",
                lhs: vec![rows, d],
                rhs: vec![mask.len(), width],
            });
        }
        let batch = rows / width;
        let xv = &self.nodes[x.0].value;
        let mut counts = Vec::with_capacity(batch);
        let mut data = vec![T::zero(); batch * d];
        for b in 0..batch {
            let mut count = 0usize;
            for p in 0..width {
                let row = b * width + p;
                if mask[row] {
                    count += 1;
                    let out = &mut data[b * d..(b + 1) * d];
                    for (o, &v) in out.iter_mut().zip(xv.row(row)) {
                        *o += v;
                    }
                }
            }
            if count == 0 {
                return Err(TensorError::EmptyPoolGroup { row: b });
            }
            let inv = T::one() / T::of(count as f64);
            for v in &mut data[b * d..(b + 1) * d] {
                *v *= inv;
            }
            counts.push(count);
        }
        let value = Tensor::new(vec![batch, d], data)?;
        self.push(
            "mean_pool_masked",
            Op::MeanPoolMasked {
                width,
                mask: Arc::clone(mask),
                counts,
            },
            vec![x],
            value,
        )
    }

    /// Mean cross-entropy of `targets` under the row softmax of `logits`,
    /// computed with log-sum-exp; returns a scalar (`[1]`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.dims2_of("cross_entropy", logits)?;
        if targets.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![r, c],
                rhs: vec![targets.len()],
            });
        }
        let xv = &self.nodes[logits.0].value;
        let mut probs = vec![T::zero(); r * c];
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TensorError::ClassOutOfRange {
                    class: t,
                    n_classes: c,
                });
            }
            let row = xv.row(i);
            let mut max = row[0];
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut denom = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * c + j] = e;
                denom += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= denom;
            }
            let lse = max + denom.ln();
            total += lse - row[t];
        }
        let mean = total / T::of(r as f64);
        let probs = Tensor::new(vec![r, c], probs)?;
        self.push(
            "cross_entropy",
            Op::CrossEntropy {
                targets: targets.to_vec(),
                probs,
            },
            vec![logits],
            Tensor::scalar(mean),
        )
    }

    /// Sum of all elements, as a scalar (`[1]`).
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let mut acc = T::zero();
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        self.push("sum", Op::Sum, vec![x], Tensor::scalar(acc))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates gradients of the scalar `loss` into every node that
    /// (transitively) depends on a `param` leaf. Nodes outside the loss's
    /// ancestry keep no gradient; query them with [`Graph::grad_or_zeros`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lshape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lshape.to_vec(),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::filled(lshape.to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &grad)?;
            self.grads[idx] = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, node: usize, delta: Tensor<T>) {
        if !self.nodes[node].requires_grad {
            return;
        }
        match &mut self.grads[node] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, idx: usize, grad: &Tensor<T>) -> Result<(), TensorError> {
        let parents = self.nodes[idx].parents.clone();
        // Parent deltas are computed under a shared borrow of the tape,
        // then accumulated once the borrow ends.
        let mut deltas: Vec<(usize, Tensor<T>)> = Vec::with_capacity(parents.len());
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul => {
                let a = &self.nodes[parents[0]].value;
                let b = &self.nodes[parents[1]].value;
                deltas.push((parents[0], kernels::matmul_nt(grad, b)));
                deltas.push((parents[1], kernels::matmul_tn(a, grad)));
            }
            Op::Transpose => {
                deltas.push((parents[0], grad.transposed()?));
            }
            Op::Add => {
                deltas.push((parents[0], grad.clone()));
                deltas.push((parents[1], grad.clone()));
            }
            Op::AddBias => {
                deltas.push((parents[0], grad.clone()));
                deltas.push((parents[1], kernels::column_sum(grad)));
            }
            Op::Mul => {
                let a = &self.nodes[parents[0]].value;
                let b = &self.nodes[parents[1]].value;
                let da = Tensor::new(
                    grad.shape().to_vec(),
                    grad.data()
                        .iter()
                        .zip(b.data())
                        .map(|(&g, &v)| g * v)
                        .collect(),
                )?;
                let db = Tensor::new(
                    grad.shape().to_vec(),
                    grad.data()
                        .iter()
                        .zip(a.data())
                        .map(|(&g, &v)| g * v)
                        .collect(),
                )?;
                deltas.push((parents[0], da));
                deltas.push((parents[1], db));
            }
            Op::Scale(c) => {
                let c = *c;
                deltas.push((parents[0], grad.map(|g| g * c)));
            }
            Op::ConcatRows => {
                let c = grad.shape()[1];
                let mut offset = 0;
                for &p in &parents {
                    let rows = self.nodes[p].value.shape()[0];
                    let part = Tensor::new(
                        vec![rows, c],
                        grad.data()[offset * c..(offset + rows) * c].to_vec(),
                    )?;
                    offset += rows;
                    deltas.push((p, part));
                }
            }
            Op::ConcatCols => {
                let r = grad.shape()[0];
                let total = grad.shape()[1];
                let mut offset = 0;
                for &p in &parents {
                    let w = self.nodes[p].value.shape()[1];
                    let mut data = Vec::with_capacity(r * w);
                    for i in 0..r {
                        data.extend_from_slice(
                            &grad.data()[i * total + offset..i * total + offset + w],
                        );
                    }
                    offset += w;
                    deltas.push((p, Tensor::new(vec![r, w], data)?));
                }
            }
            Op::SliceRows { start } => {
                let start = *start;
                let (pr, pc) = self.nodes[parents[0]].value.dims2()?;
                let mut dx = Tensor::zeros(vec![pr, pc]);
                dx.data_mut()[start * pc..start * pc + grad.numel()].copy_from_slice(grad.data());
                deltas.push((parents[0], dx));
            }
            Op::SliceCols { start } => {
                let start = *start;
                let (pr, pc) = self.nodes[parents[0]].value.dims2()?;
                let (gr, gc) = grad.dims2()?;
                debug_assert_eq!(gr, pr);
                let mut dx = Tensor::zeros(vec![pr, pc]);
                for i in 0..pr {
                    dx.data_mut()[i * pc + start..i * pc + start + gc]
                        .copy_from_slice(grad.row(i));
                }
                deltas.push((parents[0], dx));
            }
            Op::RowSoftmax => {
                let y = &self.nodes[idx].value;
                let (r, c) = y.dims2()?;
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    let yrow = y.row(i);
                    let grow = grad.row(i);
                    let mut dot = T::zero();
                    for (&g, &v) in grow.iter().zip(yrow) {
                        dot += g * v;
                    }
                    for j in 0..c {
                        dx[i * c + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                deltas.push((parents[0], Tensor::new(vec![r, c], dx)?));
            }
            Op::LayerNorm { eps } => {
                let eps = *eps;
                let x = &self.nodes[parents[0]].value;
                let gain = &self.nodes[parents[1]].value;
                let (r, c) = x.dims2()?;
                let inv_c = T::one() / T::of(c as f64);
                let mut dx = vec![T::zero(); r * c];
                let mut dgain = vec![T::zero(); c];
                let mut dbias = vec![T::zero(); c];
                for i in 0..r {
                    let row = x.row(i);
                    let grow = grad.row(i);
                    let mut mean = T::zero();
                    for &v in row {
                        mean += v;
                    }
                    mean *= inv_c;
                    let mut var = T::zero();
                    for &v in row {
                        let d = v - mean;
                        var += d * d;
                    }
                    var *= inv_c;
                    let inv_std = T::one() / (var + eps).sqrt();
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = grow[j] * gain.data()[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                        dgain[j] += grow[j] * xhat;
                        dbias[j] += grow[j];
                    }
                    mean_dxhat *= inv_c;
                    mean_dxhat_xhat *= inv_c;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = grow[j] * gain.data()[j];
                        dx[i * c + j] = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_std;
                    }
                }
                deltas.push((parents[0], Tensor::new(vec![r, c], dx)?));
                deltas.push((parents[1], Tensor::new(vec![c], dgain)?));
                deltas.push((parents[2], Tensor::new(vec![c], dbias)?));
            }
            Op::Gelu => {
                let x = &self.nodes[parents[0]].value;
                let data = grad
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| g * gelu_derivative(v))
                    .collect();
                deltas.push((parents[0], Tensor::new(x.shape().to_vec(), data)?));
            }
            Op::Relu => {
                let x = &self.nodes[parents[0]].value;
                let data = grad
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                deltas.push((parents[0], Tensor::new(x.shape().to_vec(), data)?));
            }
            Op::EmbeddingLookup { ids } => {
                let (vocab, d) = self.nodes[parents[0]].value.dims2()?;
                let mut dt = Tensor::zeros(vec![vocab, d]);
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                    for (o, &g) in dst.iter_mut().zip(grad.row(i)) {
                        *o += g;
                    }
                }
                deltas.push((parents[0], dt));
            }
            Op::Dropout { keep, scale } => {
                let scale = *scale;
                let data = grad
                    .data()
                    .iter()
                    .zip(keep.iter())
                    .map(|(&g, &k)| if k { g * scale } else { T::zero() })
                    .collect();
                deltas.push((parents[0], Tensor::new(grad.shape().to_vec(), data)?));
            }
            Op::MeanPoolMasked {
                width,
                mask,
                counts,
            } => {
                let width = *width;
                let (rows, d) = self.nodes[parents[0]].value.dims2()?;
                let mut dx = Tensor::zeros(vec![rows, d]);
                for (b, &count) in counts.iter().enumerate().take(rows / width) {
                    let inv = T::one() / T::of(count as f64);
                    for p in 0..width {
                        let row = b * width + p;
                        if mask[row] {
                            let dst = &mut dx.data_mut()[row * d..(row + 1) * d];
                            for (o, &g) in dst.iter_mut().zip(grad.row(b)) {
                                *o = g * inv;
                            }
                        }
                    }
                }
                deltas.push((parents[0], dx));
            }
            Op::CrossEntropy { targets, probs } => {
                let g = grad.data()[0];
                let (r, c) = probs.dims2()?;
                let scale = g / T::of(r as f64);
                let mut dx = probs.map(|p| p * scale);
                for (i, &t) in targets.iter().enumerate() {
                    dx.data_mut()[i * c + t] -= scale;
                }
                deltas.push((parents[0], dx));
            }
            Op::Sum => {
                let g = grad.data()[0];
                let shape = self.nodes[parents[0]].value.shape().to_vec();
                deltas.push((parents[0], Tensor::filled(shape, g)));
            }
        }
        for (node, delta) in deltas {
            self.accumulate(node, delta);
        }
        Ok(())
    }
}

fn gelu_value<T: Scalar>(x: T) -> T {
    let c = T::of(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::of(0.797_884_560_802_865_4);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}
