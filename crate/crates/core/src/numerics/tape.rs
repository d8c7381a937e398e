use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

use super::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-5;

/// One recorded primitive application. Saved fields are whatever the
/// backward rule needs beyond the input values themselves.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    MatMul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Embedding { table: NodeId, ids: Vec<u32> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Softmax { x: NodeId },
    LogSoftmax { x: NodeId },
    CausalSoftmax { x: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    PRelu { x: NodeId, slope: NodeId },
    Gelu { x: NodeId },
    Dropout { x: NodeId, mask: Vec<f64> },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize, len: usize },
    Sum { x: NodeId },
    Mean { x: NodeId },
    SoftmaxXent { logits: NodeId, targets: Vec<u32>, mask: Vec<bool> },
    SigmoidBce { logits: NodeId, labels: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Topologically ordered record of primitive applications.
///
/// Ops execute eagerly and record themselves; `backward` walks the record in
/// reverse. Evaluation is a pure function of the inputs and the dropout seed:
/// rebuilding the same graph with the same seed yields bitwise-identical
/// values.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    rng: ChaCha8Rng,
    train: bool,
}

impl Tape {
    /// Inference-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Tape::with_seed(0, false)
    }

    /// `seed` drives every dropout mask drawn on this tape.
    pub fn with_seed(seed: u64, train: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            train,
        }
    }

    pub fn train_mode(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient of the last backward pass, if the node participated.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            needs_grad: t.grad_required(),
        })
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        self.push(Node {
            op: Op::Leaf,
            shape,
            value: data,
            needs_grad: false,
        })
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn rows_cols(&self, id: NodeId) -> (usize, usize) {
        let shape = &self.nodes[id.0].shape;
        match shape.len() {
            0 => (1, 1),
            1 => (1, shape[0]),
            _ => {
                let cols = *shape.last().unwrap();
                (self.nodes[id.0].value.len() / cols, cols)
            }
        }
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let shape = &self.nodes[id.0].shape;
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: shape.clone(),
                rhs: vec![],
            });
        }
        Ok((shape[0], shape[1]))
    }

    // ── primitives ──────────────────────────────────────────────────

    /// x[r,k] @ w[k,n] + b[n]
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, k) = self.dims2(x, "affine")?;
        let (wk, n) = self.dims2(w, "affine")?;
        if k != wk {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if self.nodes[b.0].value.len() != n {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: self.shape(w).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; r * n];
        mat_mul_into(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            r,
            k,
            n,
            &mut out,
        );
        let bias = &self.nodes[b.0].value;
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(bias.iter()) {
                *o += bv;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Node {
            op: Op::Affine { x, w, b },
            shape: vec![r, n],
            value: out,
            needs_grad: needs,
        }))
    }

    /// a[m,k] @ b[k,n]
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (bk, n) = self.dims2(b, "matmul")?;
        if k != bk {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        mat_mul_into(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            m,
            k,
            n,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Node {
            op: Op::MatMul { a, b },
            shape: vec![m, n],
            value: out,
            needs_grad: needs,
        }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = &self.nodes[x.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Node {
            op: Op::Transpose { x },
            shape: vec![c, r],
            value: out,
            needs_grad: needs,
        }))
    }

    /// Row lookup: out[i,:] = table[ids[i],:]
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (v, d) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::InvalidArgument("embedding of empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| (i as usize) >= v) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: v });
        }
        let src = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            let r = i as usize * d;
            out.extend_from_slice(&src[r..r + d]);
        }
        let needs = self.needs(table);
        Ok(self.push(Node {
            op: Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            shape: vec![ids.len(), d],
            value: out,
            needs_grad: needs,
        }))
    }

    /// Row-wise layer normalization over the last dimension, then gain/bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x);
        if self.nodes[gain.0].value.len() != c || self.nodes[bias.0].value.len() != c {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let be = &self.nodes[bias.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv * g[j] + be[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Node {
            op: Op::LayerNorm { x, gain, bias },
            shape,
            value: out,
            needs_grad: needs,
        }))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(&xv[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Node {
            op: Op::Softmax { x },
            shape,
            value: out,
            needs_grad: needs,
        }))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Node {
            op: Op::LogSoftmax { x },
            shape,
            value: out,
            needs_grad: needs,
        }))
    }

    /// Softmax over a square score matrix where row i only attends to
    /// columns 0..=i; masked columns come out exactly zero.
    pub fn causal_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "causal_softmax")?;
        if r != c {
            return Err(Error::ShapeMismatch {
                op: "causal_softmax",
                lhs: vec![r, c],
                rhs: vec![r, r],
            });
        }
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..i * c + i + 1];
            softmax_row(row, &mut out[i * c..i * c + i + 1]);
        }
        let needs = self.needs(x);
        Ok(self.push(Node {
            op: Op::CausalSoftmax { x },
            shape: vec![r, c],
            value: out,
            needs_grad: needs,
        }))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.iter().map(|&v| sigmoid(v)).collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(Node {
            op: Op::Sigmoid { x },
            shape,
            value,
            needs_grad: needs,
        })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.iter().map(|&v| v.tanh()).collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(Node {
            op: Op::Tanh { x },
            shape,
            value,
            needs_grad: needs,
        })
    }

    /// PReLU with a single learnable slope (a [1] tensor).
    pub fn prelu(&mut self, x: NodeId, slope: NodeId) -> Result<NodeId> {
        if self.nodes[slope.0].value.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "prelu",
                lhs: self.shape(slope).to_vec(),
                rhs: vec![1],
            });
        }
        let a = self.nodes[slope.0].value[0];
        let value = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| if v > 0.0 { v } else { a * v })
            .collect();
        let needs = self.needs(x) || self.needs(slope);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Node {
            op: Op::PRelu { x, slope },
            shape,
            value,
            needs_grad: needs,
        }))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.iter().map(|&v| gelu(v)).collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(Node {
            op: Op::Gelu { x },
            shape,
            value,
            needs_grad: needs,
        })
    }

    /// Inverted dropout: at train time kept entries scale by 1/(1-p), at
    /// eval time (or p = 0) this is exactly the identity.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {p} outside [0,1)"
            )));
        }
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = if self.train && p > 0.0 {
            let keep = 1.0 / (1.0 - p);
            (0..n)
                .map(|_| {
                    if self.rng.random::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                })
                .collect()
        } else {
            vec![1.0; n]
        };
        let value = self.nodes[x.0]
            .value
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| v * m)
            .collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Node {
            op: Op::Dropout { x, mask },
            shape,
            value,
            needs_grad: needs,
        }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Node {
            op: Op::Add { a, b },
            shape,
            value,
            needs_grad: needs,
        }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Node {
            op: Op::Mul { a, b },
            shape,
            value,
            needs_grad: needs,
        }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.nodes[x.0].value.iter().map(|&v| v * c).collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(Node {
            op: Op::Scale { x, c },
            shape,
            value,
            needs_grad: needs,
        })
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero parts".into()));
        }
        let ndim = self.shape(parts[0]).len();
        if axis >= ndim {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of range for {ndim}-d tensors"
            )));
        }
        for &p in parts {
            let s = self.shape(p);
            if s.len() != ndim
                || s.iter()
                    .zip(self.shape(parts[0]).iter())
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let mut shape = self.shape(parts[0]).to_vec();
        shape[axis] = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let value = if ndim == 1 || axis == 0 {
            let mut v = Vec::new();
            for &p in parts {
                v.extend_from_slice(&self.nodes[p.0].value);
            }
            v
        } else {
            // axis == 1 on 2-d parts: interleave rows
            let rows = shape[0];
            let cols = shape[1];
            let mut v = vec![0.0; rows * cols];
            for i in 0..rows {
                let mut off = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    let src = &self.nodes[p.0].value[i * pc..(i + 1) * pc];
                    v[i * cols + off..i * cols + off + pc].copy_from_slice(src);
                    off += pc;
                }
            }
            v
        };
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Node {
            op: Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            shape,
            value,
            needs_grad: needs,
        }))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "slice [{start}, {}) on axis {axis} of shape {shape:?}",
                start + len
            )));
        }
        let value;
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        if shape.len() == 1 || axis == 0 {
            let row: usize = shape.iter().skip(1).product();
            let row = row.max(1);
            value = self.nodes[x.0].value[start * row..(start + len) * row].to_vec();
        } else {
            let rows = shape[0];
            let cols = shape[1];
            let mut v = Vec::with_capacity(rows * len);
            for i in 0..rows {
                v.extend_from_slice(&self.nodes[x.0].value[i * cols + start..i * cols + start + len]);
            }
            value = v;
        }
        let needs = self.needs(x);
        Ok(self.push(Node {
            op: Op::Slice {
                x,
                axis,
                start,
                len,
            },
            shape: out_shape,
            value,
            needs_grad: needs,
        }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = vec![self.nodes[x.0].value.iter().sum::<f64>()];
        let needs = self.needs(x);
        self.push(Node {
            op: Op::Sum { x },
            shape: vec![1],
            value,
            needs_grad: needs,
        })
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].value.len() as f64;
        let value = vec![self.nodes[x.0].value.iter().sum::<f64>() / n];
        let needs = self.needs(x);
        self.push(Node {
            op: Op::Mean { x },
            shape: vec![1],
            value,
            needs_grad: needs,
        })
    }

    /// Mean next-token cross entropy over unmasked rows.
    /// logits [r, V], one target id per row; `mask[i]` selects rows counted.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<NodeId> {
        let (r, v) = self.dims2(logits, "softmax_cross_entropy")?;
        if targets.len() != r || mask.len() != r {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: vec![r, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| (t as usize) >= v) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: v });
        }
        let active = mask.iter().filter(|&&m| m).count();
        if active == 0 {
            return Err(Error::InvalidArgument(
                "softmax_cross_entropy with all rows masked".into(),
            ));
        }
        let xv = &self.nodes[logits.0].value;
        let mut total = 0.0;
        for i in 0..r {
            if !mask[i] {
                continue;
            }
            let row = &xv[i * v..(i + 1) * v];
            total += log_sum_exp(row) - row[targets[i] as usize];
        }
        let value = vec![total / active as f64];
        let needs = self.needs(logits);
        Ok(self.push(Node {
            op: Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            shape: vec![1],
            value,
            needs_grad: needs,
        }))
    }

    /// Mean element-wise binary cross entropy from logits, computed in
    /// log-space so large logits cannot overflow.
    pub fn sigmoid_bce(&mut self, logits: NodeId, labels: &[f64]) -> Result<NodeId> {
        let n = self.nodes[logits.0].value.len();
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "sigmoid_bce",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let xv = &self.nodes[logits.0].value;
        let mut total = 0.0;
        for (&x, &y) in xv.iter().zip(labels.iter()) {
            // max(x,0) - x*y + ln(1 + e^{-|x|})
            total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        }
        let value = vec![total / n as f64];
        let needs = self.needs(logits);
        Ok(self.push(Node {
            op: Op::SigmoidBce {
                logits,
                labels: labels.to_vec(),
            },
            shape: vec![1],
            value,
            needs_grad: needs,
        }))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Gradients accumulate for every
    /// node on a path from a `requires_grad` leaf to the loss.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "loss node must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let dy = self.grads[idx].take().unwrap();
            self.step_backward(idx, &dy);
            self.grads[idx] = Some(dy);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(delta.iter()) {
                    *gi += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn accumulate_at(&mut self, id: NodeId, offset: usize, delta: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let n = self.nodes[id.0].value.len();
        let slot = &mut self.grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; n]);
        }
        let g = slot.as_mut().unwrap();
        for (gi, &d) in g[offset..offset + delta.len()].iter_mut().zip(delta.iter()) {
            *gi += d;
        }
    }

    fn step_backward(&mut self, idx: usize, dy: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (r, k) = {
                    let s = self.shape(x);
                    (s[0], s[1])
                };
                let n = self.shape(w)[1];
                if self.needs(x) {
                    let mut dx = vec![0.0; r * k];
                    mat_mul_bt_into(dy, &self.nodes[w.0].value, r, n, k, &mut dx);
                    self.accumulate(x, &dx);
                }
                if self.needs(w) {
                    let mut dw = vec![0.0; k * n];
                    mat_mul_at_into(&self.nodes[x.0].value, dy, r, k, n, &mut dw);
                    self.accumulate(w, &dw);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; n];
                    for row in dy.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row.iter()) {
                            *d += v;
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = {
                    let s = self.shape(a);
                    (s[0], s[1])
                };
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    mat_mul_bt_into(dy, &self.nodes[b.0].value, m, n, k, &mut da);
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    mat_mul_at_into(&self.nodes[a.0].value, dy, m, k, n, &mut db);
                    self.accumulate(b, &db);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = {
                    let s = self.shape(x);
                    (s[0], s[1])
                };
                // dy has shape [c, r]
                let mut dx = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        dx[j * c + i] = dy[i * r + j];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Embedding { table, ids } => {
                if self.needs(table) {
                    let d = self.shape(table)[1];
                    for (i, &id) in ids.iter().enumerate() {
                        let delta = &dy[i * d..(i + 1) * d];
                        self.accumulate_at(table, id as usize * d, delta);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let (r, c) = self.rows_cols(x);
                let xv = self.nodes[x.0].value.clone();
                let g = self.nodes[gain.0].value.clone();
                let mut dx = vec![0.0; r * c];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let dyr = &dy[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = dyr.iter().zip(g.iter()).map(|(&d, &gv)| d * gv).collect();
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat
                        .iter()
                        .zip(xhat.iter())
                        .map(|(&a, &b)| a * b)
                        .sum::<f64>()
                        / c as f64;
                    for j in 0..c {
                        dx[i * c + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                        dg[j] += dyr[j] * xhat[j];
                        db[j] += dyr[j];
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gain, &dg);
                self.accumulate(bias, &db);
            }
            Op::Softmax { x } => {
                let (r, c) = self.rows_cols(x);
                let p = &self.nodes[idx].value;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let pr = &p[i * c..(i + 1) * c];
                    let dyr = &dy[i * c..(i + 1) * c];
                    let dot: f64 = pr.iter().zip(dyr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = pr[j] * (dyr[j] - dot);
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::LogSoftmax { x } => {
                let (r, c) = self.rows_cols(x);
                let logp = &self.nodes[idx].value;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let lr = &logp[i * c..(i + 1) * c];
                    let dyr = &dy[i * c..(i + 1) * c];
                    let total: f64 = dyr.iter().sum();
                    for j in 0..c {
                        dx[i * c + j] = dyr[j] - lr[j].exp() * total;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::CausalSoftmax { x } => {
                let (r, c) = self.rows_cols(x);
                let p = &self.nodes[idx].value;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let pr = &p[i * c..i * c + i + 1];
                    let dyr = &dy[i * c..i * c + i + 1];
                    let dot: f64 = pr.iter().zip(dyr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..=i {
                        dx[i * c + j] = pr[j] * (dyr[j] - dot);
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[idx].value;
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(y.iter())
                    .map(|(&d, &s)| d * s * (1.0 - s))
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Tanh { x } => {
                let y = &self.nodes[idx].value;
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(y.iter())
                    .map(|(&d, &t)| d * (1.0 - t * t))
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::PRelu { x, slope } => {
                let a = self.nodes[slope.0].value[0];
                let xv = self.nodes[x.0].value.clone();
                if self.needs(x) {
                    let dx: Vec<f64> = dy
                        .iter()
                        .zip(xv.iter())
                        .map(|(&d, &v)| if v > 0.0 { d } else { d * a })
                        .collect();
                    self.accumulate(x, &dx);
                }
                if self.needs(slope) {
                    let da: f64 = dy
                        .iter()
                        .zip(xv.iter())
                        .map(|(&d, &v)| if v > 0.0 { 0.0 } else { d * v })
                        .sum();
                    self.accumulate(slope, &[da]);
                }
            }
            Op::Gelu { x } => {
                let xv = &self.nodes[x.0].value;
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(xv.iter())
                    .map(|(&d, &v)| d * gelu_grad(v))
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<f64> = dy.iter().zip(mask.iter()).map(|(&d, &m)| d * m).collect();
                self.accumulate(x, &dx);
            }
            Op::Add { a, b } => {
                self.accumulate(a, dy);
                self.accumulate(b, dy);
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    let bv = &self.nodes[b.0].value;
                    let da: Vec<f64> = dy.iter().zip(bv.iter()).map(|(&d, &v)| d * v).collect();
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let av = &self.nodes[a.0].value;
                    let db: Vec<f64> = dy.iter().zip(av.iter()).map(|(&d, &v)| d * v).collect();
                    self.accumulate(b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = dy.iter().map(|&d| d * c).collect();
                self.accumulate(x, &dx);
            }
            Op::Concat { parts, axis } => {
                let ndim = self.shape(parts[0]).len();
                if ndim == 1 || axis == 0 {
                    let mut off = 0;
                    for &p in &parts {
                        let n = self.nodes[p.0].value.len();
                        let seg = dy[off..off + n].to_vec();
                        self.accumulate(p, &seg);
                        off += n;
                    }
                } else {
                    let rows = self.shape(NodeId(idx))[0];
                    let cols = self.shape(NodeId(idx))[1];
                    let mut off = 0;
                    for &p in &parts {
                        let pc = self.shape(p)[1];
                        let mut dp = vec![0.0; rows * pc];
                        for i in 0..rows {
                            dp[i * pc..(i + 1) * pc]
                                .copy_from_slice(&dy[i * cols + off..i * cols + off + pc]);
                        }
                        self.accumulate(p, &dp);
                        off += pc;
                    }
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                if !self.needs(x) {
                    return;
                }
                let shape = self.shape(x).to_vec();
                let mut dx = vec![0.0; self.nodes[x.0].value.len()];
                if shape.len() == 1 || axis == 0 {
                    let row: usize = shape.iter().skip(1).product();
                    let row = row.max(1);
                    dx[start * row..(start + len) * row].copy_from_slice(dy);
                } else {
                    let rows = shape[0];
                    let cols = shape[1];
                    for i in 0..rows {
                        dx[i * cols + start..i * cols + start + len]
                            .copy_from_slice(&dy[i * len..(i + 1) * len]);
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Sum { x } => {
                let n = self.nodes[x.0].value.len();
                let dx = vec![dy[0]; n];
                self.accumulate(x, &dx);
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].value.len();
                let dx = vec![dy[0] / n as f64; n];
                self.accumulate(x, &dx);
            }
            Op::SoftmaxXent {
                logits,
                targets,
                mask,
            } => {
                if !self.needs(logits) {
                    return;
                }
                let (r, v) = {
                    let s = self.shape(logits);
                    (s[0], s[1])
                };
                let active = mask.iter().filter(|&&m| m).count() as f64;
                let scale = dy[0] / active;
                let xv = self.nodes[logits.0].value.clone();
                let mut dx = vec![0.0; r * v];
                let mut probs = vec![0.0; v];
                for i in 0..r {
                    if !mask[i] {
                        continue;
                    }
                    softmax_row(&xv[i * v..(i + 1) * v], &mut probs);
                    for j in 0..v {
                        dx[i * v + j] = probs[j] * scale;
                    }
                    dx[i * v + targets[i] as usize] -= scale;
                }
                self.accumulate(logits, &dx);
            }
            Op::SigmoidBce { logits, labels } => {
                if !self.needs(logits) {
                    return;
                }
                let n = labels.len() as f64;
                let xv = self.nodes[logits.0].value.clone();
                let dx: Vec<f64> = xv
                    .iter()
                    .zip(labels.iter())
                    .map(|(&x, &y)| (sigmoid(x) - y) * dy[0] / n)
                    .collect();
                self.accumulate(logits, &dx);
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

// ── kernels ─────────────────────────────────────────────────────────

/// out[m,n] += a[m,k] @ b[k,n]
fn mat_mul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in or.iter_mut().zip(br.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out[k,n] += a^T[k,m] @ dy[m,n] where a is [m,k]
fn mat_mul_at_into(a: &[f64], dy: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let dr = &dy[i * n..(i + 1) * n];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let or = &mut out[p * n..(p + 1) * n];
            for (o, &dv) in or.iter_mut().zip(dr.iter()) {
                *o += av * dv;
            }
        }
    }
}

/// out[m,k] += dy[m,n] @ b^T[n,k] where b is [k,n]
fn mat_mul_bt_into(dy: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let dr = &dy[i * n..(i + 1) * n];
        let or = &mut out[i * k..(i + 1) * k];
        for (p, o) in or.iter_mut().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&dv, &bv) in dr.iter().zip(br.iter()) {
                s += dv * bv;
            }
            *o += s;
        }
    }
}

/// Max-subtracted softmax of one row.
fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// tanh form of GELU, as used by GPT-style feed-forward blocks
const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
