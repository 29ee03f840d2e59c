use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        dims: (usize, usize, usize, usize),
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Reshape(Var),
    Transpose {
        x: Var,
        m: usize,
        n: usize,
    },
    ConcatLast(Vec<Var>),
    SliceLast {
        x: Var,
        offset: usize,
        width: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::Reshape(..) => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::ConcatLast(..) => "concat_last",
            Op::SliceLast { .. } => "slice_last",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Dropout { .. } => "dropout",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BceLogits { .. } => "bce_with_logits",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Reshape(x)
            | Op::Transpose { x, .. }
            | Op::SliceLast { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Softmax(x)
            | Op::Gelu(x)
            | Op::Dropout { x, .. }
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::ConcatLast(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } | Op::BceLogits { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape. Nodes are created in topological order,
/// so reverse insertion order is a valid backward schedule.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Registers a leaf that is never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`.
    /// Leading dims must be identical; there is no broadcasting.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let dims = kernels::matmul_dims(self.shape(a), self.shape(b))?;
        let (batch, m, k, n) = dims;
        let data = kernels::bmm(
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            batch,
            m,
            k,
            n,
        );
        let mut shape = self.shape(a)[..self.shape(a).len() - 1].to_vec();
        shape.push(n);
        let t = Tensor::new(&shape, data)?;
        self.push(t, Op::MatMul { a, b, dims })
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    /// Adds a `[cols]` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.shape(bias) != [cols] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match last dim {cols}",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_exact_mut(cols) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        self.push(t, Op::AddBias(x, bias))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push(t, Op::Reshape(x))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let r = t.rank();
        let (m, n) = (t.shape()[r - 1], t.shape()[r - 2]);
        self.push(t, Op::Transpose { x, m, n })
    }

    /// Concatenates along the last dimension; all other dims must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Dimension(format!(
                    "concat_last: leading dims {:?} vs {lead:?}",
                    s
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(&shape, data)?;
        self.push(t, Op::ConcatLast(xs.to_vec()))
    }

    /// Takes columns `offset..offset + width` of the last dimension.
    pub fn slice_last(&mut self, x: Var, offset: usize, width: usize) -> Result<Var> {
        let cols = self.value(x).cols();
        if width == 0 || offset + width > cols {
            return Err(Error::Dimension(format!(
                "slice {offset}..{} out of range for last dim {cols}",
                offset + width
            )));
        }
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(cols)
            .flat_map(|r| r[offset..offset + width].iter().copied())
            .collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = width;
        let t = Tensor::new(&shape, data)?;
        self.push(t, Op::SliceLast { x, offset, width })
    }

    /// Splits the last dimension into equal parts.
    pub fn split_last(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let cols = self.value(x).cols();
        if parts == 0 || !cols.is_multiple_of(parts) {
            return Err(Error::Dimension(format!(
                "cannot split last dim {cols} into {parts} parts"
            )));
        }
        let w = cols / parts;
        (0..parts).map(|i| self.slice_last(x, i * w, w)).collect()
    }

    /// Concatenates along the first dimension.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            if self.shape(x)[1..] != tail[..] {
                return Err(Error::Dimension(format!(
                    "concat_rows: trailing dims {:?} vs {tail:?}",
                    &self.shape(x)[1..]
                )));
            }
            lead += self.shape(x)[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let t = Tensor::new(&shape, data)?;
        self.push(t, Op::ConcatRows(xs.to_vec()))
    }

    /// Selects entries along the first dimension; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.shape(x)[0];
        if idx.is_empty() {
            return Err(Error::Contract("gather with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Dimension(format!(
                "row index {bad} out of range {n}"
            )));
        }
        let stride = self.value(x).numel() / n;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            data.extend_from_slice(&src[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[0] = idx.len();
        let t = Tensor::new(&shape, data)?;
        self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        let data = kernels::softmax_rows(self.value(x).data(), cols);
        let t = Tensor::new(self.shape(x), data)?;
        self.push(t, Op::Softmax(x))
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::Dimension(format!(
                "layer_norm affine params must be [{cols}]"
            )));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let src = self.value(x).data();
        let rows = src.len() / cols;
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..cols {
                let h = (row[j] - mean) * rs;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(kernels::gelu);
        self.push(t, Op::Gelu(x))
    }

    /// Inverted dropout with a mask drawn from `seed`; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout rate {p} not in [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| {
                if p > 0.0 && rng.random::<f64>() < p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        self.push(t, Op::Dropout { x, mask })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / v.numel() as f64);
        self.push(t, Op::Mean(x))
    }

    /// Mean softmax cross-entropy of `[rows, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let classes = self.value(logits).cols();
        let rows = self.value(logits).rows();
        if labels.len() != rows {
            return Err(Error::Dimension(format!(
                "{} labels for {rows} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!("label {bad} >= {classes} classes")));
        }
        let probs = kernels::softmax_rows(self.value(logits).data(), classes);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -(probs[r * classes + l].max(f64::MIN_POSITIVE)).ln())
            .sum::<f64>()
            / rows as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean binary cross-entropy on logits against `{0, 1}` targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::Dimension("bce targets shape mismatch".into()));
        }
        let z = self.value(logits).data();
        let n = z.len() as f64;
        let loss = z
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.data().to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar `loss`. Every tracked leaf gets a gradient,
    /// zero-filled when it does not influence `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else {
                continue;
            };
            self.backprop_node(node, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), _) => Some(Tensor::new(node.value.shape(), g).expect("grad shape")),
                (None, Op::Leaf) if node.requires_grad => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, dims } => {
                let (batch, m, k, n) = *dims;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA = dC . B^T, dB = A^T . dC
                acc(*a, &|g| {
                    let d = kernels::bmm(gy, false, bv, true, batch, m, n, k);
                    add_into(g, &d);
                });
                acc(*b, &|g| {
                    let d = kernels::bmm(av, true, gy, false, batch, k, m, n);
                    add_into(g, &d);
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|g| add_into(g, gy));
                acc(*b, &|g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &|g| add_into(g, gy));
                acc(*b, &|g| {
                    for (gv, d) in g.iter_mut().zip(gy) {
                        *gv -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * bv[i];
                    }
                });
                acc(*b, &|g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * av[i];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &|g| {
                for (gv, d) in g.iter_mut().zip(gy) {
                    *gv += c * d;
                }
            }),
            Op::AddBias(x, bias) => {
                acc(*x, &|g| add_into(g, gy));
                acc(*bias, &|g| {
                    let cols = g.len();
                    for row in gy.chunks_exact(cols) {
                        add_into(g, row);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &|g| add_into(g, gy)),
            Op::Transpose { x, m, n } => acc(*x, &|g| {
                // output blocks are [n, m]; transposing back gives [m, n]
                let d = kernels::transpose_last(gy, *n, *m);
                add_into(g, &d);
            }),
            Op::ConcatLast(xs) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &x in xs {
                    let w = self.value(x).cols();
                    acc(x, &|g| {
                        for r in 0..rows {
                            let src = &gy[r * total + offset..r * total + offset + w];
                            add_into(&mut g[r * w..(r + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceLast { x, offset, width } => {
                let cols = self.value(*x).cols();
                acc(*x, &|g| {
                    for (r, src) in gy.chunks_exact(*width).enumerate() {
                        add_into(&mut g[r * cols + offset..r * cols + offset + width], src);
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.value(x).numel();
                    acc(x, &|g| add_into(g, &gy[offset..offset + len]));
                    offset += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let stride = node.value.numel() / idx.len();
                acc(*x, &|g| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(
                            &mut g[i * stride..(i + 1) * stride],
                            &gy[k * stride..(k + 1) * stride],
                        );
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = node.value.cols();
                acc(*x, &|g| {
                    for ((gr, yr), dr) in g
                        .chunks_exact_mut(cols)
                        .zip(y.chunks_exact(cols))
                        .zip(gy.chunks_exact(cols))
                    {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = node.value.cols();
                let gam = self.value(*gamma).data();
                acc(*x, &|g| {
                    let nf = cols as f64;
                    for (r, rs) in rstd.iter().enumerate() {
                        let dy = &gy[r * cols..(r + 1) * cols];
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..cols {
                            let dxh = dy[j] * gam[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        for j in 0..cols {
                            let dxh = dy[j] * gam[j];
                            g[r * cols + j] += rs / nf * (nf * dxh - s1 - xh[j] * s2);
                        }
                    }
                });
                acc(*gamma, &|g| {
                    for (dy, xh) in gy.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for j in 0..cols {
                            g[j] += dy[j] * xh[j];
                        }
                    }
                });
                acc(*beta, &|g| {
                    for dy in gy.chunks_exact(cols) {
                        add_into(g, dy);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * kernels::gelu_grad(xv[i]);
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &|g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * mask[i];
                }
            }),
            Op::Sum(x) => acc(*x, &|g| {
                for gv in g.iter_mut() {
                    *gv += gy[0];
                }
            }),
            Op::Mean(x) => acc(*x, &|g| {
                let s = gy[0] / g.len() as f64;
                for gv in g.iter_mut() {
                    *gv += s;
                }
            }),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = self.value(*logits).cols();
                let s = gy[0] / labels.len() as f64;
                acc(*logits, &|g| {
                    for (r, &l) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == l { 1.0 } else { 0.0 };
                            g[r * classes + c] += s * (probs[r * classes + c] - onehot);
                        }
                    }
                });
            }
            Op::BceLogits { logits, targets } => {
                let z = self.value(*logits).data();
                let s = gy[0] / z.len() as f64;
                acc(*logits, &|g| {
                    for i in 0..g.len() {
                        let sig = 1.0 / (1.0 + (-z[i]).exp());
                        g[i] += s * (sig - targets[i]);
                    }
                });
            }
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

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn zero_matmul_annihilates() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(t(&[3, 4], &(0..12).map(|v| v as f64).collect::<Vec<_>>()));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
        let c = g.constant(Tensor::zeros(&[2, 3, 2]));
        let d = g.constant(Tensor::zeros(&[3, 2, 2]));
        assert!(matches!(g.matmul(c, d), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4]));
        let y = g.softmax_lastdim(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.25));
        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        let y = g.softmax_lastdim(x).unwrap();
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);
        assert!(g.value(y).data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.softmax_lastdim(x).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in g.value(y).data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let unused = g.param(Tensor::ones(&[3]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[1e300]));
        assert!(matches!(g.scale(x, 1e300), Err(Error::NonFinite("scale"))));
    }

    #[test]
    fn dropout_is_seeded() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[64]));
        let a = g.dropout(x, 0.25, 7).unwrap();
        let b = g.dropout(x, 0.25, 7).unwrap();
        let c = g.dropout(x, 0.25, 8).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert_ne!(g.value(a), g.value(c));
        assert!(g
            .value(a)
            .data()
            .iter()
            .all(|&v| v == 0.0 || v == 1.0 / 0.75));
    }

    #[test]
    fn gather_repeated_rows_accumulates_grad() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.gather_rows(x, &[1, 1, 0]).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
    }
}
