use std::collections::{BTreeMap, HashMap};

use crate::autodiff::kernels::{gemm, log_sum_exp, softmax_into};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One attention block inside a packed batch: query rows
/// `q_start..q_start+q_len` attend to key/value rows `k_start..k_start+k_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnSpan {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl AttnSpan {
    /// Self-attention over rows `start..start+len`.
    pub fn square(start: usize, len: usize) -> Self {
        AttnSpan {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
        }
    }
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Input,
    Param(String),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
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
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax {
        x: Var,
        temperature: f64,
    },
    Mix {
        inputs: Vec<Var>,
        weights: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spans: Vec<AttnSpan>,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds these gradients into the store's `grad` buffers, frozen parameters
    /// included.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, g) in &self.by_name {
            let p = store.get_mut(name)?;
            for (dst, src) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *dst += src;
            }
        }
        Ok(())
    }
}

/// Eager tape for reverse-mode differentiation. Parameters are borrowed from a
/// [`ParamStore`]; one graph is built per step and consumed by `backward`.
pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node<'a>>,
    params: HashMap<String, Var>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::dim(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    /// A graph with no parameter store, for pure tensor computations.
    pub fn detached() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    /// Smallest `|x|` over the inputs of every recorded ReLU, i.e. how far
    /// the graph is from a kink. `None` when there is no ReLU.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.value(x).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .reduce(f64::min)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), value.shape().iter().product::<usize>());
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a constant input; it receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf node for a stored parameter. Repeated lookups share one node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::Contract("graph has no parameter store".into()))?;
        let t = store.value(name)?;
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Param(name.to_string()),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale(a, c), rg))
    }

    /// `x[r, :] + bias` for every row of a matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, cols) = tx.dims2()?;
        if tb.shape() != [cols] {
            return Err(shape_err("add_bias", tx.shape(), tb.shape()));
        }
        let data = tx
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(a, b)| a + b))
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| v.max(0.0)).collect())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Relu(x), rg))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, cols) = tx.dims2()?;
        if tg.shape() != [cols] || tb.shape() != [cols] {
            return Err(Error::dim(format!(
                "layer_norm: input {:?} needs scale/shift of shape [{cols}], got {:?} and {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            )));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &tx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for c in 0..cols {
                let h = (row[c] - mean) * s;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row gather (embedding lookup): output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, cols) = tt.dims2()?;
        if ids.is_empty() {
            return Err(Error::dim("gather_rows: empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(format!(
                "gather_rows: id {bad} out of range for table {:?}",
                tt.shape()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(tt.row(i));
        }
        let out = Tensor::matrix(ids.len(), cols, data)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenation of matrices along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::dim("concat: no inputs"))?;
        let (r0, c0) = self.value(*first).dims2()?;
        let mut dims = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (r, c) = self.value(v).dims2()?;
            let ok = match axis {
                0 => c == c0,
                1 => r == r0,
                _ => return Err(Error::dim(format!("concat: axis {axis} out of range for matrices"))),
            };
            if !ok {
                return Err(shape_err("concat", self.value(*first).shape(), self.value(v).shape()));
            }
            dims.push((r, c));
        }
        let out = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &v in inputs {
                data.extend_from_slice(self.value(v).data());
            }
            Tensor::matrix(rows, c0, data)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for &v in inputs {
                    data.extend_from_slice(self.value(v).row(r));
                }
            }
            Tensor::matrix(r0, cols, data)?
        };
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2()?;
        let extent = match axis {
            0 => rows,
            1 => cols,
            _ => return Err(Error::dim(format!("slice: axis {axis} out of range for matrices"))),
        };
        if len == 0 || start + len > extent {
            return Err(Error::dim(format!(
                "slice: [{start}, {}) out of range on axis {axis} of {:?}",
                start + len,
                tx.shape()
            )));
        }
        let out = if axis == 0 {
            Tensor::matrix(len, cols, tx.data()[start * cols..(start + len) * cols].to_vec())?
        } else {
            let data = (0..rows)
                .flat_map(|r| tx.row(r)[start..start + len].iter().copied())
                .collect();
            Tensor::matrix(rows, len, data)?
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::Slice { x, axis, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2().map_err(|_| shape_err("matmul", ta.shape(), tb.shape()))?;
        let (k2, n) = tb.dims2().map_err(|_| shape_err("matmul", ta.shape(), tb.shape()))?;
        if k != k2 {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut c);
        let out = Tensor::matrix(m, n, c)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2()?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = tx.data()[i * c + j];
            }
        }
        let out = Tensor::matrix(c, r, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    /// Row-wise softmax of `x / temperature`. Entries with `mask == false` are
    /// exactly zero in the output and receive zero gradient.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64, mask: Option<&[bool]>) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let tx = self.value(x);
        let (rows, cols) = tx.dims2()?;
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(Error::dim(format!(
                    "softmax mask has {} entries for input {:?}",
                    m.len(),
                    tx.shape()
                )));
            }
            if m.chunks(cols).any(|row| !row.iter().any(|&k| k)) {
                return Err(Error::dim("softmax mask leaves a row empty"));
            }
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let rm = mask.map(|m| &m[r * cols..(r + 1) * cols]);
            softmax_into(tx.row(r), temperature, rm, &mut out[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::matrix(rows, cols, out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, temperature }, rg))
    }

    /// Per-row convex mixing: `y[r, :] = Σ_i weights[r, i] · inputs[i][r, :]`.
    /// Terms with a weight of exactly zero are skipped, so the output is
    /// independent of those inputs bit for bit.
    pub fn mix(&mut self, inputs: &[Var], weights: Var) -> Result<Var> {
        let tw = self.value(weights);
        let (rows, n) = tw.dims2()?;
        if n != inputs.len() {
            return Err(Error::dim(format!(
                "mix: {} inputs but weights have shape {:?}",
                inputs.len(),
                tw.shape()
            )));
        }
        let first = self.value(inputs[0]);
        let (r0, cols) = first.dims2()?;
        if r0 != rows {
            return Err(shape_err("mix", first.shape(), tw.shape()));
        }
        for &v in inputs {
            if self.value(v).shape() != [rows, cols] {
                return Err(shape_err("mix", first.shape(), self.value(v).shape()));
            }
        }
        let mut out = vec![0.0; rows * cols];
        for (i, &v) in inputs.iter().enumerate() {
            let tx = self.value(v).data();
            for r in 0..rows {
                let w = tw.data()[r * n + i];
                if w == 0.0 {
                    continue;
                }
                let dst = &mut out[r * cols..(r + 1) * cols];
                for (d, s) in dst.iter_mut().zip(&tx[r * cols..(r + 1) * cols]) {
                    *d += w * s;
                }
            }
        }
        let out = Tensor::matrix(rows, cols, out)?;
        let rg = self.rg(weights) || inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out,
            Op::Mix {
                inputs: inputs.to_vec(),
                weights,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    /// `q` is `Rq×D`, `k`/`v` are `Rk×D`; heads split `D` evenly. With
    /// `causal`, query `i` of a span sees keys `0..=i` of that span.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spans: &[AttnSpan], heads: usize, causal: bool) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rq, d) = tq.dims2()?;
        let (rk, dk) = tk.dims2()?;
        if tk.shape() != tv.shape() || dk != d {
            return Err(Error::dim(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!(
                "attention: width {d} not divisible into {heads} heads"
            )));
        }
        for s in spans {
            if s.q_len == 0 || s.k_len == 0 || s.q_start + s.q_len > rq || s.k_start + s.k_len > rk {
                return Err(Error::dim(format!("attention: span {s:?} out of range")));
            }
            if causal && s.q_len != s.k_len {
                return Err(Error::dim(format!("attention: causal span {s:?} is not square")));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; rq * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for s in spans {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..s.q_len {
                    let qi = &qd[(s.q_start + i) * d + off..(s.q_start + i) * d + off + dh];
                    let visible = if causal { i + 1 } else { s.k_len };
                    scores.clear();
                    for j in 0..s.k_len {
                        if j < visible {
                            let kj = &kd[(s.k_start + j) * d + off..(s.k_start + j) * d + off + dh];
                            scores.push(qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale);
                        } else {
                            scores.push(f64::NEG_INFINITY);
                        }
                    }
                    let max = scores[..visible].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = if sc.is_finite() { (*sc - max).exp() } else { 0.0 };
                        z += *sc;
                    }
                    let orow = (s.q_start + i) * d + off;
                    for (j, &p) in scores.iter().enumerate() {
                        let p = p / z;
                        probs.push(p);
                        if p != 0.0 {
                            let vj = &vd[(s.k_start + j) * d + off..(s.k_start + j) * d + off + dh];
                            for (o, vv) in out[orow..orow + dh].iter_mut().zip(vj) {
                                *o += p * vv;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(rq, d, out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spans: spans.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean token cross-entropy of `logits` (`R×V`) against `targets`,
    /// skipping positions whose target equals `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, vocab) = tl.dims2()?;
        if targets.len() != rows {
            return Err(Error::dim(format!(
                "cross_entropy: {} targets for logits {:?}",
                targets.len(),
                tl.shape()
            )));
        }
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            if t >= vocab {
                return Err(Error::dim(format!("cross_entropy: target {t} outside vocab {vocab}")));
            }
            let row = tl.row(r);
            let lse = log_sum_exp(row);
            total += lse - row[t];
            for (p, &x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            count += 1;
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns the gradient of every
    /// parameter leaf recorded on this graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            if let Op::Param(name) = &node.op {
                out.by_name
                    .insert(name.clone(), Tensor::new(node.value.get().shape().to_vec(), g)?);
            }
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node<'_>, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        // Lazily allocated accumulator for an input's gradient, or None when
        // that input does not need one.
        fn slot<'g>(graph: &Graph<'_>, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
            if !graph.nodes[v.0].requires_grad {
                return None;
            }
            let n = graph.nodes[v.0].value.get().len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
        }

        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = slot(self, grads, v) {
                        s.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = slot(self, grads, *a) {
                    for i in 0..g.len() {
                        s[i] += g[i] * vb[i];
                    }
                }
                if let Some(s) = slot(self, grads, *b) {
                    for i in 0..g.len() {
                        s[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(s) = slot(self, grads, *a) {
                    s.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(s) = slot(self, grads, *x) {
                    s.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if let Some(s) = slot(self, grads, *b) {
                    let cols = s.len();
                    for row in g.chunks(cols) {
                        s.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                if let Some(s) = slot(self, grads, *x) {
                    for i in 0..g.len() {
                        if vx[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                if let Some(s) = slot(self, grads, *gamma) {
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            s[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if let Some(s) = slot(self, grads, *beta) {
                    for grow in g.chunks(cols) {
                        s.iter_mut().zip(grow).for_each(|(d, v)| *d += v);
                    }
                }
                if let Some(s) = slot(self, grads, *x) {
                    let n = cols as f64;
                    for (r, (grow, hrow)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let dh = grow[c] * gam[c];
                            m1 += dh;
                            m2 += dh * hrow[c];
                        }
                        m1 /= n;
                        m2 /= n;
                        for c in 0..cols {
                            let dh = grow[c] * gam[c];
                            s[r * cols + c] += rstd[r] * (dh - m1 - hrow[c] * m2);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(s) = slot(self, grads, *table) {
                    let cols = g.len() / ids.len();
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = &mut s[id * cols..(id + 1) * cols];
                        dst.iter_mut()
                            .zip(&g[i * cols..(i + 1) * cols])
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (rows, cols) = node.value.get().dims2()?;
                let mut offset = 0;
                for &v in inputs {
                    let (r, c) = self.value(v).dims2()?;
                    if let Some(s) = slot(self, grads, v) {
                        if *axis == 0 {
                            s.iter_mut()
                                .zip(&g[offset * cols..(offset + r) * cols])
                                .for_each(|(d, x)| *d += x);
                        } else {
                            for row in 0..rows {
                                let src = &g[row * cols + offset..row * cols + offset + c];
                                s[row * c..(row + 1) * c].iter_mut().zip(src).for_each(|(d, x)| *d += x);
                            }
                        }
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Slice { x, axis, start } => {
                let (rows, cols) = self.value(*x).dims2()?;
                let (_, len_c) = node.value.get().dims2()?;
                if let Some(s) = slot(self, grads, *x) {
                    if *axis == 0 {
                        s[start * cols..start * cols + g.len()]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(d, v)| *d += v);
                    } else {
                        for r in 0..rows {
                            let dst = &mut s[r * cols + start..r * cols + start + len_c];
                            dst.iter_mut()
                                .zip(&g[r * len_c..(r + 1) * len_c])
                                .for_each(|(d, v)| *d += v);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = slot(self, grads, *x) {
                    s.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(s) = slot(self, grads, *x) {
                    let c = g[0] / s.len() as f64;
                    s.iter_mut().for_each(|d| *d += c);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2()?;
                let (_, n) = tb.dims2()?;
                if let Some(s) = slot(self, grads, *a) {
                    // dA = dC · Bᵀ
                    gemm(m, n, k, g, false, tb.data(), true, 1.0, s);
                }
                if let Some(s) = slot(self, grads, *b) {
                    // dB = Aᵀ · dC
                    gemm(k, m, n, ta.data(), true, g, false, 1.0, s);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2()?;
                if let Some(s) = slot(self, grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Softmax { x, temperature } => {
                let y = node.value.get();
                let (_, cols) = y.dims2()?;
                if let Some(s) = slot(self, grads, *x) {
                    for (r, (yrow, grow)) in y.data().chunks(cols).zip(g.chunks(cols)).enumerate() {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            s[r * cols + c] += yrow[c] * (grow[c] - dot) / temperature;
                        }
                    }
                }
            }
            Op::Mix { inputs, weights } => {
                let tw = self.value(*weights);
                let (rows, n) = tw.dims2()?;
                let cols = g.len() / rows;
                for (i, &v) in inputs.iter().enumerate() {
                    if let Some(s) = slot(self, grads, v) {
                        for r in 0..rows {
                            let w = tw.data()[r * n + i];
                            if w == 0.0 {
                                continue;
                            }
                            s[r * cols..(r + 1) * cols]
                                .iter_mut()
                                .zip(&g[r * cols..(r + 1) * cols])
                                .for_each(|(d, x)| *d += w * x);
                        }
                    }
                }
                if let Some(s) = slot(self, grads, *weights) {
                    for (i, &v) in inputs.iter().enumerate() {
                        let tx = self.value(v).data();
                        for r in 0..rows {
                            s[r * n + i] += g[r * cols..(r + 1) * cols]
                                .iter()
                                .zip(&tx[r * cols..(r + 1) * cols])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spans,
                heads,
                probs,
            } => {
                self.attention_backward(*q, *k, *v, spans, *heads, probs, g, grads);
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                if *count == 0 {
                    return Ok(());
                }
                let (_, vocab) = self.value(*logits).dims2()?;
                if let Some(s) = slot(self, grads, *logits) {
                    let c = g[0] / *count as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        let base = r * vocab;
                        for j in 0..vocab {
                            s[base + j] += c * probs[base + j];
                        }
                        s[base + t] -= c;
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spans: &[AttnSpan],
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let d = self.value(q).shape()[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = Vec::new();
        let mut pi = 0;
        for s in spans {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..s.q_len {
                    let qrow = (s.q_start + i) * d + off;
                    let go = &g[qrow..qrow + dh];
                    let p = &probs[pi..pi + s.k_len];
                    pi += s.k_len;
                    dp.clear();
                    for (j, &pj) in p.iter().enumerate() {
                        let vrow = (s.k_start + j) * d + off;
                        dp.push(go.iter().zip(&vd[vrow..vrow + dh]).map(|(a, b)| a * b).sum::<f64>());
                        if pj != 0.0 {
                            for (dst, x) in dv[vrow..vrow + dh].iter_mut().zip(go) {
                                *dst += pj * x;
                            }
                        }
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..s.k_len {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let krow = (s.k_start + j) * d + off;
                        for c in 0..dh {
                            dq[qrow + c] += ds * kd[krow + c];
                            dk[krow + c] += ds * qd[qrow + c];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].requires_grad {
                let n = buf.len();
                let s = grads[var.0].get_or_insert_with(|| vec![0.0; n]);
                s.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
            }
        }
    }
}
