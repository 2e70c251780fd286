//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] is an append-only arena of nodes. Each forward kernel checks
//! its operand shapes, computes the output eagerly, and records an [`Op`]
//! describing how to push gradients back to its inputs. [`Tape::backward`]
//! seeds the scalar loss with 1 and replays the ops in reverse, accumulating
//! gradients only along paths that can reach a parameter leaf.
//!
//! Conventions:
//! - kernels are matrix kernels: rank-2 tensors, with rank-1 viewed as `[1, n]`;
//! - a tape is single-threaded and lives for one forward/backward pass;
//! - `backward` may be called once per tape; a second call is rejected;
//! - parameters registered via [`Tape::param`] always appear in the returned
//!   gradient set, with an all-zero gradient when the loss never reached them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Recorded operation, holding input handles plus whatever auxiliary data
/// the backward pass needs.
#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    /// `a[m,k] @ b[k,n]`
    Matmul { a: NodeId, b: NodeId },
    /// `a[m,d] @ b[n,d]^T` — used for attention scores and similarity matrices.
    MatmulNt { a: NodeId, b: NodeId },
    /// Elementwise sum of same-shape tensors.
    Add { a: NodeId, b: NodeId },
    /// `a[m,n] + row[1,n]`, the row broadcast over every row of `a`.
    AddRow { a: NodeId, row: NodeId },
    /// Elementwise product of same-shape tensors.
    Mul { a: NodeId, b: NodeId },
    /// Multiplication by a compile-time-constant scalar.
    Scale { x: NodeId, c: S },
    /// Multiplication by a `[1]` node (e.g. a learnable temperature).
    MulScalar { x: NodeId, s: NodeId },
    /// Elementwise `exp`.
    Exp { x: NodeId },
    /// Concatenation along `axis` (0 = rows, 1 = cols).
    Concat { parts: Vec<NodeId>, axis: usize },
    /// Contiguous slice `[start, start+len)` along `axis`.
    Slice { x: NodeId, axis: usize, start: usize, len: usize },
    /// Per-row layer normalization with affine `gamma`/`beta` of width `cols`.
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    /// GELU, tanh approximation.
    Gelu { x: NodeId },
    /// Mean over all elements, `[1]`.
    Mean { x: NodeId },
    /// Sum over all elements, `[1]`.
    Sum { x: NodeId },
    /// Row-wise `softmax(x / tau)`.
    SoftmaxT { x: NodeId, tau: S },
    /// Row-wise `log softmax(x / tau)`.
    LogSoftmaxT { x: NodeId, tau: S },
    /// Rows rescaled to unit Euclidean norm.
    L2NormizeRows { x: NodeId },
    /// Row gather: `out[i] = table[idx[i]]`. Backward scatter-adds.
    GatherRows { table: NodeId, idx: Vec<usize> },
    /// Mean over rows of `-log softmax(logits)[target]`, `[1]`.
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
    /// Mean over rows of `KL(p || q)`; both inputs are probability rows.
    KlDiv { p: NodeId, q: NodeId },
}

struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
    needs_grad: bool,
}

/// Gradients keyed by parameter id, as returned by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Grads<S: Scalar = f64> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, id: &str) -> Option<&Tensor<S>> {
        self.map.get(id)
    }

    /// Gradient for `id`; panics when the id was never registered, which is
    /// a bug in the caller's wiring rather than a runtime condition.
    pub fn expect(&self, id: &str) -> &Tensor<S> {
        self.map
            .get(id)
            .unwrap_or_else(|| panic!("no gradient recorded for parameter `{id}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<S>> {
        self.map
    }
}

/// Append-only op arena; see the module docs for the lifecycle.
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<String, NodeId>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            consumed: false,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cached output of a node.
    pub fn value(&self, n: NodeId) -> &Tensor<S> {
        &self.nodes[n.0].value
    }

    /// Whether gradients can flow into this node (any parameter upstream).
    pub fn needs_grad(&self, n: NodeId) -> bool {
        self.nodes[n.0].needs_grad
    }

    /// Records a constant leaf: gradients never flow into it.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Records a parameter leaf under a unique id; its gradient is collected
    /// by [`Tape::backward`]. Re-registering an id is a contract error
    /// because it would make the gradient accounting ambiguous.
    pub fn param(&mut self, id: &str, value: Tensor<S>) -> Result<NodeId> {
        if self.params.contains_key(id) {
            return Err(Error::Contract(format!(
                "parameter `{id}` registered twice on one tape"
            )));
        }
        let node = self.push(Op::Leaf, value, true);
        self.params.insert(id.to_string(), node);
        Ok(node)
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, needs_grad: bool) -> NodeId {
        debug_assert!(
            value.all_finite(),
            "non-finite output from {:?}",
            op_name(&op)
        );
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn flows(&self, inputs: &[NodeId]) -> bool {
        inputs.iter().any(|n| self.nodes[n.0].needs_grad)
    }

    // ── forward kernels ──────────────────────────────────────────────

    /// `a[m,k] @ b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for kk in 0..k {
                let aik = av[i * k + kk];
                let brow = &bv[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let flows = self.flows(&[a, b]);
        Ok(self.push(Op::Matmul { a, b }, Tensor::new(vec![m, n], out), flows))
    }

    /// `a[m,d] @ b[n,d]^T -> [m,n]` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, d) = self.value(a).dims2()?;
        let (n, d2) = self.value(b).dims2()?;
        if d != d2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let arow = &av[i * d..(i + 1) * d];
            for j in 0..n {
                let brow = &bv[j * d..(j + 1) * d];
                let mut acc = S::zero();
                for kk in 0..d {
                    acc += arow[kk] * brow[kk];
                }
                out[i * n + j] = acc;
            }
        }
        let flows = self.flows(&[a, b]);
        Ok(self.push(Op::MatmulNt { a, b }, Tensor::new(vec![m, n], out), flows))
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("add", a, b));
        }
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let flows = self.flows(&[a, b]);
        Ok(self.push(Op::Add { a, b }, Tensor::new(shape, out), flows))
    }

    /// `a[m,n] + row[1,n]` broadcast over rows (bias add).
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        let (r, n2) = self.value(row).dims2()?;
        if r != 1 || n != n2 {
            return Err(self.shape_err("add_row", a, row));
        }
        let av = self.value(a).data();
        let rv = self.value(row).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] + rv[j]);
            }
        }
        let shape = self.value(a).shape().to_vec();
        let flows = self.flows(&[a, row]);
        Ok(self.push(Op::AddRow { a, row }, Tensor::new(shape, out), flows))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let flows = self.flows(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, Tensor::new(shape, out), flows))
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        let out: Vec<S> = self.value(x).data().iter().map(|v| *v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let flows = self.flows(&[x]);
        self.push(Op::Scale { x, c }, Tensor::new(shape, out), flows)
    }

    /// Multiplication by a `[1]` node; gradients flow into both factors.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::Domain {
                op: "mul_scalar",
                detail: format!("scalar operand has shape {:?}", self.value(s).shape()),
            });
        }
        let sv = self.value(s).data()[0];
        let out: Vec<S> = self.value(x).data().iter().map(|v| *v * sv).collect();
        let shape = self.value(x).shape().to_vec();
        let flows = self.flows(&[x, s]);
        Ok(self.push(Op::MulScalar { x, s }, Tensor::new(shape, out), flows))
    }

    /// Elementwise `exp`.
    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out: Vec<S> = self.value(x).data().iter().map(|v| v.exp()).collect();
        let shape = self.value(x).shape().to_vec();
        let flows = self.flows(&[x]);
        self.push(Op::Exp { x }, Tensor::new(shape, out), flows)
    }

    /// Concatenation along `axis` (0 = stack rows, 1 = widen rows).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Domain {
                op: "concat",
                detail: "empty part list".into(),
            });
        }
        if axis > 1 {
            return Err(Error::Domain {
                op: "concat",
                detail: format!("axis {axis} out of range for matrices"),
            });
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|p| self.value(*p).dims2())
            .collect::<Result<_>>()?;
        let fixed = if axis == 0 { dims[0].1 } else { dims[0].0 };
        for (i, d) in dims.iter().enumerate() {
            let other = if axis == 0 { d.1 } else { d.0 };
            if other != fixed {
                return Err(self.shape_err("concat", parts[0], parts[i]));
            }
        }
        let (rows, cols) = if axis == 0 {
            (dims.iter().map(|d| d.0).sum(), fixed)
        } else {
            (fixed, dims.iter().map(|d| d.1).sum())
        };
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for p in parts {
                out.extend_from_slice(self.value(*p).data());
            }
        } else {
            for i in 0..rows {
                for (p, d) in parts.iter().zip(&dims) {
                    let v = self.value(*p).data();
                    out.extend_from_slice(&v[i * d.1..(i + 1) * d.1]);
                }
            }
        }
        let flows = self.flows(parts);
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            Tensor::new(vec![rows, cols], out),
            flows,
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        let bound = if axis == 0 { m } else { n };
        if axis > 1 || start + len > bound || len == 0 {
            return Err(Error::Domain {
                op: "slice",
                detail: format!(
                    "slice [{start}, {}) on axis {axis} of shape [{m}, {n}]",
                    start + len
                ),
            });
        }
        let v = self.value(x).data();
        let out = if axis == 0 {
            v[start * n..(start + len) * n].to_vec()
        } else {
            let mut out = Vec::with_capacity(m * len);
            for i in 0..m {
                out.extend_from_slice(&v[i * n + start..i * n + start + len]);
            }
            out
        };
        let shape = if axis == 0 {
            vec![len, n]
        } else {
            vec![m, len]
        };
        let flows = self.flows(&[x]);
        Ok(self.push(
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
            Tensor::new(shape, out),
            flows,
        ))
    }

    /// Per-row layer normalization with affine `gamma`/`beta` (`[1, n]`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        let (gr, gn) = self.value(gamma).dims2()?;
        let (br, bn) = self.value(beta).dims2()?;
        if gr != 1 || gn != n {
            return Err(self.shape_err("layer_norm", x, gamma));
        }
        if br != 1 || bn != n {
            return Err(self.shape_err("layer_norm", x, beta));
        }
        let eps = S::from_f64_checked(LAYER_NORM_EPS);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let nn = S::from_usize(n).expect("width fits scalar");
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mut mean = S::zero();
            for v in row {
                mean += *v;
            }
            mean = mean / nn;
            let mut var = S::zero();
            for v in row {
                let d = *v - mean;
                var += d * d;
            }
            var = var / nn;
            let inv = (var + eps).sqrt().recip();
            for j in 0..n {
                out.push(gv[j] * (row[j] - mean) * inv + bv[j]);
            }
        }
        let flows = self.flows(&[x, gamma, beta]);
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta },
            Tensor::new(vec![m, n], out),
            flows,
        ))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .map(|v| gelu_forward(*v))
            .collect();
        let shape = self.value(x).shape().to_vec();
        let flows = self.flows(&[x]);
        self.push(Op::Gelu { x }, Tensor::new(shape, out), flows)
    }

    /// Mean over all elements, producing a `[1]` scalar.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).data();
        let n = S::from_usize(v.len()).expect("size fits scalar");
        let mut acc = S::zero();
        for e in v {
            acc += *e;
        }
        let flows = self.flows(&[x]);
        self.push(Op::Mean { x }, Tensor::scalar(acc / n), flows)
    }

    /// Sum over all elements, producing a `[1]` scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).data();
        let mut acc = S::zero();
        for e in v {
            acc += *e;
        }
        let flows = self.flows(&[x]);
        self.push(Op::Sum { x }, Tensor::scalar(acc), flows)
    }

    /// Row-wise `softmax(x / tau)`, computed in the log domain with
    /// max subtraction. Each output row sums to 1 within 1e-12.
    pub fn softmax_t(&mut self, x: NodeId, tau: S) -> Result<NodeId> {
        check_temperature("softmax_t", tau)?;
        let (m, n) = self.value(x).dims2()?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            out.extend(softmax_row(row, tau));
        }
        let shape = self.value(x).shape().to_vec();
        let flows = self.flows(&[x]);
        Ok(self.push(Op::SoftmaxT { x, tau }, Tensor::new(shape, out), flows))
    }

    /// Row-wise `log softmax(x / tau)` with max subtraction.
    pub fn log_softmax_t(&mut self, x: NodeId, tau: S) -> Result<NodeId> {
        check_temperature("log_softmax_t", tau)?;
        let (m, n) = self.value(x).dims2()?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let (mx, lse) = log_sum_exp(row, tau);
            for v in row {
                out.push(*v / tau - mx - lse);
            }
        }
        let shape = self.value(x).shape().to_vec();
        let flows = self.flows(&[x]);
        Ok(self.push(Op::LogSoftmaxT { x, tau }, Tensor::new(shape, out), flows))
    }

    /// Rescales every row to unit Euclidean norm; zero rows are a domain
    /// error because they have no direction.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mut sq = S::zero();
            for v in row {
                sq += *v * *v;
            }
            let norm = sq.sqrt();
            if norm <= S::from_f64_checked(1e-300) {
                return Err(Error::Domain {
                    op: "l2_normalize_rows",
                    detail: format!("row {i} has zero norm"),
                });
            }
            let inv = norm.recip();
            for v in row {
                out.push(*v * inv);
            }
        }
        let shape = self.value(x).shape().to_vec();
        let flows = self.flows(&[x]);
        Ok(self.push(Op::L2NormizeRows { x }, Tensor::new(shape, out), flows))
    }

    /// Cosine similarity matrix between the rows of `a[m,d]` and `b[n,d]`,
    /// composed from the normalize and matmul primitives.
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let an = self.l2_normalize_rows(a)?;
        let bn = self.l2_normalize_rows(b)?;
        self.matmul_nt(an, bn)
    }

    /// Row gather `out[i] = table[idx[i]]` (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.value(table).dims2()?;
        if let Some(bad) = idx.iter().find(|i| **i >= rows) {
            return Err(Error::Domain {
                op: "gather_rows",
                detail: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for i in idx {
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let flows = self.flows(&[table]);
        Ok(self.push(
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            Tensor::new(vec![idx.len(), cols], out),
            flows,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, shape `[1]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (m, n) = self.value(logits).dims2()?;
        if targets.len() != m {
            return Err(Error::Domain {
                op: "cross_entropy",
                detail: format!("{} targets for {m} logit rows", targets.len()),
            });
        }
        if let Some(bad) = targets.iter().find(|t| **t >= n) {
            return Err(Error::Domain {
                op: "cross_entropy",
                detail: format!("target class {bad} out of range for {n} columns"),
            });
        }
        let xv = self.value(logits).data();
        let mut acc = S::zero();
        for (i, t) in targets.iter().enumerate() {
            let row = &xv[i * n..(i + 1) * n];
            let (mx, lse) = log_sum_exp(row, S::one());
            acc += mx + lse - row[*t];
        }
        let mean = acc / S::from_usize(m).expect("rows fit scalar");
        let flows = self.flows(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            Tensor::scalar(mean),
            flows,
        ))
    }

    /// Mean over rows of `KL(p || q) = Σ p (ln p − ln q)`, shape `[1]`.
    ///
    /// Both inputs are probability rows: entries non-negative, `q > 0`
    /// wherever `p > 0`, and each row summing to 1 within 1e-3 — a coarse
    /// tolerance chosen so the check still catches raw logits passed by
    /// mistake while admitting finite-difference perturbations of valid
    /// rows. Any temperature softening happens in the caller before this
    /// kernel. Identical inputs yield exactly `0.0`.
    pub fn kl_div(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        if self.value(p).shape() != self.value(q).shape() {
            return Err(self.shape_err("kl_div", p, q));
        }
        let (m, n) = self.value(p).dims2()?;
        let pv = self.value(p).data();
        let qv = self.value(q).data();
        for (name, v) in [("p", pv), ("q", qv)] {
            for i in 0..m {
                let row = &v[i * n..(i + 1) * n];
                let mut s = S::zero();
                for e in row {
                    if *e < S::zero() {
                        return Err(Error::Domain {
                            op: "kl_div",
                            detail: format!("negative entry in probability input {name}, row {i}"),
                        });
                    }
                    s += *e;
                }
                if (s - S::one()).abs() > S::from_f64_checked(1e-3) {
                    return Err(Error::Domain {
                        op: "kl_div",
                        detail: format!("input {name} row {i} sums to {s}, not a probability row"),
                    });
                }
            }
        }
        let mut acc = S::zero();
        for i in 0..m {
            for j in 0..n {
                let (pe, qe) = (pv[i * n + j], qv[i * n + j]);
                if pe > S::zero() {
                    if qe <= S::zero() {
                        return Err(Error::Domain {
                            op: "kl_div",
                            detail: format!("q is zero where p > 0 at row {i}, col {j}"),
                        });
                    }
                    acc += pe * (pe.ln() - qe.ln());
                }
            }
        }
        let mean = acc / S::from_usize(m).expect("rows fit scalar");
        let flows = self.flows(&[p, q]);
        Ok(self.push(Op::KlDiv { p, q }, Tensor::scalar(mean), flows))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Seeds `loss` (shape `[1]`) with gradient 1, replays the tape in
    /// reverse, and returns one gradient per registered parameter; params
    /// the loss never reached get an all-zero gradient.
    ///
    /// A tape can be differentiated once: a second call is rejected as a
    /// contract violation — build a fresh tape per training step instead.
    pub fn backward(&mut self, loss: NodeId) -> Result<Grads<S>> {
        if self.consumed {
            return Err(Error::Contract(
                "backward called twice on one tape; record a fresh tape per step".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss of shape [1], got {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let Some(d) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(d);
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.push_back(i, &op, &d, &mut grads)?;
            grads[i] = Some(d);
        }

        let mut map = BTreeMap::new();
        for (id, node) in &self.params {
            let shape = self.nodes[node.0].value.shape().to_vec();
            let g = match grads[node.0].take() {
                Some(v) => Tensor::new(shape, v),
                None => Tensor::zeros(shape),
            };
            map.insert(id.clone(), g);
        }
        Ok(Grads { map })
    }

    /// Routes the output gradient `d` of node `i` into its inputs.
    fn push_back(&self, i: usize, op: &Op<S>, d: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let val = |n: NodeId| self.nodes[n.0].value.data();
        let needs = |n: NodeId| self.nodes[n.0].needs_grad;
        let mut acc = |n: NodeId, f: &mut dyn FnMut(&mut [S])| {
            if self.nodes[n.0].needs_grad {
                let g = grads[n.0].get_or_insert_with(|| vec![S::zero(); self.nodes[n.0].value.len()]);
                f(g);
            }
        };

        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.nodes[a.0].value.dims2()?;
                let (_, n) = self.nodes[b.0].value.dims2()?;
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = S::zero();
                            let drow = &d[i * n..(i + 1) * n];
                            let brow = &bv[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                s += drow[j] * brow[j];
                            }
                            ga[i * k + kk] += s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            let drow = &d[i * n..(i + 1) * n];
                            let grow = &mut gb[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                grow[j] += aik * drow[j];
                            }
                        }
                    }
                });
            }
            Op::MatmulNt { a, b } => {
                let (m, dd) = self.nodes[a.0].value.dims2()?;
                let (n, _) = self.nodes[b.0].value.dims2()?;
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            let dv = d[i * n + j];
                            let brow = &bv[j * dd..(j + 1) * dd];
                            let grow = &mut ga[i * dd..(i + 1) * dd];
                            for kk in 0..dd {
                                grow[kk] += dv * brow[kk];
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            let dv = d[i * n + j];
                            let arow = &av[i * dd..(i + 1) * dd];
                            let grow = &mut gb[j * dd..(j + 1) * dd];
                            for kk in 0..dd {
                                grow[kk] += dv * arow[kk];
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                for n in [a, b] {
                    acc(*n, &mut |g| {
                        for (ge, de) in g.iter_mut().zip(d) {
                            *ge += *de;
                        }
                    });
                }
            }
            Op::AddRow { a, row } => {
                acc(*a, &mut |g| {
                    for (ge, de) in g.iter_mut().zip(d) {
                        *ge += *de;
                    }
                });
                let n = self.nodes[row.0].value.len();
                acc(*row, &mut |g| {
                    for (j, de) in d.iter().enumerate() {
                        g[j % n] += *de;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for j in 0..d.len() {
                        g[j] += d[j] * bv[j];
                    }
                });
                acc(*b, &mut |g| {
                    for j in 0..d.len() {
                        g[j] += d[j] * av[j];
                    }
                });
            }
            Op::Scale { x, c } => {
                acc(*x, &mut |g| {
                    for j in 0..d.len() {
                        g[j] += d[j] * *c;
                    }
                });
            }
            Op::MulScalar { x, s } => {
                let sv = val(*s)[0];
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for j in 0..d.len() {
                        g[j] += d[j] * sv;
                    }
                });
                acc(*s, &mut |g| {
                    let mut t = S::zero();
                    for j in 0..d.len() {
                        t += d[j] * xv[j];
                    }
                    g[0] += t;
                });
            }
            Op::Exp { x } => {
                let yv = &self.nodes[i].value;
                let y = yv.data();
                acc(*x, &mut |g| {
                    for j in 0..d.len() {
                        g[j] += d[j] * y[j];
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let dims: Vec<(usize, usize)> = parts
                    .iter()
                    .map(|p| self.nodes[p.0].value.dims2())
                    .collect::<Result<_>>()?;
                if *axis == 0 {
                    let mut off = 0;
                    for (p, (r, c)) in parts.iter().zip(&dims) {
                        let span = r * c;
                        let region = &d[off..off + span];
                        acc(*p, &mut |g| {
                            for (ge, de) in g.iter_mut().zip(region) {
                                *ge += *de;
                            }
                        });
                        off += span;
                    }
                } else {
                    let rows = dims[0].0;
                    let total: usize = dims.iter().map(|d| d.1).sum();
                    let mut start = 0;
                    for (p, (_, c)) in parts.iter().zip(&dims) {
                        acc(*p, &mut |g| {
                            for i in 0..rows {
                                for j in 0..*c {
                                    g[i * c + j] += d[i * total + start + j];
                                }
                            }
                        });
                        start += c;
                    }
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let (_, n) = self.nodes[x.0].value.dims2()?;
                if *axis == 0 {
                    acc(*x, &mut |g| {
                        for (off, de) in d.iter().enumerate() {
                            g[start * n + off] += *de;
                        }
                    });
                } else {
                    let rows = d.len() / len;
                    acc(*x, &mut |g| {
                        for i in 0..rows {
                            for j in 0..*len {
                                g[i * n + start + j] += d[i * len + j];
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (m, n) = self.nodes[x.0].value.dims2()?;
                let eps = S::from_f64_checked(LAYER_NORM_EPS);
                let nn = S::from_usize(n).expect("width fits scalar");
                let (xv, gv) = (val(*x), val(*gamma));
                // Recompute per-row statistics; rows are short at desk scale.
                let mut xhat = vec![S::zero(); m * n];
                let mut inv_std = vec![S::zero(); m];
                for r in 0..m {
                    let row = &xv[r * n..(r + 1) * n];
                    let mut mean = S::zero();
                    for v in row {
                        mean += *v;
                    }
                    mean = mean / nn;
                    let mut var = S::zero();
                    for v in row {
                        let dd = *v - mean;
                        var += dd * dd;
                    }
                    var = var / nn;
                    let inv = (var + eps).sqrt().recip();
                    inv_std[r] = inv;
                    for j in 0..n {
                        xhat[r * n + j] = (row[j] - mean) * inv;
                    }
                }
                acc(*beta, &mut |g| {
                    for r in 0..m {
                        for j in 0..n {
                            g[j] += d[r * n + j];
                        }
                    }
                });
                acc(*gamma, &mut |g| {
                    for r in 0..m {
                        for j in 0..n {
                            g[j] += d[r * n + j] * xhat[r * n + j];
                        }
                    }
                });
                acc(*x, &mut |g| {
                    for r in 0..m {
                        let mut mean_g = S::zero();
                        let mut mean_gx = S::zero();
                        for j in 0..n {
                            let gj = gv[j] * d[r * n + j];
                            mean_g += gj;
                            mean_gx += gj * xhat[r * n + j];
                        }
                        mean_g = mean_g / nn;
                        mean_gx = mean_gx / nn;
                        for j in 0..n {
                            let gj = gv[j] * d[r * n + j];
                            g[r * n + j] +=
                                (gj - mean_g - xhat[r * n + j] * mean_gx) * inv_std[r];
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for j in 0..d.len() {
                        g[j] += d[j] * gelu_backward(xv[j]);
                    }
                });
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].value.len();
                let scale = d[0] / S::from_usize(n).expect("size fits scalar");
                acc(*x, &mut |g| {
                    for ge in g.iter_mut() {
                        *ge += scale;
                    }
                });
            }
            Op::Sum { x } => {
                acc(*x, &mut |g| {
                    for ge in g.iter_mut() {
                        *ge += d[0];
                    }
                });
            }
            Op::SoftmaxT { x, tau } => {
                let (m, n) = self.nodes[x.0].value.dims2()?;
                let s = self.nodes[i].value.data();
                acc(*x, &mut |g| {
                    for r in 0..m {
                        let srow = &s[r * n..(r + 1) * n];
                        let drow = &d[r * n..(r + 1) * n];
                        let mut dot = S::zero();
                        for j in 0..n {
                            dot += drow[j] * srow[j];
                        }
                        for j in 0..n {
                            g[r * n + j] += srow[j] * (drow[j] - dot) / *tau;
                        }
                    }
                });
            }
            Op::LogSoftmaxT { x, tau } => {
                let (m, n) = self.nodes[x.0].value.dims2()?;
                let y = self.nodes[i].value.data();
                acc(*x, &mut |g| {
                    for r in 0..m {
                        let yrow = &y[r * n..(r + 1) * n];
                        let drow = &d[r * n..(r + 1) * n];
                        let mut dsum = S::zero();
                        for de in drow {
                            dsum += *de;
                        }
                        for j in 0..n {
                            g[r * n + j] += (drow[j] - yrow[j].exp() * dsum) / *tau;
                        }
                    }
                });
            }
            Op::L2NormizeRows { x } => {
                let (m, n) = self.nodes[x.0].value.dims2()?;
                let xv = val(*x);
                let y = self.nodes[i].value.data();
                acc(*x, &mut |g| {
                    for r in 0..m {
                        let xrow = &xv[r * n..(r + 1) * n];
                        let yrow = &y[r * n..(r + 1) * n];
                        let drow = &d[r * n..(r + 1) * n];
                        let mut sq = S::zero();
                        for v in xrow {
                            sq += *v * *v;
                        }
                        let inv = sq.sqrt().recip();
                        let mut dot = S::zero();
                        for j in 0..n {
                            dot += drow[j] * yrow[j];
                        }
                        for j in 0..n {
                            g[r * n + j] += (drow[j] - yrow[j] * dot) * inv;
                        }
                    }
                });
            }
            Op::GatherRows { table, idx } => {
                let (_, cols) = self.nodes[table.0].value.dims2()?;
                acc(*table, &mut |g| {
                    for (i, t) in idx.iter().enumerate() {
                        for j in 0..cols {
                            g[t * cols + j] += d[i * cols + j];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let (m, n) = self.nodes[logits.0].value.dims2()?;
                let xv = val(*logits);
                let scale = d[0] / S::from_usize(m).expect("rows fit scalar");
                acc(*logits, &mut |g| {
                    for (r, t) in targets.iter().enumerate() {
                        let row = &xv[r * n..(r + 1) * n];
                        let probs = softmax_row(row, S::one());
                        for j in 0..n {
                            let ind = if j == *t { S::one() } else { S::zero() };
                            g[r * n + j] += scale * (probs[j] - ind);
                        }
                    }
                });
            }
            Op::KlDiv { p, q } => {
                let (m, n) = self.nodes[p.0].value.dims2()?;
                let (pv, qv) = (val(*p), val(*q));
                let scale = d[0] / S::from_usize(m).expect("rows fit scalar");
                acc(*q, &mut |g| {
                    for j in 0..m * n {
                        if pv[j] > S::zero() {
                            g[j] -= scale * pv[j] / qv[j];
                        }
                    }
                });
                if needs(*p) {
                    acc(*p, &mut |g| {
                        for j in 0..m * n {
                            if pv[j] > S::zero() {
                                g[j] += scale * ((pv[j].ln() - qv[j].ln()) + S::one());
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }
}

// ── shared numeric helpers ───────────────────────────────────────────

fn check_temperature<S: Scalar>(op: &'static str, tau: S) -> Result<()> {
    if tau <= S::zero() || !tau.is_finite() {
        return Err(Error::Domain {
            op,
            detail: format!("temperature must be positive and finite, got {tau}"),
        });
    }
    Ok(())
}

/// `(max(x/tau), ln Σ exp(x/tau − max))` for one row.
fn log_sum_exp<S: Scalar>(row: &[S], tau: S) -> (S, S) {
    let mut mx = S::neg_infinity();
    for v in row {
        mx = mx.max(*v / tau);
    }
    let mut s = S::zero();
    for v in row {
        s += (*v / tau - mx).exp();
    }
    (mx, s.ln())
}

/// One softmax row with temperature, max-subtracted.
fn softmax_row<S: Scalar>(row: &[S], tau: S) -> Vec<S> {
    let mut mx = S::neg_infinity();
    for v in row {
        mx = mx.max(*v / tau);
    }
    let mut out: Vec<S> = row.iter().map(|v| (*v / tau - mx).exp()).collect();
    let mut s = S::zero();
    for e in &out {
        s += *e;
    }
    for e in &mut out {
        *e = *e / s;
    }
    out
}

fn gelu_forward<S: Scalar>(x: S) -> S {
    let half = S::from_f64_checked(0.5);
    let c = S::from_f64_checked(0.7978845608028654); // sqrt(2/pi)
    let a = S::from_f64_checked(0.044715);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_backward<S: Scalar>(x: S) -> S {
    let half = S::from_f64_checked(0.5);
    let c = S::from_f64_checked(0.7978845608028654);
    let a = S::from_f64_checked(0.044715);
    let three = S::from_f64_checked(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

fn op_name<S: Scalar>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::MatmulNt { .. } => "matmul_nt",
        Op::Add { .. } => "add",
        Op::AddRow { .. } => "add_row",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::MulScalar { .. } => "mul_scalar",
        Op::Exp { .. } => "exp",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu { .. } => "gelu",
        Op::Mean { .. } => "mean",
        Op::Sum { .. } => "sum",
        Op::SoftmaxT { .. } => "softmax_t",
        Op::LogSoftmaxT { .. } => "log_softmax_t",
        Op::L2NormizeRows { .. } => "l2_normalize_rows",
        Op::GatherRows { .. } => "gather_rows",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::KlDiv { .. } => "kl_div",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_matches_hand_example() {
        let mut tape: Tape = Tape::new();
        let a = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.constant(t(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(
            tape.value(c).data(),
            &[19.0, 22.0, 43.0, 50.0],
            "[[1,2],[3,4]] @ [[5,6],[7,8]]"
        );
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let mut tape: Tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape: Tape = Tape::new();
        let x = tape.constant(t(&[vec![0.0, 0.0, 0.0]]));
        let s = tape.softmax_t(x, 1.0).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_across_temperatures() {
        let mut tape: Tape = Tape::new();
        let x = tape.constant(t(&[
            vec![3.0, -1.0, 0.5, 9.0],
            vec![-200.0, 150.0, 0.0, 2.0],
        ]));
        for tau in [0.5, 1.0, 4.0] {
            let s = tape.softmax_t(x, tau).unwrap();
            let v = tape.value(s);
            for r in 0..2 {
                let sum: f64 = (0..4).map(|c| v.at(r, c)).sum();
                assert!((sum - 1.0).abs() <= 1e-12, "tau {tau} row {r} sums to {sum}");
            }
        }
    }

    #[test]
    fn non_positive_temperature_is_a_domain_error() {
        let mut tape: Tape = Tape::new();
        let x = tape.constant(t(&[vec![1.0, 2.0]]));
        assert!(tape.softmax_t(x, 0.0).is_err());
        assert!(tape.softmax_t(x, -1.0).is_err());
        assert!(tape.log_softmax_t(x, 0.0).is_err());
    }

    #[test]
    fn sum_loss_gives_all_ones_gradient() {
        let mut tape: Tape = Tape::new();
        let p = tape
            .param("p", t(&[vec![0.3, -1.2, 4.0], vec![0.0, 2.0, -3.0]]))
            .unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.expect("p").data(), &[1.0; 6]);
    }

    #[test]
    fn half_squared_norm_gradient_is_the_input() {
        let mut tape: Tape = Tape::new();
        let vals = t(&[vec![0.5, -2.0, 3.0]]);
        let p = tape.param("p", vals.clone()).unwrap();
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.expect("p").data(), vals.data());
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut tape: Tape = Tape::new();
        let p = tape.param("used", Tensor::scalar(2.0)).unwrap();
        let _lonely = tape.param("lonely", t(&[vec![1.0, 1.0]])).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.expect("lonely").data(), &[0.0, 0.0]);
        assert_eq!(grads.expect("used").data(), &[1.0]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut tape: Tape = Tape::new();
        let p = tape.param("p", Tensor::scalar(1.0)).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        let err = tape.backward(loss).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape: Tape = Tape::new();
        let p = tape.param("p", t(&[vec![1.0, 2.0]])).unwrap();
        let err = tape.backward(p).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn duplicate_param_id_is_rejected() {
        let mut tape: Tape = Tape::new();
        tape.param("w", Tensor::scalar(1.0)).unwrap();
        assert!(tape.param("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn kl_of_identical_rows_is_exactly_zero() {
        let mut tape: Tape = Tape::new();
        let p = tape.constant(t(&[vec![0.2, 0.5, 0.3]]));
        let q = tape.constant(t(&[vec![0.2, 0.5, 0.3]]));
        let kl = tape.kl_div(p, q).unwrap();
        assert_eq!(tape.value(kl).data()[0], 0.0);
    }

    #[test]
    fn kl_rejects_non_probability_rows() {
        let mut tape: Tape = Tape::new();
        let p = tape.constant(t(&[vec![0.2, 0.5, 0.3]]));
        let logits = tape.constant(t(&[vec![1.0, 2.0, 3.0]]));
        assert!(tape.kl_div(p, logits).is_err());
    }

    #[test]
    fn cosine_similarity_of_parallel_rows_is_one() {
        let mut tape: Tape = Tape::new();
        let a = tape.constant(t(&[vec![1.0, 2.0, 2.0]]));
        let b = tape.constant(t(&[vec![2.0, 4.0, 4.0], vec![-1.0, -2.0, -2.0]]));
        let sim = tape.cosine_similarity(a, b).unwrap();
        let v = tape.value(sim);
        assert!((v.at(0, 0) - 1.0).abs() < 1e-12);
        assert!((v.at(0, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constants_do_not_accumulate_gradients() {
        let mut tape: Tape = Tape::new();
        let c = tape.constant(t(&[vec![1.0, 2.0]]));
        let p = tape.param("p", t(&[vec![3.0, 4.0]])).unwrap();
        let s = tape.mul(c, p).unwrap();
        let loss = tape.sum(s);
        assert!(tape.needs_grad(loss));
        assert!(!tape.needs_grad(c));
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.expect("p").data(), &[1.0, 2.0]);
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn concat_slice_round_trip_restores_segments() {
        let mut tape: Tape = Tape::new();
        let a = tape.constant(t(&[vec![1.0, 2.0]]));
        let b = tape.constant(t(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let cat = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(cat).shape(), &[3, 2]);
        let back = tape.slice(cat, 0, 1, 2).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(b).data());
    }
}
