//! Eager reverse-mode autodiff tape.
//!
//! Each builder method validates input shapes, computes the forward value
//! immediately and records the operation. [`Graph::backward`] replays the
//! tape in reverse. Nodes can only reference earlier nodes, so the tape is
//! acyclic by construction.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::params::Params;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Additive mask value for excluded attention keys. Large but finite so no
/// NaN can appear; `exp(-1e9)` underflows to exactly zero.
pub const MASK_NEG: f64 = -1e9;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Differentiable scalar field over planar points: returns the value and
/// its gradient.
pub type PointField = Arc<dyn Fn([f64; 2]) -> (f64, [f64; 2]) + Send + Sync>;

#[derive(Clone, Copy, Debug)]
enum Unary {
    Tanh,
    Gelu,
    Sin,
    Cos,
    Sinc,
    HingeSq,
}

enum Op {
    Input,
    Param(String),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Unary(NodeId, Unary),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    EmbeddingMean {
        table: NodeId,
        bags: Arc<Vec<Vec<usize>>>,
    },
    Gather {
        src: NodeId,
        index: Arc<Vec<usize>>,
    },
    Reshape(NodeId),
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<f64>,
    },
    WeightedMean {
        x: NodeId,
        weights: Arc<Vec<f64>>,
    },
    Cumsum(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Mse(NodeId, NodeId),
    PointMap {
        points: NodeId,
        grads: Vec<[f64; 2]>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Unary(_, u) => match u {
                Unary::Tanh => "tanh",
                Unary::Gelu => "gelu",
                Unary::Sin => "sin",
                Unary::Cos => "cos",
                Unary::Sinc => "sinc",
                Unary::HingeSq => "hinge_sq",
            },
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::EmbeddingMean { .. } => "embedding_mean",
            Op::Gather { .. } => "gather",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Attention { .. } => "attention",
            Op::WeightedMean { .. } => "weighted_mean",
            Op::Cumsum(_) => "cumsum",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Mse(..) => "mse",
            Op::PointMap { .. } => "point_map",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    label: Option<String>,
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
    inputs: HashMap<String, NodeId>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("non-empty shape");
    (shape.iter().product::<usize>() / cols, cols)
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn gelu(x: f64) -> (f64, f64) {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn sinc(x: f64) -> (f64, f64) {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        (1.0 - x2 / 6.0 + x2 * x2 / 120.0, -x / 3.0 + x * x2 / 30.0)
    } else {
        let s = x.sin();
        (s / x, (x * x.cos() - s) / (x * x))
    }
}

fn unary(u: Unary, x: f64) -> f64 {
    match u {
        Unary::Tanh => x.tanh(),
        Unary::Gelu => gelu(x).0,
        Unary::Sin => x.sin(),
        Unary::Cos => x.cos(),
        Unary::Sinc => sinc(x).0,
        Unary::HingeSq => {
            let h = x.max(0.0);
            h * h
        }
    }
}

fn unary_grad(u: Unary, x: f64, y: f64) -> f64 {
    match u {
        Unary::Tanh => 1.0 - y * y,
        Unary::Gelu => gelu(x).1,
        Unary::Sin => x.cos(),
        Unary::Cos => -x.sin(),
        Unary::Sinc => sinc(x).1,
        Unary::HingeSq => 2.0 * x.max(0.0),
    }
}

/// `c[m,n] (+)= a[m,k] * b[k,n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of `a` (m x k), `b` (k x n)
    // and `c` (m x n, row-major), all checked by callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Attaches a label used in error messages for the most recent node.
    pub fn label(&mut self, id: NodeId, label: impl Into<String>) -> NodeId {
        self.nodes[id.0].label = Some(label.into());
        id
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                node: op.name().into(),
            });
        }
        self.nodes.push(Node {
            op,
            value: Tensor::from_parts(shape, data),
            label: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn describe(&self, id: NodeId) -> String {
        let n = &self.nodes[id.0];
        match (&n.op, &n.label) {
            (_, Some(l)) => l.clone(),
            (Op::Param(name), None) => format!("param:{name}"),
            (op, None) => format!("{}#{}", op.name(), id.0),
        }
    }

    fn mismatch(&self, op: &str, ids: &[NodeId]) -> Error {
        let detail = ids
            .iter()
            .map(|&i| format!("{} {:?}", self.describe(i), self.shape(i)))
            .collect::<Vec<_>>()
            .join(", ");
        Error::shape(op, detail)
    }

    /// Named non-trainable input. Re-binding a name returns a fresh node.
    pub fn input(&mut self, name: &str, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        let data = t.into_data();
        self.nodes.push(Node {
            op: Op::Input,
            value: Tensor::from_parts(shape, data),
            label: Some(name.to_string()),
        });
        let id = NodeId(self.nodes.len() - 1);
        self.inputs.insert(name.to_string(), id);
        id
    }

    /// Unnamed constant input.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            op: Op::Input,
            value: Tensor::from_parts(shape, t.into_data()),
            label: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Parameter leaf copied from `params`. Repeated lookups of the same
    /// name share one node.
    pub fn param(&mut self, params: &Params, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let t = params
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
        self.nodes.push(Node {
            op: Op::Param(name.to_string()),
            value: t.clone(),
            label: None,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    /// `a[.., k] x b[k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(self.mismatch("matmul", &[a, b]));
        }
        let (m, k) = rows_cols(&sa);
        let n = sb[1];
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            0.0,
            &mut out,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push(Op::MatMul(a, b), shape, out)
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (broadcast over
    /// leading axes).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if !is_suffix(self.shape(b), self.shape(a)) {
            return Err(self.mismatch("add", &[a, b]));
        }
        let bd = self.value(b).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(bd.len())
            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Add(a, b), shape, out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("sub", &[a, b]));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Sub(a, b), shape, out)
    }

    /// Elementwise product; `b` may broadcast as a suffix of `a`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if !is_suffix(self.shape(b), self.shape(a)) {
            return Err(self.mismatch("mul", &[a, b]));
        }
        let bd = self.value(b).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(bd.len())
            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x * y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Mul(a, b), shape, out)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, c), shape, out)
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out = self.value(a).data().iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Offset(a), shape, out)
    }

    fn unary(&mut self, a: NodeId, u: Unary) -> Result<NodeId> {
        let out = self.value(a).data().iter().map(|&x| unary(u, x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Unary(a, u), shape, out)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Unary::Tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Unary::Gelu)
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Unary::Sin)
    }

    pub fn cos(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Unary::Cos)
    }

    /// `sin(x)/x`, 1 at 0.
    pub fn sinc(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Unary::Sinc)
    }

    /// `max(0, x)^2`.
    pub fn hinge_sq(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Unary::HingeSq)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, cols) = rows_cols(self.shape(a));
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let shape = self.shape(a).to_vec();
        self.push(Op::Softmax(a), shape, out)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (rows, d) = rows_cols(self.shape(x));
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(self.mismatch("layer_norm", &[x, gamma, beta]));
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            shape,
            out,
        )
    }

    /// Embedding lookup: row `i` of the output is the mean of the table rows
    /// listed in `bags[i]`. Every bag must be non-empty.
    pub fn embedding_mean(&mut self, table: NodeId, bags: Vec<Vec<usize>>) -> Result<NodeId> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || bags.is_empty() {
            return Err(self.mismatch("embedding_mean", &[table]));
        }
        let (vocab, d) = (ts[0], ts[1]);
        let td = self.value(table).data();
        let mut out = vec![0.0; bags.len() * d];
        for (i, bag) in bags.iter().enumerate() {
            if bag.is_empty() || bag.iter().any(|&t| t >= vocab) {
                return Err(Error::shape(
                    "embedding_mean",
                    format!("bag {i} empty or out of vocabulary {vocab}"),
                ));
            }
            let w = 1.0 / bag.len() as f64;
            for &t in bag {
                for j in 0..d {
                    out[i * d + j] += w * td[t * d + j];
                }
            }
        }
        self.push(
            Op::EmbeddingMean {
                table,
                bags: Arc::new(bags),
            },
            vec![out.len() / d, d],
            out,
        )
    }

    /// `out.flat[i] = src.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(
        &mut self,
        src: NodeId,
        index: Arc<Vec<usize>>,
        shape: Vec<usize>,
    ) -> Result<NodeId> {
        let n = self.value(src).len();
        if shape.iter().product::<usize>() != index.len() || index.iter().any(|&i| i >= n) {
            return Err(self.mismatch("gather", &[src]));
        }
        let sd = self.value(src).data();
        let out = index.iter().map(|&i| sd[i]).collect();
        self.push(Op::Gather { src, index }, shape, out)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(self.mismatch("reshape", &[a]));
        }
        let out = self.value(a).data().to_vec();
        self.push(Op::Reshape(a), shape, out)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(self.mismatch("concat", parts));
        }
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(self.mismatch("concat", parts));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let mut out = Vec::new();
        for o in 0..outer {
            for &p in parts {
                let s = self.shape(p);
                let inner: usize = s[axis..].iter().product();
                out.extend_from_slice(&self.value(p).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            shape,
            out,
        )
    }

    /// Multi-head scaled dot-product attention over `[B, T, D]` inputs.
    /// `key_mask` is `[B * T]` additive (0 or [`MASK_NEG`]) applied to keys.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        key_mask: &[f64],
    ) -> Result<NodeId> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s || self.shape(v) != s || !s[2].is_multiple_of(heads) {
            return Err(self.mismatch("attention", &[q, k, v]));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        if key_mask.len() != b * t {
            return Err(Error::shape(
                "attention",
                format!(
                    "key mask has {} entries, expected {}",
                    key_mask.len(),
                    b * t
                ),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; b * heads * t * t];
        let mut out = vec![0.0; b * t * d];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let p = &mut probs[((bi * heads + h) * t + i) * t..][..t];
                    let qi = &qd[(bi * t + i) * d + off..][..dh];
                    for j in 0..t {
                        let kj = &kd[(bi * t + j) * d + off..][..dh];
                        let dot: f64 = qi.iter().zip(kj).map(|(x, y)| x * y).sum();
                        p[j] = dot * scale + key_mask[bi * t + j];
                    }
                    softmax_in_place(p);
                    let o = &mut out[(bi * t + i) * d + off..][..dh];
                    for j in 0..t {
                        let w = p[j];
                        if w == 0.0 {
                            continue;
                        }
                        let vj = &vd[(bi * t + j) * d + off..][..dh];
                        for c in 0..dh {
                            o[c] += w * vj[c];
                        }
                    }
                }
            }
        }
        self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            s,
            out,
        )
    }

    /// `out[b] = sum_t weights[b, t] * x[b, t, :]` for `x: [B, T, D]`.
    /// With weights `1/count` on kept positions this is a masked mean over
    /// axis 1.
    pub fn weighted_mean(&mut self, x: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || weights.len() != s[0] * s[1] {
            return Err(self.mismatch("weighted_mean", &[x]));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for ti in 0..t {
                let w = weights[bi * t + ti];
                if w == 0.0 {
                    continue;
                }
                let row = &xd[(bi * t + ti) * d..][..d];
                for j in 0..d {
                    out[bi * d + j] += w * row[j];
                }
            }
        }
        self.push(
            Op::WeightedMean {
                x,
                weights: Arc::new(weights),
            },
            vec![b, d],
            out,
        )
    }

    /// Uniform mean over axis 1 of a `[B, T, D]` tensor.
    pub fn mean_axis1(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(self.mismatch("mean_axis1", &[x]));
        }
        let w = vec![1.0 / s[1] as f64; s[0] * s[1]];
        self.weighted_mean(x, w)
    }

    /// Running sum along the last axis.
    pub fn cumsum(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, cols) = rows_cols(self.shape(a));
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(cols) {
            for j in 1..cols {
                row[j] += row[j - 1];
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(Op::Cumsum(a), shape, out)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), vec![1], vec![s])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Op::Mean(a), vec![1], vec![m])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mse", &[a, b]));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let m = ad
            .iter()
            .zip(bd)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / ad.len() as f64;
        self.push(Op::Mse(a, b), vec![1], vec![m])
    }

    /// Applies `field` to every row of an `[n, 2]` tensor, giving `[n]`.
    pub fn point_map(&mut self, points: NodeId, field: &PointField) -> Result<NodeId> {
        let s = self.shape(points).to_vec();
        if s.len() != 2 || s[1] != 2 {
            return Err(self.mismatch("point_map", &[points]));
        }
        let pd = self.value(points).data();
        let mut out = Vec::with_capacity(s[0]);
        let mut grads = Vec::with_capacity(s[0]);
        for p in pd.chunks(2) {
            let (v, g) = field([p[0], p[1]]);
            out.push(v);
            grads.push(g);
        }
        self.push(Op::PointMap { points, grads }, vec![s[0]], out)
    }

    /// Reverse pass from a scalar node. Returns a gradient for every
    /// parameter leaf in the graph; parameters with no path to `loss` get
    /// exact zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "output {} is not scalar: {:?}",
                    self.describe(loss),
                    self.shape(loss)
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Op::Input | Op::Param(_) = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop(node, &g, &mut grads);
        }

        let mut out = Gradients::new();
        for (name, &id) in &self.params {
            let shape = self.shape(id).to_vec();
            let g = match id.0 <= loss.0 {
                true => grads[id.0].take(),
                false => None,
            };
            let t = match g {
                Some(g) => Tensor::from_parts(shape, g),
                None => Tensor::zeros(&shape),
            };
            if !t.is_finite() {
                return Err(Error::NonFinite {
                    node: format!("grad:{name}"),
                });
            }
            out.insert(name.clone(), t);
        }
        Ok(out)
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| self.nodes[id.0].value.data();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let sa = self.shape(*a);
                let (m, k) = rows_cols(sa);
                let n = self.shape(*b)[1];
                let ga = grad_slot(grads, *a, m * k);
                gemm(m, n, k, g, n as isize, 1, val(*b), 1, n as isize, 1.0, ga);
                let gb = grad_slot(grads, *b, k * n);
                gemm(k, m, n, val(*a), 1, k as isize, g, n as isize, 1, 1.0, gb);
            }
            Op::Add(a, b) => {
                accumulate(grad_slot(grads, *a, g.len()), g);
                let nb = self.value(*b).len();
                let gb = grad_slot(grads, *b, nb);
                for row in g.chunks(nb) {
                    accumulate(gb, row);
                }
            }
            Op::Sub(a, b) => {
                accumulate(grad_slot(grads, *a, g.len()), g);
                let gb = grad_slot(grads, *b, g.len());
                for (x, y) in gb.iter_mut().zip(g) {
                    *x -= y;
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                let nb = bd.len();
                let ga = grad_slot(grads, *a, g.len());
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[i] * bd[i % nb];
                }
                let gb = grad_slot(grads, *b, nb);
                for (i, gi) in g.iter().enumerate() {
                    gb[i % nb] += gi * ad[i];
                }
            }
            Op::Scale(a, c) => {
                let ga = grad_slot(grads, *a, g.len());
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += c * y;
                }
            }
            Op::Offset(a) | Op::Reshape(a) => accumulate(grad_slot(grads, *a, g.len()), g),
            Op::Unary(a, u) => {
                let (xd, yd) = (val(*a), node.value.data());
                let ga = grad_slot(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * unary_grad(*u, xd[i], yd[i]);
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let (_, cols) = rows_cols(node.value.shape());
                let ga = grad_slot(grads, *a, g.len());
                for r in 0..g.len() / cols {
                    let (yr, gr) = (&y[r * cols..][..cols], &g[r * cols..][..cols]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        ga[r * cols + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gamma)[0];
                let rows = g.len() / d;
                let gm = val(*gamma);
                {
                    let gg = grad_slot(grads, *gamma, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                {
                    let gb = grad_slot(grads, *beta, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                let gx = grad_slot(grads, *x, rows * d);
                for r in 0..rows {
                    let xh = &xhat[r * d..][..d];
                    let gr = &g[r * d..][..d];
                    let mut mean_dy = 0.0;
                    let mut mean_dy_xh = 0.0;
                    for j in 0..d {
                        let dy = gr[j] * gm[j];
                        mean_dy += dy;
                        mean_dy_xh += dy * xh[j];
                    }
                    mean_dy /= d as f64;
                    mean_dy_xh /= d as f64;
                    for j in 0..d {
                        let dy = gr[j] * gm[j];
                        gx[r * d + j] += inv_std[r] * (dy - mean_dy - xh[j] * mean_dy_xh);
                    }
                }
            }
            Op::EmbeddingMean { table, bags } => {
                let d = self.shape(*table)[1];
                let gt = grad_slot(grads, *table, self.value(*table).len());
                for (i, bag) in bags.iter().enumerate() {
                    let w = 1.0 / bag.len() as f64;
                    for &t in bag {
                        for j in 0..d {
                            gt[t * d + j] += w * g[i * d + j];
                        }
                    }
                }
            }
            Op::Gather { src, index } => {
                let gs = grad_slot(grads, *src, self.value(*src).len());
                for (gi, &i) in g.iter().zip(index.iter()) {
                    gs[i] += gi;
                }
            }
            Op::Concat { parts, axis } => {
                let first = self.shape(parts[0]);
                let outer: usize = first[..*axis].iter().product();
                let mut off = 0;
                for o in 0..outer {
                    for &p in parts {
                        let inner: usize = self.shape(p)[*axis..].iter().product();
                        let n = self.value(p).len();
                        let gp = grad_slot(grads, p, n);
                        accumulate(&mut gp[o * inner..(o + 1) * inner], &g[off..off + inner]);
                        off += inner;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::WeightedMean { x, weights } => {
                let s = self.shape(*x);
                let (b, t, d) = (s[0], s[1], s[2]);
                let gx = grad_slot(grads, *x, b * t * d);
                for bi in 0..b {
                    for ti in 0..t {
                        let w = weights[bi * t + ti];
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            gx[(bi * t + ti) * d + j] += w * g[bi * d + j];
                        }
                    }
                }
            }
            Op::Cumsum(a) => {
                let (_, cols) = rows_cols(node.value.shape());
                let ga = grad_slot(grads, *a, g.len());
                for (r, gr) in g.chunks(cols).enumerate() {
                    let mut acc = 0.0;
                    for j in (0..cols).rev() {
                        acc += gr[j];
                        ga[r * cols + j] += acc;
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                for x in grad_slot(grads, *a, n).iter_mut() {
                    *x += g[0];
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let w = g[0] / n as f64;
                for x in grad_slot(grads, *a, n).iter_mut() {
                    *x += w;
                }
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                let n = ad.len();
                let c = 2.0 * g[0] / n as f64;
                let diff: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| c * (x - y)).collect();
                accumulate(grad_slot(grads, *a, n), &diff);
                let gb = grad_slot(grads, *b, n);
                for (x, y) in gb.iter_mut().zip(&diff) {
                    *x -= y;
                }
            }
            Op::PointMap { points, grads: pg } => {
                let gp = grad_slot(grads, *points, pg.len() * 2);
                for (i, dg) in pg.iter().enumerate() {
                    gp[2 * i] += g[i] * dg[0];
                    gp[2 * i + 1] += g[i] * dg[1];
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let s = self.shape(q);
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut gq = vec![0.0; b * t * d];
        let mut gk = vec![0.0; b * t * d];
        let mut gv = vec![0.0; b * t * d];
        let mut dp = vec![0.0; t];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let p = &probs[((bi * heads + h) * t + i) * t..][..t];
                    let go = &g[(bi * t + i) * d + off..][..dh];
                    for j in 0..t {
                        let vj = &vd[(bi * t + j) * d + off..][..dh];
                        dp[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                        if p[j] != 0.0 {
                            let gvj = &mut gv[(bi * t + j) * d + off..][..dh];
                            for c in 0..dh {
                                gvj[c] += p[j] * go[c];
                            }
                        }
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let qi = &qd[(bi * t + i) * d + off..][..dh];
                    for j in 0..t {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kd[(bi * t + j) * d + off..][..dh];
                        for c in 0..dh {
                            gq[(bi * t + i) * d + off + c] += ds * kj[c];
                            gk[(bi * t + j) * d + off + c] += ds * qi[c];
                        }
                    }
                }
            }
        }
        accumulate(grad_slot(grads, q, gq.len()), &gq);
        accumulate(grad_slot(grads, k, gk.len()), &gk);
        accumulate(grad_slot(grads, v, gv.len()), &gv);
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], id: NodeId, n: usize) -> &mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; n])
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
