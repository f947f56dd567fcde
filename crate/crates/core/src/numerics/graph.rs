//! Dynamically recorded tape for reverse-mode gradients.
//!
//! Every node is a row-major matrix (scalars are 1×1). A [`Graph`] is built
//! per forward pass and dropped after [`Graph::backward`]; there is no
//! higher-order differentiation.

use std::sync::Arc;

use indexmap::IndexMap;

use super::kernels::{dot, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, softmax_in_place};
use super::params::ParamStore;
use super::tensor::{Matrix, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Dense additive bias with entries that are finite or `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl BiasMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape("bias", &[rows, cols], &[data.len()]));
        }
        if let Some(index) = data
            .iter()
            .position(|v| v.is_nan() || *v == f64::INFINITY)
        {
            return Err(Error::NonFinite {
                context: "bias",
                index,
            });
        }
        Ok(BiasMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Additive attention mask, addressed by global query and key position.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Mask {
    #[default]
    None,
    /// 0 on and below the diagonal, `-inf` above.
    Causal,
    /// 0 on the diagonal, `-inf` elsewhere.
    Diagonal,
    Custom(Arc<BiasMatrix>),
}

impl Mask {
    #[inline]
    pub fn bias(&self, i: usize, j: usize) -> f64 {
        match self {
            Mask::None => 0.0,
            Mask::Causal => {
                if j <= i {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Mask::Diagonal => {
                if i == j {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Mask::Custom(b) => {
                if i < b.rows && j < b.cols {
                    b.get(i, j)
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RepeatRows(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        probs: Vec<f64>,
    },
    TemporalDiff(Var),
    WeightedSse {
        pred: Var,
        target: Vec<f64>,
        weights: Option<Vec<f64>>,
    },
    Sum(Var),
    Combine(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of trainable parameters after a backward pass, keyed by name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: IndexMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.map.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.map.values_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_matrix(&self, v: Var) -> Result<Matrix> {
        let n = self.node(v);
        Matrix::new(n.rows, n.cols, n.value.clone())
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(Error::shape("constant", &[rows, cols], &[value.len()]));
        }
        Ok(self.push(rows, cols, value, Op::Constant, false))
    }

    pub fn constant_matrix(&mut self, m: &Matrix) -> Var {
        self.push(m.rows(), m.cols(), m.data().to_vec(), Op::Constant, false)
    }

    /// Leaf bound to a named tensor. Gradients are tracked iff the tensor
    /// has `requires_grad` set. Requesting the same name twice returns the
    /// same node.
    pub fn tensor_leaf(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(
            t.rows(),
            t.cols(),
            t.values().to_vec(),
            Op::Param,
            t.requires_grad(),
        );
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        Ok(self.tensor_leaf(name, t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", &[n, k], &[k2, m]));
        }
        let mut out = vec![0.0; n * m];
        matmul_acc(self.value(a), self.value(b), &mut out, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(n, m, out, Op::MatMul(a, b), ng))
    }

    /// `x + b` with `b` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.shape(x);
        let (br, bc) = self.shape(b);
        if br != 1 || bc != m {
            return Err(Error::shape("add_bias", &[n, m], &[br, bc]));
        }
        let bv = self.value(b);
        let out: Vec<f64> = self
            .value(x)
            .chunks(m.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(a, c)| a + c))
            .collect();
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(n, m, out, Op::AddBias(x, b), ng))
    }

    /// `x·W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::shape(op, &[sa.0, sa.1], &[sb.0, sb.1]));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(n, m, out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.same_shape("sub", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(n, m, out, Op::Sub(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (n, m) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        let ng = self.ng(a);
        self.push(n, m, out, Op::Scale(a, s), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let (n, m) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let ng = self.ng(a);
        self.push(n, m, out, Op::LeakyRelu(a, slope), ng)
    }

    /// Row-wise softmax of `x + mask`, the mask addressed with query rows
    /// offset by `row_offset`.
    pub fn softmax_rows(&mut self, x: Var, mask: &Mask, row_offset: usize) -> Result<Var> {
        let (n, m) = self.shape(x);
        let mut out = self.value(x).to_vec();
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for (j, v) in row.iter_mut().enumerate() {
                *v += mask.bias(row_offset + i, j);
            }
            if !softmax_in_place(row) {
                return Err(Error::DegenerateRow { row: i });
            }
        }
        let ng = self.ng(x);
        Ok(self.push(n, m, out, Op::Softmax(x), ng))
    }

    /// Per-row layer normalization with learned gain and shift (1×d each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.shape(x);
        for p in [gamma, beta] {
            let (r, c) = self.shape(p);
            if r != 1 || c != d {
                return Err(Error::shape("layer_norm", &[n, d], &[r, c]));
            }
        }
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            n,
            d,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = match parts.first() {
            Some(&p) => self.shape(p).0,
            None => return Err(Error::Length("concat of nothing".into())),
        };
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != n {
                return Err(Error::shape("concat_cols", &[n, m], &[r, c]));
            }
            m += c;
        }
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(n, m, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(&p) => self.shape(p).1,
            None => return Err(Error::Length("concat of nothing".into())),
        };
        let mut n = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != m {
                return Err(Error::shape("concat_rows", &[n, m], &[r, c]));
            }
            n += r;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(n, m, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Tiles a single row `n` times.
    pub fn repeat_rows(&mut self, row: Var, n: usize) -> Result<Var> {
        let (r, m) = self.shape(row);
        if r != 1 {
            return Err(Error::shape("repeat_rows", &[1, m], &[r, m]));
        }
        let out = self.value(row).repeat(n);
        let ng = self.ng(row);
        Ok(self.push(n, m, out, Op::RepeatRows(row), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.shape(x);
        if start + len > m {
            return Err(Error::shape("slice_cols", &[n, m], &[start, len]));
        }
        let xs = self.value(x);
        let out = (0..n)
            .flat_map(|i| xs[i * m + start..i * m + start + len].iter().copied())
            .collect();
        let ng = self.ng(x);
        Ok(self.push(n, len, out, Op::SliceCols(x, start), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.shape(x);
        if start + len > n {
            return Err(Error::shape("slice_rows", &[n, m], &[start, len]));
        }
        let out = self.value(x)[start * m..(start + len) * m].to_vec();
        let ng = self.ng(x);
        Ok(self.push(len, m, out, Op::SliceRows(x, start), ng))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is n×(H·dk), `k` is m×(H·dk), `v` is m×(H·dv); head `h` uses the
    /// h-th column block of each. Returns the heads concatenated, n×(H·dv).
    /// Query row `i` is addressed in the mask as `row_offset + i`. Masked
    /// keys contribute nothing, not even a signed zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &Mask,
        row_offset: usize,
    ) -> Result<Var> {
        let (n, qd) = self.shape(q);
        let (m, kd) = self.shape(k);
        let (mv, vd) = self.shape(v);
        if heads == 0 || qd != kd || m != mv || qd % heads != 0 || vd % heads != 0 {
            return Err(Error::shape("attention", &[n, qd, m, kd], &[mv, vd, heads]));
        }
        let dk = qd / heads;
        let dv = vd / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; n * heads * m];
        let mut out = vec![0.0; n * vd];
        for i in 0..n {
            for h in 0..heads {
                let p = &mut probs[(i * heads + h) * m..(i * heads + h + 1) * m];
                let qrow = &qs[i * qd + h * dk..i * qd + (h + 1) * dk];
                for (j, pj) in p.iter_mut().enumerate() {
                    let b = mask.bias(row_offset + i, j);
                    *pj = if b == f64::NEG_INFINITY {
                        b
                    } else {
                        dot(qrow, &ks[j * kd + h * dk..j * kd + (h + 1) * dk]) * scale + b
                    };
                }
                if !softmax_in_place(p) {
                    return Err(Error::DegenerateRow { row: i });
                }
                let orow = &mut out[i * vd + h * dv..i * vd + (h + 1) * dv];
                for (j, &pj) in p.iter().enumerate() {
                    if pj == 0.0 {
                        continue;
                    }
                    let vrow = &vs[j * vd + h * dv..j * vd + (h + 1) * dv];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += pj * x;
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            n,
            vd,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            },
            ng,
        ))
    }

    /// Row differences `x[t] - x[t-1]`, (n-1)×m.
    pub fn temporal_diff(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.shape(x);
        if n < 2 {
            return Err(Error::Length("temporal_diff needs at least two rows".into()));
        }
        let xs = self.value(x);
        let out = (1..n)
            .flat_map(|t| (0..m).map(move |j| xs[t * m + j] - xs[(t - 1) * m + j]))
            .collect();
        let ng = self.ng(x);
        Ok(self.push(n - 1, m, out, Op::TemporalDiff(x), ng))
    }

    /// `Σ w_i (pred_i − target_i)²` as a 1×1 node; `weights = None` means 1.
    pub fn weighted_sse(&mut self, pred: Var, target: &[f64], weights: Option<&[f64]>) -> Result<Var> {
        let (n, m) = self.shape(pred);
        if target.len() != n * m || weights.is_some_and(|w| w.len() != n * m) {
            return Err(Error::shape("weighted_sse", &[n, m], &[target.len()]));
        }
        let p = self.value(pred);
        let s = match weights {
            Some(w) => p
                .iter()
                .zip(target)
                .zip(w)
                .map(|((a, b), w)| w * (a - b) * (a - b))
                .sum(),
            None => p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum(),
        };
        let ng = self.ng(pred);
        Ok(self.push(
            1,
            1,
            vec![s],
            Op::WeightedSse {
                pred,
                target: target.to_vec(),
                weights: weights.map(<[f64]>::to_vec),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(1, 1, vec![s], Op::Sum(x), ng)
    }

    /// Weighted sum of scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, w) in terms {
            if self.shape(v) != (1, 1) {
                let (r, c) = self.shape(v);
                return Err(Error::shape("combine", &[1, 1], &[r, c]));
            }
            s += w * self.scalar(v);
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        Ok(self.push(1, 1, vec![s], Op::Combine(terms.to_vec()), ng))
    }

    /// Reverse sweep from a scalar output. Returns gradients of every leaf
    /// bound through [`Graph::param`] whose tensor requires grad.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.shape(out) != (1, 1) {
            let (r, c) = self.shape(out);
            return Err(Error::shape("backward", &[1, 1], &[r, c]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(g);
            }
        }

        let mut map = IndexMap::new();
        for (name, &v) in &self.params {
            if !self.ng(v) {
                continue;
            }
            let g = grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| vec![0.0; self.node(v).value.len()]);
            map.insert(name.clone(), g);
        }
        Ok(Gradients { map })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (n, m) = (node.rows, node.cols);
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (_, k) = self.shape(*a);
                if self.ng(*a) {
                    let ga = slot(grads, *a, n * k);
                    matmul_a_bt_acc(g, self.value(*b), ga, n, k, m);
                }
                if self.ng(*b) {
                    let gb = slot(grads, *b, k * m);
                    matmul_at_b_acc(self.value(*a), g, gb, n, k, m);
                }
            }
            Op::AddBias(x, b) => {
                if self.ng(*x) {
                    axpy(slot(grads, *x, n * m), g, 1.0);
                }
                if self.ng(*b) {
                    let gb = slot(grads, *b, m);
                    for row in g.chunks(m.max(1)) {
                        axpy(gb, row, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if self.ng(*x) {
                        axpy(slot(grads, *x, n * m), g, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    axpy(slot(grads, *a, n * m), g, 1.0);
                }
                if self.ng(*b) {
                    axpy(slot(grads, *b, n * m), g, -1.0);
                }
            }
            Op::Scale(a, s) => axpy(slot(grads, *a, n * m), g, *s),
            Op::LeakyRelu(a, slope) => {
                let xs = self.value(*a);
                let ga = slot(grads, *a, n * m);
                for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(xs) {
                    *o += if x > 0.0 { gi } else { slope * gi };
                }
            }
            Op::Softmax(x) => {
                let p = &node.value;
                let gx = slot(grads, *x, n * m);
                for i in 0..n {
                    let pr = &p[i * m..(i + 1) * m];
                    let gr = &g[i * m..(i + 1) * m];
                    let s = dot(pr, gr);
                    for j in 0..m {
                        gx[i * m + j] += pr[j] * (gr[j] - s);
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
                let d = m;
                if self.ng(*gamma) {
                    let gg = slot(grads, *gamma, d);
                    for i in 0..n {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if self.ng(*beta) {
                    let gb = slot(grads, *beta, d);
                    for row in g.chunks(d) {
                        axpy(gb, row, 1.0);
                    }
                }
                if self.ng(*x) {
                    let gam = self.value(*gamma);
                    let gx = slot(grads, *x, n * d);
                    let mut dxhat = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            dxhat[j] = g[i * d + j] * gam[j];
                        }
                        let xh = &xhat[i * d..(i + 1) * d];
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dot(&dxhat, xh) / d as f64;
                        for j in 0..d {
                            gx[i * d + j] += rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.shape(p).1;
                    if self.ng(p) {
                        let gp = slot(grads, p, n * c);
                        for i in 0..n {
                            axpy(&mut gp[i * c..(i + 1) * c], &g[i * m + off..i * m + off + c], 1.0);
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.node(p).value.len();
                    if self.ng(p) {
                        axpy(slot(grads, p, len), &g[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            Op::RepeatRows(row) => {
                let gr = slot(grads, *row, m);
                for chunk in g.chunks(m.max(1)) {
                    axpy(gr, chunk, 1.0);
                }
            }
            Op::SliceCols(x, start) => {
                let xm = self.shape(*x).1;
                let gx = slot(grads, *x, n * xm);
                for i in 0..n {
                    axpy(&mut gx[i * xm + start..i * xm + start + m], &g[i * m..(i + 1) * m], 1.0);
                }
            }
            Op::SliceRows(x, start) => {
                let len = self.node(*x).value.len();
                let gx = slot(grads, *x, len);
                axpy(&mut gx[start * m..(start + n) * m], g, 1.0);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            } => self.backprop_attention(n, g, *q, *k, *v, *heads, *scale, probs, grads),
            Op::TemporalDiff(x) => {
                let gx = slot(grads, *x, (n + 1) * m);
                for t in 0..n {
                    for j in 0..m {
                        gx[(t + 1) * m + j] += g[t * m + j];
                        gx[t * m + j] -= g[t * m + j];
                    }
                }
            }
            Op::WeightedSse {
                pred,
                target,
                weights,
            } => {
                let p = self.value(*pred);
                let gp = slot(grads, *pred, p.len());
                let g0 = g[0];
                match weights {
                    Some(w) => {
                        for i in 0..p.len() {
                            gp[i] += g0 * 2.0 * w[i] * (p[i] - target[i]);
                        }
                    }
                    None => {
                        for i in 0..p.len() {
                            gp[i] += g0 * 2.0 * (p[i] - target[i]);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let len = self.node(*x).value.len();
                let gx = slot(grads, *x, len);
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Combine(terms) => {
                for &(v, w) in terms {
                    if self.ng(v) {
                        slot(grads, v, 1)[0] += w * g[0];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        n: usize,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (m, kd) = self.shape(k);
        let vd = self.shape(v).1;
        let qd = kd;
        let dk = kd / heads;
        let dv = vd / heads;
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![0.0; n * qd];
        let mut gk = vec![0.0; m * kd];
        let mut gv = vec![0.0; m * vd];
        let mut dp = vec![0.0; m];
        for i in 0..n {
            for h in 0..heads {
                let p = &probs[(i * heads + h) * m..(i * heads + h + 1) * m];
                let grow = &g[i * vd + h * dv..i * vd + (h + 1) * dv];
                let mut s = 0.0;
                for j in 0..m {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vrow = &vs[j * vd + h * dv..j * vd + (h + 1) * dv];
                    dp[j] = dot(grow, vrow);
                    s += p[j] * dp[j];
                    axpy(&mut gv[j * vd + h * dv..j * vd + (h + 1) * dv], grow, p[j]);
                }
                let qrow = &qs[i * qd + h * dk..i * qd + (h + 1) * dk];
                for j in 0..m {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = &ks[j * kd + h * dk..j * kd + (h + 1) * dk];
                    axpy(&mut gq[i * qd + h * dk..i * qd + (h + 1) * dk], krow, ds);
                    axpy(&mut gk[j * kd + h * dk..j * kd + (h + 1) * dk], qrow, ds);
                }
            }
        }
        if self.ng(q) {
            axpy(slot(grads, q, n * qd), &gq, 1.0);
        }
        if self.ng(k) {
            axpy(slot(grads, k, m * kd), &gk, 1.0);
        }
        if self.ng(v) {
            axpy(slot(grads, v, m * vd), &gv, 1.0);
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, shape: Vec<usize>, values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::new(shape, values).unwrap()).unwrap();
        s
    }

    #[test]
    fn matmul_gradient_matches_hand_derivation() {
        // f = sum(x·W) with x = [1, 2]; df/dW[i][j] = x[i]
        let store = store_with("w", vec![2, 3], vec![0.5; 6]);
        let mut g = Graph::new();
        let x = g.constant(1, 2, vec![1.0, 2.0]).unwrap();
        let w = g.param(&store, "w").unwrap();
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y);
        assert!((g.scalar(s) - 4.5).abs() < 1e-12);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("w").unwrap(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut store = store_with("w", vec![1, 1], vec![2.0]);
        store
            .insert("u", Tensor::new(vec![1, 1], vec![3.0]).unwrap())
            .unwrap();
        store.get_mut("u").unwrap().set_requires_grad(false);
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let u = g.param(&store, "u").unwrap();
        let y = g.matmul(w, u).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("w").unwrap(), &[3.0]);
        assert!(grads.get("u").is_none());
    }

    #[test]
    fn same_name_binds_once() {
        let store = store_with("w", vec![1, 1], vec![2.0]);
        let mut g = Graph::new();
        let a = g.param(&store, "w").unwrap();
        let b = g.param(&store, "w").unwrap();
        assert_eq!(a, b);
        let y = g.matmul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("w").unwrap(), &[4.0]);
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(2, 2, vec![0.0; 4]).unwrap();
        let bias = BiasMatrix::new(2, 2, vec![0.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
        let r = g.softmax_rows(x, &Mask::Custom(Arc::new(bias)), 0);
        assert!(matches!(r, Err(Error::DegenerateRow { row: 1 })));
    }

    #[test]
    fn bias_matrix_rejects_positive_infinity() {
        assert!(BiasMatrix::new(1, 1, vec![f64::INFINITY]).is_err());
        assert!(BiasMatrix::new(1, 1, vec![f64::NAN]).is_err());
        assert!(BiasMatrix::new(1, 1, vec![f64::NEG_INFINITY]).is_ok());
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut gr = Gradients::default();
        gr.map.insert("a".into(), vec![3.0, 4.0]);
        gr.clip_global_norm(1.0);
        assert!((gr.global_norm() - 1.0).abs() < 1e-12);
        assert!((gr.get("a").unwrap()[0] - 0.6).abs() < 1e-12);
    }
}
