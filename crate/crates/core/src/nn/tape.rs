//! Operation tape. Every op records its inputs and whatever it needs for the
//! vector-Jacobian product; [`Tape::backward`] walks the tape in reverse.

use super::{gemm, Float, ParamStore, Tensor};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<T>, rstd: Vec<T> },
    SoftmaxCausal(Var),
    Attention { qkv: Var, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    Gather { a: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Dropout { a: Var, mask: Vec<T> },
    Mse { a: Var, target: Vec<T> },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recording of one forward pass.
pub struct Tape<'p, T: Float> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<usize, Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'p, T: Float> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            dropout_rng: None,
        }
    }

    pub fn detached() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            dropout_rng: None,
        }
    }

    /// Enable dropout, drawing masks from a generator seeded with `seed`.
    pub fn train_mode(&mut self, seed: u64) {
        self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match self.nodes[v.0].op {
            Op::Param(i) => self.params.expect("param node without store").tensor(i),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.value(v).shape
    }

    /// Input data; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free variable whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Node for the named parameter, shared across calls.
    pub fn param(&mut self, name: &str) -> Var {
        let store = self.params.expect("tape has no parameter store");
        let id = store
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(Tensor::zeros(vec![0]), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, m, n, k, &self.value(a).data, &self.value(b).data, T::zero(), &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    /// `x @ w + b` over the last dimension of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let k = *sx.last().unwrap_or(&1);
        if sw.len() != 2 || sw[0] != k {
            return Err(shape_err("linear", &sx, &sw));
        }
        let n = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(shape_err("linear bias", &sw, self.shape(b)));
            }
        }
        let m = if k == 0 {
            sx.iter().take(sx.len().saturating_sub(1)).product()
        } else {
            self.value(x).len() / k
        };
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bias = &self.value(b).data;
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        gemm(false, false, m, n, k, &self.value(x).data, &self.value(w).data, T::one(), &mut out);
        let mut shape = sx[..sx.len().saturating_sub(1)].to_vec();
        shape.push(n);
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(shape, out), Op::Linear { x, w, b }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape.clone(), v.data.iter().map(|&x| x * s).collect());
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(
            v.shape.clone(),
            v.data.iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect(),
        );
        let ng = self.needs(a);
        self.push(t, Op::Relu(a), ng)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::of(GELU_C);
        let k = T::of(0.044715);
        let half = T::of(0.5);
        let v = self.value(a);
        let data = v
            .data
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let t = Tensor::new(v.shape.clone(), data);
        let ng = self.needs(a);
        self.push(t, Op::Gelu(a), ng)
    }

    /// Normalize over the last dimension, then apply `g * xhat + b`.
    pub fn layernorm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap_or(&1);
        if self.shape(g) != [n] || self.shape(b) != [n] {
            return Err(shape_err("layernorm", &sx, self.shape(g)));
        }
        let eps = T::of(1e-5);
        let nf = T::of(n as f64);
        let xv = &self.value(x).data;
        let rows = xv.len() / n;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / nf;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let gv = &self.value(g).data;
        let bv = &self.value(b).data;
        let mut out = xhat.clone();
        for row in out.chunks_mut(n) {
            for ((o, &gg), &bb) in row.iter_mut().zip(gv).zip(bv) {
                *o = *o * gg + bb;
            }
        }
        let ng = self.needs(x) || self.needs(g) || self.needs(b);
        Ok(self.push(Tensor::new(sx, out), Op::LayerNorm { x, g, b, xhat, rstd }, ng))
    }

    /// Row-wise softmax over square trailing blocks, masking entries above
    /// the diagonal.
    pub fn softmax_causal(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || sx[sx.len() - 1] != sx[sx.len() - 2] {
            return Err(shape_err("softmax_causal", &sx, &sx));
        }
        let t = sx[sx.len() - 1];
        let xv = &self.value(x).data;
        let mut out = vec![T::zero(); xv.len()];
        for (block_in, block_out) in xv.chunks(t * t).zip(out.chunks_mut(t * t)) {
            for i in 0..t {
                causal_softmax_row(&block_in[i * t..i * t + i + 1], &mut block_out[i * t..i * t + i + 1]);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(sx, out), Op::SoftmaxCausal(x), ng))
    }

    /// Multi-head causal self-attention on packed `[q | k | v]` rows of shape
    /// `[batch * seq, 3 * d]`; returns `[batch * seq, d]`.
    pub fn causal_attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 2 || s[0] != batch * seq || s[1] % (3 * heads) != 0 {
            return Err(shape_err("causal_attention", &s, &[batch * seq, 3 * heads]));
        }
        let d = s[1] / 3;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let x = &self.value(qkv).data;
        let mut out = vec![T::zero(); batch * seq * d];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let stride = 3 * d;
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let p_block = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                for i in 0..seq {
                    let q = &x[(b * seq + i) * stride + h * dh..][..dh];
                    for (j, sc) in scores.iter_mut().enumerate().take(i + 1) {
                        let k = &x[(b * seq + j) * stride + d + h * dh..][..dh];
                        *sc = dot(q, k) * scale;
                    }
                    let p_row = &mut p_block[i * seq..i * seq + i + 1];
                    causal_softmax_row(&scores[..=i], p_row);
                    let o = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for (j, &p) in p_row.iter().enumerate() {
                        let v = &x[(b * seq + j) * stride + 2 * d + h * dh..][..dh];
                        for (oo, &vv) in o.iter_mut().zip(v) {
                            *oo += p * vv;
                        }
                    }
                }
            }
        }
        let ng = self.needs(qkv);
        Ok(self.push(
            Tensor::new(vec![batch * seq, d], out),
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// 2D convolution over `[n, c, h, w]` with weights `[o, c, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        if self.shape(b) != [sw[0]] {
            return Err(shape_err("conv2d bias", &sw, self.shape(b)));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err("conv2d kernel", &sx, &sw));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let (patch, ohw) = (geom.patch(), geom.out_hw());
        let xv = &self.value(x).data;
        let mut cols = vec![T::zero(); n * patch * ohw];
        for i in 0..n {
            im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], &geom, &mut cols[i * patch * ohw..(i + 1) * patch * ohw]);
        }
        let wv = &self.value(w).data;
        let bv = &self.value(b).data;
        let mut out = vec![T::zero(); n * o * ohw];
        for i in 0..n {
            let dst = &mut out[i * o * ohw..(i + 1) * o * ohw];
            for (oc, row) in dst.chunks_mut(ohw).enumerate() {
                row.fill(bv[oc]);
            }
            gemm(false, false, o, ohw, patch, wv, &cols[i * patch * ohw..(i + 1) * patch * ohw], T::one(), dst);
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![n, o, geom.ho, geom.wo], out),
            Op::Conv2d { x, w, b, geom, cols },
            ng,
        ))
    }

    /// Select rows of a 2D view (`[rows, last_dim]`).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let cols = v.cols();
        let rows = v.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", &v.shape, &[bad]));
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&v.data[i * cols..(i + 1) * cols]);
        }
        let ng = self.needs(a);
        Ok(self.push(
            Tensor::new(vec![idx.len(), cols], out),
            Op::Gather {
                a,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Embedding lookup: rows of `table` selected by `idx`.
    pub fn embed(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        self.gather_rows(table, idx)
    }

    /// Concatenate 2D views along the last dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); rows * total];
        let mut off = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let src = &self.value(p).data;
            for r in 0..rows {
                out[r * total + off..r * total + off + wd].copy_from_slice(&src[r * wd..(r + 1) * wd]);
            }
            off += wd;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(vec![rows, total], out), Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Stack 2D views vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(shape_err("concat_rows", self.shape(parts[0]), &v.shape));
            }
            out.extend_from_slice(&v.data);
        }
        let rows = out.len() / cols.max(1);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(vec![rows, cols], out), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a);
        if shape.iter().product::<usize>() != v.len() {
            return Err(shape_err("reshape", &v.shape, &shape));
        }
        let t = Tensor::new(shape, v.data.clone());
        let ng = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Inverted dropout; the identity outside training mode.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if p <= 0.0 || self.dropout_rng.is_none() {
            return a;
        }
        let n = self.value(a).len();
        let rng = self.dropout_rng.as_mut().expect("training mode");
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let v = self.value(a);
        let t = Tensor::new(v.shape.clone(), v.data.iter().zip(&mask).map(|(&x, &m)| x * m).collect());
        let ng = self.needs(a);
        self.push(t, Op::Dropout { a, mask }, ng)
    }

    /// Mean squared error against fixed targets; returns a scalar.
    pub fn mse(&mut self, a: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(a) != target.shape.as_slice() {
            return Err(shape_err("mse", self.shape(a), &target.shape));
        }
        let v = &self.value(a).data;
        let n = T::of(v.len().max(1) as f64);
        let loss = v
            .iter()
            .zip(&target.data)
            .fold(T::zero(), |s, (&x, &y)| s + (x - y) * (x - y))
            / n;
        let ng = self.needs(a);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                a,
                target: target.data.clone(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().fold(T::zero(), |s, &x| s + x);
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Sign pattern of every ReLU input on the tape, for detecting kinks
    /// crossed by finite-difference probes.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.value(a).data.iter().map(|&x| x > T::zero()));
            }
        }
        out
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let ls = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let param_vars = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Grads { grads, param_vars })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(a) {
                    let da = self.grad_buf(grads, a);
                    gemm(false, true, m, k, n, g, &self.value(b).data, T::one(), da);
                }
                if self.needs(b) {
                    let db = self.grad_buf(grads, b);
                    gemm(true, false, k, n, m, &self.value(a).data, g, T::one(), db);
                }
            }
            &Op::Linear { x, w, b } => {
                let sw = self.shape(w);
                let (k, n) = (sw[0], sw[1]);
                let m = g.len() / n.max(1);
                if self.needs(x) {
                    let dx = self.grad_buf(grads, x);
                    gemm(false, true, m, k, n, g, &self.value(w).data, T::one(), dx);
                }
                if self.needs(w) {
                    let dw = self.grad_buf(grads, w);
                    gemm(true, false, k, n, m, &self.value(x).data, g, T::one(), dw);
                }
                if let Some(b) = b {
                    if self.needs(b) {
                        let db = self.grad_buf(grads, b);
                        for row in g.chunks(n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(v) {
                        axpy(self.grad_buf(grads, v), g, T::one());
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.needs(v) {
                        let o = &self.value(other).data;
                        let d = self.grad_buf(grads, v);
                        for ((d, &gg), &oo) in d.iter_mut().zip(g).zip(o) {
                            *d += gg * oo;
                        }
                    }
                }
            }
            &Op::Scale(a, s) => {
                if self.needs(a) {
                    axpy(self.grad_buf(grads, a), g, s);
                }
            }
            &Op::Relu(a) => {
                if self.needs(a) {
                    let x = &self.value(a).data;
                    let d = self.grad_buf(grads, a);
                    for ((d, &gg), &xx) in d.iter_mut().zip(g).zip(x) {
                        if xx > T::zero() {
                            *d += gg;
                        }
                    }
                }
            }
            &Op::Gelu(a) => {
                if self.needs(a) {
                    let c = T::of(GELU_C);
                    let k = T::of(0.044715);
                    let half = T::of(0.5);
                    let three = T::of(3.0);
                    let x = &self.value(a).data;
                    let d = self.grad_buf(grads, a);
                    for ((d, &gg), &xx) in d.iter_mut().zip(g).zip(x) {
                        let u = c * (xx + k * xx * xx * xx);
                        let th = u.tanh();
                        let du = c * (T::one() + three * k * xx * xx);
                        let dy = half * (T::one() + th) + half * xx * (T::one() - th * th) * du;
                        *d += gg * dy;
                    }
                }
            }
            Op::LayerNorm { x, g: gam, b, xhat, rstd } => {
                let n = self.value(*gam).len();
                let gv = &self.value(*gam).data;
                if self.needs(*gam) {
                    let dg = self.grad_buf(grads, *gam);
                    for (row_g, row_x) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((d, &gg), &xh) in dg.iter_mut().zip(row_g).zip(row_x) {
                            *d += gg * xh;
                        }
                    }
                }
                if self.needs(*b) {
                    let db = self.grad_buf(grads, *b);
                    for row_g in g.chunks(n) {
                        axpy(db, row_g, T::one());
                    }
                }
                if self.needs(*x) {
                    let nf = T::of(n as f64);
                    let dx = self.grad_buf(grads, *x);
                    let mut dxhat = vec![T::zero(); n];
                    for (r, (row_g, row_x)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            dxhat[j] = row_g[j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * row_x[j];
                        }
                        let scale = rstd[r] / nf;
                        for j in 0..n {
                            dx[r * n + j] += scale * (nf * dxhat[j] - s1 - row_x[j] * s2);
                        }
                    }
                }
            }
            &Op::SoftmaxCausal(x) => {
                if self.needs(x) {
                    let y = &node.value.data;
                    let t = *node.value.shape.last().expect("square blocks");
                    let dx = self.grad_buf(grads, x);
                    for ((yb, gb), db) in y.chunks(t * t).zip(g.chunks(t * t)).zip(dx.chunks_mut(t * t)) {
                        for i in 0..t {
                            let yr = &yb[i * t..i * t + i + 1];
                            let gr = &gb[i * t..i * t + i + 1];
                            let s = dot(yr, gr);
                            for j in 0..=i {
                                db[i * t + j] += yr[j] * (gr[j] - s);
                            }
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                if self.needs(*qkv) {
                    self.attention_backward(*qkv, *batch, *seq, *heads, probs, g, grads);
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (patch, ohw) = (geom.patch(), geom.out_hw());
                let o = geom.o;
                if self.needs(*w) {
                    let dw = self.grad_buf(grads, *w);
                    for i in 0..geom.n {
                        gemm(
                            false,
                            true,
                            o,
                            patch,
                            ohw,
                            &g[i * o * ohw..(i + 1) * o * ohw],
                            &cols[i * patch * ohw..(i + 1) * patch * ohw],
                            T::one(),
                            dw,
                        );
                    }
                }
                if self.needs(*b) {
                    let db = self.grad_buf(grads, *b);
                    for img in g.chunks(o * ohw) {
                        for (oc, row) in img.chunks(ohw).enumerate() {
                            db[oc] += row.iter().fold(T::zero(), |s, &v| s + v);
                        }
                    }
                }
                if self.needs(*x) {
                    let wv = &self.value(*w).data;
                    let mut dcols = vec![T::zero(); patch * ohw];
                    let img = geom.c * geom.h * geom.w;
                    let dx = self.grad_buf(grads, *x);
                    for i in 0..geom.n {
                        gemm(true, false, patch, ohw, o, wv, &g[i * o * ohw..(i + 1) * o * ohw], T::zero(), &mut dcols);
                        col2im(&dcols, geom, &mut dx[i * img..(i + 1) * img]);
                    }
                }
            }
            Op::Gather { a, idx } => {
                if self.needs(*a) {
                    let cols = self.value(*a).cols();
                    let da = self.grad_buf(grads, *a);
                    for (k, &r) in idx.iter().enumerate() {
                        axpy(&mut da[r * cols..(r + 1) * cols], &g[k * cols..(k + 1) * cols], T::one());
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let wd = self.value(p).cols();
                    if self.needs(p) {
                        let dp = self.grad_buf(grads, p);
                        for r in 0..rows {
                            axpy(&mut dp[r * wd..(r + 1) * wd], &g[r * total + off..r * total + off + wd], T::one());
                        }
                    }
                    off += wd;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.needs(p) {
                        axpy(self.grad_buf(grads, p), &g[off..off + len], T::one());
                    }
                    off += len;
                }
            }
            &Op::Reshape(a) => {
                if self.needs(a) {
                    axpy(self.grad_buf(grads, a), g, T::one());
                }
            }
            Op::Dropout { a, mask } => {
                if self.needs(*a) {
                    let d = self.grad_buf(grads, *a);
                    for ((d, &gg), &m) in d.iter_mut().zip(g).zip(mask) {
                        *d += gg * m;
                    }
                }
            }
            Op::Mse { a, target } => {
                if self.needs(*a) {
                    let x = &self.value(*a).data;
                    let k = g[0] * T::of(2.0 / x.len().max(1) as f64);
                    let d = self.grad_buf(grads, *a);
                    for ((d, &xx), &tt) in d.iter_mut().zip(x).zip(target) {
                        *d += k * (xx - tt);
                    }
                }
            }
            &Op::Sum(a) => {
                if self.needs(a) {
                    let g0 = g[0];
                    self.grad_buf(grads, a).iter_mut().for_each(|d| *d += g0);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let x = &self.value(qkv).data;
        let d = x.len() / (batch * seq) / 3;
        let dh = d / heads;
        let stride = 3 * d;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let dx = self.grad_buf(grads, qkv);
        let mut dp = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let p_block = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                for i in 0..seq {
                    let go = &g[(b * seq + i) * d + h * dh..][..dh];
                    let p_row = &p_block[i * seq..i * seq + i + 1];
                    for j in 0..=i {
                        let v = &x[(b * seq + j) * stride + 2 * d + h * dh..][..dh];
                        dp[j] = dot(go, v);
                        // dV_j += p_ij * dO_i
                        let dv = &mut dx[(b * seq + j) * stride + 2 * d + h * dh..][..dh];
                        for (dd, &gg) in dv.iter_mut().zip(go) {
                            *dd += p_row[j] * gg;
                        }
                    }
                    let s = dot(p_row, &dp[..=i]);
                    for j in 0..=i {
                        let ds = p_row[j] * (dp[j] - s) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let qi = (b * seq + i) * stride + h * dh;
                        let kj = (b * seq + j) * stride + d + h * dh;
                        for e in 0..dh {
                            let (qv, kv) = (x[qi + e], x[kj + e]);
                            dx[qi + e] += ds * kv;
                            dx[kj + e] += ds * qv;
                        }
                    }
                }
            }
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let len = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }
}

fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

fn axpy<T: Float>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn causal_softmax_row<T: Float>(x: &[T], out: &mut [T]) {
    let m = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut s = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o = *o / s;
    }
}

fn im2col<T: Float>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ohw = g.out_hw();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            img[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let ohw = g.out_hw();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            img[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients from one reverse pass.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    param_vars: Vec<(usize, Var)>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Store gradients on every parameter of `store`; parameters the loss
    /// does not reach get zeros.
    pub fn write_to(&self, store: &mut ParamStore<T>) {
        let mut seen = vec![false; store.len()];
        for &(id, v) in &self.param_vars {
            let g = self.grads[v.0]
                .clone()
                .unwrap_or_else(|| vec![T::zero(); store.tensor(id).len()]);
            store.set_grad(id, g);
            seen[id] = true;
        }
        for (id, s) in seen.into_iter().enumerate() {
            if !s {
                let n = store.tensor(id).len();
                store.set_grad(id, vec![T::zero(); n]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::normal;
    use rand::SeedableRng;

    type Build = dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Var;

    /// Compare the tape gradient of `sum(build(inputs) * probe)` against
    /// central differences for every input coordinate.
    fn check(shapes: &[Vec<usize>], build: &Build) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| normal(&mut rng, s.clone(), 1.0)).collect();
        let eval = |xs: &[Tensor<f64>]| -> (f64, Vec<bool>) {
            let mut t = Tape::<f64>::detached();
            let vars: Vec<Var> = xs.iter().map(|x| t.variable(x.clone())).collect();
            let out = build(&mut t, &vars);
            let probe = probe_for(t.value(out));
            let p = t.constant(probe);
            let m = t.mul(out, p).unwrap();
            let s = t.sum(m);
            (t.value(s).data[0], t.relu_pattern())
        };
        let mut t = Tape::<f64>::detached();
        let vars: Vec<Var> = inputs.iter().map(|x| t.variable(x.clone())).collect();
        let out = build(&mut t, &vars);
        let p = t.constant(probe_for(t.value(out)));
        let m = t.mul(out, p).unwrap();
        let s = t.sum(m);
        let grads = t.backward(s).unwrap();
        let (_, base_pattern) = eval(&inputs);
        let h = 1e-5;
        for (k, v) in vars.iter().enumerate() {
            let g = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
            for i in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].data[i] += h;
                let mut minus = inputs.clone();
                minus[k].data[i] -= h;
                let (fp, pp) = eval(&plus);
                let (fm, pm) = eval(&minus);
                if pp != base_pattern || pm != base_pattern {
                    continue;
                }
                let fd = (fp - fm) / (2.0 * h);
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1.0);
                assert!(err <= 1e-6, "input {k}[{i}]: tape {} vs fd {fd}", g[i]);
            }
        }
    }

    fn probe_for(t: &Tensor<f64>) -> Tensor<f64> {
        let data = (0..t.len()).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        Tensor::new(t.shape.clone(), data)
    }

    #[test]
    fn grad_matmul() {
        check(&[vec![3, 4], vec![4, 2]], &|t, v| t.matmul(v[0], v[1]).unwrap());
    }

    #[test]
    fn grad_linear() {
        check(&[vec![2, 3, 4], vec![4, 5], vec![5]], &|t, v| t.linear(v[0], v[1], Some(v[2])).unwrap());
    }

    #[test]
    fn grad_elementwise() {
        check(&[vec![6], vec![6]], &|t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let m = t.mul(a, v[1]).unwrap();
            let s = t.scale(m, 0.7);
            let r = t.relu(s);
            t.gelu(r)
        });
        check(&[vec![2, 5]], &|t, v| t.gelu(v[0]));
    }

    #[test]
    fn grad_layernorm() {
        check(&[vec![3, 6], vec![6], vec![6]], &|t, v| t.layernorm(v[0], v[1], v[2]).unwrap());
    }

    #[test]
    fn grad_softmax_causal() {
        check(&[vec![2, 4, 4]], &|t, v| t.softmax_causal(v[0]).unwrap());
    }

    #[test]
    fn grad_attention() {
        check(&[vec![2 * 3, 3 * 4]], &|t, v| t.causal_attention(v[0], 2, 3, 2).unwrap());
    }

    #[test]
    fn grad_conv2d() {
        check(&[vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]], &|t, v| t.conv2d(v[0], v[1], v[2], 2, 0).unwrap());
        check(&[vec![1, 1, 4, 4], vec![2, 1, 3, 3], vec![2]], &|t, v| t.conv2d(v[0], v[1], v[2], 1, 1).unwrap());
    }

    #[test]
    fn grad_structural() {
        check(&[vec![4, 3], vec![4, 2], vec![2, 5]], &|t, v| {
            let g = t.gather_rows(v[0], &[2, 0, 2]).unwrap();
            let c = t.concat_cols(&[v[0], v[1]]).unwrap();
            let c = t.reshape(c, vec![2, 10]).unwrap();
            let rows = t.concat_rows(&[c, c]).unwrap();
            let g2 = t.reshape(g, vec![9, 1]).unwrap();
            let tail = t.reshape(v[2], vec![10, 1]).unwrap();
            let flat = t.reshape(rows, vec![40, 1]).unwrap();
            let all = t.concat_rows(&[g2, tail, flat]).unwrap();
            t.reshape(all, vec![59]).unwrap()
        });
    }

    #[test]
    fn grad_mse() {
        let target = Tensor::from_f64(vec![2, 2], &[0.1, -0.3, 0.5, 2.0]);
        check(&[vec![2, 2]], &move |t, v| t.mse(v[0], &target).unwrap());
    }

    #[test]
    fn sum_of_squares() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("w", Tensor::from_f64(vec![3], &[1.0, -2.0, 0.25]), true);
        let mut t = Tape::new(&ps);
        let w = t.param("w");
        let sq = t.mul(w, w).unwrap();
        let l = t.sum(sq);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap(), &[2.0, -4.0, 0.5]);
        let mut ps2 = ps.clone();
        g.write_to(&mut ps2);
        assert_eq!(ps2.grad(0).unwrap(), &[2.0, -4.0, 0.5]);
    }

    #[test]
    fn forward_examples() {
        let mut t = Tape::<f64>::detached();
        let eye = t.constant(Tensor::from_f64(vec![3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = t.constant(Tensor::from_f64(vec![3, 2], &[1., 2., 3., 4., 5., 6.]));
        let p = t.matmul(eye, a).unwrap();
        assert_eq!(t.value(p), t.value(a));

        let x = t.constant(Tensor::full(vec![1, 4], 3.5));
        let g = t.constant(Tensor::full(vec![4], 1.0));
        let b = t.constant(Tensor::zeros(vec![4]));
        let y = t.layernorm(x, g, b).unwrap();
        assert!(t.value(y).data.iter().all(|&v| v == 0.0));

        // one-hot at (2,2) of a 5x5 image; each output pixel sees the kernel
        // entry aligned with the hot pixel
        let mut img = vec![0.0; 25];
        img[12] = 1.0;
        let x = t.constant(Tensor::new(vec![1, 1, 5, 5], img));
        let k: Vec<f64> = (1..=9).map(f64::from).collect();
        let w = t.constant(Tensor::new(vec![1, 1, 3, 3], k));
        let b = t.constant(Tensor::zeros(vec![1]));
        let y = t.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 3, 3]);
        assert_eq!(t.value(y).data, vec![9., 8., 7., 6., 5., 4., 3., 2., 1.]);
    }

    #[test]
    fn shape_errors_name_op() {
        let mut t = Tape::<f32>::detached();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 3]));
        match t.matmul(a, b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(t.backward(a), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn causal_mask_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base: Tensor<f32> = normal(&mut rng, vec![6, 3 * 8], 1.0);
        let run = |x: &Tensor<f32>| {
            let mut t = Tape::<f32>::detached();
            let v = t.constant(x.clone());
            let o = t.causal_attention(v, 1, 6, 2).unwrap();
            t.value(o).data.clone()
        };
        let out0 = run(&base);
        for cut in 0..5 {
            let mut changed = base.clone();
            for row in cut + 1..6 {
                for c in 0..24 {
                    changed.data[row * 24 + c] = rng.gen::<f32>() * 10.0 - 5.0;
                }
            }
            let out1 = run(&changed);
            for pos in 0..=cut {
                for c in 0..8 {
                    assert_eq!(out0[pos * 8 + c].to_bits(), out1[pos * 8 + c].to_bits());
                }
            }
        }
    }

    #[test]
    fn eval_dropout_is_identity() {
        let mut t = Tape::<f64>::detached();
        let a = t.variable(Tensor::full(vec![10], 2.0));
        assert_eq!(t.dropout(a, 0.1), a);
        let mut t = Tape::<f64>::detached();
        t.train_mode(1);
        let a = t.variable(Tensor::full(vec![1000], 1.0));
        let d = t.dropout(a, 0.5);
        let kept = t.value(d).data.iter().filter(|&&v| v != 0.0).count();
        assert!((400..600).contains(&kept));
        assert!(t.value(d).data.iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
