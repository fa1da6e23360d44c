//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every value on the tape is a matrix `[rows, cols]`; sequences of a batch
//! are stacked along rows (`batch * len` rows). Operations are recorded in
//! execution order, so [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use avstage::nn::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.variable(Tensor::from_vec(&[1, 2], vec![3.0, -1.0]));
//! let y = g.mul(x, x);
//! let loss = g.sum(y);
//! let grads = g.backward(loss);
//! assert_eq!(g.scalar(loss), 10.0);
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0, -2.0]);
//! ```

use std::collections::BTreeMap;

use super::params::ParamTree;
use super::tensor::{gemm, MatMut, MatRef, Scalar, Tensor};
use crate::error::Result;

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Layout of a fused multi-head attention call.
///
/// Queries hold `batch * q_len` rows and keys/values `batch * kv_len` rows;
/// every example attends only within its own rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
    /// Query `i` may not see keys `j > i`.
    pub causal: bool,
    /// Number of valid keys per example; keys past it are ignored.
    pub key_valid: Option<Vec<usize>>,
}

impl AttentionSpec {
    pub fn self_attention(batch: usize, len: usize, heads: usize) -> Self {
        Self {
            batch,
            q_len: len,
            kv_len: len,
            heads,
            causal: false,
            key_valid: None,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    Silu(Var),
    Gelu(Var),
    Glu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<T>,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        b: Var,
        batch: usize,
        len: usize,
    },
    Gather {
        x: Var,
        index: Vec<Option<usize>>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    SegmentMean {
        x: Var,
        segments: Vec<(usize, usize)>,
    },
    L2NormRows {
        x: Var,
        norms: Vec<T>,
    },
    Sum(Var),
    /// Scalar output whose gradient w.r.t. each input was computed during
    /// the forward pass.
    Fused(Vec<(Var, Tensor<T>)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of trainable parameters, shaped like the parameters.
    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}

/// A recording of one forward computation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, (Var, Vec<usize>)>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn as_matrix<T>(t: Tensor<T>) -> Tensor<T> {
    if t.rank() == 2 {
        t
    } else {
        let (r, c) = (t.rows(), t.cols());
        t.reshaped(&[r, c])
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (y, dy)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; nothing on it requires gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
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
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.numel(), 1, "scalar() on a non-scalar value");
        t.data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(as_matrix(t), Op::Leaf, false)
    }

    /// A free input that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(as_matrix(t), Op::Leaf, true)
    }

    /// Loads a parameter from `tree`. Repeated calls with the same path
    /// return the same handle so gradients accumulate in one place.
    pub fn param(&mut self, tree: &ParamTree<T>, path: &str) -> Result<Var> {
        if let Some((v, _)) = self.params.get(path) {
            return Ok(*v);
        }
        let p = tree.get(path)?;
        let shape = p.tensor.shape().to_vec();
        let v = self.push(as_matrix(p.tensor.clone()), Op::Leaf, p.trainable);
        self.params.insert(path.to_string(), (v, shape));
        Ok(v)
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::dense(self.value(a).data(), m, k),
            MatRef::dense(self.value(b).data(), k, n),
            T::zero(),
            MatMut::dense(&mut out, m, n),
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b), ng)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&shape, data), op, ng)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x);
        let out = t.map(|&v| f(v));
        let ng = self.ng(x);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[1, cols]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.value(row).numel(), c, "broadcast row width");
        let rv = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for i in 0..r {
            for (o, b) in out.row_mut(i).iter_mut().zip(&rv) {
                *o += *b;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        self.push(out, Op::AddRow(x, row), ng)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<T>) -> Var {
        let (r, _) = self.shape(x);
        assert_eq!(factors.len(), r, "one factor per row");
        let mut out = self.value(x).clone();
        for (i, f) in factors.iter().enumerate() {
            for o in out.row_mut(i) {
                *o *= *f;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::ScaleRows(x, factors), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    /// Gated linear unit over columns: `a ⊙ σ(b)` where `x = [a | b]`.
    pub fn glu(&mut self, x: Var) -> Var {
        let (r, c2) = self.shape(x);
        assert!(c2 % 2 == 0, "glu needs an even width");
        let c = c2 / 2;
        let t = self.value(x);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row(i);
            for j in 0..c {
                out.push(row[j] * sigmoid(row[c + j]));
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[r, c], out), Op::Glu(x), ng)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (r, c) = self.shape(x);
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let n = T::from_usize(c).expect("width");
        let t = self.value(x);
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            Tensor::from_vec(&[r, c], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Scaled dot-product attention with `spec.heads` heads; `q`, `k`, `v`
    /// already projected. Returns the concatenated head outputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let (qr, d) = self.shape(q);
        let (kr, dk) = self.shape(k);
        let (vr, dv) = self.shape(v);
        assert_eq!(qr, spec.batch * spec.q_len, "query rows");
        assert_eq!(kr, spec.batch * spec.kv_len, "key rows");
        assert_eq!(vr, kr, "value rows");
        assert!(d == dk && d == dv && d % spec.heads == 0, "head split");
        let dh = d / spec.heads;
        let (tq, tk) = (spec.q_len, spec.kv_len);
        let scale = T::one() / T::from_usize(dh).expect("dh").sqrt();
        let mut probs = vec![T::zero(); spec.batch * spec.heads * tq * tk];
        let mut out = vec![T::zero(); qr * d];
        {
            let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            for b in 0..spec.batch {
                let valid = spec.key_valid.as_ref().map_or(tk, |kv| kv[b].min(tk));
                for h in 0..spec.heads {
                    let p = &mut probs[(b * spec.heads + h) * tq * tk..][..tq * tk];
                    gemm(
                        MatRef::block(qd, d, b * tq, tq, h * dh, dh),
                        MatRef::block(kd, d, b * tk, tk, h * dh, dh).t(),
                        T::zero(),
                        MatMut::dense(p, tq, tk),
                    );
                    for i in 0..tq {
                        let row = &mut p[i * tk..(i + 1) * tk];
                        let lim = if spec.causal { valid.min(i + 1) } else { valid };
                        let mut mx = T::neg_infinity();
                        for s in row[..lim].iter_mut() {
                            *s *= scale;
                            mx = mx.max(*s);
                        }
                        let mut z = T::zero();
                        for s in row[..lim].iter_mut() {
                            *s = (*s - mx).exp();
                            z += *s;
                        }
                        for s in row[..lim].iter_mut() {
                            *s /= z;
                        }
                        for s in row[lim..].iter_mut() {
                            *s = T::zero();
                        }
                    }
                    gemm(
                        MatRef::dense(p, tq, tk),
                        MatRef::block(vd, d, b * tk, tk, h * dh, dh),
                        T::zero(),
                        MatMut::block(&mut out, d, b * tq, tq, h * dh, dh),
                    );
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            Tensor::from_vec(&[qr, d], out),
            Op::Attention { q, k, v, spec, probs },
            ng,
        )
    }

    /// Per-channel 1-D convolution along time with zero "same" padding.
    /// `x` is `[batch*len, C]`, `w` is `[K, C]` with odd `K`, `b` is `[C]`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var, batch: usize, len: usize) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(r, batch * len, "conv rows");
        let wt = self.value(w);
        let kk = wt.numel() / c;
        assert_eq!(kk * c, wt.numel(), "kernel width");
        assert!(kk % 2 == 1, "kernel must be odd");
        let pad = kk / 2;
        let (xd, wd, bd) = (self.value(x).data(), wt.data(), self.value(b).data());
        let mut out = vec![T::zero(); r * c];
        for bi in 0..batch {
            for t in 0..len {
                let o = &mut out[(bi * len + t) * c..][..c];
                o.copy_from_slice(bd);
                for j in 0..kk {
                    let src = t as isize + j as isize - pad as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let xr = &xd[(bi * len + src as usize) * c..][..c];
                    let wr = &wd[j * c..][..c];
                    for ((o, &xv), &wv) in o.iter_mut().zip(xr).zip(wr) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            Tensor::from_vec(&[r, c], out),
            Op::DepthwiseConv { x, w, b, batch, len },
            ng,
        )
    }

    /// Row gather. Output row `r` concatenates input rows
    /// `index[r*width .. (r+1)*width]`; `None` contributes zeros.
    pub fn gather(&mut self, x: Var, index: Vec<Option<usize>>, width: usize) -> Var {
        let (xr, c) = self.shape(x);
        assert!(width >= 1 && index.len().is_multiple_of(width), "gather width");
        let rows = index.len() / width;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); index.len() * c];
        for (slot, src) in index.iter().enumerate() {
            if let Some(s) = *src {
                assert!(s < xr, "gather index {s} out of {xr}");
                out[slot * c..(slot + 1) * c].copy_from_slice(&xd[s * c..(s + 1) * c]);
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[rows, width * c], out), Op::Gather { x, index }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat width");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(&[rows, c], data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Reinterprets the row-major data with a new column count.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(x).clone().reshaped(&[rows, cols]);
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Mean over each `(start, len)` block of rows.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<(usize, usize)>) -> Var {
        let c = self.shape(x).1;
        let t = self.value(x);
        let mut out = vec![T::zero(); segments.len() * c];
        for (s, &(start, len)) in segments.iter().enumerate() {
            assert!(len > 0, "empty segment");
            let o = &mut out[s * c..(s + 1) * c];
            for r in start..start + len {
                for (o, v) in o.iter_mut().zip(t.row(r)) {
                    *o += *v;
                }
            }
            let n = T::from_usize(len).expect("len");
            for o in o.iter_mut() {
                *o /= n;
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::from_vec(&[segments.len(), c], out),
            Op::SegmentMean { x, segments },
            ng,
        )
    }

    /// Scales every row to unit Euclidean norm. Rows must be nonzero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (r, _) = self.shape(x);
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = out.row_mut(i);
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let ng = self.ng(x);
        self.push(out, Op::L2NormRows { x, norms }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[1, 1], vec![s]), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize(n).expect("numel"))
    }

    /// Records a scalar whose partial derivatives were computed by the
    /// caller. Each gradient tensor must match its input's shape.
    pub fn fused_scalar(&mut self, value: T, parts: Vec<(Var, Tensor<T>)>) -> Var {
        for (v, gt) in &parts {
            assert_eq!(gt.numel(), self.value(*v).numel(), "fused gradient shape");
        }
        let ng = parts.iter().any(|(v, _)| self.ng(*v));
        self.push(Tensor::from_vec(&[1, 1], vec![value]), Op::Fused(parts), ng)
    }

    /// Reverse sweep from a scalar.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        self.backward_from(loss, Tensor::from_vec(&[1, 1], vec![T::one()]))
    }

    /// Reverse sweep seeded with an explicit upstream gradient for `out`.
    pub fn backward_from(&self, out: Var, seed: Tensor<T>) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(seed.numel(), self.value(out).numel());
        let shape = self.value(out).shape().to_vec();
        grads[out.0] = Some(seed.reshaped(&shape));
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (path, (v, shape)) in &self.params {
            if !self.nodes[v.0].needs_grad {
                continue;
            }
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(shape))
                .reshaped(shape);
            params.insert(path.clone(), g);
        }
        Gradients { by_node: grads, params }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut Tensor<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        slot.as_mut()
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl Fn(usize, T) -> T, g: &Tensor<T>) {
        if let Some(dst) = self.acc(grads, v) {
            for (i, (d, &gv)) in dst.data_mut().iter_mut().zip(g.data()).enumerate() {
                *d += f(i, gv);
            }
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    gemm(
                        MatRef::dense(g.data(), m, n),
                        MatRef::dense(bv, k, n).t(),
                        T::one(),
                        MatMut::dense(da.data_mut(), m, k),
                    );
                }
                if let Some(db) = self.acc(grads, *b) {
                    gemm(
                        MatRef::dense(av, m, k).t(),
                        MatRef::dense(g.data(), m, n),
                        T::one(),
                        MatMut::dense(db.data_mut(), k, n),
                    );
                }
            }
            Op::Add(a, b) => {
                self.acc_with(grads, *a, |_, gv| gv, g);
                self.acc_with(grads, *b, |_, gv| gv, g);
            }
            Op::AddRow(x, row) => {
                self.acc_with(grads, *x, |_, gv| gv, g);
                if let Some(dr) = self.acc(grads, *row) {
                    let c = g.cols();
                    for i in 0..g.rows() {
                        for (d, v) in dr.data_mut().iter_mut().zip(&g.data()[i * c..(i + 1) * c]) {
                            *d += *v;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data();
                self.acc_with(grads, *a, |i, gv| gv * bv[i], g);
                let av = self.value(*a).data();
                self.acc_with(grads, *b, |i, gv| gv * av[i], g);
            }
            Op::Scale(x, c) => self.acc_with(grads, *x, |_, gv| gv * *c, g),
            Op::ScaleRows(x, f) => {
                let c = g.cols();
                self.acc_with(grads, *x, |i, gv| gv * f[i / c], g);
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                self.acc_with(
                    grads,
                    *x,
                    |i, gv| {
                        let s = sigmoid(xv[i]);
                        gv * s * (T::one() + xv[i] * (T::one() - s))
                    },
                    g,
                );
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc_with(grads, *x, |i, gv| gv * gelu_parts(xv[i]).1, g);
            }
            Op::Glu(x) => {
                let xv = self.value(*x);
                let c = g.cols();
                if let Some(dx) = self.acc(grads, *x) {
                    for r in 0..g.rows() {
                        let row = xv.row(r);
                        let gr = g.row(r);
                        let dr = dx.row_mut(r);
                        for j in 0..c {
                            let s = sigmoid(row[c + j]);
                            dr[j] += gr[j] * s;
                            dr[c + j] += gr[j] * row[j] * s * (T::one() - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = (g.rows(), g.cols());
                let gv = self.value(*gain).data();
                if let Some(dg) = self.acc(grads, *gain) {
                    let d = dg.data_mut();
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g.data()[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *bias) {
                    let d = db.data_mut();
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g.data()[i * c + j];
                        }
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let n = T::from_usize(c).expect("width");
                    let mut dxh = vec![T::zero(); c];
                    for i in 0..r {
                        let xh = &xhat[i * c..(i + 1) * c];
                        let gr = g.row(i);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            dxh[j] = gr[j] * gv[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * xh[j];
                        }
                        m1 /= n;
                        m2 /= n;
                        let dr = dx.row_mut(i);
                        for j in 0..c {
                            dr[j] += rstd[i] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(*q, *k, *v, spec, probs, g, grads);
            }
            Op::DepthwiseConv { x, w, b, batch, len } => {
                let c = g.cols();
                let kk = self.value(*w).numel() / c;
                let pad = kk / 2;
                let (batch, len) = (*batch, *len);
                if let Some(db) = self.acc(grads, *b) {
                    let d = db.data_mut();
                    for r in 0..g.rows() {
                        for (dv, gv) in d.iter_mut().zip(g.row(r)) {
                            *dv += *gv;
                        }
                    }
                }
                let xd = self.value(*x).data();
                if let Some(dw) = self.acc(grads, *w) {
                    let d = dw.data_mut();
                    for bi in 0..batch {
                        for t in 0..len {
                            let gr = &g.data()[(bi * len + t) * c..][..c];
                            for j in 0..kk {
                                let src = t as isize + j as isize - pad as isize;
                                if src < 0 || src >= len as isize {
                                    continue;
                                }
                                let xr = &xd[(bi * len + src as usize) * c..][..c];
                                for ((dv, &xv), &gv) in d[j * c..(j + 1) * c].iter_mut().zip(xr).zip(gr) {
                                    *dv += xv * gv;
                                }
                            }
                        }
                    }
                }
                let wd = self.value(*w).data();
                if let Some(dx) = self.acc(grads, *x) {
                    let d = dx.data_mut();
                    for bi in 0..batch {
                        for t in 0..len {
                            for j in 0..kk {
                                let src = t as isize + j as isize - pad as isize;
                                if src < 0 || src >= len as isize {
                                    continue;
                                }
                                let gr = &g.data()[(bi * len + t) * c..][..c];
                                let wr = &wd[j * c..][..c];
                                let dr = &mut d[(bi * len + src as usize) * c..][..c];
                                for ((dv, &gv), &wv) in dr.iter_mut().zip(gr).zip(wr) {
                                    *dv += gv * wv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Gather { x, index, .. } => {
                let c = self.shape(*x).1;
                if let Some(dx) = self.acc(grads, *x) {
                    let d = dx.data_mut();
                    for (slot, src) in index.iter().enumerate() {
                        if let Some(s) = *src {
                            for (dv, gv) in d[s * c..(s + 1) * c]
                                .iter_mut()
                                .zip(&g.data()[slot * c..(slot + 1) * c])
                            {
                                *dv += *gv;
                            }
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let sl = &g.data()[off..off + n];
                    if let Some(dp) = self.acc(grads, p) {
                        for (dv, gv) in dp.data_mut().iter_mut().zip(sl) {
                            *dv += *gv;
                        }
                    }
                    off += n;
                }
            }
            Op::Reshape(x) => self.acc_with(grads, *x, |_, gv| gv, g),
            Op::SegmentMean { x, segments } => {
                let c = g.cols();
                if let Some(dx) = self.acc(grads, *x) {
                    for (s, &(start, len)) in segments.iter().enumerate() {
                        let n = T::from_usize(len).expect("len");
                        let gr = &g.data()[s * c..(s + 1) * c];
                        for r in start..start + len {
                            for (dv, gv) in dx.row_mut(r).iter_mut().zip(gr) {
                                *dv += *gv / n;
                            }
                        }
                    }
                }
            }
            Op::L2NormRows { x, norms } => {
                let y = &node.value;
                if let Some(dx) = self.acc(grads, *x) {
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((dv, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *dv += (gv - yv * dot) / n;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                if let Some(dx) = self.acc(grads, *x) {
                    for dv in dx.data_mut() {
                        *dv += s;
                    }
                }
            }
            Op::Fused(parts) => {
                let s = g.data()[0];
                for (v, pg) in parts {
                    self.acc_with(grads, *v, |i, _| s * pg.data()[i], pg);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let d = self.shape(q).1;
        let dh = d / spec.heads;
        let (tq, tk) = (spec.q_len, spec.kv_len);
        let scale = T::one() / T::from_usize(dh).expect("dh").sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let gd = g.data();
        let need_v = self.ng(v);
        let need_qk = self.ng(q) || self.ng(k);
        let mut dv_buf = need_v.then(|| vec![T::zero(); vd.len()]);
        let mut dq_buf = self.ng(q).then(|| vec![T::zero(); qd.len()]);
        let mut dk_buf = self.ng(k).then(|| vec![T::zero(); kd.len()]);
        let mut ds = vec![T::zero(); tq * tk];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let p = &probs[(b * spec.heads + h) * tq * tk..][..tq * tk];
                let go = MatRef::block(gd, d, b * tq, tq, h * dh, dh);
                if let Some(dvb) = dv_buf.as_mut() {
                    gemm(
                        MatRef::dense(p, tq, tk).t(),
                        go,
                        T::one(),
                        MatMut::block(dvb, d, b * tk, tk, h * dh, dh),
                    );
                }
                if !need_qk {
                    continue;
                }
                gemm(
                    go,
                    MatRef::block(vd, d, b * tk, tk, h * dh, dh).t(),
                    T::zero(),
                    MatMut::dense(&mut ds, tq, tk),
                );
                for i in 0..tq {
                    let pr = &p[i * tk..(i + 1) * tk];
                    let dr = &mut ds[i * tk..(i + 1) * tk];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv, &pv) in dr.iter_mut().zip(pr) {
                        *dv = pv * (*dv - dot) * scale;
                    }
                }
                if let Some(dqb) = dq_buf.as_mut() {
                    gemm(
                        MatRef::dense(&ds, tq, tk),
                        MatRef::block(kd, d, b * tk, tk, h * dh, dh),
                        T::one(),
                        MatMut::block(dqb, d, b * tq, tq, h * dh, dh),
                    );
                }
                if let Some(dkb) = dk_buf.as_mut() {
                    gemm(
                        MatRef::dense(&ds, tq, tk).t(),
                        MatRef::block(qd, d, b * tq, tq, h * dh, dh),
                        T::one(),
                        MatMut::block(dkb, d, b * tk, tk, h * dh, dh),
                    );
                }
            }
        }
        for (var, buf) in [(q, dq_buf), (k, dk_buf), (v, dv_buf)] {
            if let Some(buf) = buf {
                if let Some(dst) = self.acc(grads, var) {
                    for (dv, bv) in dst.data_mut().iter_mut().zip(buf) {
                        *dv += bv;
                    }
                }
            }
        }
    }
}
