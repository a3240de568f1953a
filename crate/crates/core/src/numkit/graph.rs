//! Reverse-mode tape.
//!
//! Every op appends a node holding its output value and the ids of its
//! inputs. Node ids are assigned in execution order, so the tape is already
//! topologically sorted and `backward` is a single reverse sweep that visits
//! each node once.

use std::collections::HashMap;
use std::sync::Arc;

use super::conv::{self, ConvGeom, PoolGeom};
use super::params::ParamStore;
use super::tensor::{gemm, MatView, Real, Tensor};
use super::NumError;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Minimum(Var, Var),
    Clamp { x: Var, lo: T, hi: T },
    MulRows { x: Var, m: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchMatmul { a: Var, b: Var, ta: bool, tb: bool, dims: [usize; 4] },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    AvgPool2d { x: Var, geom: PoolGeom },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { x: Var, index: Arc<Vec<Option<usize>>> },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Cosine { a: Var, b: Var, eps: T },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward pass and its reverse sweep.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<String, Var>,
    grad_enabled: bool,
    finite_checks: bool,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    loop {
        out.push(data[offset]);
        let mut d = nd;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            finite_checks: cfg!(debug_assertions),
            consumed: false,
        }
    }

    /// A graph whose leaves never require gradients (rollout / evaluation).
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn set_finite_checks(&mut self, on: bool) {
        self.finite_checks = on;
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, NumError> {
        if self.consumed {
            return Err(NumError::GraphConsumed);
        }
        if self.finite_checks && !value.all_finite() {
            return Err(NumError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a named parameter as a trainable leaf; repeated calls with the
    /// same name return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var, NumError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get_shared(name).ok_or_else(|| NumError::MissingParam(name.to_string()))?;
        let v = self.leaf_shared(t, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter gradients after `backward`, sorted by name.
    pub fn param_grads(&self) -> Vec<(&str, &[T])> {
        let mut out: Vec<(&str, &[T])> =
            self.params.iter().filter_map(|(name, &v)| self.grad(v).map(|g| (name.as_str(), g))).collect();
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumError::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("minimum", a, b)?;
        let out = self.zip_map(a, b, |x, y| if y < x { y } else { x });
        self.push("minimum", out, Op::Minimum(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var, NumError> {
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var, NumError> {
        let out = self.value(x).map(|v| v + s);
        self.push("add_scalar", out, Op::AddScalar(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumError> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumError> {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NumError> {
        let out = self.value(x).map(|v| v.tanh());
        self.push("tanh", out, Op::Tanh(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumError> {
        let out = self.value(x).map(|v| v.exp());
        self.push("exp", out, Op::Exp(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var, NumError> {
        if lo > hi {
            return Err(NumError::shape("clamp", format!("empty interval [{lo}, {hi}]")));
        }
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push("clamp", out, Op::Clamp { x, lo, hi }, &[x])
    }

    /// `x[n, ...] * m[n]`.
    pub fn mul_rows(&mut self, x: Var, m: Var) -> Result<Var, NumError> {
        let xs = self.shape(x);
        let ms = self.shape(m);
        if xs.is_empty() || ms != [xs[0]] {
            return Err(NumError::shape("mul_rows", format!("{xs:?} vs {ms:?}")));
        }
        let row = self.value(x).numel() / xs[0].max(1);
        let mv = self.value(m).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v * mv[i / row]).collect();
        let out = Tensor::new(xs, data)?;
        self.push("mul_rows", out, Op::MulRows { x, m }, &[x, m])
    }

    /// `x [N, Din] * w[Dout, Din]^T + b[Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumError> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(NumError::shape("linear", format!("input {xs:?} vs weight {ws:?}")));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(NumError::shape("linear", format!("bias {:?} vs out {dout}", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); n * dout];
        let beta = if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
            T::one()
        } else {
            T::zero()
        };
        gemm(
            &mut out,
            MatView::row_major(self.value(x).data(), n, din),
            MatView::row_major(self.value(w).data(), dout, din).t(),
            beta,
        );
        let out = Tensor::new(&[n, dout], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("linear", out, Op::Linear { x, w, b }, &inputs)
    }

    /// Batched `op(a) * op(b)` where `a` is `[B, M, K]` (`[B, K, M]` when
    /// `ta`) and `b` is `[B, K, N]` (`[B, N, K]` when `tb`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(NumError::shape("batch_matmul", format!("{sa:?} vs {sb:?}")));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(NumError::shape("batch_matmul", format!("{sa:?} vs {sb:?} (transposed {ta}/{tb})")));
        }
        let batch = sa[0];
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let am = mat(&av[i * m * k..(i + 1) * m * k], m, k, ta);
            let bm = mat(&bv[i * k * n..(i + 1) * k * n], k, n, tb);
            gemm(&mut out[i * m * n..(i + 1) * m * n], am, bm, T::zero());
        }
        let out = Tensor::new(&[batch, m, n], out)?;
        self.push("batch_matmul", out, Op::BatchMatmul { a, b, ta, tb, dims: [batch, m, k, n] }, &[a, b])
    }

    /// Cross-correlation convolution, `x [N, C, H, W]`, `w [O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, NumError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(NumError::shape("conv2d", format!("input {xs:?} vs weight {ws:?}")));
        }
        let k = ws[2];
        let (oh, ow) = match (conv::out_extent(xs[2], k, stride, pad), conv::out_extent(xs[3], k, stride, pad)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(NumError::shape(
                    "conv2d",
                    format!("input {xs:?} vs weight {ws:?} with stride {stride}, padding {pad}"),
                ))
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(NumError::shape("conv2d", format!("bias {:?} vs weight {ws:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom { n: xs[0], c: xs[1], h: xs[2], w: xs[3], o: ws[0], k, stride, pad, oh, ow };
        let data =
            conv::conv2d_forward(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), &geom);
        let out = Tensor::new(&[geom.n, geom.o, oh, ow], data)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("conv2d", out, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Average pooling over the last two axes of a tensor of rank >= 2.
    pub fn avg_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var, NumError> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || window == 0 {
            return Err(NumError::shape("avg_pool2d", format!("input {xs:?}, window {window}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let (oh, ow) = match (conv::out_extent(h, window, stride, 0), conv::out_extent(w, window, stride, 0)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(NumError::shape("avg_pool2d", format!("input {xs:?}, window {window}, stride {stride}"))),
        };
        let planes = xs[..xs.len() - 2].iter().product();
        let geom = PoolGeom { planes, h, w, window, stride, oh, ow };
        let data = conv::avg_pool_forward(self.value(x).data(), &geom);
        let mut shape = xs.clone();
        let nd = shape.len();
        shape[nd - 2] = oh;
        shape[nd - 1] = ow;
        let out = Tensor::new(&shape, data)?;
        self.push("avg_pool2d", out, Op::AvgPool2d { x, geom }, &[x])
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(), NumError> {
        if axis >= self.shape(x).len() {
            return Err(NumError::shape(op, format!("axis {axis} out of range for {:?}", self.shape(x))));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumError> {
        self.check_axis("softmax", x, axis)?;
        let out = softmax_along(self.value(x), axis, false);
        self.push("softmax", out, Op::Softmax { x, axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumError> {
        self.check_axis("log_softmax", x, axis)?;
        let out = softmax_along(self.value(x), axis, true);
        self.push("log_softmax", out, Op::LogSoftmax { x, axis }, &[x])
    }

    /// Group normalization over `x [N, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var, NumError> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || groups == 0 || !xs[1].is_multiple_of(groups) {
            return Err(NumError::shape("group_norm", format!("input {xs:?} with {groups} groups")));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(NumError::shape(
                "group_norm",
                format!("affine {:?}/{:?} vs channels {c}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let n = xs[0];
        let spatial: usize = xs[2..].iter().product();
        let per_group = c / groups * spatial;
        let eps = T::of(1e-5);
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xv.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        let cnt = T::of(per_group as f64);
        for ng in 0..n * groups {
            let seg = &xv[ng * per_group..(ng + 1) * per_group];
            let mean = seg.iter().copied().sum::<T>() / cnt;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cnt;
            let rstd = T::one() / (var + eps).sqrt();
            let g = ng % groups;
            for (i, (&v, o)) in seg.iter().zip(&mut out[ng * per_group..(ng + 1) * per_group]).enumerate() {
                let ch = g * (c / groups) + i / spatial;
                *o = (v - mean) * rstd * gv[ch] + bv[ch];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let out = Tensor::new(&xs, out)?;
        self.push(
            "group_norm",
            out,
            Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds },
            &[x, gamma, beta],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumError> {
        let out = (*self.nodes[x.0].value).clone().reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, NumError> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(NumError::shape("permute", format!("perm {perm:?} for {xs:?}")));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let data = permute_data(self.value(x).data(), &xs, perm);
        let out = Tensor::new(&shape, data)?;
        self.push("permute", out, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, NumError> {
        let first = xs.first().ok_or_else(|| NumError::shape("concat", "no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(NumError::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(NumError::shape("concat", format!("{base:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        self.push("concat", out, Op::Concat { xs: xs.to_vec(), axis }, xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, NumError> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(NumError::shape("slice", format!("[{start}, {}) on axis {axis} of {xs:?}", start + len)));
        }
        let (outer, alen, inner) = split_axis(&xs, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        self.push("slice", out, Op::Slice { x, axis, start }, &[x])
    }

    /// Flat gather: `out[k] = x[index[k]]`, or zero where the index is `None`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<Option<usize>>>, shape: &[usize]) -> Result<Var, NumError> {
        let n = self.value(x).numel();
        if shape.iter().product::<usize>() != index.len() {
            return Err(NumError::shape("gather", format!("{} indices for shape {shape:?}", index.len())));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= n) {
            return Err(NumError::shape("gather", format!("index {bad} out of range for {n} elements")));
        }
        let src = self.value(x).data();
        let data = index.iter().map(|i| i.map_or(T::zero(), |i| src[i])).collect();
        let out = Tensor::new(shape, data)?;
        self.push("gather", out, Op::Gather { x, index }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumError> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumError> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(NumError::shape("mean", "empty tensor".into()));
        }
        let s = t.data().iter().copied().sum::<T>() / T::of(t.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, NumError> {
        self.check_axis("sum_axis", x, axis)?;
        let xs = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&xs, axis);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
        }
        let mut shape = xs;
        shape.remove(axis);
        let out = Tensor::new(&shape, data)?;
        self.push("sum_axis", out, Op::SumAxis { x, axis }, &[x])
    }

    /// Row-wise cosine similarity of `[N, D]` inputs; rows with a norm
    /// product below `eps` use `eps` as the denominator.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: T) -> Result<Var, NumError> {
        self.same_shape("cosine_similarity", a, b)?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(NumError::shape("cosine_similarity", format!("expected [N, D], got {s:?}")));
        }
        let d = s[1];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = (0..s[0])
            .map(|i| {
                let (x, y) = (&av[i * d..(i + 1) * d], &bv[i * d..(i + 1) * d]);
                let dot = x.iter().zip(y).map(|(&p, &q)| p * q).sum::<T>();
                let nx = x.iter().map(|&p| p * p).sum::<T>().sqrt();
                let ny = y.iter().map(|&q| q * q).sum::<T>().sqrt();
                dot / (nx * ny).max(eps)
            })
            .collect();
        let out = Tensor::new(&[s[0]], data)?;
        self.push("cosine_similarity", out, Op::Cosine { a, b, eps }, &[a, b])
    }

    /// Branch taken by every element of every relu, clamp and minimum node,
    /// in graph order. Two graphs built by the same code lie on the same
    /// smooth piece when their patterns are equal.
    pub fn branch_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(self.value(*x).data().iter().map(|&v| (v > T::zero()) as u8)),
                Op::Clamp { x, lo, hi } => {
                    out.extend(self.value(*x).data().iter().map(|&v| (v < *lo) as u8 + 2 * (v > *hi) as u8))
                }
                Op::Minimum(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    out.extend(av.iter().zip(bv).map(|(&x, &y)| (y < x) as u8));
                }
                _ => {}
            }
        }
        out
    }

    /// Reverse sweep from a scalar loss. A graph supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumError> {
        if self.consumed {
            return Err(NumError::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(NumError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                self.grads[i] = Some(gout);
                continue;
            }
            self.backprop_node(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    fn acc_from(&mut self, v: Var, src: &[T], s: T) {
        self.acc(v, |g| {
            for (a, &b) in g.iter_mut().zip(src) {
                *a = *a + b * s;
            }
        });
    }

    fn backprop_node(&mut self, i: usize, gout: &[T]) {
        let value = Arc::clone(&self.nodes[i].value);
        let y = value.data();
        // Temporarily take the op so `self` can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_from(*a, gout, T::one());
                self.acc_from(*b, gout, T::one());
            }
            Op::Sub(a, b) => {
                self.acc_from(*a, gout, T::one());
                self.acc_from(*b, gout, -T::one());
            }
            Op::Mul(a, b) => {
                let av = Arc::clone(&self.nodes[a.0].value);
                let bv = Arc::clone(&self.nodes[b.0].value);
                self.acc(*a, |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(gout).zip(bv.data()) {
                        *g = *g + d * o;
                    }
                });
                self.acc(*b, |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(gout).zip(av.data()) {
                        *g = *g + d * o;
                    }
                });
            }
            Op::Minimum(a, b) => {
                let av = Arc::clone(&self.nodes[a.0].value);
                let bv = Arc::clone(&self.nodes[b.0].value);
                self.acc(*a, |g| {
                    for (k, g) in g.iter_mut().enumerate() {
                        if av.data()[k] <= bv.data()[k] {
                            *g = *g + gout[k];
                        }
                    }
                });
                self.acc(*b, |g| {
                    for (k, g) in g.iter_mut().enumerate() {
                        if bv.data()[k] < av.data()[k] {
                            *g = *g + gout[k];
                        }
                    }
                });
            }
            Op::Scale(x, s) => self.acc_from(*x, gout, *s),
            Op::AddScalar(x) => self.acc_from(*x, gout, T::one()),
            Op::Relu(x) => self.acc(*x, |g| {
                for ((g, &d), &o) in g.iter_mut().zip(gout).zip(y) {
                    if o > T::zero() {
                        *g = *g + d;
                    }
                }
            }),
            Op::Sigmoid(x) => self.acc(*x, |g| {
                for ((g, &d), &o) in g.iter_mut().zip(gout).zip(y) {
                    *g = *g + d * o * (T::one() - o);
                }
            }),
            Op::Tanh(x) => self.acc(*x, |g| {
                for ((g, &d), &o) in g.iter_mut().zip(gout).zip(y) {
                    *g = *g + d * (T::one() - o * o);
                }
            }),
            Op::Exp(x) => self.acc(*x, |g| {
                for ((g, &d), &o) in g.iter_mut().zip(gout).zip(y) {
                    *g = *g + d * o;
                }
            }),
            Op::Clamp { x, lo, hi } => {
                let xv = Arc::clone(&self.nodes[x.0].value);
                let (lo, hi) = (*lo, *hi);
                self.acc(*x, |g| {
                    for ((g, &d), &v) in g.iter_mut().zip(gout).zip(xv.data()) {
                        if v >= lo && v <= hi {
                            *g = *g + d;
                        }
                    }
                });
            }
            Op::MulRows { x, m } => {
                let xv = Arc::clone(&self.nodes[x.0].value);
                let mv = Arc::clone(&self.nodes[m.0].value);
                let rows = mv.numel();
                let row = xv.numel() / rows.max(1);
                self.acc(*x, |g| {
                    for (k, g) in g.iter_mut().enumerate() {
                        *g = *g + gout[k] * mv.data()[k / row];
                    }
                });
                self.acc(*m, |g| {
                    for (r, g) in g.iter_mut().enumerate() {
                        let s: T = (r * row..(r + 1) * row).map(|k| gout[k] * xv.data()[k]).sum();
                        *g = *g + s;
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xv = Arc::clone(&self.nodes[x.0].value);
                let wv = Arc::clone(&self.nodes[w.0].value);
                let (n, din) = (xv.shape()[0], xv.shape()[1]);
                let dout = wv.shape()[0];
                let dy = MatView::row_major(gout, n, dout);
                self.acc(*x, |g| gemm(g, dy, MatView::row_major(wv.data(), dout, din), T::one()));
                self.acc(*w, |g| gemm(g, dy.t(), MatView::row_major(xv.data(), n, din), T::one()));
                if let Some(b) = b {
                    self.acc(*b, |g| {
                        for row in gout.chunks(dout) {
                            for (g, &d) in g.iter_mut().zip(row) {
                                *g = *g + d;
                            }
                        }
                    });
                }
            }
            Op::BatchMatmul { a, b, ta, tb, dims } => {
                let [batch, m, k, n] = *dims;
                let av = Arc::clone(&self.nodes[a.0].value);
                let bv = Arc::clone(&self.nodes[b.0].value);
                let (ta, tb) = (*ta, *tb);
                self.acc(*a, |g| {
                    for i in 0..batch {
                        let dc = MatView::row_major(&gout[i * m * n..(i + 1) * m * n], m, n);
                        let bm = mat(&bv.data()[i * k * n..(i + 1) * k * n], k, n, tb);
                        let dst = &mut g[i * m * k..(i + 1) * m * k];
                        if ta {
                            // stored [K, M]: bm * dc^T
                            gemm(dst, bm, dc.t(), T::one());
                        } else {
                            gemm(dst, dc, bm.t(), T::one());
                        }
                    }
                });
                self.acc(*b, |g| {
                    for i in 0..batch {
                        let dc = MatView::row_major(&gout[i * m * n..(i + 1) * m * n], m, n);
                        let am = mat(&av.data()[i * m * k..(i + 1) * m * k], m, k, ta);
                        let dst = &mut g[i * k * n..(i + 1) * k * n];
                        if tb {
                            // stored [N, K]: dc^T * am
                            gemm(dst, dc.t(), am, T::one());
                        } else {
                            gemm(dst, am.t(), dc, T::one());
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let xv = Arc::clone(&self.nodes[x.0].value);
                let wv = Arc::clone(&self.nodes[w.0].value);
                let need = (
                    self.nodes[x.0].requires_grad,
                    self.nodes[w.0].requires_grad,
                    b.is_some_and(|b| self.nodes[b.0].requires_grad),
                );
                let grads = conv::conv2d_backward(xv.data(), wv.data(), gout, geom, need);
                if let Some(dx) = grads.dx {
                    self.acc_from(*x, &dx, T::one());
                }
                if let Some(dw) = grads.dw {
                    self.acc_from(*w, &dw, T::one());
                }
                if let (Some(b), Some(db)) = (b, grads.db) {
                    self.acc_from(*b, &db, T::one());
                }
            }
            Op::AvgPool2d { x, geom } => self.acc(*x, |g| conv::avg_pool_backward(gout, geom, g)),
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(value.shape(), *axis);
                self.acc(*x, |g| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + j;
                            let dot: T = (0..len).map(|a| gout[idx(a)] * y[idx(a)]).sum();
                            for a in 0..len {
                                g[idx(a)] = g[idx(a)] + y[idx(a)] * (gout[idx(a)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = split_axis(value.shape(), *axis);
                self.acc(*x, |g| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + j;
                            let total: T = (0..len).map(|a| gout[idx(a)]).sum();
                            for a in 0..len {
                                g[idx(a)] = g[idx(a)] + gout[idx(a)] - y[idx(a)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let xv = Arc::clone(&self.nodes[x.0].value);
                let gv = Arc::clone(&self.nodes[gamma.0].value);
                let xs = xv.shape();
                let (n, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let groups = *groups;
                let cpg = c / groups;
                let per_group = cpg * spatial;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xv.numel()];
                let cnt = T::of(per_group as f64);
                for ng in 0..n * groups {
                    let g = ng % groups;
                    let base = ng * per_group;
                    let (mu, rs) = (mean[ng], rstd[ng]);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for i in 0..per_group {
                        let ch = g * cpg + i / spatial;
                        let xhat = (xv.data()[base + i] - mu) * rs;
                        let d = gout[base + i];
                        dgamma[ch] = dgamma[ch] + d * xhat;
                        dbeta[ch] = dbeta[ch] + d;
                        let dxhat = d * gv.data()[ch];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                    }
                    for i in 0..per_group {
                        let ch = g * cpg + i / spatial;
                        let xhat = (xv.data()[base + i] - mu) * rs;
                        let dxhat = gout[base + i] * gv.data()[ch];
                        dx[base + i] = rs / cnt * (cnt * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
                self.acc_from(*x, &dx, T::one());
                self.acc_from(*gamma, &dgamma, T::one());
                self.acc_from(*beta, &dbeta, T::one());
            }
            Op::Reshape(x) => self.acc_from(*x, gout, T::one()),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(gout, value.shape(), &inv);
                self.acc_from(*x, &back, T::one());
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    self.acc(v, |g| {
                        for o in 0..outer {
                            let src = &gout[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (g, &d) in g[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *g = *g + d;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xshape = self.nodes[x.0].value.shape().to_vec();
                let (outer, alen, inner) = split_axis(&xshape, *axis);
                let len = value.shape()[*axis];
                let start = *start;
                self.acc(*x, |g| {
                    for o in 0..outer {
                        let base = (o * alen + start) * inner;
                        for (g, &d) in
                            g[base..base + len * inner].iter_mut().zip(&gout[o * len * inner..(o + 1) * len * inner])
                        {
                            *g = *g + d;
                        }
                    }
                });
            }
            Op::Gather { x, index } => self.acc(*x, |g| {
                for (k, ix) in index.iter().enumerate() {
                    if let Some(ix) = ix {
                        g[*ix] = g[*ix] + gout[k];
                    }
                }
            }),
            Op::Sum(x) => {
                let d = gout[0];
                self.acc(*x, |g| g.iter_mut().for_each(|g| *g = *g + d));
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                let d = gout[0] / T::of(n as f64);
                self.acc(*x, |g| g.iter_mut().for_each(|g| *g = *g + d));
            }
            Op::SumAxis { x, axis } => {
                let xshape = self.nodes[x.0].value.shape().to_vec();
                let (outer, len, inner) = split_axis(&xshape, *axis);
                self.acc(*x, |g| {
                    for o in 0..outer {
                        for a in 0..len {
                            let dst = &mut g[(o * len + a) * inner..(o * len + a + 1) * inner];
                            for (g, &d) in dst.iter_mut().zip(&gout[o * inner..(o + 1) * inner]) {
                                *g = *g + d;
                            }
                        }
                    }
                });
            }
            Op::Cosine { a, b, eps } => {
                let av = Arc::clone(&self.nodes[a.0].value);
                let bv = Arc::clone(&self.nodes[b.0].value);
                let d = av.shape()[1];
                let rows = av.shape()[0];
                let mut da = vec![T::zero(); av.numel()];
                let mut db = vec![T::zero(); bv.numel()];
                for r in 0..rows {
                    let x = &av.data()[r * d..(r + 1) * d];
                    let z = &bv.data()[r * d..(r + 1) * d];
                    let nx = x.iter().map(|&p| p * p).sum::<T>().sqrt();
                    let nz = z.iter().map(|&q| q * q).sum::<T>().sqrt();
                    let cos = y[r];
                    let go = gout[r];
                    if nx * nz > *eps {
                        let denom = nx * nz;
                        for j in 0..d {
                            da[r * d + j] = go * (z[j] / denom - cos * x[j] / (nx * nx));
                            db[r * d + j] = go * (x[j] / denom - cos * z[j] / (nz * nz));
                        }
                    } else {
                        for j in 0..d {
                            da[r * d + j] = go * z[j] / *eps;
                            db[r * d + j] = go * x[j] / *eps;
                        }
                    }
                }
                self.acc_from(*a, &da, T::one());
                self.acc_from(*b, &db, T::one());
            }
        }
        self.nodes[i].op = op;
    }
}

fn mat<T>(data: &[T], rows: usize, cols: usize, transposed: bool) -> MatView<'_, T> {
    if transposed {
        MatView::row_major(data, cols, rows).t()
    } else {
        MatView::row_major(data, rows, cols)
    }
}

fn softmax_along<T: Real>(x: &Tensor<T>, axis: usize, log: bool) -> Tensor<T> {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + j;
            let max = (0..len).map(|a| src[idx(a)]).fold(T::neg_infinity(), T::max);
            let total: T = (0..len).map(|a| (src[idx(a)] - max).exp()).sum();
            let lse = max + total.ln();
            for a in 0..len {
                out[idx(a)] = if log { src[idx(a)] - lse } else { (src[idx(a)] - max).exp() / total };
            }
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}
