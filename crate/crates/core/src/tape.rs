//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every op method evaluates eagerly, appends a node and returns a [`Var`]
//! handle. [`Tape::backward`] replays the recorded ops in reverse from a scalar
//! root and accumulates gradients only along paths that reach a parameter.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims, GruCache};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Catalogue of recorded primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    ScaleShift,
    MatMul,
    AddBias,
    Conv2d,
    MaxPool2,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Softplus,
    Sum,
    Mean,
    Reshape,
    Concat,
    IndexAxis,
    Tile,
    Embedding,
    GruCell,
    SoftmaxCrossEntropy,
    GaussianReparam,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    ScaleShift { x: usize, scale: f64 },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    AddBias { x: usize, b: usize, outer: usize, inner: usize },
    Conv2d { x: usize, w: usize, b: usize, dims: ConvDims },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Concat { xs: Vec<usize>, outer: usize, inners: Vec<usize> },
    IndexAxis { x: usize, outer: usize, axis_len: usize, inner: usize, index: usize },
    Tile { x: usize, n: usize },
    Embedding { table: usize, ids: Vec<usize>, dim: usize },
    GruCell { x: usize, h: usize, wx: usize, wh: usize, bx: usize, bh: usize, cache: Box<GruCache>, batch: usize, inp: usize, hid: usize },
    SoftmaxCe { logits: usize, targets: Vec<usize>, probs: Vec<f64>, classes: usize },
    GaussianReparam { mu: usize, sigma: usize, eta: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::ScaleShift { .. } => OpKind::ScaleShift,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Softplus(_) => OpKind::Softplus,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::IndexAxis { .. } => OpKind::IndexAxis,
            Op::Tile { .. } => OpKind::Tile,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::GruCell { .. } => OpKind::GruCell,
            Op::SoftmaxCe { .. } => OpKind::SoftmaxCrossEntropy,
            Op::GaussianReparam { .. } => OpKind::GaussianReparam,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// True when some parameter is reachable backwards from this node.
    needs_grad: bool,
    is_param: bool,
}

/// Gradients of a backward pass, keyed by parameter [`Var`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a parameter leaf; `None` if the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter leaf, or zeros of `like`'s shape when unreachable.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

/// A single-owner recording of a forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else if v < -30.0 {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}

fn add_into(acc: &mut Option<Vec<f64>>, g: &[f64]) {
    match acc {
        Some(a) => {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
        None => *acc = Some(g.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::NotOnTape);
        }
        self.nodes.get(v.index).ok_or(Error::NotOnTape)
    }

    fn idx(&self, v: Var) -> Result<usize> {
        self.node(v).map(|_| v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn kind(&self, v: Var) -> Result<OpKind> {
        Ok(self.node(v)?.op.kind())
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.to_string()));
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op: node_op,
            needs_grad,
            is_param: false,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn leaf(&mut self, value: Tensor, is_param: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: is_param,
            is_param,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, usize, usize)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape(op, va, vb)?;
        Ok((va.zip_map(vb, f)?, ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, ia, ib) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(ia, ib), &[ia, ib])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, ia, ib) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(ia, ib), &[ia, ib])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, ia, ib) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(ia, ib), &[ia, ib])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, ia, ib) = self.binary("div", a, b, |x, y| x / y)?;
        self.push("div", v, Op::Div(ia, ib), &[ia, ib])
    }

    /// `scale · x + shift` elementwise.
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = self.nodes[ix].value.map(|t| scale * t + shift);
        self.push("scale_shift", v, Op::ScaleShift { x: ix, scale }, &[ix])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.scale_shift(x, scale, 0.0)
    }

    /// `1 − x`, the complement of a mask.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.scale_shift(x, -1.0, 1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.nodes[ia].value.data(), self.nodes[ib].value.data(), m, k, n);
        self.push("matmul", Tensor::from_raw(vec![m, n], data), Op::MatMul { a: ia, b: ib, m, k, n }, &[ia, ib])
    }

    /// Adds a vector `b` along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(b)?);
        let sx = self.nodes[ix].value.shape().to_vec();
        let sb = self.nodes[ib].value.shape();
        if axis >= sx.len() || sb != [sx[axis]] {
            return Err(Error::shape("add_bias", format!("{sx:?} + {sb:?} on axis {axis}")));
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let c = sx[axis];
        let bd = self.nodes[ib].value.data();
        let mut data = self.nodes[ix].value.data().to_vec();
        for o in 0..outer {
            for (ci, &bv) in bd.iter().enumerate() {
                let base = (o * c + ci) * inner;
                for v in &mut data[base..base + inner] {
                    *v += bv;
                }
            }
        }
        self.push("add_bias", Tensor::from_raw(sx, data), Op::AddBias { x: ix, b: ib, outer, inner }, &[ix, ib])
    }

    /// 3×3, stride 1, zero-pad 1 convolution of `x: [n, c, h, w]` with
    /// `w: [o, c, 3, 3]` and bias `b: [o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let sx = self.nodes[ix].value.shape();
        let sw = self.nodes[iw].value.shape();
        let sb = self.nodes[ib].value.shape();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != 3 || sw[3] != 3 || sb != [sw[0]] {
            return Err(Error::shape("conv2d", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let dims = ConvDims {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            o: sw[0],
        };
        let data = kernels::conv2d_forward(
            self.nodes[ix].value.data(),
            self.nodes[iw].value.data(),
            self.nodes[ib].value.data(),
            dims,
        );
        let shape = vec![dims.n, dims.o, dims.h, dims.w];
        self.push("conv2d", Tensor::from_raw(shape, data), Op::Conv2d { x: ix, w: iw, b: ib, dims }, &[ix, iw, ib])
    }

    /// 2×2 max pooling of `[n, c, h, w]` with even `h`, `w`.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape("maxpool2", format!("{s:?}")));
        }
        let shape = vec![s[0], s[1], s[2] / 2, s[3] / 2];
        let (data, argmax) = kernels::maxpool2_forward(self.nodes[ix].value.data(), s[0] * s[1], s[2], s[3]);
        self.push("maxpool2", Tensor::from_raw(shape, data), Op::MaxPool2 { x: ix, argmax }, &[ix])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = self.nodes[ix].value.map(f);
        self.push(name, v, op(ix), &[ix])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, kernels::sigmoid_value, Op::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp)
    }

    /// Natural log; non-positive inputs surface as a non-finite error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = Tensor::scalar(self.nodes[ix].value.sum());
        self.push("sum", v, Op::Sum(ix), &[ix])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = Tensor::scalar(self.nodes[ix].value.mean());
        self.push("mean", v, Op::Mean(ix), &[ix])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = self.nodes[ix].value.reshape(shape.to_vec())?;
        self.push("reshape", v, Op::Reshape(ix), &[ix])
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = xs.iter().map(|&v| self.idx(v)).collect::<Result<_>>()?;
        let first = self
            .nodes
            .get(*idx.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?)
            .map(|n| n.value.shape().to_vec())
            .unwrap_or_default();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
        }
        let outer: usize = first[..axis].iter().product();
        let tail: usize = first[axis + 1..].iter().product();
        let mut inners = Vec::with_capacity(idx.len());
        let mut total_axis = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?}")));
            }
            total_axis += s[axis];
            inners.push(s[axis] * tail);
        }
        let mut data = Vec::with_capacity(outer * total_axis * tail);
        for o in 0..outer {
            for (&i, &inner) in idx.iter().zip(&inners) {
                data.extend_from_slice(&self.nodes[i].value.data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        self.push("concat", Tensor::from_raw(shape, data), Op::Concat { xs: idx.clone(), outer, inners }, &idx)
    }

    /// Selects `index` along `axis`, dropping that axis.
    pub fn index_axis(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.shape().to_vec();
        if axis >= s.len() || index >= s[axis] || s.len() < 2 {
            return Err(Error::shape("index_axis", format!("index {index} on axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let axis_len = s[axis];
        let src = self.nodes[ix].value.data();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * axis_len + index) * inner;
            data.extend_from_slice(&src[base..base + inner]);
        }
        let mut shape = s;
        shape.remove(axis);
        self.push(
            "index_axis",
            Tensor::from_raw(shape, data),
            Op::IndexAxis { x: ix, outer, axis_len, inner, index },
            &[ix],
        )
    }

    /// Repeats `x` along a new leading axis of length `n`.
    pub fn tile(&mut self, x: Var, n: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        if n == 0 {
            return Err(Error::shape("tile", "zero repeats"));
        }
        let src = &self.nodes[ix].value;
        let mut shape = vec![n];
        shape.extend_from_slice(src.shape());
        let mut data = Vec::with_capacity(n * src.len());
        for _ in 0..n {
            data.extend_from_slice(src.data());
        }
        self.push("tile", Tensor::from_raw(shape, data), Op::Tile { x: ix, n }, &[ix])
    }

    /// Rows of `table: [vocab, dim]` for each id, giving `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let s = self.nodes[it].value.shape();
        if s.len() != 2 || ids.is_empty() {
            return Err(Error::shape("embedding", format!("table {s:?}, {} ids", ids.len())));
        }
        let (vocab, dim) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape("embedding", format!("id {bad} outside vocabulary {vocab}")));
        }
        let src = self.nodes[it].value.data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        self.push(
            "embedding",
            Tensor::from_raw(vec![ids.len(), dim], data),
            Op::Embedding { table: it, ids: ids.to_vec(), dim },
            &[it],
        )
    }

    /// One GRU step: `x: [n, d]`, `h: [n, hid]`, `wx: [d, 3·hid]`, `wh: [hid, 3·hid]`,
    /// biases `[3·hid]`.
    pub fn gru_cell(&mut self, x: Var, h: Var, wx: Var, wh: Var, bx: Var, bh: Var) -> Result<Var> {
        let ids = [x, h, wx, wh, bx, bh]
            .iter()
            .map(|&v| self.idx(v))
            .collect::<Result<Vec<_>>>()?;
        let sh = |i: usize| self.nodes[ids[i]].value.shape();
        let (sx, shh, swx, swh) = (sh(0), sh(1), sh(2), sh(3));
        let ok = sx.len() == 2
            && shh.len() == 2
            && sx[0] == shh[0]
            && swx.len() == 2
            && swx[0] == sx[1]
            && swh.len() == 2
            && swh[0] == shh[1]
            && swx[1] == 3 * shh[1]
            && swh[1] == 3 * shh[1]
            && sh(4) == [3 * shh[1]]
            && sh(5) == [3 * shh[1]];
        if !ok {
            return Err(Error::shape("gru_cell", format!("x {sx:?}, h {shh:?}, wx {swx:?}, wh {swh:?}")));
        }
        let (batch, inp, hid) = (sx[0], sx[1], shh[1]);
        let d = |i: usize| self.nodes[ids[i]].value.data();
        let (out, cache) = kernels::gru_forward(d(0), d(1), d(2), d(3), d(4), d(5), batch, inp, hid);
        self.push(
            "gru_cell",
            Tensor::from_raw(vec![batch, hid], out),
            Op::GruCell {
                x: ids[0],
                h: ids[1],
                wx: ids[2],
                wh: ids[3],
                bx: ids[4],
                bh: ids[5],
                cache: Box::new(cache),
                batch,
                inp,
                hid,
            },
            &ids,
        )
    }

    /// Mean softmax cross-entropy of `logits: [n, k]` against class ids.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let s = self.nodes[il].value.shape();
        if s.len() != 2 || s[0] != targets.len() || targets.iter().any(|&t| t >= s[1]) {
            return Err(Error::shape("softmax_cross_entropy", format!("logits {s:?}, {} targets", targets.len())));
        }
        let (n, k) = (s[0], s[1]);
        let (probs, loss) = softmax_ce_forward(self.nodes[il].value.data(), targets, n, k);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits: il,
                targets: targets.to_vec(),
                probs,
                classes: k,
            },
            &[il],
        )
    }

    /// Reparameterized Gaussian sample `mu + sigma ⊙ eta` with `eta` held constant.
    pub fn gaussian_reparam(&mut self, mu: Var, sigma: Var, eta: Tensor) -> Result<Var> {
        let (im, is) = (self.idx(mu)?, self.idx(sigma)?);
        same_shape("gaussian_reparam", &self.nodes[im].value, &self.nodes[is].value)?;
        same_shape("gaussian_reparam", &self.nodes[im].value, &eta)?;
        let v = {
            let (m, s) = (self.nodes[im].value.data(), self.nodes[is].value.data());
            let data = m
                .iter()
                .zip(s)
                .zip(eta.data())
                .map(|((&m, &s), &e)| m + s * e)
                .collect();
            Tensor::from_raw(self.nodes[im].value.shape().to_vec(), data)
        };
        self.push(
            "gaussian_reparam",
            v,
            Op::GaussianReparam {
                mu: im,
                sigma: is,
                eta: eta.into_data(),
            },
            &[im, is],
        )
    }

    /// Gradients of the scalar `root` with respect to every parameter leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let r = self.idx(root)?;
        let rv = &self.nodes[r].value;
        if rv.len() != 1 {
            return Err(Error::RootNotScalar(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=r).map(|_| None).collect();
        grads[r] = Some(vec![1.0]);
        for i in (0..=r).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if node.is_param {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let n = &self.nodes[i];
                match (n.is_param, g) {
                    (true, Some(g)) => Some(Tensor::from_raw(n.value.shape().to_vec(), g)),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |j: usize| self.nodes[j].value.data();
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &j in [a, b] {
                    if self.wants(j) {
                        add_into(&mut grads[j], g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[*a], g);
                }
                if self.wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads[*b], &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d: Vec<f64> = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                    add_into(&mut grads[*a], &d);
                }
                if self.wants(*b) {
                    let d: Vec<f64> = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                    add_into(&mut grads[*b], &d);
                }
            }
            Op::Div(a, b) => {
                if self.wants(*a) {
                    let d: Vec<f64> = g.iter().zip(val(*b)).map(|(g, y)| g / y).collect();
                    add_into(&mut grads[*a], &d);
                }
                if self.wants(*b) {
                    let d: Vec<f64> = g.iter().zip(out).zip(val(*b)).map(|((g, q), y)| -g * q / y).collect();
                    add_into(&mut grads[*b], &d);
                }
            }
            Op::ScaleShift { x, scale } => {
                let d: Vec<f64> = g.iter().map(|g| g * scale).collect();
                add_into(&mut grads[*x], &d);
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    // da = g · bᵀ
                    let mut d = vec![0.0; m * k];
                    kernels::gemm(m, n, k, 1.0, g, n as isize, 1, val(*b), 1, n as isize, 0.0, &mut d);
                    add_into(&mut grads[*a], &d);
                }
                if self.wants(*b) {
                    // db = aᵀ · g
                    let mut d = vec![0.0; k * n];
                    kernels::gemm(k, m, n, 1.0, val(*a), 1, k as isize, g, n as isize, 1, 0.0, &mut d);
                    add_into(&mut grads[*b], &d);
                }
            }
            Op::AddBias { x, b, outer, inner } => {
                if self.wants(*x) {
                    add_into(&mut grads[*x], g);
                }
                if self.wants(*b) {
                    let c = self.nodes[*b].value.len();
                    let mut d = vec![0.0; c];
                    for o in 0..*outer {
                        for (ci, dv) in d.iter_mut().enumerate() {
                            let base = (o * c + ci) * inner;
                            *dv += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    add_into(&mut grads[*b], &d);
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), g, *dims, self.wants(*x), self.wants(*w));
                if let Some(dx) = dx {
                    add_into(&mut grads[*x], &dx);
                }
                if let Some(dw) = dw {
                    add_into(&mut grads[*w], &dw);
                }
                if self.wants(*b) {
                    add_into(&mut grads[*b], &db);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = vec![0.0; self.nodes[*x].value.len()];
                for (gv, &a) in g.iter().zip(argmax) {
                    d[a] += gv;
                }
                add_into(&mut grads[*x], &d);
            }
            Op::Relu(x) => {
                let d: Vec<f64> = g.iter().zip(val(*x)).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                add_into(&mut grads[*x], &d);
            }
            Op::Sigmoid(x) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect();
                add_into(&mut grads[*x], &d);
            }
            Op::Tanh(x) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(g, t)| g * (1.0 - t * t)).collect();
                add_into(&mut grads[*x], &d);
            }
            Op::Exp(x) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(g, e)| g * e).collect();
                add_into(&mut grads[*x], &d);
            }
            Op::Log(x) => {
                let d: Vec<f64> = g.iter().zip(val(*x)).map(|(g, v)| g / v).collect();
                add_into(&mut grads[*x], &d);
            }
            Op::Softplus(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &v)| g * kernels::sigmoid_value(v))
                    .collect();
                add_into(&mut grads[*x], &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.nodes[*x].value.len()];
                add_into(&mut grads[*x], &d);
            }
            Op::Mean(x) => {
                let n = self.nodes[*x].value.len();
                let d = vec![g[0] / n as f64; n];
                add_into(&mut grads[*x], &d);
            }
            Op::Reshape(x) => add_into(&mut grads[*x], g),
            Op::Concat { xs, outer, inners } => {
                let total: usize = inners.iter().sum();
                let mut offset = 0;
                for (&j, &inner) in xs.iter().zip(inners) {
                    if self.wants(j) {
                        let mut d = Vec::with_capacity(outer * inner);
                        for o in 0..*outer {
                            let base = o * total + offset;
                            d.extend_from_slice(&g[base..base + inner]);
                        }
                        add_into(&mut grads[j], &d);
                    }
                    offset += inner;
                }
            }
            Op::IndexAxis { x, outer, axis_len, inner, index } => {
                let mut d = vec![0.0; outer * axis_len * inner];
                for o in 0..*outer {
                    let base = (o * axis_len + index) * inner;
                    d[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                add_into(&mut grads[*x], &d);
            }
            Op::Tile { x, n } => {
                let len = self.nodes[*x].value.len();
                let mut d = vec![0.0; len];
                for r in 0..*n {
                    for (dv, gv) in d.iter_mut().zip(&g[r * len..(r + 1) * len]) {
                        *dv += gv;
                    }
                }
                add_into(&mut grads[*x], &d);
            }
            Op::Embedding { table, ids, dim } => {
                let mut d = vec![0.0; self.nodes[*table].value.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for k in 0..*dim {
                        d[id * dim + k] += g[row * dim + k];
                    }
                }
                add_into(&mut grads[*table], &d);
            }
            Op::GruCell { x, h, wx, wh, bx, bh, cache, batch, inp, hid } => {
                let gg = kernels::gru_backward(val(*x), val(*h), val(*wx), val(*wh), cache, g, *batch, *inp, *hid);
                for (j, d) in [(*x, &gg.dx), (*h, &gg.dh), (*wx, &gg.dwx), (*wh, &gg.dwh), (*bx, &gg.dbx), (*bh, &gg.dbh)] {
                    if self.wants(j) {
                        add_into(&mut grads[j], d);
                    }
                }
            }
            Op::SoftmaxCe { logits, targets, probs, classes } => {
                let n = targets.len();
                let scale = g[0] / n as f64;
                let mut d = probs.clone();
                for (s, &t) in targets.iter().enumerate() {
                    d[s * classes + t] -= 1.0;
                }
                for v in &mut d {
                    *v *= scale;
                }
                add_into(&mut grads[*logits], &d);
            }
            Op::GaussianReparam { mu, sigma, eta } => {
                if self.wants(*mu) {
                    add_into(&mut grads[*mu], g);
                }
                if self.wants(*sigma) {
                    let d: Vec<f64> = g.iter().zip(eta).map(|(g, e)| g * e).collect();
                    add_into(&mut grads[*sigma], &d);
                }
            }
        }
    }
}

/// Max-shifted softmax rows and the mean negative log-likelihood.
pub(crate) fn softmax_ce_forward(logits: &[f64], targets: &[usize], n: usize, k: usize) -> (Vec<f64>, f64) {
    let mut probs = vec![0.0; n * k];
    let mut loss = 0.0;
    for s in 0..n {
        let row = &logits[s * k..(s + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for j in 0..k {
            probs[s * k + j] = (row[j] - m).exp() / z;
        }
        loss += z.ln() + m - row[targets[s]];
    }
    (probs, loss / n as f64)
}

/// Row-wise softmax of `[n, k]` logits.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::shape("softmax", format!("{s:?}")));
    }
    let (n, k) = (s[0], s[1]);
    let (probs, _) = softmax_ce_forward(logits.data(), &vec![0; n], n, k);
    Ok(Tensor::from_raw(vec![n, k], probs))
}
