//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every forward pass builds a fresh [`Tape`]. Operations append nodes in
//! execution order, so recording order is a valid topological order and
//! [`Tape::backward`] simply walks the nodes in reverse.
//!
//! Leaves come in three flavours:
//! - [`Tape::constant`]: data, no gradient;
//! - [`Tape::var`]: a free input that receives a gradient;
//! - [`Tape::param`]: a learnable parameter borrowed from a
//!   [`ParamStore`](crate::params::ParamStore), identified by its index.
//!
//! Leaf gradients accumulate across `backward` calls until [`Tape::zero_grads`].

use std::borrow::Cow;
use std::f64::consts::PI;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{axis_split, broadcast_map, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Option<Vec<usize>>),
    Sub(Var, Var, Option<Vec<usize>>),
    Mul(Var, Var, Option<Vec<usize>>),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    MatMul(Var, Var),
    Conv2d(Var, Var, Var),
    Conv1d(Var, Var, Var),
    Softmax(Var, usize),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    /// Output flat index -> input flat index.
    Gather(Var, Vec<usize>),
    PadRows(Var),
    NarrowRows(Var, usize),
    Concat(Vec<Var>),
    Amplitudes(Var, Vec<usize>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradients of every parameter leaf, keyed by parameter index.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_deref()?)))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Borrowed constant; avoids copying large fixed tensors into the tape.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn var(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn param(&mut self, id: usize, t: &'a Tensor) -> Var {
        let v = self.push(Cow::Borrowed(t), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, kind: u8) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let map = broadcast_map(av.shape(), bv.shape())?;
        let bd = bv.data();
        let f = |x: f64, y: f64| match kind {
            0 => x + y,
            1 => x - y,
            _ => x * y,
        };
        let out: Vec<f64> = match &map {
            None => av.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => av
                .data()
                .iter()
                .zip(m)
                .map(|(&x, &j)| f(x, bd[j]))
                .collect(),
        };
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let op = match kind {
            0 => Op::Add(a, b, map),
            1 => Op::Sub(a, b, map),
            _ => Op::Mul(a, b, map),
        };
        Ok(self.push_op(t, op, &[a, b]))
    }

    /// `a + b`, with `b` broadcast onto `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 1)
    }

    /// Hadamard product, with `b` broadcast onto `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 2)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        self.push_op(t, Op::Scale(a, s), &[a])
    }

    fn map_unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect())
            .expect("same shape");
        self.push_op(t, op, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_unary(a, f64::tanh, Op::Tanh(a))
    }

    // ---- linear algebra ----------------------------------------------------

    /// Matrix product over the last two axes; leading batch axes must match.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return shape_err(format!("matmul operands {sa:?} and {sb:?}"));
        }
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        if sb[r - 2] != k {
            return shape_err(format!("matmul inner dimensions differ: {sa:?} x {sb:?}"));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm(
                &av.data()[bi * m * k..(bi + 1) * m * k],
                &bv.data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let t = Tensor::new(shape, out)?;
        Ok(self.push_op(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Zero-padded, stride-1 cross-correlation over a `[C_in, H, W]` grid with
    /// `[C_out, C_in, kh, kw]` kernels (odd sizes) and a `[C_out]` bias.
    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || bs != [ws[0]] {
            return shape_err(format!("conv2d input {xs:?}, kernels {ws:?}, bias {bs:?}"));
        }
        if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel {}x{} must be odd", ws[2], ws[3])));
        }
        let dims = Conv2dDims::new(xs, ws);
        let out = conv2d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &dims);
        let t = Tensor::new(vec![dims.cout, dims.h, dims.w], out)?;
        Ok(self.push_op(t, Op::Conv2d(x, w, b), &[x, w, b]))
    }

    /// 1-D analogue of [`conv2d_same`](Self::conv2d_same): `[C_in, L]` input,
    /// `[C_out, C_in, k]` kernels.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 3 || ws[1] != xs[0] || bs != [ws[0]] {
            return shape_err(format!("conv1d input {xs:?}, kernels {ws:?}, bias {bs:?}"));
        }
        if ws[2] % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel width {} must be odd", ws[2])));
        }
        // a length-L signal is a 1×L image
        let dims = Conv2dDims::new(&[xs[0], 1, xs[1]], &[ws[0], ws[1], 1, ws[2]]);
        let out = conv2d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &dims);
        let t = Tensor::new(vec![dims.cout, dims.w], out)?;
        Ok(self.push_op(t, Op::Conv1d(x, w, b), &[x, w, b]))
    }

    // ---- reductions & normalisation -----------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, dim, inner) = axis_split(xv.shape(), axis)?;
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * dim + j) * inner + i;
                let max = (0..dim).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..dim {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..dim {
                    out[at(j)] /= total;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push_op(t, Op::Softmax(x, axis), &[x]))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let xv = self.value(x);
        let (outer, dim, inner) = axis_split(xv.shape(), axis)?;
        let src = xv.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..dim {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * dim + j) * inner + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= dim as f64);
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let op = if mean { Op::Mean(x, axis) } else { Op::Sum(x, axis) };
        Ok(self.push_op(t, op, &[x]))
    }

    /// Sums out `axis`.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Averages out `axis`.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push_op(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    // ---- layout ------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push_op(t, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true)) {
            return shape_err(format!("invalid permutation {axes:?} for {xs:?}"));
        }
        let mut in_strides = vec![1usize; xs.len()];
        for ax in (0..xs.len().saturating_sub(1)).rev() {
            in_strides[ax] = in_strides[ax + 1] * xs[ax + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n: usize = xs.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; xs.len()];
        for _ in 0..n {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for ax in (0..idx.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let src = self.value(x).data();
        let data = map.iter().map(|&j| src[j]).collect();
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push_op(t, Op::Gather(x, map), &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return shape_err("transpose needs rank >= 2");
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    /// Zero-pads axis 0 at the end up to `rows`.
    pub fn pad_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.is_empty() || rows < s[0] {
            return shape_err(format!("cannot pad {s:?} to {rows} rows"));
        }
        let mut data = xv.data().to_vec();
        let row_len: usize = s[1..].iter().product();
        data.resize(rows * row_len, 0.0);
        let mut shape = s.to_vec();
        shape[0] = rows;
        let t = Tensor::new(shape, data)?;
        Ok(self.push_op(t, Op::PadRows(x), &[x]))
    }

    /// Rows `start..start + len` of axis 0.
    pub fn narrow_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.is_empty() || len == 0 || start + len > s[0] {
            return shape_err(format!("rows {start}..{} out of range for {s:?}", start + len));
        }
        let row_len: usize = s[1..].iter().product();
        let data = xv.data()[start * row_len..(start + len) * row_len].to_vec();
        let mut shape = s.to_vec();
        shape[0] = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push_op(t, Op::NarrowRows(x, start), &[x]))
    }

    /// Concatenates along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() == 0 || v.shape()[1..] != tail[..] {
                return shape_err(format!("concat of {:?} onto trailing {tail:?}", v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let t = Tensor::new(shape, data)?;
        Ok(self.push_op(t, Op::Concat(parts.to_vec()), parts))
    }

    /// Station-averaged DFT magnitude of a `[T, N]` series at the given integer
    /// frequencies. Differentiable except where a magnitude is exactly zero
    /// (gradient taken as 0 there).
    pub fn dft_amplitudes(&mut self, x: Var, freqs: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return shape_err(format!("dft_amplitudes needs [T, N], got {:?}", xv.shape()));
        }
        // forward values come from the same FFT the detached path uses, so
        // turning gradients on never moves the forward pass
        let spectrum = crate::spectral::dft_amplitudes(xv)?;
        if let Some(&f) = freqs.iter().find(|&&f| f >= spectrum.len()) {
            return shape_err(format!("frequency {f} out of range for T = {}", spectrum.len()));
        }
        let t = Tensor::from_vec(freqs.iter().map(|&f| spectrum.values()[f]).collect());
        Ok(self.push_op(t, Op::Amplitudes(x, freqs.to_vec()), &[x]))
    }

    // ---- backward ----------------------------------------------------------

    /// Propagates d(loss)/d(node) back through the tape and adds the result
    /// into every gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            for (parent, pg) in self.local_grads(i, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` with respect to each parent.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let reduce_b = |b: Var, map: &Option<Vec<usize>>, contrib: Vec<f64>| -> Vec<f64> {
            match map {
                None => contrib,
                Some(m) => {
                    let mut gb = vec![0.0; self.nodes[b.0].value.numel()];
                    for (c, &j) in contrib.iter().zip(m) {
                        gb[j] += c;
                    }
                    gb
                }
            }
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b, map) => vec![(*a, g.to_vec()), (*b, reduce_b(*b, map, g.to_vec()))],
            Op::Sub(a, b, map) => vec![
                (*a, g.to_vec()),
                (*b, reduce_b(*b, map, g.iter().map(|x| -x).collect())),
            ],
            Op::Mul(a, b, map) => {
                let (ad, bd) = (val(*a), val(*b));
                let b_at = |k: usize| match map {
                    None => bd[k],
                    Some(m) => bd[m[k]],
                };
                let mut out = Vec::with_capacity(2);
                if wants(*a) {
                    out.push((*a, g.iter().enumerate().map(|(k, gk)| gk * b_at(k)).collect()));
                }
                if wants(*b) {
                    let contrib = g.iter().zip(ad).map(|(gk, ak)| gk * ak).collect();
                    out.push((*b, reduce_b(*b, map, contrib)));
                }
                out
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|x| x * s).collect())],
            Op::Sigmoid(a) => {
                let y = node.value.data();
                vec![(*a, g.iter().zip(y).map(|(gk, s)| gk * s * (1.0 - s)).collect())]
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                vec![(*a, g.iter().zip(y).map(|(gk, t)| gk * (1.0 - t * t)).collect())]
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let r = sa.len();
                let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
                let batch: usize = sa[..r - 2].iter().product();
                let (ad, bd) = (val(*a), val(*b));
                let mut out = Vec::with_capacity(2);
                if wants(*a) {
                    let mut ga = vec![0.0; batch * m * k];
                    for bi in 0..batch {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let bm = &bd[bi * k * n..(bi + 1) * k * n];
                        let gam = &mut ga[bi * m * k..(bi + 1) * m * k];
                        for i in 0..m {
                            let grow = &gc[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bm[p * n..(p + 1) * n];
                                gam[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                    }
                    out.push((*a, ga));
                }
                if wants(*b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for bi in 0..batch {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let am = &ad[bi * m * k..(bi + 1) * m * k];
                        let gbm = &mut gb[bi * k * n..(bi + 1) * k * n];
                        for i in 0..m {
                            let grow = &gc[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = am[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for (dst, gv) in gbm[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *dst += aip * gv;
                                }
                            }
                        }
                    }
                    out.push((*b, gb));
                }
                out
            }
            Op::Conv2d(x, w, b) | Op::Conv1d(x, w, b) => {
                let (xs, ws) = (self.nodes[x.0].value.shape(), self.nodes[w.0].value.shape());
                let dims = if matches!(node.op, Op::Conv2d(..)) {
                    Conv2dDims::new(xs, ws)
                } else {
                    Conv2dDims::new(&[xs[0], 1, xs[1]], &[ws[0], ws[1], 1, ws[2]])
                };
                let (gx, gw, gbias) = conv2d_backward(val(*x), val(*w), g, &dims);
                vec![(*x, gx), (*w, gw), (*b, gbias)]
            }
            Op::Softmax(x, axis) => {
                let s = node.value.data();
                let (outer, dim, inner) = axis_split(node.value.shape(), *axis).expect("validated");
                let mut gx = vec![0.0; s.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * dim + j) * inner + ii;
                        let dot: f64 = (0..dim).map(|j| g[at(j)] * s[at(j)]).sum();
                        for j in 0..dim {
                            gx[at(j)] = s[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let xs = self.nodes[x.0].value.shape();
                let (outer, dim, inner) = axis_split(xs, *axis).expect("validated");
                let f = if matches!(node.op, Op::Mean(..)) { 1.0 / dim as f64 } else { 1.0 };
                let mut gx = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    for j in 0..dim {
                        for ii in 0..inner {
                            gx[(o * dim + j) * inner + ii] = g[o * inner + ii] * f;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::SumAll(x) => vec![(*x, vec![g[0]; self.nodes[x.0].value.numel()])],
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Gather(x, map) => {
                let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                for (gk, &j) in g.iter().zip(map) {
                    gx[j] += gk;
                }
                vec![(*x, gx)]
            }
            Op::PadRows(x) => {
                let n = self.nodes[x.0].value.numel();
                vec![(*x, g[..n].to_vec())]
            }
            Op::NarrowRows(x, start) => {
                let xv = &self.nodes[x.0].value;
                let row_len: usize = xv.shape()[1..].iter().product();
                let mut gx = vec![0.0; xv.numel()];
                gx[start * row_len..start * row_len + g.len()].copy_from_slice(g);
                vec![(*x, gx)]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let n = self.nodes[p.0].value.numel();
                        let part = g[offset..offset + n].to_vec();
                        offset += n;
                        (*p, part)
                    })
                    .collect()
            }
            Op::Amplitudes(x, freqs) => {
                let xv = &self.nodes[x.0].value;
                let (t_len, n) = (xv.shape()[0], xv.shape()[1]);
                let mut gx = vec![0.0; t_len * n];
                for (gf, &f) in g.iter().zip(freqs) {
                    for c in 0..n {
                        let (re, im) = dft_bin(xv.data(), t_len, n, c, f);
                        let mag = re.hypot(im);
                        if mag == 0.0 {
                            continue;
                        }
                        let scale = gf / (n as f64 * mag);
                        for t in 0..t_len {
                            let theta = 2.0 * PI * (f * t) as f64 / t_len as f64;
                            gx[t * n + c] += scale * (re * theta.cos() - im * theta.sin());
                        }
                    }
                }
                vec![(*x, gx)]
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Direct DFT coefficient (re, im) of column `c` of a row-major `[t_len, n]` buffer.
fn dft_bin(data: &[f64], t_len: usize, n: usize, c: usize, f: usize) -> (f64, f64) {
    let mut re = 0.0;
    let mut im = 0.0;
    for t in 0..t_len {
        let theta = 2.0 * PI * ((f * t) % t_len) as f64 / t_len as f64;
        let x = data[t * n + c];
        re += x * theta.cos();
        im -= x * theta.sin();
    }
    (re, im)
}

fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (dst, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *dst += aip * bv;
            }
        }
    }
}

struct Conv2dDims {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl Conv2dDims {
    fn new(xs: &[usize], ws: &[usize]) -> Self {
        Conv2dDims {
            cin: xs[0],
            cout: ws[0],
            h: xs[1],
            w: xs[2],
            kh: ws[2],
            kw: ws[3],
        }
    }

    /// Visits every (output cell, input cell, kernel tap) triple inside the grid.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        for o in 0..self.cout {
            for c in 0..self.cin {
                for dy in 0..self.kh {
                    for dx in 0..self.kw {
                        let widx = ((o * self.cin + c) * self.kh + dy) * self.kw + dx;
                        let y_lo = ph.saturating_sub(dy);
                        let y_hi = (self.h + ph).saturating_sub(dy).min(self.h);
                        let x_lo = pw.saturating_sub(dx);
                        let x_hi = (self.w + pw).saturating_sub(dx).min(self.w);
                        for y in y_lo..y_hi {
                            let yy = y + dy - ph;
                            for xq in x_lo..x_hi {
                                let xx = xq + dx - pw;
                                f(
                                    (o * self.h + y) * self.w + xq,
                                    (c * self.h + yy) * self.w + xx,
                                    widx,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], d: &Conv2dDims) -> Vec<f64> {
    let plane = d.h * d.w;
    let mut out = vec![0.0; d.cout * plane];
    for (o, chunk) in out.chunks_mut(plane).enumerate() {
        chunk.fill(b[o]);
    }
    d.for_each_tap(|oi, xi, wi| out[oi] += w[wi] * x[xi]);
    out
}

fn conv2d_backward(x: &[f64], w: &[f64], g: &[f64], d: &Conv2dDims) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    d.for_each_tap(|oi, xi, wi| {
        gx[xi] += w[wi] * g[oi];
        gw[wi] += x[xi] * g[oi];
    });
    let plane = d.h * d.w;
    let gb = g.chunks(plane).map(|c| c.iter().sum()).collect();
    (gx, gw, gb)
}
