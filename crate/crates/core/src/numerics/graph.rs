//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records an operation only when at least one of its inputs
//! depends on a leaf that requires a gradient. Constants and frozen
//! parameters never enter the tape, so their gradients are never allocated.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, sigmoid, GroupNormSaved};
use super::scalar::matmul_into;
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`](super::ParamStore).
pub type ParamId = usize;

/// A value flowing through a graph. `node` is set iff the value is
/// differentiable with respect to some tracked leaf.
#[derive(Clone, Debug)]
pub struct Var<F> {
    value: Tensor<F>,
    node: Option<usize>,
}

impl<F: Float> Var<F> {
    pub fn value(&self) -> &Tensor<F> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<F> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }
}

type P = Option<usize>;

enum Op<F> {
    Leaf(Vec<usize>),
    Add(P, P),
    Sub(P, P),
    Mul(P, P, Tensor<F>, Tensor<F>),
    Scale(P, F),
    Conv2d {
        x: P,
        w: P,
        b: P,
        xv: Tensor<F>,
        wv: Tensor<F>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: P,
        w: P,
        b: P,
        xv: Tensor<F>,
        wv: Tensor<F>,
    },
    Matmul(P, P, Tensor<F>, Tensor<F>),
    Reshape(P),
    GroupNorm {
        x: P,
        gamma: P,
        beta: P,
        gv: Tensor<F>,
        saved: GroupNormSaved<F>,
        groups: usize,
        shape: Vec<usize>,
    },
    Silu(P, Tensor<F>),
    ScaleShift(P, P, Tensor<F>, Tensor<F>),
    Bilinear(P, Vec<usize>, usize),
    Nearest(P, Vec<usize>, usize),
    AvgPool(P, Vec<usize>, usize),
    Concat(Vec<(P, usize)>, Vec<usize>),
    Mse(P, P, Tensor<F>),
    Sum(P, Vec<usize>),
    Embedding(P, Vec<usize>, Vec<usize>),
    TimeEmbed(P, Tensor<F>, usize),
}

struct Node<F> {
    op: Op<F>,
    param: Option<ParamId>,
}

/// Recorded forward computation.
pub struct Graph<F> {
    nodes: RefCell<Vec<Node<F>>>,
    params: RefCell<HashMap<ParamId, Var<F>>>,
    record: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<F> {
    params: BTreeMap<ParamId, Tensor<F>>,
    leaves: HashMap<usize, Tensor<F>>,
}

impl<F: Float> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor<F>> {
        &self.params
    }

    /// Gradient with respect to a leaf created by [`Graph::input`].
    pub fn wrt(&self, var: &Var<F>) -> Option<&Tensor<F>> {
        var.node.and_then(|n| self.leaves.get(&n))
    }
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    /// A recording graph.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            record: true,
        }
    }

    /// A graph that never records; every value is a constant.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn constant(&self, value: Tensor<F>) -> Var<F> {
        Var { value, node: None }
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&self, value: Tensor<F>) -> Var<F> {
        self.leaf(value, None)
    }

    /// Parameter leaf, registered once per graph. Frozen parameters
    /// become constants.
    pub fn param(&self, id: ParamId, value: &Tensor<F>, trainable: bool) -> Var<F> {
        if let Some(v) = self.params.borrow().get(&id) {
            return v.clone();
        }
        let var = if trainable {
            self.leaf(value.clone(), Some(id))
        } else {
            self.constant(value.clone())
        };
        self.params.borrow_mut().insert(id, var.clone());
        var
    }

    fn leaf(&self, value: Tensor<F>, param: Option<ParamId>) -> Var<F> {
        if !self.record {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf(value.shape().to_vec()),
            param,
        });
        Var {
            value,
            node: Some(nodes.len() - 1),
        }
    }

    fn push(&self, name: &'static str, value: Tensor<F>, parents: &[P], op: impl FnOnce() -> Op<F>) -> Result<Var<F>> {
        let value = value.ensure_finite(name)?;
        if !self.record || parents.iter().all(Option::is_none) {
            return Ok(self.constant(value));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op: op(), param: None });
        Ok(Var {
            value,
            node: Some(nodes.len() - 1),
        })
    }

    pub fn add(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        let v = a.value.add(&b.value)?;
        self.push("add", v, &[a.node, b.node], || Op::Add(a.node, b.node))
    }

    pub fn sub(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        let v = a.value.sub(&b.value)?;
        self.push("sub", v, &[a.node, b.node], || Op::Sub(a.node, b.node))
    }

    pub fn mul(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        let v = a.value.mul(&b.value)?;
        self.push("mul", v, &[a.node, b.node], || {
            Op::Mul(a.node, b.node, a.value.clone(), b.value.clone())
        })
    }

    pub fn scale(&self, a: &Var<F>, s: F) -> Result<Var<F>> {
        let v = a.value.scale(s);
        self.push("scale", v, &[a.node], || Op::Scale(a.node, s))
    }

    pub fn conv2d(&self, x: &Var<F>, w: &Var<F>, b: Option<&Var<F>>, stride: usize, pad: usize) -> Result<Var<F>> {
        let v = kernels::conv2d_forward(&x.value, &w.value, b.map(|b| &b.value), stride, pad)?;
        let bn = b.and_then(|b| b.node);
        self.push("conv2d", v, &[x.node, w.node, bn], || Op::Conv2d {
            x: x.node,
            w: w.node,
            b: bn,
            xv: x.value.clone(),
            wv: w.value.clone(),
            stride,
            pad,
        })
    }

    /// `x[B, in] * w[out, in]^T + b[out]`.
    pub fn linear(&self, x: &Var<F>, w: &Var<F>, b: Option<&Var<F>>) -> Result<Var<F>> {
        let (xs, ws) = (x.shape(), w.shape());
        let mismatch = || Error::ShapeMismatch {
            op: "linear",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        };
        let (&[batch, din], &[dout, win]) = (xs, ws) else {
            return Err(mismatch());
        };
        if din != win {
            return Err(mismatch());
        }
        let mut out = vec![F::zero(); batch * dout];
        if let Some(b) = b {
            if b.shape() != [dout] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: ws.to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(b.value.data());
            }
        }
        matmul_into(x.value.data(), false, w.value.data(), true, &mut out, batch, din, dout, b.is_some());
        let bn = b.and_then(|b| b.node);
        self.push("linear", Tensor::from_parts(vec![batch, dout], out), &[x.node, w.node, bn], || {
            Op::Linear {
                x: x.node,
                w: w.node,
                b: bn,
                xv: x.value.clone(),
                wv: w.value.clone(),
            }
        })
    }

    pub fn matmul(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(mismatch());
        };
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![F::zero(); m * n];
        matmul_into(a.value.data(), false, b.value.data(), false, &mut out, m, k, n, false);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), &[a.node, b.node], || {
            Op::Matmul(a.node, b.node, a.value.clone(), b.value.clone())
        })
    }

    pub fn reshape(&self, x: &Var<F>, shape: &[usize]) -> Result<Var<F>> {
        let v = x.value.reshape(shape)?;
        self.push("reshape", v, &[x.node], || Op::Reshape(x.node))
    }

    pub fn group_norm(&self, x: &Var<F>, gamma: &Var<F>, beta: &Var<F>, groups: usize, eps: f64) -> Result<Var<F>> {
        let (v, saved) = kernels::group_norm_forward(&x.value, &gamma.value, &beta.value, groups, eps)?;
        self.push("group_norm", v, &[x.node, gamma.node, beta.node], || Op::GroupNorm {
            x: x.node,
            gamma: gamma.node,
            beta: beta.node,
            gv: gamma.value.clone(),
            saved,
            groups,
            shape: x.shape().to_vec(),
        })
    }

    pub fn silu(&self, x: &Var<F>) -> Result<Var<F>> {
        let v = x.value.map(|t| t * sigmoid(t));
        self.push("silu", v, &[x.node], || Op::Silu(x.node, x.value.clone()))
    }

    /// `x * (1 + scale) + shift` with `ss = [scale | shift]` of shape
    /// `[B, 2C]` broadcast over the spatial axes of `x[B, C, H, W]`.
    pub fn scale_shift(&self, x: &Var<F>, ss: &Var<F>) -> Result<Var<F>> {
        let (b, c, h, w) = x.value.dims4()?;
        if ss.shape() != [b, 2 * c] {
            return Err(Error::ShapeMismatch {
                op: "scale_shift",
                lhs: x.shape().to_vec(),
                rhs: ss.shape().to_vec(),
            });
        }
        let hw = h * w;
        let mut out = vec![F::zero(); x.value.numel()];
        for n in 0..b {
            for ch in 0..c {
                let s = F::one() + ss.value.data()[n * 2 * c + ch];
                let t = ss.value.data()[n * 2 * c + c + ch];
                let off = (n * c + ch) * hw;
                for i in off..off + hw {
                    out[i] = x.value.data()[i] * s + t;
                }
            }
        }
        self.push(
            "scale_shift",
            Tensor::from_parts(x.shape().to_vec(), out),
            &[x.node, ss.node],
            || Op::ScaleShift(x.node, ss.node, x.value.clone(), ss.value.clone()),
        )
    }

    pub fn bilinear_upsample(&self, x: &Var<F>, factor: usize) -> Result<Var<F>> {
        let v = kernels::bilinear_forward(&x.value, factor)?;
        self.push("bilinear_upsample", v, &[x.node], || {
            Op::Bilinear(x.node, x.shape().to_vec(), factor)
        })
    }

    pub fn nearest_upsample(&self, x: &Var<F>, factor: usize) -> Result<Var<F>> {
        let v = kernels::nearest_forward(&x.value, factor)?;
        self.push("nearest_upsample", v, &[x.node], || Op::Nearest(x.node, x.shape().to_vec(), factor))
    }

    pub fn avg_pool(&self, x: &Var<F>, factor: usize) -> Result<Var<F>> {
        let v = kernels::avg_pool_forward(&x.value, factor)?;
        self.push("avg_pool", v, &[x.node], || Op::AvgPool(x.node, x.shape().to_vec(), factor))
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&self, parts: &[&Var<F>]) -> Result<Var<F>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (b, _, h, w) = first.value.dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let (pb, pc, ph, pw) = p.value.dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            channels.push(pc);
        }
        let ctot: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(b * ctot * hw);
        for n in 0..b {
            for (p, &pc) in parts.iter().zip(&channels) {
                out.extend_from_slice(&p.value.data()[n * pc * hw..(n + 1) * pc * hw]);
            }
        }
        let nodes: Vec<P> = parts.iter().map(|p| p.node).collect();
        self.push("concat_channels", Tensor::from_parts(vec![b, ctot, h, w], out), &nodes, || {
            Op::Concat(nodes.iter().copied().zip(channels.iter().copied()).collect(), vec![b, ctot, h, w])
        })
    }

    /// Mean of squared differences, a scalar.
    pub fn mse(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        let diff = a.value.sub(&b.value)?;
        let n = F::lit(diff.numel().max(1) as f64);
        let v = diff.data().iter().map(|&d| d * d).sum::<F>() / n;
        self.push("mse", Tensor::scalar(v), &[a.node, b.node], || Op::Mse(a.node, b.node, diff))
    }

    pub fn sum(&self, x: &Var<F>) -> Result<Var<F>> {
        let v = Tensor::scalar(x.value.sum());
        self.push("sum", v, &[x.node], || Op::Sum(x.node, x.shape().to_vec()))
    }

    /// Row gather from `table[n, d]`.
    pub fn embedding(&self, table: &Var<F>, indices: &[usize]) -> Result<Var<F>> {
        let &[rows, d] = table.shape() else {
            return Err(Error::invalid(format!("embedding table must be 2-D, got {:?}", table.shape())));
        };
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::invalid(format!("embedding index {i} out of range {rows}")));
            }
            out.extend_from_slice(&table.value.data()[i * d..(i + 1) * d]);
        }
        self.push("embedding", Tensor::from_parts(vec![indices.len(), d], out), &[table.node], || {
            Op::Embedding(table.node, indices.to_vec(), table.shape().to_vec())
        })
    }

    /// Sinusoidal embedding `[sin(t f_i) | cos(t f_i)]` of a `[B]` vector of
    /// (real-valued) timesteps, with `f_i = 10000^(-i / (dim/2))`.
    pub fn timestep_embedding(&self, t: &Var<F>, dim: usize) -> Result<Var<F>> {
        if t.value.ndim() != 1 || dim < 2 || dim % 2 != 0 {
            return Err(Error::invalid(format!(
                "timestep embedding needs a 1-D timestep vector and an even dim >= 2, got {:?} and {dim}",
                t.shape()
            )));
        }
        let half = dim / 2;
        let freqs = embed_freqs::<F>(half);
        let mut out = Vec::with_capacity(t.value.numel() * dim);
        for &tv in t.value.data() {
            out.extend(freqs.iter().map(|&f| (tv * f).sin()));
            out.extend(freqs.iter().map(|&f| (tv * f).cos()));
        }
        self.push(
            "timestep_embedding",
            Tensor::from_parts(vec![t.value.numel(), dim], out),
            &[t.node],
            || Op::TimeEmbed(t.node, t.value.clone(), dim),
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: &Var<F>) -> Result<Gradients<F>> {
        if loss.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let mut out = Gradients {
            params: BTreeMap::new(),
            leaves: HashMap::new(),
        };
        let Some(root) = loss.node else {
            return Ok(out);
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<F>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(vec![F::one()]);
        for i in (0..=root).rev() {
            let Some(gy) = grads[i].take() else { continue };
            match &nodes[i].op {
                Op::Leaf(shape) => {
                    let t = Tensor::from_parts(shape.clone(), gy);
                    match nodes[i].param {
                        Some(id) => {
                            out.params.insert(id, t);
                        }
                        None => {
                            out.leaves.insert(i, t);
                        }
                    }
                }
                op => backprop(op, gy, &mut grads)?,
            }
        }
        Ok(out)
    }
}

fn embed_freqs<F: Float>(half: usize) -> Vec<F> {
    (0..half)
        .map(|i| F::lit((-(10000f64.ln()) * i as f64 / half as f64).exp()))
        .collect()
}

fn accumulate<F: Float>(grads: &mut [Option<Vec<F>>], target: P, g: Vec<F>) {
    let Some(t) = target else { return };
    match &mut grads[t] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        slot @ None => *slot = Some(g),
    }
}

fn backprop<F: Float>(op: &Op<F>, gy: Vec<F>, grads: &mut [Option<Vec<F>>]) -> Result<()> {
    match op {
        Op::Leaf(_) => unreachable!("leaves handled by caller"),
        Op::Add(a, b) => {
            if b.is_some() {
                accumulate(grads, *b, gy.clone());
            }
            accumulate(grads, *a, gy);
        }
        Op::Sub(a, b) => {
            if b.is_some() {
                accumulate(grads, *b, gy.iter().map(|&v| -v).collect());
            }
            accumulate(grads, *a, gy);
        }
        Op::Mul(a, b, av, bv) => {
            if a.is_some() {
                accumulate(grads, *a, gy.iter().zip(bv.data()).map(|(&g, &v)| g * v).collect());
            }
            if b.is_some() {
                accumulate(grads, *b, gy.iter().zip(av.data()).map(|(&g, &v)| g * v).collect());
            }
        }
        Op::Scale(a, s) => accumulate(grads, *a, gy.iter().map(|&g| g * *s).collect()),
        Op::Conv2d {
            x,
            w,
            b,
            xv,
            wv,
            stride,
            pad,
        } => {
            let cg = kernels::conv2d_backward(xv, wv, &gy, *stride, *pad, (x.is_some(), w.is_some(), b.is_some()))?;
            if let Some(dx) = cg.dx {
                accumulate(grads, *x, dx);
            }
            if let Some(dw) = cg.dw {
                accumulate(grads, *w, dw);
            }
            if let Some(db) = cg.db {
                accumulate(grads, *b, db);
            }
        }
        Op::Linear { x, w, b, xv, wv } => {
            let (batch, din) = (xv.shape()[0], xv.shape()[1]);
            let dout = wv.shape()[0];
            if x.is_some() {
                let mut dx = vec![F::zero(); batch * din];
                matmul_into(&gy, false, wv.data(), false, &mut dx, batch, dout, din, false);
                accumulate(grads, *x, dx);
            }
            if w.is_some() {
                let mut dw = vec![F::zero(); dout * din];
                matmul_into(&gy, true, xv.data(), false, &mut dw, dout, batch, din, false);
                accumulate(grads, *w, dw);
            }
            if b.is_some() {
                let mut db = vec![F::zero(); dout];
                for row in gy.chunks(dout) {
                    db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                }
                accumulate(grads, *b, db);
            }
        }
        Op::Matmul(a, b, av, bv) => {
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if a.is_some() {
                let mut da = vec![F::zero(); m * k];
                matmul_into(&gy, false, bv.data(), true, &mut da, m, n, k, false);
                accumulate(grads, *a, da);
            }
            if b.is_some() {
                let mut db = vec![F::zero(); k * n];
                matmul_into(av.data(), true, &gy, false, &mut db, k, m, n, false);
                accumulate(grads, *b, db);
            }
        }
        Op::Reshape(x) => accumulate(grads, *x, gy),
        Op::GroupNorm {
            x,
            gamma,
            beta,
            gv,
            saved,
            groups,
            shape,
        } => {
            let (dx, dg, db) = kernels::group_norm_backward(shape, gv.data(), saved, &gy, *groups);
            accumulate(grads, *x, dx);
            accumulate(grads, *gamma, dg);
            accumulate(grads, *beta, db);
        }
        Op::Silu(x, xv) => {
            let dx = gy
                .iter()
                .zip(xv.data())
                .map(|(&g, &v)| {
                    let s = sigmoid(v);
                    g * s * (F::one() + v * (F::one() - s))
                })
                .collect();
            accumulate(grads, *x, dx);
        }
        Op::ScaleShift(x, ss, xv, ssv) => {
            let (b, c, h, w) = xv.dims4()?;
            let hw = h * w;
            let mut dx = x.map(|_| vec![F::zero(); xv.numel()]);
            let mut dss = ss.map(|_| vec![F::zero(); b * 2 * c]);
            for n in 0..b {
                for ch in 0..c {
                    let off = (n * c + ch) * hw;
                    let g = &gy[off..off + hw];
                    if let Some(dx) = dx.as_mut() {
                        let s = F::one() + ssv.data()[n * 2 * c + ch];
                        dx[off..off + hw].iter_mut().zip(g).for_each(|(d, &gv)| *d = gv * s);
                    }
                    if let Some(dss) = dss.as_mut() {
                        let xs = &xv.data()[off..off + hw];
                        dss[n * 2 * c + ch] = g.iter().zip(xs).map(|(&gv, &xv)| gv * xv).sum();
                        dss[n * 2 * c + c + ch] = g.iter().copied().sum();
                    }
                }
            }
            if let Some(dx) = dx {
                accumulate(grads, *x, dx);
            }
            if let Some(dss) = dss {
                accumulate(grads, *ss, dss);
            }
        }
        Op::Bilinear(x, s, f) => accumulate(grads, *x, kernels::bilinear_backward(s, &gy, *f)),
        Op::Nearest(x, s, f) => accumulate(grads, *x, kernels::nearest_backward(s, &gy, *f)),
        Op::AvgPool(x, s, f) => accumulate(grads, *x, kernels::avg_pool_backward(s, &gy, *f)),
        Op::Concat(parts, s) => {
            let (b, ctot, hw) = (s[0], s[1], s[2] * s[3]);
            let mut offset = 0;
            for &(p, c) in parts {
                if p.is_some() {
                    let mut g = Vec::with_capacity(b * c * hw);
                    for n in 0..b {
                        let start = (n * ctot + offset) * hw;
                        g.extend_from_slice(&gy[start..start + c * hw]);
                    }
                    accumulate(grads, p, g);
                }
                offset += c;
            }
        }
        Op::Mse(a, b, diff) => {
            let k = gy[0] * F::lit(2.0 / diff.numel().max(1) as f64);
            if b.is_some() {
                accumulate(grads, *b, diff.data().iter().map(|&d| -d * k).collect());
            }
            accumulate(grads, *a, diff.data().iter().map(|&d| d * k).collect());
        }
        Op::Sum(x, s) => accumulate(grads, *x, vec![gy[0]; s.iter().product()]),
        Op::Embedding(t, idx, s) => {
            let d = s[1];
            let mut dt = vec![F::zero(); s[0] * d];
            for (row, &i) in idx.iter().enumerate() {
                dt[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(&gy[row * d..(row + 1) * d])
                    .for_each(|(a, &g)| *a += g);
            }
            accumulate(grads, *t, dt);
        }
        Op::TimeEmbed(t, tv, dim) => {
            let half = dim / 2;
            let freqs = embed_freqs::<F>(half);
            let dt = tv
                .data()
                .iter()
                .enumerate()
                .map(|(n, &tval)| {
                    let row = &gy[n * dim..(n + 1) * dim];
                    freqs
                        .iter()
                        .enumerate()
                        .map(|(i, &f)| f * ((tval * f).cos() * row[i] - (tval * f).sin() * row[half + i]))
                        .sum()
                })
                .collect();
            accumulate(grads, *t, dt);
        }
    }
    Ok(())
}
