//! Reverse-mode gradient tape.
//!
//! Every op appends one node holding its forward value and whatever it needs
//! for the backward rule. `gradients` walks the nodes from the loss back to
//! the first node, so backward rules run in exact reverse of forward order.

use super::loss::{self, PROB_CLAMP};
use super::{ParamRegistry, Tensor};
use crate::channel;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var },
    GlobalAvgPool { x: Var },
    Relu { x: Var },
    Softmax { x: Var },
    Reshape { x: Var },
    PowerNormalize { x: Var, scales: Vec<Option<f64>> },
    AddConst { x: Var },
    Affine { x: Var, scale: f64 },
    Add { a: Var, b: Var },
    Sum { x: Var },
    Mean { x: Var },
    TemperedSigmoid { x: Var, temperature: f64 },
    Mix { d: Var, a: Var, b: Var },
    CrossEntropy { p: Var, targets: Vec<f64> },
    Bce { d: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

/// The computation record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    zero_power_rows: usize,
}

/// Per-node gradients produced by [`Tape::gradients`].
#[derive(Debug)]
pub struct Gradients(Vec<Option<Vec<f64>>>);

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.0.get(var.0).and_then(|g| g.as_deref())
    }
}

fn dims4(t: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::dim(op, format!("expected [N,C,H,W], got {s:?}"))),
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<[usize; 2]> {
    match *t.shape() {
        [n, k] => Ok([n, k]),
        ref s => Err(Error::dim(op, format!("expected [N,K], got {s:?}"))),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Rows left unscaled by `power_normalize` because they were all zero.
    pub fn zero_power_rows(&self) -> usize {
        self.zero_power_rows
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: value.with_requires_grad(false),
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradient iff `requires_grad`; readable through
    /// [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a registry parameter; gradient flows back to it on
    /// [`Tape::backward`] when the parameter is trainable.
    pub fn param(&mut self, params: &ParamRegistry, name: &str) -> Result<Var> {
        let t = params.get(name)?;
        let needs_grad = t.requires_grad();
        let mut value = t.clone();
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
            param: Some(name.to_string()),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, i] = dims2(self.value(x), "linear")?;
        let [wi, o] = dims2(self.value(w), "linear")?;
        if wi != i {
            return Err(Error::dim(
                "linear",
                format!("input features (axis 1) = {i} but weight rows (axis 0) = {wi}"),
            ));
        }
        if self.value(b).shape() != [o] {
            return Err(Error::dim(
                "linear",
                format!("bias shape {:?} vs output features {o}", self.value(b).shape()),
            ));
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            let orow = &mut out[r * o..(r + 1) * o];
            orow.copy_from_slice(bv);
            for (ii, &xi) in xv[r * i..(r + 1) * i].iter().enumerate() {
                if xi != 0.0 {
                    add_scaled(orow, &wv[ii * o..(ii + 1) * o], xi);
                }
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Stride-1 cross-correlation with an odd square kernel and same-size
    /// zero padding.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "conv2d")?;
        let [f, kc, kh, kw] = dims4(self.value(k), "conv2d")?;
        if kc != c {
            return Err(Error::dim(
                "conv2d",
                format!("input channels (axis 1) = {c} but kernel expects {kc}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::dim("conv2d", format!("kernel must be odd and square, got {kh}x{kw}")));
        }
        if self.value(b).shape() != [f] {
            return Err(Error::dim("conv2d", format!("bias must have {f} entries")));
        }
        let geom = ConvGeom { n, c, h, w, f, ks: kh };
        let out = conv_forward(&geom, self.value(x).data(), self.value(k).data(), self.value(b).data());
        let value = Tensor::new(vec![n, f, h, w], out)?;
        Ok(self.push(value, Op::Conv2d { x, k, b }, &[x, k, b]))
    }

    /// 2x2 window, stride 2.
    pub fn pool2d(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "pool2d")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("pool2d", format!("spatial dims {h}x{w} must be even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax.reserve(out.len());
        }
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let idx = [
                        base + 2 * oy * w + 2 * ox,
                        base + 2 * oy * w + 2 * ox + 1,
                        base + (2 * oy + 1) * w + 2 * ox,
                        base + (2 * oy + 1) * w + 2 * ox + 1,
                    ];
                    let o = &mut out[plane * oh * ow + oy * ow + ox];
                    match kind {
                        PoolKind::Max => {
                            let mut best = idx[0];
                            for &i in &idx[1..] {
                                if xv[i] > xv[best] {
                                    best = i;
                                }
                            }
                            *o = xv[best];
                            argmax.push(best);
                        }
                        PoolKind::Avg => *o = idx.iter().map(|&i| xv[i]).sum::<f64>() / 4.0,
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let op = match kind {
            PoolKind::Max => Op::MaxPool { x, argmax },
            PoolKind::Avg => Op::AvgPool { x },
        };
        Ok(self.push(value, op, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "global_avg_pool")?;
        let hw = (h * w) as f64;
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().sum::<f64>() / hw)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Row-wise softmax of `[N, K]` logits.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let [n, k] = dims2(self.value(x), "softmax")?;
        if k < 2 {
            return Err(Error::dim("softmax", format!("need at least 2 classes, got {k}")));
        }
        let mut out = vec![0.0; n * k];
        for (row, o) in self.value(x).data().chunks(k).zip(out.chunks_mut(k)) {
            loss::softmax_row(row, o)?;
        }
        let value = Tensor::new(vec![n, k], out)?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        let rest = t.numel() / n;
        self.reshape(x, vec![n, rest])
    }

    /// Rescales each row of `[N, B]` so that its mean square equals `power`.
    /// All-zero rows pass through unchanged and are counted.
    pub fn power_normalize(&mut self, x: Var, power: f64) -> Result<Var> {
        let [n, b] = dims2(self.value(x), "power_normalize")?;
        let mut out = self.value(x).data().to_vec();
        let mut scales = Vec::with_capacity(n);
        for row in out.chunks_mut(b) {
            let scale = channel::power_scale(row, power);
            match scale {
                Some(s) => row.iter_mut().for_each(|v| *v *= s),
                None => self.zero_power_rows += 1,
            }
            scales.push(scale);
        }
        let value = Tensor::new(vec![n, b], out)?;
        Ok(self.push(value, Op::PowerNormalize { x, scales }, &[x]))
    }

    /// `x + c` where `c` is treated as a constant in backward.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != c.shape() {
            return Err(Error::dim(
                "add_const",
                format!("{:?} vs {:?}", t.shape(), c.shape()),
            ));
        }
        let out = t.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::AddConst { x }, &[x]))
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| scale * v + shift).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Affine { x, scale }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    pub fn tempered_sigmoid(&mut self, x: Var, temperature: f64) -> Var {
        let t = self.value(x);
        let out = t
            .data()
            .iter()
            .map(|&v| loss::tempered_sigmoid(v, temperature))
            .collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::TemperedSigmoid { x, temperature }, &[x])
    }

    /// Row-wise convex mixture `d * a + (1 - d) * b` with `d` of shape
    /// `[N, 1]` and `a`, `b` of shape `[N, K]`.
    pub fn mix(&mut self, d: Var, a: Var, b: Var) -> Result<Var> {
        let [n, k] = dims2(self.value(a), "mix")?;
        if self.value(b).shape() != [n, k] {
            return Err(Error::dim("mix", "mixed operands differ in shape"));
        }
        if self.value(d).shape() != [n, 1] {
            return Err(Error::dim(
                "mix",
                format!("weights must be [{n}, 1], got {:?}", self.value(d).shape()),
            ));
        }
        let (dv, av, bv) = (self.value(d).data(), self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * k];
        for r in 0..n {
            for j in 0..k {
                let i = r * k + j;
                out[i] = dv[r] * av[i] + (1.0 - dv[r]) * bv[i];
            }
        }
        let value = Tensor::new(vec![n, k], out)?;
        Ok(self.push(value, Op::Mix { d, a, b }, &[d, a, b]))
    }

    /// Mean cross-entropy of `[N, K]` probabilities against one-hot targets.
    pub fn cross_entropy(&mut self, p: Var, targets: &Tensor) -> Result<Var> {
        let [_, k] = dims2(self.value(p), "cross_entropy")?;
        if targets.shape() != self.value(p).shape() {
            return Err(Error::dim("cross_entropy", "targets must match probabilities"));
        }
        let v = loss::cross_entropy(self.value(p).data(), targets.data(), k)?;
        let targets = targets.data().to_vec();
        Ok(self.push(Tensor::scalar(v), Op::CrossEntropy { p, targets }, &[p]))
    }

    /// Mean binary cross-entropy of `[N, 1]` soft decisions against `{0, 1}`
    /// targets.
    pub fn binary_cross_entropy(&mut self, d: Var, targets: &[f64]) -> Result<Var> {
        let dv = self.value(d);
        if dv.numel() != targets.len() {
            return Err(Error::dim(
                "binary_cross_entropy",
                format!("{} decisions vs {} targets", dv.numel(), targets.len()),
            ));
        }
        let v = dv
            .data()
            .iter()
            .zip(targets)
            .map(|(&d, &t)| loss::binary_cross_entropy(d, t))
            .sum::<f64>()
            / targets.len() as f64;
        let targets = targets.to_vec();
        Ok(self.push(Tensor::scalar(v), Op::Bce { d, targets }, &[d]))
    }

    /// Gradients of the scalar `loss` with respect to every node that needs
    /// one.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients(grads))
    }

    /// Runs backward from `loss` and accumulates parameter gradients into
    /// `params`. Repeated calls accumulate.
    pub fn backward(&self, loss: Var, params: &mut ParamRegistry) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.0) {
            if let (Some(name), Some(g)) = (&node.param, g) {
                params.get_mut(name)?.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, delta: Vec<f64>| match &mut grads[v.0] {
            Some(acc) => add_into(acc, &delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let [n, i] = [xv.shape()[0], xv.shape()[1]];
                let o = wv.shape()[1];
                if self.wants(*x) {
                    let mut gx = vec![0.0; n * i];
                    for r in 0..n {
                        let grow = &g[r * o..(r + 1) * o];
                        for (ii, gxi) in gx[r * i..(r + 1) * i].iter_mut().enumerate() {
                            *gxi = dot(grow, &wv.data()[ii * o..(ii + 1) * o]);
                        }
                    }
                    send(*x, gx);
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; i * o];
                    for r in 0..n {
                        let grow = &g[r * o..(r + 1) * o];
                        for (ii, &xi) in xv.data()[r * i..(r + 1) * i].iter().enumerate() {
                            if xi != 0.0 {
                                add_scaled(&mut gw[ii * o..(ii + 1) * o], grow, xi);
                            }
                        }
                    }
                    send(*w, gw);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; o];
                    for grow in g.chunks(o) {
                        add_into(&mut gb, grow);
                    }
                    send(*b, gb);
                }
            }
            Op::Conv2d { x, k, b } => {
                let [n, c, h, w] = dims4(self.value(*x), "conv2d").expect("checked in forward");
                let ks = self.value(*k).shape();
                let geom = ConvGeom { n, c, h, w, f: ks[0], ks: ks[2] };
                let (gx, gk) = conv_backward(
                    &geom,
                    self.value(*x).data(),
                    self.value(*k).data(),
                    g,
                    self.wants(*x),
                    self.wants(*k),
                );
                if let Some(gx) = gx {
                    send(*x, gx);
                }
                if let Some(gk) = gk {
                    send(*k, gk);
                }
                if self.wants(*b) {
                    let hw = h * w;
                    let mut gb = vec![0.0; geom.f];
                    for (plane, chunk) in g.chunks(hw).enumerate() {
                        gb[plane % geom.f] += chunk.iter().sum::<f64>();
                    }
                    send(*b, gb);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    gx[src] += gv;
                }
                send(*x, gx);
            }
            Op::AvgPool { x } => {
                let s = self.value(*x).shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![0.0; self.value(*x).numel()];
                for plane in 0..s[0] * s[1] {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[plane * h * w + y * w + xx] =
                                g[plane * oh * ow + (y / 2) * ow + xx / 2] / 4.0;
                        }
                    }
                }
                send(*x, gx);
            }
            Op::GlobalAvgPool { x } => {
                let s = self.value(*x).shape();
                let hw = s[2] * s[3];
                let gx = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv / hw as f64, hw))
                    .collect();
                send(*x, gx);
            }
            Op::Relu { x } => {
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                send(*x, gx);
            }
            Op::Softmax { x } => {
                let k = node.value.shape()[1];
                let mut gx = vec![0.0; g.len()];
                for ((y, gr), out) in node.value.data().chunks(k).zip(g.chunks(k)).zip(gx.chunks_mut(k)) {
                    let inner = dot(y, gr);
                    for j in 0..k {
                        out[j] = y[j] * (gr[j] - inner);
                    }
                }
                send(*x, gx);
            }
            Op::Reshape { x } | Op::AddConst { x } => send(*x, g.to_vec()),
            Op::PowerNormalize { x, scales } => {
                let b = node.value.shape()[1];
                let xv = self.value(*x).data();
                let mut gx = vec![0.0; g.len()];
                for (r, scale) in scales.iter().enumerate() {
                    let span = r * b..(r + 1) * b;
                    let (xr, gr) = (&xv[span.clone()], &g[span.clone()]);
                    match scale {
                        None => gx[span].copy_from_slice(gr),
                        Some(s) => {
                            let norm2 = dot(xr, xr);
                            let proj = dot(xr, gr) / norm2;
                            for (o, (&xi, &gi)) in gx[span].iter_mut().zip(xr.iter().zip(gr)) {
                                *o = s * (gi - xi * proj);
                            }
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Affine { x, scale } => send(*x, g.iter().map(|v| v * scale).collect()),
            Op::Add { a, b } => {
                if self.wants(*a) {
                    send(*a, g.to_vec());
                }
                if self.wants(*b) {
                    send(*b, g.to_vec());
                }
            }
            Op::Sum { x } => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::TemperedSigmoid { x, temperature } => {
                let gx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * temperature * y * (1.0 - y))
                    .collect();
                send(*x, gx);
            }
            Op::Mix { d, a, b } => {
                let k = node.value.shape()[1];
                let (dv, av, bv) = (self.value(*d).data(), self.value(*a).data(), self.value(*b).data());
                if self.wants(*d) {
                    let gd = (0..dv.len())
                        .map(|r| {
                            (0..k)
                                .map(|j| g[r * k + j] * (av[r * k + j] - bv[r * k + j]))
                                .sum()
                        })
                        .collect();
                    send(*d, gd);
                }
                if self.wants(*a) {
                    let ga = g.iter().enumerate().map(|(i, gv)| gv * dv[i / k]).collect();
                    send(*a, ga);
                }
                if self.wants(*b) {
                    let gb = g.iter().enumerate().map(|(i, gv)| gv * (1.0 - dv[i / k])).collect();
                    send(*b, gb);
                }
            }
            Op::CrossEntropy { p, targets } => {
                let pv = self.value(*p);
                let n = pv.shape()[0] as f64;
                let gp = pv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&pk, &t)| {
                        if t == 0.0 || pk < PROB_CLAMP {
                            0.0
                        } else {
                            -g[0] * t / (n * pk)
                        }
                    })
                    .collect();
                send(*p, gp);
            }
            Op::Bce { d, targets } => {
                let n = targets.len() as f64;
                let gd = self
                    .value(*d)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&dv, &t)| {
                        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&dv) {
                            0.0
                        } else {
                            g[0] * (-t / dv + (1.0 - t) / (1.0 - dv)) / n
                        }
                    })
                    .collect();
                send(*d, gd);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_scaled(dst: &mut [f64], src: &[f64], scale: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    ks: usize,
}

impl ConvGeom {
    fn taps(&self) -> usize {
        self.c * self.ks * self.ks
    }

    fn cols(&self) -> usize {
        self.n * self.h * self.w
    }

    /// Unfolds `x [N,C,H,W]` into `[C*k*k, N*H*W]` patch columns.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (hw, pad, ncols) = (self.h * self.w, self.ks / 2, self.cols());
        let mut cols = vec![0.0; self.taps() * ncols];
        for ci in 0..self.c {
            for ky in 0..self.ks {
                for kx in 0..self.ks {
                    let row = &mut cols[((ci * self.ks + ky) * self.ks + kx) * ncols..][..ncols];
                    for ni in 0..self.n {
                        let plane = &x[(ni * self.c + ci) * hw..][..hw];
                        for y in 0..self.h {
                            let iy = y + ky;
                            if iy < pad || iy - pad >= self.h {
                                continue;
                            }
                            let dst = &mut row[(ni * self.h + y) * self.w..][..self.w];
                            for (xo, d) in dst.iter_mut().enumerate() {
                                let ix = xo + kx;
                                if ix >= pad && ix - pad < self.w {
                                    *d = plane[(iy - pad) * self.w + ix - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`].
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (hw, pad, ncols) = (self.h * self.w, self.ks / 2, self.cols());
        let mut x = vec![0.0; self.n * self.c * hw];
        for ci in 0..self.c {
            for ky in 0..self.ks {
                for kx in 0..self.ks {
                    let row = &cols[((ci * self.ks + ky) * self.ks + kx) * ncols..][..ncols];
                    for ni in 0..self.n {
                        let plane = &mut x[(ni * self.c + ci) * hw..][..hw];
                        for y in 0..self.h {
                            let iy = y + ky;
                            if iy < pad || iy - pad >= self.h {
                                continue;
                            }
                            let src = &row[(ni * self.h + y) * self.w..][..self.w];
                            for (xo, &v) in src.iter().enumerate() {
                                let ix = xo + kx;
                                if ix >= pad && ix - pad < self.w {
                                    plane[(iy - pad) * self.w + ix - pad] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], k: &[f64], bias: &[f64]) -> Vec<f64> {
    let (hw, ncols, taps) = (g.h * g.w, g.cols(), g.taps());
    let cols = g.im2col(x);
    // [F, N*H*W]
    let mut fm = vec![0.0; g.f * ncols];
    for fi in 0..g.f {
        let dst = &mut fm[fi * ncols..][..ncols];
        dst.fill(bias[fi]);
        for (q, &kv) in k[fi * taps..][..taps].iter().enumerate() {
            if kv != 0.0 {
                add_scaled(dst, &cols[q * ncols..][..ncols], kv);
            }
        }
    }
    let mut out = vec![0.0; g.n * g.f * hw];
    for fi in 0..g.f {
        for ni in 0..g.n {
            out[(ni * g.f + fi) * hw..][..hw].copy_from_slice(&fm[fi * ncols + ni * hw..][..hw]);
        }
    }
    out
}

fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    k: &[f64],
    grad_out: &[f64],
    want_x: bool,
    want_k: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (hw, ncols, taps) = (g.h * g.w, g.cols(), g.taps());
    let mut go = vec![0.0; g.f * ncols];
    for fi in 0..g.f {
        for ni in 0..g.n {
            go[fi * ncols + ni * hw..][..hw].copy_from_slice(&grad_out[(ni * g.f + fi) * hw..][..hw]);
        }
    }
    let gk = want_k.then(|| {
        let cols = g.im2col(x);
        let mut gk = vec![0.0; k.len()];
        for fi in 0..g.f {
            let grow = &go[fi * ncols..][..ncols];
            for q in 0..taps {
                gk[fi * taps + q] = dot(grow, &cols[q * ncols..][..ncols]);
            }
        }
        gk
    });
    let gx = want_x.then(|| {
        let mut gcols = vec![0.0; taps * ncols];
        for fi in 0..g.f {
            let grow = &go[fi * ncols..][..ncols];
            for q in 0..taps {
                let kv = k[fi * taps + q];
                if kv != 0.0 {
                    add_scaled(&mut gcols[q * ncols..][..ncols], grow, kv);
                }
            }
        }
        g.col2im(&gcols)
    });
    (gx, gk)
}
