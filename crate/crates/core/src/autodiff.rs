//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its output value. Nodes are appended in
//! execution order, so walking the tape from the back visits each node once
//! in reverse topological order. Gradients are accumulated in `f64` and
//! written back into the `grad` field of every `requires_grad` leaf.

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::error::{shape_err, NltError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`GradientTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Relu(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Mse {
        pred: Var,
        target: Var,
        n: usize,
    },
    Scale(Var, f64),
    Add(Var, Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input or parameter. Its `requires_grad` flag decides
    /// whether it receives a gradient.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push(tensor, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient written by the last [`backward`](Self::backward), if any.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Moves a node's tensor (value and grad) out of the tape.
    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let wt = self.value(weight);
        let b = self.value(bias);
        let [n, c, h, w] = x.dims4("conv2d input")?;
        let [o, wc, kh, kw] = wt.dims4("conv2d weight")?;
        if c != wc {
            return Err(shape_err!(
                "conv2d input has C={c} channels but weight [O={o},C={wc},{kh},{kw}] expects C={wc}"
            ));
        }
        if b.shape() != [o] {
            return Err(shape_err!(
                "conv2d bias shape {:?} does not match O={o}",
                b.shape()
            ));
        }
        if stride == 0 {
            return Err(NltError::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_err!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            ));
        }
        let geom = ConvGeometry {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            padding,
        };
        let out = conv2d_forward(&geom, x.data(), wt.data(), b.data());
        let value = Tensor::new(&[n, o, geom.out_h(), geom.out_w()], out)?;
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.needs(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first element in
    /// row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.dims4("max_pool2 input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("max_pool2 needs even H and W, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = t.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::MaxPool2 { input: x, argmax }, rg))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(NltError::InvalidArgument(
                "upsample factor must be >= 1".into(),
            ));
        }
        let t = self.value(x);
        let [n, c, h, w] = t.dims4("upsample input")?;
        let (fh, fw) = (h * factor, w * factor);
        let src = t.data();
        let mut out = Vec::with_capacity(n * c * fh * fw);
        for plane in src.chunks_exact(h * w) {
            for y in 0..fh {
                let row = &plane[(y / factor) * w..(y / factor + 1) * w];
                for x in 0..fw {
                    out.push(row[x / factor]);
                }
            }
        }
        let value = Tensor::new(&[n, c, fh, fw], out)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Upsample { input: x, factor }, rg))
    }

    /// `1/(2n) * sum((pred - target)^2)` where `n` is the batch size.
    pub fn mse_loss(&mut self, pred: Var, target: Var, n: usize) -> Result<Var> {
        let p = self.value(pred);
        let t = self.value(target);
        if p.shape() != t.shape() {
            return Err(shape_err!(
                "mse_loss pred {:?} vs target {:?}",
                p.shape(),
                t.shape()
            ));
        }
        let batch = p.shape().first().copied().unwrap_or(1);
        if n == 0 || n != batch {
            return Err(shape_err!(
                "mse_loss n={n} must equal the leading batch dimension {batch}"
            ));
        }
        let sq: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        let value = Tensor::scalar((sq / (2.0 * n as f64)) as f32);
        let rg = self.needs(pred) || self.needs(target);
        Ok(self.push(value, Op::Mse { pred, target, n }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| (v as f64 * factor) as f32)
            .collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.needs(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("add {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x as f64 + y as f64) as f32)
            .collect();
        let value = Tensor::new(ta.shape(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum() as f32);
        let rg = self.needs(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Backpropagates from a scalar `loss`. Every `requires_grad` leaf gets
    /// `dloss/dleaf`; leaves off the path to `loss` get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let need_dx = self.needs(*input);
                    let cg = conv2d_backward(
                        geom,
                        self.value(*input).data(),
                        self.value(*weight).data(),
                        &g,
                        need_dx,
                    );
                    if let Some(dx) = cg.input {
                        accumulate(&mut grads, *input, dx);
                    }
                    if self.needs(*weight) {
                        accumulate(&mut grads, *weight, cg.weight);
                    }
                    if self.needs(*bias) {
                        accumulate(&mut grads, *bias, cg.bias);
                    }
                }
                Op::Relu(x) => {
                    let dx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut dx = vec![0.0; self.value(*input).numel()];
                    for (&src, &gv) in argmax.iter().zip(&g) {
                        dx[src as usize] += gv;
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::Upsample { input, factor } => {
                    let [_, _, h, w] = self.value(*input).dims4("upsample input")?;
                    let f = *factor;
                    let (fh, fw) = (h * f, w * f);
                    let mut dx = vec![0.0; self.value(*input).numel()];
                    for (plane, gp) in dx.chunks_exact_mut(h * w).zip(g.chunks_exact(fh * fw)) {
                        for y in 0..fh {
                            for x in 0..fw {
                                plane[(y / f) * w + x / f] += gp[y * fw + x];
                            }
                        }
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::Mse { pred, target, n } => {
                    let scale = g[0] / *n as f64;
                    let diff: Vec<f64> = self
                        .value(*pred)
                        .data()
                        .iter()
                        .zip(self.value(*target).data())
                        .map(|(&a, &b)| (a as f64 - b as f64) * scale)
                        .collect();
                    if self.needs(*target) {
                        accumulate(&mut grads, *target, diff.iter().map(|d| -d).collect());
                    }
                    if self.needs(*pred) {
                        accumulate(&mut grads, *pred, diff);
                    }
                }
                Op::Scale(x, factor) => {
                    let dx = g.iter().map(|v| v * factor).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sum(x) => {
                    let dx = vec![g[0]; self.value(*x).numel()];
                    accumulate(&mut grads, *x, dx);
                }
            }
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let numel = node.value.numel();
                node.value.grad = Some(match g {
                    Some(g) => g.into_iter().map(|v| v as f32).collect(),
                    None => vec![0.0; numel],
                });
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
