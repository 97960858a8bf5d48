//! Reverse-mode automatic differentiation over rank-4 tensors.
//!
//! Every operation appends a node holding its output value and the input
//! node indices, so the vector order is already topological. `backward`
//! walks it once in reverse, accumulating gradients additively, which makes
//! parameter sharing (the same leaf consumed by many steps) come out right
//! with no extra bookkeeping. Nodes flagged as not needing gradients are
//! skipped wholesale, so frozen stages (the coded mask, noise draws) cost
//! nothing on the way back.

use crate::conv::{self, Padding};
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Id(usize);

enum Op {
    Leaf,
    Conv2d { x: Id, k: Id, bias: Option<Id>, stride: [usize; 2], padding: Padding },
    ConvTranspose2d { x: Id, k: Id, bias: Option<Id>, stride: [usize; 2] },
    /// Normalization through batch statistics; mean/var are saved from the
    /// forward pass because the backward formula needs them.
    BatchNormTrain { x: Id, gamma: Id, beta: Id, eps: f64, mean: Vec<f64>, var: Vec<f64> },
    /// Affine transform under frozen statistics.
    BatchNormEval { x: Id, gamma: Id, beta: Id, eps: f64, mean: Vec<f64>, var: Vec<f64> },
    Relu { x: Id },
    Sigmoid { x: Id },
    Tanh { x: Id },
    Add { a: Id, b: Id },
    Sub { a: Id, b: Id },
    Hadamard { a: Id, b: Id },
    Scale { x: Id, c: f64 },
    /// Broadcast multiply by a per-channel gain `[1,1,1,C]`.
    MulChannel { x: Id, gain: Id },
    ConcatChannels { a: Id, b: Id },
    /// `[N,H,W,C] -> [N,1,1,1]`, the squared L2 norm of each batch item.
    SqSumPerSample { x: Id },
    /// Mean over every element, to a `[1,1,1,1]` scalar.
    MeanAll { x: Id },
}

struct Node<E> {
    value: Tensor<E>,
    needs_grad: bool,
    op: Op,
}

/// Per-channel batch statistics observed by a train-mode normalization,
/// reported back to the caller so running averages can be updated.
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct Tape<E> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    /// Records a value that never receives a gradient (inputs, constants).
    pub fn leaf(&mut self, value: Tensor<E>) -> Id {
        self.push(value, false, Op::Leaf)
    }

    /// Records a value whose gradient will be queried after `backward`.
    pub fn var(&mut self, value: Tensor<E>) -> Id {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, id: Id) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: Id) -> f64 {
        self.nodes[id.0].value.data()[0].as_f64()
    }

    /// Gradient for `id` from the latest `backward`, if one was produced.
    pub fn grad(&self, id: Id) -> Option<&Tensor<E>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, needs_grad: bool, op: Op) -> Id {
        self.nodes.push(Node { value, needs_grad, op });
        Id(self.nodes.len() - 1)
    }

    fn needs(&self, id: Id) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Id, b: Id) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                detail: format!("{} vs {}", fmt_shape(sa), fmt_shape(sb)),
            });
        }
        Ok(())
    }

    pub fn conv2d(
        &mut self,
        x: Id,
        k: Id,
        bias: Option<Id>,
        stride: [usize; 2],
        padding: Padding,
    ) -> Result<Id> {
        let out = conv::conv2d(
            self.value(x),
            self.value(k),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let needs =
            self.needs(x) || self.needs(k) || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(out, needs, Op::Conv2d { x, k, bias, stride, padding }))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Id,
        k: Id,
        bias: Option<Id>,
        stride: [usize; 2],
    ) -> Result<Id> {
        let out = conv::conv_transpose2d(
            self.value(x),
            self.value(k),
            bias.map(|b| self.value(b)),
            stride,
        )?;
        let needs =
            self.needs(x) || self.needs(k) || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(out, needs, Op::ConvTranspose2d { x, k, bias, stride }))
    }

    fn check_bn_shapes(&self, op: &'static str, x: Id, gamma: Id, beta: Id) -> Result<usize> {
        let c = self.value(x).shape()[3];
        for affine in [gamma, beta] {
            if self.value(affine).shape() != [1, 1, 1, c] {
                return Err(Error::Shape {
                    op,
                    detail: format!(
                        "affine {} does not match {c} channels",
                        fmt_shape(self.value(affine).shape())
                    ),
                });
            }
        }
        Ok(c)
    }

    /// Train-mode batch normalization; returns the output node and the batch
    /// statistics it normalized with.
    pub fn batchnorm_train(
        &mut self,
        x: Id,
        gamma: Id,
        beta: Id,
        eps: f64,
    ) -> Result<(Id, BatchStats)> {
        let c = self.check_bn_shapes("batchnorm_train", x, gamma, beta)?;
        let xv = self.value(x);
        let [n, h, w, _] = xv.shape();
        let m = (n * h * w) as f64;
        let mut mean = vec![0.0f64; c];
        for px in xv.data().chunks_exact(c) {
            for (acc, v) in mean.iter_mut().zip(px) {
                *acc += v.as_f64();
            }
        }
        for v in mean.iter_mut() {
            *v /= m;
        }
        let mut var = vec![0.0f64; c];
        for px in xv.data().chunks_exact(c) {
            for ((acc, v), mu) in var.iter_mut().zip(px).zip(&mean) {
                let d = v.as_f64() - mu;
                *acc += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= m;
        }
        let out = self.bn_apply(x, gamma, beta, &mean, &var, eps)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let stats = BatchStats { mean: mean.clone(), var: var.clone() };
        let id = self.push(out, needs, Op::BatchNormTrain { x, gamma, beta, eps, mean, var });
        Ok((id, stats))
    }

    /// Eval-mode batch normalization under frozen running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Id,
        gamma: Id,
        beta: Id,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Id> {
        let c = self.check_bn_shapes("batchnorm_eval", x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape {
                op: "batchnorm_eval",
                detail: format!("running stats cover {} channels, input has {c}", mean.len()),
            });
        }
        let out = self.bn_apply(x, gamma, beta, mean, var, eps)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            needs,
            Op::BatchNormEval { x, gamma, beta, eps, mean: mean.to_vec(), var: var.to_vec() },
        ))
    }

    fn bn_apply(
        &self,
        x: Id,
        gamma: Id,
        beta: Id,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Tensor<E>> {
        let xv = self.value(x);
        let c = xv.shape()[3];
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let scale: Vec<E> = (0..c)
            .map(|i| E::of_f64(gv[i].as_f64() / (var[i] + eps).sqrt()))
            .collect();
        let shift: Vec<E> = (0..c)
            .map(|i| E::of_f64(bv[i].as_f64() - mean[i] * gv[i].as_f64() / (var[i] + eps).sqrt()))
            .collect();
        let mut out = Tensor::zeros(xv.shape());
        for (o, px) in out.data_mut().chunks_exact_mut(c).zip(xv.data().chunks_exact(c)) {
            for i in 0..c {
                o[i] = px[i] * scale[i] + shift[i];
            }
        }
        out.ensure_finite("batchnorm")?;
        Ok(out)
    }

    pub fn relu(&mut self, x: Id) -> Id {
        let out = self.value(x).map(|v| if v > E::zero() { v } else { E::zero() });
        let needs = self.needs(x);
        self.push(out, needs, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Id) -> Id {
        // Split by sign so the exponential never overflows.
        let out = self.value(x).map(|v| {
            if v >= E::zero() {
                E::one() / (E::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (E::one() + e)
            }
        });
        let needs = self.needs(x);
        self.push(out, needs, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Id) -> Id {
        let out = self.value(x).map(|v| v.tanh());
        let needs = self.needs(x);
        self.push(out, needs, Op::Tanh { x })
    }

    pub fn add(&mut self, a: Id, b: Id) -> Result<Id> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, needs, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Result<Id> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, needs, Op::Sub { a, b }))
    }

    pub fn hadamard(&mut self, a: Id, b: Id) -> Result<Id> {
        self.same_shape("hadamard", a, b)?;
        let out = self.zip(a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, needs, Op::Hadamard { a, b }))
    }

    fn zip(&self, a: Id, b: Id, f: impl Fn(E, E) -> E) -> Result<Tensor<E>> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.shape(), data)
    }

    pub fn scale(&mut self, x: Id, c: f64) -> Id {
        let cc = E::of_f64(c);
        let out = self.value(x).map(|v| v * cc);
        let needs = self.needs(x);
        self.push(out, needs, Op::Scale { x, c })
    }

    /// Multiplies every pixel's channel vector by a learned gain `[1,1,1,C]`.
    pub fn mul_channel(&mut self, x: Id, gain: Id) -> Result<Id> {
        let c = self.value(x).shape()[3];
        if self.value(gain).shape() != [1, 1, 1, c] {
            return Err(Error::Shape {
                op: "mul_channel",
                detail: format!(
                    "gain {} does not match {c} channels",
                    fmt_shape(self.value(gain).shape())
                ),
            });
        }
        let gv = self.value(gain).data().to_vec();
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.shape());
        for (o, px) in out.data_mut().chunks_exact_mut(c).zip(xv.data().chunks_exact(c)) {
            for i in 0..c {
                o[i] = px[i] * gv[i];
            }
        }
        let needs = self.needs(x) || self.needs(gain);
        Ok(self.push(out, needs, Op::MulChannel { x, gain }))
    }

    pub fn concat_channels(&mut self, a: Id, b: Id) -> Result<Id> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa[0] != sb[0] || sa[1] != sb[1] || sa[2] != sb[2] {
            return Err(Error::Shape {
                op: "concat_channels",
                detail: format!("{} vs {}", fmt_shape(sa), fmt_shape(sb)),
            });
        }
        let (ca, cb) = (sa[3], sb[3]);
        let mut out = Tensor::zeros([sa[0], sa[1], sa[2], ca + cb]);
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for (i, o) in out.data_mut().chunks_exact_mut(ca + cb).enumerate() {
                o[..ca].copy_from_slice(&av[i * ca..(i + 1) * ca]);
                o[ca..].copy_from_slice(&bv[i * cb..(i + 1) * cb]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, needs, Op::ConcatChannels { a, b }))
    }

    /// Squared L2 norm of each batch item: `[N,H,W,C] -> [N,1,1,1]`.
    pub fn sq_sum_per_sample(&mut self, x: Id) -> Id {
        let xv = self.value(x);
        let [n, h, w, c] = xv.shape();
        let per = h * w * c;
        let mut out = Tensor::zeros([n, 1, 1, 1]);
        for (i, chunk) in xv.data().chunks_exact(per).enumerate() {
            out.data_mut()[i] = E::of_f64(chunk.iter().map(|v| v.as_f64() * v.as_f64()).sum());
        }
        let needs = self.needs(x);
        self.push(out, needs, Op::SqSumPerSample { x })
    }

    /// Mean over all elements, producing a `[1,1,1,1]` scalar.
    pub fn mean_all(&mut self, x: Id) -> Id {
        let xv = self.value(x);
        let mean = xv.data().iter().map(|v| v.as_f64()).sum::<f64>() / xv.len() as f64;
        let out = Tensor::scalar(E::of_f64(mean));
        let needs = self.needs(x);
        self.push(out, needs, Op::MeanAll { x })
    }

    /// Mean squared error between two same-shaped tensors, composed from
    /// primitive ops so gradients flow to both sides.
    pub fn mse(&mut self, a: Id, b: Id) -> Result<Id> {
        let d = self.sub(a, b)?;
        let sq = self.hadamard(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// Reverse pass from a scalar loss node. Gradients accumulate additively
    /// into every node that was marked as needing them.
    pub fn backward(&mut self, loss: Id) -> Result<()> {
        if self.value(loss).shape() != [1, 1, 1, 1] {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {}", fmt_shape(self.value(loss).shape())),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(E::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn add_grad(&mut self, id: Id, delta: Tensor<E>) {
        match &mut self.grads[id.0] {
            Some(existing) => existing.add_assign_scaled(&delta, E::one()),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor<E>) -> Result<()> {
        // Ops store only ids, so a cheap structural copy avoids borrowing
        // self.nodes across the gradient writes.
        match &self.nodes[i].op {
            Op::Leaf => Ok(()),
            &Op::Conv2d { x, k, bias, stride, padding } => {
                let grads = conv::conv2d_backward(
                    self.value(x),
                    self.value(k),
                    stride,
                    padding,
                    g,
                    self.needs(x),
                    self.needs(k),
                    bias.map(|b| self.needs(b)).unwrap_or(false),
                )?;
                if let Some(dx) = grads.dx {
                    self.add_grad(x, dx);
                }
                if let Some(dk) = grads.dk {
                    self.add_grad(k, dk);
                }
                if let (Some(db), Some(b)) = (grads.dbias, bias) {
                    self.add_grad(b, db);
                }
                Ok(())
            }
            &Op::ConvTranspose2d { x, k, bias, stride } => {
                let grads = conv::conv_transpose2d_backward(
                    self.value(x),
                    self.value(k),
                    stride,
                    g,
                    self.needs(x),
                    self.needs(k),
                    bias.map(|b| self.needs(b)).unwrap_or(false),
                )?;
                if let Some(dx) = grads.dx {
                    self.add_grad(x, dx);
                }
                if let Some(dk) = grads.dk {
                    self.add_grad(k, dk);
                }
                if let (Some(db), Some(b)) = (grads.dbias, bias) {
                    self.add_grad(b, db);
                }
                Ok(())
            }
            Op::BatchNormTrain { x, gamma, beta, eps, mean, var } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let (mean, var) = (mean.clone(), var.clone());
                self.bn_backward(x, gamma, beta, eps, &mean, &var, g, true)
            }
            Op::BatchNormEval { x, gamma, beta, eps, mean, var } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let (mean, var) = (mean.clone(), var.clone());
                self.bn_backward(x, gamma, beta, eps, &mean, &var, g, false)
            }
            &Op::Relu { x } => {
                let xv = self.value(x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > E::zero() { gv } else { E::zero() })
                    .collect();
                let dx = Tensor::from_vec(xv.shape(), data)?;
                self.add_grad(x, dx);
                Ok(())
            }
            &Op::Sigmoid { x } => {
                let yv = &self.nodes[i].value;
                let data = yv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| gv * y * (E::one() - y))
                    .collect();
                let dx = Tensor::from_vec(yv.shape(), data)?;
                self.add_grad(x, dx);
                Ok(())
            }
            &Op::Tanh { x } => {
                let yv = &self.nodes[i].value;
                let data = yv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| gv * (E::one() - y * y))
                    .collect();
                let dx = Tensor::from_vec(yv.shape(), data)?;
                self.add_grad(x, dx);
                Ok(())
            }
            &Op::Add { a, b } => {
                if self.needs(a) {
                    self.add_grad(a, g.clone());
                }
                if self.needs(b) {
                    self.add_grad(b, g.clone());
                }
                Ok(())
            }
            &Op::Sub { a, b } => {
                if self.needs(a) {
                    self.add_grad(a, g.clone());
                }
                if self.needs(b) {
                    self.add_grad(b, g.map(|v| -v));
                }
                Ok(())
            }
            &Op::Hadamard { a, b } => {
                if self.needs(a) {
                    let bv = self.value(b);
                    let data = g.data().iter().zip(bv.data()).map(|(&gv, &v)| gv * v).collect();
                    let da = Tensor::from_vec(bv.shape(), data)?;
                    self.add_grad(a, da);
                }
                if self.needs(b) {
                    let av = self.value(a);
                    let data = g.data().iter().zip(av.data()).map(|(&gv, &v)| gv * v).collect();
                    let db = Tensor::from_vec(av.shape(), data)?;
                    self.add_grad(b, db);
                }
                Ok(())
            }
            &Op::Scale { x, c } => {
                let cc = E::of_f64(c);
                self.add_grad(x, g.map(|v| v * cc));
                Ok(())
            }
            &Op::MulChannel { x, gain } => {
                let c = self.value(x).shape()[3];
                if self.needs(x) {
                    let gv = self.value(gain).data().to_vec();
                    let xv = self.value(x);
                    let mut dx = Tensor::zeros(xv.shape());
                    for (o, gr) in dx.data_mut().chunks_exact_mut(c).zip(g.data().chunks_exact(c))
                    {
                        for i in 0..c {
                            o[i] = gr[i] * gv[i];
                        }
                    }
                    self.add_grad(x, dx);
                }
                if self.needs(gain) {
                    let xv = self.value(x);
                    let mut dg = Tensor::zeros([1, 1, 1, c]);
                    for (px, gr) in xv.data().chunks_exact(c).zip(g.data().chunks_exact(c)) {
                        for i in 0..c {
                            dg.data_mut()[i] = dg.data()[i] + gr[i] * px[i];
                        }
                    }
                    self.add_grad(gain, dg);
                }
                Ok(())
            }
            &Op::ConcatChannels { a, b } => {
                let (ca, cb) = (self.value(a).shape()[3], self.value(b).shape()[3]);
                if self.needs(a) {
                    let mut da = Tensor::zeros(self.value(a).shape());
                    for (o, gr) in
                        da.data_mut().chunks_exact_mut(ca).zip(g.data().chunks_exact(ca + cb))
                    {
                        o.copy_from_slice(&gr[..ca]);
                    }
                    self.add_grad(a, da);
                }
                if self.needs(b) {
                    let mut db = Tensor::zeros(self.value(b).shape());
                    for (o, gr) in
                        db.data_mut().chunks_exact_mut(cb).zip(g.data().chunks_exact(ca + cb))
                    {
                        o.copy_from_slice(&gr[ca..]);
                    }
                    self.add_grad(b, db);
                }
                Ok(())
            }
            &Op::SqSumPerSample { x } => {
                let xv = self.value(x);
                let [n, h, w, c] = xv.shape();
                let per = h * w * c;
                let mut dx = Tensor::zeros(xv.shape());
                let two = E::of_f64(2.0);
                for b in 0..n {
                    let gb = g.data()[b];
                    for (o, v) in dx.data_mut()[b * per..(b + 1) * per]
                        .iter_mut()
                        .zip(&xv.data()[b * per..(b + 1) * per])
                    {
                        *o = two * *v * gb;
                    }
                }
                self.add_grad(x, dx);
                Ok(())
            }
            &Op::MeanAll { x } => {
                let xv = self.value(x);
                let gv = g.data()[0] * E::of_f64(1.0 / xv.len() as f64);
                self.add_grad(x, Tensor::filled(xv.shape(), gv));
                Ok(())
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_backward(
        &mut self,
        x: Id,
        gamma: Id,
        beta: Id,
        eps: f64,
        mean: &[f64],
        var: &[f64],
        g: &Tensor<E>,
        through_stats: bool,
    ) -> Result<()> {
        let (want_x, want_gamma, want_beta) = (self.needs(x), self.needs(gamma), self.needs(beta));
        // Build all three gradient tensors under one immutable borrow, then
        // file them once the borrow ends.
        let (dx, dgamma, dbeta) = {
            let xv = self.value(x);
            let [n, h, w, c] = xv.shape();
            let m = (n * h * w) as f64;
            let gv = self.value(gamma).data();
            let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

            // Channel sums of g and g*xhat feed every gradient below.
            let mut sum_g = vec![0.0f64; c];
            let mut sum_gx = vec![0.0f64; c];
            for (px, gr) in xv.data().chunks_exact(c).zip(g.data().chunks_exact(c)) {
                for i in 0..c {
                    let xhat = (px[i].as_f64() - mean[i]) * inv_std[i];
                    sum_g[i] += gr[i].as_f64();
                    sum_gx[i] += gr[i].as_f64() * xhat;
                }
            }
            let dbeta = want_beta
                .then(|| {
                    Tensor::from_vec([1, 1, 1, c], sum_g.iter().map(|&v| E::of_f64(v)).collect())
                })
                .transpose()?;
            let dgamma = want_gamma
                .then(|| {
                    Tensor::from_vec([1, 1, 1, c], sum_gx.iter().map(|&v| E::of_f64(v)).collect())
                })
                .transpose()?;
            let dx = want_x.then(|| {
                let mut dx = Tensor::zeros(xv.shape());
                for ((px, gr), o) in xv
                    .data()
                    .chunks_exact(c)
                    .zip(g.data().chunks_exact(c))
                    .zip(dx.data_mut().chunks_exact_mut(c))
                {
                    for i in 0..c {
                        let a = gv[i].as_f64() * inv_std[i];
                        let d = if through_stats {
                            let xhat = (px[i].as_f64() - mean[i]) * inv_std[i];
                            a * (gr[i].as_f64() - sum_g[i] / m - xhat * sum_gx[i] / m)
                        } else {
                            a * gr[i].as_f64()
                        };
                        o[i] = E::of_f64(d);
                    }
                }
                dx
            });
            (dx, dgamma, dbeta)
        };
        if let Some(db) = dbeta {
            self.add_grad(beta, db);
        }
        if let Some(dg) = dgamma {
            self.add_grad(gamma, dg);
        }
        if let Some(dx) = dx {
            self.add_grad(x, dx);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Fixed cotangent so the scalar test loss weights every output element
    /// differently.
    fn cotangent(shape: [usize; 4]) -> Tensor<f64> {
        let mut i = 0u64;
        Tensor::from_fn(shape, |_, _, _, _| {
            i = i.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((i >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    /// Compares tape gradients for every input against central finite
    /// differences of the same composed scalar loss.
    fn fd_check(
        inputs: &[Tensor<f64>],
        build: impl Fn(&mut Tape<f64>, &[Id]) -> Result<Id>,
    ) {
        let run = |tensors: &[Tensor<f64>]| -> (Tape<f64>, Vec<Id>, Id) {
            let mut tape = Tape::new();
            let ids: Vec<Id> = tensors.iter().map(|t| tape.var(t.clone())).collect();
            let out = build(&mut tape, &ids).expect("forward");
            let cot = cotangent(tape.value(out).shape());
            let w = tape.leaf(cot);
            let prod = tape.hadamard(out, w).expect("cotangent product");
            let loss = tape.mean_all(prod);
            (tape, ids, loss)
        };
        let (mut tape, ids, loss) = run(inputs);
        tape.backward(loss).expect("backward");
        for (i, x) in inputs.iter().enumerate() {
            let analytic = tape.grad(ids[i]).expect("missing gradient").clone();
            let mut probe_set: Vec<Tensor<f64>> = inputs.to_vec();
            let fd = reference::fd_gradient(x, 1e-5, |p| {
                probe_set[i] = p.clone();
                let (t2, _, l2) = run(&probe_set);
                Ok(t2.scalar_value(l2))
            })
            .unwrap();
            for (j, (&a, &f)) in analytic.data().iter().zip(&fd).enumerate() {
                let err = (a - f).abs() / (1.0 + a.abs() + f.abs());
                assert!(err < 1e-7, "input {i} element {j}: analytic {a} vs fd {f}");
            }
        }
    }

    #[test]
    fn elementwise_forward_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec([1, 1, 1, 3], vec![1.0, -2.0, 3.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec([1, 1, 1, 3], vec![0.5, 4.0, -1.0]).unwrap());
        let sum = tape.add(a, b).unwrap();
        assert_eq!(tape.value(sum).data(), &[1.5, 2.0, 2.0]);
        let diff = tape.sub(a, b).unwrap();
        assert_eq!(tape.value(diff).data(), &[0.5, -6.0, 4.0]);
        let prod = tape.hadamard(a, b).unwrap();
        assert_eq!(tape.value(prod).data(), &[0.5, -8.0, -3.0]);
        let sc = tape.scale(a, -2.0);
        assert_eq!(tape.value(sc).data(), &[-2.0, 4.0, -6.0]);
        let r = tape.relu(a);
        assert_eq!(tape.value(r).data(), &[1.0, 0.0, 3.0]);
        let zero = tape_zero(&mut tape);
        let s = tape.sigmoid(zero);
        assert_eq!(tape.value(s).data(), &[0.5]);
        let m = tape.mean_all(a);
        assert!((tape.scalar_value(m) - 2.0 / 3.0).abs() < 1e-15);
        let q = tape.sq_sum_per_sample(a);
        assert_eq!(tape.value(q).data(), &[14.0]);
    }

    fn tape_zero(tape: &mut Tape<f64>) -> Id {
        tape.leaf(Tensor::scalar(0.0))
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec([1, 1, 1, 2], vec![800.0, -800.0]).unwrap());
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn concat_joins_channel_slices() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_fn([1, 1, 2, 2], |_, _, w, c| (w * 2 + c) as f64));
        let b = tape.leaf(Tensor::from_fn([1, 1, 2, 1], |_, _, w, _| 10.0 + w as f64));
        let cat = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(cat).shape(), [1, 1, 2, 3]);
        assert_eq!(tape.value(cat).data(), &[0.0, 1.0, 10.0, 2.0, 3.0, 11.0]);
    }

    #[test]
    fn batchnorm_train_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = rand_tensor(&mut rng, [2, 3, 4, 5]);
        let gamma = rand_tensor(&mut rng, [1, 1, 1, 5]);
        let beta = rand_tensor(&mut rng, [1, 1, 1, 5]);
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let gid = tape.leaf(gamma.clone());
        let bid = tape.leaf(beta.clone());
        let (out, stats) = tape.batchnorm_train(xid, gid, bid, 1e-5).unwrap();
        let (want, mean, var) =
            reference::naive_batchnorm_train(&x, gamma.data(), beta.data(), 1e-5);
        assert!(tape.value(out).max_abs_diff(&want) < 1e-12);
        for i in 0..5 {
            assert!((stats.mean[i] - mean[i]).abs() < 1e-12);
            assert!((stats.var[i] - var[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_eval_matches_reference_and_errors_on_bad_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rand_tensor(&mut rng, [1, 4, 4, 3]);
        let gamma = rand_tensor(&mut rng, [1, 1, 1, 3]);
        let beta = rand_tensor(&mut rng, [1, 1, 1, 3]);
        let mean = [0.1, -0.2, 0.3];
        let var = [1.0, 0.5, 2.0];
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let gid = tape.leaf(gamma.clone());
        let bid = tape.leaf(beta.clone());
        let out = tape.batchnorm_eval(xid, gid, bid, &mean, &var, 1e-5).unwrap();
        let want = reference::naive_batchnorm_eval(&x, gamma.data(), beta.data(), &mean, &var, 1e-5);
        assert!(tape.value(out).max_abs_diff(&want) < 1e-12);
        let err = tape.batchnorm_eval(xid, gid, bid, &mean[..2], &var[..2], 1e-5).unwrap_err();
        assert!(err.to_string().contains("running stats"), "{err}");
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a = rand_tensor(&mut rng, [2, 2, 3, 2]);
        let b = rand_tensor(&mut rng, [2, 2, 3, 2]);
        fd_check(&[a.clone(), b.clone()], |t, ids| t.add(ids[0], ids[1]));
        fd_check(&[a.clone(), b.clone()], |t, ids| t.sub(ids[0], ids[1]));
        fd_check(&[a.clone(), b.clone()], |t, ids| t.hadamard(ids[0], ids[1]));
        fd_check(&[a.clone()], |t, ids| Ok(t.scale(ids[0], -1.7)));
        fd_check(&[a.clone()], |t, ids| Ok(t.sigmoid(ids[0])));
        fd_check(&[a.clone()], |t, ids| Ok(t.tanh(ids[0])));
        fd_check(&[a.clone()], |t, ids| Ok(t.sq_sum_per_sample(ids[0])));
        fd_check(&[a.clone()], |t, ids| Ok(t.mean_all(ids[0])));
        fd_check(&[a.clone(), b.clone()], |t, ids| t.concat_channels(ids[0], ids[1]));
        fd_check(&[a.clone(), b.clone()], |t, ids| t.mse(ids[0], ids[1]));
        // Keep relu probes away from the kink at zero.
        let shifted = a.map(|v| if v >= 0.0 { v + 0.5 } else { v - 0.5 });
        fd_check(&[shifted], |t, ids| Ok(t.relu(ids[0])));
        let gain = rand_tensor(&mut rng, [1, 1, 1, 2]);
        fd_check(&[a.clone(), gain], |t, ids| t.mul_channel(ids[0], ids[1]));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = rand_tensor(&mut rng, [2, 4, 4, 2]);
        let k = rand_tensor(&mut rng, [3, 3, 2, 3]);
        let bias = rand_tensor(&mut rng, [1, 1, 1, 3]);
        fd_check(&[x.clone(), k.clone(), bias.clone()], |t, ids| {
            t.conv2d(ids[0], ids[1], Some(ids[2]), [1, 1], Padding::Same)
        });
        let kt = rand_tensor(&mut rng, [2, 2, 3, 2]);
        let biast = rand_tensor(&mut rng, [1, 1, 1, 3]);
        fd_check(&[x, kt, biast], |t, ids| {
            t.conv_transpose2d(ids[0], ids[1], Some(ids[2]), [2, 2])
        });
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = rand_tensor(&mut rng, [2, 3, 3, 2]);
        let gamma = rand_tensor(&mut rng, [1, 1, 1, 2]);
        let beta = rand_tensor(&mut rng, [1, 1, 1, 2]);
        fd_check(&[x.clone(), gamma.clone(), beta.clone()], |t, ids| {
            Ok(t.batchnorm_train(ids[0], ids[1], ids[2], 1e-5)?.0)
        });
        fd_check(&[x, gamma, beta], |t, ids| {
            t.batchnorm_eval(ids[0], ids[1], ids[2], &[0.25, -0.5], &[1.5, 0.75], 1e-5)
        });
    }

    #[test]
    fn shared_input_accumulates_gradient() {
        // y = x*x + x has dy/dx = 2x + 1; the same node feeds two ops.
        let mut tape = Tape::<f64>::new();
        let x = tape.var(Tensor::scalar(3.0));
        let sq = tape.hadamard(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let loss = tape.mean_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn constant_branches_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(Tensor::scalar(2.0));
        let frozen = tape.leaf(Tensor::scalar(5.0));
        let prod = tape.hadamard(x, frozen).unwrap();
        let loss = tape.mean_all(prod);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0]);
        assert!(tape.grad(frozen).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(Tensor::zeros([1, 2, 2, 1]));
        let err = tape.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar"), "{err}");
    }

    #[test]
    fn mse_matches_hand_value() {
        // Constant offset of 0.1 over any shape gives mse 0.01.
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::filled([1, 4, 4, 3], 0.6));
        let b = tape.leaf(Tensor::filled([1, 4, 4, 3], 0.5));
        let loss = tape.mse(a, b).unwrap();
        assert!((tape.scalar_value(loss) - 0.01).abs() < 1e-15);
    }
}
