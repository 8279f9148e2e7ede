//! Tape of recorded operations and its reverse sweep.
//!
//! Every method that builds a node evaluates it immediately, so the tape is
//! always in topological order: a node only refers to nodes recorded before
//! it. [`Graph::backward`] walks the tape once from the end.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Pointwise {
        input: Var,
        kind: Nonlinearity,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
        gap: f64,
    },
    Reshape {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    SqDistanceMap {
        latent: Var,
        prototype: Var,
    },
    DistToSim {
        input: Var,
        epsilon: f64,
    },
    SelectMean {
        input: Var,
        selected: Vec<usize>,
        gap: f64,
    },
    Upsample {
        input: Var,
    },
    MulConst {
        input: Var,
        factor: Vec<f64>,
    },
    Mul(Var, Var),
    Add(Var, Var),
    Scale {
        input: Var,
        factor: f64,
    },
    Sum(Var),
    Frobenius(Var),
    Min {
        inputs: Vec<Var>,
        chosen: usize,
        gap: f64,
    },
    Stack(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Single writer; build one per independent computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when `var` does
    /// not require gradients or the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Like [`Gradients::get`] but yields zeros for an untouched variable.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    pub fn raw(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0)?.as_deref()
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: incompatible shapes {a:?} and {b:?}"))
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a leaf that gradients are accumulated into.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Cross-correlation of `input` `[N,C,H,W]` with `kernel` `[F,C,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(shape_err("conv2d input/kernel", &xs, &ks));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if xs[2] + 2 * padding < ks[2] || xs[3] + 2 * padding < ks[3] {
            return Err(shape_err("conv2d kernel larger than padded input", &xs, &ks));
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [ks[0]] {
                return Err(shape_err("conv2d bias", bs, &ks));
            }
        }
        let geom = kernels::ConvGeom::new(&xs, &ks, stride, padding);
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(geom.out_shape().to_vec(), out)?;
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn nonlinearity(&mut self, input: Var, kind: Nonlinearity) -> Var {
        let x = self.value(input);
        let data = match kind {
            Nonlinearity::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
            Nonlinearity::Sigmoid => x.data().iter().map(|&v| kernels::sigmoid(v)).collect(),
        };
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(value, Op::Pointwise { input, kind }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.nonlinearity(input, Nonlinearity::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.nonlinearity(input, Nonlinearity::Sigmoid)
    }

    /// Non-overlapping `size`×`size` max pooling over the last two axes of a
    /// `[N,C,H,W]` tensor. Ties go to the first cell in row-major order.
    pub fn max_pool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || size == 0 || !xs[2].is_multiple_of(size) || !xs[3].is_multiple_of(size) {
            return Err(Error::Shape(format!(
                "max_pool2d: shape {xs:?} is not divisible into {size}x{size} windows"
            )));
        }
        let (out, argmax, gap) = kernels::max_pool_forward(&xs, size, self.value(input).data());
        let value = Tensor::new(vec![xs[0], xs[1], xs[2] / size, xs[3] / size], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::MaxPool2d { input, argmax, gap }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// Affine map `weight · input + bias` for `input` `[n]`, `weight` `[o,n]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
            return Err(shape_err("linear input/weight", &xs, &ws));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("linear bias", self.shape(b), &ws));
            }
        }
        let (o, n) = (ws[0], ws[1]);
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![0.0; o];
        for (r, slot) in out.iter_mut().enumerate() {
            let mut acc = bias.map_or(0.0, |b| self.value(b).data()[r]);
            for (wi, xi) in w[r * n..(r + 1) * n].iter().zip(x) {
                acc += wi * xi;
            }
            *slot = acc;
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::vector(out),
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// `-log softmax(logits)[label]`, evaluated with a shifted log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if z.shape().len() != 1 || z.numel() < 2 {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy expects a vector of at least 2 logits, got {:?}",
                z.shape()
            )));
        }
        if label >= z.numel() {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {} classes",
                z.numel()
            )));
        }
        let probs = kernels::softmax(z.data());
        let loss = kernels::log_sum_exp(z.data()) - z.data()[label];
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    /// Squared L2 distance between `prototype` `[c]` and every spatial cell of
    /// `latent` `[c,H,W]` (a leading batch axis of 1 is accepted), giving `[H,W]`.
    pub fn sq_distance_map(&mut self, latent: Var, prototype: Var) -> Result<Var> {
        let ls = self.shape(latent).to_vec();
        let ps = self.shape(prototype).to_vec();
        let (c, h, w) = match ls.as_slice() {
            [c, h, w] | [1, c, h, w] => (*c, *h, *w),
            _ => return Err(shape_err("sq_distance_map latent/prototype", &ls, &ps)),
        };
        if ps != [c] {
            return Err(shape_err("sq_distance_map latent/prototype", &ls, &ps));
        }
        let out = kernels::sq_distance_map(
            self.value(latent).data(),
            self.value(prototype).data(),
            c,
            h * w,
        );
        let rg = self.rg(latent) || self.rg(prototype);
        Ok(self.push(
            Tensor::new(vec![h, w], out)?,
            Op::SqDistanceMap { latent, prototype },
            rg,
        ))
    }

    /// Elementwise `log((d + 1) / (d + epsilon))`.
    pub fn dist_to_sim(&mut self, input: Var, epsilon: f64) -> Result<Var> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must lie in (0, 1), got {epsilon}"
            )));
        }
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&d| kernels::log_similarity(d, epsilon))
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::DistToSim { input, epsilon }, rg))
    }

    fn select_mean(&mut self, input: Var, k: usize, largest: bool) -> Result<Var> {
        let x = self.value(input);
        let n = x.numel();
        if k == 0 || k > n {
            return Err(Error::InvalidArgument(format!(
                "k = {k} outside 1..={n} for a map of {n} cells"
            )));
        }
        let (selected, gap) = kernels::select_k(x.data(), k, largest);
        let mean = selected.iter().map(|&i| x.data()[i]).sum::<f64>() / k as f64;
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::scalar(mean),
            Op::SelectMean {
                input,
                selected,
                gap,
            },
            rg,
        ))
    }

    /// Mean of the `k` largest entries. Ties are resolved towards the lower
    /// row-major index.
    pub fn topk_mean(&mut self, input: Var, k: usize) -> Result<Var> {
        self.select_mean(input, k, true)
    }

    /// Mean of the `k` smallest entries (same tie rule as [`Graph::topk_mean`]).
    pub fn bottomk_mean(&mut self, input: Var, k: usize) -> Result<Var> {
        self.select_mean(input, k, false)
    }

    /// Corner-aligned bilinear upsampling of a `[h,w]` map to `[out_h,out_w]`.
    pub fn bilinear_upsample(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let [h, w] = xs[..] else {
            return Err(Error::Shape(format!(
                "bilinear_upsample expects a 2-D map, got {xs:?}"
            )));
        };
        let out = kernels::bilinear_upsample(self.value(input).data(), h, w, out_h, out_w)?;
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new(vec![out_h, out_w], out)?,
            Op::Upsample { input },
            rg,
        ))
    }

    /// Elementwise product with a constant array of the same size.
    pub fn mul_const(&mut self, input: Var, factor: &[f64]) -> Result<Var> {
        let x = self.value(input);
        if x.numel() != factor.len() {
            return Err(Error::Shape(format!(
                "mul_const: tensor {:?} vs {} factors",
                x.shape(),
                factor.len()
            )));
        }
        let data = x.data().iter().zip(factor).map(|(a, b)| a * b).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(input);
        Ok(self.push(
            value,
            Op::MulConst {
                input,
                factor: factor.to_vec(),
            },
            rg,
        ))
    }

    fn binary_shapes(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(total), Op::Sum(input), rg)
    }

    /// Entrywise L2 norm, `sqrt(sum x^2)`. The gradient at the origin is
    /// taken to be zero.
    pub fn frobenius_norm(&mut self, input: Var) -> Var {
        let sq: f64 = self.value(input).data().iter().map(|v| v * v).sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(sq.sqrt()), Op::Frobenius(input), rg)
    }

    /// Minimum over scalar nodes; the first minimal input receives the gradient.
    pub fn min(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("min over an empty set".into()));
        }
        let mut chosen = 0;
        let mut best = f64::INFINITY;
        let mut values = Vec::with_capacity(inputs.len());
        for (i, &v) in inputs.iter().enumerate() {
            let x = self.value(v);
            if !x.is_scalar() {
                return Err(Error::Shape(format!("min expects scalars, got {:?}", x.shape())));
            }
            let x = x.item();
            values.push(x);
            if x < best {
                best = x;
                chosen = i;
            }
        }
        let gap = values
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != chosen)
            .map(|(_, v)| v - best)
            .fold(f64::INFINITY, f64::min);
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::scalar(best),
            Op::Min {
                inputs: inputs.to_vec(),
                chosen,
                gap,
            },
            rg,
        ))
    }

    /// Sum of scalar nodes.
    pub fn add_all(&mut self, inputs: &[Var]) -> Result<Var> {
        let stacked = self.stack(inputs)?;
        Ok(self.sum(stacked))
    }

    /// Packs scalar nodes into a vector.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("stack of zero scalars".into()));
        }
        let mut data = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let x = self.value(v);
            if !x.is_scalar() {
                return Err(Error::Shape(format!("stack expects scalars, got {:?}", x.shape())));
            }
            data.push(x.item());
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::vector(data), Op::Stack(inputs.to_vec()), rg))
    }

    /// Smallest distance to a tie among the discrete choices recorded on the
    /// tape (top-k boundaries, argmin, max-pool winners, relu kinks). Finite
    /// differences are unreliable when this is close to zero.
    pub fn min_tie_gap(&self) -> f64 {
        let mut gap = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::MaxPool2d { gap: g, .. } | Op::SelectMean { gap: g, .. } | Op::Min { gap: g, .. } => {
                    gap = gap.min(*g)
                }
                Op::Pointwise {
                    input,
                    kind: Nonlinearity::Relu,
                } => {
                    for &x in self.nodes[input.0].value.data() {
                        gap = gap.min(x.abs());
                    }
                }
                _ => {}
            }
        }
        gap
    }

    /// Hash of every discrete choice made on the tape. Two evaluations with
    /// equal signatures lie on the same smooth piece of the function.
    pub fn selection_signature(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(PRIME);
        };
        for node in &self.nodes {
            match &node.op {
                Op::MaxPool2d { argmax, .. } => argmax.iter().for_each(|&i| feed(i as u64)),
                Op::SelectMean { selected, .. } => selected.iter().for_each(|&i| feed(i as u64)),
                Op::Min { chosen, .. } => feed(*chosen as u64),
                Op::Pointwise {
                    input,
                    kind: Nonlinearity::Relu,
                } => {
                    for &x in self.nodes[input.0].value.data() {
                        feed(u64::from(x > 0.0));
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.filter(|_| self.nodes[i].requires_grad))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Vec<f64>>], target: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(target) {
            return None;
        }
        let n = self.nodes[target.0].value.numel();
        Some(grads[target.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let geom = kernels::ConvGeom::new(
                    self.shape(*input),
                    self.shape(*kernel),
                    *stride,
                    *padding,
                );
                if let Some(g) = self.accumulate(grads, *input) {
                    kernels::conv2d_backward_input(&geom, gout, self.value(*kernel).data(), g);
                }
                if let Some(g) = self.accumulate(grads, *kernel) {
                    kernels::conv2d_backward_kernel(&geom, gout, self.value(*input).data(), g);
                }
                if let Some(b) = bias {
                    if let Some(g) = self.accumulate(grads, *b) {
                        kernels::conv2d_backward_bias(&geom, gout, g);
                    }
                }
            }
            Op::Pointwise { input, kind } => {
                let out = node.value.data();
                let x = self.value(*input).data();
                if let Some(g) = self.accumulate(grads, *input) {
                    match kind {
                        Nonlinearity::Relu => {
                            for ((gi, &go), &xi) in g.iter_mut().zip(gout).zip(x) {
                                if xi > 0.0 {
                                    *gi += go;
                                }
                            }
                        }
                        Nonlinearity::Sigmoid => {
                            for ((gi, &go), &yi) in g.iter_mut().zip(gout).zip(out) {
                                *gi += go * yi * (1.0 - yi);
                            }
                        }
                    }
                }
            }
            Op::MaxPool2d { input, argmax, .. } => {
                if let Some(g) = self.accumulate(grads, *input) {
                    for (&src, &go) in argmax.iter().zip(gout) {
                        g[src] += go;
                    }
                }
            }
            Op::Reshape { input } => {
                if let Some(g) = self.accumulate(grads, *input) {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let ws = self.shape(*weight);
                let n = ws[1];
                if let Some(g) = self.accumulate(grads, *input) {
                    let w = self.value(*weight).data();
                    for (r, &go) in gout.iter().enumerate() {
                        for (gi, wi) in g.iter_mut().zip(&w[r * n..(r + 1) * n]) {
                            *gi += go * wi;
                        }
                    }
                }
                if let Some(g) = self.accumulate(grads, *weight) {
                    let x = self.value(*input).data();
                    for (r, &go) in gout.iter().enumerate() {
                        for (gi, xi) in g[r * n..(r + 1) * n].iter_mut().zip(x) {
                            *gi += go * xi;
                        }
                    }
                }
                if let Some(b) = bias {
                    if let Some(g) = self.accumulate(grads, *b) {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            } => {
                if let Some(g) = self.accumulate(grads, *logits) {
                    for (i, (gi, &p)) in g.iter_mut().zip(probs).enumerate() {
                        let onehot = if i == *label { 1.0 } else { 0.0 };
                        *gi += gout[0] * (p - onehot);
                    }
                }
            }
            Op::SqDistanceMap { latent, prototype } => {
                let lat = self.value(*latent).data();
                let proto = self.value(*prototype).data();
                let cells = gout.len();
                if let Some(g) = self.accumulate(grads, *latent) {
                    for (ch, &p) in proto.iter().enumerate() {
                        let row = &lat[ch * cells..(ch + 1) * cells];
                        let grow = &mut g[ch * cells..(ch + 1) * cells];
                        for ((gi, &z), &go) in grow.iter_mut().zip(row).zip(gout) {
                            *gi += 2.0 * (z - p) * go;
                        }
                    }
                }
                if let Some(g) = self.accumulate(grads, *prototype) {
                    for (ch, (gi, &p)) in g.iter_mut().zip(proto).enumerate() {
                        let row = &lat[ch * cells..(ch + 1) * cells];
                        let mut acc = 0.0;
                        for (&z, &go) in row.iter().zip(gout) {
                            acc += (p - z) * go;
                        }
                        *gi += 2.0 * acc;
                    }
                }
            }
            Op::DistToSim { input, epsilon } => {
                let d = self.value(*input).data();
                if let Some(g) = self.accumulate(grads, *input) {
                    for ((gi, &di), &go) in g.iter_mut().zip(d).zip(gout) {
                        *gi += go * kernels::log_similarity_grad(di, *epsilon);
                    }
                }
            }
            Op::SelectMean {
                input, selected, ..
            } => {
                if let Some(g) = self.accumulate(grads, *input) {
                    let share = gout[0] / selected.len() as f64;
                    for &i in selected {
                        g[i] += share;
                    }
                }
            }
            Op::Upsample { input } => {
                let xs = self.shape(*input);
                let (h, w) = (xs[0], xs[1]);
                let os = node.value.shape();
                if let Some(g) = self.accumulate(grads, *input) {
                    kernels::bilinear_upsample_backward(gout, h, w, os[0], os[1], g);
                }
            }
            Op::MulConst { input, factor } => {
                if let Some(g) = self.accumulate(grads, *input) {
                    for ((gi, &go), &f) in g.iter_mut().zip(gout).zip(factor) {
                        *gi += go * f;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(g) = self.accumulate(grads, *a) {
                    for ((gi, &go), &y) in g.iter_mut().zip(gout).zip(bv) {
                        *gi += go * y;
                    }
                }
                if let Some(g) = self.accumulate(grads, *b) {
                    for ((gi, &go), &x) in g.iter_mut().zip(gout).zip(av) {
                        *gi += go * x;
                    }
                }
            }
            Op::Add(a, b) => {
                for t in [*a, *b] {
                    if let Some(g) = self.accumulate(grads, t) {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    }
                }
            }
            Op::Scale { input, factor } => {
                if let Some(g) = self.accumulate(grads, *input) {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go * factor;
                    }
                }
            }
            Op::Sum(input) => {
                if let Some(g) = self.accumulate(grads, *input) {
                    for gi in g.iter_mut() {
                        *gi += gout[0];
                    }
                }
            }
            Op::Frobenius(input) => {
                let norm = node.value.item();
                if norm > 0.0 {
                    let x = self.value(*input).data();
                    if let Some(g) = self.accumulate(grads, *input) {
                        let s = gout[0] / norm;
                        for (gi, &xi) in g.iter_mut().zip(x) {
                            *gi += s * xi;
                        }
                    }
                }
            }
            Op::Min { inputs, chosen, .. } => {
                if let Some(g) = self.accumulate(grads, inputs[*chosen]) {
                    g[0] += gout[0];
                }
            }
            Op::Stack(inputs) => {
                for (&v, &go) in inputs.iter().zip(gout) {
                    if let Some(g) = self.accumulate(grads, v) {
                        g[0] += go;
                    }
                }
            }
        }
    }
}
