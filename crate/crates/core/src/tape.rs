//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! Operations append nodes to a [`Tape`]; parents always precede children, so
//! walking the node list backwards visits the graph in reverse topological
//! order. [`Tape::backward`] seeds the scalar loss with 1 and pushes adjoints
//! to every leaf registered with `requires_grad`. A tape belongs to a single
//! optimization step and is consumed by its backward pass.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::Tensor;

/// Lower clamp applied to every division denominator, forward and backward.
pub const EPS_DIV: f64 = 1e-4;
/// Shift applied to `sqrt`/`log` inputs so their gradients stay finite at 0.
pub const EPS_GUARD: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum MapOp {
    Abs,
    Sqrt,
    Pow(f64),
    Sigmoid,
    Relu,
    Tanh,
    Clamp(f64, f64),
    Log,
}

#[derive(Debug, Clone, Copy)]
enum ZipOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Shape relation of a zip's operands.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Broadcast {
    None,
    /// `lhs` is `C x H x W`, `rhs` is `1 x H x W` replicated over channels.
    RhsChannel { channels: usize, plane: usize },
}

#[derive(Clone)]
enum Step {
    Leaf,
    Map { src: usize, op: MapOp },
    Zip { lhs: usize, rhs: usize, op: ZipOp, bcast: Broadcast },
    Affine { src: usize, mul: f64 },
    Reduce { src: usize, mean: bool },
    GradH { src: usize },
    GradV { src: usize },
    ChannelMax { src: usize, argmax: Vec<u8> },
    ChannelSlice { src: usize, channel: usize },
    Conv2d { input: usize, weight: usize, bias: usize, dims: ConvDims },
    ChannelNorm { input: usize, scale: usize, shift: usize, mean: Vec<f64>, inv_std: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    needs_grad: bool,
    is_leaf_grad: bool,
    step: Step,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
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

    /// Drops every recorded node and gradient, resetting the tape for reuse.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    /// Registers a tensor as a tape input. Gradients are retained after
    /// `backward` only for leaves with `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            shape: t.shape().to_vec(),
            values: t.data().to_vec(),
            needs_grad: requires_grad,
            is_leaf_grad: requires_grad,
            step: Step::Leaf,
        })
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn shape_of(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.node(v)?.shape)
    }

    pub fn values(&self, v: Var) -> Result<&[f64]> {
        Ok(&self.node(v)?.values)
    }

    /// Copies a recorded value out as an owned tensor.
    pub fn tensor(&self, v: Var) -> Result<Tensor> {
        let n = self.node(v)?;
        Tensor::new(n.shape.clone(), n.values.clone())
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let n = self.node(v)?;
        if n.values.len() == 1 {
            Ok(n.values[0])
        } else {
            Err(Error::NonScalarLoss(n.shape.clone()))
        }
    }

    /// Gradient of the last backward pass w.r.t. a `requires_grad` leaf.
    /// Leaves the loss never reached get an explicit zero gradient.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = self.nodes.get(v.0)?;
        if let Some(g) = self.grads.get(v.0).and_then(|slot| slot.as_ref()) {
            return Some(Tensor::new(node.shape.clone(), g.clone()).expect("grad shape"));
        }
        if self.consumed && node.is_leaf_grad {
            return Some(Tensor::zeros(node.shape.clone()));
        }
        None
    }

    // ---- elementwise maps ---------------------------------------------------

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map(a, MapOp::Abs)
    }

    /// `sqrt(x + 1e-12)`; the shift keeps the gradient finite at 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.map(a, MapOp::Sqrt)
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        self.map(a, MapOp::Pow(p))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, MapOp::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, MapOp::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, MapOp::Tanh)
    }

    /// Gradient is zero wherever the input falls outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map(a, MapOp::Clamp(lo, hi))
    }

    /// `ln(x + 1e-12)`.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, MapOp::Log)
    }

    /// `mul * x + add`, the constant-coefficient building block for loss
    /// weighting and epsilon shifts.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Result<Var> {
        let src = self.node(a)?;
        let values = src.values.iter().map(|&x| mul * x + add).collect();
        let node = Node {
            shape: src.shape.clone(),
            values,
            needs_grad: src.needs_grad,
            is_leaf_grad: false,
            step: Step::Affine { src: a.0, mul },
        };
        Ok(self.push(node))
    }

    // ---- elementwise zips ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, ZipOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, ZipOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, ZipOp::Mul)
    }

    /// Division with the denominator clamped below at [`EPS_DIV`] in both the
    /// forward and backward passes.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, ZipOp::Div)
    }

    // ---- reductions and structure ops ---------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, false)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, true)
    }

    /// Forward differences along x and y with a zero last column/row.
    pub fn spatial_gradient(&mut self, a: Var) -> Result<(Var, Var)> {
        let (c, h, w) = self.dims3(a)?;
        if h < 2 || w < 2 {
            return Err(Error::ShapeMismatch(format!(
                "spatial gradient needs at least 2x2 pixels, got {}x{}",
                h, w
            )));
        }
        let src = &self.nodes[a.0];
        let mut gh = vec![0.0; src.values.len()];
        let mut gv = vec![0.0; src.values.len()];
        let plane = h * w;
        for ch in 0..c {
            let s = &src.values[ch * plane..(ch + 1) * plane];
            let dh = &mut gh[ch * plane..(ch + 1) * plane];
            let dv = &mut gv[ch * plane..(ch + 1) * plane];
            for y in 0..h {
                for x in 0..w - 1 {
                    dh[y * w + x] = s[y * w + x + 1] - s[y * w + x];
                }
            }
            for y in 0..h - 1 {
                for x in 0..w {
                    dv[y * w + x] = s[(y + 1) * w + x] - s[y * w + x];
                }
            }
        }
        let shape = src.shape.clone();
        let needs = src.needs_grad;
        let vh = self.push(Node {
            shape: shape.clone(),
            values: gh,
            needs_grad: needs,
            is_leaf_grad: false,
            step: Step::GradH { src: a.0 },
        });
        let vv = self.push(Node {
            shape,
            values: gv,
            needs_grad: needs,
            is_leaf_grad: false,
            step: Step::GradV { src: a.0 },
        });
        Ok((vh, vv))
    }

    /// Per-pixel maximum over the 3 channels; gradient flows to the argmax
    /// channel, first channel on ties.
    pub fn channel_max(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.dims3(a)?;
        if c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "channel_max expects 3 channels, got {}",
                c
            )));
        }
        let src = &self.nodes[a.0];
        let plane = h * w;
        let mut values = vec![0.0; plane];
        let mut argmax = vec![0u8; plane];
        for p in 0..plane {
            let mut best = src.values[p];
            let mut arg = 0u8;
            for ch in 1..3usize {
                let v = src.values[ch * plane + p];
                if v > best {
                    best = v;
                    arg = ch as u8;
                }
            }
            values[p] = best;
            argmax[p] = arg;
        }
        let needs = src.needs_grad;
        Ok(self.push(Node {
            shape: vec![1, h, w],
            values,
            needs_grad: needs,
            is_leaf_grad: false,
            step: Step::ChannelMax { src: a.0, argmax },
        }))
    }

    /// Extracts channel `channel` of a rank-3 tensor as `1 x H x W`.
    pub fn channel_slice(&mut self, a: Var, channel: usize) -> Result<Var> {
        let (c, h, w) = self.dims3(a)?;
        if channel >= c {
            return Err(Error::ShapeMismatch(format!(
                "channel {} out of range for {} channels",
                channel, c
            )));
        }
        let src = &self.nodes[a.0];
        let plane = h * w;
        let values = src.values[channel * plane..(channel + 1) * plane].to_vec();
        let needs = src.needs_grad;
        Ok(self.push(Node {
            shape: vec![1, h, w],
            values,
            needs_grad: needs,
            is_leaf_grad: false,
            step: Step::ChannelSlice { src: a.0, channel },
        }))
    }

    /// Same-size cross-correlation with zero padding (`padding = (k-1)/2`).
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: usize) -> Result<Var> {
        let (c, h, w) = self.dims3(input)?;
        let wshape = self.node(weight)?.shape.clone();
        let (o, wc, k) = match wshape[..] {
            [o, wc, k1, k2] if k1 == k2 => (o, wc, k1),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "conv weight must be out x in x k x k, got {:?}",
                    wshape
                )))
            }
        };
        if k % 2 == 0 {
            return Err(Error::EvenKernel(k));
        }
        if wc != c {
            return Err(Error::ShapeMismatch(format!(
                "conv weight expects {} input channels, input has {}",
                wc, c
            )));
        }
        if padding != (k - 1) / 2 {
            return Err(Error::ShapeMismatch(format!(
                "padding {} does not preserve size for kernel {} (need {})",
                padding,
                k,
                (k - 1) / 2
            )));
        }
        let bshape = self.node(bias)?.shape.clone();
        if bshape[..] != [o] {
            return Err(Error::ShapeMismatch(format!(
                "conv bias must have shape [{}], got {:?}",
                o, bshape
            )));
        }
        let dims = ConvDims { out_ch: o, in_ch: c, k, h, w, padding };
        let mut values = vec![0.0; o * h * w];
        kernels::conv2d_forward(
            &mut values,
            &self.nodes[input.0].values,
            &self.nodes[weight.0].values,
            &self.nodes[bias.0].values,
            &dims,
        );
        let needs = self.nodes[input.0].needs_grad
            || self.nodes[weight.0].needs_grad
            || self.nodes[bias.0].needs_grad;
        Ok(self.push(Node {
            shape: vec![o, h, w],
            values,
            needs_grad: needs,
            is_leaf_grad: false,
            step: Step::Conv2d { input: input.0, weight: weight.0, bias: bias.0, dims },
        }))
    }

    /// Per-channel normalization over spatial positions followed by a learned
    /// scale and shift. Variance is guarded by `eps`.
    pub fn channel_norm(&mut self, input: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.dims3(input)?;
        for (name, v) in [("scale", scale), ("shift", shift)] {
            let s = &self.node(v)?.shape;
            if s[..] != [c] {
                return Err(Error::ShapeMismatch(format!(
                    "channel_norm {} must have shape [{}], got {:?}",
                    name, c, s
                )));
            }
        }
        let plane = h * w;
        let n = plane as f64;
        let src = &self.nodes[input.0].values;
        let gamma = &self.nodes[scale.0].values;
        let beta = &self.nodes[shift.0].values;
        let mut mean = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        let mut values = vec![0.0; c * plane];
        for ch in 0..c {
            let xs = &src[ch * plane..(ch + 1) * plane];
            let mu = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let istd = 1.0 / (var + eps).sqrt();
            mean[ch] = mu;
            inv_std[ch] = istd;
            let (g, b) = (gamma[ch], beta[ch]);
            for (out, &x) in values[ch * plane..(ch + 1) * plane].iter_mut().zip(xs) {
                *out = g * (x - mu) * istd + b;
            }
        }
        let needs = self.nodes[input.0].needs_grad
            || self.nodes[scale.0].needs_grad
            || self.nodes[shift.0].needs_grad;
        Ok(self.push(Node {
            shape: vec![c, h, w],
            values,
            needs_grad: needs,
            is_leaf_grad: false,
            step: Step::ChannelNorm { input: input.0, scale: scale.0, shift: shift.0, mean, inv_std },
        }))
    }

    // ---- backward -----------------------------------------------------------

    /// Pushes `d loss / d leaf` to every `requires_grad` leaf. The loss must be
    /// a scalar recorded on this tape; a tape can run backward once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self.node(loss)?;
        if !node.shape.is_empty() {
            return Err(Error::NonScalarLoss(node.shape.clone()));
        }
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        self.grads = Vec::new();
        self.grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].needs_grad {
            self.grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            if self.nodes[idx].is_leaf_grad {
                self.grads[idx] = Some(g);
            }
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let step = self.nodes[idx].step.clone();
        match step {
            Step::Leaf => {}
            Step::Map { src, op } => {
                if !self.nodes[src].needs_grad {
                    return;
                }
                let contrib: Vec<f64> = {
                    let xs = &self.nodes[src].values;
                    let ys = &self.nodes[idx].values;
                    g.iter()
                        .zip(xs.iter().zip(ys))
                        .map(|(&gi, (&x, &y))| gi * map_derivative(op, x, y))
                        .collect()
                };
                self.accumulate(src, &contrib);
            }
            Step::Affine { src, mul } => {
                if !self.nodes[src].needs_grad {
                    return;
                }
                let contrib: Vec<f64> = g.iter().map(|&gi| gi * mul).collect();
                self.accumulate(src, &contrib);
            }
            Step::Zip { lhs, rhs, op, bcast } => {
                if self.nodes[lhs].needs_grad {
                    let contrib = self.zip_grad_lhs(rhs, op, g);
                    self.accumulate(lhs, &contrib);
                }
                if self.nodes[rhs].needs_grad {
                    let contrib = self.zip_grad_rhs(lhs, rhs, op, bcast, g);
                    self.accumulate(rhs, &contrib);
                }
            }
            Step::Reduce { src, mean } => {
                if !self.nodes[src].needs_grad {
                    return;
                }
                let n = self.nodes[src].values.len();
                let seed = if mean { g[0] / n as f64 } else { g[0] };
                let contrib = vec![seed; n];
                self.accumulate(src, &contrib);
            }
            Step::GradH { src } => {
                if !self.nodes[src].needs_grad {
                    return;
                }
                let (c, h, w) = rank3(&self.nodes[src].shape);
                let mut contrib = vec![0.0; self.nodes[src].values.len()];
                let plane = h * w;
                for ch in 0..c {
                    let gp = &g[ch * plane..(ch + 1) * plane];
                    let cp = &mut contrib[ch * plane..(ch + 1) * plane];
                    for y in 0..h {
                        for x in 0..w - 1 {
                            let gi = gp[y * w + x];
                            cp[y * w + x + 1] += gi;
                            cp[y * w + x] -= gi;
                        }
                    }
                }
                self.accumulate(src, &contrib);
            }
            Step::GradV { src } => {
                if !self.nodes[src].needs_grad {
                    return;
                }
                let (c, h, w) = rank3(&self.nodes[src].shape);
                let mut contrib = vec![0.0; self.nodes[src].values.len()];
                let plane = h * w;
                for ch in 0..c {
                    let gp = &g[ch * plane..(ch + 1) * plane];
                    let cp = &mut contrib[ch * plane..(ch + 1) * plane];
                    for y in 0..h - 1 {
                        for x in 0..w {
                            let gi = gp[y * w + x];
                            cp[(y + 1) * w + x] += gi;
                            cp[y * w + x] -= gi;
                        }
                    }
                }
                self.accumulate(src, &contrib);
            }
            Step::ChannelMax { src, argmax } => {
                if !self.nodes[src].needs_grad {
                    return;
                }
                let plane = argmax.len();
                let mut contrib = vec![0.0; self.nodes[src].values.len()];
                for (p, (&gi, &arg)) in g.iter().zip(argmax.iter()).enumerate() {
                    contrib[arg as usize * plane + p] += gi;
                }
                self.accumulate(src, &contrib);
            }
            Step::ChannelSlice { src, channel } => {
                if !self.nodes[src].needs_grad {
                    return;
                }
                let plane = g.len();
                let mut contrib = vec![0.0; self.nodes[src].values.len()];
                contrib[channel * plane..(channel + 1) * plane].copy_from_slice(g);
                self.accumulate(src, &contrib);
            }
            Step::Conv2d { input, weight, bias, dims } => {
                // ranks differ, so the three parents are distinct nodes; take
                // each gradient slot, accumulate in place, put it back
                if self.nodes[input].needs_grad {
                    let mut buf = self.take_grad_buf(input);
                    kernels::conv2d_grad_input(&mut buf, g, &self.nodes[weight].values, &dims);
                    self.grads[input] = Some(buf);
                }
                if self.nodes[weight].needs_grad {
                    let mut buf = self.take_grad_buf(weight);
                    kernels::conv2d_grad_weight(&mut buf, g, &self.nodes[input].values, &dims);
                    self.grads[weight] = Some(buf);
                }
                if self.nodes[bias].needs_grad {
                    let mut buf = self.take_grad_buf(bias);
                    kernels::conv2d_grad_bias(&mut buf, g, &dims);
                    self.grads[bias] = Some(buf);
                }
            }
            Step::ChannelNorm { input, scale, shift, mean, inv_std } => {
                let (c, h, w) = rank3(&self.nodes[input].shape);
                let plane = h * w;
                let n = plane as f64;
                let gamma = &self.nodes[scale].values;
                let xs = &self.nodes[input].values;
                let mut gx = vec![0.0; c * plane];
                let mut gscale = vec![0.0; c];
                let mut gshift = vec![0.0; c];
                for ch in 0..c {
                    let x = &xs[ch * plane..(ch + 1) * plane];
                    let gp = &g[ch * plane..(ch + 1) * plane];
                    let (mu, istd) = (mean[ch], inv_std[ch]);
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for (&gi, &xi) in gp.iter().zip(x) {
                        let xhat = (xi - mu) * istd;
                        sum_g += gi;
                        sum_gx += gi * xhat;
                    }
                    gshift[ch] = sum_g;
                    gscale[ch] = sum_gx;
                    let coef = gamma[ch] * istd;
                    let mg = sum_g / n;
                    let mgx = sum_gx / n;
                    for ((out, &gi), &xi) in gx[ch * plane..(ch + 1) * plane]
                        .iter_mut()
                        .zip(gp)
                        .zip(x)
                    {
                        let xhat = (xi - mu) * istd;
                        *out = coef * (gi - mg - xhat * mgx);
                    }
                }
                if self.nodes[input].needs_grad {
                    self.accumulate(input, &gx);
                }
                if self.nodes[scale].needs_grad {
                    self.accumulate(scale, &gscale);
                }
                if self.nodes[shift].needs_grad {
                    self.accumulate(shift, &gshift);
                }
            }
        }
    }

    fn zip_grad_lhs(&self, rhs: usize, op: ZipOp, g: &[f64]) -> Vec<f64> {
        let b = &self.nodes[rhs].values;
        let blen = b.len();
        match op {
            ZipOp::Add | ZipOp::Sub => g.to_vec(),
            ZipOp::Mul => g
                .iter()
                .enumerate()
                .map(|(i, &gi)| gi * b[i % blen])
                .collect(),
            ZipOp::Div => g
                .iter()
                .enumerate()
                .map(|(i, &gi)| gi / b[i % blen].max(EPS_DIV))
                .collect(),
        }
    }

    fn zip_grad_rhs(&self, lhs: usize, rhs: usize, op: ZipOp, bcast: Broadcast, g: &[f64]) -> Vec<f64> {
        let a = &self.nodes[lhs].values;
        let b = &self.nodes[rhs].values;
        let blen = b.len();
        let per_element = |i: usize, gi: f64| -> f64 {
            match op {
                ZipOp::Add => gi,
                ZipOp::Sub => -gi,
                ZipOp::Mul => gi * a[i],
                ZipOp::Div => {
                    let bi = b[i % blen];
                    if bi >= EPS_DIV {
                        -gi * a[i] / (bi * bi)
                    } else {
                        0.0
                    }
                }
            }
        };
        match bcast {
            Broadcast::None => g
                .iter()
                .enumerate()
                .map(|(i, &gi)| per_element(i, gi))
                .collect(),
            Broadcast::RhsChannel { channels, plane } => {
                let mut out = vec![0.0; blen];
                for ch in 0..channels {
                    for p in 0..plane {
                        let i = ch * plane + p;
                        out[p] += per_element(i, g[i]);
                    }
                }
                out
            }
        }
    }

    // ---- internals ----------------------------------------------------------

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::UnknownVar(v.0))
    }

    fn dims3(&self, v: Var) -> Result<(usize, usize, usize)> {
        let n = self.node(v)?;
        match n.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::ShapeMismatch(format!(
                "expected rank-3 tensor, got shape {:?}",
                n.shape
            ))),
        }
    }

    fn take_grad_buf(&mut self, idx: usize) -> Vec<f64> {
        self.grads[idx]
            .take()
            .unwrap_or_else(|| vec![0.0; self.nodes[idx].values.len()])
    }

    fn accumulate(&mut self, idx: usize, contrib: &[f64]) {
        match &mut self.grads[idx] {
            Some(buf) => {
                for (b, &c) in buf.iter_mut().zip(contrib) {
                    *b += c;
                }
            }
            slot => *slot = Some(contrib.to_vec()),
        }
    }

    fn map(&mut self, a: Var, op: MapOp) -> Result<Var> {
        let src = self.node(a)?;
        let values: Vec<f64> = src.values.iter().map(|&x| map_forward(op, x)).collect();
        let needs = src.needs_grad;
        let shape = src.shape.clone();
        Ok(self.push(Node {
            shape,
            values,
            needs_grad: needs,
            is_leaf_grad: false,
            step: Step::Map { src: a.0, op },
        }))
    }

    fn zip(&mut self, a: Var, b: Var, op: ZipOp) -> Result<Var> {
        let (ashape, bshape) = (self.node(a)?.shape.clone(), self.node(b)?.shape.clone());
        let bcast = if ashape == bshape {
            Broadcast::None
        } else {
            match (&ashape[..], &bshape[..]) {
                ([c, h, w], [1, h2, w2]) if *c > 1 && h == h2 && w == w2 => {
                    Broadcast::RhsChannel { channels: *c, plane: h * w }
                }
                _ => {
                    return Err(Error::ShapeMismatch(format!(
                        "cannot combine {:?} with {:?}",
                        ashape, bshape
                    )))
                }
            }
        };
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let blen = bv.len();
        let values: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| zip_forward(op, x, bv[i % blen]))
            .collect();
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(Node {
            shape: ashape,
            values,
            needs_grad: needs,
            is_leaf_grad: false,
            step: Step::Zip { lhs: a.0, rhs: b.0, op, bcast },
        }))
    }

    fn reduce(&mut self, a: Var, mean: bool) -> Result<Var> {
        let src = self.node(a)?;
        if src.values.is_empty() {
            return Err(Error::EmptyTensor);
        }
        let mut acc = src.values.iter().sum::<f64>();
        if mean {
            acc /= src.values.len() as f64;
        }
        let needs = src.needs_grad;
        Ok(self.push(Node {
            shape: Vec::new(),
            values: vec![acc],
            needs_grad: needs,
            is_leaf_grad: false,
            step: Step::Reduce { src: a.0, mean },
        }))
    }
}

fn rank3(shape: &[usize]) -> (usize, usize, usize) {
    match shape[..] {
        [c, h, w] => (c, h, w),
        _ => unreachable!("rank-3 enforced at construction"),
    }
}

fn map_forward(op: MapOp, x: f64) -> f64 {
    match op {
        MapOp::Abs => x.abs(),
        MapOp::Sqrt => (x + EPS_GUARD).sqrt(),
        MapOp::Pow(p) => x.powf(p),
        MapOp::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        MapOp::Relu => x.max(0.0),
        MapOp::Tanh => x.tanh(),
        MapOp::Clamp(lo, hi) => x.clamp(lo, hi),
        MapOp::Log => (x + EPS_GUARD).ln(),
    }
}

/// Derivative of a map op given input `x` and forward output `y`.
fn map_derivative(op: MapOp, x: f64, y: f64) -> f64 {
    match op {
        MapOp::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0 // subgradient at the kink
            }
        }
        MapOp::Sqrt => 0.5 / y,
        MapOp::Pow(p) => p * x.powf(p - 1.0),
        MapOp::Sigmoid => y * (1.0 - y),
        MapOp::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        MapOp::Tanh => 1.0 - y * y,
        MapOp::Clamp(lo, hi) => {
            if x >= lo && x <= hi {
                1.0
            } else {
                0.0
            }
        }
        MapOp::Log => 1.0 / (x + EPS_GUARD),
    }
}

fn zip_forward(op: ZipOp, a: f64, b: f64) -> f64 {
    match op {
        ZipOp::Add => a + b,
        ZipOp::Sub => a - b,
        ZipOp::Mul => a * b,
        ZipOp::Div => a / b.max(EPS_DIV),
    }
}
