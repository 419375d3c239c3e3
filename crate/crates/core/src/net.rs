//! The three convolutional networks whose parameters are the optimization
//! variables: a reflectance branch and an illumination branch fed by the
//! 4-channel fused input, and a noise branch fed by the raw image.
//!
//! The reflectance branch is deliberately deeper than the illumination branch.
//! Outputs are squashed so that reflectance and illumination live in (0, 1)
//! and the noise residual in (-1, 1).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Variance guard for the per-channel normalization in the noise branch.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    /// Depth of the reflectance branch (3x3 conv + ReLU blocks).
    pub r_depth: usize,
    /// Depth of the illumination branch; must stay below `r_depth`.
    pub i_depth: usize,
    /// Depth of the noise branch (conv + normalization + ReLU blocks).
    pub n_depth: usize,
    /// Feature channels per hidden layer.
    pub width: usize,
    /// Square kernel size, odd.
    pub kernel: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { r_depth: 6, i_depth: 3, n_depth: 5, width: 32, kernel: 3, seed: 0 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_depth < 2 || self.i_depth < 2 || self.n_depth < 2 {
            return Err(Error::InvalidConfig(format!(
                "all depths must be >= 2 (r={}, i={}, n={})",
                self.r_depth, self.i_depth, self.n_depth
            )));
        }
        if self.r_depth <= self.i_depth {
            return Err(Error::InvalidConfig(format!(
                "reflectance branch must be deeper than illumination branch ({} <= {})",
                self.r_depth, self.i_depth
            )));
        }
        if self.width < 1 {
            return Err(Error::InvalidConfig("width must be >= 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel size must be odd, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }
}

#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct NormParams {
    pub scale: Tensor,
    pub shift: Tensor,
}

/// All learnable tensors, in a fixed traversal order shared with the
/// optimizer.
#[derive(Debug, Clone)]
pub struct NetParams {
    pub config: NetConfig,
    pub r_convs: Vec<ConvParams>,
    pub r_head: ConvParams,
    pub i_convs: Vec<ConvParams>,
    pub i_head: ConvParams,
    pub n_convs: Vec<ConvParams>,
    pub n_norms: Vec<NormParams>,
    pub n_head: ConvParams,
}

fn he_conv(rng: &mut ChaCha8Rng, out_ch: usize, in_ch: usize, k: usize) -> ConvParams {
    let fan_in = (in_ch * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
    let n = out_ch * in_ch * k * k;
    let weight: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    ConvParams {
        weight: Tensor::new(vec![out_ch, in_ch, k, k], weight).expect("weight dims"),
        bias: Tensor::zeros(vec![out_ch]),
    }
}

/// He-normal weights, zero biases, unit scale / zero shift, all drawn from a
/// ChaCha stream seeded by `cfg.seed`.
pub fn init_params(cfg: &NetConfig) -> Result<NetParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, k) = (cfg.width, cfg.kernel);

    let mut r_convs = Vec::with_capacity(cfg.r_depth);
    r_convs.push(he_conv(&mut rng, w, 4, k));
    for _ in 1..cfg.r_depth {
        r_convs.push(he_conv(&mut rng, w, w, k));
    }
    let r_head = he_conv(&mut rng, 3, w, 1);

    let mut i_convs = Vec::with_capacity(cfg.i_depth);
    i_convs.push(he_conv(&mut rng, w, 4, k));
    for _ in 1..cfg.i_depth {
        i_convs.push(he_conv(&mut rng, w, w, k));
    }
    let i_head = he_conv(&mut rng, 1, w, 1);

    let mut n_convs = Vec::with_capacity(cfg.n_depth);
    let mut n_norms = Vec::with_capacity(cfg.n_depth);
    n_convs.push(he_conv(&mut rng, w, 3, k));
    for _ in 1..cfg.n_depth {
        n_convs.push(he_conv(&mut rng, w, w, k));
    }
    for _ in 0..cfg.n_depth {
        n_norms.push(NormParams {
            scale: Tensor::full(vec![w], 1.0),
            shift: Tensor::zeros(vec![w]),
        });
    }
    let n_head = he_conv(&mut rng, 3, w, 1);

    Ok(NetParams { config: *cfg, r_convs, r_head, i_convs, i_head, n_convs, n_norms, n_head })
}

impl NetParams {
    /// Every learnable tensor in canonical order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for c in &self.r_convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        out.push(&self.r_head.weight);
        out.push(&self.r_head.bias);
        for c in &self.i_convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        out.push(&self.i_head.weight);
        out.push(&self.i_head.bias);
        for (c, n) in self.n_convs.iter().zip(&self.n_norms) {
            out.push(&c.weight);
            out.push(&c.bias);
            out.push(&n.scale);
            out.push(&n.shift);
        }
        out.push(&self.n_head.weight);
        out.push(&self.n_head.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.r_convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.r_head.weight);
        out.push(&mut self.r_head.bias);
        for c in &mut self.i_convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.i_head.weight);
        out.push(&mut self.i_head.bias);
        for (c, n) in self.n_convs.iter_mut().zip(&mut self.n_norms) {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
            out.push(&mut n.scale);
            out.push(&mut n.shift);
        }
        out.push(&mut self.n_head.weight);
        out.push(&mut self.n_head.bias);
        out
    }

    /// Registers every tensor on a tape, in the same canonical order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        let vars = self
            .tensors()
            .into_iter()
            .map(|t| tape.leaf(t, requires_grad))
            .collect();
        BoundParams { config: self.config, vars }
    }
}

/// Tape handles for one registration of [`NetParams`].
pub struct BoundParams {
    config: NetConfig,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients after a backward pass, aligned with `NetParams::tensors()`.
    pub fn collect_grads(&self, tape: &Tape) -> Result<Vec<Tensor>> {
        self.vars
            .iter()
            .map(|&v| tape.grad(v).ok_or(Error::MissingGrad(0)))
            .collect()
    }

    fn conv(&self, idx: &mut usize) -> (Var, Var) {
        let pair = (self.vars[*idx], self.vars[*idx + 1]);
        *idx += 2;
        pair
    }

    fn norm(&self, idx: &mut usize) -> (Var, Var) {
        let pair = (self.vars[*idx], self.vars[*idx + 1]);
        *idx += 2;
        pair
    }
}

/// Reflectance and illumination from the fused 4-channel input. Both branches
/// end in a sigmoid, so `R` is `3 x H x W` in (0, 1) and `I` is `1 x H x W`
/// in (0, 1).
pub fn forward_ri(tape: &mut Tape, x1: Var, params: &BoundParams) -> Result<(Var, Var)> {
    let shape = tape.shape_of(x1)?.to_vec();
    if shape.len() != 3 || shape[0] != 4 {
        return Err(Error::ShapeMismatch(format!(
            "fused input must be 4xHxW, got {:?}",
            shape
        )));
    }
    let cfg = params.config;
    let pad = cfg.padding();
    let mut idx = 0;

    let mut h = x1;
    for _ in 0..cfg.r_depth {
        let (w, b) = params.conv(&mut idx);
        h = tape.conv2d(h, w, b, pad)?;
        h = tape.relu(h)?;
    }
    let (w, b) = params.conv(&mut idx);
    let r = tape.conv2d(h, w, b, 0)?;
    let r = tape.sigmoid(r)?;

    let mut h = x1;
    for _ in 0..cfg.i_depth {
        let (w, b) = params.conv(&mut idx);
        h = tape.conv2d(h, w, b, pad)?;
        h = tape.relu(h)?;
    }
    let (w, b) = params.conv(&mut idx);
    let i = tape.conv2d(h, w, b, 0)?;
    let i = tape.sigmoid(i)?;

    Ok((r, i))
}

/// Noise residual from the raw 3-channel image; tanh keeps it in (-1, 1).
pub fn forward_n(tape: &mut Tape, x0: Var, params: &BoundParams) -> Result<Var> {
    let shape = tape.shape_of(x0)?.to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "noise-branch input must be 3xHxW, got {:?}",
            shape
        )));
    }
    let cfg = params.config;
    let pad = cfg.padding();
    // skip past the RI vars: r_depth + head, i_depth + head, two vars each
    let mut idx = 2 * (cfg.r_depth + 1) + 2 * (cfg.i_depth + 1);

    let mut h = x0;
    for _ in 0..cfg.n_depth {
        let (w, b) = params.conv(&mut idx);
        let (scale, shift) = params.norm(&mut idx);
        h = tape.conv2d(h, w, b, pad)?;
        h = tape.channel_norm(h, scale, shift, NORM_EPS)?;
        h = tape.relu(h)?;
    }
    let (w, b) = params.conv(&mut idx);
    let n = tape.conv2d(h, w, b, 0)?;
    tape.tanh(n)
}
