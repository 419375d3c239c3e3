//! End-to-end enhancement of one image: optimize the decomposition networks
//! against the image, then brighten.
//!
//! Decomposition runs `iterations` rounds of forward / loss / backward / Adam
//! on a fresh tape each round. Enhancement then gamma-lifts the illumination,
//! subtracts the estimated noise from the input, re-derives reflectance from
//! the denoised image and recomposes. The network reflectance output shapes
//! the losses but the final image uses the recomputed reflectance.

use crate::error::{Error, Result};
use crate::imageio::{dark_region_mask, fuse_input, max_channel_map, value_channel};
use crate::loss::{illum_weight, total_loss, LossBreakdown, LossInputs, LossWeights};
use crate::net::{forward_n, forward_ri, init_params, NetConfig};
use crate::optim::AdamState;
use crate::tape::{Tape, EPS_DIV};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnhanceConfig {
    /// Gamma applied to the illumination map, in (0, 1].
    pub gamma: f64,
    /// Optimization iterations per image.
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub net: NetConfig,
    /// Ask the caller to persist intermediate maps alongside the result.
    pub dump_intermediates: bool,
    /// Reserved tuning parameter: parsed, echoed in reports, used by no loss
    /// term.
    pub delta: f64,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            gamma: 0.4,
            iterations: 1000,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            net: NetConfig::default(),
            dump_intermediates: false,
            delta: 0.1,
        }
    }
}

impl EnhanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        self.weights.validate()?;
        self.net.validate()
    }
}

/// Final decomposition plus the loss trace of every iteration.
#[derive(Debug, Clone)]
pub struct DecompositionResult {
    /// Reflectance, `3 x H x W` in (0, 1).
    pub r: Tensor,
    /// Illumination, `1 x H x W` in (0, 1).
    pub i: Tensor,
    /// Noise residual, `3 x H x W` in (-1, 1).
    pub n: Tensor,
    pub loss_trace: Vec<LossBreakdown>,
}

#[derive(Debug, Clone)]
pub struct EnhanceResult {
    /// `clamp(R_hat * I_hat, 0, 1)`.
    pub enhanced: Tensor,
    /// Gamma-adjusted three-channel illumination.
    pub adjusted_illumination: Tensor,
    /// Noise-subtracted input.
    pub denoised: Tensor,
    /// Reflectance recomputed from the denoised input.
    pub reflectance: Tensor,
    pub decomposition: DecompositionResult,
}

/// Runs the optimization loop and returns the decomposition of the optimized
/// networks. Errors out with the iteration index if the loss ever turns
/// non-finite.
pub fn decompose(s0: &Tensor, cfg: &EnhanceConfig) -> Result<DecompositionResult> {
    cfg.validate()?;
    let (c, _, _) = s0.dims3()?;
    if c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected a 3xHxW image, got {:?}",
            s0.shape()
        )));
    }

    let v = value_channel(s0)?;
    let x1 = fuse_input(s0, &v)?;
    let s_m = max_channel_map(s0)?;
    let mask = dark_region_mask(s0, cfg.weights.dark_fraction)?;
    let illum_w = illum_weight(&x1, &cfg.weights)?;
    let inputs = LossInputs { s0, s_m: &s_m, illum_w: &illum_w, mask: &mask };

    let mut params = init_params(&cfg.net)?;
    let mut adam = AdamState::init(&params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)?;
    let mut trace = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let x1v = tape.constant(&x1);
        let x0v = tape.constant(s0);
        let (r, i) = forward_ri(&mut tape, x1v, &bound)?;
        let n = forward_n(&mut tape, x0v, &bound)?;
        let (terms, breakdown) = total_loss(&mut tape, r, i, n, &inputs, &cfg.weights)?;
        if !breakdown.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        tape.backward(terms.total)?;
        let grads = bound.collect_grads(&tape)?;
        adam.step(&mut params, &grads)?;
        trace.push(breakdown);
    }

    // evaluate the optimized networks once more for the returned components
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x1v = tape.constant(&x1);
    let x0v = tape.constant(s0);
    let (r, i) = forward_ri(&mut tape, x1v, &bound)?;
    let n = forward_n(&mut tape, x0v, &bound)?;
    Ok(DecompositionResult {
        r: tape.tensor(r)?,
        i: tape.tensor(i)?,
        n: tape.tensor(n)?,
        loss_trace: trace,
    })
}

/// Replicates the illumination to three channels and raises it to `gamma`.
pub fn gamma_adjust(i: &Tensor, gamma: f64) -> Result<Tensor> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "gamma must lie in (0, 1], got {}",
            gamma
        )));
    }
    Ok(i.replicate_channels(3)?.map(|v| v.powf(gamma)))
}

/// Removes the estimated noise from the input: `clamp(S0 - N, 0, 1)`.
pub fn denoise(s0: &Tensor, n: &Tensor) -> Result<Tensor> {
    Ok(s0.zip(n, |a, b| a - b)?.clamp01())
}

/// Reflectance from the denoised image: `clamp(S_hat / max(I, eps), 0, 1)`
/// with the illumination replicated to three channels.
pub fn recompute_reflectance(s_hat: &Tensor, i: &Tensor) -> Result<Tensor> {
    let i3 = i.replicate_channels(3)?;
    Ok(s_hat.zip(&i3, |s, iv| s / iv.max(EPS_DIV))?.clamp01())
}

/// Final recomposition: `clamp(R_hat * I_hat, 0, 1)`.
pub fn compose(r_hat: &Tensor, i_hat: &Tensor) -> Result<Tensor> {
    Ok(r_hat.zip(i_hat, |r, i| r * i)?.clamp01())
}

/// The full procedure: decompose, then gamma-adjust, denoise, re-derive
/// reflectance and recompose.
pub fn enhance(s0: &Tensor, cfg: &EnhanceConfig) -> Result<EnhanceResult> {
    let decomposition = decompose(s0, cfg)?;
    let adjusted = gamma_adjust(&decomposition.i, cfg.gamma)?;
    let denoised = denoise(s0, &decomposition.n)?;
    let reflectance = recompute_reflectance(&denoised, &decomposition.i)?;
    let enhanced = compose(&reflectance, &adjusted)?;
    Ok(EnhanceResult {
        enhanced,
        adjusted_illumination: adjusted,
        denoised,
        reflectance,
        decomposition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(iters: usize) -> EnhanceConfig {
        EnhanceConfig {
            iterations: iters,
            net: NetConfig { r_depth: 3, i_depth: 2, n_depth: 2, width: 4, kernel: 3, seed: 3 },
            ..EnhanceConfig::default()
        }
    }

    fn toy_image(h: usize, w: usize) -> Tensor {
        let plane = h * w;
        let mut data = vec![0.0; 3 * plane];
        for p in 0..plane {
            let base = 0.05 + 0.3 * ((p * 13 % 31) as f64 / 31.0);
            data[p] = base;
            data[plane + p] = (base * 0.8 + 0.02).min(1.0);
            data[2 * plane + p] = (base * 1.2).min(1.0);
        }
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    #[test]
    fn single_iteration_traces_once() {
        let img = toy_image(8, 8);
        let result = decompose(&img, &small_cfg(1)).unwrap();
        assert_eq!(result.loss_trace.len(), 1);
        assert_eq!(result.r.shape(), &[3, 8, 8]);
        assert_eq!(result.i.shape(), &[1, 8, 8]);
        assert_eq!(result.n.shape(), &[3, 8, 8]);
    }

    #[test]
    fn decompose_is_deterministic() {
        let img = toy_image(8, 8);
        let cfg = small_cfg(3);
        let a = decompose(&img, &cfg).unwrap();
        let b = decompose(&img, &cfg).unwrap();
        assert_eq!(a.r.data(), b.r.data());
        assert_eq!(a.i.data(), b.i.data());
        assert_eq!(a.n.data(), b.n.data());
    }

    #[test]
    fn component_ranges_hold() {
        let img = toy_image(8, 8);
        let result = decompose(&img, &small_cfg(5)).unwrap();
        assert!(result.r.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(result.i.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(result.n.data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn gamma_adjust_identities() {
        let ones = Tensor::full(vec![1, 2, 2], 1.0);
        let zeros = Tensor::zeros(vec![1, 2, 2]);
        assert!(gamma_adjust(&ones, 0.4)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        assert!(gamma_adjust(&zeros, 0.4)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let q = Tensor::full(vec![1, 1, 1], 0.25);
        let o = gamma_adjust(&q, 0.4).unwrap();
        let expect = (0.4 * 0.25f64.ln()).exp();
        assert!(o.data().iter().all(|&v| (v - expect).abs() < 1e-12));
        assert_eq!(o.shape(), &[3, 1, 1]);
    }

    #[test]
    fn gamma_adjust_rejects_out_of_range() {
        let i = Tensor::full(vec![1, 2, 2], 0.5);
        assert!(gamma_adjust(&i, 0.0).is_err());
        assert!(gamma_adjust(&i, -0.2).is_err());
        assert!(gamma_adjust(&i, 1.5).is_err());
    }

    #[test]
    fn gamma_is_monotone_decreasing_in_gamma() {
        let i = Tensor::new(vec![1, 1, 3], vec![0.1, 0.5, 0.9]).unwrap();
        let a = gamma_adjust(&i, 0.3).unwrap();
        let b = gamma_adjust(&i, 0.7).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!(x >= y);
        }
    }

    #[test]
    fn denoise_subtracts_and_clamps() {
        let s0 = Tensor::full(vec![3, 1, 1], 0.5);
        let n = Tensor::full(vec![3, 1, 1], 0.1);
        assert!((denoise(&s0, &n).unwrap().data()[0] - 0.4).abs() < 1e-15);
        let s0 = Tensor::full(vec![3, 1, 1], 0.05);
        assert_eq!(denoise(&s0, &n).unwrap().data()[0], 0.0);
        let zero = Tensor::zeros(vec![3, 1, 1]);
        assert_eq!(denoise(&s0, &zero).unwrap().data(), s0.data());
    }

    #[test]
    fn reflectance_division_rules() {
        let s = Tensor::full(vec![3, 1, 1], 0.3);
        let i = Tensor::full(vec![1, 1, 1], 0.5);
        assert!((recompute_reflectance(&s, &i).unwrap().data()[0] - 0.6).abs() < 1e-15);
        let i_eq = Tensor::full(vec![1, 1, 1], 0.3);
        assert!((recompute_reflectance(&s, &i_eq).unwrap().data()[0] - 1.0).abs() < 1e-15);
        let i0 = Tensor::zeros(vec![1, 1, 1]);
        assert_eq!(recompute_reflectance(&s, &i0).unwrap().data()[0], 1.0);
    }

    #[test]
    fn compose_multiplies_and_identity_illumination() {
        let r = Tensor::full(vec![3, 1, 1], 0.6);
        let i = Tensor::full(vec![3, 1, 1], 0.5);
        assert!((compose(&r, &i).unwrap().data()[0] - 0.3).abs() < 1e-15);
        let ones = Tensor::full(vec![3, 1, 1], 1.0);
        assert_eq!(compose(&r, &ones).unwrap().data(), r.data());
    }

    #[test]
    fn recomposition_identity_when_gamma_one_and_no_noise() {
        // with N = 0 and gamma = 1, enhance reduces to clamp(S0/I, 0, 1) * I
        // wherever I >= eps and S0 <= I
        let mut idata = Vec::new();
        let mut sdata = Vec::new();
        for p in 0..16 {
            let iv = 0.2 + 0.7 * ((p % 5) as f64 / 5.0);
            idata.push(iv);
        }
        for c in 0..3 {
            for p in 0..16 {
                sdata.push(idata[p] * (0.3 + 0.2 * c as f64));
            }
        }
        let i = Tensor::new(vec![1, 4, 4], idata).unwrap();
        let s0 = Tensor::new(vec![3, 4, 4], sdata).unwrap();
        let adjusted = gamma_adjust(&i, 1.0).unwrap();
        let r_hat = recompute_reflectance(&s0, &i).unwrap();
        let e = compose(&r_hat, &adjusted).unwrap();
        for (ev, sv) in e.data().iter().zip(s0.data()) {
            assert!((ev - sv).abs() < 1e-12, "{ev} vs {sv}");
        }
    }

    #[test]
    fn enhance_shapes_and_ranges() {
        let img = toy_image(8, 8);
        let out = enhance(&img, &small_cfg(3)).unwrap();
        assert_eq!(out.enhanced.shape(), img.shape());
        for t in [&out.enhanced, &out.adjusted_illumination, &out.denoised, &out.reflectance] {
            assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // composition identity on the final output
        let prod = out
            .reflectance
            .zip(&out.adjusted_illumination, |a, b| (a * b).clamp(0.0, 1.0))
            .unwrap();
        assert_eq!(out.enhanced.data(), prod.data());
    }

    #[test]
    fn enhance_is_deterministic_end_to_end() {
        let img = toy_image(8, 8);
        let cfg = small_cfg(3);
        let a = enhance(&img, &cfg).unwrap();
        let b = enhance(&img, &cfg).unwrap();
        assert_eq!(a.enhanced.data(), b.enhanced.data());
    }

    #[test]
    fn invalid_config_rejected() {
        let img = toy_image(4, 4);
        let mut cfg = small_cfg(1);
        cfg.gamma = 0.0;
        assert!(decompose(&img, &cfg).is_err());
        let mut cfg = small_cfg(1);
        cfg.iterations = 0;
        assert!(decompose(&img, &cfg).is_err());
    }
}
