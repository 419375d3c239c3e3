//! Loss terms driving the decomposition: reconstruction fidelity, gradient-
//! weighted smoothness of illumination and reflectance, color constancy,
//! dark-region fidelity, max-channel attention and the illumination-weighted
//! noise norm.
//!
//! L1-style terms reduce by mean by default so the weights stay meaningful
//! across resolutions; [`Reduction::Sum`] restores literal sums. The noise
//! term is always the raw Frobenius norm. The two gradient weight maps are
//! computed outside the tape and enter the graph as constants: no gradient
//! ever flows through them.

use crate::error::{Error, Result};
use crate::imageio::DarkRegionMask;
use crate::kernels;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator guard of the reflectance weight map.
pub const EPS_REFL_WEIGHT: f64 = 1e-4;
/// Denominator guard of the max-channel attention ratio.
pub const EPS_MAXA: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn apply(self, tape: &mut Tape, v: Var) -> Result<Var> {
        match self {
            Reduction::Mean => tape.mean(v),
            Reduction::Sum => tape.sum(v),
        }
    }

    /// Scale that turns a raw sum over `n` elements into this reduction.
    fn scale(self, n: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / n as f64,
            Reduction::Sum => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the illumination smoothness term.
    pub lambda_i: f64,
    /// Weight of the reflectance smoothness term.
    pub lambda_k: f64,
    /// Weight of the noise norm.
    pub lambda_n: f64,
    /// Fidelity coefficient inside the reflectance smoothness term.
    pub lambda_rs: f64,
    /// Charbonnier epsilon of the color loss.
    pub eps_color: f64,
    /// Denominator guard of the illumination weight map.
    pub eps_w: f64,
    /// Dark-region weight.
    pub w_l: f64,
    /// Bright-region weight.
    pub w_h: f64,
    /// Luminance quantile defining the dark region.
    pub dark_fraction: f64,
    pub gauss_sigma: f64,
    pub gauss_ksize: usize,
    pub reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_i: 2.0,
            lambda_k: 2.0,
            lambda_n: 6000.0,
            lambda_rs: 1.0,
            eps_color: 1e-6,
            eps_w: 1e-4,
            w_l: 4.0,
            w_h: 1.0,
            dark_fraction: 0.4,
            gauss_sigma: 1.0,
            gauss_ksize: 5,
            reduction: Reduction::Mean,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_i", self.lambda_i),
            ("lambda_k", self.lambda_k),
            ("lambda_n", self.lambda_n),
            ("lambda_rs", self.lambda_rs),
            ("eps_color", self.eps_color),
            ("eps_w", self.eps_w),
            ("w_l", self.w_l),
            ("w_h", self.w_h),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{} must be >= 0, got {}", name, v)));
            }
        }
        if !(self.dark_fraction > 0.0 && self.dark_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "dark_fraction must lie in (0, 1), got {}",
                self.dark_fraction
            )));
        }
        if self.gauss_ksize % 2 == 0 {
            return Err(Error::EvenKernel(self.gauss_ksize));
        }
        if !(self.gauss_sigma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gauss_sigma must be > 0, got {}",
                self.gauss_sigma
            )));
        }
        Ok(())
    }
}

/// Per-term loss values of one iteration plus their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub illum_smooth: f64,
    pub refl_smooth: f64,
    pub color: f64,
    pub region: f64,
    pub maxa: f64,
    pub noise: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recombines the stored terms with the given weights, in the same
    /// association order the tape uses.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        (((((self.recon + w.lambda_i * self.illum_smooth) + w.lambda_k * self.refl_smooth)
            + self.color)
            + self.region)
            + self.maxa)
            + w.lambda_n * self.noise
    }

    pub fn is_finite(&self) -> bool {
        [
            self.recon,
            self.illum_smooth,
            self.refl_smooth,
            self.color,
            self.region,
            self.maxa,
            self.noise,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

// ---- weight maps (constants, no gradient) -----------------------------------

fn gray_of_first3(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    if c < 3 {
        return Err(Error::ShapeMismatch(format!(
            "need at least 3 channels for grayscale, got {}",
            c
        )));
    }
    let plane = h * w;
    let d = t.data();
    let data = (0..plane)
        .map(|p| (d[p] + d[plane + p] + d[2 * plane + p]) / 3.0)
        .collect();
    Tensor::new(vec![1, h, w], data)
}

/// Plain forward differences with a zero trailing column/row.
fn spatial_gradient_plain(t: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = t.dims3()?;
    if h < 2 || w < 2 {
        return Err(Error::ShapeMismatch(format!(
            "spatial gradient needs at least 2x2 pixels, got {}x{}",
            h, w
        )));
    }
    let plane = h * w;
    let src = t.data();
    let mut gh = vec![0.0; c * plane];
    let mut gv = vec![0.0; c * plane];
    for ch in 0..c {
        let s = &src[ch * plane..(ch + 1) * plane];
        for y in 0..h {
            for x in 0..w - 1 {
                gh[ch * plane + y * w + x] = s[y * w + x + 1] - s[y * w + x];
            }
        }
        for y in 0..h - 1 {
            for x in 0..w {
                gv[ch * plane + y * w + x] = s[(y + 1) * w + x] - s[y * w + x];
            }
        }
    }
    Ok((
        Tensor::new(t.shape().to_vec(), gh)?,
        Tensor::new(t.shape().to_vec(), gv)?,
    ))
}

/// Gaussian filter as a plain tensor operation; the result is always treated
/// as a constant.
pub fn gaussian_filter(t: &Tensor, sigma: f64, ksize: usize) -> Result<Tensor> {
    if ksize % 2 == 0 {
        return Err(Error::EvenKernel(ksize));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!("sigma must be > 0, got {}", sigma)));
    }
    let (c, h, w) = t.dims3()?;
    let kernel = kernels::gaussian_kernel_2d(sigma, ksize);
    let mut out = vec![0.0; t.numel()];
    kernels::gaussian_blur(&mut out, t.data(), &kernel, ksize, c, h, w);
    Tensor::new(t.shape().to_vec(), out)
}

/// Illumination smoothness weights: the reciprocal of the blurred squared
/// gradient magnitude of the grayscale input, `1 / (G(gh^2 + gv^2) + eps_w)`.
pub fn illum_weight(x1: &Tensor, weights: &LossWeights) -> Result<Tensor> {
    let gray = gray_of_first3(x1)?;
    let (gh, gv) = spatial_gradient_plain(&gray)?;
    let mag = gh.zip(&gv, |a, b| a * a + b * b)?;
    let blurred = gaussian_filter(&mag, weights.gauss_sigma, weights.gauss_ksize)?;
    Ok(blurred.map(|v| 1.0 / (v + weights.eps_w)))
}

/// Reflectance smoothness weights: min-max normalized
/// `1 / (I * (|gh S0| + |gv S0|) + 1e-4)`, grayscale gradients of the raw
/// image. A constant map (max == min) normalizes to all zeros.
pub fn refl_weight(i: &Tensor, s0: &Tensor) -> Result<Tensor> {
    let (ic, ih, iw) = i.dims3()?;
    let (_, h, w) = s0.dims3()?;
    if ic != 1 || ih != h || iw != w {
        return Err(Error::ShapeMismatch(format!(
            "illumination {:?} does not match image {:?}",
            i.shape(),
            s0.shape()
        )));
    }
    let gray = gray_of_first3(s0)?;
    let (gh, gv) = spatial_gradient_plain(&gray)?;
    let d = gh.zip(&gv, |a, b| a.abs() + b.abs())?;
    let raw = i.zip(&d, |iv, dv| 1.0 / (iv * dv + EPS_REFL_WEIGHT))?;
    let (lo, hi) = (raw.min(), raw.max());
    Ok(raw.map(|v| (v - lo) / (hi - lo + 1e-12)))
}

// ---- loss terms --------------------------------------------------------------

/// `|(R * I + N) - S0|_1`.
pub fn recon_loss(tape: &mut Tape, r: Var, i: Var, n: Var, s0: Var, red: Reduction) -> Result<Var> {
    let ri = tape.mul(r, i)?;
    let rin = tape.add(ri, n)?;
    let diff = tape.sub(rin, s0)?;
    let a = tape.abs(diff)?;
    red.apply(tape, a)
}

/// `|w . grad I|_1 + |I - S_m|_1` with a constant weight map.
pub fn illum_smooth_loss(
    tape: &mut Tape,
    i: Var,
    illum_w: &Tensor,
    s_m: &Tensor,
    red: Reduction,
) -> Result<Var> {
    let w = tape.constant(illum_w);
    let sm = tape.constant(s_m);
    let (gh, gv) = tape.spatial_gradient(i)?;
    let ah = tape.abs(gh)?;
    let av = tape.abs(gv)?;
    let mag = tape.add(ah, av)?;
    let weighted = tape.mul(mag, w)?;
    let smooth = red.apply(tape, weighted)?;
    let diff = tape.sub(i, sm)?;
    let fid = tape.abs(diff)?;
    let fid = red.apply(tape, fid)?;
    tape.add(smooth, fid)
}

/// `|w_r . grad R|_1 + lambda_rs |S0 / I - R|_1` with a constant weight map
/// and the division clamped at the tape's epsilon.
pub fn refl_smooth_loss(
    tape: &mut Tape,
    r: Var,
    i: Var,
    refl_w: &Tensor,
    s0: Var,
    lambda_rs: f64,
    red: Reduction,
) -> Result<Var> {
    let w = tape.constant(refl_w);
    let (gh, gv) = tape.spatial_gradient(r)?;
    let ah = tape.abs(gh)?;
    let av = tape.abs(gv)?;
    let mag = tape.add(ah, av)?;
    let weighted = tape.mul(mag, w)?;
    let smooth = red.apply(tape, weighted)?;
    let ratio = tape.div(s0, i)?;
    let diff = tape.sub(ratio, r)?;
    let fid = tape.abs(diff)?;
    let fid = red.apply(tape, fid)?;
    let fid = tape.affine(fid, lambda_rs, 0.0)?;
    tape.add(smooth, fid)
}

/// Charbonnier distance between the global means of each channel pair.
pub fn color_loss(tape: &mut Tape, r: Var, eps_color: f64) -> Result<Var> {
    let shape = tape.shape_of(r)?.to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "color loss expects 3xHxW, got {:?}",
            shape
        )));
    }
    let mut means = Vec::with_capacity(3);
    for c in 0..3 {
        let slice = tape.channel_slice(r, c)?;
        means.push(tape.mean(slice)?);
    }
    let mut total: Option<Var> = None;
    for (a, b) in [(0usize, 1usize), (0, 2), (1, 2)] {
        let d = tape.sub(means[a], means[b])?;
        let d2 = tape.mul(d, d)?;
        // eps^2 already bounds the argument away from 0, so the plain square
        // root (pow 0.5) keeps the Charbonnier floor exact
        let shifted = tape.affine(d2, 1.0, eps_color * eps_color)?;
        let c = tape.pow(shifted, 0.5)?;
        total = Some(match total {
            Some(t) => tape.add(t, c)?,
            None => c,
        });
    }
    Ok(total.expect("three pairs"))
}

/// Weighted L1 distance to the input, split between the dark region and the
/// rest. A region with no pixels contributes 0.
pub fn region_loss(
    tape: &mut Tape,
    r: Var,
    s0: Var,
    mask: &DarkRegionMask,
    w_l: f64,
    w_h: f64,
    red: Reduction,
) -> Result<Var> {
    let shape = tape.shape_of(r)?.to_vec();
    let (c, h, w) = match shape[..] {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "region loss expects a rank-3 tensor, got {:?}",
                shape
            )))
        }
    };
    if mask.height != h || mask.width != w {
        return Err(Error::ShapeMismatch(format!(
            "mask is {}x{}, image is {}x{}",
            mask.height, mask.width, h, w
        )));
    }
    let diff = tape.sub(r, s0)?;
    let dist = tape.abs(diff)?;
    let dark = mask.indicator();
    let count_l = mask.selected_count();
    let count_h = mask.len() - count_l;

    let mut total: Option<Var> = None;
    for (weight, indicator, count) in [
        (w_l, dark.clone(), count_l),
        (w_h, dark.map(|v| 1.0 - v), count_h),
    ] {
        if count == 0 {
            continue;
        }
        let ind = tape.constant(&indicator);
        let masked = tape.mul(dist, ind)?;
        let s = tape.sum(masked)?;
        let term = tape.affine(s, weight * red.scale(count * c), 0.0)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("dark region is never empty"))
}

/// Per-pixel relative error between the channel maxima of the input and the
/// reflectance, `|max_c S0 - max_c R| / (max_c S0 + 1e-4)`.
pub fn maxa_loss(tape: &mut Tape, r: Var, s0: &Tensor, red: Reduction) -> Result<Var> {
    let smax = s0.per_pixel_max()?;
    let denom = smax.map(|v| v + EPS_MAXA);
    let smax_v = tape.constant(&smax);
    let denom_v = tape.constant(&denom);
    let rmax = tape.channel_max(r)?;
    let diff = tape.sub(smax_v, rmax)?;
    let numer = tape.abs(diff)?;
    let ratio = tape.div(numer, denom_v)?;
    red.apply(tape, ratio)
}

/// Frobenius norm of the illumination-weighted noise, `||I . N||_F`. Never
/// reduced to a mean; the guarded square root floors it at 1e-6.
pub fn noise_loss(tape: &mut Tape, i: Var, n: Var) -> Result<Var> {
    let z = tape.mul(n, i)?;
    let z2 = tape.mul(z, z)?;
    let s = tape.sum(z2)?;
    tape.sqrt(s)
}

/// Constant per-image inputs shared by every iteration's loss evaluation.
pub struct LossInputs<'a> {
    pub s0: &'a Tensor,
    pub s_m: &'a Tensor,
    /// Illumination weight map, computed once per image from the fused input.
    pub illum_w: &'a Tensor,
    pub mask: &'a DarkRegionMask,
}

/// Tape handles of every term, for gradient tests and tracing.
pub struct LossTerms {
    pub recon: Var,
    pub illum_smooth: Var,
    pub refl_smooth: Var,
    pub color: Var,
    pub region: Var,
    pub maxa: Var,
    pub noise: Var,
    pub total: Var,
}

/// Builds every term plus the weighted total. The reflectance weight map is
/// recomputed from the current illumination values and enters as a constant.
pub fn total_loss(
    tape: &mut Tape,
    r: Var,
    i: Var,
    n: Var,
    inputs: &LossInputs,
    weights: &LossWeights,
) -> Result<(LossTerms, LossBreakdown)> {
    let red = weights.reduction;
    let s0 = tape.constant(inputs.s0);
    let i_now = tape.tensor(i)?;
    let refl_w = refl_weight(&i_now, inputs.s0)?;

    let recon = recon_loss(tape, r, i, n, s0, red)?;
    let illum_smooth = illum_smooth_loss(tape, i, inputs.illum_w, inputs.s_m, red)?;
    let refl_smooth = refl_smooth_loss(tape, r, i, &refl_w, s0, weights.lambda_rs, red)?;
    let color = color_loss(tape, r, weights.eps_color)?;
    let region = region_loss(tape, r, s0, inputs.mask, weights.w_l, weights.w_h, red)?;
    let maxa = maxa_loss(tape, r, inputs.s0, red)?;
    let noise = noise_loss(tape, i, n)?;

    let wi = tape.affine(illum_smooth, weights.lambda_i, 0.0)?;
    let wk = tape.affine(refl_smooth, weights.lambda_k, 0.0)?;
    let wn = tape.affine(noise, weights.lambda_n, 0.0)?;
    let mut total = tape.add(recon, wi)?;
    total = tape.add(total, wk)?;
    total = tape.add(total, color)?;
    total = tape.add(total, region)?;
    total = tape.add(total, maxa)?;
    total = tape.add(total, wn)?;

    let breakdown = LossBreakdown {
        recon: tape.scalar_value(recon)?,
        illum_smooth: tape.scalar_value(illum_smooth)?,
        refl_smooth: tape.scalar_value(refl_smooth)?,
        color: tape.scalar_value(color)?,
        region: tape.scalar_value(region)?,
        maxa: tape.scalar_value(maxa)?,
        noise: tape.scalar_value(noise)?,
        total: tape.scalar_value(total)?,
    };
    Ok((
        LossTerms { recon, illum_smooth, refl_smooth, color, region, maxa, noise, total },
        breakdown,
    ))
}
