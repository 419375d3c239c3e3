//! Shared test support: independent reference implementations (plain nested
//! loops, no tape, no shared kernels), a finite-difference gradient checker
//! and the synthetic test image used by the behavioral checks.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relight_core::imageio::DarkRegionMask;
use relight_core::Tensor;

// ---- deterministic random tensors --------------------------------------------

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[lo, hi)`.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Uniform magnitudes in `[0.1, 1)` with random sign, for noise-like fields.
pub fn random_signed_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

// ---- reference implementations ------------------------------------------------

/// Cross-correlation with zero padding, written as the defining quadruple loop.
pub fn conv2d_oracle(input: &Tensor, weight: &Tensor, bias: &Tensor, padding: usize) -> Tensor {
    let (c_in, h, w) = match input.shape() {
        [c, h, w] => (*c, *h, *w),
        s => panic!("bad input shape {s:?}"),
    };
    let (c_out, c_in2, k) = match weight.shape() {
        [o, c, k1, k2] if k1 == k2 => (*o, *c, *k1),
        s => panic!("bad weight shape {s:?}"),
    };
    assert_eq!(c_in, c_in2);
    let (inp, wgt, b) = (input.data(), weight.data(), bias.data());
    let mut out = vec![0.0; c_out * h * w];
    for o in 0..c_out {
        for y in 0..h {
            for x in 0..w {
                let mut acc = b[o];
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - padding as isize;
                            let ix = x as isize + kx as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += inp[(c * h + iy as usize) * w + ix as usize]
                                * wgt[((o * c_in + c) * k + ky) * k + kx];
                        }
                    }
                }
                out[(o * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::new(vec![c_out, h, w], out).unwrap()
}

fn mirror_index(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Direct 2-D Gaussian correlation with mirror padding and a kernel rebuilt
/// from the definition.
pub fn gaussian_oracle(input: &Tensor, sigma: f64, ksize: usize) -> Tensor {
    let (c, h, w) = input.dims3().unwrap();
    let r = (ksize / 2) as isize;
    let mut kernel = vec![0.0; ksize * ksize];
    let mut sum = 0.0;
    for ky in 0..ksize {
        for kx in 0..ksize {
            let dy = ky as isize - r;
            let dx = kx as isize - r;
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
            kernel[ky * ksize + kx] = v;
            sum += v;
        }
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let src = input.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..ksize {
                    for kx in 0..ksize {
                        let sy = mirror_index(y as isize + ky as isize - r, h);
                        let sx = mirror_index(x as isize + kx as isize - r, w);
                        acc += kernel[ky * ksize + kx] * src[(ch * h + sy) * w + sx];
                    }
                }
                out[(ch * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out).unwrap()
}

/// Forward differences with zero trailing column/row.
pub fn spatial_gradient_oracle(input: &Tensor) -> (Tensor, Tensor) {
    let (c, h, w) = input.dims3().unwrap();
    let src = input.data();
    let mut gh = vec![0.0; c * h * w];
    let mut gv = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let idx = (ch * h + y) * w + x;
                if x + 1 < w {
                    gh[idx] = src[idx + 1] - src[idx];
                }
                if y + 1 < h {
                    gv[idx] = src[idx + w] - src[idx];
                }
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), gh).unwrap(),
        Tensor::new(input.shape().to_vec(), gv).unwrap(),
    )
}

pub fn channel_max_oracle(input: &Tensor) -> Tensor {
    let (c, h, w) = input.dims3().unwrap();
    assert_eq!(c, 3);
    let src = input.data();
    let plane = h * w;
    let out = (0..plane)
        .map(|p| src[p].max(src[plane + p]).max(src[2 * plane + p]))
        .collect();
    Tensor::new(vec![1, h, w], out).unwrap()
}

fn gray_oracle(t: &Tensor) -> Vec<f64> {
    let (_, h, w) = t.dims3().unwrap();
    let plane = h * w;
    let d = t.data();
    (0..plane)
        .map(|p| (d[p] + d[plane + p] + d[2 * plane + p]) / 3.0)
        .collect()
}

// ---- loss references ----------------------------------------------------------

fn reduce(sum: f64, n: usize, mean: bool) -> f64 {
    if mean {
        sum / n as f64
    } else {
        sum
    }
}

/// `|(R*I + N) - S0|_1` with the illumination broadcast over channels.
pub fn recon_oracle(r: &Tensor, i: &Tensor, n: &Tensor, s0: &Tensor, mean: bool) -> f64 {
    let (c, h, w) = r.dims3().unwrap();
    let plane = h * w;
    let mut sum = 0.0;
    for ch in 0..c {
        for p in 0..plane {
            let idx = ch * plane + p;
            sum += (r.data()[idx] * i.data()[p] + n.data()[idx] - s0.data()[idx]).abs();
        }
    }
    reduce(sum, c * plane, mean)
}

/// `1 / (G(gh^2 + gv^2) + eps_w)` on the grayscale of the first 3 channels.
pub fn illum_weight_oracle(x1: &Tensor, sigma: f64, ksize: usize, eps_w: f64) -> Tensor {
    let (_, h, w) = x1.dims3().unwrap();
    let gray = Tensor::new(vec![1, h, w], gray_oracle(x1)).unwrap();
    let (gh, gv) = spatial_gradient_oracle(&gray);
    let mag: Vec<f64> = gh
        .data()
        .iter()
        .zip(gv.data())
        .map(|(a, b)| a * a + b * b)
        .collect();
    let blurred = gaussian_oracle(&Tensor::new(vec![1, h, w], mag).unwrap(), sigma, ksize);
    Tensor::new(
        vec![1, h, w],
        blurred.data().iter().map(|v| 1.0 / (v + eps_w)).collect(),
    )
    .unwrap()
}

pub fn illum_smooth_oracle(i: &Tensor, w_map: &Tensor, s_m: &Tensor, mean: bool) -> f64 {
    let (gh, gv) = spatial_gradient_oracle(i);
    let n = i.numel();
    let mut smooth = 0.0;
    for p in 0..n {
        smooth += w_map.data()[p] * (gh.data()[p].abs() + gv.data()[p].abs());
    }
    let mut fid = 0.0;
    for p in 0..n {
        fid += (i.data()[p] - s_m.data()[p]).abs();
    }
    reduce(smooth, n, mean) + reduce(fid, n, mean)
}

/// Min-max normalized `1 / (I * (|gh S0| + |gv S0|) + 1e-4)`.
pub fn refl_weight_oracle(i: &Tensor, s0: &Tensor) -> Tensor {
    let (_, h, w) = s0.dims3().unwrap();
    let gray = Tensor::new(vec![1, h, w], gray_oracle(s0)).unwrap();
    let (gh, gv) = spatial_gradient_oracle(&gray);
    let raw: Vec<f64> = (0..h * w)
        .map(|p| 1.0 / (i.data()[p] * (gh.data()[p].abs() + gv.data()[p].abs()) + 1e-4))
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Tensor::new(
        vec![1, h, w],
        raw.iter().map(|v| (v - lo) / (hi - lo + 1e-12)).collect(),
    )
    .unwrap()
}

pub fn refl_smooth_oracle(
    r: &Tensor,
    i: &Tensor,
    w_map: &Tensor,
    s0: &Tensor,
    lambda_rs: f64,
    mean: bool,
) -> f64 {
    let (c, h, w) = r.dims3().unwrap();
    let plane = h * w;
    let (gh, gv) = spatial_gradient_oracle(r);
    let mut smooth = 0.0;
    for ch in 0..c {
        for p in 0..plane {
            let idx = ch * plane + p;
            smooth += w_map.data()[p] * (gh.data()[idx].abs() + gv.data()[idx].abs());
        }
    }
    let mut fid = 0.0;
    for ch in 0..c {
        for p in 0..plane {
            let idx = ch * plane + p;
            fid += (s0.data()[idx] / i.data()[p].max(1e-4) - r.data()[idx]).abs();
        }
    }
    reduce(smooth, c * plane, mean) + lambda_rs * reduce(fid, c * plane, mean)
}

pub fn color_oracle(r: &Tensor, eps: f64) -> f64 {
    let (_, h, w) = r.dims3().unwrap();
    let plane = h * w;
    let mut means = [0.0; 3];
    for (ch, m) in means.iter_mut().enumerate() {
        *m = r.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64;
    }
    [(0, 1), (0, 2), (1, 2)]
        .iter()
        .map(|&(a, b)| ((means[a] - means[b]).powi(2) + eps * eps).sqrt())
        .sum()
}

pub fn region_oracle(
    r: &Tensor,
    s0: &Tensor,
    mask: &DarkRegionMask,
    w_l: f64,
    w_h: f64,
    mean: bool,
) -> f64 {
    let (c, h, w) = r.dims3().unwrap();
    let plane = h * w;
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for p in 0..plane {
        let region = if mask.contains(p) { 0 } else { 1 };
        counts[region] += 1;
        for ch in 0..c {
            let idx = ch * plane + p;
            sums[region] += (r.data()[idx] - s0.data()[idx]).abs();
        }
    }
    let mut total = 0.0;
    for (region, weight) in [(0, w_l), (1, w_h)] {
        if counts[region] > 0 {
            total += weight * reduce(sums[region], counts[region] * c, mean);
        }
    }
    total
}

pub fn maxa_oracle(r: &Tensor, s0: &Tensor, mean: bool) -> f64 {
    let smax = channel_max_oracle(s0);
    let rmax = channel_max_oracle(r);
    let n = smax.numel();
    let sum = smax
        .data()
        .iter()
        .zip(rmax.data())
        .map(|(s, rm)| (s - rm).abs() / (s + 1e-4))
        .sum();
    reduce(sum, n, mean)
}

/// Plain Frobenius norm of `I * N` (no epsilon guard).
pub fn noise_oracle(i: &Tensor, n: &Tensor) -> f64 {
    let (c, h, w) = n.dims3().unwrap();
    let plane = h * w;
    let mut sum = 0.0;
    for ch in 0..c {
        for p in 0..plane {
            let z = i.data()[p] * n.data()[ch * plane + p];
            sum += z * z;
        }
    }
    sum.sqrt()
}

// ---- gradient checking ----------------------------------------------------------

pub const FD_STEP: f64 = 1e-5;

/// Central finite differences of a scalar function at `x`, one value per
/// element.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for idx in 0..x.len() {
        let orig = probe[idx];
        probe[idx] = orig + FD_STEP;
        let hi = f(&probe);
        probe[idx] = orig - FD_STEP;
        let lo = f(&probe);
        probe[idx] = orig;
        grad[idx] = (hi - lo) / (2.0 * FD_STEP);
    }
    grad
}

/// Relative error at most 1e-4, with an absolute floor of 1e-7 below
/// magnitude 1e-3.
pub fn grad_close(analytic: f64, fd: f64) -> bool {
    let scale = analytic.abs().max(fd.abs());
    if scale < 1e-3 {
        (analytic - fd).abs() <= 1e-7
    } else {
        (analytic - fd).abs() / scale <= 1e-4
    }
}

pub fn assert_grads_close(analytic: &[f64], fd: &[f64], what: &str) {
    assert_eq!(analytic.len(), fd.len(), "{what}: length mismatch");
    for (idx, (&a, &f)) in analytic.iter().zip(fd).enumerate() {
        assert!(
            grad_close(a, f),
            "{what}: gradient mismatch at element {idx}: analytic {a} vs fd {f}"
        );
    }
}

// ---- synthetic scene -------------------------------------------------------------

/// Deterministic natural-looking test pattern: smooth illumination gradient,
/// two disks, one rectangle and mild per-channel texture.
pub fn test_pattern(h: usize, w: usize) -> Tensor {
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64 / (w - 1) as f64;
            let fy = y as f64 / (h - 1) as f64;
            let mut lum = 0.45 + 0.25 * fx + 0.15 * fy
                + 0.06 * (std::f64::consts::TAU * 3.0 * fx).sin()
                + 0.05 * (std::f64::consts::TAU * 2.0 * fy).cos();
            let d1 = ((fx - 0.3).powi(2) + (fy - 0.35).powi(2)).sqrt();
            if d1 < 0.18 {
                lum = 0.88 - 0.4 * d1;
            }
            let d2 = ((fx - 0.75).powi(2) + (fy - 0.25).powi(2)).sqrt();
            if d2 < 0.12 {
                lum = 0.62;
            }
            if (0.55..0.85).contains(&fx) && (0.55..0.8).contains(&fy) {
                lum = 0.34;
            }
            let p = y * w + x;
            let r = lum * (0.92 + 0.12 * (std::f64::consts::TAU * fx).sin());
            let g = lum * (0.97 + 0.06 * (std::f64::consts::TAU * fy).cos());
            let b = lum * (0.84 + 0.2 * fy);
            data[p] = r.clamp(0.05, 0.98);
            data[plane + p] = g.clamp(0.05, 0.98);
            data[2 * plane + p] = b.clamp(0.05, 0.98);
        }
    }
    Tensor::new(vec![3, h, w], data).unwrap()
}

/// Low-light version of a scene: cube each sample, add Gaussian noise, clamp.
pub fn darken(scene: &Tensor, noise_sigma: f64, seed: u64) -> Tensor {
    use rand_distr::Distribution;
    let mut rng = rng(seed);
    let normal = rand_distr::Normal::new(0.0, noise_sigma).unwrap();
    let data = scene
        .data()
        .iter()
        .map(|&s| (s * s * s + normal.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(scene.shape().to_vec(), data).unwrap()
}

/// Peak signal-to-noise ratio in dB for unit-range images.
pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    -10.0 * mse.log10()
}
