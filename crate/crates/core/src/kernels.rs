//! Inner loops for convolution and Gaussian filtering.
//!
//! Every kernel comes in a sequential flavor and, with the `parallel` feature,
//! a rayon flavor that splits work across disjoint output slices. Both flavors
//! accumulate in the same per-element order, so results are bit-identical for
//! a fixed input regardless of thread count. The `parallel` entry points fall
//! back to the sequential loop below [`PAR_MIN_MACS`] multiply-accumulates,
//! where spawn overhead dominates.
//!
//! Forward kernels overwrite their output; the `grad_*` kernels accumulate
//! (`+=`) so one buffer can collect contributions from several consumers.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Geometry of a same-size 2-D convolution (`padding = (k - 1) / 2`).
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub out_ch: usize,
    pub in_ch: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub padding: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn macs(&self) -> usize {
        self.out_ch * self.in_ch * self.k * self.k * self.plane()
    }
}

/// Work threshold below which the parallel entry points stay sequential.
pub const PAR_MIN_MACS: usize = 1 << 20;

/// `dst[x] += scale * src[x + shift]` over the valid overlap of two rows.
#[inline]
fn shifted_axpy(dst: &mut [f64], src: &[f64], shift: isize, scale: f64) {
    let w = dst.len();
    if shift >= 0 {
        let off = shift as usize;
        if off >= w {
            return;
        }
        let n = w - off;
        for (d, s) in dst[..n].iter_mut().zip(&src[off..]) {
            *d += scale * *s;
        }
    } else {
        let off = (-shift) as usize;
        if off >= w {
            return;
        }
        let n = w - off;
        for (d, s) in dst[off..].iter_mut().zip(&src[..n]) {
            *d += scale * *s;
        }
    }
}

/// Dot product of the overlap of `a` with `b` shifted by `shift`.
///
/// Four fixed accumulator lanes; the combination order never depends on the
/// caller, keeping gradients reproducible.
#[inline]
fn shifted_dot(a: &[f64], b: &[f64], shift: isize) -> f64 {
    let w = a.len();
    let (a, b) = if shift >= 0 {
        let off = shift as usize;
        if off >= w {
            return 0.0;
        }
        (&a[..w - off], &b[off..])
    } else {
        let off = (-shift) as usize;
        if off >= w {
            return 0.0;
        }
        (&a[off..], &b[..w - off])
    };
    let mut lanes = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let ai = &a[4 * i..4 * i + 4];
        let bi = &b[4 * i..4 * i + 4];
        for l in 0..4 {
            lanes[l] += ai[l] * bi[l];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

fn forward_one_channel(out_o: &mut [f64], o: usize, input: &[f64], weight: &[f64], bias: &[f64], d: &ConvDims) {
    let (k, h, w, p) = (d.k, d.h, d.w, d.padding);
    let plane = d.plane();
    out_o.fill(bias[o]);
    for c in 0..d.in_ch {
        let src_plane = &input[c * plane..(c + 1) * plane];
        let w_oc = &weight[(o * d.in_ch + c) * k * k..][..k * k];
        for y in 0..h {
            let dst = &mut out_o[y * w..(y + 1) * w];
            for ky in 0..k {
                let iy = (y + ky).wrapping_sub(p);
                if iy >= h {
                    continue; // zero padding row
                }
                let src = &src_plane[iy * w..(iy + 1) * w];
                for kx in 0..k {
                    let shift = kx as isize - p as isize;
                    shifted_axpy(dst, src, shift, w_oc[ky * k + kx]);
                }
            }
        }
    }
}

/// Cross-correlation with zero padding: `out[o] = bias[o] + sum_c input[c] * weight[o][c]`.
pub fn conv2d_forward_seq(out: &mut [f64], input: &[f64], weight: &[f64], bias: &[f64], d: &ConvDims) {
    let plane = d.plane();
    for (o, out_o) in out.chunks_mut(plane).enumerate() {
        forward_one_channel(out_o, o, input, weight, bias, d);
    }
}

#[cfg(feature = "parallel")]
pub fn conv2d_forward_par(out: &mut [f64], input: &[f64], weight: &[f64], bias: &[f64], d: &ConvDims) {
    let plane = d.plane();
    out.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(o, out_o)| forward_one_channel(out_o, o, input, weight, bias, d));
}

pub fn conv2d_forward(out: &mut [f64], input: &[f64], weight: &[f64], bias: &[f64], d: &ConvDims) {
    #[cfg(feature = "parallel")]
    if d.macs() >= PAR_MIN_MACS {
        return conv2d_forward_par(out, input, weight, bias, d);
    }
    conv2d_forward_seq(out, input, weight, bias, d);
}

fn grad_input_one_channel(gin_c: &mut [f64], c: usize, grad_out: &[f64], weight: &[f64], d: &ConvDims) {
    let (k, h, w, p) = (d.k, d.h, d.w, d.padding);
    let plane = d.plane();
    for o in 0..d.out_ch {
        let go_plane = &grad_out[o * plane..(o + 1) * plane];
        let w_oc = &weight[(o * d.in_ch + c) * k * k..][..k * k];
        for y in 0..h {
            let src = &go_plane[y * w..(y + 1) * w];
            for ky in 0..k {
                let iy = (y + ky).wrapping_sub(p);
                if iy >= h {
                    continue;
                }
                let dst = &mut gin_c[iy * w..(iy + 1) * w];
                for kx in 0..k {
                    // forward read was input[iy][x + kx - p]; scatter back with the
                    // opposite shift
                    let shift = p as isize - kx as isize;
                    shifted_axpy(dst, src, shift, w_oc[ky * k + kx]);
                }
            }
        }
    }
}

pub fn conv2d_grad_input_seq(grad_in: &mut [f64], grad_out: &[f64], weight: &[f64], d: &ConvDims) {
    let plane = d.plane();
    for (c, gin_c) in grad_in.chunks_mut(plane).enumerate() {
        grad_input_one_channel(gin_c, c, grad_out, weight, d);
    }
}

#[cfg(feature = "parallel")]
pub fn conv2d_grad_input_par(grad_in: &mut [f64], grad_out: &[f64], weight: &[f64], d: &ConvDims) {
    let plane = d.plane();
    grad_in
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(c, gin_c)| grad_input_one_channel(gin_c, c, grad_out, weight, d));
}

pub fn conv2d_grad_input(grad_in: &mut [f64], grad_out: &[f64], weight: &[f64], d: &ConvDims) {
    #[cfg(feature = "parallel")]
    if d.macs() >= PAR_MIN_MACS {
        return conv2d_grad_input_par(grad_in, grad_out, weight, d);
    }
    conv2d_grad_input_seq(grad_in, grad_out, weight, d);
}

fn grad_weight_one_out(gw_o: &mut [f64], o: usize, grad_out: &[f64], input: &[f64], d: &ConvDims) {
    let (k, h, w, p) = (d.k, d.h, d.w, d.padding);
    let plane = d.plane();
    let go_plane = &grad_out[o * plane..(o + 1) * plane];
    for c in 0..d.in_ch {
        let in_plane = &input[c * plane..(c + 1) * plane];
        let gw_oc = &mut gw_o[c * k * k..(c + 1) * k * k];
        for ky in 0..k {
            for kx in 0..k {
                let shift = kx as isize - p as isize;
                let mut acc = 0.0;
                for y in 0..h {
                    let iy = (y + ky).wrapping_sub(p);
                    if iy >= h {
                        continue;
                    }
                    acc += shifted_dot(
                        &go_plane[y * w..(y + 1) * w],
                        &in_plane[iy * w..(iy + 1) * w],
                        shift,
                    );
                }
                gw_oc[ky * k + kx] += acc;
            }
        }
    }
}

pub fn conv2d_grad_weight_seq(grad_w: &mut [f64], grad_out: &[f64], input: &[f64], d: &ConvDims) {
    let per_out = d.in_ch * d.k * d.k;
    for (o, gw_o) in grad_w.chunks_mut(per_out).enumerate() {
        grad_weight_one_out(gw_o, o, grad_out, input, d);
    }
}

#[cfg(feature = "parallel")]
pub fn conv2d_grad_weight_par(grad_w: &mut [f64], grad_out: &[f64], input: &[f64], d: &ConvDims) {
    let per_out = d.in_ch * d.k * d.k;
    grad_w
        .par_chunks_mut(per_out)
        .enumerate()
        .for_each(|(o, gw_o)| grad_weight_one_out(gw_o, o, grad_out, input, d));
}

pub fn conv2d_grad_weight(grad_w: &mut [f64], grad_out: &[f64], input: &[f64], d: &ConvDims) {
    #[cfg(feature = "parallel")]
    if d.macs() >= PAR_MIN_MACS {
        return conv2d_grad_weight_par(grad_w, grad_out, input, d);
    }
    conv2d_grad_weight_seq(grad_w, grad_out, input, d);
}

pub fn conv2d_grad_bias(grad_b: &mut [f64], grad_out: &[f64], d: &ConvDims) {
    let plane = d.plane();
    for (o, gb) in grad_b.iter_mut().enumerate() {
        *gb += grad_out[o * plane..(o + 1) * plane].iter().sum::<f64>();
    }
}

/// Normalized 2-D Gaussian kernel (`ksize` odd, sum exactly rescaled to 1).
pub fn gaussian_kernel_2d(sigma: f64, ksize: usize) -> Vec<f64> {
    let r = (ksize / 2) as isize;
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let mut k = Vec::with_capacity(ksize * ksize);
    for y in -r..=r {
        for x in -r..=r {
            k.push((-(((y * y + x * x) as f64) * inv2s2)).exp());
        }
    }
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Mirror index with the edge sample included (`-1 -> 0`, `n -> n-1`).
#[inline]
fn mirror(mut i: isize, n: usize) -> usize {
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

fn blur_rows(out_rows: &mut [f64], y0: usize, src_plane: &[f64], kernel: &[f64], ksize: usize, h: usize, w: usize) {
    let r = (ksize / 2) as isize;
    for (dy, dst) in out_rows.chunks_mut(w).enumerate() {
        let y = y0 + dy;
        for (x, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for ky in 0..ksize {
                let sy = mirror(y as isize + ky as isize - r, h);
                let row = &src_plane[sy * w..(sy + 1) * w];
                for kx in 0..ksize {
                    let sx = mirror(x as isize + kx as isize - r, w);
                    acc += kernel[ky * ksize + kx] * row[sx];
                }
            }
            *d = acc;
        }
    }
}

/// Direct 2-D correlation with a normalized Gaussian kernel and mirror padding.
pub fn gaussian_blur_seq(out: &mut [f64], input: &[f64], kernel: &[f64], ksize: usize, c: usize, h: usize, w: usize) {
    let plane = h * w;
    for ch in 0..c {
        blur_rows(
            &mut out[ch * plane..(ch + 1) * plane],
            0,
            &input[ch * plane..(ch + 1) * plane],
            kernel,
            ksize,
            h,
            w,
        );
    }
}

#[cfg(feature = "parallel")]
pub fn gaussian_blur_par(out: &mut [f64], input: &[f64], kernel: &[f64], ksize: usize, c: usize, h: usize, w: usize) {
    let plane = h * w;
    for ch in 0..c {
        let src_plane = &input[ch * plane..(ch + 1) * plane];
        out[ch * plane..(ch + 1) * plane]
            .par_chunks_mut(w)
            .enumerate()
            .for_each(|(y, row)| blur_rows(row, y, src_plane, kernel, ksize, h, w));
    }
}

pub fn gaussian_blur(out: &mut [f64], input: &[f64], kernel: &[f64], ksize: usize, c: usize, h: usize, w: usize) {
    #[cfg(feature = "parallel")]
    if c * h * w * ksize * ksize >= PAR_MIN_MACS {
        return gaussian_blur_par(out, input, kernel, ksize, c, h, w);
    }
    gaussian_blur_seq(out, input, kernel, ksize, c, h, w);
}
