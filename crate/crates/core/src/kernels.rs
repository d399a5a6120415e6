//! Raw numeric kernels over flat buffers.
//!
//! Both the recording tape and the gathered inference path call into these, so
//! identical inputs always go through identical arithmetic in identical order.

use crate::error::{Error, Result};
use crate::tensor::Shape5;

const AXES: [&str; 3] = ["depth", "height", "width"];

/// Output range `[lo, hi)` along one axis for which kernel tap `k` reads a
/// real (non-padding) input cell. Output `o` reads input `o + k - pad`.
#[inline]
fn valid_range(k: usize, pad: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (in_len + pad).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

pub fn conv3d_output_shape(
    input: Shape5,
    kernel: Shape5,
    bias_len: Option<usize>,
    groups: usize,
    padding: [usize; 3],
) -> Result<Shape5> {
    if groups == 0 {
        return Err(Error::config("conv3d: groups must be positive"));
    }
    if input.c % groups != 0 {
        return Err(Error::config(format!(
            "conv3d: {groups} groups do not divide {} input channels",
            input.c
        )));
    }
    if kernel.n % groups != 0 {
        return Err(Error::config(format!(
            "conv3d: {groups} groups do not divide {} output channels",
            kernel.n
        )));
    }
    if kernel.c != input.c / groups {
        return Err(Error::Shape {
            op: "conv3d",
            axis: "in_channels",
            expected: input.c / groups,
            found: kernel.c,
        });
    }
    if let Some(len) = bias_len {
        if len != kernel.n {
            return Err(Error::Shape {
                op: "conv3d",
                axis: "bias",
                expected: kernel.n,
                found: len,
            });
        }
    }
    let ext = [input.d, input.h, input.w];
    let k = [kernel.d, kernel.h, kernel.w];
    let mut out = [0usize; 3];
    for a in 0..3 {
        let padded = ext[a] + 2 * padding[a];
        if k[a] == 0 || k[a] > padded {
            return Err(Error::Shape {
                op: "conv3d",
                axis: AXES[a],
                expected: padded,
                found: k[a],
            });
        }
        out[a] = padded - k[a] + 1;
    }
    Ok(Shape5::new(input.n, kernel.n, out[0], out[1], out[2]))
}

/// `y += a·x` elementwise.
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * *x;
    }
}

/// Dot product with four interleaved partial sums, combined in a fixed order.
#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &y[..n]);
    let mut acc = [0.0; 4];
    let mut xs = x.chunks_exact(4);
    let mut ys = y.chunks_exact(4);
    for (a, b) in (&mut xs).zip(&mut ys) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut tail = 0.0;
    for (a, b) in xs.remainder().iter().zip(ys.remainder()) {
        tail += a * b;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Zero-padded input geometry. Output voxel `(z, y, x)` sits at flat offset
/// `z·ph·pw + y·pw + x` of an "extended" output row, and kernel tap
/// `(kz, ky, kx)` reads the padded input at that offset plus
/// `kz·ph·pw + ky·pw + kx`, so every tap is one contiguous multiply-add.
struct PaddedGeometry {
    ph: usize,
    pw: usize,
    pvol: usize,
    ext_len: usize,
    taps: Vec<usize>,
}

impl PaddedGeometry {
    fn new(is: Shape5, ks: Shape5, padding: [usize; 3], os: Shape5) -> Self {
        let (pd, ph, pw) = (is.d + 2 * padding[0], is.h + 2 * padding[1], is.w + 2 * padding[2]);
        let mut taps = Vec::with_capacity(ks.volume());
        for kz in 0..ks.d {
            for ky in 0..ks.h {
                for kx in 0..ks.w {
                    taps.push((kz * ph + ky) * pw + kx);
                }
            }
        }
        Self {
            ph,
            pw,
            pvol: pd * ph * pw,
            ext_len: ((os.d - 1) * ph + os.h - 1) * pw + os.w,
            taps,
        }
    }

    fn pad(&self, planes: &[f64], is: Shape5, padding: [usize; 3], out: &mut [f64]) {
        out.fill(0.0);
        for (plane, dst) in planes.chunks_exact(is.volume()).zip(out.chunks_exact_mut(self.pvol)) {
            for z in 0..is.d {
                for y in 0..is.h {
                    let o = ((z + padding[0]) * self.ph + y + padding[1]) * self.pw + padding[2];
                    dst[o..o + is.w].copy_from_slice(&plane[(z * is.h + y) * is.w..][..is.w]);
                }
            }
        }
    }

    fn add_unpadded(&self, padded: &[f64], is: Shape5, padding: [usize; 3], planes: &mut [f64]) {
        for (plane, src) in planes.chunks_exact_mut(is.volume()).zip(padded.chunks_exact(self.pvol)) {
            for z in 0..is.d {
                for y in 0..is.h {
                    let o = ((z + padding[0]) * self.ph + y + padding[1]) * self.pw + padding[2];
                    for (p, v) in plane[(z * is.h + y) * is.w..][..is.w].iter_mut().zip(&src[o..o + is.w]) {
                        *p += *v;
                    }
                }
            }
        }
    }

    fn ext_offset(&self, z: usize, y: usize) -> usize {
        (z * self.ph + y) * self.pw
    }
}

/// Grouped stride-1 3D convolution. Returns the number of multiply-adds
/// that touch real input; taps landing on zero padding are not counted.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_forward(
    input: &[f64],
    is: Shape5,
    kernel: &[f64],
    ks: Shape5,
    bias: Option<&[f64]>,
    groups: usize,
    padding: [usize; 3],
    os: Shape5,
    out: &mut [f64],
) -> u64 {
    let cig = is.c / groups;
    let cog = ks.n / groups;
    let (ivol, ovol, kvol) = (is.volume(), os.volume(), ks.volume());
    let macs = conv_macs(is, ks, padding, os) * (cig * cog * groups * is.n) as u64;
    if kvol == 1 && padding == [0, 0, 0] {
        for b in 0..is.n {
            for oc in 0..ks.n {
                let g = oc / cog;
                let out_plane = &mut out[(b * os.c + oc) * ovol..][..ovol];
                out_plane.fill(bias.map_or(0.0, |bv| bv[oc]));
                for icg in 0..cig {
                    let wv = kernel[oc * cig + icg];
                    axpy(out_plane, wv, &input[(b * is.c + g * cig + icg) * ivol..][..ivol]);
                }
            }
        }
        return macs;
    }
    let geo = PaddedGeometry::new(is, ks, padding, os);
    let mut padded = vec![0.0; cig * geo.pvol];
    let mut ext = vec![0.0; geo.ext_len];
    for b in 0..is.n {
        for g in 0..groups {
            geo.pad(&input[(b * is.c + g * cig) * ivol..][..cig * ivol], is, padding, &mut padded);
            for ocg in 0..cog {
                let oc = g * cog + ocg;
                ext.fill(bias.map_or(0.0, |bv| bv[oc]));
                for icg in 0..cig {
                    let plane = &padded[icg * geo.pvol..][..geo.pvol];
                    let kbase = (oc * cig + icg) * kvol;
                    for (t, &off) in geo.taps.iter().enumerate() {
                        axpy(&mut ext, kernel[kbase + t], &plane[off..off + geo.ext_len]);
                    }
                }
                let out_plane = &mut out[(b * os.c + oc) * ovol..][..ovol];
                for z in 0..os.d {
                    for y in 0..os.h {
                        out_plane[(z * os.h + y) * os.w..][..os.w]
                            .copy_from_slice(&ext[geo.ext_offset(z, y)..][..os.w]);
                    }
                }
            }
        }
    }
    macs
}

/// Multiply-adds of one (input channel, output channel) pair, counting only
/// taps that land inside the input.
fn conv_macs(is: Shape5, ks: Shape5, padding: [usize; 3], os: Shape5) -> u64 {
    let taps = |k: usize, p: usize, i: usize, o: usize| -> usize {
        (0..k)
            .map(|t| {
                let (a, b) = valid_range(t, p, i, o);
                b - a
            })
            .sum()
    };
    (taps(ks.d, padding[0], is.d, os.d) * taps(ks.h, padding[1], is.h, os.h) * taps(ks.w, padding[2], is.w, os.w))
        as u64
}

/// Accumulates input, kernel and bias gradients of [`conv3d_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward(
    input: &[f64],
    is: Shape5,
    kernel: &[f64],
    ks: Shape5,
    groups: usize,
    padding: [usize; 3],
    os: Shape5,
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_kernel: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let cig = is.c / groups;
    let cog = ks.n / groups;
    let (ivol, ovol, kvol) = (is.volume(), os.volume(), ks.volume());
    if let Some(gb) = grad_bias {
        for b in 0..os.n {
            for (oc, g) in gb.iter_mut().enumerate() {
                *g += grad_out[(b * os.c + oc) * ovol..][..ovol].iter().sum::<f64>();
            }
        }
    }
    if grad_input.is_none() && grad_kernel.is_none() {
        return;
    }
    if kvol == 1 && padding == [0, 0, 0] {
        for b in 0..is.n {
            for oc in 0..ks.n {
                let g = oc / cog;
                let go_plane = &grad_out[(b * os.c + oc) * ovol..][..ovol];
                for icg in 0..cig {
                    let ioff = (b * is.c + g * cig + icg) * ivol;
                    let k = oc * cig + icg;
                    if let Some(gk) = grad_kernel.as_deref_mut() {
                        gk[k] += dot(&input[ioff..ioff + ivol], go_plane);
                    }
                    if let Some(gi) = grad_input.as_deref_mut() {
                        axpy(&mut gi[ioff..ioff + ivol], kernel[k], go_plane);
                    }
                }
            }
        }
        return;
    }
    let geo = PaddedGeometry::new(is, ks, padding, os);
    let mut padded = vec![0.0; cig * geo.pvol];
    let mut grad_padded = vec![0.0; if grad_input.is_some() { cig * geo.pvol } else { 0 }];
    let mut gext = vec![0.0; geo.ext_len];
    for b in 0..is.n {
        for g in 0..groups {
            let in_off = (b * is.c + g * cig) * ivol;
            if grad_kernel.is_some() {
                geo.pad(&input[in_off..][..cig * ivol], is, padding, &mut padded);
            }
            grad_padded.fill(0.0);
            for ocg in 0..cog {
                let oc = g * cog + ocg;
                let go_plane = &grad_out[(b * os.c + oc) * ovol..][..ovol];
                // positions between output rows stay zero
                gext.fill(0.0);
                for z in 0..os.d {
                    for y in 0..os.h {
                        gext[geo.ext_offset(z, y)..][..os.w].copy_from_slice(&go_plane[(z * os.h + y) * os.w..][..os.w]);
                    }
                }
                for icg in 0..cig {
                    let kbase = (oc * cig + icg) * kvol;
                    if let Some(gk) = grad_kernel.as_deref_mut() {
                        let plane = &padded[icg * geo.pvol..][..geo.pvol];
                        for (t, &off) in geo.taps.iter().enumerate() {
                            gk[kbase + t] += dot(&plane[off..off + geo.ext_len], &gext);
                        }
                    }
                    if grad_input.is_some() {
                        let gplane = &mut grad_padded[icg * geo.pvol..][..geo.pvol];
                        for (t, &off) in geo.taps.iter().enumerate() {
                            axpy(&mut gplane[off..off + geo.ext_len], kernel[kbase + t], &gext);
                        }
                    }
                }
            }
            if let Some(gi) = grad_input.as_deref_mut() {
                geo.add_unpadded(&grad_padded, is, padding, &mut gi[in_off..][..cig * ivol]);
            }
        }
    }
}

pub fn pool_output_shape(input: Shape5, window: [usize; 3], stride: [usize; 3]) -> Result<Shape5> {
    let ext = [input.d, input.h, input.w];
    let mut out = [0usize; 3];
    for a in 0..3 {
        if stride[a] == 0 || window[a] == 0 {
            return Err(Error::config(format!(
                "avg_pool3d: window and stride must be positive on {}",
                AXES[a]
            )));
        }
        if window[a] > ext[a] {
            return Err(Error::config(format!(
                "avg_pool3d: window {} exceeds {} extent {}",
                window[a], AXES[a], ext[a]
            )));
        }
        out[a] = (ext[a] - window[a]) / stride[a] + 1;
    }
    Ok(Shape5::new(input.n, input.c, out[0], out[1], out[2]))
}

pub fn avg_pool3d_forward(
    input: &[f64],
    is: Shape5,
    window: [usize; 3],
    stride: [usize; 3],
    os: Shape5,
    out: &mut [f64],
) {
    let count = (window[0] * window[1] * window[2]) as f64;
    for plane in 0..is.n * is.c {
        let ip = &input[plane * is.volume()..][..is.volume()];
        let op = &mut out[plane * os.volume()..][..os.volume()];
        for z in 0..os.d {
            for y in 0..os.h {
                for x in 0..os.w {
                    let mut sum = 0.0;
                    for dz in 0..window[0] {
                        let iz = z * stride[0] + dz;
                        for dy in 0..window[1] {
                            let iy = y * stride[1] + dy;
                            let row = (iz * is.h + iy) * is.w + x * stride[2];
                            sum += ip[row..row + window[2]].iter().sum::<f64>();
                        }
                    }
                    op[(z * os.h + y) * os.w + x] = sum / count;
                }
            }
        }
    }
}

pub fn avg_pool3d_backward(
    is: Shape5,
    window: [usize; 3],
    stride: [usize; 3],
    os: Shape5,
    grad_out: &[f64],
    grad_input: &mut [f64],
) {
    let count = (window[0] * window[1] * window[2]) as f64;
    for plane in 0..is.n * is.c {
        let gi = &mut grad_input[plane * is.volume()..][..is.volume()];
        let go = &grad_out[plane * os.volume()..][..os.volume()];
        for z in 0..os.d {
            for y in 0..os.h {
                for x in 0..os.w {
                    let g = go[(z * os.h + y) * os.w + x] / count;
                    for dz in 0..window[0] {
                        let iz = z * stride[0] + dz;
                        for dy in 0..window[1] {
                            let iy = y * stride[1] + dy;
                            let row = (iz * is.h + iy) * is.w + x * stride[2];
                            for v in &mut gi[row..row + window[2]] {
                                *v += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[b, o] = sum_i x[b, i] * w[o, i] + bias[o]`, with every batch item
/// flattened to `f_in` features. Returns the multiply count.
pub fn linear_forward(
    input: &[f64],
    rows: usize,
    f_in: usize,
    weights: &[f64],
    f_out: usize,
    bias: Option<&[f64]>,
    out: &mut [f64],
) -> u64 {
    for b in 0..rows {
        let x = &input[b * f_in..][..f_in];
        for o in 0..f_out {
            let w = &weights[o * f_in..][..f_in];
            let mut acc = 0.0;
            for (xi, wi) in x.iter().zip(w) {
                acc += xi * wi;
            }
            out[b * f_out + o] = acc + bias.map_or(0.0, |bv| bv[o]);
        }
    }
    (rows * f_in * f_out) as u64
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    input: &[f64],
    rows: usize,
    f_in: usize,
    weights: &[f64],
    f_out: usize,
    grad_out: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_weights: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    if let Some(gx) = grad_input {
        for b in 0..rows {
            let go = &grad_out[b * f_out..][..f_out];
            let gx = &mut gx[b * f_in..][..f_in];
            for (o, g) in go.iter().enumerate() {
                for (gxi, wi) in gx.iter_mut().zip(&weights[o * f_in..][..f_in]) {
                    *gxi += g * wi;
                }
            }
        }
    }
    if let Some(gw) = grad_weights {
        for b in 0..rows {
            let x = &input[b * f_in..][..f_in];
            for o in 0..f_out {
                let g = grad_out[b * f_out + o];
                for (gwi, xi) in gw[o * f_in..][..f_in].iter_mut().zip(x) {
                    *gwi += g * xi;
                }
            }
        }
    }
    if let Some(gb) = grad_bias {
        for b in 0..rows {
            for (gbo, g) in gb.iter_mut().zip(&grad_out[b * f_out..][..f_out]) {
                *gbo += g;
            }
        }
    }
}

/// Per-channel statistics gathered by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance used for normalization.
    pub var: Vec<f64>,
    /// Unbiased variance used for running-statistics updates.
    pub var_unbiased: Vec<f64>,
}

/// Training-mode normalization. Writes the normalized values into `xhat` and
/// returns per-channel inverse standard deviations with the batch stats.
pub fn batch_norm_train(
    input: &[f64],
    s: Shape5,
    scale: &[f64],
    shift: &[f64],
    eps: f64,
    xhat: &mut [f64],
    out: &mut [f64],
) -> (Vec<f64>, BatchStats) {
    let vol = s.volume();
    let count = (s.n * vol) as f64;
    let mut stats = BatchStats {
        mean: vec![0.0; s.c],
        var: vec![0.0; s.c],
        var_unbiased: vec![0.0; s.c],
    };
    let mut inv_std = vec![0.0; s.c];
    for c in 0..s.c {
        let planes = || (0..s.n).map(move |b| (b * s.c + c) * vol);
        let mut sum = 0.0;
        for p in planes() {
            sum += input[p..p + vol].iter().sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0;
        for p in planes() {
            sq += input[p..p + vol].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        }
        let var = sq / count;
        let is = 1.0 / (var + eps).sqrt();
        for p in planes() {
            for i in p..p + vol {
                let xh = (input[i] - mean) * is;
                xhat[i] = xh;
                out[i] = scale[c] * xh + shift[c];
            }
        }
        stats.mean[c] = mean;
        stats.var[c] = var;
        stats.var_unbiased[c] = if count > 1.0 { sq / (count - 1.0) } else { var };
        inv_std[c] = is;
    }
    (inv_std, stats)
}

#[allow(clippy::too_many_arguments)]
pub fn batch_norm_eval(
    input: &[f64],
    s: Shape5,
    scale: &[f64],
    shift: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
    xhat: &mut [f64],
    out: &mut [f64],
) -> Vec<f64> {
    let vol = s.volume();
    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    for b in 0..s.n {
        for c in 0..s.c {
            let p = (b * s.c + c) * vol;
            for i in p..p + vol {
                let xh = (input[i] - running_mean[c]) * inv_std[c];
                xhat[i] = xh;
                out[i] = scale[c] * xh + shift[c];
            }
        }
    }
    inv_std
}

/// Gradients of batch norm. `batch_stats` selects the training-mode rule
/// (gradient flows through the batch mean and variance).
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward(
    s: Shape5,
    xhat: &[f64],
    inv_std: &[f64],
    scale: &[f64],
    grad_out: &[f64],
    batch_stats: bool,
    grad_input: Option<&mut [f64]>,
    grad_scale: Option<&mut [f64]>,
    grad_shift: Option<&mut [f64]>,
) {
    let vol = s.volume();
    let count = (s.n * vol) as f64;
    let mut gscale = vec![0.0; s.c];
    let mut gshift = vec![0.0; s.c];
    for b in 0..s.n {
        for c in 0..s.c {
            let p = (b * s.c + c) * vol;
            for i in p..p + vol {
                gscale[c] += grad_out[i] * xhat[i];
                gshift[c] += grad_out[i];
            }
        }
    }
    if let Some(gx) = grad_input {
        for b in 0..s.n {
            for c in 0..s.c {
                let p = (b * s.c + c) * vol;
                let k = scale[c] * inv_std[c];
                for i in p..p + vol {
                    gx[i] += if batch_stats {
                        k / count * (count * grad_out[i] - gshift[c] - xhat[i] * gscale[c])
                    } else {
                        k * grad_out[i]
                    };
                }
            }
        }
    }
    if let Some(g) = grad_scale {
        for (g, v) in g.iter_mut().zip(&gscale) {
            *g += v;
        }
    }
    if let Some(g) = grad_shift {
        for (g, v) in g.iter_mut().zip(&gshift) {
            *g += v;
        }
    }
}

/// Source channel feeding output channel `oc` of a `groups`-way shuffle over
/// `c` channels: output `j * groups + i` reads input `i * (c / groups) + j`.
#[inline]
pub fn shuffle_source(oc: usize, c: usize, groups: usize) -> usize {
    let per = c / groups;
    let (j, i) = (oc / groups, oc % groups);
    i * per + j
}

pub fn channel_shuffle(input: &[f64], s: Shape5, groups: usize, out: &mut [f64]) {
    let vol = s.volume();
    for b in 0..s.n {
        for oc in 0..s.c {
            let ic = shuffle_source(oc, s.c, groups);
            out[(b * s.c + oc) * vol..][..vol].copy_from_slice(&input[(b * s.c + ic) * vol..][..vol]);
        }
    }
}

/// `out[b, c, ..] = x[b, c, ..] * scale[b, c]`.
pub fn scale_channels(input: &[f64], s: Shape5, scale: &[f64], out: &mut [f64]) {
    let vol = s.volume();
    for (p, sv) in scale.iter().enumerate().take(s.n * s.c) {
        for (o, i) in out[p * vol..][..vol].iter_mut().zip(&input[p * vol..][..vol]) {
            *o = *i * *sv;
        }
    }
}

pub fn relu(input: &[f64], out: &mut [f64]) {
    for (o, i) in out.iter_mut().zip(input) {
        *o = if *i > 0.0 { *i } else { 0.0 };
    }
}

/// Row-wise softmax with max subtraction. Returns the per-row log-sum-exp.
pub fn softmax_rows(logits: &[f64], rows: usize, k: usize, probs: &mut [f64]) -> Vec<f64> {
    let mut lse = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &logits[r * k..][..k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let l = m + sum.ln();
        for (p, v) in probs[r * k..][..k].iter_mut().zip(row) {
            *p = (v - l).exp();
        }
        lse.push(l);
    }
    lse
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_clips_padding_taps() {
        // extent 5, pad 1, k=3: output 5
        assert_eq!(valid_range(0, 1, 5, 5), (1, 5));
        assert_eq!(valid_range(1, 1, 5, 5), (0, 5));
        assert_eq!(valid_range(2, 1, 5, 5), (0, 4));
        // no padding
        assert_eq!(valid_range(2, 0, 5, 3), (0, 3));
    }

    #[test]
    fn shuffle_source_matches_transpose_definition() {
        let order: Vec<usize> = (0..4).map(|oc| shuffle_source(oc, 4, 2)).collect();
        assert_eq!(order, vec![0, 2, 1, 3]);
        let ident: Vec<usize> = (0..6).map(|oc| shuffle_source(oc, 6, 1)).collect();
        assert_eq!(ident, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn pool_shape_uses_floor() {
        let s = pool_output_shape(Shape5::new(1, 1, 11, 11, 11), [2; 3], [2; 3]).unwrap();
        assert_eq!((s.d, s.h, s.w), (5, 5, 5));
        assert!(pool_output_shape(Shape5::new(1, 1, 1, 4, 4), [2; 3], [2; 3]).is_err());
    }

    #[test]
    fn conv_shape_errors_name_the_axis() {
        let err = conv3d_output_shape(
            Shape5::new(1, 4, 3, 3, 3),
            Shape5::new(2, 3, 1, 1, 1),
            None,
            1,
            [0; 3],
        )
        .unwrap_err();
        assert!(err.to_string().contains("in_channels"), "{err}");
        let err = conv3d_output_shape(
            Shape5::new(1, 4, 2, 3, 3),
            Shape5::new(2, 4, 3, 1, 1),
            None,
            1,
            [0; 3],
        )
        .unwrap_err();
        assert!(err.to_string().contains("depth"), "{err}");
        let err = conv3d_output_shape(
            Shape5::new(1, 6, 3, 3, 3),
            Shape5::new(4, 3, 1, 1, 1),
            None,
            4,
            [0; 3],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
