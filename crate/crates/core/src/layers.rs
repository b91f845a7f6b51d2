//! Network building blocks. Feature maps are `[batch, time, filters]`.

use std::f64::consts::PI;
use std::hash::Hasher;

use crate::error::{Error, Result};
use crate::tensor::{BackwardCtx, BackwardRule, Graph, Real, Tensor, Var};

/// Negative slope of every Leaky ReLU in the network.
pub const LEAKY_RELU_SLOPE: Real = 0.3;

// ---------------------------------------------------------------------------
// Convolution

struct Conv1dRule {
    stride: usize,
    pad: usize,
}

struct ConvDims {
    batch: usize,
    t_in: usize,
    c_in: usize,
    k: usize,
    c_out: usize,
    t_out: usize,
}

fn conv_dims(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<ConvDims> {
    let (&[batch, t_in, c_in], &[k, wc_in, c_out]) = (x.shape(), w.shape()) else {
        return Err(Error::Shape(format!(
            "conv1d expects input [B, T, C] and kernels [K, C_in, C_out], got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    };
    if c_in != wc_in {
        return Err(Error::Shape(format!(
            "conv1d input has {c_in} channels, kernels expect {wc_in}"
        )));
    }
    if stride == 0 {
        return Err(Error::Shape("conv1d stride must be positive".into()));
    }
    if t_in + 2 * pad < k {
        return Err(Error::Shape(format!(
            "conv1d input of length {t_in} (padding {pad}) is shorter than filter length {k}"
        )));
    }
    Ok(ConvDims {
        batch,
        t_in,
        c_in,
        k,
        c_out,
        t_out: (t_in + 2 * pad - k) / stride + 1,
    })
}

/// Input position read by output step `t` at tap `k`, if inside the signal.
#[inline]
fn tap(t: usize, k: usize, stride: usize, pad: usize, t_in: usize) -> Option<usize> {
    (t * stride + k).checked_sub(pad).filter(|&p| p < t_in)
}

impl BackwardRule for Conv1dRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (x, w, gy) = (ctx.inputs[0], ctx.inputs[1], ctx.grad_output);
        let d = conv_dims(x, w, self.stride, self.pad)?;
        let (xd, wd, gd) = (x.data(), w.data(), gy.data());

        let gx = ctx.needs_grad[0].then(|| {
            let mut gx = vec![0.0; x.len()];
            for b in 0..d.batch {
                for t in 0..d.t_out {
                    let grow = &gd[(b * d.t_out + t) * d.c_out..][..d.c_out];
                    for k in 0..d.k {
                        let Some(p) = tap(t, k, self.stride, self.pad, d.t_in) else {
                            continue;
                        };
                        for ci in 0..d.c_in {
                            let wrow = &wd[(k * d.c_in + ci) * d.c_out..][..d.c_out];
                            let dot: Real = wrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                            gx[(b * d.t_in + p) * d.c_in + ci] += dot;
                        }
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), gx)
        });

        let gw = ctx.needs_grad[1].then(|| {
            let mut gw = vec![0.0; w.len()];
            for b in 0..d.batch {
                for t in 0..d.t_out {
                    let grow = &gd[(b * d.t_out + t) * d.c_out..][..d.c_out];
                    for k in 0..d.k {
                        let Some(p) = tap(t, k, self.stride, self.pad, d.t_in) else {
                            continue;
                        };
                        let xrow = &xd[(b * d.t_in + p) * d.c_in..][..d.c_in];
                        for (ci, &xv) in xrow.iter().enumerate() {
                            let wrow = &mut gw[(k * d.c_in + ci) * d.c_out..][..d.c_out];
                            for (o, &gv) in wrow.iter_mut().zip(grow) {
                                *o += xv * gv;
                            }
                        }
                    }
                }
            }
            Tensor::from_parts(w.shape().to_vec(), gw)
        });
        Ok(vec![gx, gw])
    }
}

/// Cross-correlate `x` `[B, T, C_in]` with `kernels` `[K, C_in, C_out]`,
/// zero-padding `pad` steps on both ends. Output length is
/// `(T + 2 pad - K) / stride + 1`.
pub fn conv1d(g: &mut Graph, x: Var, kernels: Var, stride: usize, pad: usize) -> Result<Var> {
    let (xv, wv) = (g.value(x), g.value(kernels));
    let d = conv_dims(xv, wv, stride, pad)?;
    let (xd, wd) = (xv.data(), wv.data());
    let mut out = vec![0.0; d.batch * d.t_out * d.c_out];
    for b in 0..d.batch {
        for t in 0..d.t_out {
            let orow = &mut out[(b * d.t_out + t) * d.c_out..][..d.c_out];
            for k in 0..d.k {
                let Some(p) = tap(t, k, stride, pad, d.t_in) else {
                    continue;
                };
                let xrow = &xd[(b * d.t_in + p) * d.c_in..][..d.c_in];
                for (ci, &xv) in xrow.iter().enumerate() {
                    let wrow = &wd[(k * d.c_in + ci) * d.c_out..][..d.c_out];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
    }
    let value = Tensor::from_parts(vec![d.batch, d.t_out, d.c_out], out);
    g.push_op("conv1d", value, &[x, kernels], Conv1dRule { stride, pad })
}

// ---------------------------------------------------------------------------
// Sinc filterbank

/// Lowest admissible cutoff, Hz.
pub const SINC_MIN_HZ: Real = 50.0;
/// Narrowest admissible band, Hz.
pub const SINC_MIN_BAND_HZ: Real = 50.0;

/// Learnable bandpass filterbank. Each filter owns two raw parameters that
/// map onto legal cutoffs through [`SincFilterbank::cutoffs`].
#[derive(Clone, Debug, PartialEq)]
pub struct SincFilterbank {
    pub f_low: Vec<Real>,
    pub bandwidth: Vec<Real>,
    pub filter_len: usize,
    pub sample_rate: u32,
}

pub fn hz_to_mel(hz: Real) -> Real {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: Real) -> Real {
    700.0 * ((10.0 as Real).powf(mel / 2595.0) - 1.0)
}

/// Highest value either cutoff may take: one minimum band below Nyquist.
fn upper_cap(sample_rate: u32) -> Real {
    sample_rate as Real / 2.0 - SINC_MIN_HZ
}

/// Raw parameters to effective cutoffs (f1, f2), plus whether each clamp was
/// inactive (i.e. the derivative passes through).
#[derive(Clone, Copy, Debug)]
struct Cutoff {
    f1: Real,
    f2: Real,
    f1_free: bool,
    f2_free: bool,
}

fn cutoff(low: Real, band: Real, sample_rate: u32) -> Cutoff {
    let cap = upper_cap(sample_rate);
    let f1_raw = low.abs() + SINC_MIN_HZ;
    let f1 = f1_raw.min(cap - SINC_MIN_BAND_HZ);
    let f2_raw = f1 + SINC_MIN_BAND_HZ + band.abs();
    let f2 = f2_raw.min(cap);
    Cutoff {
        f1,
        f2,
        f1_free: f1_raw < cap - SINC_MIN_BAND_HZ,
        f2_free: f2_raw < cap,
    }
}

impl SincFilterbank {
    /// Cutoffs evenly spaced on the mel scale between the minimum frequency
    /// and the upper cap.
    pub fn mel_init(filters: usize, filter_len: usize, sample_rate: u32) -> Result<Self> {
        if filters == 0 {
            return Err(Error::Config(
                "sinc filterbank needs at least one filter".into(),
            ));
        }
        if filter_len.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "sinc filter length must be odd, got {filter_len}"
            )));
        }
        if upper_cap(sample_rate) - SINC_MIN_BAND_HZ <= SINC_MIN_HZ {
            return Err(Error::Config(format!(
                "sample rate {sample_rate} too low for a sinc filterbank"
            )));
        }
        let (lo, hi) = (hz_to_mel(SINC_MIN_HZ), hz_to_mel(upper_cap(sample_rate)));
        let edges: Vec<Real> = (0..=filters)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as Real / filters as Real))
            .collect();
        let f_low = edges[..filters].iter().map(|e| e - SINC_MIN_HZ).collect();
        let bandwidth = edges
            .windows(2)
            .map(|p| (p[1] - p[0] - SINC_MIN_BAND_HZ).max(0.0))
            .collect();
        Ok(SincFilterbank {
            f_low,
            bandwidth,
            filter_len,
            sample_rate,
        })
    }

    pub fn filters(&self) -> usize {
        self.f_low.len()
    }

    pub fn param_count(&self) -> usize {
        self.f_low.len() + self.bandwidth.len()
    }

    /// Effective (f1, f2) per filter, with `0 < f1 < f2 < sample_rate / 2`.
    pub fn cutoffs(&self) -> (Vec<Real>, Vec<Real>) {
        self.f_low
            .iter()
            .zip(&self.bandwidth)
            .map(|(&l, &b)| {
                let c = cutoff(l, b, self.sample_rate);
                (c.f1, c.f2)
            })
            .unzip()
    }
}

/// Symmetric Hamming window.
pub fn hamming(len: usize) -> Vec<Real> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| (0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos()) as Real)
        .collect()
}

/// `2 f sinc(2 pi f t)` for normalized frequency `f`, i.e. an ideal lowpass
/// impulse response with cutoff `f` evaluated at tap offset `t`.
#[inline]
fn lowpass(f: Real, t: Real) -> Real {
    if t == 0.0 {
        2.0 * f
    } else {
        let pi = PI as Real;
        (2.0 * pi * f * t).sin() / (pi * t)
    }
}

/// Windowed bandpass kernels `[filter_len, 1, F]` for explicit cutoffs in Hz.
pub fn bandpass_kernels(
    f1: &[Real],
    f2: &[Real],
    filter_len: usize,
    sample_rate: u32,
) -> Result<Tensor> {
    if filter_len.is_multiple_of(2) || filter_len == 0 {
        return Err(Error::Contract(format!(
            "sinc filter length must be odd, got {filter_len}"
        )));
    }
    if f1.len() != f2.len() || f1.is_empty() {
        return Err(Error::Shape(
            "cutoff vectors must be non-empty and equal length".into(),
        ));
    }
    let filters = f1.len();
    let sr = sample_rate as Real;
    let window = hamming(filter_len);
    let half = (filter_len / 2) as isize;
    let mut data = vec![0.0; filter_len * filters];
    for (k, &wk) in window.iter().enumerate() {
        let t = (k as isize - half) as Real;
        for f in 0..filters {
            let (lo, hi) = (f1[f] / sr, f2[f] / sr);
            data[k * filters + f] = (lowpass(hi, t) - lowpass(lo, t)) * wk;
        }
    }
    Tensor::new(vec![filter_len, 1, filters], data)
}

pub fn materialize_sinc(fb: &SincFilterbank) -> Result<Tensor> {
    let (f1, f2) = fb.cutoffs();
    bandpass_kernels(&f1, &f2, fb.filter_len, fb.sample_rate)
}

/// Frequency in Hz where the magnitude response of real FIR `taps` peaks,
/// searched over `bins + 1` evenly spaced frequencies from 0 to Nyquist.
pub fn peak_response_hz(taps: &[Real], sample_rate: u32, bins: usize) -> Real {
    let bins = bins.max(1);
    let mut best = (0, Real::NEG_INFINITY);
    for b in 0..=bins {
        let w = PI as Real * b as Real / bins as Real;
        let (mut re, mut im) = (0.0, 0.0);
        for (n, &h) in taps.iter().enumerate() {
            let phase = w * n as Real;
            re += h * phase.cos();
            im -= h * phase.sin();
        }
        let mag = re * re + im * im;
        if mag > best.1 {
            best = (b, mag);
        }
    }
    best.0 as Real * sample_rate as Real / (2 * bins) as Real
}

/// Cutoffs and measured peak of one bandpass filter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterResponse {
    pub f1: Real,
    pub f2: Real,
    pub peak_hz: Real,
}

impl SincFilterbank {
    /// Per-filter cutoffs with the response peak located on a grid of
    /// `bins + 1` frequencies.
    pub fn responses(&self, bins: usize) -> Result<Vec<FilterResponse>> {
        let kernels = materialize_sinc(self)?;
        let filters = self.filters();
        let (f1, f2) = self.cutoffs();
        Ok((0..filters)
            .map(|f| {
                let taps: Vec<Real> = kernels
                    .data()
                    .iter()
                    .skip(f)
                    .step_by(filters)
                    .copied()
                    .collect();
                FilterResponse {
                    f1: f1[f],
                    f2: f2[f],
                    peak_hz: peak_response_hz(&taps, self.sample_rate, bins),
                }
            })
            .collect())
    }
}

struct SincRule {
    filter_len: usize,
    sample_rate: u32,
    cutoffs: Vec<Cutoff>,
}

impl BackwardRule for SincRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (low, band, gy) = (ctx.inputs[0], ctx.inputs[1], ctx.grad_output.data());
        let filters = self.cutoffs.len();
        let sr = self.sample_rate as Real;
        let window = hamming(self.filter_len);
        let half = (self.filter_len / 2) as isize;
        let two_pi = 2.0 * PI as Real;
        // d lowpass(f, t) / d f = 2 cos(2 pi f t), including t = 0.
        let mut d_f1 = vec![0.0; filters];
        let mut d_f2 = vec![0.0; filters];
        for (k, &wk) in window.iter().enumerate() {
            let t = (k as isize - half) as Real;
            for (f, c) in self.cutoffs.iter().enumerate() {
                let g = gy[k * filters + f] * wk;
                d_f2[f] += g * 2.0 * (two_pi * c.f2 / sr * t).cos() / sr;
                d_f1[f] -= g * 2.0 * (two_pi * c.f1 / sr * t).cos() / sr;
            }
        }
        let sign = |v: Real| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        };
        let mut g_low = vec![0.0; filters];
        let mut g_band = vec![0.0; filters];
        for (f, c) in self.cutoffs.iter().enumerate() {
            let through_f2 = if c.f2_free { d_f2[f] } else { 0.0 };
            let total_f1 = d_f1[f] + through_f2;
            if c.f1_free {
                g_low[f] = total_f1 * sign(low.data()[f]);
            }
            g_band[f] = through_f2 * sign(band.data()[f]);
        }
        Ok(vec![
            Some(Tensor::from_parts(low.shape().to_vec(), g_low)),
            Some(Tensor::from_parts(band.shape().to_vec(), g_band)),
        ])
    }

    fn branches(&self, inputs: &[&Tensor], h: &mut dyn Hasher) {
        for (f, c) in self.cutoffs.iter().enumerate() {
            let low = inputs[0].data()[f];
            let band = inputs[1].data()[f];
            h.write_u8(
                u8::from(c.f1_free)
                    | u8::from(c.f2_free) << 1
                    | u8::from(low < 0.0) << 2
                    | u8::from(band < 0.0) << 3,
            );
        }
    }
}

/// Differentiable version of [`materialize_sinc`] over graph parameters.
pub fn sinc_kernels(
    g: &mut Graph,
    low: Var,
    band: Var,
    filter_len: usize,
    sample_rate: u32,
) -> Result<Var> {
    let (lv, bv) = (g.value(low), g.value(band));
    if lv.rank() != 1 || lv.shape() != bv.shape() {
        return Err(Error::Shape(format!(
            "sinc parameters must be equal-length vectors, got {:?} and {:?}",
            lv.shape(),
            bv.shape()
        )));
    }
    let cutoffs: Vec<Cutoff> = lv
        .data()
        .iter()
        .zip(bv.data())
        .map(|(&l, &b)| cutoff(l, b, sample_rate))
        .collect();
    let f1: Vec<Real> = cutoffs.iter().map(|c| c.f1).collect();
    let f2: Vec<Real> = cutoffs.iter().map(|c| c.f2).collect();
    let value = bandpass_kernels(&f1, &f2, filter_len, sample_rate)?;
    g.push_op(
        "sinc_kernels",
        value,
        &[low, band],
        SincRule {
            filter_len,
            sample_rate,
            cutoffs,
        },
    )
}

// ---------------------------------------------------------------------------
// Batch normalization

pub const BN_MOMENTUM: Real = 0.1;
pub const BN_EPSILON: Real = 1e-5;

/// Running statistics of one batch-norm layer. The affine `gamma`/`beta`
/// are ordinary graph parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: Real,
    pub epsilon: Real,
}

impl BatchNormState {
    pub fn new(filters: usize) -> Self {
        BatchNormState {
            running_mean: Tensor::zeros(&[filters]),
            running_var: Tensor::full(&[filters], 1.0),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }
}

struct BatchNormRule {
    xhat: Vec<Real>,
    inv_std: Vec<Real>,
    training: bool,
}

impl BackwardRule for BatchNormRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (x, gamma, gy) = (ctx.inputs[0], ctx.inputs[1], ctx.grad_output.data());
        let f_count = gamma.len();
        let n = x.len() / f_count;
        let mut d_gamma = vec![0.0; f_count];
        let mut d_beta = vec![0.0; f_count];
        for (i, &g) in gy.iter().enumerate() {
            let f = i % f_count;
            d_beta[f] += g;
            d_gamma[f] += g * self.xhat[i];
        }
        let gx = ctx.needs_grad[0].then(|| {
            let gm = gamma.data();
            let nf = n as Real;
            let d: Vec<Real> = gy
                .iter()
                .enumerate()
                .map(|(i, &g)| {
                    let f = i % f_count;
                    let scale = gm[f] * self.inv_std[f];
                    if self.training {
                        scale / nf * (nf * g - d_beta[f] - self.xhat[i] * d_gamma[f])
                    } else {
                        scale * g
                    }
                })
                .collect();
            Tensor::from_parts(x.shape().to_vec(), d)
        });
        Ok(vec![
            gx,
            Some(Tensor::from_parts(vec![f_count], d_gamma)),
            Some(Tensor::from_parts(vec![f_count], d_beta)),
        ])
    }
}

/// Normalize per filter (last axis). In training mode batch statistics over
/// every other axis are used and the updated running state is returned;
/// otherwise the running statistics are used as-is.
pub fn batchnorm(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &BatchNormState,
    training: bool,
) -> Result<(Var, Option<BatchNormState>)> {
    let xv = g.value(x);
    let f_count = *xv.shape().last().unwrap();
    for v in [gamma, beta] {
        if g.shape(v) != [f_count] {
            return Err(Error::Shape(format!(
                "batch norm affine parameters {:?} do not match {f_count} filters",
                g.shape(v)
            )));
        }
    }
    if state.running_mean.shape() != [f_count] || state.running_var.shape() != [f_count] {
        return Err(Error::Shape(
            "batch norm running statistics size mismatch".into(),
        ));
    }
    let n = xv.len() / f_count;
    let (mean, var, updated) = if training {
        if n < 2 {
            return Err(Error::Contract(format!(
                "training-mode batch norm needs at least 2 values per filter, got {n}"
            )));
        }
        let mut mean = vec![0.0; f_count];
        for (i, &v) in xv.data().iter().enumerate() {
            mean[i % f_count] += v;
        }
        mean.iter_mut().for_each(|m| *m /= n as Real);
        let mut var = vec![0.0; f_count];
        for (i, &v) in xv.data().iter().enumerate() {
            let d = v - mean[i % f_count];
            var[i % f_count] += d * d;
        }
        var.iter_mut().for_each(|s| *s /= n as Real);
        let m = state.momentum;
        let unbias = n as Real / (n - 1) as Real;
        let running_mean = state
            .running_mean
            .data()
            .iter()
            .zip(&mean)
            .map(|(r, b)| (1.0 - m) * r + m * b)
            .collect();
        let running_var = state
            .running_var
            .data()
            .iter()
            .zip(&var)
            .map(|(r, b)| (1.0 - m) * r + m * b * unbias)
            .collect();
        let updated = BatchNormState {
            running_mean: Tensor::from_parts(vec![f_count], running_mean),
            running_var: Tensor::from_parts(vec![f_count], running_var),
            ..state.clone()
        };
        (mean, var, Some(updated))
    } else {
        (
            state.running_mean.data().to_vec(),
            state.running_var.data().to_vec(),
            None,
        )
    };
    let inv_std: Vec<Real> = var
        .iter()
        .map(|v| 1.0 / (v + state.epsilon).sqrt())
        .collect();
    let xhat: Vec<Real> = xv
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = i % f_count;
            (v - mean[f]) * inv_std[f]
        })
        .collect();
    let (gm, bt) = (g.value(gamma).data(), g.value(beta).data());
    let out = xhat
        .iter()
        .enumerate()
        .map(|(i, &h)| gm[i % f_count] * h + bt[i % f_count])
        .collect();
    let value = Tensor::from_parts(xv.shape().to_vec(), out);
    let rule = BatchNormRule {
        xhat,
        inv_std,
        training,
    };
    let y = g.push_op("batchnorm", value, &[x, gamma, beta], rule)?;
    Ok((y, updated))
}

// ---------------------------------------------------------------------------
// Max pooling

struct MaxPoolRule {
    argmax: Vec<usize>,
}

impl BackwardRule for MaxPoolRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.inputs[0];
        let mut gx = vec![0.0; x.len()];
        for (o, &src) in self.argmax.iter().enumerate() {
            gx[src] += ctx.grad_output.data()[o];
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))])
    }

    fn branches(&self, _inputs: &[&Tensor], h: &mut dyn Hasher) {
        for &a in &self.argmax {
            h.write_usize(a);
        }
    }
}

/// Non-overlapping max over windows of `width` time steps. A trailing
/// remainder shorter than `width` is dropped; ties go to the earliest step.
pub fn maxpool1d(g: &mut Graph, x: Var, width: usize) -> Result<Var> {
    let xv = g.value(x);
    let &[batch, t_in, f_count] = xv.shape() else {
        return Err(Error::Shape(format!(
            "maxpool1d expects [B, T, F], got {:?}",
            xv.shape()
        )));
    };
    if width == 0 || t_in < width {
        return Err(Error::Shape(format!(
            "maxpool1d width {width} does not fit {t_in} time steps"
        )));
    }
    let t_out = t_in / width;
    let xd = xv.data();
    let mut out = Vec::with_capacity(batch * t_out * f_count);
    let mut argmax = Vec::with_capacity(batch * t_out * f_count);
    for b in 0..batch {
        for t in 0..t_out {
            for f in 0..f_count {
                let at = |j: usize| (b * t_in + t * width + j) * f_count + f;
                let mut best = at(0);
                for j in 1..width {
                    if xd[at(j)] > xd[best] {
                        best = at(j);
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    let value = Tensor::from_parts(vec![batch, t_out, f_count], out);
    g.push_op("maxpool1d", value, &[x], MaxPoolRule { argmax })
}

// ---------------------------------------------------------------------------
// Dense layers

/// `y = x W + b` for row-vector inputs `x` `[B, in]`, weights `[in, out]`.
pub fn fully_connected(g: &mut Graph, x: Var, weights: Var, bias: Var) -> Result<Var> {
    let y = g.matmul(x, weights)?;
    if g.shape(bias) != [g.shape(y)[1]] {
        return Err(Error::Shape(format!(
            "bias {:?} does not match output {:?}",
            g.shape(bias),
            g.shape(y)
        )));
    }
    g.add(y, bias)
}

/// Weights of one single-layer GRU, gates ordered update (z), reset (r),
/// candidate (h).
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    /// `[F, H]` input projections.
    pub input: [Var; 3],
    /// `[H, H]` recurrent projections.
    pub hidden: [Var; 3],
    /// `[H]` biases.
    pub bias: [Var; 3],
}

/// Run the GRU over `x` `[B, T, F]` from a zero state and return the final
/// hidden state `[B, H]`:
///
/// ```text
/// z = sigmoid(x Wz + h Uz + bz)
/// r = sigmoid(x Wr + h Ur + br)
/// c = tanh(x Wh + (r * h) Uh + bh)
/// h = (1 - z) * h + z * c
/// ```
pub fn gru_forward(g: &mut Graph, x: Var, p: &GruVars) -> Result<Var> {
    let &[batch, steps, _] = g.shape(x) else {
        return Err(Error::Shape(format!(
            "gru expects [B, T, F], got {:?}",
            g.shape(x)
        )));
    };
    let hidden = g.shape(p.hidden[0])[0];
    let mut h = g.constant(Tensor::zeros(&[batch, hidden]));
    for t in 0..steps {
        let xt = g.index_axis(x, 1, t)?;
        let gate = |g: &mut Graph, i: usize, h_in: Var| -> Result<Var> {
            let a = g.matmul(xt, p.input[i])?;
            let b = g.matmul(h_in, p.hidden[i])?;
            let s = g.add(a, b)?;
            g.add(s, p.bias[i])
        };
        let z = gate(g, 0, h)?;
        let z = g.sigmoid(z)?;
        let r = gate(g, 1, h)?;
        let r = g.sigmoid(r)?;
        let rh = g.mul(r, h)?;
        let c = gate(g, 2, rh)?;
        let c = g.tanh(c)?;
        let delta = g.sub(c, h)?;
        let step = g.mul(z, delta)?;
        h = g.add(h, step)?;
    }
    Ok(h)
}
