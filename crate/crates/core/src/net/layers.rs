use crate::error::{Error, Result};
use crate::model_io::WeightBundle;

use super::spec::{ConvLayerSpec, FreqMode, NormSpec, TimeBiasSpec};
use super::FeatureMap;

fn take(weights: &WeightBundle, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
    let t = weights
        .get(name)
        .ok_or_else(|| Error::Construction(format!("missing tensor `{name}`")))?;
    if t.shape != shape {
        return Err(Error::Construction(format!(
            "tensor `{name}` has shape {:?}, layer needs {shape:?}",
            t.shape
        )));
    }
    Ok(t.data.clone())
}

/// A convolution with causal (zero-padded on the left) taps along time and
/// same/strided/transposed taps along frequency.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub spec: ConvLayerSpec,
    pub in_freq: usize,
    pub out_freq: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl ConvLayer {
    pub fn new(spec: ConvLayerSpec, in_freq: usize, weights: &WeightBundle) -> Result<Self> {
        let weight = take(weights, &format!("{}.weight", spec.name), &spec.weight_shape())?;
        let bias = take(weights, &format!("{}.bias", spec.name), &[spec.out_channels])?;
        let out_freq = spec.out_freq(in_freq);
        Ok(Self { spec, in_freq, out_freq, weight, bias })
    }

    /// How many frames before the output frame tap `j` reads. Negative with
    /// lookahead.
    pub fn tap_offset(&self, j: usize) -> isize {
        ((self.spec.kernel_time - 1 - j) * self.spec.dilation) as isize - self.spec.lookahead as isize
    }

    /// One output frame from the `kernel_time` input frames the taps read,
    /// oldest first. Missing (padded) frames are `None` and read as zeros.
    pub fn eval(&self, taps: &[Option<&FeatureMap>]) -> FeatureMap {
        let (ci, co) = (self.spec.in_channels, self.spec.out_channels);
        let (kt, kf) = (self.spec.kernel_time, self.spec.kernel_freq);
        let (fi, fo) = (self.in_freq, self.out_freq);
        debug_assert_eq!(taps.len(), kt);
        let mut out = FeatureMap::zeros(co, fo);
        for (o, row) in out.data.chunks_exact_mut(fo).enumerate() {
            row.fill(self.bias[o]);
        }
        let rows = ci * kt;
        match self.spec.freq {
            FreqMode::Same | FreqMode::Down => {
                let stride = if self.spec.freq == FreqMode::Down { 2 } else { 1 };
                let pad = (kf / 2) as isize;
                // im2col: row (i, j, k) holds input channel i of tap j read at
                // stride * f + k - pad.
                let mut cols = vec![0.0f32; rows * kf * fo];
                for i in 0..ci {
                    for (j, tap) in taps.iter().enumerate() {
                        let Some(x) = tap else { continue };
                        let x = &x.data[i * fi..(i + 1) * fi];
                        for k in 0..kf {
                            let dst = &mut cols[((i * kt + j) * kf + k) * fo..][..fo];
                            let shift = k as isize - pad;
                            if stride == 1 {
                                let lo = (-shift).max(0) as usize;
                                let hi = (fi as isize - shift).min(fo as isize).max(0) as usize;
                                if lo < hi {
                                    let s = (lo as isize + shift) as usize;
                                    dst[lo..hi].copy_from_slice(&x[s..s + hi - lo]);
                                }
                            } else {
                                for (f, d) in dst.iter_mut().enumerate() {
                                    let src = (stride * f) as isize + shift;
                                    if (0..fi as isize).contains(&src) {
                                        *d = x[src as usize];
                                    }
                                }
                            }
                        }
                    }
                }
                let k = rows * kf;
                // SAFETY: all strides and dimensions describe the buffers above.
                unsafe {
                    matrixmultiply::sgemm(
                        co, k, fo, 1.0,
                        self.weight.as_ptr(), k as isize, 1,
                        cols.as_ptr(), fo as isize, 1,
                        1.0, out.data.as_mut_ptr(), fo as isize, 1,
                    );
                }
            }
            FreqMode::Up => {
                let mut cols = vec![0.0f32; rows * fi];
                for i in 0..ci {
                    for (j, tap) in taps.iter().enumerate() {
                        if let Some(x) = tap {
                            cols[(i * kt + j) * fi..][..fi].copy_from_slice(&x.data[i * fi..(i + 1) * fi]);
                        }
                    }
                }
                // out[o, 2f + k] += sum_(i,j) w[o, i, j, k] x_ij[f], one product per k.
                for k in 0..kf {
                    // SAFETY: `k < kf = 2`; the column stride 2 of the output
                    // stays within `fo = 2 * fi` values per row.
                    unsafe {
                        matrixmultiply::sgemm(
                            co, rows, fi, 1.0,
                            self.weight.as_ptr().add(k), (rows * kf) as isize, kf as isize,
                            cols.as_ptr(), fi as isize, 1,
                            1.0, out.data.as_mut_ptr().add(k), fo as isize, 2,
                        );
                    }
                }
            }
        }
        out
    }
}

/// Frozen sub-band batch norm folded into a per-(channel, band) affine map.
#[derive(Debug, Clone)]
pub struct NormLayer {
    pub spec: NormSpec,
    freq: usize,
    scale: Vec<f32>,
    shift: Vec<f32>,
}

impl NormLayer {
    pub fn new(spec: NormSpec, freq: usize, weights: &WeightBundle) -> Result<Self> {
        let c = spec.channels;
        let (g, b) = (spec.channel_groups, spec.bands);
        let gamma = take(weights, &format!("{}.weight", spec.name), &[c])?;
        let beta = take(weights, &format!("{}.bias", spec.name), &[c])?;
        let mean = take(weights, &format!("{}.running_mean", spec.name), &[g, b])?;
        let var = take(weights, &format!("{}.running_var", spec.name), &[g, b])?;
        if let Some(v) = var.iter().find(|&&v| !(v + spec.eps > 0.0)) {
            return Err(Error::Construction(format!("norm `{}` has running variance {v}", spec.name)));
        }
        let per_group = c / g;
        let mut scale = vec![0.0; c * b];
        let mut shift = vec![0.0; c * b];
        for ch in 0..c {
            for band in 0..b {
                let idx = (ch / per_group) * b + band;
                let inv = 1.0 / (var[idx] + spec.eps).sqrt();
                scale[ch * b + band] = gamma[ch] * inv;
                shift[ch * b + band] = beta[ch] - gamma[ch] * mean[idx] * inv;
            }
        }
        Ok(Self { spec, freq, scale, shift })
    }

    pub fn apply(&self, x: &mut FeatureMap) {
        let bands = self.spec.bands;
        for ch in 0..self.spec.channels {
            let row = &mut x.data[ch * self.freq..(ch + 1) * self.freq];
            for band in 0..bands {
                let (lo, hi) = (band * self.freq / bands, (band + 1) * self.freq / bands);
                let (s, t) = (self.scale[ch * bands + band], self.shift[ch * bands + band]);
                for v in &mut row[lo..hi] {
                    *v = *v * s + t;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TimeBiasLayer {
    pub spec: TimeBiasSpec,
    emb_dim: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl TimeBiasLayer {
    pub fn new(spec: TimeBiasSpec, emb_dim: usize, weights: &WeightBundle) -> Result<Self> {
        let weight = take(weights, &format!("{}.weight", spec.name), &[spec.channels, emb_dim])?;
        let bias = take(weights, &format!("{}.bias", spec.name), &[spec.channels])?;
        Ok(Self { spec, emb_dim, weight, bias })
    }

    /// Per-channel offsets for one diffusion time.
    pub fn offsets(&self, embedding: &[f32]) -> Vec<f32> {
        (0..self.spec.channels)
            .map(|c| {
                let w = &self.weight[c * self.emb_dim..(c + 1) * self.emb_dim];
                self.bias[c] + w.iter().zip(embedding).map(|(a, b)| a * b).sum::<f32>()
            })
            .collect()
    }

    pub fn apply(offsets: &[f32], x: &mut FeatureMap) {
        let f = x.freq;
        for (c, &off) in offsets.iter().enumerate() {
            for v in &mut x.data[c * f..(c + 1) * f] {
                *v += off;
            }
        }
    }
}

pub fn silu(x: &mut FeatureMap) {
    for v in &mut x.data {
        *v /= 1.0 + (-*v).exp();
    }
}

/// Sinusoidal embedding of the diffusion time `tau` in `[0, 1]`.
pub fn time_embedding(tau: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64).ln() * i as f64 / half.max(1) as f64).exp())
        .collect();
    let t = tau as f64 * 1000.0;
    out.extend(freqs.iter().map(|w| (t * w).sin() as f32));
    out.extend(freqs.iter().map(|w| (t * w).cos() as f32));
    out
}
