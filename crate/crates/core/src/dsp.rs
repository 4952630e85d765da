//! Frame-level STFT analysis and overlap-add synthesis.
//!
//! All spectra handled by the engine are one-sided (`window_len / 2 + 1`
//! bins), orthonormally scaled and magnitude-compressed: a bin `z` is stored
//! as `|z|^alpha * z / |z|`. The synthesis side undoes the compression and
//! overlap-adds with the analysis window divided by the per-sample sum of
//! squared overlapping windows, which makes analysis followed by synthesis
//! the identity once every output sample has seen all of its frames.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex32;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop_len: usize,
    /// Scale the forward and inverse transforms by `1/sqrt(window_len)`.
    pub orthonormal: bool,
    pub compress_alpha: f32,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_len: 512,
            hop_len: 256,
            orthonormal: true,
            compress_alpha: 0.5,
        }
    }
}

impl StftConfig {
    pub fn n_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Samples at the head of a stream that have not yet received all of
    /// their overlapping frames.
    pub fn warmup_len(&self) -> usize {
        self.window_len - self.hop_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if self.window_len < 2 || !self.window_len.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "window_len must be even and >= 2, got {}",
                self.window_len
            )));
        }
        if self.hop_len == 0 || !self.window_len.is_multiple_of(self.hop_len) || self.hop_len > self.window_len / 2 {
            return Err(Error::Config(format!(
                "hop_len {} must divide window_len {} with at least 50% overlap",
                self.hop_len, self.window_len
            )));
        }
        if !(self.compress_alpha > 0.0 && self.compress_alpha <= 1.0) {
            return Err(Error::Config(format!(
                "compress_alpha must be in (0, 1], got {}",
                self.compress_alpha
            )));
        }
        Ok(())
    }

    /// Periodic (DFT-even) Hann window of `window_len` samples.
    pub fn window(&self) -> Vec<f32> {
        periodic_hann(self.window_len)
    }
}

pub fn periodic_hann(len: usize) -> Vec<f32> {
    (0..len)
        .map(|n| {
            let phase = 2.0 * std::f64::consts::PI * n as f64 / len as f64;
            (0.5 - 0.5 * phase.cos()) as f32
        })
        .collect()
}

/// One compressed, one-sided complex spectrogram frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectroFrame {
    pub bins: Vec<Complex32>,
}

impl SpectroFrame {
    pub fn zeros(n_bins: usize) -> Self {
        Self { bins: vec![Complex32::new(0.0, 0.0); n_bins] }
    }

    pub fn from_magnitudes(mags: &[f32]) -> Self {
        Self { bins: mags.iter().map(|&m| Complex32::new(m, 0.0)).collect() }
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn magnitudes(&self) -> Vec<f32> {
        self.bins.iter().map(|z| z.norm()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.bins.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// `|z|^alpha` with the phase kept. Zero stays zero.
pub fn compress(z: Complex32, alpha: f32) -> Complex32 {
    let mag = z.norm();
    if mag == 0.0 {
        Complex32::new(0.0, 0.0)
    } else {
        z * (mag.powf(alpha) / mag)
    }
}

pub fn decompress(z: Complex32, alpha: f32) -> Complex32 {
    compress(z, 1.0 / alpha)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyReport {
    pub algorithmic_latency_ms: f64,
    pub total_latency_ms: f64,
    pub hop_ms: f64,
    pub per_frame_budget_ms: f64,
}

impl fmt::Display for LatencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "algorithmic latency {:.3} ms, total latency {:.3} ms, hop {:.3} ms, per-frame budget {:.3} ms",
            self.algorithmic_latency_ms, self.total_latency_ms, self.hop_ms, self.per_frame_budget_ms
        )
    }
}

pub fn latency_report(cfg: &StftConfig) -> LatencyReport {
    let sr = cfg.sample_rate as f64;
    let algorithmic = cfg.window_len as f64 * 1000.0 / sr;
    let hop = cfg.hop_len as f64 * 1000.0 / sr;
    LatencyReport {
        algorithmic_latency_ms: algorithmic,
        total_latency_ms: algorithmic + hop,
        hop_ms: hop,
        per_frame_budget_ms: hop,
    }
}

/// Overlap-add accumulator for streaming synthesis. Holds the partial sums of
/// the next `window_len` output samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthState {
    acc: Vec<f32>,
}

impl SynthState {
    pub fn new(cfg: &StftConfig) -> Self {
        Self { acc: vec![0.0; cfg.window_len] }
    }

    pub fn pending(&self) -> &[f32] {
        &self.acc
    }
}

/// Planned transforms and windows for one [`StftConfig`].
#[derive(Clone)]
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f32>,
    synth_window: Vec<f32>,
    forward: Arc<dyn RealToComplex<f32>>,
    inverse: Arc<dyn ComplexToReal<f32>>,
}

impl fmt::Debug for Stft {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let window = cfg.window();
        if window.iter().any(|&w| w < 0.0) || window.iter().sum::<f32>() <= 0.0 {
            return Err(Error::Config("window must be nonnegative with positive sum".into()));
        }
        let synth_window = synthesis_window(&window, cfg.hop_len)?;
        let mut planner = RealFftPlanner::<f32>::new();
        let forward = planner.plan_fft_forward(cfg.window_len);
        let inverse = planner.plan_fft_inverse(cfg.window_len);
        Ok(Self { cfg, window, synth_window, forward, inverse })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn window(&self) -> &[f32] {
        &self.window
    }

    pub fn synthesis_window(&self) -> &[f32] {
        &self.synth_window
    }

    pub fn n_bins(&self) -> usize {
        self.cfg.n_bins()
    }

    fn forward_scale(&self) -> f32 {
        if self.cfg.orthonormal {
            1.0 / (self.cfg.window_len as f32).sqrt()
        } else {
            1.0
        }
    }

    fn inverse_scale(&self) -> f32 {
        if self.cfg.orthonormal {
            1.0 / (self.cfg.window_len as f32).sqrt()
        } else {
            1.0 / self.cfg.window_len as f32
        }
    }

    /// Uncompressed spectrum of `samples` multiplied by the analysis window.
    pub fn spectrum(&self, samples: &[f32]) -> Result<Vec<Complex32>> {
        if samples.len() != self.cfg.window_len {
            return Err(Error::Shape(format!(
                "expected {} samples, got {}",
                self.cfg.window_len,
                samples.len()
            )));
        }
        ensure_finite(samples, "analysis samples")?;
        let mut buf: Vec<f32> = samples.iter().zip(&self.window).map(|(x, w)| x * w).collect();
        Ok(self.raw_forward(&mut buf))
    }

    /// Forward transform of an already-windowed buffer (clobbers `buf`).
    pub(crate) fn raw_forward(&self, buf: &mut [f32]) -> Vec<Complex32> {
        let mut out = self.forward.make_output_vec();
        self.forward
            .process(buf, &mut out)
            .expect("buffer lengths match the plan");
        let scale = self.forward_scale();
        for z in &mut out {
            *z *= scale;
        }
        out
    }

    /// Inverse transform to a time-domain frame, before synthesis windowing.
    /// The imaginary parts of the DC and Nyquist bins are discarded.
    pub(crate) fn raw_inverse(&self, spectrum: &[Complex32]) -> Vec<f32> {
        let mut buf = spectrum.to_vec();
        buf[0].im = 0.0;
        if let Some(last) = buf.last_mut() {
            last.im = 0.0;
        }
        let mut out = self.inverse.make_output_vec();
        self.inverse
            .process(&mut buf, &mut out)
            .expect("buffer lengths match the plan");
        let scale = self.inverse_scale();
        for x in &mut out {
            *x *= scale;
        }
        out
    }

    /// Windowed, transformed and compressed frame of exactly `window_len`
    /// samples.
    pub fn analyze_frame(&self, samples: &[f32]) -> Result<SpectroFrame> {
        let alpha = self.cfg.compress_alpha;
        let bins = self.spectrum(samples)?.into_iter().map(|z| compress(z, alpha)).collect();
        Ok(SpectroFrame { bins })
    }

    /// Decompressed inverse transform of `frame` multiplied by the synthesis
    /// window: the frame's contribution to the overlap-add sum.
    pub fn synthesis_contribution(&self, frame: &SpectroFrame) -> Result<Vec<f32>> {
        if frame.len() != self.n_bins() {
            return Err(Error::Shape(format!(
                "expected {} bins, got {}",
                self.n_bins(),
                frame.len()
            )));
        }
        if !frame.is_finite() {
            return Err(Error::Data("non-finite spectrogram frame".into()));
        }
        let alpha = self.cfg.compress_alpha;
        let spectrum: Vec<Complex32> = frame.bins.iter().map(|&z| decompress(z, alpha)).collect();
        let mut time = self.raw_inverse(&spectrum);
        for (x, s) in time.iter_mut().zip(&self.synth_window) {
            *x *= s;
        }
        Ok(time)
    }

    /// Overlap-adds one frame into `state` and emits the `hop_len` samples
    /// that no later frame can touch any more.
    pub fn synthesize_frame_streaming(&self, frame: &SpectroFrame, state: &mut SynthState) -> Result<Vec<f32>> {
        if state.acc.len() != self.cfg.window_len {
            return Err(Error::Usage("synthesis state not initialized for this config".into()));
        }
        let contribution = self.synthesis_contribution(frame)?;
        for (a, c) in state.acc.iter_mut().zip(&contribution) {
            *a += c;
        }
        let hop = self.cfg.hop_len;
        let out = state.acc[..hop].to_vec();
        state.acc.copy_within(hop.., 0);
        let n = state.acc.len();
        state.acc[n - hop..].fill(0.0);
        Ok(out)
    }

    /// Frames starting at `t * hop_len` for every full window inside `signal`.
    pub fn analyze(&self, signal: &[f32]) -> Result<Vec<SpectroFrame>> {
        let n = self.cfg.window_len;
        if signal.len() < n {
            return Ok(Vec::new());
        }
        (0..=(signal.len() - n) / self.cfg.hop_len)
            .map(|t| {
                let start = t * self.cfg.hop_len;
                self.analyze_frame(&signal[start..start + n])
            })
            .collect()
    }

    /// Frames as a live stream would produce them: `window_len - hop_len`
    /// zeros of history before the first sample, and the tail zero-padded to
    /// a whole hop. Frame `t` ends at sample `(t + 1) * hop_len`.
    pub fn analyze_stream(&self, signal: &[f32]) -> Result<Vec<SpectroFrame>> {
        let hop = self.cfg.hop_len;
        let frames = signal.len().div_ceil(hop);
        let mut padded = vec![0.0; self.cfg.warmup_len()];
        padded.extend_from_slice(signal);
        padded.resize(self.cfg.warmup_len() + frames * hop, 0.0);
        self.analyze(&padded)
    }

    /// Offline overlap-add of a whole frame sequence; returns
    /// `(T - 1) * hop_len + window_len` samples.
    pub fn synthesize(&self, frames: &[SpectroFrame]) -> Result<Vec<f32>> {
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        let hop = self.cfg.hop_len;
        let mut out = vec![0.0; (frames.len() - 1) * hop + self.cfg.window_len];
        for (t, frame) in frames.iter().enumerate() {
            let contribution = self.synthesis_contribution(frame)?;
            for (o, c) in out[t * hop..].iter_mut().zip(&contribution) {
                *o += c;
            }
        }
        Ok(out)
    }

    /// Streaming synthesis of a whole sequence: `T * hop_len` samples, the
    /// first `warmup_len()` of which are warm-up.
    pub fn synthesize_stream(&self, frames: &[SpectroFrame]) -> Result<Vec<f32>> {
        let mut state = SynthState::new(&self.cfg);
        let mut out = Vec::with_capacity(frames.len() * self.cfg.hop_len);
        for frame in frames {
            out.extend(self.synthesize_frame_streaming(frame, &mut state)?);
        }
        Ok(out)
    }
}

/// `window[n] / sum_k window[n + k*hop - j*hop]^2`: the least-squares
/// synthesis window for a steady stream of frames.
fn synthesis_window(window: &[f32], hop: usize) -> Result<Vec<f32>> {
    let n = window.len();
    let denom: Vec<f64> = (0..hop)
        .map(|m| (m..n).step_by(hop).map(|i| (window[i] as f64).powi(2)).sum())
        .collect();
    if let Some(m) = denom.iter().position(|&d| d <= 1e-12) {
        return Err(Error::Config(format!(
            "window violates the overlap-add condition at offset {m}"
        )));
    }
    Ok(window
        .iter()
        .enumerate()
        .map(|(i, &w)| (w as f64 / denom[i % hop]) as f32)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stft() -> Stft {
        Stft::new(StftConfig::default()).unwrap()
    }

    fn sine(freq: f32, len: usize, sr: f32) -> Vec<f32> {
        (0..len)
            .map(|n| (2.0 * std::f32::consts::PI * freq * n as f32 / sr).sin())
            .collect()
    }

    #[test]
    fn zero_samples_give_zero_frame() {
        let frame = stft().analyze_frame(&[0.0; 512]).unwrap();
        assert_eq!(frame.len(), 257);
        assert!(frame.bins.iter().all(|z| z.re == 0.0 && z.im == 0.0));
    }

    #[test]
    fn dc_input_matches_direct_dft() {
        let s = stft();
        let frame = s.analyze_frame(&[1.0; 512]).unwrap();
        let w = periodic_hann(512);
        // Direct DFT sum of the windowed constant, orthonormal scaling.
        for k in 0..257 {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (n, &wn) in w.iter().enumerate() {
                let phi = -2.0 * std::f64::consts::PI * (k * n) as f64 / 512.0;
                re += wn as f64 * phi.cos();
                im += wn as f64 * phi.sin();
            }
            let mag = (re * re + im * im).sqrt() / 512f64.sqrt();
            let got = (frame.bins[k].norm() as f64).powi(2);
            assert!((got - mag).abs() < 1e-5, "bin {k}: {got} vs {mag}");
        }
        let sum_w: f64 = w.iter().map(|&x| x as f64).sum();
        let bin0 = (sum_w / 512f64.sqrt()).powf(0.5);
        assert!((frame.bins[0].re as f64 - bin0).abs() < 1e-5);
    }

    #[test]
    fn alpha_half_is_square_root_of_alpha_one() {
        let x = sine(300.0, 512, 16000.0);
        let half = stft();
        let one = Stft::new(StftConfig { compress_alpha: 1.0, ..Default::default() }).unwrap();
        let a = half.analyze_frame(&x).unwrap();
        let b = one.analyze_frame(&x).unwrap();
        for (za, zb) in a.bins.iter().zip(&b.bins) {
            assert!((za.norm() - zb.norm().sqrt()).abs() < 1e-5);
            if zb.norm() > 1e-3 {
                assert!((za.arg() - zb.arg()).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn wrong_sample_count_and_nan_are_rejected() {
        let s = stft();
        assert!(matches!(s.analyze_frame(&[0.0; 511]), Err(Error::Shape(_))));
        let mut x = vec![0.0; 512];
        x[3] = f32::NAN;
        assert!(matches!(s.analyze_frame(&x), Err(Error::Data(_))));
    }

    #[test]
    fn sine_round_trip_through_streaming_synthesis() {
        let s = stft();
        let x = sine(440.0, 16000, 16000.0);
        let frames = s.analyze_stream(&x).unwrap();
        let y = s.synthesize_stream(&frames).unwrap();
        let warm = s.config().warmup_len();
        let mut max_err = 0.0f32;
        for i in 512..x.len() - 512 {
            max_err = max_err.max((y[i + warm] - x[i]).abs());
        }
        assert!(max_err < 1e-5, "max error {max_err}");
    }

    #[test]
    fn streaming_matches_offline_synthesis() {
        let s = stft();
        let x: Vec<f32> = (0..4000).map(|i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5).collect();
        let frames = s.analyze_stream(&x).unwrap();
        let streamed = s.synthesize_stream(&frames).unwrap();
        let offline = s.synthesize(&frames).unwrap();
        assert_eq!(streamed.len(), frames.len() * 256);
        assert_eq!(&offline[..streamed.len()], &streamed[..]);
    }

    #[test]
    fn zero_frames_give_silence_and_single_frame_decays() {
        let s = stft();
        let mut state = SynthState::new(s.config());
        let zero = SpectroFrame::zeros(257);
        for _ in 0..3 {
            assert!(s.synthesize_frame_streaming(&zero, &mut state).unwrap().iter().all(|&v| v == 0.0));
        }
        let x = sine(1000.0, 512, 16000.0);
        let burst = s.analyze_frame(&x).unwrap();
        let mut state = SynthState::new(s.config());
        let first = s.synthesize_frame_streaming(&burst, &mut state).unwrap();
        assert!(first.iter().any(|&v| v != 0.0));
        let mut emitted = 256;
        loop {
            let out = s.synthesize_frame_streaming(&zero, &mut state).unwrap();
            emitted += 256;
            if emitted > 512 {
                assert!(out.iter().all(|&v| v == 0.0));
                break;
            }
        }
        assert!(state.pending().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uninitialized_state_is_a_usage_error() {
        let s = stft();
        let mut state = SynthState::default();
        let err = s.synthesize_frame_streaming(&SpectroFrame::zeros(257), &mut state);
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn orthonormal_transform_preserves_energy() {
        let s = Stft::new(StftConfig { compress_alpha: 1.0, ..Default::default() }).unwrap();
        let x: Vec<f32> = (0..512).map(|i| ((i as f32) * 0.37).sin() + 0.2 * ((i * i) as f32 * 0.01).cos()).collect();
        let spec = s.spectrum(&x).unwrap();
        let two_sided: f64 = spec
            .iter()
            .enumerate()
            .map(|(k, z)| {
                let e = z.norm_sqr() as f64;
                if k == 0 || k == 256 { e } else { 2.0 * e }
            })
            .sum();
        let time: f64 = x.iter().zip(s.window()).map(|(a, w)| ((a * w) as f64).powi(2)).sum();
        assert!((two_sided - time).abs() / time < 1e-5);
    }

    #[test]
    fn latency_examples() {
        let r = latency_report(&StftConfig::default());
        assert_eq!(r.algorithmic_latency_ms, 32.0);
        assert_eq!(r.total_latency_ms, 48.0);
        assert_eq!(r.per_frame_budget_ms, 16.0);
        let r = latency_report(&StftConfig { window_len: 1024, hop_len: 256, ..Default::default() });
        assert_eq!(r.algorithmic_latency_ms, 64.0);
        assert_eq!(r.total_latency_ms, 80.0);
        let r = latency_report(&StftConfig { sample_rate: 48_000, window_len: 1536, hop_len: 768, ..Default::default() });
        assert_eq!(r.hop_ms, 16.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            StftConfig { window_len: 511, ..Default::default() },
            StftConfig { hop_len: 300, ..Default::default() },
            StftConfig { compress_alpha: 0.0, ..Default::default() },
            StftConfig { compress_alpha: 1.5, ..Default::default() },
        ] {
            assert!(Stft::new(cfg).is_err());
        }
    }

    #[test]
    fn zero_magnitude_has_zero_phase_after_compression() {
        let z = compress(Complex32::new(0.0, 0.0), 0.5);
        assert_eq!(z, Complex32::new(0.0, 0.0));
    }

    proptest::proptest! {
        #[test]
        fn decompress_inverts_compress(re in -100.0f32..100.0, im in -100.0f32..100.0, alpha in 0.25f32..=1.0) {
            let z = Complex32::new(re, im);
            proptest::prop_assume!(z.norm() > 1e-6);
            let back = decompress(compress(z, alpha), alpha);
            proptest::prop_assert!((back - z).norm() <= 1e-6 * z.norm());
        }

        #[test]
        fn every_frame_emits_one_hop(values in proptest::collection::vec(-1.0f32..1.0, 257 * 2)) {
            let s = stft();
            let mut state = SynthState::new(s.config());
            let frame = SpectroFrame {
                bins: values.chunks(2).map(|c| Complex32::new(c[0], c[1])).collect(),
            };
            let out = s.synthesize_frame_streaming(&frame, &mut state).unwrap();
            proptest::prop_assert_eq!(out.len(), 256);
        }
    }
}
