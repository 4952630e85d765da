//! Euler flow-matching sampler, offline and streaming.
//!
//! Both modes start from `Y0 = corrupted + sigma_y * eps` and apply `N`
//! updates `Y <- Y + dtau * f(Y, n * dtau)`. The streaming mode keeps one
//! [`NetState`] per call so a frame can run through all `N` calls as soon as
//! it arrives.

use std::sync::Arc;
use std::time::Instant;

use num_complex::Complex32;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{SpectroFrame, Stft, StftConfig, SynthState};
use crate::error::{Error, Result};
use crate::mel::MelOperator;
use crate::net::{FeatureMap, Net, NetState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub n_steps: usize,
    pub sigma_y: f32,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { n_steps: 5, sigma_y: 0.25, seed: 0 }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        if !(self.sigma_y.is_finite() && self.sigma_y >= 0.0) {
            return Err(Error::Config(format!("sigma_y must be finite and nonnegative, got {}", self.sigma_y)));
        }
        Ok(())
    }

    pub fn delta_tau(&self) -> f64 {
        1.0 / self.n_steps as f64
    }

    /// Diffusion time of call `n` (0-based): `n * dtau`.
    pub fn tau(&self, n: usize) -> f32 {
        (n as f64 * self.delta_tau()) as f32
    }

    pub fn tau_schedule(&self) -> Vec<f32> {
        (0..self.n_steps).map(|n| self.tau(n)).collect()
    }
}

/// Standard Gaussian noise for frame `t`: a ChaCha8 stream keyed by
/// `(seed, t)`, real then imaginary part for each bin in turn.
pub fn frame_noise(seed: u64, t: u64, n_bins: usize) -> Vec<Complex32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t);
    (0..n_bins)
        .map(|_| {
            let re: f32 = StandardNormal.sample(&mut rng);
            let im: f32 = StandardNormal.sample(&mut rng);
            Complex32::new(re, im)
        })
        .collect()
}

/// Sampler state of one frame, held in f64 between calls.
#[derive(Debug, Clone)]
struct FlowFrame {
    re: Vec<f64>,
    im: Vec<f64>,
}

impl FlowFrame {
    fn start(corrupted: &SpectroFrame, sigma: f32, seed: u64, t: u64) -> Self {
        let n = corrupted.len();
        let mut re = Vec::with_capacity(n);
        let mut im = Vec::with_capacity(n);
        if sigma == 0.0 {
            re.extend(corrupted.bins.iter().map(|z| z.re as f64));
            im.extend(corrupted.bins.iter().map(|z| z.im as f64));
        } else {
            for (z, e) in corrupted.bins.iter().zip(frame_noise(seed, t, n)) {
                re.push((z.re + sigma * e.re) as f64);
                im.push((z.im + sigma * e.im) as f64);
            }
        }
        Self { re, im }
    }

    /// Two channels (re, im), zero beyond the spectrum's bins.
    fn encode(&self, freq: usize) -> FeatureMap {
        let mut x = FeatureMap::zeros(2, freq);
        let n = self.re.len();
        for (d, s) in x.channel_mut(0)[..n].iter_mut().zip(&self.re) {
            *d = *s as f32;
        }
        for (d, s) in x.channel_mut(1)[..n].iter_mut().zip(&self.im) {
            *d = *s as f32;
        }
        x
    }

    /// Euler update with the velocity's real bins; padding bins of the
    /// velocity are dropped, so the state stays zero there.
    fn step(&mut self, v: &FeatureMap, dt: f64) {
        for (y, &v) in self.re.iter_mut().zip(v.channel(0)) {
            *y += dt * v as f64;
        }
        for (y, &v) in self.im.iter_mut().zip(v.channel(1)) {
            *y += dt * v as f64;
        }
    }

    fn to_frame(&self) -> SpectroFrame {
        SpectroFrame {
            bins: self.re.iter().zip(&self.im).map(|(&r, &i)| Complex32::new(r as f32, i as f32)).collect(),
        }
    }
}

fn check_net(net: &Net, n_bins: usize) -> Result<()> {
    let spec = net.spec();
    if spec.in_channels != 2 || spec.out_channels != 2 {
        return Err(Error::Config(format!(
            "flow network must map 2 channels to 2, has {} -> {}",
            spec.in_channels, spec.out_channels
        )));
    }
    if spec.freq_bins < n_bins {
        return Err(Error::Config(format!("network covers {} bins, spectrum has {n_bins}", spec.freq_bins)));
    }
    Ok(())
}

fn check_frame(frame: &SpectroFrame, n_bins: usize) -> Result<()> {
    if frame.len() != n_bins {
        return Err(Error::Shape(format!("frame has {} bins, expected {n_bins}", frame.len())));
    }
    if !frame.is_finite() {
        return Err(Error::Data("non-finite corrupted frame".into()));
    }
    Ok(())
}

/// Runs the whole sampler over a full sequence, one network pass per call.
pub fn sample_offline(net: &Net, corrupted: &[SpectroFrame], cfg: &FlowConfig) -> Result<Vec<SpectroFrame>> {
    cfg.validate()?;
    let Some(first) = corrupted.first() else {
        return Ok(Vec::new());
    };
    let n_bins = first.len();
    check_net(net, n_bins)?;
    for f in corrupted {
        check_frame(f, n_bins)?;
    }
    let mut ys: Vec<FlowFrame> = corrupted
        .iter()
        .enumerate()
        .map(|(t, f)| FlowFrame::start(f, cfg.sigma_y, cfg.seed, t as u64))
        .collect();
    let dt = cfg.delta_tau();
    for n in 0..cfg.n_steps {
        let x: Vec<FeatureMap> = ys.iter().map(|y| y.encode(net.freq_bins())).collect();
        let v = net.forward_offline(&x, cfg.tau(n))?;
        for (y, v) in ys.iter_mut().zip(&v) {
            y.step(v, dt);
        }
    }
    Ok(ys.iter().map(FlowFrame::to_frame).collect())
}

/// Offline counterpart of a streaming session: Mel frames in, waveform out,
/// `T * hop_len` samples aligned like the streaming output.
pub fn vocode_offline(
    net: &Net,
    mel_frames: &[Vec<f32>],
    cfg: &FlowConfig,
    stft: &Stft,
    mel_op: &MelOperator,
) -> Result<Vec<f32>> {
    let corrupted = mel_frames.iter().map(|m| mel_op.pinv_decode_frame(m)).collect::<Result<Vec<_>>>()?;
    stft.synthesize_stream(&sample_offline(net, &corrupted, cfg)?)
}

/// Zero-phase pseudoinverse baseline: `iSTFT(|M^+ mel| + 0j)`.
pub fn zero_phase_baseline(mel_frames: &[Vec<f32>], stft: &Stft, mel_op: &MelOperator) -> Result<Vec<f32>> {
    let frames = mel_frames.iter().map(|m| mel_op.pinv_decode_frame(m)).collect::<Result<Vec<_>>>()?;
    stft.synthesize_stream(&frames)
}

/// Total past frames influencing a streamed output frame: `N * R`.
pub fn effective_receptive_field(net: &Net, cfg: &FlowConfig) -> usize {
    cfg.n_steps * net.receptive_field()
}

/// One network state per diffusion call.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheBank {
    states: Vec<NetState>,
}

impl CacheBank {
    pub fn new(net: &Net, n_steps: usize) -> Self {
        Self { states: (0..n_steps).map(|_| net.new_state()).collect() }
    }

    pub fn states(&self) -> &[NetState] {
        &self.states
    }

    /// Number of layer caches across all calls (`N * L`).
    pub fn cache_count(&self) -> usize {
        self.states.iter().map(|s| s.caches().len()).sum()
    }

    pub fn cached_values(&self) -> usize {
        self.states.iter().map(NetState::cached_values).sum()
    }
}

/// Wall-clock cost of one streamed frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameTiming {
    pub frame: u64,
    pub call_ms: Vec<f64>,
    pub total_ms: f64,
}

impl FrameTiming {
    /// `frame call_ms... total_ms`, space separated.
    pub fn report_line(&self) -> String {
        let mut line = self.frame.to_string();
        for ms in &self.call_ms {
            line.push_str(&format!(" {ms:.4}"));
        }
        line.push_str(&format!(" {:.4}", self.total_ms));
        line
    }
}

/// One live audio stream: Mel frames in, `hop_len` samples out per frame.
#[derive(Debug, Clone)]
pub struct StreamSession {
    net: Arc<Net>,
    flow: FlowConfig,
    stft: Stft,
    mel: Arc<MelOperator>,
    bank: CacheBank,
    synth: SynthState,
    frame: u64,
    last_timing: FrameTiming,
}

/// Opens a session. `seed` overrides `flow_cfg.seed`.
pub fn new_session(
    net: Arc<Net>,
    flow_cfg: FlowConfig,
    stft_cfg: StftConfig,
    mel_op: Arc<MelOperator>,
    seed: u64,
) -> Result<StreamSession> {
    flow_cfg.validate()?;
    let stft = Stft::new(stft_cfg)?;
    if mel_op.n_stft() != stft.n_bins() {
        return Err(Error::Config(format!(
            "mel operator expects {} bins, STFT has {}",
            mel_op.n_stft(),
            stft.n_bins()
        )));
    }
    check_net(&net, stft.n_bins())?;
    if !net.is_causal() {
        return Err(Error::Config("streaming needs a frame-causal network".into()));
    }
    let flow = FlowConfig { seed, ..flow_cfg };
    let bank = CacheBank::new(&net, flow.n_steps);
    let synth = SynthState::new(stft.config());
    Ok(StreamSession { net, flow, stft, mel: mel_op, bank, synth, frame: 0, last_timing: FrameTiming::default() })
}

impl StreamSession {
    pub fn flow_config(&self) -> &FlowConfig {
        &self.flow
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn bank(&self) -> &CacheBank {
        &self.bank
    }

    pub fn frames_processed(&self) -> u64 {
        self.frame
    }

    pub fn last_timing(&self) -> &FrameTiming {
        &self.last_timing
    }

    /// Runs one corrupted frame through all `N` calls and returns `Y_N[t]`.
    pub fn enhance_frame(&mut self, corrupted: &SpectroFrame) -> Result<SpectroFrame> {
        check_frame(corrupted, self.stft.n_bins())?;
        let start = Instant::now();
        let mut y = FlowFrame::start(corrupted, self.flow.sigma_y, self.flow.seed, self.frame);
        let dt = self.flow.delta_tau();
        let freq = self.net.freq_bins();
        let mut call_ms = Vec::with_capacity(self.flow.n_steps);
        for (n, state) in self.bank.states.iter_mut().enumerate() {
            let t0 = Instant::now();
            let v = self.net.forward_stream_step(state, &y.encode(freq), self.flow.tau(n))?;
            y.step(&v, dt);
            call_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        self.last_timing =
            FrameTiming { frame: self.frame, call_ms, total_ms: start.elapsed().as_secs_f64() * 1e3 };
        self.frame += 1;
        Ok(y.to_frame())
    }

    /// Mel frame in, `hop_len` samples out.
    pub fn stream_step(&mut self, mel: &[f32]) -> Result<Vec<f32>> {
        let start = Instant::now();
        let corrupted = self.mel.pinv_decode_frame(mel)?;
        let x = self.enhance_frame(&corrupted)?;
        let out = self.stft.synthesize_frame_streaming(&x, &mut self.synth)?;
        self.last_timing.total_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(out)
    }
}
