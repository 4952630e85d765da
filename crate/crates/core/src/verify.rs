//! Equivalence and causality probes shared by `melvoc verify` and the test
//! suites.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::{SpectroFrame, Stft, StftConfig};
use crate::error::Result;
use crate::flow::{new_session, sample_offline, vocode_offline, FlowConfig};
use crate::mel::MelOperator;
use crate::net::{FeatureMap, Net};

/// `frames` Gaussian feature maps of the network's input shape.
pub fn random_input(net: &Net, frames: usize, seed: u64) -> Vec<FeatureMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, f) = (net.in_channels(), net.freq_bins());
    (0..frames)
        .map(|_| FeatureMap { channels: c, freq: f, data: (0..c * f).map(|_| StandardNormal.sample(&mut rng)).collect() })
        .collect()
}

/// Size of the probe perturbation. Frames outside the receptive field are
/// computed bitwise identically whatever its size, so it is made large
/// enough for contributions along the longest edge-tap paths (nested over
/// `N` sampler steps) to survive f32 rounding.
pub const PROBE: f32 = 1e20;

fn bump(frame: &mut FeatureMap) {
    frame.data.iter_mut().for_each(|v| *v += PROBE);
}

/// Perturbs input frame `at` and returns the first earlier output frame
/// that changed, if any (bitwise comparison).
pub fn causality_violation(net: &Net, input: &[FeatureMap], at: usize, tau: f32) -> Result<Option<usize>> {
    let base = net.forward_offline(input, tau)?;
    let mut x = input.to_vec();
    bump(&mut x[at]);
    let pert = net.forward_offline(&x, tau)?;
    Ok((0..at).find(|&t| base[t] != pert[t]))
}

/// Whether output frame `t` changes when input frame `src` is perturbed.
pub fn influences(net: &Net, input: &[FeatureMap], src: usize, t: usize, tau: f32) -> Result<bool> {
    let base = net.forward_offline(&input[..=t], tau)?;
    let mut x = input[..=t].to_vec();
    bump(&mut x[src]);
    Ok(net.forward_offline(&x, tau)?[t] != base[t])
}

/// Maximum absolute difference between streamed and offline outputs.
pub fn stream_offline_deviation(net: &Net, input: &[FeatureMap], tau: f32) -> Result<f32> {
    let offline = net.forward_offline(input, tau)?;
    let mut state = net.new_state();
    let mut worst = 0.0f32;
    for (x, y) in input.iter().zip(&offline) {
        worst = worst.max(net.forward_stream_step(&mut state, x, tau)?.max_abs_diff(y));
    }
    Ok(worst)
}

/// Mel frames of a deterministic test signal lasting `frames` hops.
pub fn test_mels(stft: &Stft, mel_op: &MelOperator, frames: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
    let cfg = stft.config();
    let signal = crate::signals::harmonic_corpus(frames * cfg.hop_len, cfg.sample_rate, seed);
    stft.analyze_stream(&signal)?.iter().map(|f| mel_op.mel_frame(f)).collect()
}

/// Maximum absolute waveform difference between a streaming session and
/// offline vocoding of the same Mel frames.
pub fn flow_stream_offline_deviation(
    net: Arc<Net>,
    mels: &[Vec<f32>],
    flow: &FlowConfig,
    stft_cfg: &StftConfig,
    mel_op: Arc<MelOperator>,
) -> Result<f32> {
    let stft = Stft::new(stft_cfg.clone())?;
    let offline = vocode_offline(&net, mels, flow, &stft, &mel_op)?;
    let mut session = new_session(net, flow.clone(), stft_cfg.clone(), mel_op, flow.seed)?;
    let mut worst = 0.0f32;
    let mut pos = 0;
    for m in mels {
        for s in session.stream_step(m)? {
            worst = worst.max((s - offline[pos]).abs());
            pos += 1;
        }
    }
    Ok(worst)
}

/// Whether output frame `t` of offline sampling changes when corrupted
/// frame `src` is perturbed.
pub fn flow_influences(net: &Net, corrupted: &[SpectroFrame], cfg: &FlowConfig, src: usize, t: usize) -> Result<bool> {
    let base = sample_offline(net, &corrupted[..=t], cfg)?;
    let mut x = corrupted[..=t].to_vec();
    x[src].bins.iter_mut().for_each(|z| z.re += PROBE);
    Ok(sample_offline(net, &x, cfg)?[t] != base[t])
}
