//! Deterministic synthetic test signals.

use std::f64::consts::TAU;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn sine(freq: f64, len: usize, sample_rate: u32, amplitude: f32) -> Vec<f32> {
    (0..len)
        .map(|i| amplitude * (TAU * freq * i as f64 / sample_rate as f64).sin() as f32)
        .collect()
}

/// Linear chirp from `f0` to `f1` Hz over the signal.
pub fn chirp(f0: f64, f1: f64, len: usize, sample_rate: u32, amplitude: f32) -> Vec<f32> {
    let dur = len as f64 / sample_rate as f64;
    (0..len)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            amplitude * (TAU * (f0 * t + 0.5 * (f1 - f0) / dur * t * t)).sin() as f32
        })
        .collect()
}

/// Gaussian noise with a speech-like spectral tilt and a 4 Hz syllabic
/// envelope.
pub fn speech_shaped_noise(len: usize, sample_rate: u32, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lp = 0.0f64;
    let mut prev = 0.0f64;
    (0..len)
        .map(|i| {
            let e: f64 = StandardNormal.sample(&mut rng);
            // One-pole low-pass plus a little pre-emphasis keeps some high band.
            lp = 0.9 * lp + e;
            let y = lp - 0.5 * prev;
            prev = lp;
            let t = i as f64 / sample_rate as f64;
            let env = 0.6 + 0.4 * (TAU * 4.0 * t).sin();
            (0.05 * env * y) as f32
        })
        .collect()
}

/// Sequence of voiced notes: harmonic tones with gliding pitch, `1/k`
/// harmonic amplitudes and smooth on/off envelopes.
pub fn harmonic_corpus(len: usize, sample_rate: u32, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let mut out = vec![0.0f32; len];
    let mut start = 0usize;
    while start < len {
        let note = ((rng.random_range(0.25..0.6) * sr) as usize).min(len - start);
        let f_start: f64 = rng.random_range(100.0..250.0);
        let f_end = f_start * rng.random_range(0.8..1.25);
        let harmonics = rng.random_range(4..10);
        let mut phase = 0.0f64;
        for n in 0..note {
            let frac = n as f64 / note as f64;
            let f0 = f_start + (f_end - f_start) * frac;
            phase += TAU * f0 / sr;
            let env = (std::f64::consts::PI * frac).sin().powf(0.5);
            let mut v = 0.0;
            for k in 1..=harmonics {
                if f0 * k as f64 >= 0.45 * sr {
                    break;
                }
                v += (k as f64 * phase).sin() / k as f64;
            }
            out[start + n] = (0.2 * env * v) as f32;
        }
        start += note;
    }
    out
}
