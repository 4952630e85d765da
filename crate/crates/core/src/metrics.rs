//! Intrusive quality metrics: SI-SDR, log-spectral distance and
//! Mel-cepstral distortion. Computed in f64 throughout.

use std::collections::BTreeMap;

use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::mel::{mel_filterbank, MelConfig};

pub const SI_SDR_CAP_DB: f64 = 60.0;
pub const LSD_EPS: f64 = 1e-8;
pub const MCD_COEFFS: usize = 13;
const LOG_MEL_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub si_sdr: f64,
    pub lsd: f64,
    pub mcd: f64,
    pub frames_compared: usize,
    /// Values from external tools (PESQ, ESTOI, ...) merged in by name.
    #[serde(default)]
    pub external: BTreeMap<String, f64>,
}

fn check_pair(reference: &[f32], estimate: &[f32]) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(Error::Shape(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.iter().chain(estimate).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite samples".into()));
    }
    if reference.iter().all(|&v| v == 0.0) {
        return Err(Error::UndefinedMetric("reference is silent".into()));
    }
    Ok(())
}

/// Scale-invariant SDR in dB, capped at [`SI_SDR_CAP_DB`].
pub fn si_sdr(reference: &[f32], estimate: &[f32]) -> Result<f64> {
    check_pair(reference, estimate)?;
    let dot: f64 = reference.iter().zip(estimate).map(|(&a, &b)| a as f64 * b as f64).sum();
    let ref_energy: f64 = reference.iter().map(|&a| (a as f64).powi(2)).sum();
    let scale = dot / ref_energy;
    let target_energy = scale * scale * ref_energy;
    let noise_energy: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(&a, &b)| (b as f64 - scale * a as f64).powi(2))
        .sum();
    if target_energy == 0.0 {
        return Err(Error::UndefinedMetric("estimate has no component along the reference".into()));
    }
    if noise_energy == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target_energy / noise_energy).log10()).min(SI_SDR_CAP_DB))
}

/// Uncompressed magnitude spectrogram (periodic Hann), frames at `t * hop` fully inside the
/// signal.
pub fn magnitude_frames(signal: &[f32], cfg: &StftConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let n = cfg.window_len;
    if signal.len() < n {
        return Err(Error::Shape(format!("need at least {n} samples, got {}", signal.len())));
    }
    let window: Vec<f64> =
        (0..n).map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos()).collect();
    let scale = if cfg.orthonormal { 1.0 / (n as f64).sqrt() } else { 1.0 };
    let fft = RealFftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = fft.make_input_vec();
    let mut spec = fft.make_output_vec();
    let frames = (signal.len() - n) / cfg.hop_len + 1;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let seg = &signal[t * cfg.hop_len..t * cfg.hop_len + n];
        for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = s as f64 * w;
        }
        fft.process(&mut buf, &mut spec).expect("buffer lengths match the plan");
        out.push(spec.iter().map(|z| z.norm() * scale).collect());
    }
    Ok(out)
}

/// Log-spectral distance in dB: RMS over frames of the per-frame RMS
/// difference of `20 log10` magnitudes.
pub fn lsd(reference: &[f32], estimate: &[f32], stft_cfg: &StftConfig) -> Result<f64> {
    check_pair(reference, estimate)?;
    let a = magnitude_frames(reference, stft_cfg)?;
    let b = magnitude_frames(estimate, stft_cfg)?;
    let per_frame_sq = a.iter().zip(&b).map(|(x, y)| {
        x.iter()
            .zip(y)
            .map(|(&p, &q)| (20.0 * (p.max(LSD_EPS) / q.max(LSD_EPS)).log10()).powi(2))
            .sum::<f64>()
            / x.len() as f64
    });
    Ok((per_frame_sq.sum::<f64>() / a.len() as f64).sqrt())
}

/// Orthonormal DCT-II coefficients `1..=count` of `x`.
fn dct_coeffs(x: &[f64], count: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (1..=count)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (std::f64::consts::PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos())
                .sum();
            s * (2.0 / n).sqrt()
        })
        .collect()
}

/// Mel cepstra (coefficients `1..=MCD_COEFFS`, natural-log Mel energies).
pub fn mel_cepstra(signal: &[f32], mel_cfg: &MelConfig, stft_cfg: &StftConfig) -> Result<Vec<Vec<f64>>> {
    let frames = magnitude_frames(signal, stft_cfg)?;
    let fb = mel_filterbank(mel_cfg, stft_cfg.sample_rate, stft_cfg.n_bins());
    Ok(frames
        .iter()
        .map(|mag| {
            let log_mel: Vec<f64> = (0..fb.rows)
                .map(|r| {
                    let e: f64 = fb.row(r).iter().zip(mag).map(|(&w, &m)| w as f64 * m * m).sum();
                    e.max(LOG_MEL_FLOOR).ln()
                })
                .collect();
            dct_coeffs(&log_mel, MCD_COEFFS)
        })
        .collect())
}

/// Mean over frames of `(10 / ln 10) * sqrt(2 * sum_d (c_d - c'_d)^2)`.
pub fn mcd(reference: &[f32], estimate: &[f32], mel_cfg: &MelConfig, stft_cfg: &StftConfig) -> Result<f64> {
    check_pair(reference, estimate)?;
    let a = mel_cepstra(reference, mel_cfg, stft_cfg)?;
    let b = mel_cepstra(estimate, mel_cfg, stft_cfg)?;
    let k = 10.0 / std::f64::consts::LN_10 * std::f64::consts::SQRT_2;
    let total: f64 = a
        .iter()
        .zip(&b)
        .map(|(x, y)| k * x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / a.len() as f64)
}

/// All three metrics on equal-length signals.
pub fn evaluate(
    reference: &[f32],
    estimate: &[f32],
    stft_cfg: &StftConfig,
    mel_cfg: &MelConfig,
) -> Result<MetricReport> {
    Ok(MetricReport {
        version: 1,
        si_sdr: si_sdr(reference, estimate)?,
        lsd: lsd(reference, estimate, stft_cfg)?,
        mcd: mcd(reference, estimate, mel_cfg, stft_cfg)?,
        frames_compared: magnitude_frames(reference, stft_cfg)?.len(),
        external: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tone(f: f64, len: usize, phase: f64) -> Vec<f32> {
        (0..len).map(|i| (std::f64::consts::TAU * f * i as f64 / 16_000.0 + phase).sin() as f32).collect()
    }

    fn noise(len: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn si_sdr_examples() {
        let x = tone(440.0, 16_000, 0.0);
        assert_eq!(si_sdr(&x, &x).unwrap(), 60.0);
        let doubled: Vec<f32> = x.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&x, &doubled).unwrap(), 60.0);
        // 500 Hz over one second: sine and cosine are orthogonal with equal energy.
        let s = tone(500.0, 16_000, 0.0);
        let c = tone(500.0, 16_000, std::f64::consts::FRAC_PI_2);
        let est: Vec<f32> = s.iter().zip(&c).map(|(a, b)| a + b).collect();
        assert!(si_sdr(&s, &est).unwrap().abs() < 1e-4);
    }

    #[test]
    fn undefined_cases() {
        assert!(matches!(si_sdr(&[0.0; 8], &[1.0; 8]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(si_sdr(&[1.0; 8], &[0.0; 8]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(si_sdr(&[1.0; 8], &[0.0; 7]), Err(Error::Shape(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn si_sdr_is_scale_invariant(seed in 0u64..1000, c in 0.01f32..100.0) {
            let x = noise(2000, seed);
            let y: Vec<f32> = x.iter().zip(noise(2000, seed + 1)).map(|(a, b)| a + 0.3 * b).collect();
            let scaled: Vec<f32> = y.iter().map(|v| v * c).collect();
            prop_assert!((si_sdr(&x, &y).unwrap() - si_sdr(&x, &scaled).unwrap()).abs() < 1e-3);
        }
    }

    #[test]
    fn lsd_examples() {
        let cfg = StftConfig::default();
        let x = noise(16_000, 1);
        assert_eq!(lsd(&x, &x, &cfg).unwrap(), 0.0);
        let doubled: Vec<f32> = x.iter().map(|v| 2.0 * v).collect();
        assert!((lsd(&x, &doubled, &cfg).unwrap() - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    /// Direct DFT of every frame, no FFT library.
    fn direct_mags(x: &[f32], cfg: &StftConfig) -> Vec<Vec<f64>> {
        let n = cfg.window_len;
        let w: Vec<f64> =
            (0..n).map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos()).collect();
        (0..=(x.len() - n) / cfg.hop_len)
            .map(|t| {
                let seg: Vec<f64> = (0..n).map(|i| x[t * cfg.hop_len + i] as f64 * w[i]).collect();
                (0..=n / 2)
                    .map(|k| {
                        let (mut re, mut im) = (0.0, 0.0);
                        for (i, &v) in seg.iter().enumerate() {
                            let a = std::f64::consts::TAU * (k * i % n) as f64 / n as f64;
                            re += v * a.cos();
                            im -= v * a.sin();
                        }
                        (re * re + im * im).sqrt() / (n as f64).sqrt()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn lsd_matches_direct_dft() {
        let cfg = StftConfig::default();
        let (a, b) = (noise(16_000, 2), noise(16_000, 3));
        let (ma, mb) = (direct_mags(&a, &cfg), direct_mags(&b, &cfg));
        let mut acc = 0.0;
        for (x, y) in ma.iter().zip(&mb) {
            let s: f64 = x.iter().zip(y).map(|(p, q)| (20.0 * (p.max(1e-8) / q.max(1e-8)).log10()).powi(2)).sum();
            acc += s / x.len() as f64;
        }
        let oracle = (acc / ma.len() as f64).sqrt();
        let got = lsd(&a, &b, &cfg).unwrap();
        assert!((got - oracle).abs() < 0.05 * oracle, "{got} vs {oracle}");
    }

    #[test]
    fn mcd_matches_brute_force() {
        let (stft_cfg, mel_cfg) = (StftConfig::default(), MelConfig::default());
        let a = tone(440.0, 4000, 0.0);
        let b = tone(452.0, 4000, 0.3);
        let fb = mel_filterbank(&mel_cfg, 16_000, 257);
        let ceps = |x: &[f32]| -> Vec<Vec<f64>> {
            direct_mags(x, &stft_cfg)
                .iter()
                .map(|m| {
                    let lm: Vec<f64> = (0..80)
                        .map(|r| (0..257).map(|k| fb.get(r, k) as f64 * m[k] * m[k]).sum::<f64>().max(1e-10).ln())
                        .collect();
                    (1..=13)
                        .map(|q| {
                            (2.0f64 / 80.0).sqrt()
                                * (0..80)
                                    .map(|i| lm[i] * (std::f64::consts::PI * q as f64 * (i as f64 + 0.5) / 80.0).cos())
                                    .sum::<f64>()
                        })
                        .collect()
                })
                .collect()
        };
        let (ca, cb) = (ceps(&a), ceps(&b));
        let oracle: f64 = ca
            .iter()
            .zip(&cb)
            .map(|(x, y)| {
                10.0 / 10f64.ln() * (2.0 * x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>()).sqrt()
            })
            .sum::<f64>()
            / ca.len() as f64;
        let got = mcd(&a, &b, &mel_cfg, &stft_cfg).unwrap();
        assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
        assert!(got > 0.0);
        assert_eq!(mcd(&a, &a, &mel_cfg, &stft_cfg).unwrap(), 0.0);
    }

    #[test]
    fn report_serializes() {
        let cfg = StftConfig::default();
        let x = noise(4000, 9);
        let y: Vec<f32> = x.iter().map(|v| v * 0.5 + 0.01).collect();
        let r = evaluate(&x, &y, &cfg, &MelConfig::default()).unwrap();
        assert!(r.si_sdr.is_finite() && r.lsd >= 0.0 && r.mcd >= 0.0);
        assert_eq!(r.frames_compared, (4000 - 512) / 256 + 1);
    }
}
