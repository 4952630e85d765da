//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints its own PASS/FAIL line; the process fails if any gated criterion
//! fails.

use std::sync::Arc;
use std::time::Instant;

use melvoc::dsp::{latency_report, SpectroFrame, Stft, StftConfig};
use melvoc::flow::{effective_receptive_field, new_session, sample_offline, zero_phase_baseline, FlowConfig};
use melvoc::mel::{MelConfig, MelOperator};
use melvoc::metrics::si_sdr;
use melvoc::net::{padded_freq_bins, NetSpec, UNetConfig};
use melvoc::net::{affine_weights, random_weights, single_conv_spec, Net};
use melvoc::phase::{mel_targets, DmConfig, Rtisi};
use melvoc::signals::{harmonic_corpus, speech_shaped_noise};
use melvoc::verify;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Check = fn() -> melvoc::Result<Outcome>;

fn stft_cfg() -> StftConfig {
    StftConfig::default()
}

fn mel_op() -> Arc<MelOperator> {
    Arc::new(MelOperator::build(&MelConfig::default(), &stft_cfg()).unwrap())
}

fn latency() -> melvoc::Result<Outcome> {
    let r = latency_report(&stft_cfg());
    let pass = r.algorithmic_latency_ms == 32.0 && r.total_latency_ms == 48.0;
    Ok(outcome(pass, format!("algorithmic {} ms, total {} ms", r.algorithmic_latency_ms, r.total_latency_ms)))
}

fn random_unet(rng: &mut ChaCha8Rng) -> NetSpec {
    let levels = rng.random_range(1..=3usize);
    let channels: Vec<usize> = (0..levels).map(|_| rng.random_range(2..=8usize)).collect();
    let freq = padded_freq_bins(rng.random_range(6..=20usize), levels);
    UNetConfig {
        in_channels: rng.random_range(1..=3usize),
        freq_bins: freq,
        channels,
        resblocks_per_level: rng.random_range(0..=2usize),
        kernel_time: rng.random_range(1..=4usize),
        kernel_freq: [1, 3, 5][rng.random_range(0..3usize)],
        transition_dilation: rng.random_range(1..=4usize),
        emb_dim: 2 * rng.random_range(1..=4usize),
        bands: rng.random_range(1..=3usize),
    }
    .build_spec()
    .unwrap()
}

fn dilated_stack() -> NetSpec {
    let text = r#"
format = "mfnet1"
in_channels = 2
out_channels = 2
freq_bins = 12
emb_dim = 4

[[op]]
kind = "conv"
name = "a"
in_channels = 2
out_channels = 6
kernel_time = 2
dilation = 1
kernel_freq = 3

[[op]]
kind = "silu"

[[op]]
kind = "save"
slot = 0

[[op]]
kind = "conv"
name = "b"
in_channels = 6
out_channels = 6
kernel_time = 3
dilation = 4
kernel_freq = 3

[[op]]
kind = "time_bias"
name = "t"
channels = 6

[[op]]
kind = "add"
slot = 0
scale = 0.5

[[op]]
kind = "conv"
name = "c"
in_channels = 6
out_channels = 2
kernel_time = 5
dilation = 2
kernel_freq = 1
"#;
    NetSpec::from_toml(text).unwrap()
}

fn toy_specs() -> Vec<NetSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut specs: Vec<NetSpec> = (0..10).map(|_| random_unet(&mut rng)).collect();
    specs.push(dilated_stack());
    specs.push(single_conv_spec(3, 7, 4, 3));
    specs
}

fn stream_equivalence_network() -> melvoc::Result<Outcome> {
    let specs = toy_specs();
    let mut worst = 0.0f32;
    for (i, spec) in specs.iter().enumerate() {
        let net = Net::build(spec.clone(), &random_weights(spec, 100 + i as u64))?;
        let input = verify::random_input(&net, 200, 7 + i as u64);
        for tau in [0.0, 0.6] {
            worst = worst.max(verify::stream_offline_deviation(&net, &input, tau)?);
        }
    }
    Ok(outcome(worst < 1e-5, format!("{} specs x T=200, max deviation {worst:.3e} (< 1e-5)", specs.len())))
}

fn flow_net(seed: u64) -> Arc<Net> {
    let spec = UNetConfig {
        channels: vec![4, 8],
        resblocks_per_level: 1,
        freq_bins: padded_freq_bins(257, 2),
        emb_dim: 8,
        ..Default::default()
    }
    .build_spec()
    .unwrap();
    Arc::new(Net::build(spec.clone(), &random_weights(&spec, seed)).unwrap())
}

fn stream_equivalence_flow() -> melvoc::Result<Outcome> {
    let net = flow_net(3);
    let op = mel_op();
    let stft = Stft::new(stft_cfg())?;
    let mels = verify::test_mels(&stft, &op, 120, 5)?;
    let mut worst = 0.0f32;
    let mut parts = Vec::new();
    for n in [1, 3, 5] {
        let flow = FlowConfig { n_steps: n, sigma_y: 0.25, seed: 9 };
        let d = verify::flow_stream_offline_deviation(net.clone(), &mels, &flow, &stft_cfg(), op.clone())?;
        parts.push(format!("N={n}: {d:.3e}"));
        worst = worst.max(d);
    }
    Ok(outcome(worst < 1e-4, format!("T=120 waveform deviation {} (< 1e-4)", parts.join(", "))))
}

fn causality_and_receptive_field() -> melvoc::Result<Outcome> {
    let mut notes = Vec::new();
    let mut pass = true;

    for (i, spec) in toy_specs().iter().enumerate() {
        let net = Net::build(spec.clone(), &random_weights(spec, 300 + i as u64))?;
        let r = net.receptive_field();
        let t = r + 6;
        let input = verify::random_input(&net, t + 4, 40 + i as u64);
        for at in [t / 2, t] {
            if let Some(bad) = verify::causality_violation(&net, &input, at, 0.3)? {
                pass = false;
                notes.push(format!("spec {i}: frame {bad} depends on future frame {at}"));
            }
        }
        let reaches = verify::influences(&net, &input, t - r, t, 0.3)?;
        let beyond = verify::influences(&net, &input, t - r - 1, t, 0.3)?;
        if !reaches || beyond {
            pass = false;
            notes.push(format!("spec {i}: R={r} not tight (t-R: {reaches}, t-R-1: {beyond})"));
        }
    }

    let spec = UNetConfig { channels: vec![4], resblocks_per_level: 1, freq_bins: 8, emb_dim: 4, ..Default::default() }
        .build_spec()?;
    let net = Net::build(spec.clone(), &random_weights(&spec, 77))?;
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    for n in [1, 3, 5] {
        let cfg = FlowConfig { n_steps: n, sigma_y: 0.0, seed: 0 };
        let span = effective_receptive_field(&net, &cfg);
        let t = span + 3;
        let frames: Vec<SpectroFrame> = (0..=t)
            .map(|_| SpectroFrame::from_magnitudes(&(0..5).map(|_| rng.random_range(0.0..1.0f32)).collect::<Vec<_>>()))
            .collect();
        let reaches = verify::flow_influences(&net, &frames, &cfg, t - span, t)?;
        let beyond = verify::flow_influences(&net, &frames, &cfg, t - span - 1, t)?;
        notes.push(format!("N={n}: N*R={span} reaches {reaches}, beyond {beyond}"));
        pass &= reaches && !beyond;
    }
    Ok(outcome(pass, format!("12 specs causal and tight; {}", notes.join("; "))))
}

fn stft_round_trip() -> melvoc::Result<Outcome> {
    let cfg = stft_cfg();
    let stft = Stft::new(cfg.clone())?;
    let x = speech_shaped_noise(10 * cfg.sample_rate as usize, cfg.sample_rate, 11);
    let n = cfg.window_len;

    let y = stft.synthesize(&stft.analyze(&x)?)?;
    let offline = x[n..x.len() - n].iter().zip(&y[n..]).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);

    let s = stft.synthesize_stream(&stft.analyze_stream(&x)?)?;
    let warm = cfg.warmup_len();
    let streamed = x[n..x.len() - n].iter().zip(&s[warm + n..]).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);

    let worst = offline.max(streamed);
    Ok(outcome(worst < 1e-5, format!("10 s noise, interior error offline {offline:.3e}, streaming {streamed:.3e} (< 1e-5)")))
}

fn mat_mul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..m {
                out[i * m + j] += av * b[p * m + j];
            }
        }
    }
    out
}

fn transpose(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn moore_penrose() -> melvoc::Result<Outcome> {
    let op = mel_op();
    let (r, c) = (op.n_mels(), op.n_stft());
    let m: Vec<f64> = op.forward().data.iter().map(|&v| v as f64).collect();
    let p: Vec<f64> = op.pinv().data.iter().map(|&v| v as f64).collect();
    let mp = mat_mul(&m, &p, r, c, r);
    let pm = mat_mul(&p, &m, c, r, c);
    let e1 = max_diff(&mat_mul(&mp, &m, r, r, c), &m);
    let e2 = max_diff(&mat_mul(&pm, &p, c, c, r), &p);
    let e3 = max_diff(&transpose(&mp, r, r), &mp);
    let e4 = max_diff(&transpose(&pm, c, c), &pm);
    let identities = e1.max(e2).max(e3).max(e4);

    let stft = Stft::new(stft_cfg())?;
    let x = speech_shaped_noise(2 * 16_000, 16_000, 4);
    let frames = stft.analyze(&x)?;
    let (mut idem, mut twice) = (0.0f64, 0.0f64);
    for f in &frames {
        let mel = op.mel_frame(f)?;
        let corrupted = op.corrupt_frame(f)?;
        let back = op.mel_frame(&corrupted)?;
        idem = idem.max(rel_err(&back, &mel));
        let again = op.corrupt_frame(&corrupted)?;
        twice = twice.max(rel_err(&again.magnitudes(), &corrupted.magnitudes()));
    }
    let pass = identities < 1e-4 && idem < 1e-4 && twice < 1e-4;
    Ok(outcome(
        pass,
        format!(
            "{r}x{c}: identities {e1:.2e} {e2:.2e} {e3:.2e} {e4:.2e} (< 1e-4); mel idempotence {idem:.2e}, repeated corruption {twice:.2e} (< 1e-4 relative, worst of {} frames)",
            frames.len()
        ),
    ))
}

fn rel_err(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    let den: f64 = b.iter().map(|y| (*y as f64).powi(2)).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

fn euler_oracle() -> melvoc::Result<Outcome> {
    let spec = single_conv_spec(2, 4, 1, 1);
    let net = Net::build(spec.clone(), &affine_weights(&spec, -1.0, 0.0))?;
    let x = SpectroFrame::from_magnitudes(&[1.0, 0.5, 2.0]);
    let mut worst = 0.0f64;
    for n in 1..=10 {
        let cfg = FlowConfig { n_steps: n, sigma_y: 0.0, seed: 0 };
        let out = sample_offline(&net, std::slice::from_ref(&x), &cfg)?;
        let factor = (1.0 - 1.0 / n as f64).powi(n as i32);
        for (y, x0) in out[0].bins.iter().zip(&x.bins) {
            worst = worst.max((y.re as f64 - factor * x0.re as f64).abs()).max(y.im.abs() as f64);
        }
    }
    let cfg = FlowConfig { n_steps: 5, sigma_y: 0.0, seed: 0 };
    let five = sample_offline(&net, &[SpectroFrame::from_magnitudes(&[1.0])], &cfg)?[0].bins[0].re;
    Ok(outcome(worst < 1e-7, format!("N=1..10 max error {worst:.2e} (< 1e-7); N=5 gives {five} vs 0.8^5 = 0.32768")))
}

fn rtisi_baseline() -> melvoc::Result<Outcome> {
    let cfg = stft_cfg();
    let stft = Stft::new(cfg.clone())?;
    let op = mel_op();
    let x = harmonic_corpus(5 * cfg.sample_rate as usize, cfg.sample_rate, 21);
    let mels = stft.analyze_stream(&x)?.iter().map(|f| op.mel_frame(f)).collect::<melvoc::Result<Vec<_>>>()?;
    let targets = mel_targets(&op, &mels, cfg.compress_alpha)?;

    let rtisi = Rtisi::new(cfg.clone(), DmConfig { beta: 1.75, iters_per_frame: 50, ..Default::default() })?;
    let mut state = rtisi.new_state();
    let mut out = Vec::with_capacity(x.len() + cfg.hop_len);
    let mut ratios = Vec::new();
    for m in &targets {
        out.extend(rtisi.process_frame(&mut state, m)?);
        let res = state.residuals();
        if res[0] > 1e-6 {
            ratios.push(res[res.len() - 1] as f64 / res[0] as f64);
        }
    }
    let zero = zero_phase_baseline(&mels, &stft, &op)?;

    let warm = cfg.warmup_len();
    let len = x.len() - cfg.window_len;
    let dm_sdr = si_sdr(&x[..len], &out[warm..warm + len])?;
    let zp_sdr = si_sdr(&x[..len], &zero[warm..warm + len])?;
    let gain = dm_sdr - zp_sdr;
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let pass = gain >= 3.0 && mean_ratio <= 0.5;
    Ok(outcome(
        pass,
        format!(
            "SI-SDR {dm_sdr:.2} dB vs zero-phase {zp_sdr:.2} dB, gain {gain:.2} dB (>= 3); residual final/initial {mean_ratio:.3} over {} frames (<= 0.5)",
            ratios.len()
        ),
    ))
}

fn time_stream(net: &Arc<Net>, steps: usize, mels: &[Vec<f32>], op: &Arc<MelOperator>) -> melvoc::Result<f64> {
    let flow = FlowConfig { n_steps: steps, ..Default::default() };
    let mut session = new_session(net.clone(), flow, stft_cfg(), op.clone(), 0)?;
    session.stream_step(&mels[0])?;
    let start = Instant::now();
    for m in &mels[1..] {
        session.stream_step(m)?;
    }
    Ok(start.elapsed().as_secs_f64() * 1000.0 / (mels.len() - 1) as f64)
}

fn performance() -> melvoc::Result<Outcome> {
    let spec = UNetConfig::default().build_spec()?;
    let net = Arc::new(Net::build(spec.clone(), &random_weights(&spec, 1))?);
    let op = mel_op();
    let stft = Stft::new(stft_cfg())?;
    let mels = verify::test_mels(&stft, &op, 21, 2)?;
    let t1 = time_stream(&net, 1, &mels, &op)?;
    let t5 = time_stream(&net, 5, &mels, &op)?;
    let budget = latency_report(&stft_cfg()).per_frame_budget_ms;
    let ratio = t5 / t1;
    let fits = if t5 <= budget { "fits" } else { "exceeds" };
    Ok(outcome(
        (4.0..=6.0).contains(&ratio),
        format!(
            "default U-Net ({} params): N=1 {t1:.2} ms/frame, N=5 {t5:.2} ms/frame (RTF {:.2}), N=5 {fits} the {budget} ms budget; ratio {ratio:.2} (in [4, 6])",
            net.parameter_count(),
            t5 / budget
        ),
    ))
}

fn main() {
    let gated: [(&str, Check); 8] = [
        ("latency arithmetic", latency),
        ("streaming equals offline (network)", stream_equivalence_network),
        ("streaming equals offline (flow pipeline)", stream_equivalence_flow),
        ("causality and receptive field", causality_and_receptive_field),
        ("STFT round trip", stft_round_trip),
        ("Moore-Penrose suite", moore_penrose),
        ("Euler solver oracle", euler_oracle),
        ("RTISI-DM baseline", rtisi_baseline),
    ];
    let mut failed = 0;
    for (name, check) in gated {
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!("{} {name}: {detail} [{:.1} s]", if pass { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    }
    match performance() {
        Ok(o) => println!("{} performance report (not gated): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail),
        Err(e) => println!("FAIL performance report (not gated): error: {e}"),
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
