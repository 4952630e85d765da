use std::fs;
use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use melvoc::audio_io::{load_spec_dump, read_wav, save_spec_dump, write_wav, SpecDump, WavFormat};
use melvoc::config::EngineConfig;
use melvoc::dsp::{latency_report, Stft};
use melvoc::flow::{new_session, vocode_offline, FlowConfig};
use melvoc::mel::MelOperator;
use melvoc::metrics::evaluate;
use melvoc::model_io::{load_bundle, save_bundle};
use melvoc::net::{padded_freq_bins, random_weights, Net, NetSpec, UNetConfig};
use melvoc::phase::{mel_targets, DmVariant, Rtisi};
use melvoc::{verify, Error, Result};

use crate::{
    BaselineArgs, BenchArgs, Cli, Command, FlowArgs, InitArgs, InputArgs, MelArgs, MetricsArgs, ModelArgs,
    StreamArgs, VerifyArgs, VocodeArgs,
};

pub enum Outcome {
    Done,
    VerificationFailed,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let cfg = match &cli.config {
        Some(path) => EngineConfig::load(path)?,
        None => EngineConfig::load_default()?,
    };
    match cli.command {
        Command::Init(args) => init(&cfg, args),
        Command::Mel(args) => mel(&cfg, args),
        Command::Vocode(args) => vocode(&cfg, args),
        Command::Stream(args) => stream(&cfg, args),
        Command::Baseline(args) => baseline(&cfg, args),
        Command::Verify(args) => verify_cmd(&cfg, args),
        Command::Metrics(args) => metrics(&cfg, args),
        Command::Bench(args) => bench(&cfg, args),
        Command::Latency => {
            println!("{}", latency_report(&cfg.stft));
            Ok(Outcome::Done)
        }
    }
}

struct Engine {
    stft: Stft,
    mel_op: MelOperator,
}

impl Engine {
    fn new(cfg: &EngineConfig) -> Result<Self> {
        Ok(Self { stft: Stft::new(cfg.stft.clone())?, mel_op: MelOperator::build(&cfg.mel, &cfg.stft)? })
    }
}

/// Mel frames plus, for WAV input, the original signal length.
struct MelInput {
    mels: Vec<Vec<f32>>,
    signal_len: Option<usize>,
}

fn load_input(input: &InputArgs, cfg: &EngineConfig, engine: &Engine) -> Result<MelInput> {
    if let Some(path) = &input.wav {
        let signal = read_wav(path, cfg.stft.sample_rate)?;
        let frames = engine.stft.analyze_stream(&signal)?;
        let mels = frames.iter().map(|f| engine.mel_op.mel_frame(f)).collect::<Result<_>>()?;
        return Ok(MelInput { mels, signal_len: Some(signal.len()) });
    }
    let path = input.mel.as_ref().ok_or_else(|| Error::Usage("pass --mel or --wav".into()))?;
    match load_spec_dump(path)? {
        SpecDump::Mel(mels) => {
            if let Some(m) = mels.first() {
                if m.len() != engine.mel_op.n_mels() {
                    return Err(Error::Data(format!(
                        "{} has {} Mel bands, config expects {}",
                        path.display(),
                        m.len(),
                        engine.mel_op.n_mels()
                    )));
                }
            }
            Ok(MelInput { mels, signal_len: None })
        }
        SpecDump::Compressed(_) => {
            Err(Error::Data(format!("{} holds a complex spectrogram, not Mel frames", path.display())))
        }
    }
}

/// Drops the warm-up samples and, for WAV input, the samples past the end
/// of the original signal.
fn trim(mut out: Vec<f32>, warmup: usize, signal_len: Option<usize>) -> Vec<f32> {
    let mut out = out.split_off(warmup.min(out.len()));
    if let Some(len) = signal_len {
        out.truncate(len.saturating_sub(warmup));
    }
    out
}

fn default_spec(cfg: &EngineConfig, channels: Option<Vec<usize>>) -> Result<NetSpec> {
    let mut unet = UNetConfig::default();
    if let Some(c) = channels {
        unet.channels = c;
    }
    unet.freq_bins = padded_freq_bins(cfg.stft.n_bins(), unet.levels());
    unet.build_spec()
}

fn load_net(model: &ModelArgs, cfg: &EngineConfig) -> Result<Net> {
    let spec = match &model.net_spec {
        Some(path) => NetSpec::from_toml(&fs::read_to_string(path)?)?,
        None => default_spec(cfg, None)?,
    };
    let weights = match (&model.weights, model.random_weights) {
        (Some(path), _) => load_bundle(path)?,
        (None, Some(seed)) => random_weights(&spec, seed),
        (None, None) => return Err(Error::Usage("pass --weights <FILE> or --random-weights <SEED>".into())),
    };
    Net::build(spec, &weights)
}

fn flow_config(cfg: &EngineConfig, args: &FlowArgs) -> Result<FlowConfig> {
    let mut flow = cfg.flow.clone();
    if let Some(n) = args.steps {
        flow.n_steps = n;
    }
    if let Some(s) = args.sigma_y {
        flow.sigma_y = s;
    }
    if let Some(seed) = args.seed {
        flow.seed = seed;
    }
    flow.validate()?;
    Ok(flow)
}

fn write_output(path: &std::path::Path, samples: &[f32], cfg: &EngineConfig) -> Result<()> {
    write_wav(path, samples, cfg.stft.sample_rate, WavFormat::Float32)
}

fn init(cfg: &EngineConfig, args: InitArgs) -> Result<Outcome> {
    fs::create_dir_all(&args.dir)?;
    let spec = default_spec(cfg, args.channels)?;
    let config_path = args.dir.join(melvoc::config::CONFIG_FILE_NAME);
    fs::write(&config_path, cfg.to_toml())?;
    let spec_path = args.dir.join("net.toml");
    fs::write(&spec_path, spec.to_toml())?;
    println!("wrote {}", config_path.display());
    println!("wrote {} ({} parameters, receptive field {} frames)", spec_path.display(), spec.parameter_count(), spec.receptive_field());
    if let Some(seed) = args.random_weights {
        let path = args.dir.join("weights.mfwb");
        save_bundle(&random_weights(&spec, seed), &path)?;
        println!("wrote {}", path.display());
    }
    Ok(Outcome::Done)
}

fn mel(cfg: &EngineConfig, args: MelArgs) -> Result<Outcome> {
    let engine = Engine::new(cfg)?;
    let input = InputArgs { mel: None, wav: Some(args.wav) };
    let mels = load_input(&input, cfg, &engine)?.mels;
    save_spec_dump(&args.out, &SpecDump::Mel(mels))?;
    Ok(Outcome::Done)
}

fn vocode(cfg: &EngineConfig, args: VocodeArgs) -> Result<Outcome> {
    let engine = Engine::new(cfg)?;
    let flow = flow_config(cfg, &args.flow)?;
    let net = load_net(&args.model, cfg)?;
    let input = load_input(&args.input, cfg, &engine)?;
    let start = Instant::now();
    let out = vocode_offline(&net, &input.mels, &flow, &engine.stft, &engine.mel_op)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let out = trim(out, cfg.stft.warmup_len(), input.signal_len);
    write_output(&args.out, &out, cfg)?;
    println!("{}", latency_report(&cfg.stft));
    let frames = input.mels.len().max(1);
    println!(
        "vocoded {} frames with N = {} in {:.1} ms ({:.3} ms/frame)",
        input.mels.len(),
        flow.n_steps,
        ms,
        ms / frames as f64
    );
    Ok(Outcome::Done)
}

const HISTOGRAM_EDGES_MS: [f64; 7] = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0];

fn histogram(times: &[f64]) -> String {
    let mut counts = [0usize; HISTOGRAM_EDGES_MS.len() + 1];
    for &t in times {
        counts[HISTOGRAM_EDGES_MS.iter().position(|&e| t < e).unwrap_or(HISTOGRAM_EDGES_MS.len())] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0).max(1);
    let mut out = String::new();
    let mut lo = 0.0;
    for (i, &c) in counts.iter().enumerate() {
        let label = match HISTOGRAM_EDGES_MS.get(i) {
            Some(hi) => format!("{lo}-{hi}ms"),
            None => format!("{lo}+ms"),
        };
        out.push_str(&format!("{label:>9} {c:>6} {}\n", "#".repeat((c * 40).div_ceil(max))));
        lo = HISTOGRAM_EDGES_MS.get(i).copied().unwrap_or(lo);
    }
    out
}

fn stream(cfg: &EngineConfig, args: StreamArgs) -> Result<Outcome> {
    let engine = Engine::new(cfg)?;
    let flow = flow_config(cfg, &args.flow)?;
    let net = Arc::new(load_net(&args.model, cfg)?);
    let input = load_input(&args.input, cfg, &engine)?;
    let seed = flow.seed;
    let mut session = new_session(net, flow.clone(), cfg.stft.clone(), Arc::new(engine.mel_op), seed)?;
    let hop = Duration::from_secs_f64(cfg.stft.hop_len as f64 / cfg.stft.sample_rate as f64);
    let hop_ms = hop.as_secs_f64() * 1e3;

    let mut log = match &args.timing_log {
        Some(path) => {
            let mut f = std::io::BufWriter::new(fs::File::create(path)?);
            writeln!(f, "# frame {} total_ms", (0..flow.n_steps).map(|n| format!("call{n}_ms")).collect::<Vec<_>>().join(" "))?;
            Some(f)
        }
        None => None,
    };
    let mut out = Vec::with_capacity(input.mels.len() * cfg.stft.hop_len);
    let mut totals = Vec::with_capacity(input.mels.len());
    let mut misses = 0usize;
    let start = Instant::now();
    for (t, m) in input.mels.iter().enumerate() {
        // Frame t is complete once its last hop of audio has arrived.
        let arrival = start + hop * (t as u32 + 1);
        if args.realtime {
            if let Some(wait) = arrival.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        out.extend(session.stream_step(m)?);
        if args.realtime && Instant::now() > arrival + hop {
            misses += 1;
        }
        let timing = session.last_timing();
        totals.push(timing.total_ms);
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", timing.report_line())?;
        }
    }
    if let Some(mut f) = log {
        f.flush()?;
    }
    let out = trim(out, cfg.stft.warmup_len(), input.signal_len);
    write_output(&args.out, &out, cfg)?;

    let mean = totals.iter().sum::<f64>() / totals.len().max(1) as f64;
    let worst = totals.iter().copied().fold(0.0, f64::max);
    println!("{}", latency_report(&cfg.stft));
    println!("frames {}, N = {}, mean {:.3} ms/frame, max {:.3} ms/frame", totals.len(), flow.n_steps, mean, worst);
    println!("RTF {:.3}", mean / hop_ms);
    print!("{}", histogram(&totals));
    if args.realtime {
        println!("deadline misses {misses} of {}", totals.len());
    }
    Ok(Outcome::Done)
}

fn baseline(cfg: &EngineConfig, args: BaselineArgs) -> Result<Outcome> {
    let engine = Engine::new(cfg)?;
    let mut dm = cfg.rtisi.clone();
    if let Some(b) = args.beta {
        dm.beta = b;
    }
    if let Some(i) = args.iters {
        dm.iters_per_frame = i;
    }
    if args.swapped {
        dm.variant = DmVariant::Swapped;
    }
    let input = load_input(&args.input, cfg, &engine)?;
    let targets = mel_targets(&engine.mel_op, &input.mels, cfg.stft.compress_alpha)?;
    let rtisi = Rtisi::new(cfg.stft.clone(), dm.clone())?;
    let start = Instant::now();
    let out = rtisi.run(&targets)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let out = trim(out, cfg.stft.warmup_len(), input.signal_len);
    write_output(&args.out, &out, cfg)?;
    println!(
        "RTISI-DM beta {} with {} iterations/frame: {} frames in {:.1} ms",
        dm.beta,
        dm.iters_per_frame,
        targets.len(),
        ms
    );
    Ok(Outcome::Done)
}

struct Checks {
    failed: bool,
}

impl Checks {
    fn report(&mut self, name: &str, ok: bool, detail: impl std::fmt::Display) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        self.failed |= !ok;
    }
}

const NET_TOLERANCE: f32 = 1e-5;
const FLOW_TOLERANCE: f32 = 1e-4;

fn verify_cmd(cfg: &EngineConfig, args: VerifyArgs) -> Result<Outcome> {
    if args.frames == 0 {
        return Err(Error::Usage("--frames must be at least 1".into()));
    }
    let spec = match &args.net_spec {
        Some(path) => NetSpec::from_toml(&fs::read_to_string(path)?)?,
        None => default_spec(cfg, None)?,
    };
    let weights = match &args.weights {
        Some(path) => load_bundle(path)?,
        None => random_weights(&spec, args.seed),
    };
    let net = Arc::new(Net::build(spec, &weights)?);
    let t_len = args.frames;
    let tau = 0.5;
    let input = verify::random_input(&net, t_len, args.seed.wrapping_add(1));
    let mut checks = Checks { failed: false };
    println!(
        "network: {} parameters, {} conv layers, receptive field {} frames",
        net.parameter_count(),
        net.conv_count(),
        net.receptive_field()
    );

    if t_len >= 2 {
        let at = t_len / 2;
        match verify::causality_violation(&net, &input, at, tau)? {
            None => checks.report("causality", true, format!("outputs before frame {at} unchanged by perturbing it")),
            Some(t) => checks.report(
                "causality",
                false,
                format!("perturbing input frame {at} changed earlier output frame {t}"),
            ),
        }
    }
    let r = net.receptive_field();
    if net.is_causal() && t_len > r + 1 {
        let t = t_len - 1;
        let reaches = verify::influences(&net, &input, t - r, t, tau)?;
        let beyond = verify::influences(&net, &input, t - r - 1, t, tau)?;
        checks.report(
            "receptive field",
            reaches && !beyond,
            format!("frame t-{r} reaches t: {reaches}, frame t-{} reaches t: {beyond}", r + 1),
        );
    } else if net.is_causal() {
        println!("SKIP receptive field: needs more than {} frames", r + 1);
    }
    if net.is_causal() {
        let dev = verify::stream_offline_deviation(&net, &input, tau)?;
        checks.report("network streaming", dev < NET_TOLERANCE, format!("max abs deviation {dev:.3e} (tolerance {NET_TOLERANCE:e})"));
    } else {
        checks.report("network streaming", false, "network has look-ahead and cannot stream");
    }

    let spec = net.spec();
    let flow_ready = net.is_causal() && spec.in_channels == 2 && spec.out_channels == 2 && spec.freq_bins >= cfg.stft.n_bins();
    if flow_ready {
        let engine = Engine::new(cfg)?;
        let mels = verify::test_mels(&engine.stft, &engine.mel_op, t_len, args.seed)?;
        let mel_op = Arc::new(engine.mel_op);
        for &n in &args.steps {
            let flow = FlowConfig { n_steps: n, seed: args.seed, ..cfg.flow.clone() };
            let dev = verify::flow_stream_offline_deviation(net.clone(), &mels, &flow, &cfg.stft, mel_op.clone())?;
            checks.report(
                &format!("flow streaming N={n}"),
                dev < FLOW_TOLERANCE,
                format!("max abs waveform deviation {dev:.3e} (tolerance {FLOW_TOLERANCE:e})"),
            );
        }
    } else {
        println!("SKIP flow streaming: network does not map 2x{} spectra", cfg.stft.n_bins());
    }
    Ok(if checks.failed { Outcome::VerificationFailed } else { Outcome::Done })
}

fn metrics(cfg: &EngineConfig, args: MetricsArgs) -> Result<Outcome> {
    let mut reference = read_wav(&args.reference, cfg.stft.sample_rate)?;
    let mut estimate = read_wav(&args.estimate, cfg.stft.sample_rate)?;
    if reference.len() != estimate.len() {
        let n = reference.len().min(estimate.len());
        eprintln!(
            "warning: lengths differ ({} vs {} samples), comparing the first {n}",
            reference.len(),
            estimate.len()
        );
        reference.truncate(n);
        estimate.truncate(n);
    }
    let report = evaluate(&reference, &estimate, &cfg.stft, &cfg.mel)?;
    println!("{}", serde_json::to_string(&report).map_err(|e| Error::Data(e.to_string()))?);
    Ok(Outcome::Done)
}

fn bench(cfg: &EngineConfig, args: BenchArgs) -> Result<Outcome> {
    if args.frames == 0 || args.steps.is_empty() {
        return Err(Error::Usage("need at least one frame and one step count".into()));
    }
    let engine = Engine::new(cfg)?;
    let model = ModelArgs { random_weights: args.model.random_weights.or(Some(0)), ..args.model };
    let net = Arc::new(load_net(&model, cfg)?);
    let mels = verify::test_mels(&engine.stft, &engine.mel_op, args.frames, 0)?;
    let mel_op = Arc::new(engine.mel_op);
    let hop_ms = cfg.stft.hop_len as f64 * 1e3 / cfg.stft.sample_rate as f64;
    println!("{}", latency_report(&cfg.stft));
    println!("network: {} parameters, {} conv layers", net.parameter_count(), net.conv_count());
    let mut results = Vec::new();
    for &n in &args.steps {
        let flow = FlowConfig { n_steps: n, ..cfg.flow.clone() };
        let mut session = new_session(net.clone(), flow, cfg.stft.clone(), mel_op.clone(), 0)?;
        let mut total = 0.0;
        for m in &mels {
            session.stream_step(m)?;
            total += session.last_timing().total_ms;
        }
        let per_frame = total / mels.len() as f64;
        println!(
            "N = {n}: {per_frame:.3} ms/frame, {:.3} ms/call, RTF {:.3}, {} the {hop_ms:.0} ms budget",
            per_frame / n.max(1) as f64,
            per_frame / hop_ms,
            if per_frame < hop_ms { "within" } else { "exceeds" }
        );
        results.push((n, per_frame));
    }
    if let (Some(&(n1, t1)), Some(&(n2, t2))) = (results.iter().min_by_key(|r| r.0), results.iter().max_by_key(|r| r.0)) {
        if n1 != n2 {
            println!("time(N={n2}) / time(N={n1}) = {:.2}", t2 / t1);
        }
    }
    Ok(Outcome::Done)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trim_drops_warmup_and_tail() {
        let out: Vec<f32> = (0..10).map(|v| v as f32).collect();
        assert_eq!(trim(out.clone(), 3, Some(8)), vec![3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(trim(out, 3, None).len(), 7);
    }

    #[test]
    fn histogram_counts_every_frame() {
        let h = histogram(&[0.5, 1.5, 1.7, 100.0]);
        let counts: usize = h.lines().map(|l| l.split_whitespace().nth(1).unwrap().parse::<usize>().unwrap()).sum();
        assert_eq!(counts, 4);
    }
}
