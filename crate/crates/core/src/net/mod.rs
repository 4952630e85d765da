//! Frame-causal convolutional network with an offline (whole sequence) and
//! a streaming (one frame at a time, cached) execution mode.
//!
//! Every time-axis operation is a convolution with left zero-padding, and
//! everything between convolutions is pointwise in time. Streaming therefore
//! only needs, per convolution, the last `R_l - 1` frames that went into it:
//! evaluating the kernel once on `[cache, newest]` yields exactly the frame
//! the offline pass produces at that index.

mod cache;
mod layers;
mod spec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub use cache::{LayerCache, NetState};
pub use layers::{time_embedding, ConvLayer, NormLayer, TimeBiasLayer};
pub use spec::{
    channel_groups, padded_freq_bins, ConvLayerSpec, FreqMode, NetSpec, NormSpec, Op, Shape, TimeBiasSpec,
    UNetConfig, SPEC_FORMAT,
};

use crate::error::{Error, Result};
use crate::model_io::{Tensor, WeightBundle, META_FORMAT_VERSION, META_SPEC_HASH};

/// One frame of activations, `channels x freq`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub freq: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, freq: usize) -> Self {
        Self { channels, freq, data: vec![0.0; channels * freq] }
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.freq..(c + 1) * self.freq]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        &mut self.data[c * self.freq..(c + 1) * self.freq]
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv { layer: ConvLayer, cache: usize },
    Norm(NormLayer),
    Silu,
    TimeBias(TimeBiasLayer),
    Save(usize),
    Load(usize),
    Add { slot: usize, scale: f32 },
}

/// An immutable network ready for either execution mode.
#[derive(Debug, Clone)]
pub struct Net {
    spec: NetSpec,
    layers: Vec<Layer>,
    slot_count: usize,
    receptive_field: usize,
}

impl Net {
    pub fn build(spec: NetSpec, weights: &WeightBundle) -> Result<Self> {
        let shapes = spec.infer_shapes()?;
        spec.validate()?;
        weights.check_against(&spec.weight_slots(), &spec.hash())?;
        let mut layers = Vec::with_capacity(spec.ops.len());
        let mut freq = spec.freq_bins;
        let mut convs = 0;
        let mut slot_count = 0;
        for (op, shape) in spec.ops.iter().zip(&shapes) {
            layers.push(match op {
                Op::Conv(c) => {
                    let layer = ConvLayer::new(c.clone(), freq, weights)?;
                    convs += 1;
                    Layer::Conv { layer, cache: convs - 1 }
                }
                Op::Norm(n) => Layer::Norm(NormLayer::new(n.clone(), freq, weights)?),
                Op::Silu => Layer::Silu,
                Op::TimeBias(t) => Layer::TimeBias(TimeBiasLayer::new(t.clone(), spec.emb_dim, weights)?),
                Op::Save { slot } => {
                    slot_count = slot_count.max(slot + 1);
                    Layer::Save(*slot)
                }
                Op::Load { slot } => Layer::Load(*slot),
                Op::Add { slot, scale } => Layer::Add { slot: *slot, scale: *scale },
            });
            freq = shape.freq;
        }
        let receptive_field = spec.receptive_field();
        Ok(Self { spec, layers, slot_count, receptive_field })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn in_channels(&self) -> usize {
        self.spec.in_channels
    }

    pub fn freq_bins(&self) -> usize {
        self.spec.freq_bins
    }

    pub fn parameter_count(&self) -> usize {
        self.spec.parameter_count()
    }

    /// Number of past input frames that can influence an output frame.
    pub fn receptive_field(&self) -> usize {
        self.receptive_field
    }

    pub fn is_causal(&self) -> bool {
        self.spec.is_causal()
    }

    fn conv_layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv { layer, .. } => Some(layer),
            _ => None,
        })
    }

    /// Number of time-convolution layers (`L`), one cache each.
    pub fn conv_count(&self) -> usize {
        self.conv_layers().count()
    }

    /// Fresh, all-zero streaming state.
    pub fn new_state(&self) -> NetState {
        let caches = self
            .conv_layers()
            .map(|c| LayerCache::new(c.spec.receptive_field() - 1, c.spec.in_channels, c.in_freq))
            .collect();
        NetState { caches, frames_seen: 0 }
    }

    fn check_input(&self, frame: &FeatureMap) -> Result<()> {
        if frame.channels != self.spec.in_channels || frame.freq != self.spec.freq_bins {
            return Err(Error::Shape(format!(
                "network takes {}x{} frames, got {}x{}",
                self.spec.in_channels, self.spec.freq_bins, frame.channels, frame.freq
            )));
        }
        if frame.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite network input".into()));
        }
        Ok(())
    }

    fn time_offsets(&self, tau: f32) -> Vec<Option<Vec<f32>>> {
        let emb = time_embedding(tau, self.spec.emb_dim);
        self.layers
            .iter()
            .map(|l| match l {
                Layer::TimeBias(t) => Some(t.offsets(&emb)),
                _ => None,
            })
            .collect()
    }

    /// Whole-sequence pass with zero-padded convolutions.
    pub fn forward_offline(&self, frames: &[FeatureMap], tau: f32) -> Result<Vec<FeatureMap>> {
        if frames.is_empty() {
            return Err(Error::Shape("empty input sequence".into()));
        }
        check_tau(tau)?;
        for f in frames {
            self.check_input(f)?;
        }
        let offsets = self.time_offsets(tau);
        let t_len = frames.len() as isize;
        let mut cur: Vec<FeatureMap> = frames.to_vec();
        let mut slots: Vec<Vec<FeatureMap>> = vec![Vec::new(); self.slot_count];
        for (layer, offs) in self.layers.iter().zip(&offsets) {
            match layer {
                Layer::Conv { layer, .. } => {
                    let mut taps = Vec::with_capacity(layer.spec.kernel_time);
                    cur = (0..t_len)
                        .map(|t| {
                            taps.clear();
                            taps.extend((0..layer.spec.kernel_time).map(|j| {
                                let src = t - layer.tap_offset(j);
                                (0..t_len).contains(&src).then(|| &cur[src as usize])
                            }));
                            layer.eval(&taps)
                        })
                        .collect();
                }
                Layer::Norm(n) => cur.iter_mut().for_each(|x| n.apply(x)),
                Layer::Silu => cur.iter_mut().for_each(layers::silu),
                Layer::TimeBias(_) => {
                    let offs = offs.as_ref().expect("offsets computed for every time bias");
                    cur.iter_mut().for_each(|x| TimeBiasLayer::apply(offs, x));
                }
                Layer::Save(s) => slots[*s] = cur.clone(),
                Layer::Load(s) => cur = slots[*s].clone(),
                Layer::Add { slot, scale } => {
                    for (x, y) in cur.iter_mut().zip(&slots[*slot]) {
                        add_scaled(x, y, *scale);
                    }
                }
            }
        }
        Ok(cur)
    }

    /// Pushes one frame through the network, reading and updating the
    /// per-layer caches in `state`.
    pub fn forward_stream_step(&self, state: &mut NetState, frame: &FeatureMap, tau: f32) -> Result<FeatureMap> {
        if !self.is_causal() {
            return Err(Error::Usage("network has look-ahead convolutions and cannot stream".into()));
        }
        self.check_state(state)?;
        self.check_input(frame)?;
        check_tau(tau)?;
        let offsets = self.time_offsets(tau);
        let mut cur = frame.clone();
        let mut slots: Vec<Option<FeatureMap>> = vec![None; self.slot_count];
        for (layer, offs) in self.layers.iter().zip(&offsets) {
            match layer {
                Layer::Conv { layer, cache } => {
                    let cache = &mut state.caches[*cache];
                    let out = {
                        let taps: Vec<Option<&FeatureMap>> = (0..layer.spec.kernel_time)
                            .map(|j| match layer.tap_offset(j) as usize {
                                0 => Some(&cur),
                                back => Some(cache.past(back)),
                            })
                            .collect();
                        layer.eval(&taps)
                    };
                    cache.push(&cur);
                    cur = out;
                }
                Layer::Norm(n) => n.apply(&mut cur),
                Layer::Silu => layers::silu(&mut cur),
                Layer::TimeBias(_) => {
                    TimeBiasLayer::apply(offs.as_ref().expect("offsets computed for every time bias"), &mut cur)
                }
                Layer::Save(s) => slots[*s] = Some(cur.clone()),
                Layer::Load(s) => cur = slots[*s].clone().expect("spec validation guarantees saved slots"),
                Layer::Add { slot, scale } => {
                    let y = slots[*slot].as_ref().expect("spec validation guarantees saved slots");
                    add_scaled(&mut cur, y, *scale);
                }
            }
        }
        state.frames_seen += 1;
        Ok(cur)
    }

    fn check_state(&self, state: &NetState) -> Result<()> {
        let ok = state.caches.len() == self.conv_count()
            && self.conv_layers().zip(&state.caches).all(|(c, cache)| {
                cache.shape() == (c.spec.in_channels, c.spec.receptive_field() - 1) && cache.freq() == c.in_freq
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Usage("streaming state was not created by this network".into()))
        }
    }
}

fn add_scaled(x: &mut FeatureMap, y: &FeatureMap, scale: f32) {
    for (a, b) in x.data.iter_mut().zip(&y.data) {
        *a = (*a + b) * scale;
    }
}

fn check_tau(tau: f32) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::Data(format!("diffusion time {tau} outside [0, 1]")))
    }
}

pub fn build_net(spec: NetSpec, weights: &WeightBundle) -> Result<Net> {
    Net::build(spec, weights)
}

/// Random weights for every slot of `spec`: scaled Gaussian kernels, and
/// non-trivial frozen norm statistics so the norms are exercised too.
pub fn random_weights(spec: &NetSpec, seed: u64) -> WeightBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let near_one = Uniform::new(0.5f32, 1.5).expect("valid range");
    let mut bundle = WeightBundle::default();
    let gauss = |n: usize, std: f32, rng: &mut ChaCha8Rng| -> Vec<f32> {
        (0..n).map(|_| normal.sample(rng) * std).collect()
    };
    for op in &spec.ops {
        match op {
            Op::Conv(c) => {
                let fan_in = (c.in_channels * c.kernel_time * c.kernel_freq) as f32;
                let shape = c.weight_shape();
                let w = gauss(shape.iter().product(), 1.0 / fan_in.sqrt(), &mut rng);
                bundle.insert(format!("{}.weight", c.name), Tensor::new(shape, w));
                let b = gauss(c.out_channels, 0.05, &mut rng);
                bundle.insert(format!("{}.bias", c.name), Tensor::new(vec![c.out_channels], b));
            }
            Op::Norm(n) => {
                let stats = n.channel_groups * n.bands;
                let gamma = (0..n.channels).map(|_| near_one.sample(&mut rng)).collect();
                bundle.insert(format!("{}.weight", n.name), Tensor::new(vec![n.channels], gamma));
                let beta = gauss(n.channels, 0.05, &mut rng);
                bundle.insert(format!("{}.bias", n.name), Tensor::new(vec![n.channels], beta));
                let mean = gauss(stats, 0.1, &mut rng);
                bundle.insert(format!("{}.running_mean", n.name), Tensor::new(vec![n.channel_groups, n.bands], mean));
                let var = (0..stats).map(|_| near_one.sample(&mut rng)).collect();
                bundle.insert(format!("{}.running_var", n.name), Tensor::new(vec![n.channel_groups, n.bands], var));
            }
            Op::TimeBias(t) => {
                let w = gauss(t.channels * spec.emb_dim, 0.1, &mut rng);
                bundle.insert(format!("{}.weight", t.name), Tensor::new(vec![t.channels, spec.emb_dim], w));
                bundle.insert(format!("{}.bias", t.name), Tensor::zeros(vec![t.channels]));
            }
            _ => {}
        }
    }
    bundle.metadata.insert(META_SPEC_HASH.into(), spec.hash());
    bundle.metadata.insert(META_FORMAT_VERSION.into(), "1".into());
    bundle
}

/// Weights with every tensor zeroed except norm scales and variances, which
/// are set to one (identity statistics).
pub fn zero_weights(spec: &NetSpec) -> WeightBundle {
    let mut bundle = WeightBundle::default();
    for (name, shape) in spec.weight_slots() {
        let mut t = Tensor::zeros(shape);
        let is_norm_scale = spec.ops.iter().any(|op| matches!(op, Op::Norm(n) if name == format!("{}.weight", n.name)));
        if name.ends_with(".running_var") || is_norm_scale {
            t.data.fill(1.0);
        }
        bundle.insert(name, t);
    }
    bundle.metadata.insert(META_SPEC_HASH.into(), spec.hash());
    bundle
}

/// A single-layer spec over `channels x freq` frames, mostly for building
/// stub fields in tests and tools.
pub fn single_conv_spec(channels: usize, freq: usize, kernel_time: usize, dilation: usize) -> NetSpec {
    NetSpec {
        format: SPEC_FORMAT.into(),
        in_channels: channels,
        out_channels: channels,
        freq_bins: freq,
        emb_dim: 2,
        levels: 0,
        resblocks_per_level: 0,
        ops: vec![Op::Conv(ConvLayerSpec {
            name: "conv".into(),
            in_channels: channels,
            out_channels: channels,
            kernel_time,
            dilation,
            kernel_freq: 1,
            freq: FreqMode::Same,
            lookahead: 0,
        })],
    }
}

/// Weights making [`single_conv_spec`] (kernel_time 1) compute
/// `gain * x + offset` channel-wise.
pub fn affine_weights(spec: &NetSpec, gain: f32, offset: f32) -> WeightBundle {
    let c = spec.in_channels;
    let mut w = Tensor::zeros(vec![c, c, 1, 1]);
    for i in 0..c {
        w.data[i * c + i] = gain;
    }
    let mut bundle = WeightBundle::default();
    bundle.insert("conv.weight", w);
    bundle.insert("conv.bias", Tensor::new(vec![c], vec![offset; c]));
    bundle
}
