//! Declarative description of a frame-causal network.
//!
//! A [`NetSpec`] is a flat program of ops run against one "current"
//! activation plus numbered slots, which is enough to express residual
//! blocks and additive U-Net skips. It round-trips through TOML so the
//! engine and the trainer build identical graphs from one file.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SPEC_FORMAT: &str = "mfnet1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreqMode {
    /// Stride 1, zero-padded to keep the frequency size.
    Same,
    /// Stride 2 along frequency (halves the size).
    Down,
    /// Transposed stride-2 along frequency (doubles the size); the frequency
    /// kernel extent must be 2.
    Up,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_time: usize,
    #[serde(default = "one")]
    pub dilation: usize,
    pub kernel_freq: usize,
    #[serde(default = "same")]
    pub freq: FreqMode,
    /// Future frames seen by the kernel. Anything other than 0 breaks
    /// frame-causality; only used to build negative controls.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub lookahead: usize,
}

fn one() -> usize {
    1
}

fn same() -> FreqMode {
    FreqMode::Same
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

impl ConvLayerSpec {
    /// `(k - 1) * d + 1` frames of input per output frame.
    pub fn receptive_field(&self) -> usize {
        (self.kernel_time - 1) * self.dilation + 1
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel_time, self.kernel_freq]
    }

    pub fn out_freq(&self, in_freq: usize) -> usize {
        match self.freq {
            FreqMode::Same => in_freq,
            FreqMode::Down => in_freq / 2,
            FreqMode::Up => in_freq * 2,
        }
    }
}

/// Sub-band grouped batch norm with frozen statistics: one mean/variance per
/// (channel group, frequency band), one affine pair per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormSpec {
    pub name: String,
    pub channels: usize,
    pub channel_groups: usize,
    pub bands: usize,
    #[serde(default = "default_eps")]
    pub eps: f32,
}

fn default_eps() -> f32 {
    1e-5
}

/// Adds a learned projection of the diffusion-time embedding to every
/// frequency bin of each channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeBiasSpec {
    pub name: String,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Op {
    Conv(ConvLayerSpec),
    Norm(NormSpec),
    Silu,
    TimeBias(TimeBiasSpec),
    /// Copy the current activation into a slot.
    Save { slot: usize },
    /// Replace the current activation with a slot's contents.
    Load { slot: usize },
    /// `current = (current + slot) * scale`.
    Add { slot: usize, scale: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub format: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub freq_bins: usize,
    pub emb_dim: usize,
    #[serde(default)]
    pub levels: usize,
    #[serde(default)]
    pub resblocks_per_level: usize,
    #[serde(rename = "op")]
    pub ops: Vec<Op>,
}

/// Channel and frequency size of an activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub freq: usize,
}

impl NetSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: NetSpec = toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("net spec is always representable as TOML")
    }

    /// SHA-256 of the canonical TOML text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn convs(&self) -> impl Iterator<Item = &ConvLayerSpec> {
        self.ops.iter().filter_map(|op| match op {
            Op::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn is_causal(&self) -> bool {
        self.convs().all(|c| c.lookahead == 0)
    }

    /// Walks the program and returns the activation shape after every op.
    pub fn infer_shapes(&self) -> Result<Vec<Shape>> {
        if self.format != SPEC_FORMAT {
            return Err(Error::Spec(format!("unsupported spec format `{}` (expected `{SPEC_FORMAT}`)", self.format)));
        }
        let mut cur = Shape { channels: self.in_channels, freq: self.freq_bins };
        let mut slots: BTreeMap<usize, Shape> = BTreeMap::new();
        let mut shapes = Vec::with_capacity(self.ops.len());
        for (i, op) in self.ops.iter().enumerate() {
            let at = |msg: String| Error::Spec(format!("op {i}: {msg}"));
            match op {
                Op::Conv(c) => {
                    if c.in_channels != cur.channels {
                        return Err(at(format!("conv `{}` expects {} channels, gets {}", c.name, c.in_channels, cur.channels)));
                    }
                    if c.kernel_time == 0 || c.dilation == 0 || c.kernel_freq == 0 || c.out_channels == 0 {
                        return Err(at(format!("conv `{}` has a zero-sized dimension", c.name)));
                    }
                    match c.freq {
                        FreqMode::Same | FreqMode::Down if c.kernel_freq % 2 == 0 => {
                            return Err(at(format!("conv `{}` needs an odd frequency kernel", c.name)))
                        }
                        FreqMode::Down if !cur.freq.is_multiple_of(2) => {
                            return Err(at(format!("conv `{}` downsamples an odd frequency size {}", c.name, cur.freq)))
                        }
                        FreqMode::Up if c.kernel_freq != 2 => {
                            return Err(at(format!("conv `{}` upsamples with frequency kernel {} (must be 2)", c.name, c.kernel_freq)))
                        }
                        _ => {}
                    }
                    cur = Shape { channels: c.out_channels, freq: c.out_freq(cur.freq) };
                }
                Op::Norm(n) => {
                    if n.channels != cur.channels {
                        return Err(at(format!("norm `{}` expects {} channels, gets {}", n.name, n.channels, cur.channels)));
                    }
                    if n.channel_groups == 0 || n.channels % n.channel_groups != 0 {
                        return Err(at(format!("norm `{}`: {} channel groups do not divide {}", n.name, n.channel_groups, n.channels)));
                    }
                    if n.bands == 0 || n.bands > cur.freq {
                        return Err(at(format!("norm `{}`: {} bands for {} bins", n.name, n.bands, cur.freq)));
                    }
                }
                Op::Silu => {}
                Op::TimeBias(t) => {
                    if t.channels != cur.channels {
                        return Err(at(format!("time bias `{}` expects {} channels, gets {}", t.name, t.channels, cur.channels)));
                    }
                }
                Op::Save { slot } => {
                    slots.insert(*slot, cur);
                }
                Op::Load { slot } => {
                    cur = *slots.get(slot).ok_or_else(|| at(format!("load from empty slot {slot}")))?;
                }
                Op::Add { slot, .. } => {
                    let s = slots.get(slot).ok_or_else(|| at(format!("add from empty slot {slot}")))?;
                    if *s != cur {
                        return Err(at(format!("add of slot {slot} with shape {s:?} onto {cur:?}")));
                    }
                }
            }
            shapes.push(cur);
        }
        if cur != (Shape { channels: self.out_channels, freq: self.freq_bins }) {
            return Err(Error::Spec(format!(
                "network ends with {cur:?}, expected {} channels x {} bins",
                self.out_channels, self.freq_bins
            )));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.infer_shapes()?;
        let mut names = std::collections::BTreeSet::new();
        for op in &self.ops {
            let name = match op {
                Op::Conv(c) => &c.name,
                Op::Norm(n) => &n.name,
                Op::TimeBias(t) => &t.name,
                _ => continue,
            };
            if !names.insert(name.as_str()) {
                return Err(Error::Spec(format!("duplicate layer name `{name}`")));
            }
        }
        if !self.emb_dim.is_multiple_of(2) {
            return Err(Error::Spec(format!("emb_dim must be even, got {}", self.emb_dim)));
        }
        Ok(())
    }

    /// Every tensor the weights must provide, as `(name, shape)`.
    pub fn weight_slots(&self) -> Vec<(String, Vec<usize>)> {
        let mut slots = Vec::new();
        for op in &self.ops {
            match op {
                Op::Conv(c) => {
                    slots.push((format!("{}.weight", c.name), c.weight_shape()));
                    slots.push((format!("{}.bias", c.name), vec![c.out_channels]));
                }
                Op::Norm(n) => {
                    slots.push((format!("{}.weight", n.name), vec![n.channels]));
                    slots.push((format!("{}.bias", n.name), vec![n.channels]));
                    slots.push((format!("{}.running_mean", n.name), vec![n.channel_groups, n.bands]));
                    slots.push((format!("{}.running_var", n.name), vec![n.channel_groups, n.bands]));
                }
                Op::TimeBias(t) => {
                    slots.push((format!("{}.weight", t.name), vec![t.channels, self.emb_dim]));
                    slots.push((format!("{}.bias", t.name), vec![t.channels]));
                }
                _ => {}
            }
        }
        slots
    }

    /// Trainable parameters (frozen norm statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.weight_slots()
            .iter()
            .filter(|(name, _)| !name.ends_with(".running_mean") && !name.ends_with(".running_var"))
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum()
    }

    /// Past frames that can influence the current output frame: the longest
    /// chain of `(k - 1) * d` through the program.
    pub fn receptive_field(&self) -> usize {
        let mut cur = 0usize;
        let mut slots: BTreeMap<usize, usize> = BTreeMap::new();
        for op in &self.ops {
            match op {
                Op::Conv(c) => cur += (c.kernel_time - 1) * c.dilation,
                Op::Save { slot } => {
                    slots.insert(*slot, cur);
                }
                Op::Load { slot } => cur = slots.get(slot).copied().unwrap_or(0),
                Op::Add { slot, .. } => cur = cur.max(slots.get(slot).copied().unwrap_or(0)),
                _ => {}
            }
        }
        cur
    }
}

/// Hyperparameters of the frame-causal U-Net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub freq_bins: usize,
    /// One width per resolution level; frequency halves between levels.
    pub channels: Vec<usize>,
    pub resblocks_per_level: usize,
    pub kernel_time: usize,
    pub kernel_freq: usize,
    /// Time dilation of the level-transition convs (in place of time-wise
    /// down/upsampling).
    pub transition_dilation: usize,
    pub emb_dim: usize,
    pub bands: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            freq_bins: padded_freq_bins(257, 3),
            channels: vec![32, 64, 96],
            resblocks_per_level: 2,
            kernel_time: 3,
            kernel_freq: 3,
            transition_dilation: 2,
            emb_dim: 16,
            bands: 4,
        }
    }
}

/// Smallest multiple of `2^levels` that holds `bins`.
pub fn padded_freq_bins(bins: usize, levels: usize) -> usize {
    let m = 1 << levels;
    bins.div_ceil(m) * m
}

/// Channel groups for the batch-norm statistics, following the usual
/// GroupNorm rule `min(C / 4, 32)`.
pub fn channel_groups(channels: usize) -> usize {
    let g = (channels / 4).clamp(1, 32);
    (1..=g).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn build_spec(&self) -> Result<NetSpec> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Spec("need at least one nonzero level width".into()));
        }
        if !self.freq_bins.is_multiple_of(1 << (self.levels() - 1)) {
            return Err(Error::Spec(format!(
                "freq_bins {} not divisible by 2^{}",
                self.freq_bins,
                self.levels() - 1
            )));
        }
        let mut b = Builder { cfg: self, ops: Vec::new(), next_slot: self.levels() };
        let ch = &self.channels;
        let levels = self.levels();

        b.conv("input", self.in_channels, ch[0], self.kernel_time, 1, self.kernel_freq, FreqMode::Same);
        let mut cur = ch[0];
        for l in 0..levels {
            for r in 0..self.resblocks_per_level {
                b.resblock(&format!("down{l}.res{r}"), cur, ch[l]);
                cur = ch[l];
            }
            if l + 1 < levels {
                b.ops.push(Op::Save { slot: l });
                b.conv(&format!("down{l}.resample"), cur, ch[l + 1], self.kernel_time, self.transition_dilation, 3, FreqMode::Down);
                cur = ch[l + 1];
            }
        }
        for l in (0..levels).rev() {
            if l + 1 < levels {
                b.conv(&format!("up{l}.resample"), cur, ch[l], self.kernel_time, self.transition_dilation, 2, FreqMode::Up);
                cur = ch[l];
                b.ops.push(Op::Add { slot: l, scale: 1.0 });
            }
            for r in 0..self.resblocks_per_level {
                b.resblock(&format!("up{l}.res{r}"), cur, ch[l]);
                cur = ch[l];
            }
        }
        b.norm("output.norm", cur);
        b.ops.push(Op::Silu);
        b.conv("output", cur, self.in_channels, self.kernel_time, 1, self.kernel_freq, FreqMode::Same);

        let spec = NetSpec {
            format: SPEC_FORMAT.into(),
            in_channels: self.in_channels,
            out_channels: self.in_channels,
            freq_bins: self.freq_bins,
            emb_dim: self.emb_dim,
            levels,
            resblocks_per_level: self.resblocks_per_level,
            ops: b.ops,
        };
        spec.validate()?;
        Ok(spec)
    }
}

struct Builder<'a> {
    cfg: &'a UNetConfig,
    ops: Vec<Op>,
    next_slot: usize,
}

impl Builder<'_> {
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, cin: usize, cout: usize, kt: usize, dil: usize, kf: usize, freq: FreqMode) {
        self.ops.push(Op::Conv(ConvLayerSpec {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel_time: kt,
            dilation: dil,
            kernel_freq: kf,
            freq,
            lookahead: 0,
        }));
    }

    fn norm(&mut self, name: &str, channels: usize) {
        self.ops.push(Op::Norm(NormSpec {
            name: name.into(),
            channels,
            channel_groups: channel_groups(channels),
            bands: self.cfg.bands,
            eps: default_eps(),
        }));
    }

    /// norm -> SiLU -> conv -> +time -> norm -> SiLU -> conv, summed with the
    /// (projected) input and scaled by 1/sqrt(2).
    fn resblock(&mut self, name: &str, cin: usize, cout: usize) {
        let input = self.next_slot;
        let hidden = self.next_slot + 1;
        let (kt, kf) = (self.cfg.kernel_time, self.cfg.kernel_freq);
        self.ops.push(Op::Save { slot: input });
        self.norm(&format!("{name}.norm1"), cin);
        self.ops.push(Op::Silu);
        self.conv(&format!("{name}.conv1"), cin, cout, kt, 1, kf, FreqMode::Same);
        self.ops.push(Op::TimeBias(TimeBiasSpec { name: format!("{name}.time"), channels: cout }));
        self.norm(&format!("{name}.norm2"), cout);
        self.ops.push(Op::Silu);
        self.conv(&format!("{name}.conv2"), cout, cout, kt, 1, kf, FreqMode::Same);
        let scale = std::f32::consts::FRAC_1_SQRT_2;
        if cin == cout {
            self.ops.push(Op::Add { slot: input, scale });
        } else {
            self.ops.push(Op::Save { slot: hidden });
            self.ops.push(Op::Load { slot: input });
            self.conv(&format!("{name}.skip"), cin, cout, 1, 1, 1, FreqMode::Same);
            self.ops.push(Op::Add { slot: hidden, scale });
        }
    }
}
