use std::collections::VecDeque;

use super::FeatureMap;

/// Rolling buffer of the last `R - 1` input frames of one convolution,
/// oldest first. Starts out as zeros, which is what zero-padding gives the
/// offline network.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    frames: VecDeque<FeatureMap>,
    channels: usize,
    freq: usize,
}

impl LayerCache {
    pub fn new(len: usize, channels: usize, freq: usize) -> Self {
        Self { frames: (0..len).map(|_| FeatureMap::zeros(channels, freq)).collect(), channels, freq }
    }

    /// `(channels, frames held)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.channels, self.frames.len())
    }

    pub fn freq(&self) -> usize {
        self.freq
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The frame `back` steps before the newest input (`back >= 1`).
    pub fn past(&self, back: usize) -> &FeatureMap {
        &self.frames[self.frames.len() - back]
    }

    pub fn frames(&self) -> impl Iterator<Item = &FeatureMap> {
        self.frames.iter()
    }

    /// Drops the oldest frame and appends `frame`, reusing the dropped
    /// buffer.
    pub fn push(&mut self, frame: &FeatureMap) {
        if let Some(mut oldest) = self.frames.pop_front() {
            oldest.data.copy_from_slice(&frame.data);
            self.frames.push_back(oldest);
        }
    }
}

/// Streaming state of one network: one cache per convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetState {
    pub(crate) caches: Vec<LayerCache>,
    pub(crate) frames_seen: u64,
}

impl NetState {
    pub fn caches(&self) -> &[LayerCache] {
        &self.caches
    }

    pub fn frames_seen(&self) -> u64 {
        self.frames_seen
    }

    /// Total floats held across all caches; constant over a stream.
    pub fn cached_values(&self) -> usize {
        self.caches.iter().map(|c| c.len() * c.channels * c.freq).sum()
    }
}
