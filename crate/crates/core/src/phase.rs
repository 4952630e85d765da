//! Real-time iterative spectrogram inversion with the Difference Map.
//!
//! Frames are handled strictly in order with no look-ahead. Each new frame
//! is iterated against two constraint sets: A, spectra with the target
//! magnitudes, and B, spectra consistent with the already committed
//! overlap-add context. Everything here works on uncompressed magnitudes.

use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use crate::dsp::{decompress, Stft, StftConfig};
use crate::error::{Error, Result};
use crate::mel::MelOperator;

/// Which projection plays the role of `P_1` in
/// `x <- x + beta (P_1(f_2(x)) - P_2(f_1(x)))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DmVariant {
    /// `P_1` = magnitude projection, `P_2` = consistency projection.
    #[default]
    Standard,
    Swapped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmConfig {
    pub beta: f32,
    pub iters_per_frame: usize,
    pub variant: DmVariant,
}

impl Default for DmConfig {
    fn default() -> Self {
        Self { beta: 1.75, iters_per_frame: 50, variant: DmVariant::Standard }
    }
}

impl DmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta == 0.0 || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be finite and nonzero, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Committed overlap-add context of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RtisiState {
    /// `sum w * z` over committed frames, aligned to the current window.
    num: Vec<f32>,
    /// `sum w^2` over committed frames.
    den: Vec<f32>,
    frame: u64,
    residuals: Vec<f32>,
}

impl RtisiState {
    pub fn frames_committed(&self) -> u64 {
        self.frame
    }

    /// Consistency residual `||P_B(x) - x||` of the frame estimate before
    /// the first iteration and after each iteration, for the last frame.
    pub fn residuals(&self) -> &[f32] {
        &self.residuals
    }

    /// The part of the next window already fixed by committed frames.
    pub fn committed_tail(&self) -> &[f32] {
        &self.num
    }
}

pub struct Rtisi {
    stft: Stft,
    cfg: DmConfig,
    /// Steady-state `sum_k w[m + k hop]^2`, one entry per hop offset.
    ola_norm: Vec<f32>,
}

impl Rtisi {
    pub fn new(stft_cfg: StftConfig, cfg: DmConfig) -> Result<Self> {
        cfg.validate()?;
        let stft = Stft::new(stft_cfg)?;
        let hop = stft.config().hop_len;
        let w = stft.window();
        let ola_norm = (0..hop).map(|m| (m..w.len()).step_by(hop).map(|i| w[i] * w[i]).sum()).collect();
        Ok(Self { stft, cfg, ola_norm })
    }

    pub fn config(&self) -> &DmConfig {
        &self.cfg
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn new_state(&self) -> RtisiState {
        let n = self.stft.config().window_len;
        RtisiState { num: vec![0.0; n], den: vec![0.0; n], frame: 0, residuals: Vec::new() }
    }

    /// `P_A`: target magnitudes with the phases of `x`; zero bins get phase 0.
    pub fn project_magnitude(x: &[Complex32], target: &[f32]) -> Vec<Complex32> {
        x.iter()
            .zip(target)
            .map(|(&z, &m)| {
                let r = z.norm();
                if r > 0.0 {
                    z * (m / r)
                } else {
                    Complex32::new(m, 0.0)
                }
            })
            .collect()
    }

    /// `P_B`: overlap-adds the frame into the committed context (least
    /// squares per sample) and re-analyzes the window.
    pub fn project_consistent(&self, x: &[Complex32], state: &RtisiState) -> Vec<Complex32> {
        let z = self.stft.raw_inverse(x);
        let w = self.stft.window();
        let mut buf: Vec<f32> = (0..z.len())
            .map(|m| {
                let d = state.den[m] + w[m] * w[m];
                let y = if d > 0.0 { (state.num[m] + w[m] * z[m]) / d } else { 0.0 };
                w[m] * y
            })
            .collect();
        self.stft.raw_forward(&mut buf)
    }

    fn project(&self, which: Proj, x: &[Complex32], target: &[f32], state: &RtisiState) -> Vec<Complex32> {
        match which {
            Proj::Magnitude => Self::project_magnitude(x, target),
            Proj::Consistency => self.project_consistent(x, state),
        }
    }

    fn roles(&self) -> (Proj, Proj) {
        match self.cfg.variant {
            DmVariant::Standard => (Proj::Magnitude, Proj::Consistency),
            DmVariant::Swapped => (Proj::Consistency, Proj::Magnitude),
        }
    }

    /// One Difference Map update of `x`. Returns the new iterate and the
    /// current solution estimate `P_1(f_2(x))`.
    pub fn dm_iterate(
        &self,
        x: &[Complex32],
        target: &[f32],
        state: &RtisiState,
    ) -> (Vec<Complex32>, Vec<Complex32>) {
        let beta = self.cfg.beta;
        let (p1, p2) = self.roles();
        let a = self.project(p1, x, target, state);
        let b = self.project(p2, x, target, state);
        let f1: Vec<Complex32> = a.iter().zip(x).map(|(&pa, &x)| pa - (pa - x) / beta).collect();
        let f2: Vec<Complex32> = b.iter().zip(x).map(|(&pb, &x)| pb + (pb - x) / beta).collect();
        let sol = self.project(p1, &f2, target, state);
        let other = self.project(p2, &f1, target, state);
        let next = x.iter().zip(sol.iter().zip(&other)).map(|(&x, (&s, &o))| x + (s - o) * beta).collect();
        (next, sol)
    }

    fn residual(&self, x: &[Complex32], state: &RtisiState) -> f32 {
        let p = self.project_consistent(x, state);
        p.iter().zip(x).map(|(a, b)| (a - b).norm_sqr()).sum::<f32>().sqrt()
    }

    /// Phase seed for a new frame: re-analysis of the committed context with
    /// the new region left at zero.
    fn initial_estimate(&self, target: &[f32], state: &RtisiState) -> Vec<Complex32> {
        let w = self.stft.window();
        let mut buf: Vec<f32> = (0..w.len())
            .map(|m| if state.den[m] > 0.0 { w[m] * state.num[m] / state.den[m] } else { 0.0 })
            .collect();
        Self::project_magnitude(&self.stft.raw_forward(&mut buf), target)
    }

    /// Reconstructs one frame from its (uncompressed) magnitudes, commits it
    /// and returns the `hop_len` samples it completes.
    pub fn process_frame(&self, state: &mut RtisiState, target_mag: &[f32]) -> Result<Vec<f32>> {
        if target_mag.len() != self.stft.n_bins() {
            return Err(Error::Shape(format!(
                "expected {} magnitudes, got {}",
                self.stft.n_bins(),
                target_mag.len()
            )));
        }
        if state.num.len() != self.stft.config().window_len {
            return Err(Error::Usage("phase retrieval state not created for this config".into()));
        }
        if let Some(i) = target_mag.iter().position(|&m| !(m >= 0.0 && m.is_finite())) {
            return Err(Error::Data(format!("magnitude {i} is {}", target_mag[i])));
        }

        let committed = if self.cfg.iters_per_frame == 0 {
            state.residuals.clear();
            target_mag.iter().map(|&m| Complex32::new(m, 0.0)).collect()
        } else {
            let mut x = self.initial_estimate(target_mag, state);
            let mut residuals = Vec::with_capacity(self.cfg.iters_per_frame + 1);
            residuals.push(self.residual(&x, state));
            let mut sol = x.clone();
            for _ in 0..self.cfg.iters_per_frame {
                (x, sol) = self.dm_iterate(&x, target_mag, state);
                residuals.push(self.residual(&sol, state));
            }
            state.residuals = residuals;
            sol
        };

        let z = self.stft.raw_inverse(&committed);
        let w = self.stft.window();
        for m in 0..z.len() {
            state.num[m] += w[m] * z[m];
            state.den[m] += w[m] * w[m];
        }
        let hop = self.stft.config().hop_len;
        let out = state.num[..hop].iter().zip(&self.ola_norm).map(|(n, d)| n / d).collect();
        for buf in [&mut state.num, &mut state.den] {
            buf.copy_within(hop.., 0);
            let len = buf.len();
            buf[len - hop..].fill(0.0);
        }
        state.frame += 1;
        Ok(out)
    }

    /// Streams a whole magnitude sequence; `T * hop_len` samples aligned like
    /// streaming synthesis.
    pub fn run(&self, magnitudes: &[Vec<f32>]) -> Result<Vec<f32>> {
        let mut state = self.new_state();
        let mut out = Vec::with_capacity(magnitudes.len() * self.stft.config().hop_len);
        for m in magnitudes {
            out.extend(self.process_frame(&mut state, m)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
enum Proj {
    Magnitude,
    Consistency,
}

/// Uncompressed target magnitudes `|M^+ mel|^(1/alpha)` for each Mel frame.
pub fn mel_targets(mel_op: &MelOperator, mels: &[Vec<f32>], alpha: f32) -> Result<Vec<Vec<f32>>> {
    mels.iter()
        .map(|m| {
            Ok(mel_op
                .pinv_magnitudes(m)?
                .into_iter()
                .map(|v| decompress(Complex32::new(v, 0.0), alpha).re)
                .collect())
        })
        .collect()
}
