//! Mel filterbank, its Moore-Penrose pseudoinverse and the per-frame
//! Mel-compress / pseudoinverse-decompress corruption.
//!
//! The filterbank acts on the same compressed magnitudes that flow through
//! the rest of the engine.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dsp::{SpectroFrame, StftConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MelScale {
    Slaney,
    Htk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub mel_scale: MelScale,
    /// Divide each triangle by its bandwidth so all filters have equal area.
    pub area_norm: bool,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { n_mels: 80, f_min: 0.0, f_max: 8000.0, mel_scale: MelScale::Slaney, area_norm: true }
    }
}

pub fn hz_to_mel(hz: f64, scale: MelScale) -> f64 {
    match scale {
        MelScale::Htk => 2595.0 * (1.0 + hz / 700.0).log10(),
        MelScale::Slaney => {
            let f_sp = 200.0 / 3.0;
            let min_log_hz = 1000.0;
            let min_log_mel = min_log_hz / f_sp;
            let logstep = 6.4f64.ln() / 27.0;
            if hz >= min_log_hz {
                min_log_mel + (hz / min_log_hz).ln() / logstep
            } else {
                hz / f_sp
            }
        }
    }
}

pub fn mel_to_hz(mel: f64, scale: MelScale) -> f64 {
    match scale {
        MelScale::Htk => 700.0 * (10f64.powf(mel / 2595.0) - 1.0),
        MelScale::Slaney => {
            let f_sp = 200.0 / 3.0;
            let min_log_hz = 1000.0;
            let min_log_mel = min_log_hz / f_sp;
            let logstep = 6.4f64.ln() / 27.0;
            if mel >= min_log_mel {
                min_log_hz * (logstep * (mel - min_log_mel)).exp()
            } else {
                f_sp * mel
            }
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{rows}x{cols} matrix needs {} values, got {}", rows * cols, data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f32]) -> Vec<f32> {
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |r, c| self.get(r, c) as f64)
    }

    fn from_nalgebra(m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows())
            .flat_map(|r| (0..m.ncols()).map(move |c| (r, c)))
            .map(|(r, c)| m[(r, c)] as f32)
            .collect();
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }
}

/// Moore-Penrose pseudoinverse via SVD, dropping singular values below
/// `rel_tol * sigma_max`.
pub fn pseudo_inverse(m: &Matrix, rel_tol: f64) -> Matrix {
    let svd = m.to_nalgebra().svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = rel_tol * sigma_max;
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let k = svd.singular_values.len();
    let mut pinv = DMatrix::<f64>::zeros(m.cols, m.rows);
    for i in 0..k {
        let s = svd.singular_values[i];
        if s <= cutoff {
            continue;
        }
        let v_col = v_t.row(i).transpose();
        let u_col = u.column(i);
        pinv += (v_col * u_col.transpose()) / s;
    }
    Matrix::from_nalgebra(&pinv)
}

/// `M` and its cached pseudoinverse `M^+`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelOperator {
    forward: Matrix,
    pinv: Matrix,
}

pub const PINV_REL_TOL: f64 = 1e-7;

impl MelOperator {
    pub fn build(mel_cfg: &MelConfig, stft_cfg: &StftConfig) -> Result<Self> {
        let nyquist = stft_cfg.sample_rate as f64 / 2.0;
        let n_stft = stft_cfg.n_bins();
        if !(mel_cfg.f_min >= 0.0 && mel_cfg.f_min < mel_cfg.f_max && mel_cfg.f_max <= nyquist) {
            return Err(Error::Config(format!(
                "need 0 <= f_min < f_max <= {nyquist} Hz, got [{}, {}]",
                mel_cfg.f_min, mel_cfg.f_max
            )));
        }
        if mel_cfg.n_mels == 0 || mel_cfg.n_mels >= n_stft {
            return Err(Error::Config(format!(
                "n_mels must be in 1..{n_stft} (fewer filters than STFT bins), got {}",
                mel_cfg.n_mels
            )));
        }
        let forward = mel_filterbank(mel_cfg, stft_cfg.sample_rate, n_stft);
        Self::from_matrix(forward)
    }

    /// Wraps an arbitrary nonnegative matrix (rows = mel bands).
    pub fn from_matrix(forward: Matrix) -> Result<Self> {
        if forward.data.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Construction("filterbank entries must be finite and nonnegative".into()));
        }
        if let Some(r) = (0..forward.rows).find(|&r| forward.row(r).iter().all(|&v| v == 0.0)) {
            return Err(Error::Construction(format!("mel filter {r} has no nonzero weight (rank collapse)")));
        }
        let pinv = pseudo_inverse(&forward, PINV_REL_TOL);
        Ok(Self { forward, pinv })
    }

    pub fn forward(&self) -> &Matrix {
        &self.forward
    }

    pub fn pinv(&self) -> &Matrix {
        &self.pinv
    }

    pub fn n_mels(&self) -> usize {
        self.forward.rows
    }

    pub fn n_stft(&self) -> usize {
        self.forward.cols
    }

    /// `M |x|`, the Mel frame used as inference input.
    pub fn mel_frame(&self, frame: &SpectroFrame) -> Result<Vec<f32>> {
        if frame.len() != self.n_stft() {
            return Err(Error::Shape(format!("frame has {} bins, operator expects {}", frame.len(), self.n_stft())));
        }
        Ok(self.forward.matvec(&frame.magnitudes()))
    }

    /// `|M^+ mel|`, the rectified pseudoinverse magnitudes.
    pub fn pinv_magnitudes(&self, mel: &[f32]) -> Result<Vec<f32>> {
        if mel.len() != self.n_mels() {
            return Err(Error::Shape(format!("mel vector has {} bands, operator expects {}", mel.len(), self.n_mels())));
        }
        if let Some(i) = mel.iter().position(|&v| !(v >= 0.0)) {
            return Err(Error::Shape(format!("mel band {i} is negative or NaN ({})", mel[i])));
        }
        Ok(self.pinv.matvec(mel).into_iter().map(f32::abs).collect())
    }

    /// `|M^+ mel| + 0j`.
    pub fn pinv_decode_frame(&self, mel: &[f32]) -> Result<SpectroFrame> {
        Ok(SpectroFrame::from_magnitudes(&self.pinv_magnitudes(mel)?))
    }

    /// `|M^+ (M |x|)| + 0j`: drops the phase and smears the magnitudes
    /// through the Mel bottleneck.
    pub fn corrupt_frame(&self, frame: &SpectroFrame) -> Result<SpectroFrame> {
        self.pinv_decode_frame(&self.mel_frame(frame)?)
    }
}

pub fn build_mel_operator(mel_cfg: &MelConfig, stft_cfg: &StftConfig) -> Result<MelOperator> {
    MelOperator::build(mel_cfg, stft_cfg)
}

/// Triangular filters spaced evenly on the Mel scale between `f_min` and
/// `f_max`, evaluated at the STFT bin centre frequencies.
pub fn mel_filterbank(cfg: &MelConfig, sample_rate: u32, n_stft: usize) -> Matrix {
    let n_fft = 2 * (n_stft - 1);
    let fft_freqs: Vec<f64> = (0..n_stft).map(|k| k as f64 * sample_rate as f64 / n_fft as f64).collect();
    let mel_lo = hz_to_mel(cfg.f_min, cfg.mel_scale);
    let mel_hi = hz_to_mel(cfg.f_max, cfg.mel_scale);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64, cfg.mel_scale))
        .collect();
    let mut data = vec![0.0f32; cfg.n_mels * n_stft];
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = if cfg.area_norm { 2.0 / (hi - lo) } else { 1.0 };
        for (k, &f) in fft_freqs.iter().enumerate() {
            let rising = (f - lo) / (mid - lo);
            let falling = (hi - f) / (hi - mid);
            let w = rising.min(falling).max(0.0);
            data[m * n_stft + k] = (w * norm) as f32;
        }
    }
    Matrix { rows: cfg.n_mels, cols: n_stft, data }
}
