//! Log-mel analysis, regression deltas and per-utterance CMVN.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::audio::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::graph::Mat;

/// 25 ms analysis window.
pub const WIN_LENGTH: usize = 400;
/// 10 ms hop.
pub const HOP_LENGTH: usize = 160;
pub const N_FFT: usize = 512;
pub const N_BINS: usize = N_FFT / 2 + 1;
pub const N_MELS: usize = 80;
pub const FEATURE_DIM: usize = 3 * N_MELS;
pub const LOG_FLOOR: f64 = 1e-10;
pub const F_MIN: f64 = 0.0;
pub const F_MAX: f64 = 8000.0;
const DELTA_WIDTH: usize = 2;
const CMVN_MIN_VAR: f64 = 1e-10;

/// Frame count of an `n`-sample signal (no centering).
pub fn frame_count(n: usize) -> usize {
    if n < WIN_LENGTH {
        0
    } else {
        1 + (n - WIN_LENGTH) / HOP_LENGTH
    }
}

/// Sample count produced by overlap-adding `frames` frames.
pub fn samples_for_frames(frames: usize) -> usize {
    if frames == 0 {
        0
    } else {
        (frames - 1) * HOP_LENGTH + WIN_LENGTH
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, rows are filters over the `N_BINS` FFT bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub weights: Mat,
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new() -> Self {
        let m_lo = hz_to_mel(F_MIN);
        let m_hi = hz_to_mel(F_MAX);
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
        let mut weights = Array2::zeros((N_MELS, N_BINS));
        for m in 0..N_MELS {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..N_BINS {
                let f = k as f64 * bin_hz;
                let up = (f - lo) / (mid - lo);
                let down = (hi - f) / (hi - mid);
                weights[[m, k]] = up.min(down).max(0.0);
            }
        }
        Self {
            weights,
            centers_hz: edges[1..=N_MELS].to_vec(),
        }
    }

    /// Least-squares inverse mapping mel energies back to linear bins.
    pub fn pseudo_inverse(&self) -> Mat {
        let m = nalgebra::DMatrix::from_fn(N_MELS, N_BINS, |i, j| self.weights[[i, j]]);
        let pinv = m
            .pseudo_inverse(1e-10)
            .expect("SVD of the mel filterbank does not fail");
        Array2::from_shape_fn((N_BINS, N_MELS), |(i, j)| pinv[(i, j)])
    }
}

impl Default for MelFilterbank {
    fn default() -> Self {
        Self::new()
    }
}

pub fn hann_window() -> Vec<f64> {
    (0..WIN_LENGTH)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WIN_LENGTH as f64).cos())
        .collect()
}

/// Short-time Fourier transform with the fixed 400/160/512 framing.
pub struct Stft {
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl Default for Stft {
    fn default() -> Self {
        Self::new()
    }
}

impl Stft {
    pub fn new() -> Self {
        let mut planner = FftPlanner::new();
        Self {
            fft: planner.plan_fft_forward(N_FFT),
            ifft: planner.plan_fft_inverse(N_FFT),
            window: hann_window(),
        }
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// One row of `N_BINS` complex coefficients per frame.
    pub fn forward(&self, x: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let n_frames = frame_count(x.len());
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        (0..n_frames)
            .map(|t| {
                let start = t * HOP_LENGTH;
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = if i < WIN_LENGTH {
                        Complex::new(x[start + i] * self.window[i], 0.0)
                    } else {
                        Complex::new(0.0, 0.0)
                    };
                }
                self.fft.process(&mut buf);
                buf[..N_BINS].to_vec()
            })
            .collect()
    }

    /// Least-squares overlap-add inverse of [`Stft::forward`].
    pub fn inverse(&self, spec: &[Vec<Complex<f64>>]) -> Vec<f64> {
        let n = samples_for_frames(spec.len());
        let mut out = vec![0.0; n];
        let mut norm = vec![0.0; n];
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        for (t, frame) in spec.iter().enumerate() {
            for k in 0..N_BINS {
                buf[k] = frame[k];
            }
            for k in N_BINS..N_FFT {
                buf[k] = frame[N_FFT - k].conj();
            }
            self.ifft.process(&mut buf);
            let start = t * HOP_LENGTH;
            for i in 0..WIN_LENGTH {
                let w = self.window[i];
                out[start + i] += w * buf[i].re / N_FFT as f64;
                norm[start + i] += w * w;
            }
        }
        for (o, z) in out.iter_mut().zip(&norm) {
            if *z > 1e-12 {
                *o /= z;
            }
        }
        out
    }
}

/// Power spectrogram `T × N_BINS`.
pub fn power_spectrogram(stft: &Stft, x: &[f64]) -> Mat {
    let frames = stft.forward(x);
    let mut out = Array2::zeros((frames.len(), N_BINS));
    for (t, f) in frames.iter().enumerate() {
        for (k, c) in f.iter().enumerate() {
            out[[t, k]] = c.norm_sqr();
        }
    }
    out
}

/// 80-band log-mel spectrogram with `T = 1 + ⌊(N − 400)/160⌋` frames.
pub fn mel_spectrogram(w: &Waveform) -> Result<Mat> {
    if w.len() < WIN_LENGTH {
        return Err(Error::TooShort {
            what: "mel analysis window",
            needed: WIN_LENGTH,
            got: w.len(),
        });
    }
    let fb = MelFilterbank::new();
    let power = power_spectrogram(&Stft::new(), &w.samples);
    let mel = power.dot(&fb.weights.t());
    Ok(mel.mapv(|v| v.max(LOG_FLOOR).ln()))
}

fn deltas(x: &Mat) -> Mat {
    let t_len = x.nrows() as isize;
    let denom: f64 = 2.0 * (1..=DELTA_WIDTH).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = Array2::zeros(x.dim());
    for t in 0..t_len {
        let mut row = out.row_mut(t as usize);
        for n in 1..=DELTA_WIDTH as isize {
            let fwd = x.row((t + n).clamp(0, t_len - 1) as usize);
            let bwd = x.row((t - n).clamp(0, t_len - 1) as usize);
            row.scaled_add(n as f64 / denom, &(&fwd - &bwd));
        }
    }
    out
}

/// Appends first- and second-order regression deltas: `[mel | Δ | ΔΔ]`.
pub fn add_deltas(mel: &Mat) -> Mat {
    let d1 = deltas(mel);
    let d2 = deltas(&d1);
    ndarray::concatenate(Axis(1), &[mel.view(), d1.view(), d2.view()])
        .expect("delta blocks share the row count")
}

/// Per-dimension statistics removed by CMVN.
#[derive(Debug, Clone, PartialEq)]
pub struct CmvnStats {
    pub mean: Vec<f64>,
    /// 1.0 for dimensions that were only mean-subtracted.
    pub std: Vec<f64>,
}

/// Normalized `T × 240` frame matrix for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechFeatures {
    pub frames: Mat,
    pub normalized: bool,
    pub stats: Option<CmvnStats>,
}

impl SpeechFeatures {
    pub fn raw(frames: Mat) -> Self {
        Self {
            frames,
            normalized: false,
            stats: None,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    /// Undo CMVN on any matrix with this utterance's column layout.
    pub fn denormalize(&self, m: &Mat) -> Mat {
        match &self.stats {
            None => m.clone(),
            Some(st) => {
                let mut out = m.clone();
                for mut row in out.rows_mut() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = *v * st.std[j] + st.mean[j];
                    }
                }
                out
            }
        }
    }

    /// The static mel block of a `T × 240` matrix.
    pub fn mel_block(m: &Mat) -> Mat {
        m.slice(s![.., ..N_MELS]).to_owned()
    }
}

/// Per-utterance mean and variance normalization.
pub fn cmvn(f: &Mat) -> Result<SpeechFeatures> {
    let t_len = f.nrows();
    if t_len < 2 {
        return Err(Error::TooShort {
            what: "CMVN frames",
            needed: 2,
            got: t_len,
        });
    }
    let n = t_len as f64;
    let mut mean = Vec::with_capacity(f.ncols());
    let mut std = Vec::with_capacity(f.ncols());
    let mut out = f.clone();
    for mut col in out.columns_mut() {
        let mu = col.sum() / n;
        col.mapv_inplace(|v| v - mu);
        let var = col.iter().map(|v| v * v).sum::<f64>() / n;
        let sd = if var < CMVN_MIN_VAR { 1.0 } else { var.sqrt() };
        col.mapv_inplace(|v| v / sd);
        mean.push(mu);
        std.push(sd);
    }
    Ok(SpeechFeatures {
        frames: out,
        normalized: true,
        stats: Some(CmvnStats { mean, std }),
    })
}

/// Full front end: log-mel, deltas, CMVN.
pub fn extract_features(w: &Waveform) -> Result<SpeechFeatures> {
    cmvn(&add_deltas(&mel_spectrogram(w)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frame_counts() {
        assert_eq!(frame_count(16000), 98);
        assert_eq!(frame_count(400), 1);
        assert_eq!(frame_count(399), 0);
        let w = Waveform::new(vec![0.1; 16000]);
        assert_eq!(mel_spectrogram(&w).unwrap().dim(), (98, 80));
        let w = Waveform::new(vec![0.1; 400]);
        assert_eq!(mel_spectrogram(&w).unwrap().nrows(), 1);
        assert!(mel_spectrogram(&Waveform::new(vec![0.0; 399])).is_err());
    }

    #[test]
    fn frame_count_matches_window_enumeration() {
        for n in 400..2500 {
            let mut count = 0;
            let mut start = 0;
            while start + WIN_LENGTH <= n {
                count += 1;
                start += HOP_LENGTH;
            }
            assert_eq!(frame_count(n), count, "n = {n}");
        }
    }

    #[test]
    fn tone_peaks_in_its_mel_band() {
        let w = Waveform::new(
            (0..16000)
                .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin())
                .collect(),
        );
        let mel = mel_spectrogram(&w).unwrap();
        let mean = mel.mean_axis(Axis(0)).unwrap();
        let peak = crate::ctc::argmax(mean.iter().copied());
        // centers recomputed from the mel scale definition
        let step = 2595.0 * (1.0f64 + 8000.0 / 700.0).log10() / 81.0;
        let centers: Vec<f64> = (1..=80)
            .map(|i| 700.0 * (10f64.powf(i as f64 * step / 2595.0) - 1.0))
            .collect();
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 440.0).abs().total_cmp(&(b.1 - 440.0).abs()))
            .unwrap()
            .0;
        assert!(
            (peak as isize - nearest as isize).abs() <= 1,
            "peak {peak}, nearest center {nearest}"
        );
    }

    #[test]
    fn deltas_of_constant_and_ramp() {
        let c = Array2::from_elem((6, 80), 3.0);
        let d = add_deltas(&c);
        assert_eq!(d.ncols(), 240);
        assert!(d.slice(s![.., 80..]).iter().all(|&v| v == 0.0));

        let ramp = Array2::from_shape_fn((12, 80), |(t, _)| t as f64);
        let d = add_deltas(&ramp);
        // interior frames see the full ±2 window for Δ and for ΔΔ
        for t in 2..10 {
            assert!((d[[t, 80]] - 1.0).abs() < 1e-12);
        }
        for t in 4..8 {
            assert!(d[[t, 160]].abs() < 1e-12);
        }

        let single = Array2::from_elem((1, 80), 1.5);
        let d = add_deltas(&single);
        assert!(d.slice(s![.., 80..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cmvn_statistics_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Array2::from_shape_fn((50, 240), |_| rng.random_range(-5.0..9.0));
        let n = cmvn(&f).unwrap();
        for col in n.frames.columns() {
            let mean = col.sum() / 50.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        let twice = cmvn(&n.frames).unwrap();
        let diff = (&twice.frames - &n.frames).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-6);
        let restored = n.denormalize(&n.frames);
        assert!((&restored - &f).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b)) < 1e-9);
    }

    #[test]
    fn cmvn_constant_and_short_inputs() {
        let c = Array2::from_elem((5, 240), 2.5);
        assert!(cmvn(&c).unwrap().frames.iter().all(|&v| v == 0.0));
        assert!(cmvn(&Array2::zeros((1, 240))).is_err());
    }

    #[test]
    fn stft_inverse_reconstructs_interior() {
        let x: Vec<f64> = (0..4000).map(|i| ((i * 13) % 97) as f64 / 97.0 - 0.5).collect();
        let stft = Stft::new();
        let y = stft.inverse(&stft.forward(&x));
        assert_eq!(y.len(), samples_for_frames(frame_count(x.len())));
        for i in 10..y.len() - 10 {
            assert!((x[i] - y[i]).abs() < 1e-9);
        }
    }
}
