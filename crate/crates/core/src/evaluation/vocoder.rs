//! Mel features back to waveforms.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use crate::error::{Error, Result};
use crate::features::mel::{MelFilterbank, SpeechFeatures, Stft, N_BINS, N_MELS};
use crate::features::Waveform;
use crate::graph::Mat;

/// Normalized `T × 240` features to a `T × 80` log-mel matrix using the
/// statistics of `stats_from`.
pub fn features_to_mel(features: &Mat, stats_from: &SpeechFeatures) -> Result<Mat> {
    if features.ncols() != stats_from.frames.ncols() {
        return Err(Error::ShapeMismatch {
            what: "features to invert".into(),
            expected: (features.nrows(), stats_from.frames.ncols()),
            got: features.dim(),
        });
    }
    Ok(SpeechFeatures::mel_block(&stats_from.denormalize(features)))
}

/// Linear magnitudes `T × N_BINS` from a log-mel matrix via the
/// filterbank pseudo-inverse.
pub fn mel_to_magnitude(log_mel: &Mat) -> Result<Mat> {
    if log_mel.ncols() != N_MELS {
        return Err(Error::ShapeMismatch {
            what: "log-mel input".into(),
            expected: (log_mel.nrows(), N_MELS),
            got: log_mel.dim(),
        });
    }
    let pinv = MelFilterbank::new().pseudo_inverse();
    let power = log_mel.mapv(f64::exp).dot(&pinv.t());
    Ok(power.mapv(|p| p.max(0.0).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GriffinLim {
    pub waveform: Waveform,
    /// Relative spectral magnitude error after each iteration.
    pub errors: Vec<f64>,
}

fn spectral_error(stft: &Stft, x: &[f64], target: &Mat) -> (f64, Vec<Vec<Complex<f64>>>) {
    let spec = stft.forward(x);
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, frame) in spec.iter().enumerate() {
        for (k, c) in frame.iter().enumerate() {
            num += (c.norm() - target[[t, k]]).powi(2);
            den += target[[t, k]].powi(2);
        }
    }
    ((num / den.max(1e-300)).sqrt(), spec)
}

fn with_phase(mag: &Mat, phase_of: &[Vec<Complex<f64>>]) -> Vec<Vec<Complex<f64>>> {
    (0..mag.nrows())
        .map(|t| {
            (0..N_BINS)
                .map(|k| {
                    let c = phase_of[t][k];
                    let n = c.norm();
                    let unit = if n > 0.0 { c / n } else { Complex::new(1.0, 0.0) };
                    unit * mag[[t, k]]
                })
                .collect()
        })
        .collect()
}

/// Iterative phase retrieval from a `T × 80` log-mel matrix. Output has
/// `(T−1)·160 + 400` samples.
pub fn griffin_lim(log_mel: &Mat, iterations: usize) -> Result<GriffinLim> {
    if iterations == 0 {
        return Err(Error::Config("griffin_lim needs at least one iteration".into()));
    }
    if log_mel.nrows() == 0 {
        return Err(Error::TooShort {
            what: "griffin_lim frames",
            needed: 1,
            got: 0,
        });
    }
    let mag = mel_to_magnitude(log_mel)?;
    let stft = Stft::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6_1a);
    let init: Vec<Vec<Complex<f64>>> = (0..mag.nrows())
        .map(|_| {
            (0..N_BINS)
                .map(|_| Complex::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect();
    let mut spec = with_phase(&mag, &init);
    let mut errors = Vec::with_capacity(iterations);
    let mut x = Vec::new();
    for _ in 0..iterations {
        x = stft.inverse(&spec);
        let (err, est) = spectral_error(&stft, &x, &mag);
        errors.push(err);
        spec = with_phase(&mag, &est);
    }
    Ok(GriffinLim {
        waveform: Waveform::new(x),
        errors,
    })
}

/// One inverse STFT of the mel magnitudes with the phase of `phase_source`.
pub fn reconstruct_with_phase(log_mel: &Mat, phase_source: &Waveform) -> Result<Waveform> {
    let mag = mel_to_magnitude(log_mel)?;
    let stft = Stft::new();
    let phase = stft.forward(&phase_source.samples);
    if phase.len() < mag.nrows() {
        return Err(Error::LengthMismatch {
            what: "phase source frames",
            left: phase.len(),
            right: mag.nrows(),
        });
    }
    Ok(Waveform::new(stft.inverse(&with_phase(&mag, &phase))))
}

/// Repeats or drops rows evenly to reach `target` rows.
pub fn stretch_rows(m: &Mat, target: usize) -> Mat {
    let t = m.nrows();
    Array2::from_shape_fn((target, m.ncols()), |(i, j)| m[[(i * t / target.max(1)).min(t - 1), j]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::mel::{mel_spectrogram, samples_for_frames, N_FFT};
    use rustfft::FftPlanner;

    fn tone(n: usize, f: f64) -> Waveform {
        Waveform::new(
            (0..n)
                .map(|i| 0.5 * (2.0 * std::f64::consts::PI * f * i as f64 / 16_000.0).sin())
                .collect(),
        )
    }

    #[test]
    fn length_and_monotone_error() {
        let mel = mel_spectrogram(&tone(8000, 700.0)).unwrap();
        let gl = griffin_lim(&mel, 32).unwrap();
        assert_eq!(gl.waveform.len(), samples_for_frames(mel.nrows()));
        assert_eq!(gl.waveform.len(), (mel.nrows() - 1) * 160 + 400);
        assert!(gl.errors[31] <= gl.errors[0]);
        assert!(griffin_lim(&mel, 0).is_err());
    }

    #[test]
    fn pure_tone_peak() {
        let f0 = 1000.0;
        let mel = mel_spectrogram(&tone(16_000, f0)).unwrap();
        let gl = griffin_lim(&mel, 32).unwrap();
        let x = &gl.waveform.samples[4000..4000 + N_FFT];
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(N_FFT).process(&mut buf);
        let peak = (0..N_FFT / 2)
            .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()))
            .unwrap();
        let bin = f0 * N_FFT as f64 / 16_000.0;
        assert!((peak as f64 - bin).abs() <= 1.0, "peak bin {peak} vs {bin}");
    }

    #[test]
    fn stretch_keeps_endpoints() {
        let m = Array2::from_shape_fn((4, 1), |(i, _)| i as f64);
        assert_eq!(stretch_rows(&m, 8).column(0).to_vec(), vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert_eq!(stretch_rows(&m, 2).column(0).to_vec(), vec![0.0, 2.0]);
    }
}
