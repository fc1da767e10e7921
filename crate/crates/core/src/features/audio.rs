//! Waveform container, WAV I/O, resampling and SNR-controlled mixing.

use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio at [`SAMPLE_RATE`].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn power(&self) -> f64 {
        power(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn check(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::SampleRate(self.sample_rate));
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("waveform samples".into()));
        }
        Ok(())
    }
}

pub fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Reads a PCM (or float) WAV file, averaging channels and resampling to 16 kHz.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            if spec.bits_per_sample == 0 || spec.bits_per_sample > 32 {
                return Err(Error::UnsupportedEncoding(format!(
                    "{}-bit integer PCM",
                    spec.bits_per_sample
                )));
            }
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Wav {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })?
        }
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::UnsupportedEncoding(format!(
                    "{}-bit float",
                    spec.bits_per_sample
                )));
            }
            reader
                .into_samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Wav {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })?
        }
    };
    let mono = downmix(&interleaved, channels);
    let samples = if spec.sample_rate == SAMPLE_RATE {
        mono
    } else {
        resample(&mono, spec.sample_rate, SAMPLE_RATE)
    };
    Ok(Waveform::new(samples))
}

/// Writes 16-bit PCM mono.
pub fn save_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &w.samples {
        writer.write_sample(quantize_i16(s)).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

pub fn quantize_i16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Snaps samples onto the 16-bit grid so in-memory audio equals its WAV file.
pub fn snap_to_i16(samples: &mut [f64]) {
    for s in samples {
        *s = quantize_i16(*s) as f64 / 32768.0;
    }
}

fn downmix(interleaved: &[f64], channels: usize) -> Vec<f64> {
    if channels == 1 {
        return interleaved.to_vec();
    }
    interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect()
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
/// Output length is `round(len · to / from)`.
pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let ratio = to as f64 / from as f64;
    let n_out = (x.len() as f64 * ratio).round() as usize;
    let cutoff = ratio.min(1.0);
    let half_width = 16.0 / cutoff;
    (0..n_out)
        .map(|n| {
            let t = n as f64 / ratio;
            let lo = (t - half_width).ceil().max(0.0) as usize;
            let hi = ((t + half_width).floor() as usize).min(x.len() - 1);
            let mut acc = 0.0;
            for (k, &xk) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - k as f64;
                let window = 0.5 + 0.5 * (std::f64::consts::PI * d / half_width).cos();
                acc += xk * cutoff * sinc(cutoff * d) * window;
            }
            acc
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// `clean + g·noise` with `g` chosen so the full-utterance SNR is `snr_db`.
/// The noise is looped or trimmed to the clean length.
pub fn mix_noise(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    clean.check()?;
    noise.check()?;
    if noise.is_empty() {
        return Err(Error::SilentNoise);
    }
    let fitted: Vec<f64> = noise
        .samples
        .iter()
        .copied()
        .cycle()
        .take(clean.len())
        .collect();
    let p_noise = power(&fitted);
    if p_noise == 0.0 {
        return Err(Error::SilentNoise);
    }
    let p_clean = clean.power();
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = clean
        .samples
        .iter()
        .zip(&fitted)
        .map(|(c, n)| c + gain * n)
        .collect();
    Ok(Waveform::new(samples))
}

/// `10·log10(P(clean) / P(mixed − clean))`.
pub fn measured_snr_db(clean: &Waveform, mixed: &Waveform) -> f64 {
    let residual: Vec<f64> = mixed
        .samples
        .iter()
        .zip(&clean.samples)
        .map(|(m, c)| m - c)
        .collect();
    10.0 * (clean.power() / power(&residual)).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, n: usize) -> Waveform {
        Waveform::new(
            (0..n)
                .map(|i| 0.3 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
                .collect(),
        )
    }

    #[test]
    fn silence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        save_wav(&path, &Waveform::new(vec![0.0; 16000])).unwrap();
        let w = load_wav(&path).unwrap();
        assert_eq!(w.len(), 16000);
        assert!(w.samples.iter().all(|&s| s == 0.0));
        assert_eq!(w.sample_rate, 16000);
    }

    #[test]
    fn eight_khz_is_upsampled_to_twice_the_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lo.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let n = 4001;
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..n {
            let v = (2.0 * std::f64::consts::PI * 300.0 * i as f64 / 8000.0).sin();
            w.write_sample((v * 10000.0) as i16).unwrap();
        }
        w.finalize().unwrap();
        let loaded = load_wav(&path).unwrap();
        assert_eq!(loaded.len(), 2 * n);
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        let mut max_in = 0i16;
        for i in 0..800 {
            let l = ((i * 37) % 2000) as i16 - 1000;
            let r = ((i * 91) % 3000) as i16 - 1500;
            max_in = max_in.max(l.abs()).max(r.abs());
            w.write_sample(l).unwrap();
            w.write_sample(r).unwrap();
        }
        w.finalize().unwrap();
        let loaded = load_wav(&path).unwrap();
        assert_eq!(loaded.len(), 800);
        assert!(loaded.peak() <= max_in as f64 / 32768.0 + 1e-12);
    }

    #[test]
    fn unreadable_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"not a wav").unwrap();
        assert!(load_wav(&path).is_err());
        assert!(matches!(
            load_wav(dir.path().join("missing.wav")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn zero_db_matches_powers() {
        let clean = tone(440.0, 8000);
        let noise = tone(1234.5, 3000);
        let mixed = mix_noise(&clean, &noise, 0.0).unwrap();
        let residual: Vec<f64> = mixed
            .samples
            .iter()
            .zip(&clean.samples)
            .map(|(m, c)| m - c)
            .collect();
        let rel = (power(&residual) - clean.power()).abs() / clean.power();
        assert!(rel < 1e-6);
    }

    #[test]
    fn high_snr_is_nearly_clean() {
        let clean = tone(440.0, 8000);
        let noise = tone(2000.0, 8000);
        let mixed = mix_noise(&clean, &noise, 40.0).unwrap();
        let err: f64 = mixed
            .samples
            .iter()
            .zip(&clean.samples)
            .map(|(m, c)| (m - c).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = clean.samples.iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!(err / norm < 0.011);
    }

    #[test]
    fn silent_noise_is_rejected() {
        let clean = tone(440.0, 100);
        let noise = Waveform::new(vec![0.0; 50]);
        assert!(matches!(mix_noise(&clean, &noise, 3.0), Err(Error::SilentNoise)));
    }
}
