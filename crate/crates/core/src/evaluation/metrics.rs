//! Pure task metrics.

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::ctc;
use crate::error::{Error, Result};
use crate::features::audio::resample;
use crate::features::{Waveform, SAMPLE_RATE};
use crate::graph::Mat;

/// SiSDR values are clamped to `±SISDR_CAP_DB`.
pub const SISDR_CAP_DB: f64 = 60.0;

/// Greedy CTC decoding of `T′ × (V+1)` posteriors with the blank in the
/// last column.
pub fn greedy_ctc_decode(posteriors: &Mat) -> Vec<usize> {
    let blank = posteriors.ncols().saturating_sub(1);
    ctc::greedy_decode(posteriors.view(), blank)
}

/// Levenshtein distance with unit substitution, deletion and insertion costs.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Word error rate `(S + D + I) / |ref|`.
pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// WER of whitespace-separated strings.
pub fn wer_str(hyp: &str, reference: &str) -> Result<f64> {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    wer(&h, &r)
}

/// Corpus WER: total edits over total reference words.
pub fn corpus_wer<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<f64> {
    let (mut edits, mut words) = (0usize, 0usize);
    for (hyp, reference) in pairs {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        edits += edit_distance(&h, &r);
        words += r.len();
    }
    if words == 0 {
        return Err(Error::EmptyReference);
    }
    Ok(edits as f64 / words as f64)
}

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let mu = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| v - mu).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SDR in dB before capping.
pub fn sisdr_uncapped(est: &Waveform, reference: &Waveform) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::LengthMismatch {
            what: "sisdr signals",
            left: est.len(),
            right: reference.len(),
        });
    }
    let s = zero_mean(&reference.samples);
    let e = zero_mean(&est.samples);
    let ss = dot(&s, &s);
    if ss <= 0.0 {
        return Err(Error::SilentReference);
    }
    let alpha = dot(&e, &s) / ss;
    let target: f64 = alpha * alpha * ss;
    let noise: f64 = e
        .iter()
        .zip(&s)
        .map(|(ei, si)| (ei - alpha * si).powi(2))
        .sum();
    Ok(10.0 * (target / noise).log10())
}

pub fn sisdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    let v = sisdr_uncapped(est, reference)?;
    Ok(if v.is_nan() {
        -SISDR_CAP_DB
    } else {
        v.clamp(-SISDR_CAP_DB, SISDR_CAP_DB)
    })
}

const STOI_FS: u32 = 10_000;
const STOI_FRAME: usize = 256;
const STOI_NFFT: usize = 512;
const STOI_BANDS: usize = 15;
const STOI_MIN_FREQ: f64 = 150.0;
const STOI_SEGMENT: usize = 30;
const STOI_BETA_DB: f64 = -15.0;
const STOI_DYN_RANGE_DB: f64 = 40.0;

/// Shortest input accepted by [`stoi`]: one 384 ms analysis segment.
pub const STOI_MIN_SAMPLES: usize = (SAMPLE_RATE as usize * 384) / 1000;

fn stoi_window() -> Vec<f64> {
    // Hann of length N+2 with the zero end points dropped.
    let n = STOI_FRAME + 2;
    (1..n - 1)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

fn frame_starts(len: usize) -> Vec<usize> {
    let hop = STOI_FRAME / 2;
    if len < STOI_FRAME {
        return Vec::new();
    }
    (0..=(len - STOI_FRAME) / hop).map(|k| k * hop).collect()
}

fn remove_silent_frames(x: &[f64], y: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let starts = frame_starts(x.len());
    let energy: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = (0..STOI_FRAME).map(|i| (w[i] * x[s + i]).powi(2)).sum();
            20.0 * (e.sqrt() + f64::EPSILON).log10()
        })
        .collect();
    let max = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energy)
        .filter(|(_, &e)| e > max - STOI_DYN_RANGE_DB)
        .map(|(&s, _)| s)
        .collect();
    let hop = STOI_FRAME / 2;
    let n = if kept.is_empty() { 0 } else { (kept.len() - 1) * hop + STOI_FRAME };
    let mut xs = vec![0.0; n];
    let mut ys = vec![0.0; n];
    for (k, &s) in kept.iter().enumerate() {
        for i in 0..STOI_FRAME {
            xs[k * hop + i] += w[i] * x[s + i];
            ys[k * hop + i] += w[i] * y[s + i];
        }
    }
    (xs, ys)
}

/// One-third octave band magnitudes, `bands × frames`.
fn third_octave(x: &[f64], w: &[f64], obm: &[(usize, usize)]) -> Mat {
    let starts = frame_starts(x.len());
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(STOI_NFFT);
    let mut out = Array2::zeros((STOI_BANDS, starts.len()));
    let mut buf = vec![Complex::new(0.0, 0.0); STOI_NFFT];
    for (t, &s) in starts.iter().enumerate() {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < STOI_FRAME {
                Complex::new(w[i] * x[s + i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (band, &(lo, hi)) in obm.iter().enumerate() {
            let p: f64 = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum();
            out[[band, t]] = p.sqrt();
        }
    }
    out
}

fn band_edges() -> Vec<(usize, usize)> {
    let n_bins = STOI_NFFT / 2 + 1;
    let freqs: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * STOI_FS as f64 / STOI_NFFT as f64)
        .collect();
    let nearest = |f: f64| {
        let mut best = 0;
        for (i, &fi) in freqs.iter().enumerate() {
            if (fi - f).powi(2) < (freqs[best] - f).powi(2) {
                best = i;
            }
        }
        best
    };
    (0..STOI_BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = STOI_MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = STOI_MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// Short-time objective intelligibility of `est` against the clean `reference`.
pub fn stoi(est: &Waveform, reference: &Waveform) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::LengthMismatch {
            what: "stoi signals",
            left: est.len(),
            right: reference.len(),
        });
    }
    if reference.len() < STOI_MIN_SAMPLES {
        return Err(Error::TooShort {
            what: "stoi samples",
            needed: STOI_MIN_SAMPLES,
            got: reference.len(),
        });
    }
    let x = resample(&reference.samples, reference.sample_rate, STOI_FS);
    let y = resample(&est.samples, est.sample_rate, STOI_FS);
    let w = stoi_window();
    let (x, y) = remove_silent_frames(&x, &y, &w);
    let obm = band_edges();
    let xt = third_octave(&x, &w, &obm);
    let yt = third_octave(&y, &w, &obm);
    let frames = xt.ncols();
    if frames < STOI_SEGMENT {
        return Err(Error::TooShort {
            what: "stoi active frames",
            needed: STOI_SEGMENT,
            got: frames,
        });
    }
    let clip = 10f64.powf(-STOI_BETA_DB / 20.0);
    let eps = f64::EPSILON;
    let mut total = 0.0;
    let mut count = 0usize;
    for m in STOI_SEGMENT..=frames {
        for b in 0..STOI_BANDS {
            let xs: Vec<f64> = (m - STOI_SEGMENT..m).map(|t| xt[[b, t]]).collect();
            let ys: Vec<f64> = (m - STOI_SEGMENT..m).map(|t| yt[[b, t]]).collect();
            let k = dot(&xs, &xs).sqrt() / (dot(&ys, &ys).sqrt() + eps);
            let yp: Vec<f64> = ys
                .iter()
                .zip(&xs)
                .map(|(yv, xv)| (yv * k).min(xv * (1.0 + clip)))
                .collect();
            let xc = zero_mean(&xs);
            let yc = zero_mean(&yp);
            let xn = dot(&xc, &xc).sqrt() + eps;
            let yn = dot(&yc, &yc).sqrt() + eps;
            total += dot(&xc, &yc) / (xn * yn);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean squared difference over the frames both matrices share.
pub fn mel_mse(pred: &Mat, target: &Mat) -> Result<f64> {
    if pred.ncols() != target.ncols() {
        return Err(Error::ShapeMismatch {
            what: "mel_mse feature width".into(),
            expected: target.dim(),
            got: pred.dim(),
        });
    }
    let n = pred.nrows().min(target.nrows());
    if n == 0 || pred.ncols() == 0 {
        return Err(Error::Missing("overlapping frames for mel_mse".into()));
    }
    let mut acc = 0.0;
    for t in 0..n {
        for k in 0..pred.ncols() {
            acc += (pred[[t, k]] - target[[t, k]]).powi(2);
        }
    }
    Ok(acc / (n * pred.ncols()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ctc_decode_examples() {
        let one_hot = |ids: &[usize]| {
            let mut m = Array2::from_elem((ids.len(), 3), -10.0);
            for (t, &k) in ids.iter().enumerate() {
                m[[t, k]] = 0.0;
            }
            m
        };
        assert_eq!(greedy_ctc_decode(&one_hot(&[0, 0, 2, 1])), vec![0, 1]);
        assert!(greedy_ctc_decode(&one_hot(&[2, 2])).is_empty());
        assert_eq!(greedy_ctc_decode(&one_hot(&[0, 2, 0])), vec![0, 0]);
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer_str("a b c", "a b c").unwrap(), 0.0);
        assert!((wer_str("a x c", "a b c").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer_str("", "a b c").unwrap(), 1.0);
        assert!(matches!(wer_str("a", ""), Err(Error::EmptyReference)));
        assert_eq!(edit_distance(&["a", "b"], &["b"]), 1);
    }

    fn tone(n: usize, f: f64) -> Waveform {
        Waveform::new(
            (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 16_000.0).sin())
                .collect(),
        )
    }

    #[test]
    fn sisdr_examples() {
        let r = tone(4000, 440.0);
        assert_eq!(sisdr(&r, &r).unwrap(), SISDR_CAP_DB);
        let twice = Waveform::new(r.samples.iter().map(|v| 2.0 * v).collect());
        assert_eq!(sisdr(&twice, &r).unwrap(), SISDR_CAP_DB);
        // Orthogonal zero-mean noise of equal power.
        let s = zero_mean(&r.samples);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut nz: Vec<f64> = zero_mean(&(0..4000).map(|_| rng.random::<f64>() - 0.5).collect::<Vec<_>>());
        let a = dot(&nz, &s) / dot(&s, &s);
        nz.iter_mut().zip(&s).for_each(|(n, si)| *n -= a * si);
        let nz = zero_mean(&nz);
        let k = (dot(&s, &s) / dot(&nz, &nz)).sqrt();
        let est = Waveform::new(s.iter().zip(&nz).map(|(a, b)| a + k * b).collect());
        assert!(sisdr(&est, &Waveform::new(s)).unwrap().abs() < 1e-6);
        assert!(matches!(
            sisdr(&r, &Waveform::new(vec![0.0; 4000])),
            Err(Error::SilentReference)
        ));
    }

    fn speechlike(n: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new(
            (0..n)
                .map(|i| {
                    let t = i as f64 / 16_000.0;
                    let env = 0.6 + 0.4 * (2.0 * std::f64::consts::PI * 3.0 * t).sin();
                    env * ((2.0 * std::f64::consts::PI * 220.0 * t).sin()
                        + 0.5 * (2.0 * std::f64::consts::PI * 1250.0 * t).sin())
                        + 0.01 * (rng.random::<f64>() - 0.5)
                })
                .collect(),
        )
    }

    #[test]
    fn stoi_examples() {
        let r = speechlike(16_000, 1);
        assert!(stoi(&r, &r).unwrap() >= 0.999);
        let neg = Waveform::new(r.samples.iter().map(|v| -v).collect());
        assert!((stoi(&neg, &r).unwrap() - stoi(&r, &r).unwrap()).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise: Vec<f64> = (0..r.len()).map(|_| rng.random::<f64>() - 0.5).collect();
        let noisy = |g: f64| Waveform::new(r.samples.iter().zip(&noise).map(|(a, b)| a + g * b).collect());
        let small = stoi(&noisy(0.2), &r).unwrap();
        let large = stoi(&noisy(3.0), &r).unwrap();
        assert!(small > large, "{small} vs {large}");
        assert!(matches!(stoi(&tone(3000, 300.0), &tone(3000, 300.0)), Err(Error::TooShort { .. })));
    }

    #[test]
    fn mel_mse_examples() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(mel_mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mel_mse(&(&a + 2.0), &a).unwrap(), 4.0);
        let padded = ndarray::concatenate![ndarray::Axis(0), a, array![[9.0, 9.0]]];
        assert_eq!(mel_mse(&padded, &(&a + 2.0)).unwrap(), 4.0);
        assert!(mel_mse(&Array2::zeros((0, 2)), &a).is_err());
    }
}
