//! Deterministic synthetic speech corpus.
//!
//! Each phoneme is a harmonic source shaped by a three-formant envelope.
//! Speakers differ in pitch and in a vocal-tract scale applied to the
//! formants. Utterances `2k` and `2k+1` of a split form a parallel pair with
//! the same words and durations but different speakers.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::audio::{mix_noise, save_wav, snap_to_i16, Waveform};
use super::manifest::{DatasetManifest, ManifestRecord, Split};
use super::mel::HOP_LENGTH;
use super::text::{Bpe, Lexicon, PhonemeInventory, WORD_BOUNDARY};
use crate::error::{Error, Result};

/// Phoneme symbol and its (F1, F2, F3) in Hz for the reference speaker.
pub const TOY_PHONEMES: [(&str, [f64; 3]); 12] = [
    ("a", [800.0, 1300.0, 2600.0]),
    ("e", [500.0, 1900.0, 2600.0]),
    ("i", [300.0, 2300.0, 3000.0]),
    ("o", [500.0, 900.0, 2500.0]),
    ("u", [320.0, 800.0, 2300.0]),
    ("k", [400.0, 1800.0, 3400.0]),
    ("l", [380.0, 1100.0, 2700.0]),
    ("m", [270.0, 1000.0, 2200.0]),
    ("n", [290.0, 1600.0, 2500.0]),
    ("r", [420.0, 1250.0, 1700.0]),
    ("s", [600.0, 2600.0, 4500.0]),
    ("t", [450.0, 2000.0, 3800.0]),
];

pub const TOY_WORDS: [&str; 16] = [
    "sun", "moon", "star", "lake", "tree", "rain", "stone", "milk", "salt", "mint", "nail",
    "rose", "lime", "seal", "mask", "tank",
];

pub const TRAIN_SNRS: [f64; 3] = [3.0, 6.0, 9.0];
pub const TEST_SNRS: [f64; 9] = [-8.0, -6.0, -4.0, -2.0, 0.0, 2.0, 4.0, 6.0, 8.0];

const MIN_PHONE_FRAMES: usize = 4;
const MAX_PHONE_FRAMES: usize = 8;
const AMPLITUDE: f64 = 0.25;
const SPECTRAL_FLOOR: f64 = 0.02;
const BOUNDARY_LEVEL: f64 = 0.03;

pub fn toy_inventory() -> PhonemeInventory {
    let names: Vec<&str> = TOY_PHONEMES.iter().map(|(p, _)| *p).collect();
    PhonemeInventory::new(&names)
}

/// One phoneme per letter; every toy word is spelled from the phoneme names.
pub fn toy_lexicon() -> Lexicon {
    let entries = TOY_WORDS
        .iter()
        .map(|w| (w.to_string(), w.chars().map(|c| c.to_string()).collect()))
        .collect();
    let letter_fallback = TOY_PHONEMES
        .iter()
        .map(|(p, _)| (p.chars().next().unwrap(), p.to_string()))
        .collect();
    Lexicon {
        entries,
        letter_fallback: Some(letter_fallback),
        inventory: toy_inventory(),
    }
}

/// A BPE whose merges turn every toy word into a single token.
pub fn toy_bpe() -> Bpe {
    Bpe::learn(TOY_WORDS, 200)
}

/// Per-speaker voice: fundamental frequency and formant scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voice {
    pub f0: f64,
    pub formant_scale: f64,
}

pub fn speaker_voice(speaker: usize, n_speakers: usize) -> Voice {
    let frac = if n_speakers > 1 {
        speaker as f64 / (n_speakers - 1) as f64
    } else {
        0.0
    };
    // interleave so neighbouring ids differ strongly in both cues
    let scale_frac = ((speaker * 7) % n_speakers.max(1)) as f64 / n_speakers.max(1) as f64;
    Voice {
        f0: 95.0 + 130.0 * frac,
        formant_scale: 0.86 + 0.28 * scale_frac,
    }
}

fn envelope(freq: f64, formants: &[f64; 3], scale: f64) -> f64 {
    let mut e = SPECTRAL_FLOOR;
    for (k, &f) in formants.iter().enumerate() {
        let center = f * scale;
        let bw = 80.0 + 0.1 * center;
        let gain = [1.0, 0.6, 0.3][k];
        e += gain * (-0.5 * ((freq - center) / bw).powi(2)).exp();
    }
    e
}

/// Renders phoneme ids (0 is the word boundary) with per-phoneme frame
/// durations. The result has `160 · Σd + 240` samples, i.e. exactly `Σd`
/// analysis frames. The rendering is a pure function of its inputs.
pub fn synthesize(phonemes: &[usize], durations: &[usize], voice: Voice) -> Vec<f64> {
    let total_frames: usize = durations.iter().sum();
    let n = HOP_LENGTH * total_frames + 240;
    let n_harm = (7600.0 / voice.f0).floor() as usize;
    let mut frame_amp: Vec<Vec<f64>> = Vec::with_capacity(total_frames);
    for (&p, &d) in phonemes.iter().zip(durations) {
        let amps: Vec<f64> = (1..=n_harm)
            .map(|h| {
                if p == 0 {
                    BOUNDARY_LEVEL
                } else {
                    envelope(h as f64 * voice.f0, &TOY_PHONEMES[p - 1].1, voice.formant_scale)
                }
            })
            .collect();
        for _ in 0..d {
            frame_amp.push(amps.clone());
        }
    }
    let norm = 1.0 / (n_harm as f64).sqrt();
    // Schroeder phases keep the crest factor low
    let phase0: Vec<f64> = (0..n_harm)
        .map(|h| PI * (h * h) as f64 / n_harm as f64)
        .collect();
    let mut out = vec![0.0; n];
    for (i, s) in out.iter_mut().enumerate() {
        // frame t is centred on sample 160t + 200
        let pos = (i as f64 - 200.0) / HOP_LENGTH as f64;
        let t0 = pos.floor().clamp(0.0, (total_frames - 1) as f64) as usize;
        let t1 = (t0 + 1).min(total_frames - 1);
        let w = (pos - t0 as f64).clamp(0.0, 1.0);
        let time = i as f64 / 16000.0;
        let mut acc = 0.0;
        for h in 0..n_harm {
            let a = (1.0 - w) * frame_amp[t0][h] + w * frame_amp[t1][h];
            acc += a * (2.0 * PI * (h + 1) as f64 * voice.f0 * time + phase0[h]).sin();
        }
        *s = AMPLITUDE * norm * acc;
    }
    snap_to_i16(&mut out);
    out
}

/// Low-passed, amplitude-modulated Gaussian noise.
pub fn synthesize_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let pole: f64 = rng.random_range(0.3..0.9);
    let rate: f64 = rng.random_range(1.0..6.0);
    let mut state = 0.0;
    (0..n)
        .map(|i| {
            let white: f64 = StandardNormal.sample(rng);
            state = pole * state + (1.0 - pole) * white;
            let m = 0.6 + 0.4 * (2.0 * PI * rate * i as f64 / 16000.0).sin();
            0.1 * state * m
        })
        .collect()
}

/// Records plus the audio they reference, keyed by `audio_path`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub manifest: DatasetManifest,
    pub audio: BTreeMap<String, Waveform>,
    pub n_speakers: usize,
}

impl ToyDataset {
    pub fn waveform(&self, path: &str) -> Result<&Waveform> {
        self.audio
            .get(path)
            .ok_or_else(|| Error::Missing(format!("audio {path}")))
    }

    /// Writes WAVs and `<split>.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (path, w) in &self.audio {
            save_wav(dir.join(path), w)?;
        }
        self.manifest
            .save(dir.join(format!("{}.jsonl", self.manifest.split)))
    }
}

fn split_salt(split: Split) -> u64 {
    match split {
        Split::Train => 0x7261_696e,
        Split::Valid => 0x7661_6c69,
        Split::Test => 0x7465_7374,
    }
}

/// The training split of a toy corpus.
pub fn make_toy_dataset(seed: u64, n_speakers: usize, n_utts: usize) -> Result<ToyDataset> {
    make_toy_split(seed, n_speakers, n_utts, Split::Train)
}

pub fn make_toy_split(seed: u64, n_speakers: usize, n_utts: usize, split: Split) -> Result<ToyDataset> {
    if n_speakers < 2 {
        return Err(Error::Config("toy corpus needs at least 2 speakers".into()));
    }
    if n_utts < n_speakers {
        return Err(Error::Config(format!(
            "toy corpus needs at least as many utterances ({n_utts}) as speakers ({n_speakers})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split_salt(split).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let lexicon = toy_lexicon();
    let mut records = Vec::with_capacity(n_utts);
    let mut audio = BTreeMap::new();
    let mut shared: Option<(Vec<&str>, Vec<usize>)> = None;
    for i in 0..n_utts {
        let paired = i % 2 == 1 || i + 1 < n_utts;
        let (words, durations_seed) = match (i % 2, shared.take()) {
            (1, Some(s)) => s,
            _ => {
                let n_words = rng.random_range(2..=3);
                let words: Vec<&str> = (0..n_words)
                    .map(|_| TOY_WORDS[rng.random_range(0..TOY_WORDS.len())])
                    .collect();
                (words, Vec::new())
            }
        };
        let mut phonemes = Vec::new();
        for (w_i, w) in words.iter().enumerate() {
            if w_i > 0 {
                phonemes.push(WORD_BOUNDARY.to_string());
            }
            phonemes.extend(lexicon.pronounce(w)?);
        }
        let ids: Vec<usize> = phonemes
            .iter()
            .map(|p| lexicon.inventory.id(p).expect("toy phonemes are in the inventory"))
            .collect();
        let durations: Vec<usize> = if durations_seed.is_empty() {
            ids.iter()
                .map(|&p| {
                    if p == 0 {
                        rng.random_range(1..=2)
                    } else {
                        rng.random_range(MIN_PHONE_FRAMES..=MAX_PHONE_FRAMES)
                    }
                })
                .collect()
        } else {
            durations_seed
        };
        if i % 2 == 0 {
            shared = Some((words.clone(), durations.clone()));
        }
        let speaker = i % n_speakers;
        let samples = synthesize(&ids, &durations, speaker_voice(speaker, n_speakers));
        let clean = Waveform::new(samples);
        let noise = Waveform::new(synthesize_noise(clean.len(), &mut rng));
        let snr = match split {
            Split::Train | Split::Valid => TRAIN_SNRS[rng.random_range(0..TRAIN_SNRS.len())],
            Split::Test => TEST_SNRS[rng.random_range(0..TEST_SNRS.len())],
        };
        let mut noisy = mix_noise(&clean, &noise, snr)?;
        snap_to_i16(&mut noisy.samples);
        let id = format!("{split}-{i:05}");
        let audio_path = format!("{id}.wav");
        let noisy_path = format!("{id}-noisy.wav");
        audio.insert(audio_path.clone(), clean);
        audio.insert(noisy_path.clone(), noisy);
        records.push(ManifestRecord {
            utterance_id: id,
            audio_path,
            transcript: words.join(" "),
            phonemes,
            durations: Some(durations),
            speaker_id: speaker,
            pair_id: paired.then(|| format!("{split}-pair-{:05}", i / 2)),
            noisy_audio_path: Some(noisy_path),
            snr_db: Some(snr),
            split,
        });
    }
    let manifest = DatasetManifest::new(split, records);
    manifest.validate()?;
    Ok(ToyDataset {
        manifest,
        audio,
        n_speakers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::mel::frame_count;

    #[test]
    fn same_seed_is_identical() {
        let a = make_toy_dataset(3, 2, 6).unwrap();
        let b = make_toy_dataset(3, 2, 6).unwrap();
        assert_eq!(a.manifest.to_jsonl(), b.manifest.to_jsonl());
        assert_eq!(a.audio, b.audio);
        let c = make_toy_dataset(4, 2, 6).unwrap();
        assert_ne!(a.manifest.to_jsonl(), c.manifest.to_jsonl());
    }

    #[test]
    fn construction_invariants() {
        let d = make_toy_dataset(1, 2, 8).unwrap();
        assert_eq!(d.manifest.len(), 8);
        assert_eq!(d.manifest.speakers(), vec![0, 1]);
        for (a, b) in d.manifest.pairs() {
            let (ra, rb) = (&d.manifest.records[a], &d.manifest.records[b]);
            assert_eq!(ra.phonemes, rb.phonemes);
            assert_eq!(ra.durations, rb.durations);
            assert_ne!(ra.speaker_id, rb.speaker_id);
        }
        assert_eq!(d.manifest.pairs().len(), 4);
        for r in &d.manifest.records {
            let w = d.waveform(&r.audio_path).unwrap();
            let total: usize = r.durations.as_ref().unwrap().iter().sum();
            assert_eq!(frame_count(w.len()), total);
            assert!(w.peak() < 1.0);
        }
    }

    #[test]
    fn every_word_is_one_bpe_token() {
        let bpe = toy_bpe();
        for w in TOY_WORDS {
            assert_eq!(bpe.tokenize(w).len(), 1, "{w}");
        }
    }

    #[test]
    fn written_corpus_reloads() {
        let d = make_toy_split(5, 3, 4, Split::Test).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path()).unwrap();
        let m = DatasetManifest::load(dir.path().join("test.jsonl"), Split::Test).unwrap();
        m.check_files(dir.path()).unwrap();
        assert_eq!(m, d.manifest);
        let w = crate::features::audio::load_wav(dir.path().join(&m.records[0].audio_path)).unwrap();
        assert_eq!(&w, d.waveform(&m.records[0].audio_path).unwrap());
    }
}
