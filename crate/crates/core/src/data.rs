//! Feature-level examples and per-task batch assembly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::features::manifest::{DatasetManifest, ManifestRecord};
use crate::features::mel::{extract_features, SpeechFeatures};
use crate::features::text::{encode_phonemes, Bpe, Lexicon};
use crate::features::toy::ToyDataset;
use crate::features::{load_wav, Waveform};
use crate::tasks::{Task, TaskBatch, TaskItem};

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub speaker: usize,
    pub transcript: String,
    pub clean: SpeechFeatures,
    pub noisy: Option<SpeechFeatures>,
    pub clean_audio: Waveform,
    pub noisy_audio: Option<Waveform>,
    pub bpe: Vec<usize>,
    pub phonemes: Vec<usize>,
    pub durations: Option<Vec<usize>>,
    /// Index of the parallel partner within the same example list.
    pub partner: Option<usize>,
}

/// Examples of one split with their text front ends.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleSet {
    pub examples: Vec<Example>,
}

fn build_example(
    r: &ManifestRecord,
    clean_audio: Waveform,
    noisy_audio: Option<Waveform>,
    bpe: &Bpe,
    lexicon: &Lexicon,
) -> Result<Example> {
    let clean = extract_features(&clean_audio)?;
    let noisy = noisy_audio.as_ref().map(extract_features).transpose()?;
    if let Some(n) = &noisy {
        if n.len() != clean.len() {
            return Err(Error::LengthMismatch {
                what: "noisy vs clean frames",
                left: n.len(),
                right: clean.len(),
            });
        }
    }
    let phonemes = r
        .phonemes
        .iter()
        .map(|p| {
            lexicon
                .inventory
                .id(p)
                .ok_or_else(|| Error::OutOfVocabulary(format!("phoneme {p}")))
        })
        .collect::<Result<Vec<_>>>()
        .or_else(|_| encode_phonemes(&r.transcript, lexicon).map(|s| s.ids))?;
    if let Some(d) = &r.durations {
        let total: usize = d.iter().sum();
        if total != clean.len() {
            return Err(Error::InvalidDuration(format!(
                "{}: durations sum to {total} frames, audio has {}",
                r.utterance_id,
                clean.len()
            )));
        }
    }
    Ok(Example {
        id: r.utterance_id.clone(),
        speaker: r.speaker_id,
        transcript: r.transcript.clone(),
        clean,
        noisy,
        clean_audio,
        noisy_audio,
        bpe: bpe.encode(&r.transcript).ids,
        phonemes,
        durations: r.durations.clone(),
        partner: None,
    })
}

fn link_partners(manifest: &DatasetManifest, examples: &mut [Example]) {
    for (a, b) in manifest.pairs() {
        examples[a].partner = Some(b);
        examples[b].partner = Some(a);
    }
}

impl ExampleSet {
    pub fn from_toy(d: &ToyDataset, bpe: &Bpe, lexicon: &Lexicon) -> Result<Self> {
        let mut examples = d
            .manifest
            .records
            .iter()
            .map(|r| {
                let clean = d.waveform(&r.audio_path)?.clone();
                let noisy = r
                    .noisy_audio_path
                    .as_ref()
                    .map(|p| d.waveform(p).cloned())
                    .transpose()?;
                build_example(r, clean, noisy, bpe, lexicon)
            })
            .collect::<Result<Vec<_>>>()?;
        link_partners(&d.manifest, &mut examples);
        Ok(Self { examples })
    }

    /// Audio paths resolve relative to `base`.
    pub fn from_manifest(m: &DatasetManifest, base: &Path, bpe: &Bpe, lexicon: &Lexicon) -> Result<Self> {
        m.validate()?;
        let mut examples = m
            .records
            .iter()
            .map(|r| {
                let clean = load_wav(DatasetManifest::resolve(base, &r.audio_path))?;
                let noisy = r
                    .noisy_audio_path
                    .as_ref()
                    .map(|p| load_wav(DatasetManifest::resolve(base, p)))
                    .transpose()?;
                build_example(r, clean, noisy, bpe, lexicon)
            })
            .collect::<Result<Vec<_>>>()?;
        link_partners(m, &mut examples);
        Ok(Self { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.examples.truncate(n);
        for e in &mut self.examples {
            if e.partner.is_some_and(|p| p >= n) {
                e.partner = None;
            }
        }
    }

    /// Example indices usable for `task`; for VC, the first member of each pair.
    pub fn eligible(&self, task: Task) -> Vec<usize> {
        (0..self.examples.len())
            .filter(|&i| {
                let e = &self.examples[i];
                match task {
                    Task::Asr | Task::Sc => true,
                    Task::Se => e.noisy.is_some(),
                    Task::Tts => e.durations.is_some(),
                    Task::Vc => e.partner.is_some_and(|p| p > i),
                }
            })
            .collect()
    }

    pub fn item(&self, task: Task, i: usize) -> Result<TaskItem> {
        let e = &self.examples[i];
        let x = e.clean.frames.clone();
        Ok(match task {
            Task::Asr => TaskItem::Asr {
                x,
                target: e.bpe.clone(),
            },
            Task::Se => TaskItem::Se {
                noisy: e
                    .noisy
                    .as_ref()
                    .ok_or_else(|| Error::Missing(format!("noisy audio for {}", e.id)))?
                    .frames
                    .clone(),
                clean: x,
            },
            Task::Sc => TaskItem::Sc { x, label: e.speaker },
            Task::Tts => TaskItem::Tts {
                phonemes: e.phonemes.clone(),
                durations: e
                    .durations
                    .clone()
                    .ok_or_else(|| Error::Missing(format!("durations for {}", e.id)))?,
                x,
                speaker: e.speaker,
            },
            Task::Vc => {
                let p = e
                    .partner
                    .ok_or_else(|| Error::InvalidBatch(format!("{} has no parallel partner", e.id)))?;
                TaskItem::Vc {
                    x1: x,
                    x2: self.examples[p].clean.frames.clone(),
                }
            }
        })
    }

    pub fn batch(&self, task: Task, indices: &[usize]) -> Result<TaskBatch> {
        TaskBatch::new(
            task,
            indices
                .iter()
                .map(|&i| self.item(task, i))
                .collect::<Result<Vec<_>>>()?,
        )
    }
}

/// Cycles through a fixed index list in consecutive windows.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchCursor {
    pub indices: Vec<usize>,
    pub batch_size: usize,
}

impl BatchCursor {
    pub fn new(indices: Vec<usize>, batch_size: usize) -> Self {
        Self {
            indices,
            batch_size: batch_size.max(1),
        }
    }

    /// Indices of the batch used at training step `step` (1-based).
    pub fn at(&self, step: u64) -> Vec<usize> {
        let n = self.indices.len();
        if n == 0 {
            return Vec::new();
        }
        let b = self.batch_size.min(n);
        let start = ((step.saturating_sub(1)) as usize * b) % n;
        (0..b).map(|k| self.indices[(start + k) % n]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::toy::{make_toy_dataset, toy_bpe, toy_lexicon};

    #[test]
    fn toy_examples_link_pairs() {
        let d = make_toy_dataset(2, 2, 6).unwrap();
        let set = ExampleSet::from_toy(&d, &toy_bpe(), &toy_lexicon()).unwrap();
        assert_eq!(set.len(), 6);
        assert_eq!(set.eligible(Task::Vc), vec![0, 2, 4]);
        assert_eq!(set.examples[1].partner, Some(0));
        let b = set.batch(Task::Tts, &[0, 1]).unwrap();
        assert_eq!(b.len(), 2);
        for e in &set.examples {
            assert!(!e.bpe.is_empty());
            assert_eq!(e.durations.as_ref().unwrap().iter().sum::<usize>(), e.clean.len());
        }
    }

    #[test]
    fn cursor_wraps() {
        let c = BatchCursor::new(vec![0, 1, 2], 2);
        assert_eq!(c.at(1), vec![0, 1]);
        assert_eq!(c.at(2), vec![2, 0]);
        let all = BatchCursor::new(vec![5, 6], 16);
        assert_eq!(all.at(7), vec![5, 6]);
    }
}
