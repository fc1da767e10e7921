//! Line-delimited JSON dataset manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub utterance_id: String,
    pub audio_path: String,
    pub transcript: String,
    /// Phoneme symbols including word boundaries.
    pub phonemes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub durations: Option<Vec<usize>>,
    pub speaker_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    /// Noise-corrupted rendition of `audio_path` for enhancement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy_audio_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(split: Split, records: Vec<ManifestRecord>) -> Self {
        Self { split, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records always serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, split: Split) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::Serde(format!("manifest line {}: {e}", i + 1)))?;
            if r.split != split {
                return Err(Error::Config(format!(
                    "manifest line {} belongs to split {}, expected {split}",
                    i + 1,
                    r.split
                )));
            }
            records.push(r);
        }
        Ok(Self { split, records })
    }

    pub fn load(path: impl AsRef<Path>, split: Split) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = Self::from_jsonl(&text, split)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Audio paths are resolved relative to `base` when not absolute.
    pub fn resolve(base: &Path, audio_path: &str) -> PathBuf {
        let p = Path::new(audio_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    pub fn check_files(&self, base: &Path) -> Result<()> {
        for r in &self.records {
            for p in std::iter::once(&r.audio_path).chain(r.noisy_audio_path.as_ref()) {
                let full = Self::resolve(base, p);
                if !full.is_file() {
                    return Err(Error::Missing(format!(
                        "audio {} for {}",
                        full.display(),
                        r.utterance_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Structural checks: VC pairs share transcripts and differ in speaker,
    /// durations match phoneme counts.
    pub fn validate(&self) -> Result<()> {
        let mut pairs: BTreeMap<&str, Vec<&ManifestRecord>> = BTreeMap::new();
        for r in &self.records {
            if let Some(d) = &r.durations {
                if d.len() != r.phonemes.len() {
                    return Err(Error::LengthMismatch {
                        what: "durations vs phonemes",
                        left: d.len(),
                        right: r.phonemes.len(),
                    });
                }
                if d.contains(&0) {
                    return Err(Error::InvalidDuration(format!(
                        "zero-frame phoneme in {}",
                        r.utterance_id
                    )));
                }
            }
            if let Some(p) = &r.pair_id {
                pairs.entry(p).or_default().push(r);
            }
        }
        for (id, members) in pairs {
            let ok = members.len() == 2
                && members[0].transcript == members[1].transcript
                && members[0].phonemes == members[1].phonemes
                && members[0].speaker_id != members[1].speaker_id;
            if !ok {
                return Err(Error::Config(format!("malformed voice-conversion pair {id}")));
            }
        }
        Ok(())
    }

    /// Utterance ids of each parallel pair, in record order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut first: BTreeMap<&str, usize> = BTreeMap::new();
        let mut out = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            if let Some(p) = &r.pair_id {
                match first.get(p.as_str()) {
                    Some(&j) => out.push((j, i)),
                    None => {
                        first.insert(p, i);
                    }
                }
            }
        }
        out
    }

    pub fn speakers(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.records.iter().map(|r| r.speaker_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, speaker: usize, pair: Option<&str>) -> ManifestRecord {
        ManifestRecord {
            utterance_id: id.into(),
            audio_path: format!("{id}.wav"),
            transcript: "sun".into(),
            phonemes: vec!["s".into(), "u".into(), "n".into()],
            durations: Some(vec![4, 5, 6]),
            speaker_id: speaker,
            pair_id: pair.map(str::to_string),
            noisy_audio_path: None,
            snr_db: None,
            split: Split::Train,
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let m = DatasetManifest::new(
            Split::Train,
            vec![record("a", 0, Some("p0")), record("b", 1, Some("p0"))],
        );
        m.validate().unwrap();
        let back = DatasetManifest::from_jsonl(&m.to_jsonl(), Split::Train).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.pairs(), vec![(0, 1)]);
        assert!(DatasetManifest::from_jsonl(&m.to_jsonl(), Split::Test).is_err());
    }

    #[test]
    fn same_speaker_pair_is_rejected() {
        let m = DatasetManifest::new(
            Split::Train,
            vec![record("a", 0, Some("p0")), record("b", 0, Some("p0"))],
        );
        assert!(m.validate().is_err());
    }
}
