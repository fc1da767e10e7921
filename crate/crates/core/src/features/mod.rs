//! Audio and text front end.

pub mod audio;
pub mod manifest;
pub mod mel;
pub mod text;
pub mod toy;

pub use audio::{load_wav, mix_noise, save_wav, Waveform, SAMPLE_RATE};
pub use manifest::{DatasetManifest, ManifestRecord, Split};
pub use mel::{add_deltas, cmvn, extract_features, mel_spectrogram, SpeechFeatures, FEATURE_DIM, N_MELS};
pub use text::{apply_bpe, encode_phonemes, Bpe, DurationSequence, Lexicon, TokenSequence, VocabKind};
pub use toy::{make_toy_dataset, make_toy_split, ToyDataset};
