//! Evaluation-mode forward passes for every task.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::checkpoint::Checkpoint;
use crate::ctc;
use crate::error::{Error, Result};
use crate::evaluation::metrics::greedy_ctc_decode;
use crate::evaluation::vocoder::{features_to_mel, griffin_lim, stretch_rows};
use crate::features::audio::{load_wav, save_wav};
use crate::features::mel::{extract_features, CmvnStats, SpeechFeatures, FEATURE_DIM};
use crate::features::text::encode_phonemes;
use crate::features::text::EOS_ID;
use crate::graph::{Graph, Mat};
use crate::modules::{Model, ModelConfig, ProsodyEmbedding};
use crate::nn::Ctx;
use crate::params::ParameterSet;
use crate::tasks::{Task, TaskConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AsrDecoder {
    Ctc,
    Attention,
}

/// Synthesized features and the frame-rate durations that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub features: Mat,
    pub durations: Vec<usize>,
}

pub struct Inference<'a> {
    pub cfg: &'a ModelConfig,
    pub task_cfg: &'a TaskConfig,
    pub params: &'a ParameterSet,
}

impl<'a> Inference<'a> {
    pub fn new(cfg: &'a ModelConfig, task_cfg: &'a TaskConfig, params: &'a ParameterSet) -> Self {
        Self { cfg, task_cfg, params }
    }

    fn run<R>(&self, f: impl for<'g> FnOnce(&Model<'_, 'g>) -> Result<R>) -> Result<R> {
        let g = Graph::new();
        let ctx = Ctx::eval();
        let m = Model::new(&g, self.params, &ctx, self.cfg);
        f(&m)
    }

    pub fn recognize(&self, x: &Mat, decoder: AsrDecoder, max_len: usize) -> Result<Vec<usize>> {
        self.run(|m| {
            let vc = m.content_encode(m.input(x))?;
            match decoder {
                AsrDecoder::Ctc => {
                    let dec = m.text_decode(vc, None)?;
                    Ok(greedy_ctc_decode(&dec.ctc_log_probs.value()))
                }
                AsrDecoder::Attention => {
                    let mut out = Vec::new();
                    while out.len() < max_len {
                        let logits = m.s2s_logits(vc, &out)?.value();
                        let last = logits.row(logits.nrows() - 1);
                        let next = ctc::argmax(last.iter().copied());
                        if next == EOS_ID {
                            break;
                        }
                        out.push(next);
                    }
                    Ok(out)
                }
            }
        })
    }

    pub fn enhance(&self, noisy: &Mat) -> Result<Mat> {
        self.run(|m| {
            let xv = m.input(noisy);
            Ok(m.audio_decode(m.prosody_encode(xv), m.content_encode(xv)?)?.value())
        })
    }

    pub fn classify(&self, x: &Mat) -> Result<usize> {
        self.run(|m| {
            let logits = m.speaker_logits(m.speaker_encode(m.prosody_encode(m.input(x))));
            Ok(ctc::argmax(logits.value().iter().copied()))
        })
    }

    /// Text to features. Durations are predicted unless given. Without the
    /// prosody predictor the encoded prosody of `prosody_ref` is stretched
    /// to the content length.
    pub fn synthesize(
        &self,
        phonemes: &[usize],
        speaker: usize,
        durations: Option<&[usize]>,
        prosody_ref: Option<&Mat>,
    ) -> Result<Synthesis> {
        self.run(|m| {
            let table = m.speaker_table(speaker)?;
            let enc = m.text_encode(phonemes, table, durations)?;
            let frames = m.cfg.upsample_factor() * enc.content.vectors.rows();
            let prosody = if self.task_cfg.prosody_predictor {
                m.prosody_predict(enc.content, table)
            } else {
                let r = prosody_ref.ok_or_else(|| Error::Missing("prosody reference utterance".into()))?;
                stretched_prosody(m, r, frames)
            };
            Ok(Synthesis {
                features: m.audio_decode(prosody, enc.content)?.value(),
                durations: enc.durations,
            })
        })
    }

    /// Speech of `source` in the voice of `reference`.
    pub fn convert(&self, source: &Mat, reference: &Mat) -> Result<Mat> {
        self.run(|m| {
            let vc = m.content_encode(m.input(source))?;
            let frames = m.cfg.upsample_factor() * vc.vectors.rows();
            let prosody = if self.task_cfg.prosody_predictor {
                let vs = m.speaker_encode(m.prosody_encode(m.input(reference)));
                m.prosody_predict(vc, vs)
            } else {
                stretched_prosody(m, reference, frames)
            };
            Ok(m.audio_decode(prosody, vc)?.value())
        })
    }
}

fn stretched_prosody<'g>(m: &Model<'_, 'g>, reference: &Mat, frames: usize) -> ProsodyEmbedding<'g> {
    let vp = m.prosody_encode(m.input(reference)).vectors.value();
    ProsodyEmbedding {
        vectors: m.graph().constant(stretch_rows(&vp, frames)),
        predicted: false,
    }
}

pub const GRIFFIN_LIM_ITERS: usize = 32;

/// Inputs of one file-level inference call.
#[derive(Debug, Clone, Default)]
pub struct InferRequest {
    pub inputs: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub speaker: Option<usize>,
    /// Prosody reference for TTS without the predictor; target voice for VC.
    pub reference: Option<PathBuf>,
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "output".into(), |s| s.to_string_lossy().into_owned())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn features_tsv(m: &Mat) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    out
}

/// Writes `<stem>.tsv` (normalized features) and `<stem>.wav`.
fn write_speech(out_dir: &Path, name: &str, features: &Mat, stats: &SpeechFeatures, written: &mut Vec<PathBuf>) -> Result<()> {
    let tsv = out_dir.join(format!("{name}.tsv"));
    write_text(&tsv, &features_tsv(features))?;
    let gl = griffin_lim(&features_to_mel(features, stats)?, GRIFFIN_LIM_ITERS)?;
    let wav = out_dir.join(format!("{name}.wav"));
    save_wav(&wav, &gl.waveform)?;
    written.extend([tsv, wav]);
    Ok(())
}

fn mean_stats_features(ckpt: &Checkpoint) -> SpeechFeatures {
    let mut f = SpeechFeatures::raw(Array2::zeros((0, FEATURE_DIM)));
    if let Some((mean, std)) = &ckpt.frontend.mean_stats {
        f.normalized = true;
        f.stats = Some(CmvnStats {
            mean: mean.clone(),
            std: std.clone(),
        });
    }
    f
}

/// Runs `task` from a checkpoint over files and returns the paths written.
/// ASR and SC write `<stem>.txt`; SE, TTS and VC write features and audio.
/// TTS inputs are text files.
pub fn infer_files(ckpt: &Checkpoint, task: Task, req: &InferRequest) -> Result<Vec<PathBuf>> {
    let task_cfg = ckpt.config.tasks.task_config();
    let inf = Inference::new(&ckpt.model, &task_cfg, &ckpt.state.params);
    std::fs::create_dir_all(&req.out_dir).map_err(|e| Error::io(&req.out_dir, e))?;
    let reference = req
        .reference
        .as_ref()
        .map(|p| load_wav(p).and_then(|w| extract_features(&w)))
        .transpose()?;
    let bpe = ckpt.frontend.bpe();
    let mut written = Vec::new();
    for input in &req.inputs {
        let name = stem(input);
        let out = |ext: &str| req.out_dir.join(format!("{name}.{ext}"));
        match task {
            Task::Asr | Task::Sc | Task::Se | Task::Vc => {
                let x = extract_features(&load_wav(input)?)?;
                match task {
                    Task::Asr => {
                        let max_len = ckpt.model.content_len(x.len()) + 2;
                        let text = bpe.decode(&inf.recognize(&x.frames, AsrDecoder::Attention, max_len)?);
                        write_text(&out("txt"), &format!("{text}\n"))?;
                        written.push(out("txt"));
                    }
                    Task::Sc => {
                        write_text(&out("txt"), &format!("{}\n", inf.classify(&x.frames)?))?;
                        written.push(out("txt"));
                    }
                    Task::Se => write_speech(&req.out_dir, &name, &inf.enhance(&x.frames)?, &x, &mut written)?,
                    _ => {
                        let r = reference
                            .as_ref()
                            .ok_or_else(|| Error::Missing("target-voice reference (--reference) for VC".into()))?;
                        write_speech(&req.out_dir, &name, &inf.convert(&x.frames, &r.frames)?, r, &mut written)?;
                    }
                }
            }
            Task::Tts => {
                let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
                let phonemes = encode_phonemes(text.trim(), &ckpt.frontend.lexicon)?.ids;
                let speaker = req
                    .speaker
                    .ok_or_else(|| Error::Missing("speaker id (--speaker) for TTS".into()))?;
                let syn = inf.synthesize(&phonemes, speaker, None, reference.as_ref().map(|r| &r.frames))?;
                let stats = reference.clone().unwrap_or_else(|| mean_stats_features(ckpt));
                write_speech(&req.out_dir, &name, &syn.features, &stats, &mut written)?;
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modules::init_parameters;
    use ndarray::Array2;

    fn setup() -> (ModelConfig, ParameterSet) {
        let cfg = ModelConfig::toy(12, 7, 3);
        let p = init_parameters(&cfg, 4).unwrap();
        (cfg, p)
    }

    #[test]
    fn shapes_and_bounds() {
        let (cfg, p) = setup();
        let tc = TaskConfig::default();
        let inf = Inference::new(&cfg, &tc, &p);
        let x = Array2::from_shape_fn((21, 240), |(i, j)| ((i * 7 + j) as f64 * 0.01).sin());
        let y = inf.recognize(&x, AsrDecoder::Attention, 5).unwrap();
        assert!(y.len() <= 5);
        assert_eq!(y, inf.recognize(&x, AsrDecoder::Attention, 5).unwrap());
        assert!(inf.recognize(&x, AsrDecoder::Ctc, 5).unwrap().iter().all(|&k| k < 12));
        assert_eq!(inf.enhance(&x).unwrap().dim(), (21, 240));
        assert!(inf.classify(&x).unwrap() < 3);
        let s = inf.synthesize(&[1, 2, 3], 1, Some(&[3, 5, 2]), None).unwrap();
        assert_eq!(s.features.nrows(), 4 * 10usize.div_ceil(4));
        assert!(matches!(inf.synthesize(&[1], 9, None, None), Err(Error::UnknownSpeaker { .. })));
        assert_eq!(inf.convert(&x, &x.slice(ndarray::s![..15, ..]).to_owned()).unwrap().nrows(), 24);
        let off = TaskConfig {
            prosody_predictor: false,
            ..TaskConfig::default()
        };
        let inf = Inference::new(&cfg, &off, &p);
        assert!(inf.synthesize(&[1, 2], 0, None, None).is_err());
        let s = inf.synthesize(&[1, 2], 0, Some(&[4, 4]), Some(&x)).unwrap();
        assert_eq!(s.features.nrows(), 8);
    }
}
