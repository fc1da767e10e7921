//! Decoding, metrics, vocoding and result reporting.

pub mod metrics;
pub mod report;
pub mod vocoder;

use serde::{Deserialize, Serialize};

pub use metrics::{corpus_wer, edit_distance, greedy_ctc_decode, mel_mse, sisdr, stoi, wer, wer_str};
pub use report::{
    format_tables, improvement_graph, reference_five_task_rows, reference_two_task_grid, EvalReport,
    ImprovementEdge, Metric, MetricMap, ResultGrid,
};
pub use vocoder::{features_to_mel, griffin_lim, reconstruct_with_phase, GriffinLim};

use crate::data::ExampleSet;
use crate::error::{Error, Result};
use crate::features::mel::SpeechFeatures;
use crate::features::text::Bpe;
use crate::features::{Split, Waveform};
use crate::graph::Mat;
use crate::infer::{AsrDecoder, Inference};
use crate::tasks::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub asr_decoder: AsrDecoder,
    /// Compare TTS/VC outputs on de-normalized log-mel values.
    pub raw_mse: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            asr_decoder: AsrDecoder::Attention,
            raw_mse: false,
        }
    }
}

/// Another utterance of `speaker` other than those in `exclude`, searched
/// cyclically after `start`; falls back to `fallback`.
pub fn same_speaker_reference(set: &ExampleSet, start: usize, speaker: usize, exclude: &[usize], fallback: usize) -> usize {
    let n = set.len();
    (1..=n)
        .map(|k| (start + k) % n)
        .find(|&j| set.examples[j].speaker == speaker && !exclude.contains(&j))
        .unwrap_or(fallback)
}

fn mel_view(m: &Mat, stats: &SpeechFeatures, raw: bool) -> Result<Mat> {
    if raw {
        features_to_mel(m, stats)
    } else {
        Ok(SpeechFeatures::mel_block(m))
    }
}

pub fn transcribe(inf: &Inference<'_>, x: &Mat, bpe: &Bpe, decoder: AsrDecoder) -> Result<String> {
    let max_len = inf.cfg.content_len(x.nrows()) + 2;
    Ok(bpe.decode(&inf.recognize(x, decoder, max_len)?))
}

pub fn corpus_asr_wer(inf: &Inference<'_>, set: &ExampleSet, bpe: &Bpe, decoder: AsrDecoder) -> Result<f64> {
    let hyps = set
        .examples
        .iter()
        .map(|e| transcribe(inf, &e.clean.frames, bpe, decoder))
        .collect::<Result<Vec<_>>>()?;
    corpus_wer(hyps.iter().map(String::as_str).zip(set.examples.iter().map(|e| e.transcript.as_str())))
}

/// Scores `(reference, estimate)` waveforms with an external perceptual tool.
pub type ExternalScorer<'a> = &'a dyn Fn(&Waveform, &Waveform) -> Result<f64>;

/// Mean SiSDR, STOI and, with a scorer, PESQ of the enhanced utterances.
pub fn se_scores(inf: &Inference<'_>, set: &ExampleSet, pesq: Option<ExternalScorer<'_>>) -> Result<(f64, f64, Option<f64>)> {
    let idx = set.eligible(Task::Se);
    if idx.is_empty() {
        return Err(Error::Missing("noisy utterances for SE evaluation".into()));
    }
    let (mut sd, mut st, mut pq) = (0.0, 0.0, 0.0);
    for &i in &idx {
        let e = &set.examples[i];
        let noisy = e.noisy.as_ref().expect("eligible for SE");
        let noisy_audio = e
            .noisy_audio
            .as_ref()
            .ok_or_else(|| Error::Missing(format!("noisy waveform for {}", e.id)))?;
        let out = inf.enhance(&noisy.frames)?;
        let est = reconstruct_with_phase(&features_to_mel(&out, noisy)?, noisy_audio)?;
        let mut reference = e.clean_audio.clone();
        reference.samples.truncate(est.len());
        sd += sisdr(&est, &reference)?;
        st += stoi(&est, &reference)?;
        if let Some(f) = pesq {
            pq += f(&reference, &est)?;
        }
    }
    let n = idx.len() as f64;
    Ok((sd / n, st / n, pesq.map(|_| pq / n)))
}

pub fn sc_accuracy(inf: &Inference<'_>, set: &ExampleSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Missing("utterances for SC evaluation".into()));
    }
    let mut correct = 0usize;
    for e in &set.examples {
        correct += usize::from(inf.classify(&e.clean.frames)? == e.speaker);
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Mean mel MSE of synthesis with ground-truth durations. Without the
/// prosody predictor, prosody comes from another utterance of the speaker.
pub fn tts_mse(inf: &Inference<'_>, set: &ExampleSet, raw: bool) -> Result<f64> {
    let idx = set.eligible(Task::Tts);
    if idx.is_empty() {
        return Err(Error::Missing("utterances with durations for TTS evaluation".into()));
    }
    let mut total = 0.0;
    for &i in &idx {
        let e = &set.examples[i];
        let r = same_speaker_reference(set, i, e.speaker, &[i], i);
        let syn = inf.synthesize(
            &e.phonemes,
            e.speaker,
            e.durations.as_deref(),
            Some(&set.examples[r].clean.frames),
        )?;
        total += mel_mse(&mel_view(&syn.features, &e.clean, raw)?, &mel_view(&e.clean.frames, &e.clean, raw)?)?;
    }
    Ok(total / idx.len() as f64)
}

/// Mean mel MSE of converted speech against the parallel target; the
/// target voice is given by another utterance of the target speaker.
pub fn vc_mse(inf: &Inference<'_>, set: &ExampleSet, raw: bool) -> Result<f64> {
    let idx = set.eligible(Task::Vc);
    if idx.is_empty() {
        return Err(Error::Missing("parallel pairs for VC evaluation".into()));
    }
    let mut total = 0.0;
    for &i in &idx {
        let e = &set.examples[i];
        let p = e.partner.expect("eligible for VC");
        let target = &set.examples[p];
        let r = same_speaker_reference(set, p, target.speaker, &[i, p], p);
        let out = inf.convert(&e.clean.frames, &set.examples[r].clean.frames)?;
        total += mel_mse(&mel_view(&out, &target.clean, raw)?, &mel_view(&target.clean.frames, &target.clean, raw)?)?;
    }
    Ok(total / idx.len() as f64)
}

/// Every metric of `task` on `set`.
pub fn evaluate_task(
    inf: &Inference<'_>,
    set: &ExampleSet,
    task: Task,
    bpe: &Bpe,
    opts: &EvalOptions,
    pesq: Option<ExternalScorer<'_>>,
    split: Split,
    checkpoint: &str,
) -> Result<Vec<EvalReport>> {
    let values: Vec<(Metric, f64)> = match task {
        Task::Asr => vec![(Metric::Wer, corpus_asr_wer(inf, set, bpe, opts.asr_decoder)?)],
        Task::Se => {
            let (sd, st, pq) = se_scores(inf, set, pesq)?;
            let mut v: Vec<(Metric, f64)> = pq.map(|p| (Metric::Pesq, p)).into_iter().collect();
            v.extend([(Metric::Sisdr, sd), (Metric::Stoi, st)]);
            v
        }
        Task::Sc => vec![(Metric::Acc, sc_accuracy(inf, set)?)],
        Task::Tts => vec![(Metric::Mse, tts_mse(inf, set, opts.raw_mse)?)],
        Task::Vc => vec![(Metric::Mse, vc_mse(inf, set, opts.raw_mse)?)],
    };
    values
        .into_iter()
        .map(|(metric, value)| {
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("{} {metric}", task.label())));
            }
            Ok(EvalReport {
                task,
                metric,
                value,
                split,
                checkpoint: checkpoint.to_string(),
            })
        })
        .collect()
}
