//! Task compositions and their losses.
//!
//! Each utterance of a batch gets its own graph and backward pass; loss terms
//! are divided by batch-level counts before differentiation so the summed
//! gradients equal those of the batch-level masked means.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::ctc;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::modules::{ModelConfig, Model, ProsodyEmbedding};
use crate::nn::Ctx;
use crate::params::{GradientSet, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Asr,
    Se,
    Sc,
    Tts,
    Vc,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Asr, Task::Se, Task::Sc, Task::Tts, Task::Vc];

    pub fn name(self) -> &'static str {
        match self {
            Task::Asr => "asr",
            Task::Se => "se",
            Task::Sc => "sc",
            Task::Tts => "tts",
            Task::Vc => "vc",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Task::Asr => "ASR",
            Task::Se => "SE",
            Task::Sc => "SC",
            Task::Tts => "TTS",
            Task::Vc => "VC",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

/// Loss-shaping switches shared by all task forwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// CTC weight in the recognition loss.
    pub asr_alpha: f64,
    /// Decode TTS training targets from the encoded (teacher) prosody.
    pub tts_teacher_prosody: bool,
    /// When off, no prosody predictor is trained and synthesis/conversion
    /// consume encoded prosody from a reference utterance.
    pub prosody_predictor: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            asr_alpha: 0.3,
            tts_teacher_prosody: false,
            prosody_predictor: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskItem {
    Asr { x: Mat, target: Vec<usize> },
    Se { noisy: Mat, clean: Mat },
    Sc { x: Mat, label: usize },
    Tts { phonemes: Vec<usize>, durations: Vec<usize>, x: Mat, speaker: usize },
    Vc { x1: Mat, x2: Mat },
}

impl TaskItem {
    pub fn task(&self) -> Task {
        match self {
            TaskItem::Asr { .. } => Task::Asr,
            TaskItem::Se { .. } => Task::Se,
            TaskItem::Sc { .. } => Task::Sc,
            TaskItem::Tts { .. } => Task::Tts,
            TaskItem::Vc { .. } => Task::Vc,
        }
    }
}

/// One task's minibatch. Items keep their own lengths; frame-level losses
/// only ever read valid frames, which is the padding mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub task: Task,
    pub items: Vec<TaskItem>,
}

impl TaskBatch {
    pub fn new(task: Task, items: Vec<TaskItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidBatch(format!("empty {task} batch")));
        }
        if let Some(bad) = items.iter().find(|i| i.task() != task) {
            return Err(Error::WrongTask {
                expected: task.to_string(),
                got: bad.task().to_string(),
            });
        }
        Ok(Self { task, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Named loss terms of one batch and their documented combination.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub task: Option<Task>,
    pub terms: BTreeMap<String, f64>,
    /// Coefficient of each term in `total`.
    pub coefficients: BTreeMap<String, f64>,
    pub total: f64,
    /// Side statistics such as accuracy or skipped items; not part of `total`.
    pub extras: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn recompute_total(&self) -> f64 {
        self.terms
            .iter()
            .map(|(k, v)| self.coefficients.get(k).copied().unwrap_or(1.0) * v)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.terms.values().all(|v| v.is_finite())
    }

    /// Flat `task.term → value` record for the metrics log.
    pub fn flat(&self) -> BTreeMap<String, f64> {
        let prefix = self.task.map(|t| t.name()).unwrap_or("loss");
        let mut out = BTreeMap::new();
        for (k, v) in self.terms.iter().chain(&self.extras) {
            out.insert(format!("{prefix}.{k}"), *v);
        }
        out.insert(format!("{prefix}.total"), self.total);
        out
    }
}

/// Multipliers applied to loss terms before differentiation.
#[derive(Debug, Clone, PartialEq)]
pub enum TermWeights {
    /// One factor for the whole task loss.
    Task(f64),
    /// A factor per term name; missing names use 1.
    PerTerm(BTreeMap<String, f64>),
}

impl TermWeights {
    fn get(&self, term: &str) -> f64 {
        match self {
            TermWeights::Task(w) => *w,
            TermWeights::PerTerm(m) => m.get(term).copied().unwrap_or(1.0),
        }
    }
}

/// `−log P_CTC(target | log_probs)`, `+∞` when no alignment exists.
pub fn ctc_loss(log_probs: &Mat, target: &[usize]) -> f64 {
    let blank = log_probs.ncols() - 1;
    ctc::forward_backward(log_probs.view(), target, blank)
        .map(|(l, _)| l)
        .unwrap_or(f64::INFINITY)
}

/// `Σ (pred[..n] − target[..n])²`.
fn sq_err_sum<'g>(pred: Var<'g>, target: &Mat, n: usize) -> Var<'g> {
    let g = pred.graph();
    let p = if pred.rows() == n { pred } else { pred.slice_rows(0, n) };
    let t = target.slice(s![..n, ..]).to_owned();
    p.sub(g.constant(t)).square().sum()
}

fn sq_err_sum_var<'g>(pred: Var<'g>, target: Var<'g>, n: usize) -> Var<'g> {
    let p = if pred.rows() == n { pred } else { pred.slice_rows(0, n) };
    let t = if target.rows() == n { target } else { target.slice_rows(0, n) };
    p.sub(t).square().sum()
}

fn abs_err_sum<'g>(pred: Var<'g>, target: &Mat) -> Var<'g> {
    pred.sub(pred.graph().constant(target.clone())).abs().sum()
}

/// `Σ_i log_probs[i, tgt_i]`.
fn pick_sum<'g>(log_probs: Var<'g>, targets: &[usize]) -> Var<'g> {
    let (r, c) = log_probs.shape();
    let mut onehot = Array2::zeros((r, c));
    for (i, &t) in targets.iter().enumerate() {
        onehot[[i, t]] = 1.0;
    }
    log_probs.mul(log_probs.graph().constant(onehot)).sum()
}

fn upsampled(cfg: &ModelConfig, t: usize) -> usize {
    cfg.upsample_factor() * cfg.content_len(t)
}

/// Batch-level counts that turn summed errors into masked means.
#[derive(Debug, Default)]
struct Normalizers(BTreeMap<&'static str, f64>);

impl Normalizers {
    fn add(&mut self, k: &'static str, v: usize) {
        *self.0.entry(k).or_default() += v as f64;
    }

    fn get(&self, k: &str) -> f64 {
        self.0.get(k).copied().unwrap_or(0.0).max(1.0)
    }
}

/// Terms of one utterance, already divided by batch normalizers.
struct Contribution<'g> {
    terms: Vec<(&'static str, Var<'g>)>,
    extras: Vec<(&'static str, f64)>,
}

/// Runs one task batch; with `grads`, also accumulates `∇θ Σ w_k·term_k`.
pub struct TaskRunner<'a> {
    pub cfg: &'a ModelConfig,
    pub task_cfg: &'a TaskConfig,
    pub params: &'a ParameterSet,
}

impl<'a> TaskRunner<'a> {
    pub fn new(cfg: &'a ModelConfig, task_cfg: &'a TaskConfig, params: &'a ParameterSet) -> Self {
        Self {
            cfg,
            task_cfg,
            params,
        }
    }

    pub fn forward(&self, batch: &TaskBatch, train: bool, dropout_seed: u64) -> Result<LossReport> {
        self.run(batch, train, dropout_seed, None).map(|(r, _)| r)
    }

    pub fn forward_backward(
        &self,
        batch: &TaskBatch,
        weights: &TermWeights,
        dropout_seed: u64,
    ) -> Result<(LossReport, GradientSet)> {
        let (r, g) = self.run(batch, true, dropout_seed, Some(weights))?;
        Ok((r, g.expect("gradients requested")))
    }

    fn coefficients(&self, task: Task) -> BTreeMap<String, f64> {
        let a = self.task_cfg.asr_alpha;
        let pairs: Vec<(&str, f64)> = match task {
            Task::Asr => vec![("asr_ctc", a), ("asr_s2s", 1.0 - a), ("asr_recon", 1.0)],
            Task::Se => vec![("se_mae", 1.0)],
            Task::Sc => vec![("sc_ce", 1.0)],
            Task::Tts => {
                let mut v = vec![("tts_mel", 1.0), ("tts_dur", 1.0), ("tts_speaker", 1.0)];
                if self.task_cfg.prosody_predictor {
                    v.push(("tts_prosody", 1.0));
                }
                v
            }
            Task::Vc => {
                let mut v = vec![("vc_conv", 1.0), ("vc_rec1", 1.0), ("vc_rec2", 1.0)];
                if self.task_cfg.prosody_predictor {
                    v.push(("vc_prosody", 1.0));
                }
                v
            }
        };
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    fn normalizers(&self, batch: &TaskBatch) -> Result<Normalizers> {
        let mut n = Normalizers::default();
        let d = self.cfg.d_model;
        for item in &batch.items {
            match item {
                TaskItem::Asr { x, target } => {
                    n.add("asr_recon", x.len());
                    if target.is_empty() {
                        return Err(Error::InvalidBatch("empty recognition target".into()));
                    }
                    n.add("asr_s2s", 1);
                    if ctc::min_frames(target) <= self.cfg.content_len(x.nrows()) {
                        n.add("asr_ctc", 1);
                    }
                }
                TaskItem::Se { noisy, clean } => {
                    if noisy.dim() != clean.dim() {
                        return Err(Error::LengthMismatch {
                            what: "noisy vs clean frames",
                            left: noisy.nrows(),
                            right: clean.nrows(),
                        });
                    }
                    n.add("se_mae", clean.len());
                }
                TaskItem::Sc { label, .. } => {
                    if *label >= self.cfg.n_speakers {
                        return Err(Error::LabelOutOfRange {
                            label: *label,
                            n: self.cfg.n_speakers,
                        });
                    }
                    n.add("sc_ce", 1);
                }
                TaskItem::Tts { phonemes, durations, x, speaker } => {
                    if durations.len() != phonemes.len() {
                        return Err(Error::LengthMismatch {
                            what: "durations vs phonemes",
                            left: durations.len(),
                            right: phonemes.len(),
                        });
                    }
                    if *speaker >= self.cfg.n_speakers {
                        return Err(Error::UnknownSpeaker {
                            id: *speaker,
                            n: self.cfg.n_speakers,
                        });
                    }
                    let t = x.nrows();
                    let frames: usize = durations.iter().sum();
                    let dec_rows = if self.task_cfg.prosody_predictor && !self.task_cfg.tts_teacher_prosody {
                        upsampled(self.cfg, frames)
                    } else {
                        t
                    };
                    n.add("tts_mel", dec_rows.min(t) * x.ncols());
                    n.add("tts_dur", phonemes.len());
                    n.add("tts_speaker", d);
                    n.add("tts_prosody", upsampled(self.cfg, frames).min(t) * d);
                }
                TaskItem::Vc { x1, x2 } => {
                    let (t1, t2) = (x1.nrows(), x2.nrows());
                    let conv_rows = if self.task_cfg.prosody_predictor {
                        upsampled(self.cfg, t1).min(t2)
                    } else {
                        t2
                    };
                    n.add("vc_conv", conv_rows * x2.ncols());
                    n.add("vc_rec1", x1.len());
                    n.add("vc_rec2", x2.len());
                    n.add("vc_prosody", upsampled(self.cfg, t1).min(t2) * d);
                }
            }
        }
        Ok(n)
    }

    fn run(
        &self,
        batch: &TaskBatch,
        train: bool,
        dropout_seed: u64,
        weights: Option<&TermWeights>,
    ) -> Result<(LossReport, Option<GradientSet>)> {
        let norm = self.normalizers(batch)?;
        let coefficients = self.coefficients(batch.task);
        let mut terms: BTreeMap<String, f64> = coefficients.keys().map(|k| (k.clone(), 0.0)).collect();
        let mut extras: BTreeMap<String, f64> = BTreeMap::new();
        let mut grads = weights.map(|_| GradientSet::new(batch.task.name()));
        for (i, item) in batch.items.iter().enumerate() {
            let g = Graph::new();
            let ctx = if train {
                Ctx::train(dropout_seed.wrapping_mul(1_000_003).wrapping_add(i as u64))
            } else {
                Ctx::eval()
            };
            let model = Model::new(&g, self.params, &ctx, self.cfg);
            let c = self.contribution(&model, item, &norm)?;
            for (k, v) in &c.terms {
                *terms.get_mut(*k).expect("term has a coefficient") += v.scalar_value();
            }
            for (k, v) in &c.extras {
                *extras.entry(k.to_string()).or_default() += v;
            }
            if let (Some(w), Some(acc)) = (weights, grads.as_mut()) {
                let weighted: Vec<Var<'_>> = c
                    .terms
                    .iter()
                    .map(|(k, v)| v.scale(coefficients[*k] * w.get(k)))
                    .collect();
                let root = weighted[1..].iter().fold(weighted[0], |a, b| a.add(*b));
                for (name, grad) in g.backward(root).into_named() {
                    acc.accumulate(&name, &grad, 1.0);
                }
            }
        }
        if batch.task == Task::Sc {
            if let Some(c) = extras.get_mut("sc_correct") {
                let acc = *c / batch.len() as f64;
                extras.insert("sc_acc".into(), acc);
            }
        }
        let mut report = LossReport {
            task: Some(batch.task),
            terms,
            coefficients,
            total: 0.0,
            extras,
        };
        report.total = report.recompute_total();
        if !report.is_finite() {
            return Err(Error::NonFinite(format!("{} loss", batch.task)));
        }
        Ok((report, grads))
    }

    fn contribution<'g>(&self, m: &Model<'_, 'g>, item: &TaskItem, norm: &Normalizers) -> Result<Contribution<'g>> {
        let mut terms = Vec::new();
        let mut extras = Vec::new();
        match item {
            TaskItem::Asr { x, target } => {
                let xv = m.input(x);
                let vc = m.content_encode(xv)?;
                let dec = m.text_decode(vc, Some(target))?;
                match dec.ctc_log_probs.ctc_loss(target, self.cfg.bpe_vocab) {
                    Some(l) => terms.push((
                        "asr_ctc",
                        l.scale(1.0 / (target.len() as f64 * norm.get("asr_ctc"))),
                    )),
                    None => extras.push(("asr_ctc_skipped", 1.0)),
                }
                let mut eos_target = target.clone();
                eos_target.push(crate::features::text::EOS_ID);
                let s2s = dec.s2s_log_probs.expect("teacher forcing yields attention output");
                terms.push((
                    "asr_s2s",
                    pick_sum(s2s, &eos_target)
                        .scale(-1.0 / (eos_target.len() as f64 * norm.get("asr_s2s"))),
                ));
                let vp = m.prosody_encode(xv);
                let rec = m.audio_decode(vp, vc)?;
                terms.push((
                    "asr_recon",
                    sq_err_sum(rec, x, x.nrows()).scale(1.0 / norm.get("asr_recon")),
                ));
            }
            TaskItem::Se { noisy, clean } => {
                let xv = m.input(noisy);
                let out = m.audio_decode(m.prosody_encode(xv), m.content_encode(xv)?)?;
                terms.push(("se_mae", abs_err_sum(out, clean).scale(1.0 / norm.get("se_mae"))));
            }
            TaskItem::Sc { x, label } => {
                let vs = m.speaker_encode(m.prosody_encode(m.input(x)));
                let logits = m.speaker_logits(vs);
                let pred = ctc::argmax(logits.value().iter().copied());
                extras.push(("sc_correct", f64::from(u8::from(pred == *label))));
                terms.push((
                    "sc_ce",
                    pick_sum(logits.log_softmax_rows(), &[*label]).scale(-1.0 / norm.get("sc_ce")),
                ));
            }
            TaskItem::Tts { phonemes, durations, x, speaker } => {
                let table = m.speaker_table(*speaker)?;
                let enc = m.text_encode(phonemes, table, Some(durations))?;
                let vp = m.prosody_encode(m.input(x));
                let vs = m.speaker_encode(vp);
                let t = x.nrows();
                let dec_prosody = if self.task_cfg.prosody_predictor {
                    let pred = m.prosody_predict(enc.content, table);
                    let n = pred.vectors.rows().min(t);
                    terms.push((
                        "tts_prosody",
                        sq_err_sum_var(pred.vectors, vp.vectors, n).scale(1.0 / norm.get("tts_prosody")),
                    ));
                    if self.task_cfg.tts_teacher_prosody {
                        vp
                    } else {
                        pred
                    }
                } else {
                    vp
                };
                let out = m.audio_decode(dec_prosody, enc.content)?;
                let n = out.rows().min(t);
                terms.push(("tts_mel", sq_err_sum(out, x, n).scale(1.0 / norm.get("tts_mel"))));
                let log_teacher = Array2::from_shape_fn((durations.len(), 1), |(i, _)| (durations[i] as f64).ln());
                terms.push((
                    "tts_dur",
                    abs_err_sum(enc.log_durations, &log_teacher).scale(1.0 / norm.get("tts_dur")),
                ));
                terms.push((
                    "tts_speaker",
                    sq_err_sum_var(vs.vector, table.vector, 1).scale(1.0 / norm.get("tts_speaker")),
                ));
            }
            TaskItem::Vc { x1, x2 } => {
                let xv1 = m.input(x1);
                let xv2 = m.input(x2);
                let vp1 = m.prosody_encode(xv1);
                let vp2 = m.prosody_encode(xv2);
                let vc1 = m.content_encode(xv1)?;
                let vc2 = m.content_encode(xv2)?;
                let conv_prosody: ProsodyEmbedding<'g> = if self.task_cfg.prosody_predictor {
                    let vs2 = m.speaker_encode(vp2);
                    let pred = m.prosody_predict(vc1, vs2);
                    let n = pred.vectors.rows().min(x2.nrows());
                    terms.push((
                        "vc_prosody",
                        sq_err_sum_var(pred.vectors, vp2.vectors, n).scale(1.0 / norm.get("vc_prosody")),
                    ));
                    pred
                } else {
                    vp2
                };
                let conv = m.audio_decode(conv_prosody, vc1)?;
                let n = conv.rows().min(x2.nrows());
                terms.push(("vc_conv", sq_err_sum(conv, x2, n).scale(1.0 / norm.get("vc_conv"))));
                let rec1 = m.audio_decode(vp1, vc1)?;
                terms.push((
                    "vc_rec1",
                    sq_err_sum(rec1, x1, x1.nrows()).scale(1.0 / norm.get("vc_rec1")),
                ));
                let rec2 = m.audio_decode(vp2, vc2)?;
                terms.push((
                    "vc_rec2",
                    sq_err_sum(rec2, x2, x2.nrows()).scale(1.0 / norm.get("vc_rec2")),
                ));
            }
        }
        Ok(Contribution { terms, extras })
    }
}

/// Mean squared error over the common rows of two matrices.
pub fn overlap_mse(pred: &Mat, target: &Mat) -> Result<f64> {
    let n = pred.nrows().min(target.nrows());
    if n == 0 {
        return Err(Error::EmptyReference);
    }
    if pred.ncols() != target.ncols() {
        return Err(Error::ShapeMismatch {
            what: "mse columns".into(),
            expected: (n, target.ncols()),
            got: (n, pred.ncols()),
        });
    }
    let d = &pred.slice(s![..n, ..]) - &target.slice(s![..n, ..]);
    Ok(d.mapv(|v| v * v).sum() / d.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modules::init_parameters;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::toy(9, 6, 3);
        c.d_model = 8;
        c.d_ff = 8;
        c.heads = 2;
        c.conv_kernel = 3;
        c
    }

    fn feats(t: usize, seed: usize) -> Mat {
        Array2::from_shape_fn((t, 240), |(i, j)| (((i * 31 + j * 7 + seed * 13) % 17) as f64 - 8.0) / 8.0)
    }

    #[test]
    fn weighted_sum_example() {
        let mut r = LossReport::default();
        r.terms.insert("asr_ctc".into(), 10.0);
        r.terms.insert("asr_s2s".into(), 20.0);
        r.coefficients.insert("asr_ctc".into(), 0.3);
        r.coefficients.insert("asr_s2s".into(), 0.7);
        assert!((r.recompute_total() - 17.0).abs() < 1e-12);
    }

    #[test]
    fn ctc_single_frame() {
        let p: f64 = 0.7;
        let lp = Array2::from_shape_vec((1, 3), vec![((1.0 - p) / 2.0).ln(), p.ln(), ((1.0 - p) / 2.0).ln()]).unwrap();
        assert!((ctc_loss(&lp, &[1]) - (-p.ln())).abs() < 1e-12);
        let two = Array2::from_elem((2, 3), (1.0f64 / 3.0).ln());
        assert_eq!(ctc_loss(&two, &[1, 1]), f64::INFINITY);
    }

    #[test]
    fn all_tasks_produce_finite_reports_and_gradients() {
        let c = cfg();
        let p = init_parameters(&c, 3).unwrap();
        let tc = TaskConfig::default();
        let runner = TaskRunner::new(&c, &tc, &p);
        let batches = vec![
            TaskBatch::new(Task::Asr, vec![TaskItem::Asr { x: feats(16, 0), target: vec![3, 4] }]).unwrap(),
            TaskBatch::new(Task::Se, vec![TaskItem::Se { noisy: feats(9, 1), clean: feats(9, 2) }]).unwrap(),
            TaskBatch::new(
                Task::Sc,
                vec![TaskItem::Sc { x: feats(8, 3), label: 2 }, TaskItem::Sc { x: feats(5, 4), label: 0 }],
            )
            .unwrap(),
            TaskBatch::new(
                Task::Tts,
                vec![TaskItem::Tts { phonemes: vec![1, 2, 0, 3], durations: vec![3, 2, 1, 4], x: feats(10, 5), speaker: 1 }],
            )
            .unwrap(),
            TaskBatch::new(Task::Vc, vec![TaskItem::Vc { x1: feats(12, 6), x2: feats(11, 7) }]).unwrap(),
        ];
        for b in &batches {
            let (r, g) = runner.forward_backward(b, &TermWeights::Task(1.0), 0).unwrap();
            assert!(r.is_finite(), "{r:?}");
            assert!((r.total - r.recompute_total()).abs() < 1e-12);
            assert!(g.all_finite());
            g.check_against(&p).unwrap();
            assert!(g.global_norm() > 0.0);
            let plain = runner.forward(b, true, 0).unwrap();
            assert_eq!(plain, r);
        }
    }

    #[test]
    fn se_offset_gives_mae_not_mse() {
        // a model whose output projection is zero emits zeros
        let c = cfg();
        let mut p = init_parameters(&c, 3).unwrap();
        p.get_mut("merge_dec.output.weight").unwrap().value.fill(0.0);
        let tc = TaskConfig::default();
        let runner = TaskRunner::new(&c, &tc, &p);
        let clean = Array2::from_elem((8, 240), 2.0);
        let b = TaskBatch::new(Task::Se, vec![TaskItem::Se { noisy: feats(8, 0), clean }]).unwrap();
        let r = runner.forward(&b, false, 0).unwrap();
        assert!((r.terms["se_mae"] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_items_are_rejected() {
        assert!(TaskBatch::new(Task::Asr, vec![TaskItem::Sc { x: feats(4, 0), label: 0 }]).is_err());
        let c = cfg();
        let p = init_parameters(&c, 3).unwrap();
        let tc = TaskConfig::default();
        let runner = TaskRunner::new(&c, &tc, &p);
        let b = TaskBatch::new(Task::Sc, vec![TaskItem::Sc { x: feats(4, 0), label: 3 }]).unwrap();
        assert!(matches!(runner.forward(&b, false, 0), Err(Error::LabelOutOfRange { .. })));
    }
}
