//! Experiments, the training loop and run directories.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::checkpoint::{Checkpoint, Frontend};
use crate::config::{DataConfig, ExperimentConfig, ResolvedOptim};
use crate::data::{BatchCursor, ExampleSet};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_task, report::primary_metric, EvalOptions, EvalReport};
use crate::features::audio::{save_wav, Waveform};
use crate::features::manifest::{DatasetManifest, Split};
use crate::features::text::{normalize_text, Bpe, Lexicon, PhonemeInventory, WORD_BOUNDARY};
use crate::features::toy::{make_toy_split, toy_bpe, toy_lexicon};
use crate::infer::{AsrDecoder, Inference};
use crate::modules::{init_parameters, ModelConfig};
use crate::mtl::{mtl_step, StepConfig, StepReport, TrainState};
use crate::params::ParameterSet;
use crate::tasks::{Task, TaskConfig};

pub const DEFAULT_BPE_SIZE: usize = 1000;

/// Examples of one corpus, split three ways.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: ExampleSet,
    pub valid: Option<ExampleSet>,
    pub test: Option<ExampleSet>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Option<&ExampleSet> {
        match split {
            Split::Train => Some(&self.train),
            Split::Valid => self.valid.as_ref(),
            Split::Test => self.test.as_ref(),
        }
    }
}

/// A validated config with its data, front end and model shape resolved.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: ModelConfig,
    pub task_cfg: TaskConfig,
    pub optim: ResolvedOptim,
    pub frontend: Frontend,
    pub n_speakers: usize,
    corpora: Vec<Corpus>,
    task_corpus: BTreeMap<Task, usize>,
}

fn load_lexicon(path: &Path) -> Result<Lexicon> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = BTreeMap::new();
    let mut phones: Vec<String> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        let Some(word) = it.next() else { continue };
        let pron: Vec<String> = it.map(str::to_string).collect();
        if pron.is_empty() {
            return Err(Error::Config(format!("{}:{}: `{word}` has no pronunciation", path.display(), n + 1)));
        }
        phones.extend(pron.iter().cloned());
        entries.insert(normalize_text(word), pron);
    }
    phones.sort();
    phones.dedup();
    phones.retain(|p| p != WORD_BOUNDARY);
    let refs: Vec<&str> = phones.iter().map(String::as_str).collect();
    Ok(Lexicon {
        entries,
        letter_fallback: None,
        inventory: PhonemeInventory::new(&refs),
    })
}

fn manifest_lexicon(manifests: &[&DatasetManifest]) -> Lexicon {
    let mut phones: Vec<&str> = manifests
        .iter()
        .flat_map(|m| m.records.iter().flat_map(|r| r.phonemes.iter().map(String::as_str)))
        .filter(|p| *p != WORD_BOUNDARY)
        .collect();
    phones.sort_unstable();
    phones.dedup();
    Lexicon {
        entries: BTreeMap::new(),
        letter_fallback: None,
        inventory: PhonemeInventory::new(&phones),
    }
}

fn mean_stats(sets: &[&ExampleSet]) -> Option<(Vec<f64>, Vec<f64>)> {
    let mut mean: Vec<f64> = Vec::new();
    let mut std: Vec<f64> = Vec::new();
    let mut n = 0.0;
    for e in sets.iter().flat_map(|s| s.examples.iter()) {
        let Some(st) = &e.clean.stats else { continue };
        if mean.is_empty() {
            mean = vec![0.0; st.mean.len()];
            std = vec![0.0; st.std.len()];
        }
        for (a, b) in mean.iter_mut().zip(&st.mean) {
            *a += b;
        }
        for (a, b) in std.iter_mut().zip(&st.std) {
            *a += b;
        }
        n += 1.0;
    }
    if n == 0.0 {
        return None;
    }
    mean.iter_mut().chain(std.iter_mut()).for_each(|v| *v /= n);
    Some((mean, std))
}

impl Experiment {
    /// Relative manifest and lexicon paths resolve against `base_dir`.
    pub fn prepare(config: ExperimentConfig, base_dir: &Path) -> Result<Self> {
        config.validate()?;
        let (frontend_parts, corpora, task_corpus, n_speakers) = match &config.data {
            DataConfig::Toy {
                seed,
                speakers,
                train,
                valid,
                test,
            } => {
                let bpe = toy_bpe();
                let lexicon = toy_lexicon();
                let load = |split: Split, n: usize| -> Result<Option<ExampleSet>> {
                    if n == 0 {
                        return Ok(None);
                    }
                    let d = make_toy_split(*seed, *speakers, n, split)?;
                    ExampleSet::from_toy(&d, &bpe, &lexicon).map(Some)
                };
                let corpus = Corpus {
                    train: load(Split::Train, *train)?.expect("validated train size"),
                    valid: load(Split::Valid, *valid)?,
                    test: load(Split::Test, *test)?,
                };
                let tasks = config.tasks.active.iter().map(|t| (*t, 0)).collect();
                ((bpe, lexicon), vec![corpus], tasks, *speakers)
            }
            DataConfig::Manifest {
                manifests,
                bpe_merges,
                bpe_size,
                lexicon,
            } => {
                let mut paths: Vec<&crate::config::SplitPaths> = Vec::new();
                let mut task_corpus = BTreeMap::new();
                for t in &config.tasks.active {
                    let sp = &manifests[t];
                    let k = match paths.iter().position(|p| *p == sp) {
                        Some(k) => k,
                        None => {
                            paths.push(sp);
                            paths.len() - 1
                        }
                    };
                    task_corpus.insert(*t, k);
                }
                let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
                type Loaded = (DatasetManifest, PathBuf);
                let load = |p: &Path, split: Split| -> Result<Loaded> {
                    let full = resolve(p);
                    let m = DatasetManifest::load(&full, split)?;
                    let dir = full.parent().map(Path::to_path_buf).unwrap_or_default();
                    Ok((m, dir))
                };
                let mut loaded: Vec<[Option<Loaded>; 3]> = Vec::new();
                for sp in &paths {
                    loaded.push([
                        Some(load(&sp.train, Split::Train)?),
                        sp.valid.as_deref().map(|p| load(p, Split::Valid)).transpose()?,
                        sp.test.as_deref().map(|p| load(p, Split::Test)).transpose()?,
                    ]);
                }
                let train_manifests: Vec<&DatasetManifest> =
                    loaded.iter().filter_map(|l| l[0].as_ref().map(|x| &x.0)).collect();
                let transcripts: Vec<&str> = train_manifests
                    .iter()
                    .flat_map(|m| m.records.iter().map(|r| r.transcript.as_str()))
                    .collect();
                let bpe = match bpe_merges {
                    Some(p) => Bpe::from_merges_file(resolve(p), &Bpe::learn(transcripts.iter().copied(), 0).alphabet())?,
                    None => {
                        let base = Bpe::learn(transcripts.iter().copied(), 0).vocab_size();
                        let size = bpe_size.unwrap_or(DEFAULT_BPE_SIZE);
                        Bpe::learn(transcripts.iter().copied(), size.saturating_sub(base))
                    }
                };
                let all: Vec<&DatasetManifest> = loaded.iter().flat_map(|l| l.iter().flatten().map(|x| &x.0)).collect();
                let lexicon = match lexicon {
                    Some(p) => load_lexicon(&resolve(p))?,
                    None => manifest_lexicon(&all),
                };
                let n_speakers = all
                    .iter()
                    .flat_map(|m| m.speakers())
                    .max()
                    .map_or(0, |s| s + 1);
                let build = |l: &Option<Loaded>| -> Result<Option<ExampleSet>> {
                    l.as_ref()
                        .map(|(m, dir)| ExampleSet::from_manifest(m, dir, &bpe, &lexicon))
                        .transpose()
                };
                let corpora = loaded
                    .iter()
                    .map(|l| {
                        Ok(Corpus {
                            train: build(&l[0])?.expect("train manifest"),
                            valid: build(&l[1])?,
                            test: build(&l[2])?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                ((bpe, lexicon), corpora, task_corpus, n_speakers)
            }
        };
        let (bpe, lexicon) = frontend_parts;
        let trains: Vec<&ExampleSet> = corpora.iter().map(|c| &c.train).collect();
        let frontend = Frontend {
            bpe_alphabet: bpe.alphabet(),
            bpe_merges: bpe.merges().to_vec(),
            mean_stats: mean_stats(&trains),
            lexicon: lexicon.clone(),
        };
        let model = config.model_config(bpe.vocab_size(), lexicon.inventory.len(), n_speakers)?;
        Ok(Self {
            task_cfg: config.tasks.task_config(),
            optim: config.resolved_optim(),
            config,
            model,
            frontend,
            n_speakers,
            corpora,
            task_corpus,
        })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.config.tasks.active
    }

    pub fn corpus(&self, task: Task) -> Result<&Corpus> {
        self.task_corpus
            .get(&task)
            .map(|&k| &self.corpora[k])
            .ok_or_else(|| Error::Missing(format!("data for task {task}")))
    }

    pub fn initial_state(&self) -> Result<TrainState> {
        let params = init_parameters(&self.model, self.config.seed)?;
        Ok(TrainState::new(params, self.tasks(), self.optim.sigma_scope, &self.task_cfg))
    }

    pub fn checkpoint(&self, state: &TrainState) -> Checkpoint {
        Checkpoint::new(self.config.clone(), self.model.clone(), self.frontend.clone(), state.clone())
    }

    pub fn inference<'a>(&'a self, params: &'a ParameterSet) -> Inference<'a> {
        Inference::new(&self.model, &self.task_cfg, params)
    }

    /// The configured ASR decoder; `auto` picks the lower validation WER and
    /// prefers attention on ties or without validation data.
    pub fn asr_decoder(&self, params: &ParameterSet) -> Result<AsrDecoder> {
        if let Some(d) = self.config.eval.asr_decoder.fixed() {
            return Ok(d);
        }
        let Some(valid) = self.corpus(Task::Asr)?.valid.as_ref() else {
            return Ok(AsrDecoder::Attention);
        };
        let inf = self.inference(params);
        let bpe = self.frontend.bpe();
        let att = crate::evaluation::corpus_asr_wer(&inf, valid, &bpe, AsrDecoder::Attention)?;
        let ctc = crate::evaluation::corpus_asr_wer(&inf, valid, &bpe, AsrDecoder::Ctc)?;
        Ok(if ctc < att { AsrDecoder::Ctc } else { AsrDecoder::Attention })
    }

    /// Metrics of `tasks` on `split`; tasks without data for the split are skipped.
    pub fn evaluate_tasks(&self, params: &ParameterSet, tasks: &[Task], split: Split, checkpoint: &str) -> Result<Vec<EvalReport>> {
        let bpe = self.frontend.bpe();
        let inf = self.inference(params);
        let scorer = self.config.eval.pesq_command.as_deref().map(|cmd| {
            move |r: &Waveform, e: &Waveform| external_score(cmd, r, e)
        });
        let scorer_ref = scorer.as_ref().map(|f| f as &dyn Fn(&Waveform, &Waveform) -> Result<f64>);
        let mut out = Vec::new();
        for &task in tasks {
            let Some(set) = self.corpus(task)?.split(split) else {
                log::warn!("no {} data for {}; skipped", split.name(), task.label());
                continue;
            };
            let opts = EvalOptions {
                asr_decoder: if task == Task::Asr { self.asr_decoder(params)? } else { AsrDecoder::Attention },
                raw_mse: self.config.eval.raw_mse,
            };
            out.extend(evaluate_task(&inf, set, task, &bpe, &opts, scorer_ref, split, checkpoint)?);
        }
        Ok(out)
    }

    pub fn evaluate(&self, params: &ParameterSet, split: Split, checkpoint: &str) -> Result<Vec<EvalReport>> {
        self.evaluate_tasks(params, self.tasks(), split, checkpoint)
    }
}

/// Runs `cmd reference.wav estimate.wav` through the shell and reads the
/// last number it prints.
pub fn external_score(cmd: &str, reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    let dir = tempfile_dir()?;
    let r = dir.join("reference.wav");
    let e = dir.join("estimate.wav");
    save_wav(&r, reference)?;
    save_wav(&e, estimate)?;
    let out = std::process::Command::new("sh")
        .arg("-c")
        .arg(format!("{cmd} \"$1\" \"$2\""))
        .arg("sh")
        .arg(&r)
        .arg(&e)
        .output()
        .map_err(|err| Error::io(cmd, err));
    let _ = std::fs::remove_dir_all(&dir);
    let out = out?;
    if !out.status.success() {
        return Err(Error::Config(format!("scoring command `{cmd}` failed: {}", String::from_utf8_lossy(&out.stderr).trim())));
    }
    String::from_utf8_lossy(&out.stdout)
        .split_whitespace()
        .last()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Config(format!("scoring command `{cmd}` printed no number")))
}

fn tempfile_dir() -> Result<PathBuf> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static N: AtomicU64 = AtomicU64::new(0);
    let dir = std::env::temp_dir().join(format!("speechnet-score-{}-{}", std::process::id(), N.fetch_add(1, Ordering::Relaxed)));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Steps an experiment's state over per-task batch cursors.
pub struct Trainer<'e> {
    pub exp: &'e Experiment,
    pub state: TrainState,
    cursors: BTreeMap<Task, BatchCursor>,
}

impl<'e> Trainer<'e> {
    pub fn new(exp: &'e Experiment) -> Result<Self> {
        let state = exp.initial_state()?;
        Self::with_state(exp, state)
    }

    /// Continues from `ckpt`, which must come from the same config.
    pub fn resume(exp: &'e Experiment, ckpt: Checkpoint) -> Result<Self> {
        ckpt.check_config(&exp.config)?;
        if ckpt.model != exp.model {
            return Err(Error::Checkpoint("model shape differs from the prepared experiment".into()));
        }
        Self::with_state(exp, ckpt.state)
    }

    fn with_state(exp: &'e Experiment, state: TrainState) -> Result<Self> {
        let mut cursors = BTreeMap::new();
        for &t in exp.tasks() {
            let idx = exp.corpus(t)?.train.eligible(t);
            if idx.is_empty() {
                return Err(Error::Missing(format!("training examples usable for {}", t.label())));
            }
            cursors.insert(t, BatchCursor::new(idx, exp.optim.batch_size));
        }
        Ok(Self { exp, state, cursors })
    }

    pub fn step_config(&self) -> StepConfig<'e> {
        StepConfig {
            model: &self.exp.model,
            task_cfg: &self.exp.task_cfg,
            strategy: self.exp.config.strategy,
            sigma_scope: self.exp.optim.sigma_scope,
            schedule: self.exp.optim.schedule,
            optimizer: self.exp.optim.adamw,
            seed: self.exp.config.seed,
        }
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let next = self.state.step + 1;
        let batches = self
            .exp
            .tasks()
            .iter()
            .map(|t| self.exp.corpus(*t)?.train.batch(*t, &self.cursors[t].at(next)))
            .collect::<Result<Vec<_>>>()?;
        mtl_step(&self.step_config(), &mut self.state, &batches)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.exp.checkpoint(&self.state)
    }
}

/// One JSON object per step with keys in sorted order.
pub fn metrics_line(r: &StepReport, seed: u64) -> String {
    let losses: BTreeMap<&str, f64> = r.reports.iter().map(|(t, l)| (t.name(), l.total)).collect();
    let terms: BTreeMap<&str, &BTreeMap<String, f64>> = r.reports.iter().map(|(t, l)| (t.name(), &l.terms)).collect();
    let extras: BTreeMap<&str, &BTreeMap<String, f64>> = r
        .reports
        .iter()
        .filter(|(_, l)| !l.extras.is_empty())
        .map(|(t, l)| (t.name(), &l.extras))
        .collect();
    json!({
        "step": r.step,
        "lr": r.lr,
        "strategy": r.strategy.label(),
        "seed": seed,
        "losses": losses,
        "terms": terms,
        "extras": extras,
        "sigma": r.sigmas,
        "projected_pairs": r.projected_pairs,
        "pcgrad_seed": r.pcgrad_seed,
        "skipped": r.skipped,
        "applied": r.applied,
    })
    .to_string()
}

/// Exclusive ownership of a run directory for the life of the value.
#[derive(Debug)]
pub struct RunDir {
    pub root: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub const LOCK: &'static str = "run.lock";
    pub const METRICS: &'static str = "metrics.jsonl";
    pub const EVAL: &'static str = "eval.tsv";

    /// Fails with [`Error::Locked`] while another process holds the directory.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let lock = root.join(Self::LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(Error::Locked(lock)),
            Err(e) => return Err(Error::io(&lock, e)),
        }
        Ok(Self { root, lock })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("step-{step:08}.ckpt"))
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("last.ckpt")
    }

    pub fn best_checkpoint(&self, task: Task) -> PathBuf {
        self.root.join("best").join(format!("{}.ckpt", task.name()))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}

/// Validation scores of the best checkpoint so far, per task.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BestScores {
    pub tasks: BTreeMap<Task, (u64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub final_step: u64,
    pub last_checkpoint: PathBuf,
    pub best: BestScores,
    pub final_losses: BTreeMap<Task, f64>,
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Drops metric lines past `step` so a resumed run's log stays linear.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(());
    };
    let kept: String = text
        .lines()
        .filter(|l| {
            serde_json::from_str::<serde_json::Value>(l)
                .ok()
                .and_then(|v| v["step"].as_u64())
                .is_some_and(|s| s <= step)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Trains to `max_steps`, logging every step and checkpointing on schedule.
pub fn train(exp: &Experiment, run: &RunDir, resume: Option<Checkpoint>) -> Result<TrainSummary> {
    let mut trainer = match resume {
        Some(c) => Trainer::resume(exp, c)?,
        None => Trainer::new(exp)?,
    };
    let metrics = run.path(RunDir::METRICS);
    let eval_path = run.path(RunDir::EVAL);
    let best_path = run.path("best.json");
    let mut best: BestScores = if trainer.state.step > 0 {
        truncate_metrics(&metrics, trainer.state.step)?;
        std::fs::read_to_string(&best_path)
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default()
    } else {
        File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
        std::fs::write(&eval_path, format!("{}\n", EvalReport::HEADER)).map_err(|e| Error::io(&eval_path, e))?;
        BestScores::default()
    };
    exp.config.save(run.path("config.toml"))?;
    let cfg = &exp.config;
    let mut final_losses = BTreeMap::new();
    while trainer.state.step < cfg.max_steps {
        let r = trainer.step()?;
        append(&metrics, &(metrics_line(&r, cfg.seed) + "\n"))?;
        final_losses = r.reports.iter().map(|(t, l)| (*t, l.total)).collect();
        let step = r.step;
        if step % 50 == 0 || step == 1 {
            log::info!("step {step}: {}", metrics_line(&r, cfg.seed));
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            trainer.checkpoint().save(run.checkpoint_path(step))?;
        }
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            let id = format!("step-{step:08}");
            let reports = exp.evaluate(&trainer.state.params, Split::Valid, &id)?;
            let mut rows = String::new();
            for rep in &reports {
                rows.push_str(&rep.to_tsv());
                rows.push('\n');
            }
            append(&eval_path, &rows)?;
            let mut improved = false;
            for rep in reports.iter().filter(|rep| rep.metric == primary_metric(rep.task)) {
                let better = best
                    .tasks
                    .get(&rep.task)
                    .is_none_or(|&(_, v)| rep.metric.improves(rep.value, v));
                if better {
                    best.tasks.insert(rep.task, (step, rep.value));
                    trainer.checkpoint().save(run.best_checkpoint(rep.task))?;
                    improved = true;
                }
            }
            if improved {
                let text = serde_json::to_string_pretty(&best)?;
                std::fs::write(&best_path, text).map_err(|e| Error::io(&best_path, e))?;
            }
        }
    }
    let last = run.last_checkpoint();
    trainer.checkpoint().save(&last)?;
    Ok(TrainSummary {
        final_step: trainer.state.step,
        last_checkpoint: last,
        best,
        final_losses,
    })
}
