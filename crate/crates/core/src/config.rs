//! Experiment configuration files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::infer::AsrDecoder;
use crate::modules::ModelConfig;
use crate::mtl::{AdamW, LrSchedule, SigmaScope, Strategy};
use crate::tasks::{Task, TaskConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Toy,
    Paper,
}

/// Optional overrides applied on top of the scale preset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv_kernel: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default)]
    pub sigma_scope: SigmaScope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsrTaskConfig {
    pub alpha: f64,
}

impl Default for AsrTaskConfig {
    fn default() -> Self {
        Self { alpha: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtsTaskConfig {
    #[serde(default)]
    pub teacher_prosody: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TasksConfig {
    #[serde(default)]
    pub active: Vec<Task>,
    #[serde(default = "yes")]
    pub prosody_predictor: bool,
    #[serde(default)]
    pub asr: AsrTaskConfig,
    #[serde(default)]
    pub tts: TtsTaskConfig,
}

impl Default for TasksConfig {
    fn default() -> Self {
        Self {
            active: Vec::new(),
            prosody_predictor: true,
            asr: AsrTaskConfig::default(),
            tts: TtsTaskConfig::default(),
        }
    }
}

impl TasksConfig {
    pub fn task_config(&self) -> TaskConfig {
        TaskConfig {
            asr_alpha: self.asr.alpha,
            tts_teacher_prosody: self.tts.teacher_prosody,
            prosody_predictor: self.prosody_predictor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPaths {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

fn toy_seed() -> u64 {
    1
}
fn toy_speakers() -> usize {
    4
}
fn toy_utts() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Synthetic corpus generated in memory.
    Toy {
        #[serde(default = "toy_seed")]
        seed: u64,
        #[serde(default = "toy_speakers")]
        speakers: usize,
        #[serde(default = "toy_utts")]
        train: usize,
        #[serde(default = "toy_utts")]
        valid: usize,
        #[serde(default = "toy_utts")]
        test: usize,
    },
    /// JSONL manifests per task; relative paths resolve against the config file.
    Manifest {
        manifests: BTreeMap<Task, SplitPaths>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bpe_merges: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bpe_size: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lexicon: Option<PathBuf>,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Toy {
            seed: toy_seed(),
            speakers: toy_speakers(),
            train: toy_utts(),
            valid: toy_utts(),
            test: toy_utts(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderChoice {
    Ctc,
    #[default]
    Attention,
    /// Whichever decoder has the lower validation WER.
    Auto,
}

impl DecoderChoice {
    pub fn fixed(self) -> Option<AsrDecoder> {
        match self {
            DecoderChoice::Ctc => Some(AsrDecoder::Ctc),
            DecoderChoice::Attention => Some(AsrDecoder::Attention),
            DecoderChoice::Auto => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub asr_decoder: DecoderChoice,
    #[serde(default)]
    pub raw_mse: bool,
    /// External command scoring `(reference.wav, enhanced.wav)`; prints one number.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pesq_command: Option<String>,
}

fn default_name() -> String {
    "run".into()
}
fn default_steps() -> u64 {
    300
}
fn default_strategy() -> Strategy {
    Strategy::None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scale: Scale,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_steps")]
    pub max_steps: u64,
    /// Validation interval in steps; 0 disables periodic evaluation.
    #[serde(default)]
    pub eval_every: u64,
    /// Checkpoint interval in steps; 0 keeps only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub tasks: TasksConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// Optimizer settings after the scale preset is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedOptim {
    pub schedule: LrSchedule,
    pub adamw: AdamW,
    pub batch_size: usize,
    pub sigma_scope: SigmaScope,
}

impl ExperimentConfig {
    /// A checked-in starting point for `tasks` at toy scale.
    pub fn toy(tasks: &[Task], strategy: Strategy, seed: u64) -> Self {
        Self {
            name: default_name(),
            seed,
            scale: Scale::Toy,
            strategy,
            max_steps: default_steps(),
            eval_every: 0,
            checkpoint_every: 0,
            model: ModelOverrides::default(),
            optim: OptimConfig::default(),
            tasks: TasksConfig {
                active: tasks.to_vec(),
                prosody_predictor: true,
                asr: AsrTaskConfig::default(),
                tts: TtsTaskConfig::default(),
            },
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Every problem, one per field, joined with `; `.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.tasks.active.is_empty() {
            p.push("tasks.active must name at least one task".to_string());
        }
        let mut seen = self.tasks.active.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.tasks.active.len() {
            p.push("tasks.active lists a task twice".into());
        }
        if !(0.0..=1.0).contains(&self.tasks.asr.alpha) {
            p.push(format!("tasks.asr.alpha must lie in [0, 1], got {}", self.tasks.asr.alpha));
        }
        if self.max_steps == 0 {
            p.push("max_steps must be at least 1".into());
        }
        if let Some(lr) = self.optim.lr {
            if !(lr.is_finite() && lr > 0.0) {
                p.push(format!("optim.lr must be positive, got {lr}"));
            }
        }
        if self.optim.batch_size == Some(0) {
            p.push("optim.batch_size must be at least 1".into());
        }
        if let Some(wd) = self.optim.weight_decay {
            if !(0.0..1.0).contains(&wd) {
                p.push(format!("optim.weight_decay must lie in [0, 1), got {wd}"));
            }
        }
        match &self.data {
            DataConfig::Toy { speakers, train, .. } => {
                if *speakers < 2 {
                    p.push("data.speakers must be at least 2".into());
                }
                if train < speakers {
                    p.push("data.train must be at least data.speakers".into());
                }
            }
            DataConfig::Manifest { manifests, .. } => {
                for t in &self.tasks.active {
                    if !manifests.contains_key(t) {
                        p.push(format!("data.manifests.{} is missing for an active task", t.name()));
                    }
                }
            }
        }
        if let Some(0) = self.model.layers {
            p.push("model.layers must be at least 1".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    pub fn resolved_optim(&self) -> ResolvedOptim {
        let (lr, warmup, decay, batch) = match self.scale {
            Scale::Toy => (4e-3, 30, 10_000, 8),
            Scale::Paper => (3e-4, 10_000, 100_000, 16),
        };
        let o = &self.optim;
        ResolvedOptim {
            schedule: LrSchedule {
                peak: o.lr.unwrap_or(lr),
                warmup: o.warmup_steps.unwrap_or(warmup),
                decay: o.decay_steps.unwrap_or(decay),
            },
            adamw: AdamW {
                weight_decay: o.weight_decay.unwrap_or(0.01),
                eps: o.eps.unwrap_or(1e-12),
                ..AdamW::default()
            },
            batch_size: o.batch_size.unwrap_or(batch),
            sigma_scope: o.sigma_scope,
        }
    }

    /// Preset for the data-dependent vocabulary sizes, with overrides.
    pub fn model_config(&self, bpe_vocab: usize, phoneme_vocab: usize, n_speakers: usize) -> Result<ModelConfig> {
        let mut m = match self.scale {
            Scale::Toy => ModelConfig::toy(bpe_vocab, phoneme_vocab, n_speakers),
            Scale::Paper => ModelConfig::paper(bpe_vocab, phoneme_vocab, n_speakers),
        };
        let o = &self.model;
        if let Some(v) = o.d_model {
            m.d_model = v;
        }
        if let Some(v) = o.d_ff {
            m.d_ff = v;
        }
        if let Some(v) = o.heads {
            m.heads = v;
        }
        if let Some(v) = o.unit_heads {
            m.unit_heads = v;
        }
        if let Some(n) = o.layers {
            let l = &mut m.layers;
            for c in [
                &mut l.content_enc,
                &mut l.speaker_enc,
                &mut l.content_dec,
                &mut l.merge_dec,
                &mut l.unit_enc,
                &mut l.s2s_dec,
                &mut l.prosody_enc,
                &mut l.prosody_pred,
            ] {
                *c = n;
            }
        }
        if let Some(v) = o.dropout {
            m.dropout = v;
        }
        if let Some(v) = o.conv_kernel {
            m.conv_kernel = v;
        }
        m.validate()?;
        Ok(m)
    }

    /// SHA-256 over everything that shapes the trained parameters. Step
    /// budgets, intervals, the run name and evaluation settings are left out
    /// so a run can be resumed with a larger budget.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.name = String::new();
        c.max_steps = 0;
        c.eval_every = 0;
        c.checkpoint_every = 0;
        c.eval = EvalConfig::default();
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
name = "asr-sc"
seed = 7
scale = "toy"
strategy = "autoloss+pcgrad"
max_steps = 50

[optim]
lr = 0.002
sigma_scope = "term"

[tasks]
active = ["asr", "sc"]
asr.alpha = 0.4

[data]
kind = "toy"
speakers = 3
"#;

    #[test]
    fn parses_dotted_keys() {
        let c = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(c.tasks.asr.alpha, 0.4);
        assert_eq!(c.strategy, Strategy::AutoLossPcGrad);
        assert_eq!(c.resolved_optim().schedule.peak, 0.002);
        assert_eq!(c.resolved_optim().batch_size, 8);
        assert!(c.tasks.prosody_predictor);
        assert!(matches!(c.data, DataConfig::Toy { speakers: 3, train: 8, .. }));
    }

    #[test]
    fn round_trip() {
        let c = ExperimentConfig::from_toml(SAMPLE).unwrap();
        let again = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
    }

    #[test]
    fn lists_every_problem() {
        let bad = r#"
max_steps = 0
[tasks]
active = []
asr.alpha = 2.0
"#;
        let msg = ExperimentConfig::from_toml(bad).unwrap_err().to_string();
        assert!(msg.contains("tasks.active"));
        assert!(msg.contains("tasks.asr.alpha"));
        assert!(msg.contains("max_steps"));
        let unknown = "[tasks]\nactive = [\"asr\"]\nbogus = 1\n";
        assert!(ExperimentConfig::from_toml(unknown).is_err());
        let missing = "[tasks]\nactive = [\"asr\"]\n[data]\nkind = \"manifest\"\nmanifests = {}\n";
        assert!(ExperimentConfig::from_toml(missing)
            .unwrap_err()
            .to_string()
            .contains("data.manifests.asr"));
    }

    #[test]
    fn hash_ignores_budget_only() {
        let c = ExperimentConfig::toy(&[Task::Asr], Strategy::None, 1);
        let mut longer = c.clone();
        longer.max_steps = 900;
        assert_eq!(c.hash(), longer.hash());
        let mut other = c.clone();
        other.tasks.asr.alpha = 0.5;
        assert_ne!(c.hash(), other.hash());
    }

    #[test]
    fn paper_preset_values() {
        let mut c = ExperimentConfig::toy(&[Task::Asr], Strategy::None, 1);
        c.scale = Scale::Paper;
        let o = c.resolved_optim();
        assert_eq!(o.schedule, LrSchedule::default());
        assert_eq!(o.batch_size, 16);
        assert_eq!(o.adamw, AdamW::default());
    }
}
