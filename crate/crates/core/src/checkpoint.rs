//! Binary checkpoints: `SNCK1\n`, a little-endian `u64` header length, a
//! JSON header, then every tensor as little-endian `f64` in index order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::features::text::{Bpe, Lexicon};
use crate::graph::Mat;
use crate::modules::ModelConfig;
use crate::mtl::{LossBalanceState, OptimState, TrainState};
use crate::params::ParameterSet;

pub const MAGIC: &[u8; 6] = b"SNCK1\n";

/// Text front end and feature statistics needed to run inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frontend {
    pub bpe_alphabet: Vec<char>,
    pub bpe_merges: Vec<(String, String)>,
    pub lexicon: Lexicon,
    /// Mean CMVN statistics of the training audio, used to de-normalize
    /// synthesized features.
    pub mean_stats: Option<(Vec<f64>, Vec<f64>)>,
}

impl Frontend {
    pub fn bpe(&self) -> Bpe {
        Bpe::new(&self.bpe_alphabet, self.bpe_merges.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    rows: usize,
    cols: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    decay_exempt: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    config: ExperimentConfig,
    model: ModelConfig,
    frontend: Frontend,
    seed: u64,
    step: u64,
    optim_step: u64,
    sigma_optim_step: u64,
    sigma_keys: Vec<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub model: ModelConfig,
    pub frontend: Frontend,
    pub state: TrainState,
}

fn push(entries: &mut Vec<TensorEntry>, data: &mut Vec<u8>, group: &str, name: &str, m: &Mat, exempt: bool) {
    entries.push(TensorEntry {
        group: group.into(),
        name: name.into(),
        rows: m.nrows(),
        cols: m.ncols(),
        decay_exempt: exempt,
    });
    for v in m.iter() {
        data.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn new(config: ExperimentConfig, model: ModelConfig, frontend: Frontend, state: TrainState) -> Self {
        Self {
            config_hash: config.hash(),
            config,
            model,
            frontend,
            state,
        }
    }

    pub fn step(&self) -> u64 {
        self.state.step
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut data = Vec::new();
        let s = &self.state;
        for (name, p) in s.params.iter() {
            push(&mut entries, &mut data, "param", name, &p.value, p.decay_exempt);
        }
        for (group, map) in [("m", &s.optim.m), ("v", &s.optim.v)] {
            for (name, m) in map {
                push(&mut entries, &mut data, group, name, m, false);
            }
        }
        for (group, map) in [("sigma_m", &s.balance.optim.m), ("sigma_v", &s.balance.optim.v)] {
            for (name, m) in map {
                push(&mut entries, &mut data, group, name, m, false);
            }
        }
        for (k, v) in &s.balance.log_sigma {
            push(&mut entries, &mut data, "log_sigma", k, &Array2::from_elem((1, 1), *v), true);
        }
        let header = Header {
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
            model: self.model.clone(),
            frontend: self.frontend.clone(),
            seed: self.config.seed,
            step: s.step,
            optim_step: s.optim.step,
            sigma_optim_step: s.balance.optim.step,
            sigma_keys: s.balance.log_sigma.keys().cloned().collect(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a speechnet checkpoint (bad magic)"));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
        let hlen = u64::from_le_bytes(len) as usize;
        let start = MAGIC.len() + 8;
        let header_bytes = bytes
            .get(start..start.saturating_add(hlen))
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(header_bytes)?;
        let mut pos = start + hlen;
        let mut state = TrainState {
            params: ParameterSet::default(),
            optim: OptimState {
                step: header.optim_step,
                ..OptimState::default()
            },
            balance: LossBalanceState {
                log_sigma: BTreeMap::new(),
                optim: OptimState {
                    step: header.sigma_optim_step,
                    ..OptimState::default()
                },
            },
            step: header.step,
        };
        for e in &header.tensors {
            let n = e.rows * e.cols;
            let raw = bytes
                .get(pos..pos + 8 * n)
                .ok_or_else(|| bad(&format!("truncated data for {} {}", e.group, e.name)))?;
            pos += 8 * n;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let m = Array2::from_shape_vec((e.rows, e.cols), values).map_err(|err| bad(&err.to_string()))?;
            let name = e.name.clone();
            match e.group.as_str() {
                "param" => state.params.insert(name, m, e.decay_exempt),
                "m" => {
                    state.optim.m.insert(name, m);
                }
                "v" => {
                    state.optim.v.insert(name, m);
                }
                "sigma_m" => {
                    state.balance.optim.m.insert(name, m);
                }
                "sigma_v" => {
                    state.balance.optim.v.insert(name, m);
                }
                "log_sigma" => {
                    state.balance.log_sigma.insert(name, m[[0, 0]]);
                }
                g => return Err(bad(&format!("unknown tensor group `{g}`"))),
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        if header.config.hash() != header.config_hash {
            return Err(Error::HashMismatch {
                checkpoint: header.config_hash,
                config: header.config.hash(),
            });
        }
        Ok(Self {
            config: header.config,
            config_hash: header.config_hash,
            model: header.model,
            frontend: header.frontend,
            state,
        })
    }

    /// Atomic write through a temporary sibling file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless this checkpoint was trained under `cfg`.
    pub fn check_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        let h = cfg.hash();
        if h != self.config_hash {
            return Err(Error::HashMismatch {
                checkpoint: self.config_hash.clone(),
                config: h,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::toy::{toy_bpe, toy_lexicon};
    use crate::modules::init_parameters;
    use crate::mtl::SigmaScope;
    use crate::mtl::Strategy;
    use crate::tasks::{Task, TaskConfig};

    fn sample() -> Checkpoint {
        let cfg = ExperimentConfig::toy(&[Task::Asr, Task::Sc], Strategy::AutoLoss, 3);
        let bpe = toy_bpe();
        let model = ModelConfig::toy(bpe.vocab_size(), 13, 4);
        let params = init_parameters(&model, 3).unwrap();
        let mut state = TrainState::new(params, &cfg.tasks.active, SigmaScope::Task, &TaskConfig::default());
        state.step = 17;
        state.optim.step = 17;
        state.balance.log_sigma.insert("sc".into(), -0.25);
        state.optim.m.values_mut().next().unwrap()[[0, 0]] = 1.5e-7;
        let frontend = Frontend {
            bpe_alphabet: bpe.alphabet(),
            bpe_merges: bpe.merges().to_vec(),
            lexicon: toy_lexicon(),
            mean_stats: Some((vec![0.5; 240], vec![2.0; 240])),
        };
        Checkpoint::new(cfg, model, frontend, state)
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..6], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_damage_and_foreign_configs() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"GARBAGE_____").is_err());
        let mut other = c.config.clone();
        other.seed += 1;
        assert!(matches!(c.check_config(&other), Err(Error::HashMismatch { .. })));
        assert!(c.check_config(&c.config).is_ok());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample();
        let path = dir.path().join("a/b.ckpt");
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }
}
