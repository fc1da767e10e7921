//! Multi-task optimization: uncertainty loss balancing, per-tensor gradient
//! surgery, AdamW with a warmup/decay schedule, and the per-step loop.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ExampleSet;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat};
use crate::modules::ModelConfig;
use crate::params::{GradientSet, ParameterSet};
use crate::tasks::{LossReport, Task, TaskBatch, TaskConfig, TaskRunner, TermWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "autoloss")]
    AutoLoss,
    #[serde(rename = "pcgrad")]
    PcGrad,
    #[serde(rename = "autoloss+pcgrad")]
    AutoLossPcGrad,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::AutoLossPcGrad,
        Strategy::AutoLoss,
        Strategy::PcGrad,
        Strategy::None,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::AutoLoss => "autoloss",
            Strategy::PcGrad => "pcgrad",
            Strategy::AutoLossPcGrad => "autoloss+pcgrad",
        }
    }

    /// Row label used in result tables and logs.
    pub fn label(self) -> &'static str {
        match self {
            Strategy::None => "No Strategy",
            Strategy::AutoLoss => "AutoLoss",
            Strategy::PcGrad => "PCGrad",
            Strategy::AutoLossPcGrad => "AutoLoss + PCGrad",
        }
    }

    pub fn uses_autoloss(self) -> bool {
        matches!(self, Strategy::AutoLoss | Strategy::AutoLossPcGrad)
    }

    pub fn uses_pcgrad(self) -> bool {
        matches!(self, Strategy::PcGrad | Strategy::AutoLossPcGrad)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_lowercase();
        Strategy::ALL
            .into_iter()
            .find(|st| st.key() == norm || st.label().replace(' ', "").to_lowercase() == norm)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy `{s}` (expected none, autoloss, pcgrad or autoloss+pcgrad)"
                ))
            })
    }
}

/// `peak · s/warmup` during warmup, then linear decay to zero over `decay` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub decay: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            peak: 3e-4,
            warmup: 10_000,
            decay: 100_000,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if step <= self.warmup {
            if self.warmup == 0 {
                return self.peak;
            }
            return self.peak * step as f64 / self.warmup as f64;
        }
        let into = step - self.warmup;
        if into >= self.decay {
            0.0
        } else {
            self.peak * (1.0 - into as f64 / self.decay as f64)
        }
    }
}

pub fn lr_schedule(step: u64) -> f64 {
    LrSchedule::default().at(step)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-12,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimState {
    pub m: BTreeMap<String, Mat>,
    pub v: BTreeMap<String, Mat>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros = |p: &crate::params::Parameter| Array2::zeros(p.value.dim());
        Self {
            m: params.iter().map(|(k, p)| (k.clone(), zeros(p))).collect(),
            v: params.iter().map(|(k, p)| (k.clone(), zeros(p))).collect(),
            step: 0,
        }
    }
}

impl AdamW {
    /// One update at learning rate `lr`. Tensors without a gradient entry
    /// are updated with a zero gradient. A non-finite gradient leaves
    /// everything untouched and returns an error.
    pub fn step(&self, params: &mut ParameterSet, g: &GradientSet, st: &mut OptimState, lr: f64) -> Result<()> {
        g.check_against(params)?;
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("{} gradients", g.task)));
        }
        st.step += 1;
        let t = st.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let m = st
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(p.value.dim()));
            let v = st
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(p.value.dim()));
            if !p.decay_exempt && self.weight_decay != 0.0 {
                let k = 1.0 - lr * self.weight_decay;
                p.value.mapv_inplace(|x| x * k);
            }
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let update = |p: &mut f64, m: &mut f64, v: &mut f64, gi: f64| {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            };
            match g.grads.get(name) {
                Some(grad) => Zip::from(&mut p.value)
                    .and(&mut *m)
                    .and(&mut *v)
                    .and(grad)
                    .for_each(|p, m, v, &gi| update(p, m, v, gi)),
                None => Zip::from(&mut p.value)
                    .and(&mut *m)
                    .and(&mut *v)
                    .for_each(|p, m, v| update(p, m, v, 0.0)),
            }
        }
        Ok(())
    }
}

/// Learnable `log σ` per balanced loss.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBalanceState {
    pub log_sigma: BTreeMap<String, f64>,
    pub optim: OptimState,
}

impl LossBalanceState {
    pub fn new<S: Into<String>>(keys: impl IntoIterator<Item = S>) -> Self {
        Self {
            log_sigma: keys.into_iter().map(|k| (k.into(), 0.0)).collect(),
            optim: OptimState::default(),
        }
    }

    pub fn sigma(&self, key: &str) -> f64 {
        self.log_sigma.get(key).copied().unwrap_or(0.0).exp()
    }

    pub fn sigmas(&self) -> BTreeMap<String, f64> {
        self.log_sigma.iter().map(|(k, v)| (k.clone(), v.exp())).collect()
    }

    /// `1/σ²` for `key`.
    pub fn weight(&self, key: &str) -> f64 {
        (-2.0 * self.log_sigma.get(key).copied().unwrap_or(0.0)).exp()
    }

    pub fn as_params(&self) -> ParameterSet {
        let mut p = ParameterSet::default();
        for (k, v) in &self.log_sigma {
            p.insert(format!("autoloss.{k}"), Array2::from_elem((1, 1), *v), true);
        }
        p
    }

    fn load_params(&mut self, p: &ParameterSet) {
        for (k, v) in self.log_sigma.iter_mut() {
            if let Some(x) = p.get(&format!("autoloss.{k}")) {
                *v = x.value[[0, 0]];
            }
        }
    }
}

/// `Σ_i (L_i/σ_i² + log σ_i)` and its gradient with respect to each `log σ_i`.
pub fn balance_losses_with_grad(
    losses: &BTreeMap<String, f64>,
    s: &LossBalanceState,
) -> Result<(f64, BTreeMap<String, f64>)> {
    let g = Graph::new();
    let mut parts = Vec::new();
    for (k, &l) in losses {
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("loss {k}")));
        }
        let ls = g.named_leaf(k, Array2::from_elem((1, 1), s.log_sigma.get(k).copied().unwrap_or(0.0)));
        parts.push(ls.scale(-2.0).exp().scale(l).add(ls));
    }
    if parts.is_empty() {
        return Ok((0.0, BTreeMap::new()));
    }
    let total = parts[1..].iter().fold(parts[0], |a, b| a.add(*b));
    let value = total.scalar_value();
    let grads = g
        .backward(total)
        .into_named()
        .into_iter()
        .map(|(k, m)| (k, m[[0, 0]]))
        .collect();
    Ok((value, grads))
}

pub fn balance_losses(losses: &BTreeMap<String, f64>, s: &LossBalanceState) -> Result<f64> {
    balance_losses_with_grad(losses, s).map(|(v, _)| v)
}

/// Updates `log σ` with its own AdamW (no weight decay).
pub fn update_sigmas(s: &mut LossBalanceState, grads: &BTreeMap<String, f64>, lr: f64, opt: &AdamW) -> Result<()> {
    let mut params = s.as_params();
    let mut gs = GradientSet::new("autoloss");
    for (k, v) in grads {
        gs.grads.insert(format!("autoloss.{k}"), Array2::from_elem((1, 1), *v));
    }
    let no_decay = AdamW {
        weight_decay: 0.0,
        ..*opt
    };
    no_decay.step(&mut params, &gs, &mut s.optim, lr)?;
    s.load_params(&params);
    Ok(())
}

fn dot(a: &Mat, b: &Mat) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + x * y)
}

/// Output of [`pcgrad`].
#[derive(Debug, Clone, PartialEq)]
pub struct Surgery {
    pub combined: GradientSet,
    /// Per-task gradients after projection.
    pub projected: Vec<GradientSet>,
    /// Number of (tensor, task, other-task) projections applied.
    pub projected_pairs: usize,
}

/// Per-tensor projection of conflicting task gradients. For task `i` the
/// other tasks are visited in an order shuffled from `seed`, and each
/// projection uses the other task's original gradient.
pub fn pcgrad(grads: &[GradientSet], seed: u64) -> Result<Surgery> {
    let n = grads.len();
    let mut names: Vec<&String> = grads.iter().flat_map(|g| g.grads.keys()).collect();
    names.sort();
    names.dedup();
    let orders: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.shuffle(&mut rng);
            order
        })
        .collect();
    let mut projected: Vec<GradientSet> = grads.iter().map(|g| GradientSet::new(g.task.clone())).collect();
    let mut combined = GradientSet::new("pcgrad");
    let mut pairs = 0;
    for name in names {
        let present: Vec<usize> = (0..n).filter(|&i| grads[i].grads.contains_key(name)).collect();
        let dim = grads[present[0]].grads[name].dim();
        for &i in &present {
            let got = grads[i].grads[name].dim();
            if got != dim {
                return Err(Error::ShapeMismatch {
                    what: format!("gradient {name} of task {}", grads[i].task),
                    expected: dim,
                    got,
                });
            }
        }
        let norms: BTreeMap<usize, f64> = present
            .iter()
            .map(|&j| (j, dot(&grads[j].grads[name], &grads[j].grads[name])))
            .collect();
        for &i in &present {
            let mut g_pc = grads[i].grads[name].clone();
            for &j in &orders[i] {
                let Some(g_j) = grads[j].grads.get(name) else { continue };
                let d = dot(&g_pc, g_j);
                if d < 0.0 && norms[&j] > 0.0 {
                    g_pc.scaled_add(-d / norms[&j], g_j);
                    pairs += 1;
                }
            }
            combined.accumulate(name, &g_pc, 1.0);
            projected[i].grads.insert(name.clone(), g_pc);
        }
    }
    Ok(Surgery {
        combined,
        projected,
        projected_pairs: pairs,
    })
}

pub fn sum_gradients(grads: &[GradientSet]) -> GradientSet {
    let mut out = GradientSet::new("sum");
    for g in grads {
        out.merge(g, 1.0);
    }
    out
}

/// Balance granularity for AutoLoss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaScope {
    #[default]
    Task,
    Term,
}

/// Everything the step loop needs besides data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParameterSet,
    pub optim: OptimState,
    pub balance: LossBalanceState,
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ParameterSet, tasks: &[Task], scope: SigmaScope, task_cfg: &TaskConfig) -> Self {
        let optim = OptimState::new(&params);
        let keys: Vec<String> = match scope {
            SigmaScope::Task => tasks.iter().map(|t| t.name().to_string()).collect(),
            SigmaScope::Term => tasks
                .iter()
                .flat_map(|t| term_names(*t, task_cfg))
                .collect(),
        };
        Self {
            params,
            optim,
            balance: LossBalanceState::new(keys),
            step: 0,
        }
    }
}

fn term_names(task: Task, tc: &TaskConfig) -> Vec<String> {
    let mut v: Vec<&str> = match task {
        Task::Asr => vec!["asr_ctc", "asr_s2s", "asr_recon"],
        Task::Se => vec!["se_mae"],
        Task::Sc => vec!["sc_ce"],
        Task::Tts => vec!["tts_mel", "tts_dur", "tts_speaker"],
        Task::Vc => vec!["vc_conv", "vc_rec1", "vc_rec2"],
    };
    if tc.prosody_predictor {
        match task {
            Task::Tts => v.push("tts_prosody"),
            Task::Vc => v.push("vc_prosody"),
            _ => {}
        }
    }
    v.into_iter().map(str::to_string).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepConfig<'a> {
    pub model: &'a ModelConfig,
    pub task_cfg: &'a TaskConfig,
    pub strategy: Strategy,
    pub sigma_scope: SigmaScope,
    pub schedule: LrSchedule,
    pub optimizer: AdamW,
    pub seed: u64,
}

/// What happened in one step, for the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub strategy: Strategy,
    pub reports: BTreeMap<Task, LossReport>,
    pub sigmas: BTreeMap<String, f64>,
    pub projected_pairs: usize,
    pub pcgrad_seed: Option<u64>,
    pub skipped: Vec<String>,
    pub applied: bool,
}

/// Seed mixing for per-step randomness.
pub fn mix_seed(seed: u64, step: u64, salt: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One multi-task update over the given batches, in order.
pub fn mtl_step(cfg: &StepConfig<'_>, state: &mut TrainState, batches: &[TaskBatch]) -> Result<StepReport> {
    let step = state.step + 1;
    let lr = cfg.schedule.at(step);
    let auto = cfg.strategy.uses_autoloss();
    let mut reports = BTreeMap::new();
    let mut task_grads = Vec::new();
    let mut skipped = Vec::new();
    let mut raw_losses: BTreeMap<String, f64> = BTreeMap::new();
    {
        let runner = TaskRunner::new(cfg.model, cfg.task_cfg, &state.params);
        for (k, batch) in batches.iter().enumerate() {
            let task = batch.task;
            let weights = if auto {
                match cfg.sigma_scope {
                    SigmaScope::Task => TermWeights::Task(state.balance.weight(task.name())),
                    SigmaScope::Term => TermWeights::PerTerm(
                        term_names(task, cfg.task_cfg)
                            .into_iter()
                            .map(|t| {
                                let w = state.balance.weight(&t);
                                (t, w)
                            })
                            .collect(),
                    ),
                }
            } else {
                TermWeights::Task(1.0)
            };
            match runner.forward_backward(batch, &weights, mix_seed(cfg.seed, step, k as u64 + 1)) {
                Ok((report, grads)) if grads.all_finite() => {
                    match cfg.sigma_scope {
                        SigmaScope::Task => {
                            raw_losses.insert(task.name().to_string(), report.total);
                        }
                        SigmaScope::Term => {
                            for (t, v) in &report.terms {
                                raw_losses.insert(t.clone(), report.coefficients[t] * v);
                            }
                        }
                    }
                    reports.insert(task, report);
                    task_grads.push(grads);
                }
                Ok(_) => {
                    log::warn!("step {step}: non-finite {task} gradients, task skipped");
                    skipped.push(task.name().to_string());
                }
                Err(e) => {
                    log::warn!("step {step}: {task} skipped: {e}");
                    skipped.push(task.name().to_string());
                }
            }
        }
    }
    let mut projected_pairs = 0;
    let mut pcgrad_seed = None;
    let combined = if cfg.strategy.uses_pcgrad() && task_grads.len() >= 2 {
        let seed = mix_seed(cfg.seed, step, 0x70c6);
        pcgrad_seed = Some(seed);
        let s = pcgrad(&task_grads, seed)?;
        projected_pairs = s.projected_pairs;
        s.combined
    } else {
        sum_gradients(&task_grads)
    };
    let mut applied = false;
    if !task_grads.is_empty() {
        match cfg.optimizer.step(&mut state.params, &combined, &mut state.optim, lr) {
            Ok(()) => applied = true,
            Err(e) => log::warn!("step {step}: update skipped: {e}"),
        }
        if auto && applied {
            let (_, sigma_grads) = balance_losses_with_grad(&raw_losses, &state.balance)?;
            update_sigmas(&mut state.balance, &sigma_grads, lr, &cfg.optimizer)?;
        }
    }
    state.step = step;
    Ok(StepReport {
        step,
        lr,
        strategy: cfg.strategy,
        reports,
        sigmas: state.balance.sigmas(),
        projected_pairs,
        pcgrad_seed,
        skipped,
        applied,
    })
}

/// Assembles the batches of one step from per-task cursors.
pub fn step_batches(
    set: &ExampleSet,
    tasks: &[Task],
    cursors: &BTreeMap<Task, crate::data::BatchCursor>,
    step: u64,
) -> Result<Vec<TaskBatch>> {
    tasks
        .iter()
        .map(|t| {
            let c = cursors
                .get(t)
                .ok_or_else(|| Error::Missing(format!("data for task {t}")))?;
            set.batch(*t, &c.at(step))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gs(task: &str, v: &[(&str, Vec<f64>)]) -> GradientSet {
        let mut g = GradientSet::new(task);
        for (k, x) in v {
            g.grads
                .insert(k.to_string(), Array2::from_shape_vec((1, x.len()), x.clone()).unwrap());
        }
        g
    }

    #[test]
    fn schedule_points() {
        assert_eq!(lr_schedule(0), 0.0);
        assert!((lr_schedule(10_000) - 3e-4).abs() < 1e-18);
        assert!((lr_schedule(60_000) - 1.5e-4).abs() < 1e-15);
        assert_eq!(lr_schedule(110_000), 0.0);
        assert_eq!(lr_schedule(200_000), 0.0);
    }

    #[test]
    fn pcgrad_hand_example() {
        let g1 = gs("a", &[("w", vec![1.0, 0.0])]);
        let g2 = gs("b", &[("w", vec![-1.0, 1.0])]);
        let s = pcgrad(&[g1, g2], 0).unwrap();
        let out = &s.combined.grads["w"];
        assert!((out[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((out[[0, 1]] - 1.5).abs() < 1e-12);
        assert_eq!(s.projected_pairs, 2);
    }

    #[test]
    fn pcgrad_passes_non_conflicting_and_unshared() {
        let g1 = gs("a", &[("w", vec![1.0, 0.0]), ("only_a", vec![3.0])]);
        let g2 = gs("b", &[("w", vec![1.0, 1.0])]);
        let s = pcgrad(&[g1.clone(), g2.clone()], 7).unwrap();
        assert_eq!(s.combined.grads["w"], Array2::from_shape_vec((1, 2), vec![2.0, 1.0]).unwrap());
        assert_eq!(s.combined.grads["only_a"], g1.grads["only_a"]);
        assert_eq!(s.projected_pairs, 0);
        let single = pcgrad(std::slice::from_ref(&g1), 1).unwrap();
        assert_eq!(single.combined.grads, g1.grads);
        let bad = gs("c", &[("w", vec![1.0])]);
        assert!(pcgrad(&[g1, bad], 0).is_err());
    }

    #[test]
    fn autoloss_values() {
        let mut s = LossBalanceState::new(["a", "b"]);
        let losses: BTreeMap<String, f64> = [("a".to_string(), 3.0), ("b".to_string(), 4.5)].into();
        assert_eq!(balance_losses(&losses, &s).unwrap(), 7.5);
        s.log_sigma.insert("a".into(), 2f64.ln());
        let one: BTreeMap<String, f64> = [("a".to_string(), 4.0)].into();
        let (v, g) = balance_losses_with_grad(&one, &s).unwrap();
        assert!((v - (1.0 + 2f64.ln())).abs() < 1e-12);
        // d/dσ = (d/dlogσ) / σ
        assert!((g["a"] / 2.0 - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn adamw_scalar_step_by_hand() {
        let mut p = ParameterSet::default();
        p.insert("w", Array2::from_elem((1, 1), 0.5), false);
        p.insert("b.bias", Array2::from_elem((1, 1), 0.5), true);
        let mut st = OptimState::new(&p);
        let mut g = GradientSet::new("t");
        g.grads.insert("w".into(), Array2::from_elem((1, 1), 1.0));
        let opt = AdamW::default();
        let lr = 0.1;
        opt.step(&mut p, &g, &mut st, lr).unwrap();
        // decay then m̂ = 1, v̂ = 1
        let expected = 0.5 * (1.0 - lr * 0.01) - lr * 1.0 / (1.0 + 1e-12);
        assert!((p.get("w").unwrap().value[[0, 0]] - expected).abs() < 1e-12);
        assert_eq!(p.get("b.bias").unwrap().value[[0, 0]], 0.5);
    }

    #[test]
    fn adamw_zero_grad_decays_only_non_exempt() {
        let mut p = ParameterSet::default();
        p.insert("w", Array2::from_elem((1, 2), 2.0), false);
        p.insert("norm-ff.weight", Array2::from_elem((1, 2), 2.0), true);
        let mut st = OptimState::new(&p);
        AdamW::default().step(&mut p, &GradientSet::new("t"), &mut st, 0.5).unwrap();
        assert_eq!(p.get("w").unwrap().value[[0, 0]], 2.0 * (1.0 - 0.5 * 0.01));
        assert_eq!(p.get("norm-ff.weight").unwrap().value[[0, 0]], 2.0);
    }

    #[test]
    fn nan_gradient_skips_update() {
        let mut p = ParameterSet::default();
        p.insert("w", Array2::from_elem((1, 1), 1.0), false);
        let mut st = OptimState::new(&p);
        let mut g = GradientSet::new("t");
        g.grads.insert("w".into(), Array2::from_elem((1, 1), f64::NAN));
        assert!(AdamW::default().step(&mut p, &g, &mut st, 0.1).is_err());
        assert_eq!(p.get("w").unwrap().value[[0, 0]], 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn strategy_parsing() {
        for s in Strategy::ALL {
            assert_eq!(s.key().parse::<Strategy>().unwrap(), s);
            assert_eq!(s.label().parse::<Strategy>().unwrap(), s);
        }
        assert!("gradnorm".parse::<Strategy>().is_err());
    }
}
