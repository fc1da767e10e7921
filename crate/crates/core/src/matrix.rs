//! The single-task, two-task and five-task experiment grid.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evaluation::report::{format_tables, graph_to_text, improvement_graph, ResultTable};
use crate::evaluation::{EvalReport, ImprovementEdge, MetricMap, ResultGrid};
use crate::features::manifest::Split;
use crate::mtl::Strategy;
use crate::tasks::Task;
use crate::train::{train, Experiment, RunDir};

fn yes() -> bool {
    true
}

/// A grid file: `base` is the experiment every cell starts from; only the
/// active tasks, the strategy and the run name change between cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub tasks: Vec<Task>,
    #[serde(default = "yes")]
    pub single: bool,
    #[serde(default = "yes")]
    pub pairs: bool,
    /// Strategy for single-task and two-task cells.
    #[serde(default = "default_pair_strategy")]
    pub pair_strategy: Strategy,
    /// Strategy rows trained on all grid tasks at once. Defaults to all
    /// four when the grid holds five tasks.
    #[serde(default)]
    pub five_task: Option<Vec<Strategy>>,
    pub base: ExperimentConfig,
}

fn default_pair_strategy() -> Strategy {
    Strategy::None
}

impl GridConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let g: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let mut t = self.tasks.clone();
        t.sort();
        t.dedup();
        if t.is_empty() || t.len() != self.tasks.len() {
            return Err(Error::Config("grid tasks must be non-empty and distinct".into()));
        }
        for cell in self.cells() {
            cell.config.validate()?;
        }
        Ok(())
    }

    pub fn five_task_strategies(&self) -> Vec<Strategy> {
        self.five_task.clone().unwrap_or_else(|| {
            if self.tasks.len() == Task::ALL.len() {
                vec![Strategy::None, Strategy::AutoLoss, Strategy::PcGrad, Strategy::AutoLossPcGrad]
            } else {
                Vec::new()
            }
        })
    }

    fn cell(&self, name: String, kind: CellKind, tasks: Vec<Task>, strategy: Strategy) -> Cell {
        let mut config = self.base.clone();
        config.name = name.clone();
        config.strategy = strategy;
        config.tasks.active = tasks;
        Cell { name, kind, config }
    }

    /// Every run of the grid in execution order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        if self.single {
            for &t in &self.tasks {
                out.push(self.cell(format!("single-{}", t.name()), CellKind::Single(t), vec![t], self.pair_strategy));
            }
        }
        if self.pairs {
            for &aux in &self.tasks {
                for &main in self.tasks.iter().filter(|&&m| m != aux) {
                    out.push(self.cell(
                        format!("pair-{}-{}", aux.name(), main.name()),
                        CellKind::Pair { aux, main },
                        vec![main, aux],
                        self.pair_strategy,
                    ));
                }
            }
        }
        for s in self.five_task_strategies() {
            out.push(self.cell(
                format!("multi-{}", s.key().replace('+', "-")),
                CellKind::Multi(s),
                self.tasks.clone(),
                s,
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CellKind {
    Single(Task),
    Pair { aux: Task, main: Task },
    Multi(Strategy),
}

impl CellKind {
    /// Tasks whose metrics this cell contributes to the tables.
    pub fn scored_tasks(&self, all: &[Task]) -> Vec<Task> {
        match *self {
            CellKind::Single(t) => vec![t],
            CellKind::Pair { main, .. } => vec![main],
            CellKind::Multi(_) => all.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub kind: CellKind,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellRecord {
    name: String,
    kind: CellKind,
    config_hash: String,
    max_steps: u64,
    reports: Vec<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatrixOutcome {
    pub grid: ResultGrid,
    pub five_task: Vec<(Strategy, MetricMap)>,
    pub edges: Vec<ImprovementEdge>,
    pub tables: Option<(ResultTable, ResultTable)>,
    /// Cells that failed, with their error lines.
    pub failures: Vec<(String, String)>,
}

/// Test metrics if the corpus has a test split, validation metrics otherwise.
fn score_cell(exp: &Experiment, run: &RunDir, summary: &crate::train::TrainSummary, tasks: &[Task]) -> Result<Vec<EvalReport>> {
    let last = Checkpoint::load(&summary.last_checkpoint)?;
    let mut out = Vec::new();
    for &task in tasks {
        let ckpt = if summary.best.tasks.contains_key(&task) {
            Checkpoint::load(run.best_checkpoint(task))?
        } else {
            last.clone()
        };
        let corpus = exp.corpus(task)?;
        let split = if corpus.test.is_some() { Split::Test } else { Split::Valid };
        let id = format!("step-{:08}", ckpt.step());
        out.extend(exp.evaluate_tasks(&ckpt.state.params, &[task], split, &id)?);
    }
    Ok(out)
}

fn metric_map(reports: &[EvalReport], task: Task) -> MetricMap {
    reports
        .iter()
        .filter(|r| r.task == task)
        .map(|r| (r.metric, r.value))
        .collect()
}

fn run_cell(cell: &Cell, tasks: &[Task], base_dir: &Path, out: &Path) -> Result<Vec<EvalReport>> {
    let dir = out.join("runs").join(&cell.name);
    let record_path = dir.join("cell.json");
    if let Ok(text) = std::fs::read_to_string(&record_path) {
        if let Ok(rec) = serde_json::from_str::<CellRecord>(&text) {
            if rec.config_hash == cell.config.hash() && rec.max_steps == cell.config.max_steps {
                log::info!("{}: reusing finished run", cell.name);
                return Ok(rec.reports);
            }
        }
    }
    let exp = Experiment::prepare(cell.config.clone(), base_dir)?;
    let run = RunDir::open(&dir)?;
    let summary = train(&exp, &run, None)?;
    let reports = score_cell(&exp, &run, &summary, &cell.kind.scored_tasks(tasks))?;
    let rec = CellRecord {
        name: cell.name.clone(),
        kind: cell.kind,
        config_hash: cell.config.hash(),
        max_steps: cell.config.max_steps,
        reports: reports.clone(),
    };
    std::fs::write(&record_path, serde_json::to_string_pretty(&rec)?).map_err(|e| Error::io(&record_path, e))?;
    Ok(reports)
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Runs every cell, then writes `results.tsv`, both tables, the
/// improvement graph and `matrix.json` under `out`. A failed cell leaves a
/// gap instead of stopping the grid.
pub fn run_matrix(grid: &GridConfig, base_dir: &Path, out: &Path) -> Result<MatrixOutcome> {
    grid.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut outcome = MatrixOutcome::default();
    let mut rows = String::from("run\t");
    rows.push_str(EvalReport::HEADER);
    rows.push('\n');
    for cell in grid.cells() {
        log::info!("running {}", cell.name);
        let reports = match run_cell(&cell, &grid.tasks, base_dir, out) {
            Ok(r) => r,
            Err(e) => {
                log::error!("{}: {e}", cell.name);
                outcome.failures.push((cell.name.clone(), format!("error[{}]: {e}", e.code())));
                continue;
            }
        };
        for r in &reports {
            rows.push_str(&format!("{}\t{}\n", cell.name, r.to_tsv()));
        }
        match cell.kind {
            CellKind::Single(t) => {
                outcome.grid.single.insert(t, metric_map(&reports, t));
            }
            CellKind::Pair { aux, main } => {
                outcome.grid.pairs.insert((aux, main), metric_map(&reports, main));
            }
            CellKind::Multi(s) => {
                let mut m = MetricMap::new();
                for &t in &grid.tasks {
                    m.extend(metric_map(&reports, t));
                }
                outcome.five_task.push((s, m));
            }
        }
    }
    write(out.join("results.tsv"), &rows)?;
    let (two, five) = format_tables(&outcome.grid, &grid.tasks, &outcome.five_task);
    write(out.join("two_task_table.tsv"), &two.to_tsv())?;
    write(out.join("five_task_table.tsv"), &five.to_tsv())?;
    let scorable = ResultGrid {
        single: outcome.grid.single.clone(),
        pairs: outcome
            .grid
            .pairs
            .iter()
            .filter(|((_, main), _)| outcome.grid.single.contains_key(main))
            .map(|(k, v)| (*k, v.clone()))
            .collect(),
    };
    outcome.edges = improvement_graph(&scorable)?;
    write(out.join("improvement_graph.txt"), &graph_to_text(&outcome.edges))?;
    let meta = serde_json::json!({
        "tasks": grid.tasks,
        "cells": grid.cells().iter().map(|c| &c.name).collect::<Vec<_>>(),
        "failures": outcome.failures.iter().cloned().collect::<BTreeMap<_, _>>(),
        "shared_hyperparameters": "every cell reuses the base config; only tasks, strategy and name differ",
        "base_config_hash": grid.base.hash(),
    });
    write(out.join("matrix.json"), &serde_json::to_string_pretty(&meta)?)?;
    outcome.tables = Some((two, five));
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRID: &str = r#"
tasks = ["asr", "sc"]

[base]
seed = 3
max_steps = 2

[base.data]
kind = "toy"
speakers = 2
train = 4
valid = 2
test = 2
"#;

    #[test]
    fn restricted_grid_has_two_singles_and_two_pairs() {
        let g = GridConfig::from_toml(GRID).unwrap();
        let names: Vec<String> = g.cells().into_iter().map(|c| c.name).collect();
        assert_eq!(names, ["single-asr", "single-sc", "pair-asr-sc", "pair-sc-asr"]);
        let pair = &g.cells()[2];
        assert_eq!(pair.config.tasks.active, vec![Task::Sc, Task::Asr]);
        assert_eq!(pair.config.seed, 3);
    }

    #[test]
    fn five_tasks_add_strategy_rows() {
        let text = GRID.replace(r#"["asr", "sc"]"#, r#"["asr", "se", "sc", "tts", "vc"]"#);
        let g = GridConfig::from_toml(&text).unwrap();
        let cells = g.cells();
        assert_eq!(cells.len(), 5 + 20 + 4);
        assert_eq!(cells.last().unwrap().name, "multi-autoloss-pcgrad");
        assert!(GridConfig::from_toml(&GRID.replace(r#"["asr", "sc"]"#, r#"["asr", "asr"]"#)).is_err());
    }
}
