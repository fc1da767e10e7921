//! Result rows, result tables and the improvement graph.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Split;
use crate::mtl::Strategy;
use crate::tasks::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "WER")]
    Wer,
    #[serde(rename = "PESQ")]
    Pesq,
    #[serde(rename = "SISDR")]
    Sisdr,
    #[serde(rename = "STOI")]
    Stoi,
    #[serde(rename = "ACC")]
    Acc,
    #[serde(rename = "MSE")]
    Mse,
}

impl Metric {
    pub const ALL: [Metric; 6] = [Metric::Wer, Metric::Pesq, Metric::Sisdr, Metric::Stoi, Metric::Acc, Metric::Mse];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Wer => "WER",
            Metric::Pesq => "PESQ",
            Metric::Sisdr => "SISDR",
            Metric::Stoi => "STOI",
            Metric::Acc => "ACC",
            Metric::Mse => "MSE",
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Pesq | Metric::Sisdr | Metric::Stoi | Metric::Acc)
    }

    /// Strictly better.
    pub fn improves(self, value: f64, baseline: f64) -> bool {
        if self.higher_is_better() {
            value > baseline
        } else {
            value < baseline
        }
    }

    /// Positive when `value` is better than `baseline`.
    pub fn relative_improvement(self, value: f64, baseline: f64) -> f64 {
        let gain = if self.higher_is_better() {
            value - baseline
        } else {
            baseline - value
        };
        gain / baseline.abs()
    }

    fn decimals(self) -> usize {
        match self {
            Metric::Wer | Metric::Stoi | Metric::Acc => 3,
            Metric::Pesq | Metric::Sisdr | Metric::Mse => 2,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

/// Metrics reported for a task, in column order.
pub fn task_metrics(task: Task) -> &'static [Metric] {
    match task {
        Task::Asr => &[Metric::Wer],
        Task::Se => &[Metric::Pesq, Metric::Sisdr, Metric::Stoi],
        Task::Sc => &[Metric::Acc],
        Task::Tts | Task::Vc => &[Metric::Mse],
    }
}

pub fn primary_metric(task: Task) -> Metric {
    match task {
        Task::Asr => Metric::Wer,
        Task::Se => Metric::Sisdr,
        Task::Sc => Metric::Acc,
        Task::Tts | Task::Vc => Metric::Mse,
    }
}

/// One row of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub metric: Metric,
    pub value: f64,
    pub split: Split,
    pub checkpoint: String,
}

impl EvalReport {
    pub const HEADER: &'static str = "task\tmetric\tvalue\tsplit\tcheckpoint";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{:.17e}\t{}\t{}",
            self.task.label(),
            self.metric,
            self.value,
            split_name(self.split),
            self.checkpoint
        )
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    }
}

pub fn reports_to_tsv(rows: &[EvalReport]) -> String {
    let mut out = String::from(EvalReport::HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_tsv());
        out.push('\n');
    }
    out
}

pub type MetricMap = BTreeMap<Metric, f64>;

/// Single-task baselines and ordered two-task results keyed `(aux, main)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultGrid {
    pub single: BTreeMap<Task, MetricMap>,
    pub pairs: BTreeMap<(Task, Task), MetricMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImprovementEdge {
    pub from_task: Task,
    pub to_task: Task,
    pub metric: Metric,
    pub relative_improvement: f64,
    /// SE improved on the perceptual metrics but not on SiSDR.
    pub dashed: bool,
}

fn improved(m: Metric, multi: &MetricMap, base: &MetricMap) -> Option<bool> {
    Some(m.improves(*multi.get(&m)?, *base.get(&m)?))
}

/// Edges `aux → main` wherever the main task's primary metric strictly
/// improves over its single-task baseline.
pub fn improvement_graph(grid: &ResultGrid) -> Result<Vec<ImprovementEdge>> {
    let mut edges = Vec::new();
    for (&(aux, main), multi) in &grid.pairs {
        let base = grid
            .single
            .get(&main)
            .ok_or_else(|| Error::Missing(format!("single-task baseline for {}", main.label())))?;
        let primary = primary_metric(main);
        let (Some(&v), Some(&b)) = (multi.get(&primary), base.get(&primary)) else {
            return Err(Error::Missing(format!(
                "{} of {} with auxiliary {}",
                primary,
                main.label(),
                aux.label()
            )));
        };
        if primary.improves(v, b) {
            edges.push(ImprovementEdge {
                from_task: aux,
                to_task: main,
                metric: primary,
                relative_improvement: primary.relative_improvement(v, b),
                dashed: false,
            });
            continue;
        }
        if main == Task::Se {
            let stoi = improved(Metric::Stoi, multi, base).unwrap_or(false);
            let pesq = improved(Metric::Pesq, multi, base).unwrap_or(true);
            if stoi && pesq {
                edges.push(ImprovementEdge {
                    from_task: aux,
                    to_task: main,
                    metric: Metric::Stoi,
                    relative_improvement: Metric::Stoi.relative_improvement(multi[&Metric::Stoi], base[&Metric::Stoi]),
                    dashed: true,
                });
            }
        }
    }
    Ok(edges)
}

/// Node/edge listing for plotting.
pub fn graph_to_text(edges: &[ImprovementEdge]) -> String {
    let mut out = String::new();
    for t in Task::ALL {
        out.push_str(&format!("node\t{}\n", t.label()));
    }
    for e in edges {
        out.push_str(&format!(
            "edge\t{}\t{}\t{}\t{:.6}\t{}\n",
            e.from_task.label(),
            e.to_task.label(),
            e.metric,
            e.relative_improvement,
            if e.dashed { "dashed" } else { "solid" }
        ));
    }
    out
}

/// Column layout shared by both result tables.
pub const COLUMNS: [(Task, Metric); 7] = [
    (Task::Asr, Metric::Wer),
    (Task::Se, Metric::Pesq),
    (Task::Se, Metric::Sisdr),
    (Task::Se, Metric::Stoi),
    (Task::Sc, Metric::Acc),
    (Task::Tts, Metric::Mse),
    (Task::Vc, Metric::Mse),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub value: Option<f64>,
    /// A single-task baseline cell.
    pub single: bool,
    /// Better than the single-task baseline of its column.
    pub underline: bool,
    /// Best value of its column across all rendered tables.
    pub bold: bool,
}

impl Cell {
    pub fn render(&self, metric: Metric) -> String {
        let Some(v) = self.value else {
            return "n/a".into();
        };
        let mut s = format!("{v:.*}", metric.decimals());
        if self.underline {
            s = format!("_{s}_");
        }
        if self.bold {
            s = format!("**{s}**");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub corner: String,
    pub rows: Vec<TableRow>,
}

impl ResultTable {
    /// Tab-delimited rendering with a task header and a metric header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("\t");
        out.push_str(&COLUMNS.iter().map(|(t, _)| t.label()).collect::<Vec<_>>().join("\t"));
        out.push('\n');
        out.push_str(&self.corner);
        for (_, m) in COLUMNS {
            let arrow = if m.higher_is_better() { "up" } else { "down" };
            out.push_str(&format!("\t{m} ({arrow})"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.label);
            for (c, (_, m)) in r.cells.iter().zip(COLUMNS) {
                out.push('\t');
                out.push_str(&c.render(m));
            }
            out.push('\n');
        }
        out
    }
}

fn baseline(grid: &ResultGrid, col: usize) -> Option<f64> {
    let (task, metric) = COLUMNS[col];
    grid.single.get(&task)?.get(&metric).copied()
}

/// The two-task table (rows are auxiliary tasks) and the strategy table
/// (rows are five-task strategies). Bold marks the best value per column
/// over both tables together.
pub fn format_tables(
    grid: &ResultGrid,
    tasks: &[Task],
    five_task: &[(Strategy, MetricMap)],
) -> (ResultTable, ResultTable) {
    let mut two_rows: Vec<TableRow> = tasks
        .iter()
        .map(|&aux| TableRow {
            label: aux.label().to_string(),
            cells: COLUMNS
                .iter()
                .enumerate()
                .map(|(col, &(main, metric))| {
                    let single = aux == main;
                    let value = if single {
                        baseline(grid, col)
                    } else if tasks.contains(&main) {
                        grid.pairs.get(&(aux, main)).and_then(|m| m.get(&metric)).copied()
                    } else {
                        None
                    };
                    Cell {
                        value,
                        single,
                        underline: false,
                        bold: false,
                    }
                })
                .collect(),
        })
        .collect();
    let mut five_rows: Vec<TableRow> = five_task
        .iter()
        .map(|(s, m)| TableRow {
            label: s.label().to_string(),
            cells: COLUMNS
                .iter()
                .map(|(_, metric)| Cell {
                    value: m.get(metric).copied(),
                    single: false,
                    underline: false,
                    bold: false,
                })
                .collect(),
        })
        .collect();
    for (col, &(_, metric)) in COLUMNS.iter().enumerate() {
        let base = baseline(grid, col);
        let mut best: Option<f64> = None;
        for row in two_rows.iter().chain(five_rows.iter()) {
            if let Some(v) = row.cells[col].value {
                if best.is_none_or(|b| metric.improves(v, b)) {
                    best = Some(v);
                }
            }
        }
        for row in two_rows.iter_mut().chain(five_rows.iter_mut()) {
            let c = &mut row.cells[col];
            if let Some(v) = c.value {
                c.bold = Some(v) == best;
                c.underline = !c.single && base.is_some_and(|b| metric.improves(v, b));
            }
        }
    }
    (
        ResultTable {
            corner: "Auxiliary".into(),
            rows: two_rows,
        },
        ResultTable {
            corner: "Optim Strategy".into(),
            rows: five_rows,
        },
    )
}

const REF_TWO_TASK: [(Task, [f64; 7]); 5] = [
    (Task::Asr, [0.329, 2.46, 5.62, 0.880, 0.746, 3.06, 5.93]),
    (Task::Se, [0.320, 2.44, 5.90, 0.877, 0.820, 3.08, 6.06]),
    (Task::Sc, [0.307, 2.15, 4.02, 0.850, 0.860, 2.98, 6.04]),
    (Task::Tts, [0.322, 2.29, 4.96, 0.865, 0.879, 2.94, 6.02]),
    (Task::Vc, [0.316, 2.02, 4.80, 0.847, 0.703, 3.57, 5.95]),
];

const REF_FIVE_TASK: [(Strategy, [f64; 7]); 4] = [
    (Strategy::AutoLossPcGrad, [0.511, 1.99, 3.71, 0.837, 0.451, 3.36, 6.01]),
    (Strategy::AutoLoss, [0.600, 2.04, 3.68, 0.833, 0.101, 3.26, 5.88]),
    (Strategy::PcGrad, [0.839, 2.00, 3.91, 0.838, 0.466, 3.19, 5.96]),
    (Strategy::None, [0.538, 2.12, 3.82, 0.838, 0.044, 3.18, 5.86]),
];

/// Full-scale two-task reference results, used to check the table and
/// graph logic.
pub fn reference_two_task_grid() -> ResultGrid {
    let mut grid = ResultGrid::default();
    for (aux, values) in REF_TWO_TASK {
        for (col, &(main, metric)) in COLUMNS.iter().enumerate() {
            let slot = if aux == main {
                grid.single.entry(main).or_default()
            } else {
                grid.pairs.entry((aux, main)).or_default()
            };
            slot.insert(metric, values[col]);
        }
    }
    grid
}

/// Full-scale five-task reference rows.
pub fn reference_five_task_rows() -> Vec<(Strategy, MetricMap)> {
    REF_FIVE_TASK
        .iter()
        .map(|(s, values)| (*s, COLUMNS.iter().zip(values).map(|(&(_, m), &v)| (m, v)).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_metrics_no_edge() {
        let mut g = ResultGrid::default();
        g.single.insert(Task::Asr, [(Metric::Wer, 0.3)].into());
        g.pairs.insert((Task::Sc, Task::Asr), [(Metric::Wer, 0.3)].into());
        assert!(improvement_graph(&g).unwrap().is_empty());
        g.single.clear();
        assert!(improvement_graph(&g).is_err());
    }

    #[test]
    fn se_without_pesq_uses_stoi() {
        let mut g = ResultGrid::default();
        g.single.insert(Task::Se, [(Metric::Sisdr, 5.0), (Metric::Stoi, 0.8)].into());
        g.pairs
            .insert((Task::Asr, Task::Se), [(Metric::Sisdr, 4.0), (Metric::Stoi, 0.81)].into());
        let e = improvement_graph(&g).unwrap();
        assert_eq!(e.len(), 1);
        assert!(e[0].dashed);
    }

    #[test]
    fn relative_improvement_sign() {
        assert!((Metric::Wer.relative_improvement(0.307, 0.329) - 0.0669).abs() < 1e-3);
        assert!(Metric::Acc.relative_improvement(0.9, 0.8) > 0.0);
        assert!(Metric::Mse.relative_improvement(3.0, 2.0) < 0.0);
    }

    #[test]
    fn partial_grid_has_gaps() {
        let mut g = ResultGrid::default();
        g.single.insert(Task::Asr, [(Metric::Wer, 0.3)].into());
        g.single.insert(Task::Sc, [(Metric::Acc, 0.8)].into());
        g.pairs.insert((Task::Sc, Task::Asr), [(Metric::Wer, 0.2)].into());
        let (t, _) = format_tables(&g, &[Task::Asr, Task::Sc], &[]);
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].cells[4].value, None);
        assert!(t.to_tsv().contains("n/a"));
        assert!(t.rows[1].cells[0].underline && t.rows[1].cells[0].bold);
    }
}
