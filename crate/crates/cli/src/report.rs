//! Comparison table rebuilt from the CSV outputs of earlier runs.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};

use crate::config::ExperimentConfig;
use crate::metrics::{read_metrics, write_csv};

#[derive(Clone, Debug, PartialEq)]
pub struct TaskRow {
    pub task: usize,
    pub baseline_accuracy: Option<f32>,
    pub baseline_loss: Option<f32>,
    pub baseline_best_accuracy: Option<f32>,
    pub hybnn_accuracy: Option<f32>,
    pub hybnn_loss: Option<f32>,
    pub federated_accuracy: Option<f32>,
    pub weight_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<TaskRow>,
    pub missing: Vec<String>,
}

/// Last test row of `phase` and the best test accuracy seen.
fn final_test(path: &Path, phase: &str) -> Result<Option<(f32, f32, f32)>> {
    if !path.is_file() {
        return Ok(None);
    }
    let rows = read_metrics(path)?;
    let tests: Vec<_> = rows.iter().filter(|r| r.phase == phase && r.split == "test").collect();
    Ok(tests.last().map(|last| {
        let best = tests.iter().map(|r| r.accuracy).fold(f32::MIN, f32::max);
        (last.accuracy, last.loss, best)
    }))
}

fn weight_ratio(path: &Path) -> Result<Option<f64>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    let total = text
        .lines()
        .find(|l| l.starts_with("total,"))
        .with_context(|| format!("{} lacks a total row", path.display()))?;
    let ratio = total.rsplit(',').next().unwrap_or_default();
    Ok(Some(ratio.parse().with_context(|| format!("bad ratio in {}", path.display()))?))
}

pub fn build(cfg: &ExperimentConfig) -> Result<Report> {
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for task in 1..=5 {
        let mut need = |dir: &Path| {
            if !dir.join("metrics.csv").is_file() {
                missing.push(dir.display().to_string());
            }
        };
        need(&cfg.baseline_dir(task));
        need(&cfg.bnn_dir(task));
        let base = final_test(&cfg.baseline_dir(task).join("metrics.csv"), "baseline")?;
        let hy = final_test(&cfg.bnn_dir(task).join("metrics.csv"), "bnn")?;
        let fed = final_test(&cfg.federated_dir(task).join("metrics.csv"), "federated")?;
        rows.push(TaskRow {
            task,
            baseline_accuracy: base.map(|b| b.0),
            baseline_loss: base.map(|b| b.1),
            baseline_best_accuracy: base.map(|b| b.2),
            hybnn_accuracy: hy.map(|h| h.0),
            hybnn_loss: hy.map(|h| h.1),
            federated_accuracy: fed.map(|f| f.0),
            weight_ratio: weight_ratio(&cfg.bnn_dir(task).join("sizes.csv"))?,
        });
    }
    Ok(Report { rows, missing })
}

fn cell<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn pct(v: Option<f32>) -> String {
    cell(v.map(|v| format!("{:.2}", v * 100.0)))
}

impl Report {
    pub fn to_csv_rows(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| {
                let gap = r.hybnn_accuracy.zip(r.baseline_accuracy).map(|(h, b)| h - b);
                let fed_gap = r.federated_accuracy.zip(r.hybnn_accuracy).map(|(f, h)| f - h);
                let f = |v: Option<f32>| cell(v.map(|v| format!("{v:.6}")));
                format!(
                    "{},{},{},{},{},{},{},{},{},{}",
                    r.task,
                    f(r.baseline_accuracy),
                    f(r.baseline_loss),
                    f(r.baseline_best_accuracy),
                    f(r.hybnn_accuracy),
                    f(r.hybnn_loss),
                    f(gap),
                    f(r.federated_accuracy),
                    f(fed_gap),
                    cell(r.weight_ratio),
                )
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<5} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "task", "baseline%", "best%", "hybnn%", "gap", "fed%", "fed-cent"
        );
        for r in &self.rows {
            let gap = r.hybnn_accuracy.zip(r.baseline_accuracy).map(|(h, b)| h - b);
            let fed_gap = r.federated_accuracy.zip(r.hybnn_accuracy).map(|(f, h)| f - h);
            let _ = writeln!(
                s,
                "{:<5} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
                r.task,
                pct(r.baseline_accuracy),
                pct(r.baseline_best_accuracy),
                pct(r.hybnn_accuracy),
                pct(gap),
                pct(r.federated_accuracy),
                pct(fed_gap),
            );
        }
        if let Some(ratio) = self.rows.iter().find_map(|r| r.weight_ratio) {
            let _ = writeln!(s, "packed weight memory: {ratio}x smaller than 32-bit weights");
        }
        for m in &self.missing {
            let _ = writeln!(s, "missing run: {m}");
        }
        s
    }
}

pub const REPORT_HEADER: &str = "task,baseline_accuracy,baseline_loss,baseline_best_accuracy,\
hybnn_accuracy,hybnn_loss,gap,federated_accuracy,federated_minus_centralized,weight_ratio";

/// Builds the report and writes `report.csv` and `report.txt` under `out`.
pub fn report(cfg: &ExperimentConfig) -> Result<Report> {
    let r = build(cfg)?;
    std::fs::create_dir_all(&cfg.out)?;
    write_csv(&cfg.out.join("report.csv"), REPORT_HEADER, &r.to_csv_rows())?;
    std::fs::write(cfg.out.join("report.txt"), r.to_text())?;
    Ok(r)
}
