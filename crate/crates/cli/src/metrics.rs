//! CSV sinks: `metrics.csv` (deterministic) and `timings.csv` (wall clock).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{ensure, Context, Result};

pub const METRICS_HEADER: &str = "run_id,phase,task,step,split,accuracy,loss";
pub const TIMINGS_HEADER: &str = "run_id,phase,task,step,seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub phase: String,
    pub task: usize,
    /// Epoch or communication round, 1-based.
    pub step: usize,
    pub split: String,
    pub accuracy: f32,
    pub loss: f32,
}

impl MetricsRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6}",
            self.run_id, self.phase, self.task, self.step, self.split, self.accuracy, self.loss
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        ensure!(f.len() == 7, "expected 7 fields, got {}", f.len());
        Ok(MetricsRow {
            run_id: f[0].into(),
            phase: f[1].into(),
            task: f[2].parse()?,
            step: f[3].parse()?,
            split: f[4].into(),
            accuracy: f[5].parse()?,
            loss: f[6].parse()?,
        })
    }
}

/// Append-only writer for one run's metrics and timings.
pub struct MetricsSink {
    run_id: String,
    metrics: BufWriter<File>,
    timings: BufWriter<File>,
    started: Instant,
}

impl MetricsSink {
    pub fn create(dir: &Path, run_id: &str) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let mut w = BufWriter::new(
                File::create(&path).with_context(|| format!("creating {}", path.display()))?,
            );
            writeln!(w, "{header}")?;
            Ok(w)
        };
        Ok(MetricsSink {
            run_id: run_id.into(),
            metrics: open("metrics.csv", METRICS_HEADER)?,
            timings: open("timings.csv", TIMINGS_HEADER)?,
            started: Instant::now(),
        })
    }

    pub fn row(&mut self, phase: &str, task: usize, step: usize, split: &str, accuracy: f32, loss: f32) -> Result<()> {
        ensure!(
            accuracy.is_finite() && loss.is_finite(),
            "non-finite metric in {phase} step {step}: accuracy {accuracy}, loss {loss}"
        );
        let row = MetricsRow {
            run_id: self.run_id.clone(),
            phase: phase.into(),
            task,
            step,
            split: split.into(),
            accuracy,
            loss,
        };
        writeln!(self.metrics, "{}", row.to_csv())?;
        Ok(())
    }

    pub fn timing(&mut self, phase: &str, task: usize, step: usize) -> Result<()> {
        writeln!(
            self.timings,
            "{},{phase},{task},{step},{:.3}",
            self.run_id,
            self.started.elapsed().as_secs_f64()
        )?;
        // one timing row closes each step; flush so long runs can be followed
        self.metrics.flush()?;
        self.timings.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.metrics.flush()?;
        self.timings.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    ensure!(lines.next() == Some(METRICS_HEADER), "{}: unexpected header", path.display());
    lines
        .enumerate()
        .map(|(i, l)| MetricsRow::parse(l).with_context(|| format!("{} line {}", path.display(), i + 2)))
        .collect()
}

/// Writes a small CSV file in one go.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "{header}")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}
