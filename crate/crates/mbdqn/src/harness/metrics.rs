//! Metric records, CSV emission, and visitation heatmaps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::HarnessError;

/// One evaluation point. `goal_rate` is kept in memory for analysis; the CSV
/// schema carries the return and episode-length columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub seed: u64,
    pub step: u64,
    pub majority_return: f64,
    pub return_stderr: f64,
    pub head_returns: Vec<f64>,
    pub unique_states: usize,
    pub mean_episode_len: f64,
    pub goal_rate: f64,
}

#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub seed: u64,
    pub rows: Vec<EvalRow>,
}

pub fn csv_header(head_count: usize) -> String {
    let mut cols = vec![
        "seed".to_string(),
        "step".to_string(),
        "majority_return".to_string(),
        "return_stderr".to_string(),
    ];
    for k in 0..head_count {
        cols.push(format!("head{k}_return"));
    }
    cols.push("unique_states".to_string());
    cols.push("mean_episode_len".to_string());
    cols.join(",")
}

pub fn csv_row(row: &EvalRow) -> String {
    let mut cols = vec![
        row.seed.to_string(),
        row.step.to_string(),
        format!("{:.6}", row.majority_return),
        format!("{:.6}", row.return_stderr),
    ];
    for r in &row.head_returns {
        cols.push(format!("{r:.6}"));
    }
    cols.push(row.unique_states.to_string());
    cols.push(format!("{:.6}", row.mean_episode_len));
    cols.join(",")
}

pub fn write_metrics_csv(
    path: &Path,
    head_count: usize,
    rows: &[EvalRow],
) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", csv_header(head_count))?;
    for row in rows {
        writeln!(w, "{}", csv_row(row))?;
    }
    w.flush()?;
    Ok(())
}

/// Per-cell visit counts accumulated over training steps.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitationMap {
    width: usize,
    height: usize,
    counts: Vec<u64>,
}

impl VisitationMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            counts: vec![0; width * height],
        }
    }

    pub fn record(&mut self, cell: (usize, usize)) {
        self.counts[cell.1 * self.width + cell.0] += 1;
    }

    pub fn count(&self, x: usize, y: usize) -> u64 {
        self.counts[y * self.width + x]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Number of distinct cells visited at least once.
    pub fn unique_states(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut w = BufWriter::new(File::create(path)?);
        for y in 0..self.height {
            let row: Vec<String> = (0..self.width)
                .map(|x| self.count(x, y).to_string())
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self, HarnessError> {
        let mut counts = Vec::new();
        let mut width = None;
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        for line in &rows {
            let vals: Vec<u64> = line
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| HarnessError::Config(format!("bad count {v:?}")))
                })
                .collect::<Result<_, _>>()?;
            match width {
                None => width = Some(vals.len()),
                Some(w) if w != vals.len() => {
                    return Err(HarnessError::Config("ragged heatmap CSV".into()));
                }
                _ => {}
            }
            counts.extend(vals);
        }
        let width = width.ok_or_else(|| HarnessError::Config("empty heatmap CSV".into()))?;
        Ok(Self {
            width,
            height: rows.len(),
            counts,
        })
    }

    /// 16-bit portable graymap, linearly scaled so the maximum count maps to
    /// full intensity. PGM 16-bit samples are big-endian.
    pub fn write_pgm(&self, path: &Path) -> Result<(), HarnessError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "P5")?;
        writeln!(w, "{} {}", self.width, self.height)?;
        writeln!(w, "65535")?;
        let max = self.counts.iter().copied().max().unwrap_or(0);
        for &c in &self.counts {
            let v: u16 = if max == 0 {
                0
            } else {
                ((c as f64 / max as f64) * 65535.0).round() as u16
            };
            w.write_all(&v.to_be_bytes())?;
        }
        w.flush()?;
        Ok(())
    }
}
