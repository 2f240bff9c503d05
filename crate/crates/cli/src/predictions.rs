//! Prediction CSV: `sample_id,label,pred,log_density,entropy,p_0..p_{C-1}`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use psc_core::evaluation::{Group, ScoredSample};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub sample_id: u64,
    pub label: usize,
    pub pred: usize,
    /// `None` when no density head was fitted.
    pub log_density: Option<f64>,
    pub entropy: f64,
    pub probabilities: Vec<f64>,
}

impl PredictionRow {
    pub fn into_scored(self, group: Group) -> ScoredSample<f64> {
        ScoredSample {
            sample_id: self.sample_id,
            group,
            label: Some(self.label),
            probabilities: Some(self.probabilities),
            log_density: self.log_density,
            entropy: self.entropy,
        }
    }
}

pub fn header(class_count: usize) -> String {
    let mut h = String::from("sample_id,label,pred,log_density,entropy");
    for c in 0..class_count {
        let _ = write!(h, ",p_{c}");
    }
    h
}

pub fn write_row(out: &mut String, row: &PredictionRow) {
    let density = row.log_density.map_or_else(|| "nan".to_string(), |d| format!("{d:?}"));
    let _ = write!(out, "{},{},{},{},{:?}", row.sample_id, row.label, row.pred, density, row.entropy);
    for p in &row.probabilities {
        let _ = write!(out, ",{p:?}");
    }
    out.push('\n');
}

pub fn read(path: &Path) -> CliResult<Vec<PredictionRow>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read predictions {}: {e}", path.display())))?;
    let bad = |line: usize, what: &str| CliError::Usage(format!("{}:{line}: {what}", path.display()));
    let mut lines = text.lines().enumerate();
    let (_, head) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
    let columns: Vec<&str> = head.split(',').collect();
    if columns.len() < 6 || columns[..5] != ["sample_id", "label", "pred", "log_density", "entropy"] {
        return Err(bad(1, "unexpected header"));
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(bad(i + 1, "wrong number of fields"));
        }
        let float = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "invalid number"));
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(i + 1, "invalid integer"));
        let density = float(fields[3])?;
        rows.push(PredictionRow {
            sample_id: int(fields[0])? as u64,
            label: int(fields[1])?,
            pred: int(fields[2])?,
            log_density: density.is_finite().then_some(density),
            entropy: float(fields[4])?,
            probabilities: fields[5..].iter().map(|s| float(s)).collect::<CliResult<_>>()?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_text() {
        let rows = vec![
            PredictionRow {
                sample_id: 0,
                label: 1,
                pred: 1,
                log_density: Some(-1.25),
                entropy: 0.1,
                probabilities: vec![0.3, 0.7],
            },
            PredictionRow {
                sample_id: 1,
                label: 0,
                pred: 1,
                log_density: None,
                entropy: 0.6931471805599452,
                probabilities: vec![0.1 + 0.2, 0.7],
            },
        ];
        let mut text = header(2);
        text.push('\n');
        rows.iter().for_each(|r| write_row(&mut text, r));
        assert!(text.contains(",nan,"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        fs::write(&path, &text).unwrap();
        assert_eq!(read(&path).unwrap(), rows);
    }
}
