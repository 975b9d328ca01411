use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::Report;
use crate::error::{HpptError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    /// `strategy@seed`
    pub label: String,
    pub values: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    /// Column name → label of the best row (highest value).
    pub best: BTreeMap<String, String>,
}

/// Side-by-side final-episode IoU per class plus BWT and FWT, one row per report.
pub fn compare(reports: &[Report]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(HpptError::Incompatible("comparison needs at least two reports".into()));
    }
    let signature = &reports[0].stream_signature;
    if let Some(bad) = reports.iter().position(|r| &r.stream_signature != signature) {
        return Err(HpptError::Incompatible(format!(
            "report {} was produced on a different stream layout",
            bad + 1
        )));
    }
    let mut classes = BTreeSet::new();
    for r in reports {
        if let Some(last) = r.episodes.last() {
            classes.extend(last.per_class_iou.keys().cloned());
        }
    }
    let mut columns: Vec<String> = classes.into_iter().collect();
    columns.push("bwt".into());
    columns.push("fwt".into());
    let rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| {
            let last = r.episodes.last();
            let values = columns
                .iter()
                .map(|col| {
                    let v = match col.as_str() {
                        "bwt" => r.bwt,
                        "fwt" => r.fwt,
                        c => last.and_then(|e| e.per_class_iou.get(c).copied()),
                    };
                    (col.clone(), v)
                })
                .collect();
            ComparisonRow {
                label: format!("{}@{}", r.strategy, r.seed),
                values,
            }
        })
        .collect();
    let mut best = BTreeMap::new();
    for col in &columns {
        let winner = rows
            .iter()
            .filter_map(|row| row.values[col].map(|v| (row, v)))
            .fold(None::<(&ComparisonRow, f64)>, |acc, (row, v)| match acc {
                Some((_, b)) if b >= v => acc,
                _ => Some((row, v)),
            });
        if let Some((row, _)) = winner {
            best.insert(col.clone(), row.label.clone());
        }
    }
    Ok(Comparison { columns, rows, best })
}

impl Comparison {
    /// One row per report; best cells carry a trailing `*`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| HpptError::Format(format!("csv: {e}"));
        let mut header = vec!["run".to_string()];
        header.extend(self.columns.iter().cloned());
        out.write_record(&header).map_err(csv_err)?;
        for row in &self.rows {
            let mut rec = vec![row.label.clone()];
            for col in &self.columns {
                let cell = match row.values[col] {
                    Some(v) => {
                        let star = if self.best.get(col) == Some(&row.label) { "*" } else { "" };
                        format!("{v:.6}{star}")
                    }
                    None => String::new(),
                };
                rec.push(cell);
            }
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}
