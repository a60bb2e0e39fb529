//! CSV summaries across seeds.

use std::path::Path;

use super::train::RunRecord;
use crate::error::{Error, Result};

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row per record with its final scores, then `mean` and `std` rows.
pub fn write_seed_table(path: impl AsRef<Path>, records: &[RunRecord]) -> Result<()> {
    let path = path.as_ref();
    let first = records
        .iter()
        .find_map(|r| r.final_metrics())
        .ok_or_else(|| Error::Data("no finished runs to tabulate".into()))?;
    let names: Vec<&str> = first.scalars().iter().map(|(n, _)| *n).collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["name", "seed", "status", "best_epoch"];
    header.extend(&names);
    w.write_record(&header)?;

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for r in records {
        let status = serde_json::to_value(&r.status)?["kind"]
            .as_str()
            .unwrap_or("")
            .to_string();
        let best = r.best.as_ref().map_or(String::new(), |b| b.epoch.to_string());
        let mut row = vec![r.name.clone(), r.seed.to_string(), status, best];
        match r.final_metrics() {
            Some(m) => {
                for (i, (_, v)) in m.scalars().into_iter().enumerate() {
                    columns[i].push(v);
                    row.push(format!("{v:.6}"));
                }
            }
            None => row.extend(names.iter().map(|_| String::new())),
        }
        w.write_record(&row)?;
    }
    let stats: Vec<(f64, f64)> = columns.iter().map(|c| mean_std(c)).collect();
    for (label, pick) in [("mean", 0), ("std", 1)] {
        let mut row = vec![label.to_string(), String::new(), String::new(), String::new()];
        row.extend(
            stats
                .iter()
                .map(|s| format!("{:.6}", if pick == 0 { s.0 } else { s.1 })),
        );
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
