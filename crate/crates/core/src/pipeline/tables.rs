//! Per-seed and summary result tables, written as CSV and JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub config: String,
    pub values: Vec<f64>,
}

/// One seed's results: a row per configuration, a column per metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub recipe: String,
    pub seed: u64,
    pub metrics: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl ResultTable {
    pub fn new(recipe: &str, seed: u64, metrics: &[&str]) -> Self {
        ResultTable {
            recipe: recipe.to_string(),
            seed,
            metrics: metrics.iter().map(|m| m.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, config: impl Into<String>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.metrics.len() {
            return Err(QuantError::Contract(format!(
                "row has {} values for {} metrics",
                values.len(),
                self.metrics.len()
            )));
        }
        self.rows.push(TableRow {
            config: config.into(),
            values,
        });
        Ok(())
    }

    pub fn get(&self, config: &str, metric: &str) -> Option<f64> {
        let j = self.metrics.iter().position(|m| m == metric)?;
        self.rows.iter().find(|r| r.config == config).map(|r| r.values[j])
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["config".to_string(), "seed".to_string()];
        header.extend(self.metrics.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.config.clone(), self.seed.to_string()];
            rec.extend(r.values.iter().map(|v| fmt_value(*v)));
            w.write_record(&rec).map_err(csv_err)?;
        }
        finish(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config: String,
    pub metric: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single seed.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub recipe: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SummaryRow>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl SummaryTable {
    /// Aggregates tables that share configurations and metrics.
    pub fn from_tables(tables: &[ResultTable]) -> Result<Self> {
        let first = tables
            .first()
            .ok_or_else(|| QuantError::Contract("summary needs at least one table".into()))?;
        let mut rows = Vec::new();
        for (i, r) in first.rows.iter().enumerate() {
            for (j, metric) in first.metrics.iter().enumerate() {
                let per_seed = tables
                    .iter()
                    .map(|t| {
                        t.rows
                            .get(i)
                            .filter(|row| row.config == r.config && t.metrics == first.metrics)
                            .map(|row| row.values[j])
                            .ok_or_else(|| QuantError::Contract(format!("seed {} table differs in shape", t.seed)))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let (mean, std) = mean_std(&per_seed);
                rows.push(SummaryRow {
                    config: r.config.clone(),
                    metric: metric.clone(),
                    per_seed,
                    mean,
                    std,
                });
            }
        }
        Ok(SummaryTable {
            recipe: first.recipe.clone(),
            seeds: tables.iter().map(|t| t.seed).collect(),
            rows,
        })
    }

    pub fn mean(&self, config: &str, metric: &str) -> Option<f64> {
        self.row(config, metric).map(|r| r.mean)
    }

    pub fn row(&self, config: &str, metric: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.config == config && r.metric == metric)
    }

    pub fn configs(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.config) {
                out.push(r.config.clone());
            }
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["config".to_string(), "metric".to_string(), "mean".to_string(), "std".to_string()];
        header.extend(self.seeds.iter().map(|s| format!("seed_{s}")));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.config.clone(), r.metric.clone(), fmt_value(r.mean), fmt_value(r.std)];
            rec.extend(r.per_seed.iter().map(|v| fmt_value(*v)));
            w.write_record(&rec).map_err(csv_err)?;
        }
        finish(w)
    }
}

/// Shortest text that parses back to the same `f64`.
fn fmt_value(v: f64) -> String {
    format!("{v}")
}

fn csv_err(e: csv::Error) -> QuantError {
    QuantError::Serde(e.to_string())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| QuantError::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| QuantError::Serde(e.to_string()))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| QuantError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| QuantError::io(path, e))
}

pub(crate) fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| QuantError::Serde(e.to_string()))
}

/// Writes `<recipe>_<seed>.{csv,json}` for every table and
/// `<recipe>_summary.{csv,json}`.
pub fn write_tables(dir: &Path, tables: &[ResultTable], summary: &SummaryTable) -> Result<()> {
    for t in tables {
        write_text(&dir.join(format!("{}_{}.csv", t.recipe, t.seed)), &t.to_csv()?)?;
        write_text(&dir.join(format!("{}_{}.json", t.recipe, t.seed)), &to_json(t)?)?;
    }
    write_text(&dir.join(format!("{}_summary.csv", summary.recipe)), &summary.to_csv()?)?;
    write_text(&dir.join(format!("{}_summary.json", summary.recipe)), &to_json(summary)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_carries_seeds_mean_and_std() {
        let mut a = ResultTable::new("obs0", 0, &["accuracy"]);
        a.push("x", vec![0.5]).unwrap();
        let mut b = ResultTable::new("obs0", 1, &["accuracy"]);
        b.push("x", vec![0.7]).unwrap();
        let s = SummaryTable::from_tables(&[a, b]).unwrap();
        let r = s.row("x", "accuracy").unwrap();
        assert_eq!(r.per_seed, vec![0.5, 0.7]);
        assert!((r.mean - 0.6).abs() < 1e-12);
        assert!((r.std - 0.02f64.sqrt()).abs() < 1e-12);
        let csv = s.to_csv().unwrap();
        assert_eq!(csv.lines().next().unwrap(), "config,metric,mean,std,seed_0,seed_1");
    }
}
