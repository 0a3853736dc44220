//! Relating each dataset's anomaly share to the dropout rate that worked best on it.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sweep::{Dataset, SummaryRow};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub dataset: String,
    pub total_samples: u64,
    pub anomaly_samples: u64,
}

impl DatasetStats {
    /// Counts labelled points; `None` if any series is unlabelled.
    pub fn from_dataset(dataset: &Dataset) -> Option<Self> {
        Some(Self {
            dataset: dataset.name.clone(),
            total_samples: dataset.total_points() as u64,
            anomaly_samples: dataset.anomaly_points()? as u64,
        })
    }
}

/// Anomaly share in percent, truncated (not rounded) to three decimals.
pub fn format_percentage(anomalies: u64, total: u64) -> String {
    if total == 0 {
        return "n/a".into();
    }
    let thousandths = (anomalies as u128 * 100_000) / total as u128;
    format!("{}.{:03}%", thousandths / 1000, thousandths % 1000)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub dataset: String,
    pub total_samples: u64,
    pub anomaly_samples: u64,
    pub percentage: String,
    /// Best dropout rate per architecture, deduplicated and ascending.
    pub optimal_ps: Vec<f64>,
}

impl CorrelationRow {
    pub fn anomaly_ratio(&self) -> f64 {
        self.anomaly_samples as f64 / self.total_samples as f64
    }

    pub fn mean_optimal_p(&self) -> f64 {
        self.optimal_ps.iter().sum::<f64>() / self.optimal_ps.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub rows: Vec<CorrelationRow>,
    /// Rank correlation between anomaly ratio and mean optimal p; `None` when a side is constant.
    pub spearman: Option<f64>,
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

pub fn correlation_report(summary: &[SummaryRow], stats: &[DatasetStats]) -> Result<CorrelationReport> {
    let mut best: BTreeMap<&str, BTreeSet<u64>> = BTreeMap::new();
    for row in summary {
        let entry = best.entry(row.dataset.as_str()).or_default();
        if row.best {
            entry.insert(row.dropout_p.to_bits());
        }
    }
    if best.len() < 2 {
        return Err(Error::Report(format!("need at least two datasets, found {}", best.len())));
    }
    let mut rows = Vec::with_capacity(best.len());
    for (dataset, ps) in best {
        let stat = stats
            .iter()
            .find(|s| s.dataset == dataset)
            .ok_or_else(|| Error::Report(format!("no sample counts for dataset `{dataset}`")))?;
        if stat.total_samples == 0 || stat.anomaly_samples > stat.total_samples {
            return Err(Error::Report(format!("inconsistent sample counts for dataset `{dataset}`")));
        }
        if ps.is_empty() {
            return Err(Error::Report(format!("dataset `{dataset}` has no completed sweep cells")));
        }
        let mut optimal_ps: Vec<f64> = ps.into_iter().map(f64::from_bits).collect();
        optimal_ps.sort_by(f64::total_cmp);
        rows.push(CorrelationRow {
            dataset: dataset.to_string(),
            total_samples: stat.total_samples,
            anomaly_samples: stat.anomaly_samples,
            percentage: format_percentage(stat.anomaly_samples, stat.total_samples),
            optimal_ps,
        });
    }
    let ratios: Vec<f64> = rows.iter().map(CorrelationRow::anomaly_ratio).collect();
    let ps: Vec<f64> = rows.iter().map(CorrelationRow::mean_optimal_p).collect();
    let spearman = spearman(&ratios, &ps);
    Ok(CorrelationReport { rows, spearman })
}

pub fn read_stats<R: Read>(reader: R) -> Result<Vec<DatasetStats>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for record in rdr.deserialize() {
        let stat: DatasetStats = record.map_err(|e| Error::Ingest {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        out.push(stat);
    }
    Ok(out)
}

impl CorrelationReport {
    /// Plain-text table followed by the rank correlation.
    pub fn render<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{:<24} {:>12} {:>10} {:>9}  optimal p", "dataset", "samples", "anomalies", "share")?;
        for r in &self.rows {
            let ps: Vec<String> = r.optimal_ps.iter().map(f64::to_string).collect();
            writeln!(
                out,
                "{:<24} {:>12} {:>10} {:>9}  {}",
                r.dataset,
                r.total_samples,
                r.anomaly_samples,
                r.percentage,
                ps.join(", ")
            )?;
        }
        match self.spearman {
            Some(rho) => writeln!(out, "spearman: {rho:.4}")?,
            None => writeln!(out, "spearman: undefined")?,
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentage_truncates() {
        assert_eq!(format_percentage(6286, 2_238_624), "0.280%");
        assert_eq!(format_percentage(1, 3), "33.333%");
        assert_eq!(format_percentage(2, 3), "66.666%");
        assert_eq!(format_percentage(5, 5), "100.000%");
        assert_eq!(format_percentage(0, 7), "0.000%");
    }

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), None);
        let rho = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((rho - 0.9486832980505138).abs() < 1e-12, "{rho}");
    }

    fn summary(dataset: &str, p: f64, best: bool) -> SummaryRow {
        SummaryRow {
            dataset: dataset.into(),
            architecture: vec![16],
            dropout_p: p,
            runs: 3,
            median_epochs: 5.0,
            median_recall: 0.5,
            median_precision: 0.5,
            median_f1: 0.5,
            delta_f1_pct: None,
            delta_epochs_pct: None,
            baseline: p == 0.0,
            best,
        }
    }

    #[test]
    fn report_joins_stats_and_best_rates() {
        let rows = vec![summary("low", 0.0, false), summary("low", 0.1, true), summary("high", 0.4, true)];
        let stats = vec![
            DatasetStats { dataset: "low".into(), total_samples: 1000, anomaly_samples: 2 },
            DatasetStats { dataset: "high".into(), total_samples: 1000, anomaly_samples: 10 },
        ];
        let report = correlation_report(&rows, &stats).unwrap();
        assert_eq!(report.rows[0].dataset, "high");
        assert_eq!(report.rows[0].percentage, "1.000%");
        assert_eq!(report.rows[1].optimal_ps, vec![0.1]);
        assert_eq!(report.spearman, Some(1.0));
        let mut text = Vec::new();
        report.render(&mut text).unwrap();
        assert!(String::from_utf8(text).unwrap().contains("0.200%"));
    }

    #[test]
    fn report_needs_two_datasets_and_stats() {
        let stats = vec![DatasetStats { dataset: "a".into(), total_samples: 10, anomaly_samples: 1 }];
        assert!(matches!(correlation_report(&[summary("a", 0.1, true)], &stats), Err(Error::Report(_))));
        let rows = vec![summary("a", 0.1, true), summary("b", 0.2, true)];
        let err = correlation_report(&rows, &stats).unwrap_err();
        assert!(err.to_string().contains("`b`"), "{err}");
    }

    #[test]
    fn stats_csv() {
        let text = "dataset,total_samples,anomaly_samples\nA1,2238624,6286\n";
        let stats = read_stats(text.as_bytes()).unwrap();
        assert_eq!(stats[0].anomaly_samples, 6286);
        assert!(read_stats("dataset,total_samples,anomaly_samples\nA1,x,1\n".as_bytes()).is_err());
    }
}
