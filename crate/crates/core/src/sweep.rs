//! Dropout-probability × architecture sweeps.
//!
//! Every cell trains one model from scratch, scores the training data with it
//! and reports the best-F1 threshold's metrics together with the epoch at
//! which validation loss bottomed out. Cells share nothing, so they run in
//! parallel and the report is sorted afterwards.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_windows, normalize, TimeSeries};
use crate::detection::{sweep_threshold, ScoreSeries, DEFAULT_CANDIDATES};
use crate::detection::point_scores;
use crate::dropout::{check_probability, DropoutMode};
use crate::error::{Error, Result};
use crate::lstm::{init_params, ModelConfig, ModelParams};
use crate::training::{fit, TrainConfig, TrainHistory};

/// A named group of series trained as one model (e.g. all files of a benchmark subset).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub series: Vec<TimeSeries>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, series: Vec<TimeSeries>) -> Self {
        Self { name: name.into(), series }
    }

    pub fn total_points(&self) -> usize {
        self.series.iter().map(TimeSeries::len).sum()
    }

    pub fn anomaly_points(&self) -> Option<usize> {
        self.series.iter().map(TimeSeries::anomaly_count).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub architectures: Vec<Vec<usize>>,
    pub dropout_ps: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            architectures: vec![vec![16], vec![16, 8]],
            dropout_ps: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            seeds: vec![0, 1, 2],
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.architectures.is_empty() || self.dropout_ps.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep grid lists must be non-empty".into()));
        }
        if self.architectures.iter().any(|a| a.is_empty() || a.contains(&0)) {
            return Err(Error::Config("architectures need at least one positive layer size".into()));
        }
        self.dropout_ps.iter().try_for_each(|&p| check_probability(p))
    }

    /// Dropout values actually run: the grid's, plus the 0.0 baseline, sorted and deduplicated.
    pub fn probabilities(&self) -> Vec<f64> {
        let mut ps = self.dropout_ps.clone();
        ps.push(0.0);
        ps.sort_by(f64::total_cmp);
        ps.dedup();
        ps
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub window_len: usize,
    pub step: usize,
    pub dropout_mode: DropoutMode,
    pub train: TrainConfig,
    pub n_candidates: usize,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            window_len: 24,
            step: 1,
            dropout_mode: DropoutMode::Inverted,
            train: TrainConfig::default(),
            n_candidates: DEFAULT_CANDIDATES,
        }
    }
}

/// One trained and evaluated cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dataset: String,
    pub architecture: Vec<usize>,
    pub dropout_p: f64,
    pub seed: u64,
    /// Epoch of the returned (best-validation) parameters.
    pub epochs: usize,
    pub epochs_run: usize,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub threshold: f64,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn is_baseline(&self) -> bool {
        self.dropout_p == 0.0
    }

    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Everything a cell produced, for callers that want more than the row.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub row: SweepRow,
    pub config: ModelConfig,
    pub params: ModelParams,
    pub history: TrainHistory,
    pub scores: ScoreSeries,
    pub labels: Vec<u8>,
}

/// Normalize each series on its own, window it, and train one model on the pooled windows.
pub fn run_cell(
    dataset: &Dataset,
    architecture: &[usize],
    dropout_p: f64,
    seed: u64,
    settings: &SweepSettings,
) -> Result<CellOutcome> {
    let first = dataset
        .series
        .first()
        .ok_or_else(|| Error::Data(format!("dataset `{}` has no series", dataset.name)))?;
    let config = ModelConfig::new(first.dim(), settings.window_len, architecture.to_vec())
        .with_dropout(dropout_p, settings.dropout_mode)
        .with_seed(seed);
    config.validate()?;

    let mut normalized = Vec::with_capacity(dataset.series.len());
    let mut windows = Vec::new();
    let mut labels = Vec::new();
    for series in &dataset.series {
        let series_labels = series
            .labels
            .as_ref()
            .ok_or_else(|| Error::Evaluation(format!("series `{}` has no labels", series.name)))?;
        let (norm, _) = normalize(series, None)?;
        windows.extend(make_windows(&norm, settings.window_len, settings.step)?.windows);
        normalized.push((norm, series_labels));
    }

    let train = TrainConfig { seed, ..settings.train.clone() };
    let (params, history) = fit(init_params(&config)?, &config, &windows, &train)?;

    let mut parts = Vec::with_capacity(normalized.len());
    for (norm, series_labels) in &normalized {
        let scores = point_scores(&params, &config, norm, settings.step)?;
        labels.extend(scores.aligned_labels(series_labels)?);
        parts.push(scores);
    }
    let scores = ScoreSeries::concat(&parts);
    let (threshold, report) = sweep_threshold(&scores, &labels, settings.n_candidates)?;
    let row = SweepRow {
        dataset: dataset.name.clone(),
        architecture: architecture.to_vec(),
        dropout_p,
        seed,
        epochs: history.best_epoch,
        epochs_run: history.epochs_run,
        recall: report.recall,
        precision: report.precision,
        f1: report.f1,
        threshold,
        error: None,
    };
    Ok(CellOutcome { row, config, params, history, scores, labels })
}

fn failed_row(dataset: &str, architecture: &[usize], dropout_p: f64, seed: u64, err: &Error) -> SweepRow {
    SweepRow {
        dataset: dataset.to_string(),
        architecture: architecture.to_vec(),
        dropout_p,
        seed,
        epochs: 0,
        epochs_run: 0,
        recall: f64::NAN,
        precision: f64::NAN,
        f1: f64::NAN,
        threshold: f64::NAN,
        error: Some(err.to_string()),
    }
}

fn row_key(row: &SweepRow) -> (String, Vec<usize>, u64, u64) {
    (row.dataset.clone(), row.architecture.clone(), row.dropout_p.to_bits(), row.seed)
}

/// Per-seed rows plus the per-(dataset, architecture, p) summary.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SummaryRow>,
}

pub fn run_sweep(datasets: &[Dataset], grid: &SweepGrid, settings: &SweepSettings) -> Result<SweepReport> {
    grid.validate()?;
    if datasets.is_empty() {
        return Err(Error::Config("sweep needs at least one dataset".into()));
    }
    let mut cells = Vec::new();
    for dataset in datasets {
        for arch in &grid.architectures {
            for p in grid.probabilities() {
                for &seed in &grid.seeds {
                    cells.push((dataset, arch.clone(), p, seed));
                }
            }
        }
    }
    let mut rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|(dataset, arch, p, seed)| match run_cell(dataset, arch, *p, *seed, settings) {
            Ok(outcome) => outcome.row,
            Err(err) => failed_row(&dataset.name, arch, *p, *seed, &err),
        })
        .collect();
    sort_rows(&mut rows);
    rows.dedup_by(|a, b| row_key(a) == row_key(b));
    let summary = summarize(&rows);
    Ok(SweepReport { rows, summary })
}

pub fn sort_rows(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| {
        a.dataset
            .cmp(&b.dataset)
            .then_with(|| a.architecture.cmp(&b.architecture))
            .then_with(|| a.dropout_p.total_cmp(&b.dropout_p))
            .then_with(|| a.seed.cmp(&b.seed))
    });
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub architecture: Vec<usize>,
    pub dropout_p: f64,
    /// Seeds that completed; medians are over these.
    pub runs: usize,
    pub median_epochs: f64,
    pub median_recall: f64,
    pub median_precision: f64,
    pub median_f1: f64,
    /// `(f1 - baseline) / baseline`, in percent.
    pub delta_f1_pct: Option<f64>,
    /// `(baseline - epochs) / baseline`, in percent; positive means faster.
    pub delta_epochs_pct: Option<f64>,
    pub baseline: bool,
    pub best: bool,
}

type RowsByP<'a> = BTreeMap<u64, Vec<&'a SweepRow>>;

pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, Vec<usize>), RowsByP> = BTreeMap::new();
    for row in rows {
        groups
            .entry((row.dataset.clone(), row.architecture.clone()))
            .or_default()
            .entry(row.dropout_p.to_bits())
            .or_default()
            .push(row);
    }
    let mut out = Vec::new();
    for ((dataset, architecture), by_p) in groups {
        let mut group: Vec<SummaryRow> = by_p
            .into_values()
            .map(|cell_rows| {
                let done: Vec<&SweepRow> = cell_rows.iter().copied().filter(|r| r.ok()).collect();
                let med = |f: fn(&SweepRow) -> f64| {
                    if done.is_empty() {
                        f64::NAN
                    } else {
                        median(&done.iter().map(|r| f(r)).collect::<Vec<_>>())
                    }
                };
                SummaryRow {
                    dataset: dataset.clone(),
                    architecture: architecture.clone(),
                    dropout_p: cell_rows[0].dropout_p,
                    runs: done.len(),
                    median_epochs: med(|r| r.epochs as f64),
                    median_recall: med(|r| r.recall),
                    median_precision: med(|r| r.precision),
                    median_f1: med(|r| r.f1),
                    delta_f1_pct: None,
                    delta_epochs_pct: None,
                    baseline: cell_rows[0].is_baseline(),
                    best: false,
                }
            })
            .collect();
        group.sort_by(|a, b| a.dropout_p.total_cmp(&b.dropout_p));

        let baseline = group.iter().find(|r| r.baseline && r.runs > 0).cloned();
        if let Some(base) = baseline {
            for r in group.iter_mut().filter(|r| r.runs > 0) {
                if base.median_f1 != 0.0 {
                    r.delta_f1_pct = Some((r.median_f1 - base.median_f1) / base.median_f1 * 100.0);
                }
                if base.median_epochs != 0.0 {
                    r.delta_epochs_pct = Some((base.median_epochs - r.median_epochs) / base.median_epochs * 100.0);
                }
            }
        }
        let best = group
            .iter()
            .enumerate()
            .filter(|(_, r)| r.runs > 0)
            .min_by(|(_, a), (_, b)| {
                b.median_f1
                    .total_cmp(&a.median_f1)
                    .then_with(|| a.median_epochs.total_cmp(&b.median_epochs))
                    .then_with(|| a.dropout_p.total_cmp(&b.dropout_p))
            })
            .map(|(i, _)| i);
        if let Some(i) = best {
            group[i].best = true;
        }
        out.extend(group);
    }
    out
}

fn format_architecture(arch: &[usize]) -> String {
    arch.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_architecture(text: &str) -> Result<Vec<usize>> {
    let arch: Vec<usize> = text
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad architecture `{text}`"))))
        .collect::<Result<_>>()?;
    if arch.is_empty() || arch.contains(&0) {
        return Err(Error::Config(format!("bad architecture `{text}`")));
    }
    Ok(arch)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Ingest { line, message: e.to_string() }
}

const ROW_HEADER: [&str; 12] = [
    "dataset",
    "architecture",
    "dropout",
    "seed",
    "epochs",
    "epochs_run",
    "recall",
    "precision",
    "f1",
    "threshold",
    "baseline",
    "error",
];

pub fn write_rows<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ROW_HEADER).map_err(csv_error)?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            format_architecture(&r.architecture),
            r.dropout_p.to_string(),
            r.seed.to_string(),
            r.epochs.to_string(),
            r.epochs_run.to_string(),
            r.recall.to_string(),
            r.precision.to_string(),
            r.f1.to_string(),
            r.threshold.to_string(),
            (r.is_baseline() as u8).to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(reader: R) -> Result<Vec<SweepRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    if headers.iter().ne(ROW_HEADER.iter().copied()) {
        return Err(Error::Ingest { line: 1, message: format!("unexpected sweep header: {headers:?}") });
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let bad = |what: &str| Error::Ingest { line, message: format!("bad {what}") };
        let num = |i: usize, what: &str| record[i].parse::<f64>().map_err(|_| bad(what));
        let count = |i: usize, what: &str| record[i].parse::<usize>().map_err(|_| bad(what));
        rows.push(SweepRow {
            dataset: record[0].to_string(),
            architecture: parse_architecture(&record[1]).map_err(|_| bad("architecture"))?,
            dropout_p: num(2, "dropout")?,
            seed: record[3].parse().map_err(|_| bad("seed"))?,
            epochs: count(4, "epochs")?,
            epochs_run: count(5, "epochs_run")?,
            recall: num(6, "recall")?,
            precision: num(7, "precision")?,
            f1: num(8, "f1")?,
            threshold: num(9, "threshold")?,
            error: if record[11].is_empty() { None } else { Some(record[11].to_string()) },
        });
    }
    Ok(rows)
}

pub fn write_summary<W: Write>(summary: &[SummaryRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "dataset",
        "architecture",
        "dropout",
        "runs",
        "median_epochs",
        "median_recall",
        "median_precision",
        "median_f1",
        "delta_f1_pct",
        "delta_epochs_pct",
        "baseline",
        "best",
    ])
    .map_err(csv_error)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in summary {
        w.write_record([
            r.dataset.clone(),
            format_architecture(&r.architecture),
            r.dropout_p.to_string(),
            r.runs.to_string(),
            r.median_epochs.to_string(),
            r.median_recall.to_string(),
            r.median_precision.to_string(),
            r.median_f1.to_string(),
            opt(r.delta_f1_pct),
            opt(r.delta_epochs_pct),
            (r.baseline as u8).to_string(),
            (r.best as u8).to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(dataset: &str, arch: &[usize], p: f64, seed: u64, epochs: usize, f1: f64) -> SweepRow {
        SweepRow {
            dataset: dataset.into(),
            architecture: arch.to_vec(),
            dropout_p: p,
            seed,
            epochs,
            epochs_run: epochs + 3,
            recall: f1,
            precision: f1,
            f1,
            threshold: 0.5,
            error: None,
        }
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn probabilities_always_include_baseline() {
        let grid = SweepGrid { architectures: vec![vec![4]], dropout_ps: vec![0.4, 0.2], seeds: vec![0] };
        assert_eq!(grid.probabilities(), vec![0.0, 0.2, 0.4]);
        let bad = SweepGrid { dropout_ps: vec![1.0], ..grid.clone() };
        assert!(bad.validate().is_err());
        let empty = SweepGrid { seeds: vec![], ..grid };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn summary_marks_best_and_deltas() {
        let rows = vec![
            row("a", &[16], 0.0, 0, 20, 0.5),
            row("a", &[16], 0.0, 1, 30, 0.6),
            row("a", &[16], 0.0, 2, 10, 0.4),
            row("a", &[16], 0.4, 0, 5, 0.55),
            row("a", &[16], 0.4, 1, 10, 0.6),
            row("a", &[16], 0.4, 2, 15, 0.65),
        ];
        let summary = summarize(&rows);
        assert_eq!(summary.len(), 2);
        let base = &summary[0];
        assert!(base.baseline && !base.best);
        assert_eq!((base.median_epochs, base.median_f1), (20.0, 0.5));
        let drop = &summary[1];
        assert!(drop.best);
        assert_eq!(drop.median_epochs, 10.0);
        assert!((drop.delta_f1_pct.unwrap() - 20.0).abs() < 1e-9);
        assert!((drop.delta_epochs_pct.unwrap() - 50.0).abs() < 1e-9);
    }

    #[test]
    fn best_ties_go_to_fewer_epochs() {
        let rows = vec![row("a", &[4], 0.0, 0, 20, 0.7), row("a", &[4], 0.2, 0, 8, 0.7), row("a", &[4], 0.4, 0, 12, 0.7)];
        let summary = summarize(&rows);
        let best: Vec<f64> = summary.iter().filter(|r| r.best).map(|r| r.dropout_p).collect();
        assert_eq!(best, vec![0.2]);
    }

    #[test]
    fn failed_cells_are_excluded_from_medians() {
        let mut bad = row("a", &[4], 0.2, 1, 0, 0.0);
        bad.error = Some("diverged".into());
        bad.f1 = f64::NAN;
        let rows = vec![row("a", &[4], 0.0, 0, 5, 0.3), row("a", &[4], 0.2, 0, 4, 0.4), bad];
        let summary = summarize(&rows);
        assert_eq!(summary[1].runs, 1);
        assert_eq!(summary[1].median_f1, 0.4);
    }

    #[test]
    fn rows_survive_csv() {
        let mut rows = vec![row("a", &[16, 8], 0.1, 3, 7, 0.123456789), row("b", &[16], 0.0, 0, 2, 1.0 / 3.0)];
        rows[1].error = Some("boom, with comma".into());
        let mut buf = Vec::new();
        write_rows(&rows, &mut buf).unwrap();
        assert_eq!(read_rows(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn architecture_parsing() {
        assert_eq!(parse_architecture("16,8").unwrap(), vec![16, 8]);
        assert!(parse_architecture("16,0").is_err());
        assert!(parse_architecture("x").is_err());
    }
}
