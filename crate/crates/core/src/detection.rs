//! Reconstruction-error scoring and pointwise evaluation.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_windows, TimeSeries};
use crate::error::{Error, Result};
use crate::lstm::{reconstruct, ModelConfig, ModelParams};

/// Number of score quantiles tried by the best-F1 threshold sweep.
pub const DEFAULT_CANDIDATES: usize = 200;

/// Per-point anomaly scores. Only points covered by at least one window are
/// present; `index` holds their positions in the source series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub index: Vec<usize>,
    pub scores: Vec<f64>,
    pub coverage: Vec<usize>,
}

impl ScoreSeries {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Labels aligned with the scored points.
    pub fn aligned_labels(&self, labels: &[u8]) -> Result<Vec<u8>> {
        self.index
            .iter()
            .map(|&i| {
                labels
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::Evaluation(format!("no label for scored index {i}")))
            })
            .collect()
    }

    /// Concatenates several series' scores (indices keep their per-series values).
    pub fn concat(parts: &[ScoreSeries]) -> ScoreSeries {
        let mut out = ScoreSeries { index: Vec::new(), scores: Vec::new(), coverage: Vec::new() };
        for p in parts {
            out.index.extend_from_slice(&p.index);
            out.scores.extend_from_slice(&p.scores);
            out.coverage.extend_from_slice(&p.coverage);
        }
        out
    }

    /// Writes `index,score,coverage` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["index", "score", "coverage"]).map_err(csv_error)?;
        for ((i, s), c) in self.index.iter().zip(&self.scores).zip(&self.coverage) {
            w.write_record([i.to_string(), s.to_string(), c.to_string()]).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut out = ScoreSeries { index: Vec::new(), scores: Vec::new(), coverage: Vec::new() };
        for record in rdr.deserialize() {
            let (i, s, c): (usize, f64, usize) = record.map_err(csv_error)?;
            if !s.is_finite() || s < 0.0 {
                return Err(Error::Data(format!("invalid score {s} at index {i}")));
            }
            out.index.push(i);
            out.scores.push(s);
            out.coverage.push(c);
        }
        if out.is_empty() {
            return Err(Error::Data("scores file has no rows".into()));
        }
        Ok(out)
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Ingest { line: e.position().map(|p| p.line()).unwrap_or(0), message: e.to_string() }
}

/// Scores every point by the mean, over the windows covering it, of the
/// Euclidean norm of its reconstruction residual. Windows are reconstructed
/// at inference settings.
pub fn point_scores(params: &ModelParams, config: &ModelConfig, series: &TimeSeries, step: usize) -> Result<ScoreSeries> {
    if series.dim() != config.input_dim {
        return Err(Error::Compatibility(format!(
            "series has {} dimensions, model expects {}",
            series.dim(),
            config.input_dim
        )));
    }
    let l = config.window_len;
    let windows = make_windows(series, l, step)?;
    let residuals: Vec<Vec<f64>> = windows
        .windows
        .par_iter()
        .map(|w| {
            let recon = reconstruct(params, config, w)?;
            Ok((0..l)
                .map(|t| w.row(t).iter().zip(recon.row(t)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect())
        })
        .collect::<Result<_>>()?;

    let t_len = series.len();
    let mut sums = vec![0.0; t_len];
    let mut counts = vec![0usize; t_len];
    for (origin, errs) in windows.origins.iter().zip(&residuals) {
        for (t, e) in errs.iter().enumerate() {
            sums[origin + t] += e;
            counts[origin + t] += 1;
        }
    }
    let mut out = ScoreSeries { index: Vec::new(), scores: Vec::new(), coverage: Vec::new() };
    for i in 0..t_len {
        if counts[i] > 0 {
            out.index.push(i);
            out.scores.push(sums[i] / counts[i] as f64);
            out.coverage.push(counts[i]);
        }
    }
    Ok(out)
}

/// Counts of windows and of windows containing at least one labeled point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowCounts {
    pub windows: usize,
    pub anomalous_windows: usize,
}

pub fn window_counts(labels: &[u8], window_len: usize, step: usize) -> WindowCounts {
    let n = crate::data::window_count(labels.len(), window_len, step);
    let anomalous = (0..n).filter(|j| labels[j * step..j * step + window_len].contains(&1)).count();
    WindowCounts { windows: n, anomalous_windows: anomalous }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_counts: Option<WindowCounts>,
}

impl EvalReport {
    fn from_counts(threshold: f64, tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let recall = ratio(tp, tp + fn_);
        let precision = ratio(tp, tp + fp);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self {
            threshold,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            true_negatives: tn,
            recall,
            precision,
            f1,
            window_counts: None,
        }
    }
}

fn check_labels(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Evaluation(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Evaluation("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Flags `score > threshold` and compares pointwise with `labels`.
pub fn evaluate_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Result<EvalReport> {
    check_labels(scores, labels)?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(EvalReport::from_counts(threshold, tp, fp, fn_, tn))
}

pub fn evaluate_at(scores: &ScoreSeries, labels: &[u8], threshold: f64) -> Result<EvalReport> {
    evaluate_scores(&scores.scores, labels, threshold)
}

/// Candidate thresholds: `n` evenly spaced order statistics of the scores,
/// plus one value just above the maximum (flags nothing) and one just below
/// the minimum (flags everything). Sorted ascending, deduplicated.
pub fn threshold_candidates(scores: &[f64], n: usize) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Evaluation("no scores to threshold".into()));
    }
    if n < 2 {
        return Err(Error::Evaluation(format!("need at least 2 candidate thresholds, got {n}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Evaluation("scores must be finite".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let last = sorted.len() - 1;
    let mut out = Vec::with_capacity(n + 2);
    let lo = sorted[0];
    let hi = sorted[last];
    out.push(lo - 1e-9 * (1.0 + lo.abs()));
    for k in 0..n {
        let pos = ((k as f64) * last as f64 / (n - 1) as f64).round() as usize;
        out.push(sorted[pos]);
    }
    out.push(hi + 1e-9 * (1.0 + hi.abs()));
    out.dedup();
    Ok(out)
}

/// Best-F1 threshold among [`threshold_candidates`]; ties go to the higher threshold.
pub fn sweep_threshold_scores(scores: &[f64], labels: &[u8], n_candidates: usize) -> Result<(f64, EvalReport)> {
    check_labels(scores, labels)?;
    if !labels.contains(&1) {
        return Err(Error::Evaluation("threshold sweep needs at least one positive label".into()));
    }
    let candidates = threshold_candidates(scores, n_candidates)?;

    // Sort once and sweep candidates in ascending order with a moving cursor.
    let mut pairs: Vec<(f64, u8)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    let mut cursor = 0usize;
    let (mut neg_below, mut pos_below) = (0usize, 0usize);
    let mut best: Option<EvalReport> = None;
    for &thr in &candidates {
        while cursor < pairs.len() && pairs[cursor].0 <= thr {
            if pairs[cursor].1 == 1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            cursor += 1;
        }
        let report = EvalReport::from_counts(thr, positives - pos_below, negatives - neg_below, pos_below, neg_below);
        if best.as_ref().is_none_or(|b| report.f1 >= b.f1) {
            best = Some(report);
        }
    }
    let best = best.expect("at least two candidates");
    Ok((best.threshold, best))
}

pub fn sweep_threshold(scores: &ScoreSeries, labels: &[u8], n_candidates: usize) -> Result<(f64, EvalReport)> {
    sweep_threshold_scores(&scores.scores, labels, n_candidates)
}

/// A maximal run of flagged points: `start` and `len >= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalySegment {
    pub start: usize,
    pub len: usize,
}

pub fn extract_segments(flags: &[u8]) -> Vec<AnomalySegment> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &f) in flags.iter().enumerate() {
        match (f != 0, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(AnomalySegment { start: s, len: i - s });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(AnomalySegment { start: s, len: flags.len() - s });
    }
    out
}

pub fn segments_to_flags(segments: &[AnomalySegment], len: usize) -> Vec<u8> {
    let mut flags = vec![0u8; len];
    for seg in segments {
        flags[seg.start..seg.start + seg.len].fill(1);
    }
    flags
}
