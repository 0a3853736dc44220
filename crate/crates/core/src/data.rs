//! Series ingestion, min-max scaling to `[-1, 1]`, sliding windows and the
//! labeled synthetic generator.
//!
//! CSV layout is `timestamp,value,is_anomaly` (the last column optional),
//! matching the Yahoo S5 A1 files. A3/A4 headers (`timestamps`, `anomaly`)
//! are accepted as aliases.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

/// Hourly spacing used for generated timestamps.
pub const HOUR: i64 = 3600;
/// First generated timestamp (2014-11-23T06:00:00Z, same era as the S5 files).
pub const SYNTHETIC_EPOCH: i64 = 1_416_722_400;

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub name: String,
    pub timestamps: Vec<i64>,
    /// `T x N`
    pub values: Matrix,
    pub labels: Option<Vec<u8>>,
}

impl TimeSeries {
    pub fn new(name: impl Into<String>, timestamps: Vec<i64>, values: Matrix, labels: Option<Vec<u8>>) -> Result<Self> {
        let t = values.rows();
        if timestamps.len() != t {
            return Err(Error::Data(format!("{} timestamps for {t} points", timestamps.len())));
        }
        if let Some(l) = &labels {
            if l.len() != t {
                return Err(Error::Data(format!("{} labels for {t} points", l.len())));
            }
            if l.iter().any(|&v| v > 1) {
                return Err(Error::Data("labels must be 0 or 1".into()));
            }
        }
        Ok(Self { name: name.into(), timestamps, values, labels })
    }

    /// Univariate series with hourly timestamps.
    pub fn univariate(name: impl Into<String>, values: &[f64], labels: Option<Vec<u8>>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("series must contain at least one point".into()));
        }
        let timestamps = (0..values.len() as i64).map(|i| SYNTHETIC_EPOCH + i * HOUR).collect();
        Self::new(name, timestamps, Matrix::column(values), labels)
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn anomaly_count(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().filter(|&&v| v == 1).count())
    }
}

fn column_index(headers: &csv::StringRecord, names: &[&str]) -> Option<usize> {
    headers.iter().position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
}

/// Parses the CSV text of one series. `name` labels the result.
pub fn parse_csv<R: Read>(reader: R, name: &str) -> Result<TimeSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Ingest { line: 1, message: e.to_string() })?.clone();
    if headers.is_empty() {
        return Err(Error::Data(format!("{name}: empty file")));
    }
    let ts_col = column_index(&headers, &["timestamp", "timestamps"])
        .ok_or_else(|| Error::Ingest { line: 1, message: "missing `timestamp` column".into() })?;
    let value_col = column_index(&headers, &["value"])
        .ok_or_else(|| Error::Ingest { line: 1, message: "missing `value` column".into() })?;
    let label_col = column_index(&headers, &["is_anomaly", "anomaly"]);

    let mut rows: Vec<(i64, f64, u8)> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Ingest {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |col: usize, what: &str| {
            record.get(col).ok_or_else(|| Error::Ingest { line, message: format!("missing {what} field") })
        };
        let raw_ts = field(ts_col, "timestamp")?;
        let ts = raw_ts
            .parse::<i64>()
            .or_else(|_| raw_ts.parse::<f64>().map(|v| v as i64).map_err(|_| ()))
            .map_err(|_| Error::Ingest { line, message: format!("unparseable timestamp `{raw_ts}`") })?;
        let raw_value = field(value_col, "value")?;
        let value = raw_value
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Ingest { line, message: format!("unparseable value `{raw_value}`") })?;
        let label = match label_col {
            None => 0,
            Some(col) => match field(col, "is_anomaly")? {
                "0" | "0.0" => 0,
                "1" | "1.0" => 1,
                other => return Err(Error::Ingest { line, message: format!("label must be 0 or 1, got `{other}`") }),
            },
        };
        rows.push((ts, value, label));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{name}: no data rows")));
    }
    rows.sort_by_key(|r| r.0);
    let timestamps = rows.iter().map(|r| r.0).collect();
    let values = Matrix::new(rows.len(), 1, rows.iter().map(|r| r.1).collect())?;
    let labels = label_col.map(|_| rows.iter().map(|r| r.2).collect());
    TimeSeries::new(name, timestamps, values, labels)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<TimeSeries> {
    let path = path.as_ref();
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("series").to_string();
    let file = File::open(path)?;
    if file.metadata()?.len() == 0 {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }
    parse_csv(file, &name)
}

/// Writes a univariate series in the standard layout.
pub fn write_csv<W: Write>(series: &TimeSeries, writer: W) -> Result<()> {
    if series.dim() != 1 {
        return Err(Error::Data("CSV output supports univariate series only".into()));
    }
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    match &series.labels {
        Some(_) => w.write_record(["timestamp", "value", "is_anomaly"]),
        None => w.write_record(["timestamp", "value"]),
    }
    .map_err(csv_err)?;
    for i in 0..series.len() {
        let ts = series.timestamps[i].to_string();
        let v = series.values.get(i, 0).to_string();
        match &series.labels {
            Some(l) => w.write_record([ts, v, l[i].to_string()]),
            None => w.write_record([ts, v]),
        }
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(series: &TimeSeries, path: impl AsRef<Path>) -> Result<()> {
    write_csv(series, File::create(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormParams {
    pub fn fit(values: &Matrix) -> Self {
        let n = values.cols();
        let mut min = vec![f64::INFINITY; n];
        let mut max = vec![f64::NEG_INFINITY; n];
        for r in 0..values.rows() {
            for (d, &v) in values.row(r).iter().enumerate() {
                min[d] = min[d].min(v);
                max[d] = max[d].max(v);
            }
        }
        Self { min, max }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    fn check(&self, dim: usize) -> Result<()> {
        if self.min.len() != dim || self.max.len() != dim {
            return Err(Error::shape("NormParams", (self.min.len(), self.max.len()), (dim, dim)));
        }
        for d in 0..dim {
            if !(self.max[d] >= self.min[d]) {
                return Err(Error::Data(format!("normalization max < min in dimension {d}")));
            }
            if self.max[d] == self.min[d] {
                return Err(Error::Degenerate { dim: d, value: self.min[d] });
            }
        }
        Ok(())
    }
}

/// Maps each dimension affinely so `[min, max]` lands on `[-1, 1]`.
/// Values outside the reference range are not clamped.
pub fn normalize(series: &TimeSeries, params: Option<&NormParams>) -> Result<(TimeSeries, NormParams)> {
    let params = match params {
        Some(p) => p.clone(),
        None => NormParams::fit(&series.values),
    };
    params.check(series.dim())?;
    let mut out = series.clone();
    let n = series.dim();
    for r in 0..out.values.rows() {
        for (d, v) in out.values.row_mut(r).iter_mut().enumerate().take(n) {
            *v = (2.0 * *v - (params.max[d] + params.min[d])) / (params.max[d] - params.min[d]);
        }
    }
    Ok((out, params))
}

pub fn denormalize(series: &TimeSeries, params: &NormParams) -> Result<TimeSeries> {
    params.check(series.dim())?;
    let mut out = series.clone();
    for r in 0..out.values.rows() {
        for (d, v) in out.values.row_mut(r).iter_mut().enumerate() {
            *v = (*v * (params.max[d] - params.min[d]) + (params.max[d] + params.min[d])) / 2.0;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<Matrix>,
    pub origins: Vec<usize>,
    pub window_len: usize,
    pub step: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

pub fn window_count(t: usize, l: usize, step: usize) -> usize {
    if t < l || step == 0 {
        0
    } else {
        (t - l) / step + 1
    }
}

pub fn make_windows(series: &TimeSeries, window_len: usize, step: usize) -> Result<WindowSet> {
    if window_len == 0 || step == 0 {
        return Err(Error::Config("window length and step must be positive".into()));
    }
    let t = series.len();
    if t < window_len {
        return Err(Error::Data(format!("series `{}` has {t} points, shorter than window {window_len}", series.name)));
    }
    let n = series.dim();
    let count = window_count(t, window_len, step);
    let mut windows = Vec::with_capacity(count);
    let mut origins = Vec::with_capacity(count);
    for j in 0..count {
        let origin = j * step;
        let data = series.values.as_slice()[origin * n..(origin + window_len) * n].to_vec();
        windows.push(Matrix::new(window_len, n, data)?);
        origins.push(origin);
    }
    Ok(WindowSet { windows, origins, window_len, step })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub period: f64,
    pub amplitude: f64,
}

/// Recipe for a labeled univariate series: sinusoids + trend + Gaussian noise,
/// with point spikes of `anomaly_magnitude * noise_sigma` at `⌈ρT⌉` positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub length: usize,
    pub components: Vec<Sinusoid>,
    pub trend: f64,
    pub noise_sigma: f64,
    pub anomaly_rate: f64,
    pub anomaly_magnitude: f64,
    pub seed: u64,
}

pub const MAX_ANOMALY_RATE: f64 = 0.05;
pub const MIN_ANOMALY_MAGNITUDE: f64 = 3.0;

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            length: 10_000,
            components: vec![Sinusoid { period: 24.0, amplitude: 1.0 }, Sinusoid { period: 168.0, amplitude: 0.5 }],
            trend: 0.0,
            noise_sigma: 0.2,
            anomaly_rate: 0.005,
            anomaly_magnitude: 5.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::Config("synthetic length must be positive".into()));
        }
        if !(0.0..=MAX_ANOMALY_RATE).contains(&self.anomaly_rate) {
            return Err(Error::Config(format!(
                "anomaly rate must be in [0, {MAX_ANOMALY_RATE}], got {}",
                self.anomaly_rate
            )));
        }
        if !(self.anomaly_magnitude >= MIN_ANOMALY_MAGNITUDE) {
            return Err(Error::Config(format!(
                "anomaly magnitude must be at least {MIN_ANOMALY_MAGNITUDE} sigma, got {}",
                self.anomaly_magnitude
            )));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be positive, got {}", self.noise_sigma)));
        }
        if self.components.iter().any(|c| !(c.period > 0.0) || !c.amplitude.is_finite()) {
            return Err(Error::Config("sinusoid periods must be positive".into()));
        }
        Ok(())
    }

    pub fn anomaly_count(&self) -> usize {
        // Guard against 0.005 * 10000 landing a hair above 50.
        let raw = self.anomaly_rate * self.length as f64;
        ((raw - 1e-9).ceil().max(0.0) as usize).min(self.length)
    }
}

/// Clean signal plus noise, before any spikes. Exposed for auditing.
pub fn synthetic_base(spec: &SyntheticSpec) -> Vec<f64> {
    let mut noise_rng = Rng::derive(&[spec.seed, 0xBA5E]);
    (0..spec.length)
        .map(|i| {
            let t = i as f64;
            let periodic: f64 = spec
                .components
                .iter()
                .map(|c| c.amplitude * (std::f64::consts::TAU * t / c.period).sin())
                .sum();
            periodic + spec.trend * t + spec.noise_sigma * noise_rng.normal()
        })
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<TimeSeries> {
    spec.validate()?;
    let mut values = synthetic_base(spec);
    let mut labels = vec![0u8; spec.length];
    let mut rng = Rng::derive(&[spec.seed, 0xA40]);
    let k = spec.anomaly_count();
    // Partial Fisher-Yates: the first k slots are a uniform sample without replacement.
    let mut indices: Vec<usize> = (0..spec.length).collect();
    for i in 0..k {
        let j = i + rng.below((spec.length - i) as u64) as usize;
        indices.swap(i, j);
    }
    let offset = spec.anomaly_magnitude * spec.noise_sigma;
    for &idx in &indices[..k] {
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        values[idx] += sign * offset;
        labels[idx] = 1;
    }
    let name = format!("synthetic-rho{}-seed{}", spec.anomaly_rate, spec.seed);
    TimeSeries::univariate(name, &values, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_with_labels() {
        let text = "timestamp,value,is_anomaly\n1,0.5,0\n2,1.5,1\n3,-2,0\n";
        let s = parse_csv(text.as_bytes(), "x").unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.labels, Some(vec![0, 1, 0]));
        assert_eq!(s.values.as_slice(), &[0.5, 1.5, -2.0]);
    }

    #[test]
    fn parse_without_labels() {
        let s = parse_csv("timestamp,value\n1,2\n2,3\n".as_bytes(), "x").unwrap();
        assert_eq!(s.labels, None);
    }

    #[test]
    fn parse_sorts_by_timestamp() {
        let s = parse_csv("timestamp,value,is_anomaly\n3,30,1\n1,10,0\n2,20,0\n".as_bytes(), "x").unwrap();
        assert_eq!(s.timestamps, vec![1, 2, 3]);
        assert_eq!(s.values.as_slice(), &[10.0, 20.0, 30.0]);
        assert_eq!(s.labels, Some(vec![0, 0, 1]));
    }

    #[test]
    fn parse_accepts_a3_headers() {
        let s = parse_csv("timestamps,value,anomaly,changepoint\n1,2,1,0\n".as_bytes(), "x").unwrap();
        assert_eq!(s.labels, Some(vec![1]));
    }

    #[test]
    fn parse_error_names_line() {
        let err = parse_csv("timestamp,value,is_anomaly\nabc,1,0\n".as_bytes(), "x").unwrap_err();
        assert!(matches!(err, Error::Ingest { line: 2, .. }), "{err}");
        let err = parse_csv("timestamp,value,is_anomaly\n1,1,0\n2,zz,0\n".as_bytes(), "x").unwrap_err();
        assert!(matches!(err, Error::Ingest { line: 3, .. }), "{err}");
        let err = parse_csv("timestamp,value,is_anomaly\n1,1,7\n".as_bytes(), "x").unwrap_err();
        assert!(matches!(err, Error::Ingest { line: 2, .. }), "{err}");
    }

    #[test]
    fn empty_inputs_are_data_errors() {
        assert!(parse_csv("timestamp,value\n".as_bytes(), "x").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Data(_))));
    }

    #[test]
    fn normalize_endpoints_and_reuse() {
        let s = TimeSeries::univariate("x", &[0.0, 5.0, 10.0], None).unwrap();
        let (n, params) = normalize(&s, None).unwrap();
        assert_eq!(n.values.as_slice(), &[-1.0, 0.0, 1.0]);
        let far = TimeSeries::univariate("y", &[20.0], None).unwrap();
        let (m, _) = normalize(&far, Some(&params)).unwrap();
        assert_eq!(m.values.as_slice(), &[3.0]);
        let back = denormalize(&n, &params).unwrap();
        assert_eq!(back.values.as_slice(), &[0.0, 5.0, 10.0]);
    }

    #[test]
    fn identity_params_are_fixed_point() {
        let params = NormParams { min: vec![-1.0], max: vec![1.0] };
        let s = TimeSeries::univariate("x", &[-0.3, 0.25, 0.9], None).unwrap();
        assert_eq!(denormalize(&s, &params).unwrap().values, s.values);
    }

    #[test]
    fn constant_series_is_degenerate() {
        let s = TimeSeries::univariate("x", &[2.0, 2.0], None).unwrap();
        assert!(matches!(normalize(&s, None), Err(Error::Degenerate { dim: 0, .. })));
    }

    #[test]
    fn window_counts_and_boundaries() {
        let values: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let s = TimeSeries::univariate("x", &values, None).unwrap();
        let w = make_windows(&s, 24, 1).unwrap();
        assert_eq!(w.len(), 77);
        assert_eq!(w.windows[76].get(23, 0), 99.0);

        let s24 = TimeSeries::univariate("x", &values[..24], None).unwrap();
        let w = make_windows(&s24, 24, 1).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w.windows[0], s24.values);

        let w = make_windows(&s, 24, 5).unwrap();
        assert_eq!(w.len(), (100 - 24) / 5 + 1);
        assert_eq!(w.origins[3], 15);
        assert!(make_windows(&s24, 25, 1).is_err());
    }

    #[test]
    fn synthetic_counts() {
        let spec = SyntheticSpec { anomaly_rate: 0.0, length: 500, ..SyntheticSpec::default() };
        assert_eq!(generate_synthetic(&spec).unwrap().anomaly_count(), Some(0));
        let spec = SyntheticSpec { length: 10_000, anomaly_rate: 0.005, seed: 7, ..SyntheticSpec::default() };
        assert_eq!(generate_synthetic(&spec).unwrap().anomaly_count(), Some(50));
        let spec = SyntheticSpec { length: 1000, anomaly_rate: 0.0015, ..SyntheticSpec::default() };
        assert_eq!(generate_synthetic(&spec).unwrap().anomaly_count(), Some(2));
    }

    #[test]
    fn synthetic_spikes_offset_base() {
        let spec = SyntheticSpec { length: 4000, anomaly_rate: 0.01, seed: 3, ..SyntheticSpec::default() };
        let series = generate_synthetic(&spec).unwrap();
        let base = synthetic_base(&spec);
        let sigma = spec.noise_sigma;
        for (i, &label) in series.labels.as_ref().unwrap().iter().enumerate() {
            let dev = (series.values.get(i, 0) - base[i]).abs();
            if label == 1 {
                assert!(dev >= 3.0 * sigma);
            } else {
                assert_eq!(dev, 0.0);
            }
        }
    }

    #[test]
    fn synthetic_validation() {
        let bad = SyntheticSpec { anomaly_rate: 0.2, ..SyntheticSpec::default() };
        assert!(generate_synthetic(&bad).is_err());
        let bad = SyntheticSpec { anomaly_magnitude: 2.0, ..SyntheticSpec::default() };
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn csv_roundtrip_of_synthetic() {
        let spec = SyntheticSpec { length: 200, anomaly_rate: 0.02, ..SyntheticSpec::default() };
        let series = generate_synthetic(&spec).unwrap();
        let mut buf = Vec::new();
        write_csv(&series, &mut buf).unwrap();
        let back = parse_csv(buf.as_slice(), &series.name).unwrap();
        assert_eq!(back, series);
    }
}
