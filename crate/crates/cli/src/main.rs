use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use denoise_ad::data::{load_csv, make_windows, normalize, save_csv, Sinusoid, SyntheticSpec, TimeSeries};
use denoise_ad::detection::{
    evaluate_at, point_scores, sweep_threshold, window_counts, ScoreSeries, DEFAULT_CANDIDATES,
};
use denoise_ad::report::{correlation_report, read_stats, DatasetStats};
use denoise_ad::sweep::{parse_architecture, read_rows, run_sweep, summarize, write_rows, write_summary};
use denoise_ad::sweep::{Dataset, SweepGrid, SweepSettings};
use denoise_ad::{fit, generate_synthetic, init_params, DropoutMode, Error, ErrorClass, ModelConfig, Result};
use denoise_ad::{SavedModel, TrainConfig};

#[derive(Parser)]
#[command(name = "denoise-ad", version, about = "LSTM autoencoder anomaly detection with dropout denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic series.
    Gen(GenArgs),
    /// Train a model on one series.
    Train(TrainArgs),
    /// Score every point of a series with a trained model.
    Score(ScoreArgs),
    /// Compare scores against labels.
    Eval(EvalArgs),
    /// Train and evaluate every architecture × dropout × seed cell.
    Sweep(SweepArgs),
    /// Relate anomaly share to the best dropout rate across datasets.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 10_000)]
    length: usize,
    #[arg(long, default_value_t = 0.005)]
    anomaly_rate: f64,
    /// Spike offset in multiples of the noise standard deviation.
    #[arg(long, default_value_t = 5.0)]
    magnitude: f64,
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    trend: f64,
    /// Sinusoid component as PERIOD:AMPLITUDE; repeatable. Defaults to 24:1 and 168:0.5.
    #[arg(long = "sine", value_parser = parse_sinusoid)]
    sines: Vec<Sinusoid>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Encoder layer sizes, e.g. `16` or `16,8`.
    #[arg(long, default_value = "16", value_parser = parse_arch)]
    arch: Arch,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value = "inverted")]
    dropout_mode: DropoutMode,
    #[arg(long, default_value_t = 24)]
    window: usize,
    #[arg(long, default_value_t = 1)]
    step: usize,
}

#[derive(Args, Clone)]
struct FitArgs {
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value_t = 1e-5)]
    min_delta: f64,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
}

impl FitArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch,
            max_epochs: self.epochs,
            patience: self.patience,
            min_delta: self.min_delta,
            validation_fraction: self.val_fraction,
            seed,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss CSV; defaults to the model path with a `.history.csv` suffix.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1)]
    step: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Labelled series the scores belong to.
    #[arg(long)]
    data: PathBuf,
    /// Scores CSV from `score`.
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    scores: Option<PathBuf>,
    /// Score on the fly with this model instead of reading a scores file.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, conflicts_with = "sweep", required_unless_present = "sweep")]
    threshold: Option<f64>,
    /// Pick the threshold that maximizes F1.
    #[arg(long)]
    sweep: bool,
    #[arg(long, default_value_t = DEFAULT_CANDIDATES)]
    candidates: usize,
    /// Window length for window-level counts; taken from the model when one is given.
    #[arg(long, default_value_t = 24)]
    window: usize,
    #[arg(long, default_value_t = 1)]
    step: usize,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Data CSV (one-series dataset) or directory of CSVs (one pooled dataset); repeatable.
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Synthetic dataset at this anomaly rate, other settings default; repeatable.
    #[arg(long)]
    synthetic: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    synthetic_length: usize,
    /// Encoder architecture; repeatable. Defaults to `16` and `16,8`.
    #[arg(long = "arch", value_parser = parse_arch)]
    archs: Vec<Arch>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5")]
    dropouts: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "inverted")]
    dropout_mode: DropoutMode,
    #[arg(long, default_value_t = 24)]
    window: usize,
    #[arg(long, default_value_t = 1)]
    step: usize,
    #[arg(long, default_value_t = DEFAULT_CANDIDATES)]
    candidates: usize,
    #[command(flatten)]
    fit: FitArgs,
    /// Per-cell CSV.
    #[arg(long)]
    out: PathBuf,
    /// Per-(dataset, architecture, p) medians; defaults to the rows path with a `.summary.csv` suffix.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Also write dataset,total_samples,anomaly_samples for `report --stats`.
    #[arg(long)]
    stats_out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Sweep row CSVs written by `sweep`.
    #[arg(required = true)]
    sweeps: Vec<PathBuf>,
    /// CSV of dataset,total_samples,anomaly_samples.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    stats: Option<PathBuf>,
    /// Count samples from these datasets instead (same naming as `sweep --data`).
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Write the report as JSON here as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Encoder layer sizes as parsed from `16,8`.
#[derive(Clone, Debug)]
struct Arch(Vec<usize>);

fn parse_arch(s: &str) -> std::result::Result<Arch, String> {
    parse_architecture(s).map(Arch).map_err(|e| e.to_string())
}

fn parse_sinusoid(s: &str) -> std::result::Result<Sinusoid, String> {
    let (period, amplitude) = s.split_once(':').ok_or("expected PERIOD:AMPLITUDE")?;
    Ok(Sinusoid {
        period: period.parse().map_err(|_| format!("bad period `{period}`"))?,
        amplitude: amplitude.parse().map_err(|_| format!("bad amplitude `{amplitude}`"))?,
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn io_context(path: &Path) -> impl Fn(io::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_context(path))?))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(io_context(path))
}

fn load_series(path: &Path) -> Result<TimeSeries> {
    match load_csv(path) {
        Err(Error::Io(e)) => Err(io_context(path)(e)),
        other => other,
    }
}

fn load_model(path: &Path) -> Result<SavedModel> {
    match SavedModel::load(path) {
        Err(Error::Io(e)) => Err(io_context(path)(e)),
        other => other,
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path).map_err(io_context(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("no CSV files in {}", path.display())));
        }
        let series = files.iter().map(|f| load_series(f)).collect::<Result<Vec<TimeSeries>>>()?;
        let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Dataset::new(name, series))
    } else {
        let series = load_series(path)?;
        Ok(Dataset::new(series.name.clone(), vec![series]))
    }
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let mut spec = SyntheticSpec {
        length: args.length,
        trend: args.trend,
        noise_sigma: args.noise,
        anomaly_rate: args.anomaly_rate,
        anomaly_magnitude: args.magnitude,
        seed: args.seed,
        ..SyntheticSpec::default()
    };
    if !args.sines.is_empty() {
        spec.components = args.sines;
    }
    spec.validate()?;
    let series = generate_synthetic(&spec)?;
    save_csv(&series, &args.out)?;
    println!("length {} anomalies {}", series.len(), series.anomaly_count().unwrap_or(0));
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let series = load_series(&args.data)?;
    let config = ModelConfig::new(series.dim(), args.model.window, args.model.arch.0.clone())
        .with_dropout(args.model.dropout, args.model.dropout_mode)
        .with_seed(args.seed);
    config.validate()?;
    let train = args.fit.config(args.seed);
    train.validate()?;
    let (normalized, norm_params) = normalize(&series, None)?;
    let windows = make_windows(&normalized, args.model.window, args.model.step)?;
    let (params, history) = fit(init_params(&config)?, &config, &windows.windows, &train)?;
    SavedModel { config, norm_params, params }.save(&args.out)?;
    let history_path = args.history.unwrap_or_else(|| with_suffix(&args.out, ".history.csv"));
    let mut out = create(&history_path)?;
    history.write_csv(&mut out)?;
    out.flush()?;
    println!("epochs_run {} best_epoch {}", history.epochs_run, history.best_epoch);
    Ok(())
}

fn score_with_model(model: &SavedModel, series: &TimeSeries, step: usize) -> Result<ScoreSeries> {
    if series.dim() != model.config.input_dim {
        return Err(Error::Compatibility(format!(
            "model expects {} dimensions, data has {}",
            model.config.input_dim,
            series.dim()
        )));
    }
    let (normalized, _) = normalize(series, Some(&model.norm_params))?;
    point_scores(&model.params, &model.config, &normalized, step)
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let scores = score_with_model(&model, &load_series(&args.data)?, args.step)?;
    let mut out = create(&args.out)?;
    scores.write_csv(&mut out)?;
    out.flush()?;
    println!("scored {} points", scores.len());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let series = load_series(&args.data)?;
    let labels = series
        .labels
        .clone()
        .ok_or_else(|| Error::Evaluation(format!("{} has no is_anomaly column", args.data.display())))?;
    if !labels.contains(&1) {
        return Err(Error::Evaluation("labels contain no anomalies".into()));
    }
    let (scores, window) = match (&args.scores, &args.model) {
        (Some(path), _) => (ScoreSeries::read_csv(open(path)?)?, args.window),
        (None, Some(path)) => {
            let model = load_model(path)?;
            (score_with_model(&model, &series, args.step)?, model.config.window_len)
        }
        (None, None) => return Err(Error::Usage("pass --scores or --model".into())),
    };
    let aligned = scores.aligned_labels(&labels)?;
    let mut report = match args.threshold {
        Some(threshold) => evaluate_at(&scores, &aligned, threshold)?,
        None => sweep_threshold(&scores, &aligned, args.candidates)?.1,
    };
    report.window_counts = Some(window_counts(&labels, window, args.step));
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Report(e.to_string()))?;
    match args.out {
        Some(path) => fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut datasets = args.data.iter().map(|p| load_dataset(p)).collect::<Result<Vec<_>>>()?;
    for &rate in &args.synthetic {
        let spec = SyntheticSpec { length: args.synthetic_length, anomaly_rate: rate, ..SyntheticSpec::default() };
        spec.validate()?;
        let series = generate_synthetic(&spec)?;
        datasets.push(Dataset::new(series.name.clone(), vec![series]));
    }
    if datasets.is_empty() {
        return Err(Error::Usage("pass at least one --data or --synthetic".into()));
    }
    let mut names: Vec<&str> = datasets.iter().map(|d| d.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Usage("dataset names must be unique".into()));
    }
    let grid = SweepGrid {
        architectures: if args.archs.is_empty() {
            SweepGrid::default().architectures
        } else {
            args.archs.into_iter().map(|a| a.0).collect()
        },
        dropout_ps: args.dropouts,
        seeds: args.seeds,
    };
    grid.validate()?;
    let settings = SweepSettings {
        window_len: args.window,
        step: args.step,
        dropout_mode: args.dropout_mode,
        train: args.fit.config(0),
        n_candidates: args.candidates,
    };
    settings.train.validate()?;
    let report = run_sweep(&datasets, &grid, &settings)?;
    let mut out = create(&args.out)?;
    write_rows(&report.rows, &mut out)?;
    out.flush()?;
    let summary_path = args.summary.unwrap_or_else(|| with_suffix(&args.out, ".summary.csv"));
    let mut out = create(&summary_path)?;
    write_summary(&report.summary, &mut out)?;
    out.flush()?;
    if let Some(path) = args.stats_out {
        write_stats(&datasets, &path)?;
    }

    let failed = report.rows.iter().filter(|r| !r.ok()).count();
    println!("{:<28} {:<8} {:>5} {:>8} {:>8} {:>8}  best", "dataset", "arch", "p", "epochs", "f1", "dF1%");
    for r in &report.summary {
        let arch = r.architecture.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let delta = r.delta_f1_pct.map(|d| format!("{d:.1}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<28} {:<8} {:>5} {:>8} {:>8.4} {:>8}  {}",
            r.dataset,
            arch,
            r.dropout_p,
            r.median_epochs,
            r.median_f1,
            delta,
            if r.best { "*" } else { "" }
        );
    }
    if failed > 0 {
        eprintln!("{failed} cell(s) failed; see the error column");
    }
    Ok(())
}

fn write_stats(datasets: &[Dataset], path: &Path) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "dataset,total_samples,anomaly_samples")?;
    for d in datasets {
        let stat = DatasetStats::from_dataset(d)
            .ok_or_else(|| Error::Report(format!("dataset `{}` is unlabelled", d.name)))?;
        writeln!(out, "{},{},{}", stat.dataset, stat.total_samples, stat.anomaly_samples)?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for path in &args.sweeps {
        rows.extend(read_rows(open(path)?)?);
    }
    let stats = match &args.stats {
        Some(path) => read_stats(open(path)?)?,
        None => args
            .data
            .iter()
            .map(|p| {
                let d = load_dataset(p)?;
                DatasetStats::from_dataset(&d).ok_or_else(|| Error::Report(format!("dataset `{}` is unlabelled", d.name)))
            })
            .collect::<Result<_>>()?,
    };
    let report = correlation_report(&summarize(&rows), &stats)?;
    report.render(io::stdout().lock())?;
    if let Some(path) = args.out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Report(e.to_string()))?;
        fs::write(path, json + "\n")?;
    }
    Ok(())
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(err.class()))
        }
    }
}
