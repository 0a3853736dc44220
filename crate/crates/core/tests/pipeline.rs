use denoise_ad::data::{generate_synthetic, make_windows, normalize, Sinusoid, SyntheticSpec, TimeSeries};
use denoise_ad::detection::point_scores;
use denoise_ad::lstm::{init_params, loss_and_grads, ModelConfig};
use denoise_ad::sweep::{run_cell, run_sweep, Dataset, SweepGrid, SweepSettings};
use denoise_ad::tensor::{Matrix, Rng};
use denoise_ad::training::{adam_step, fit, AdamState, TrainConfig};
use denoise_ad::DropoutMode;

fn sine_windows(len: usize, window: usize) -> Vec<Matrix> {
    let values: Vec<f64> = (0..len).map(|t| (t as f64 * std::f64::consts::TAU / 12.0).sin()).collect();
    let series = TimeSeries::univariate("sine", &values, None).unwrap();
    make_windows(&series, window, 1).unwrap().windows
}

fn quick(max_epochs: usize) -> TrainConfig {
    TrainConfig { max_epochs, batch_size: 16, learning_rate: 1e-2, ..TrainConfig::default() }
}

#[test]
fn training_reduces_loss_on_sine() {
    let config = ModelConfig::new(1, 8, vec![6]).with_seed(1);
    let windows = sine_windows(200, 8);
    let (_, history) = fit(init_params(&config).unwrap(), &config, &windows, &quick(15)).unwrap();
    let best = history.validation_loss[history.best_epoch - 1];
    assert!(best < history.validation_loss[0], "{history:?}");
    assert!(history.train_loss.last().unwrap() < &history.train_loss[0]);
}

#[test]
fn fit_is_deterministic() {
    let config = ModelConfig::new(1, 8, vec![4, 3]).with_dropout(0.3, DropoutMode::Inverted).with_seed(5);
    let windows = sine_windows(120, 8);
    let a = fit(init_params(&config).unwrap(), &config, &windows, &quick(4)).unwrap();
    let b = fit(init_params(&config).unwrap(), &config, &windows, &quick(4)).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn single_epoch_budget() {
    let config = ModelConfig::new(1, 8, vec![4]);
    let (_, history) = fit(init_params(&config).unwrap(), &config, &sine_windows(60, 8), &quick(1)).unwrap();
    assert_eq!((history.epochs_run, history.best_epoch), (1, 1));
}

#[test]
fn overfits_a_single_window() {
    let config = ModelConfig::new(1, 6, vec![8]).with_seed(2);
    let mut params = init_params(&config).unwrap();
    let window = Matrix::column(&[0.5, -0.2, 0.9, -0.7, 0.1, 0.3]);
    let mut state = AdamState::new(&params);
    let mut rng = Rng::new(0);
    let (first, _) = loss_and_grads(&params, &config, &window, &mut rng).unwrap();
    let mut last = first;
    for _ in 0..200 {
        let (loss, grads) = loss_and_grads(&params, &config, &window, &mut rng).unwrap();
        adam_step(&mut params, &grads, &mut state, 1e-2).unwrap();
        last = loss;
    }
    assert!(last < first * 0.1, "{first} -> {last}");
}

#[test]
fn dropout_mode_is_irrelevant_without_dropout() {
    let windows = sine_windows(80, 8);
    let inverted = ModelConfig::new(1, 8, vec![4]).with_dropout(0.0, DropoutMode::Inverted);
    let plain = ModelConfig::new(1, 8, vec![4]).with_dropout(0.0, DropoutMode::Plain);
    let a = fit(init_params(&inverted).unwrap(), &inverted, &windows, &quick(3)).unwrap();
    let b = fit(init_params(&plain).unwrap(), &plain, &windows, &quick(3)).unwrap();
    assert_eq!(a.0, b.0);
}

fn small_synthetic(rate: f64) -> TimeSeries {
    generate_synthetic(&SyntheticSpec {
        length: 600,
        components: vec![Sinusoid { period: 24.0, amplitude: 1.0 }],
        anomaly_rate: rate,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

#[test]
fn known_spikes_score_above_the_median() {
    let series = small_synthetic(0.01);
    let (norm, _) = normalize(&series, None).unwrap();
    let config = ModelConfig::new(1, 12, vec![8]).with_seed(3);
    let windows = make_windows(&norm, 12, 1).unwrap().windows;
    let (params, _) = fit(init_params(&config).unwrap(), &config, &windows, &quick(10)).unwrap();
    let scores = point_scores(&params, &config, &norm, 1).unwrap();
    let mut sorted = scores.scores.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let labels = series.labels.as_ref().unwrap();
    for (i, s) in scores.index.iter().zip(&scores.scores) {
        if labels[*i] == 1 {
            assert!(*s > median, "spike at {i} scored {s}, median {median}");
        }
    }
}

fn tiny_settings() -> SweepSettings {
    SweepSettings { window_len: 12, train: quick(3), ..SweepSettings::default() }
}

#[test]
fn sweep_rows_are_reproducible_and_order_free() {
    let datasets = vec![Dataset::new("a", vec![small_synthetic(0.01)]), Dataset::new("b", vec![small_synthetic(0.02)])];
    let grid = SweepGrid { architectures: vec![vec![4]], dropout_ps: vec![0.3], seeds: vec![0, 1] };
    let first = run_sweep(&datasets, &grid, &tiny_settings()).unwrap();
    let again = run_sweep(&datasets, &grid, &tiny_settings()).unwrap();
    assert_eq!(first, again);
    let permuted = SweepGrid { architectures: vec![vec![4]], dropout_ps: vec![0.3, 0.0], seeds: vec![1, 0] };
    let reversed: Vec<Dataset> = datasets.iter().rev().cloned().collect();
    assert_eq!(run_sweep(&reversed, &permuted, &tiny_settings()).unwrap(), first);
    assert_eq!(first.rows.len(), 2 * 2 * 2);
    assert!(first.rows.iter().all(|r| r.ok() && r.epochs >= 1 && (0.0..=1.0).contains(&r.f1)));
    assert_eq!(first.summary.iter().filter(|r| r.best).count(), 2);
}

#[test]
fn failing_cell_is_recorded_not_fatal() {
    let unlabeled = TimeSeries::univariate("u", &small_synthetic(0.01).values.into_vec(), None).unwrap();
    let datasets = vec![Dataset::new("u", vec![unlabeled]), Dataset::new("a", vec![small_synthetic(0.01)])];
    let grid = SweepGrid { architectures: vec![vec![4]], dropout_ps: vec![0.0], seeds: vec![0] };
    let report = run_sweep(&datasets, &grid, &tiny_settings()).unwrap();
    let failed: Vec<_> = report.rows.iter().filter(|r| !r.ok()).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].dataset, "u");
    assert!(failed[0].error.as_ref().unwrap().contains("labels"));
}

#[test]
fn pooled_dataset_cell_scores_every_series() {
    let dataset = Dataset::new("pool", vec![small_synthetic(0.01), small_synthetic(0.02)]);
    let outcome = run_cell(&dataset, &[4], 0.0, 0, &tiny_settings()).unwrap();
    assert_eq!(outcome.labels.len(), 1200);
    assert_eq!(outcome.scores.len(), 1200);
    assert_eq!(outcome.labels.iter().filter(|&&l| l == 1).count(), 6 + 12);
}
