//! Fixtures shared by the benchmarks.

use denoise_ad::data::{generate_synthetic, make_windows, normalize, SyntheticSpec};
use denoise_ad::{init_params, DropoutMode, Matrix, ModelConfig, ModelParams, TimeSeries};

pub const WINDOW: usize = 24;

/// A freshly initialized model with the given encoder layers.
pub fn model(units: &[usize], dropout: f64) -> (ModelConfig, ModelParams) {
    let config = ModelConfig::new(1, WINDOW, units.to_vec()).with_dropout(dropout, DropoutMode::Inverted);
    let params = init_params(&config).expect("valid config");
    (config, params)
}

/// Normalized default synthetic series of `length` points.
pub fn series(length: usize) -> TimeSeries {
    let raw = generate_synthetic(&SyntheticSpec { length, ..SyntheticSpec::default() }).expect("valid spec");
    normalize(&raw, None).expect("non-constant series").0
}

pub fn windows(length: usize) -> Vec<Matrix> {
    make_windows(&series(length), WINDOW, 1).expect("long enough").windows
}
