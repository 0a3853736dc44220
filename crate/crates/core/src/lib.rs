//! LSTM encoder-decoder anomaly detection with dropout regularization.
//!
//! The building blocks are a small dense [`tensor::Matrix`], an LSTM
//! autoencoder with hand-written backpropagation through time, an Adam
//! training loop with early stopping, and reconstruction-error scoring with
//! a best-F1 threshold sweep.

pub mod data;
pub mod detection;
pub mod dropout;
pub mod error;
pub mod gradcheck;
pub mod lstm;
pub mod persist;
pub mod report;
pub mod sweep;
pub mod tensor;
pub mod training;

pub use data::{generate_synthetic, load_csv, make_windows, normalize, NormParams, SyntheticSpec, TimeSeries, WindowSet};
pub use detection::{evaluate_at, point_scores, sweep_threshold, EvalReport, ScoreSeries};
pub use dropout::DropoutMode;
pub use error::{Error, ErrorClass, Result};
pub use lstm::{forward, init_params, reconstruct, ModelConfig, ModelParams};
pub use persist::SavedModel;
pub use report::{correlation_report, CorrelationReport, DatasetStats};
pub use sweep::{run_sweep, Dataset, SweepGrid, SweepReport, SweepRow, SweepSettings, SummaryRow};
pub use tensor::{Matrix, Rng};
pub use training::{fit, TrainConfig, TrainHistory};
