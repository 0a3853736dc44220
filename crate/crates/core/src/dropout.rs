use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

/// How kept activations are scaled while training.
///
/// `Inverted` divides survivors by `1 - p` so inference needs no rescaling.
/// `Plain` passes survivors through unchanged, exactly as the zero-or-pass rule reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutMode {
    #[default]
    Inverted,
    Plain,
}

impl DropoutMode {
    /// Divisor applied to kept activations during training.
    pub fn keep_divisor(self, p: f64) -> f64 {
        match self {
            DropoutMode::Inverted => 1.0 - p,
            DropoutMode::Plain => 1.0,
        }
    }
}

impl std::str::FromStr for DropoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverted" => Ok(DropoutMode::Inverted),
            "plain" => Ok(DropoutMode::Plain),
            other => Err(Error::Config(format!("unknown dropout mode `{other}` (expected inverted|plain)"))),
        }
    }
}

impl std::fmt::Display for DropoutMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DropoutMode::Inverted => "inverted",
            DropoutMode::Plain => "plain",
        })
    }
}

pub fn check_probability(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("dropout probability must be in [0, 1), got {p}")))
    }
}

/// Draws a keep-mask of `len` entries: 0.0 where `r <= p`, 1.0 otherwise.
/// `p == 0` consumes no randomness and keeps everything.
pub(crate) fn draw_mask(len: usize, p: f64, rng: &mut Rng) -> Vec<f64> {
    if p == 0.0 {
        return vec![1.0; len];
    }
    (0..len).map(|_| if rng.uniform() <= p { 0.0 } else { 1.0 }).collect()
}

/// Element-wise dropout. Returns the output and the keep-mask (1 = kept).
pub fn dropout_apply(
    x: &Matrix,
    p: f64,
    mode: DropoutMode,
    training: bool,
    rng: &mut Rng,
) -> Result<(Matrix, Matrix)> {
    check_probability(p)?;
    let ones = Matrix::filled(x.rows(), x.cols(), 1.0);
    if !training || p == 0.0 {
        return Ok((x.clone(), ones));
    }
    let divisor = mode.keep_divisor(p);
    let mask = Matrix::new(x.rows(), x.cols(), draw_mask(x.as_slice().len(), p, rng))?;
    let y = x.zip_map(&mask, "dropout_apply", |v, m| if m == 0.0 { 0.0 } else { v / divisor })?;
    Ok((y, mask))
}
