use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

const MIN_FREQUENCY: f64 = 1.0 / 10_000.0;

/// Frequencies for a `dim`-wide embedding: `dim / 2` values spaced
/// geometrically from 1 down to 1/10000.
pub fn frequencies(dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "sinusoidal embedding width must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    if half == 1 {
        return Ok(vec![1.0]);
    }
    let step = MIN_FREQUENCY.ln() / (half - 1) as f64;
    Ok((0..half).map(|k| (step * k as f64).exp()).collect())
}

/// Sinusoidal time embedding. Sines occupy the first half, cosines the second.
pub fn sinusoidal_embed(t: f64, dim: usize) -> Result<Array1<f64>> {
    if !t.is_finite() {
        return Err(Error::Config(format!("embedding time must be finite, got {t}")));
    }
    let freqs = frequencies(dim)?;
    let half = freqs.len();
    let mut out = Array1::zeros(dim);
    for (k, w) in freqs.iter().enumerate() {
        let (s, c) = (t * w).sin_cos();
        out[k] = s;
        out[half + k] = c;
    }
    Ok(out)
}

/// Row-wise embedding of a batch of times.
pub fn embed_batch(ts: &[f64], dim: usize) -> Result<Array2<f64>> {
    let freqs = frequencies(dim)?;
    let half = freqs.len();
    let mut out = Array2::zeros((ts.len(), dim));
    for (i, &t) in ts.iter().enumerate() {
        if !t.is_finite() {
            return Err(Error::Config(format!("embedding time must be finite, got {t}")));
        }
        let mut row = out.row_mut(i);
        for (k, w) in freqs.iter().enumerate() {
            let (s, c) = (t * w).sin_cos();
            row[k] = s;
            row[half + k] = c;
        }
    }
    Ok(out)
}
