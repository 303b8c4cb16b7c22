//! Activation arrays and small helpers shared by every block.
//!
//! All feature maps are `(batch, channels, height, width)` arrays of `f64`.
//! Double precision keeps finite-difference gradient checks meaningful and
//! makes seeded runs reproducible to the last bit on a given platform.

use ndarray::Array4;

use crate::error::{Error, Result};

/// 4-D activation map `(batch, channels, height, width)`.
pub type FeatureMap = Array4<f64>;

/// Checks that every entry of `x` is finite; names the producing stage on failure.
pub fn ensure_finite(x: &FeatureMap, stage: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "non-finite activation after {stage}"
        )))
    }
}

/// Checks that the map has the expected channel count.
pub fn ensure_channels(x: &FeatureMap, expected: usize, stage: &str) -> Result<()> {
    let got = x.shape()[1];
    if got == expected {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{stage}: expected {expected} channels, got {got}"
        )))
    }
}

/// Maximum absolute difference between two maps of the same shape.
pub fn max_abs_diff(a: &FeatureMap, b: &FeatureMap) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
