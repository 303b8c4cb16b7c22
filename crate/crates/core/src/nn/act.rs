//! Elementwise activations with explicit derivatives.

use ndarray::{Array, Dimension};

pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(z: f64) -> f64 {
    z * sigmoid_scalar(z)
}

/// d/dz of z*sigma(z) = sigma(z) * (1 + z * (1 - sigma(z)))
pub fn silu_grad_scalar(z: f64) -> f64 {
    let s = sigmoid_scalar(z);
    s * (1.0 + z * (1.0 - s))
}

pub fn silu<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(silu_scalar)
}

pub fn silu_backward<D: Dimension>(x: &Array<f64, D>, gy: &Array<f64, D>) -> Array<f64, D> {
    let mut gx = x.mapv(silu_grad_scalar);
    gx *= gy;
    gx
}

pub fn relu<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward<D: Dimension>(x: &Array<f64, D>, gy: &Array<f64, D>) -> Array<f64, D> {
    let mut gx = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    gx *= gy;
    gx
}

pub fn sigmoid<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(sigmoid_scalar)
}

/// Backward through sigmoid given the forward *output* `y`.
pub fn sigmoid_backward_from_output<D: Dimension>(
    y: &Array<f64, D>,
    gy: &Array<f64, D>,
) -> Array<f64, D> {
    let mut gx = y.mapv(|v| v * (1.0 - v));
    gx *= gy;
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_reference_values() {
        assert!((sigmoid_scalar(0.0) - 0.5).abs() < 1e-15);
        assert!((sigmoid_scalar(2.0) - 0.8807970779778823).abs() < 1e-12);
        // silu(1) = 1 * sigma(1)
        assert!((silu_scalar(1.0) - 0.7310585786300049).abs() < 1e-12);
        assert_eq!(silu_scalar(0.0), 0.0);
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        let eps = 1e-6;
        for &z in &[-2.5, -0.3, 0.4, 1.7] {
            let num = (silu_scalar(z + eps) - silu_scalar(z - eps)) / (2.0 * eps);
            assert!((silu_grad_scalar(z) - num).abs() < 1e-8);
        }
    }
}
