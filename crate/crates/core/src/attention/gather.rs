//! Dilated tap aggregation: a fixed-weight, dilation-strided gather that the
//! windowed attention must reproduce when its weights are frozen.

use ndarray::{Array4, Axis};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Gathers `k` taps along one spatial axis:
/// `out(p) = sum_i w[i] * x(p + (i - (k-1)/2) * rate)`, zero outside bounds.
///
/// `axis` is 2 for height, 3 for width.
pub fn dilated_gather_axis(
    x: &FeatureMap,
    rate: usize,
    weights: &[f64],
    axis: Axis,
) -> Result<FeatureMap> {
    let k = weights.len();
    if k % 2 == 0 {
        return Err(Error::Config(format!(
            "dilated gather needs an odd tap count, got {k}"
        )));
    }
    if rate == 0 {
        return Err(Error::Config("dilation rate must be >= 1".into()));
    }
    if axis.0 != 2 && axis.0 != 3 {
        return Err(Error::Config("gather axis must be a spatial axis (2 or 3)".into()));
    }
    let half = (k - 1) / 2;
    let dims = x.raw_dim();
    let len = dims[axis.0];
    let mut out = Array4::<f64>::zeros(dims);
    for (idx, v) in out.indexed_iter_mut() {
        let pos = [idx.0, idx.1, idx.2, idx.3];
        let p = pos[axis.0] as isize;
        let mut acc = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            let q = p + (i as isize - half as isize) * rate as isize;
            if q < 0 || q >= len as isize {
                continue;
            }
            let mut src = pos;
            src[axis.0] = q as usize;
            acc += w * x[[src[0], src[1], src[2], src[3]]];
        }
        *v = acc;
    }
    Ok(out)
}

/// Separable 2-D gather: the 1-D kernel is applied along height, then width,
/// which is equivalent to a single pass with the outer-product tap weights.
pub fn dilated_gather(x: &FeatureMap, rate: usize, weights: &[f64]) -> Result<FeatureMap> {
    let gy = dilated_gather_axis(x, rate, weights, Axis(2))?;
    dilated_gather_axis(&gy, rate, weights, Axis(3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn one_dimensional_hand_case() {
        // x = [1,2,3,4,5], k = 3, w = [1,1,1], rate = 2, zero padding:
        // taps at -2/0/+2 give [4, 6, 9, 6, 8].
        let x = Array4::from_shape_vec((1, 1, 1, 5), vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let y = dilated_gather_axis(&x, 2, &[1.0, 1.0, 1.0], Axis(3)).unwrap();
        let expect = [4.0, 6.0, 9.0, 6.0, 8.0];
        for (j, &e) in expect.iter().enumerate() {
            assert_eq!(y[[0, 0, 0, j]], e, "position {j}");
        }
    }

    #[test]
    fn one_hot_center_is_identity_for_all_rates() {
        let x = Array4::from_shape_fn((1, 2, 7, 7), |(_, c, i, j)| {
            (c as f64 + 1.0) * (i as f64) - 0.37 * (j as f64)
        });
        for rate in [1usize, 2, 4] {
            let y = dilated_gather(&x, rate, &[0.0, 1.0, 0.0]).unwrap();
            assert_eq!(y, x, "rate {rate}");
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let x = Array4::<f64>::zeros((2, 3, 5, 5));
        let y = dilated_gather(&x, 4, &[0.3, 0.5, 0.2]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn even_tap_count_rejected() {
        let x = Array4::<f64>::zeros((1, 1, 3, 3));
        assert!(dilated_gather(&x, 1, &[0.5, 0.5]).is_err());
    }
}
