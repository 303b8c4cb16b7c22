use ndarray::Array2;

use super::init::{kaiming_uniform, InitRng};
use super::param::{prefixed, NamedParams, NamedParamsMut, Param};

/// Fully connected layer on `(batch, features)` matrices, weight `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut InitRng) -> Self {
        Self {
            weight: Param::new(kaiming_uniform(rng, &[out_features, in_features], in_features)),
            bias: Param::zeros(&[out_features]),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut y = x.dot(&w.t());
        for mut row in y.rows_mut() {
            for (o, v) in row.iter_mut().enumerate() {
                *v += self.bias.value[[o]];
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        {
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            gw += &gy.t().dot(x);
        }
        for (o, col) in gy.columns().into_iter().enumerate() {
            self.bias.grad[[o]] += col.sum();
        }
        gy.dot(&w)
    }

    pub fn named(&self, prefix: &str) -> NamedParams<'_> {
        prefixed(prefix, vec![("w".into(), &self.weight), ("b".into(), &self.bias)])
    }

    pub fn named_mut(&mut self, prefix: &str) -> NamedParamsMut<'_> {
        prefixed(
            prefix,
            vec![("w".into(), &mut self.weight), ("b".into(), &mut self.bias)],
        )
    }
}
