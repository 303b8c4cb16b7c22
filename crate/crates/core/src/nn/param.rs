use ndarray::{ArrayD, IxDyn};

/// A learnable array together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Immutable named view over a set of parameters.
pub type NamedParams<'a> = Vec<(String, &'a Param)>;
/// Mutable named view over a set of parameters; ordering is deterministic
/// (declaration order), which fixes optimizer-state alignment and checkpoints.
pub type NamedParamsMut<'a> = Vec<(String, &'a mut Param)>;

/// Prepends `prefix.` to every name in `items`.
pub fn prefixed<T>(prefix: &str, items: Vec<(String, T)>) -> Vec<(String, T)> {
    items
        .into_iter()
        .map(|(n, p)| (format!("{prefix}.{n}"), p))
        .collect()
}
