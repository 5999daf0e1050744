//! Adam optimizer and seeded Gaussian initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Per-parameter Adam moments. Moments are kept in 64-bit regardless of the
/// parameter precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn for_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        Self::new(t.len())
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, state: &mut AdamState, lr: f64) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::shape(
            "adam_step",
            format!("param {} / grad {} / state {}", param.len(), grad.len(), state.m.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(&mut state.m).zip(&mut state.v) {
        let g = g.as_f64();
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = T::of(p.as_f64() - lr * m_hat / (v_hat.sqrt() + state.epsilon));
    }
    Ok(())
}

/// How convolution kernels are initialized. Biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "scheme")]
pub enum WeightInit {
    /// N(0, std^2) for every kernel.
    Gaussian { std: f64 },
    /// N(0, 2 / fan_in), fan_in being the taps times input channels.
    He,
}

impl Default for WeightInit {
    fn default() -> Self {
        WeightInit::Gaussian { std: 0.01 }
    }
}

impl WeightInit {
    pub fn std_for(&self, fan_in: usize) -> f64 {
        match *self {
            WeightInit::Gaussian { std } => std,
            WeightInit::He => (2.0 / fan_in.max(1) as f64).sqrt(),
        }
    }
}

impl std::str::FromStr for WeightInit {
    type Err = Error;
    /// `he` or a standard deviation such as `0.01`.
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("he") {
            return Ok(WeightInit::He);
        }
        let std: f64 = s.parse().map_err(|_| Error::invalid(format!("init must be 'he' or a std, got {s:?}")))?;
        Ok(WeightInit::Gaussian { std })
    }
}

/// Zero-mean Gaussian tensor with standard deviation `std`, drawn from a
/// ChaCha8 stream seeded with `seed`.
pub fn gaussian_init<T: Scalar>(shape: &[usize], std: f64, seed: u64) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian_from(shape, std, &mut rng)
}

pub(crate) fn gaussian_from<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::invalid(format!("initialization std must be positive, got {std}")));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::of(normal.sample(rng))).collect())
}
