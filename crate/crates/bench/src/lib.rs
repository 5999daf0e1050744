//! Shared fixtures for the benchmarks.

use tancount_core::optim::{gaussian_init, WeightInit};
use tancount_core::{LcnModel, Result, TanConfig, TanModel, Tensor};

/// Random `height x width x 3` frame with values in roughly `[-1, 1]`.
pub fn frame(width: usize, height: usize, seed: u64) -> Result<Tensor<f32>> {
    gaussian_init(&[height, width, 3], 0.5, seed)
}

/// He-initialized counting network and a default-shaped temporal network.
pub fn models(seed: u64) -> Result<(LcnModel<f32>, TanModel<f32>)> {
    let lcn = LcnModel::with_init(3, &WeightInit::He, seed)?;
    let tan = TanModel::from_config(&TanConfig { seed, ..Default::default() })?;
    Ok((lcn, tan))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_expected_shapes() {
        assert_eq!(frame(40, 30, 0).unwrap().shape(), &[30, 40, 3]);
        let (lcn, tan) = models(1).unwrap();
        assert_eq!(lcn.param_count() + tan.param_count(), 47_584);
    }
}
