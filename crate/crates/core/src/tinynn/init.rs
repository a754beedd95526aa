use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Zero-mean Gaussian draws with variance `2 / fan_in` (He initialisation),
/// from SplitMix64 via Box–Muller.
pub fn he_init(len: usize, fan_in: usize, seed: u64) -> Result<Vec<f64>> {
    if fan_in == 0 {
        return Err(Error::InvalidParameter("fan_in must be >= 1".into()));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let mut rng = SplitMix64::new(seed);
    Ok((0..len).map(|_| rng.standard_normal() * std).collect())
}
