use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean and standard deviation of the training-set log-gains of non-silent
/// maskers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainStats {
    pub nu: f64,
    pub zeta: f64,
}

impl GainStats {
    /// Population statistics over the non-silent gains; `None` when every
    /// masker is silent.
    pub fn from_gains(gains: impl IntoIterator<Item = (f64, bool)>) -> Option<Self> {
        let values: Vec<f64> = gains
            .into_iter()
            .filter_map(|(g, silent)| (!silent).then_some(g))
            .collect();
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let nu = values.iter().sum::<f64>() / n;
        let zeta = (values.iter().map(|g| (g - nu) * (g - nu)).sum::<f64>() / n).sqrt();
        Some(Self { nu, zeta })
    }
}

/// The log-gain fed to the model: the recorded value for a non-silent
/// masker, a draw from `N(ν, ζ²)` for a silent one. The rng is only touched
/// for silent maskers.
pub fn effective_gain(
    masker_is_silent: bool,
    gamma: f64,
    stats: Option<&GainStats>,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if !masker_is_silent {
        return Ok(gamma);
    }
    let stats = stats.ok_or_else(|| {
        Error::Config("silent masker needs gain statistics from non-silent training samples".into())
    })?;
    if stats.zeta == 0.0 {
        return Ok(stats.nu);
    }
    let normal = Normal::new(stats.nu, stats.zeta)
        .map_err(|e| Error::Config(format!("invalid gain statistics: {e}")))?;
    Ok(normal.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// An rng that panics if used.
    struct Untouchable;

    impl RngCore for Untouchable {
        fn next_u32(&mut self) -> u32 {
            panic!("rng consulted")
        }
        fn next_u64(&mut self) -> u64 {
            panic!("rng consulted")
        }
        fn fill_bytes(&mut self, _: &mut [u8]) {
            panic!("rng consulted")
        }
        fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
            panic!("rng consulted")
        }
    }

    #[test]
    fn non_silent_passes_through_without_rng() {
        assert_eq!(effective_gain(false, -0.3, None, &mut Untouchable).unwrap(), -0.3);
    }

    #[test]
    fn silent_with_zero_spread_is_the_mean() {
        let stats = GainStats { nu: 0.25, zeta: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(effective_gain(true, 9.0, Some(&stats), &mut rng).unwrap(), 0.25);
    }

    #[test]
    fn silent_without_stats_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(effective_gain(true, 0.0, None, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn silent_draws_follow_the_normal() {
        let stats = GainStats { nu: 0.0, zeta: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| effective_gain(true, 0.0, Some(&stats), &mut rng).unwrap())
            .collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let sd = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() <= 0.02, "mean {mean}");
        assert!((0.98..=1.02).contains(&sd), "sd {sd}");
    }

    #[test]
    fn stats_ignore_silent_samples() {
        let s = GainStats::from_gains([(1.0, false), (3.0, false), (100.0, true)]).unwrap();
        assert_eq!(s, GainStats { nu: 2.0, zeta: 1.0 });
        assert!(GainStats::from_gains([(1.0, true)]).is_none());
    }
}
