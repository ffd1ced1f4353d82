//! Absorbing-state noise schedule.
//!
//! Time is continuous on `[0, 1]`. A token survives to time `t` with
//! probability `alpha(t)`; otherwise it sits in the mask state. Decoding walks
//! the uniform grid `t_i = i / steps` from `i = steps` down to `0`.

use rand::Rng;

use crate::corpus::TokenId;
use crate::error::{Error, Result};

pub trait NoiseSchedule: Send + Sync {
    /// Survival probability; must satisfy `alpha(0) = 1`, `alpha(1) = 0` and
    /// be strictly decreasing.
    fn alpha_unchecked(&self, t: f64) -> f64;

    fn alpha(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.alpha_unchecked(t))
    }

    /// Posterior over `x_s` given `x_t = mask`, as `(weight on x0, weight on mask)`.
    fn posterior_mask_weights(&self, s: f64, t: f64) -> Result<(f64, f64)> {
        check_pair(s, t)?;
        let (a_s, a_t) = (self.alpha_unchecked(s), self.alpha_unchecked(t));
        let denom = 1.0 - a_t;
        Ok(((a_s - a_t) / denom, (1.0 - a_s) / denom))
    }

    /// Probability that a masked token is replaced by the model's prediction
    /// when stepping from `t` down to `s`.
    fn reveal_probability(&self, s: f64, t: f64) -> Result<f64> {
        Ok(self.posterior_mask_weights(s, t)?.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LinearSchedule;

impl NoiseSchedule for LinearSchedule {
    fn alpha_unchecked(&self, t: f64) -> f64 {
        1.0 - t
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange(t))
    }
}

fn check_pair(s: f64, t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&t) && s < t {
        Ok(())
    } else {
        Err(Error::InvalidTimePair { s, t })
    }
}

/// Grid time `i / steps`.
pub fn grid_time(i: usize, steps: usize) -> f64 {
    i as f64 / steps as f64
}

/// Forward corruption: each position is kept with probability `alpha(t)`,
/// otherwise replaced by `mask`. Returns the corrupted sequence and the mask
/// indicator.
pub fn corrupt<S: NoiseSchedule + ?Sized, R: Rng + ?Sized>(
    schedule: &S,
    x0: &[TokenId],
    t: f64,
    mask: TokenId,
    rng: &mut R,
) -> Result<(Vec<TokenId>, Vec<bool>)> {
    let keep = schedule.alpha(t)?;
    let mut xt = Vec::with_capacity(x0.len());
    let mut masked = Vec::with_capacity(x0.len());
    for &tok in x0 {
        let m = rng.random::<f64>() >= keep;
        xt.push(if m { mask } else { tok });
        masked.push(m);
    }
    Ok((xt, masked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alpha_values() {
        let s = LinearSchedule;
        assert_eq!(s.alpha(0.0).unwrap(), 1.0);
        assert_eq!(s.alpha(1.0).unwrap(), 0.0);
        assert_eq!(s.alpha(0.5).unwrap(), 0.5);
        assert!(s.alpha(1.5).is_err());
        assert!(s.alpha(-0.1).is_err());
    }

    #[test]
    fn posterior_examples() {
        let s = LinearSchedule;
        assert_eq!(s.posterior_mask_weights(0.0, 0.37).unwrap(), (1.0, 0.0));
        let (w0, wm) = s.posterior_mask_weights(0.7 - 1e-12, 0.7).unwrap();
        assert!(w0 < 1e-10 && (wm - 1.0).abs() < 1e-10);
        assert_eq!(s.posterior_mask_weights(0.5, 1.0).unwrap(), (0.5, 0.5));
        assert!(s.posterior_mask_weights(0.0, 0.0).is_err());
        assert!(s.posterior_mask_weights(0.6, 0.4).is_err());
    }

    #[test]
    fn reveal_on_grid() {
        let s = LinearSchedule;
        assert_eq!(s.reveal_probability(0.75, 1.0).unwrap(), 0.25);
        for k in 1..=64usize {
            let p = s.reveal_probability(grid_time(k - 1, 64), grid_time(k, 64)).unwrap();
            assert!((p - 1.0 / k as f64).abs() < 1e-12, "k={k}: {p}");
        }
        assert_eq!(s.reveal_probability(0.0, 0.3).unwrap(), 1.0);
    }

    #[test]
    fn posterior_is_a_distribution() {
        let s = LinearSchedule;
        for i in 0..50 {
            for j in (i + 1)..=50 {
                let (a, b) = s.posterior_mask_weights(i as f64 / 50.0, j as f64 / 50.0).unwrap();
                assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
                assert!((a + b - 1.0).abs() < 1e-12);
                assert_eq!(a, s.reveal_probability(i as f64 / 50.0, j as f64 / 50.0).unwrap());
            }
        }
    }

    #[test]
    fn corrupt_endpoints_and_rate() {
        let s = LinearSchedule;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0: Vec<TokenId> = (0..100).map(|i| i % 4).collect();
        let (xt, m) = corrupt(&s, &x0, 0.0, 9, &mut rng).unwrap();
        assert_eq!(xt, x0);
        assert!(m.iter().all(|&b| !b));
        let (xt, m) = corrupt(&s, &x0, 1.0, 9, &mut rng).unwrap();
        assert!(xt.iter().all(|&t| t == 9) && m.iter().all(|&b| b));

        let n = 100_000;
        let x0 = vec![0; n];
        let (_, m) = corrupt(&s, &x0, 0.3, 9, &mut rng).unwrap();
        let frac = m.iter().filter(|&&b| b).count() as f64 / n as f64;
        assert!((frac - 0.3).abs() < 3.0 * (0.3f64 * 0.7 / n as f64).sqrt(), "{frac}");
    }
}
