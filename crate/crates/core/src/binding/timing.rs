//! RTM response-time models.

use rand::{Rng, RngCore};
use thiserror::Error;

/// Challenge size on the wire, in bits.
pub const CHALLENGE_BITS: u32 = 112;
/// Response size on the wire, in bits.
pub const RESPONSE_BITS: u32 = 304;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum TimingError {
    #[error("empirical model has no samples")]
    Empty,
    #[error("empirical samples must be positive")]
    NonPositive,
    #[error("invalid model parameters: {0}")]
    Parameters(&'static str),
}

#[derive(Clone, Debug, PartialEq)]
pub enum TimingKind {
    Constant(u64),
    /// Uniform draw from measured samples.
    Empirical(Vec<u64>),
    /// `min + (max − min)·u^shape` for uniform `u`.
    Parametric {
        min: u64,
        max: u64,
        shape: f64,
    },
    /// `fast_us` with probability `p`, otherwise `slow_us`.
    Bernoulli {
        p: f64,
        fast_us: u64,
        slow_us: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingModel {
    pub kind: TimingKind,
    /// Extra one-way relay delay added to every response.
    pub relay_delay_us: u64,
    pub challenge_bits: u32,
    pub response_bits: u32,
}

impl TimingModel {
    pub fn new(kind: TimingKind) -> Result<Self, TimingError> {
        match &kind {
            TimingKind::Empirical(s) if s.is_empty() => return Err(TimingError::Empty),
            TimingKind::Empirical(s) if s.contains(&0) => return Err(TimingError::NonPositive),
            TimingKind::Parametric { min, max, shape }
                if min > max || shape.is_nan() || *shape <= 0.0 =>
            {
                return Err(TimingError::Parameters("need min ≤ max and shape > 0"))
            }
            TimingKind::Bernoulli { p, .. } if !(0.0..=1.0).contains(p) => {
                return Err(TimingError::Parameters("p outside [0, 1]"))
            }
            _ => {}
        }
        Ok(TimingModel {
            kind,
            relay_delay_us: 0,
            challenge_bits: CHALLENGE_BITS,
            response_bits: RESPONSE_BITS,
        })
    }

    pub fn constant(us: u64) -> Self {
        Self::new(TimingKind::Constant(us)).expect("constant model is always valid")
    }

    pub fn with_relay(mut self, delay_us: u64) -> Self {
        self.relay_delay_us = delay_us;
        self
    }

    /// Honest response latency, without relay delay.
    pub fn draw_honest<R: RngCore>(&self, rng: &mut R) -> u64 {
        match &self.kind {
            TimingKind::Constant(us) => *us,
            TimingKind::Empirical(samples) => samples[rng.gen_range(0..samples.len())],
            TimingKind::Parametric { min, max, shape } => {
                let u: f64 = rng.gen();
                min + ((max - min) as f64 * u.powf(*shape)).round() as u64
            }
            TimingKind::Bernoulli {
                p,
                fast_us,
                slow_us,
            } => {
                if rng.gen_bool(*p) {
                    *fast_us
                } else {
                    *slow_us
                }
            }
        }
    }

    /// Observed latency: honest draw plus relay delay.
    pub fn draw<R: RngCore>(&self, rng: &mut R) -> u64 {
        self.draw_honest(rng) + self.relay_delay_us
    }

    /// Smallest latency the honest model can produce.
    pub fn min_latency(&self) -> u64 {
        match &self.kind {
            TimingKind::Constant(us) => *us,
            TimingKind::Empirical(s) => *s.iter().min().expect("non-empty"),
            TimingKind::Parametric { min, .. } => *min,
            TimingKind::Bernoulli {
                fast_us, slow_us, ..
            } => *fast_us.min(slow_us),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binding::stats::{empirical_cdf, synthetic_samples};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn constant_is_constant() {
        let m = TimingModel::constant(600);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert!((0..100).all(|_| m.draw(&mut rng) == 600));
        assert_eq!(m.clone().with_relay(200).draw(&mut rng), 800);
    }

    #[test]
    fn empirical_stays_in_support() {
        let m = TimingModel::new(TimingKind::Empirical(synthetic_samples())).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let draws: Vec<u64> = (0..10_000).map(|_| m.draw(&mut rng)).collect();
        assert!(draws.iter().all(|&d| (563..=894).contains(&d)));
        let cdf = empirical_cdf(&draws, 721.0).unwrap();
        assert!((cdf - 0.83).abs() < 0.03, "{cdf}");
    }

    #[test]
    fn parametric_bounds() {
        let m = TimingModel::new(TimingKind::Parametric {
            min: 563,
            max: 894,
            shape: 2.0,
        })
        .unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        assert!((0..1000).all(|_| (563..=894).contains(&m.draw(&mut rng))));
        assert_eq!(m.min_latency(), 563);
    }

    #[test]
    fn invalid_models() {
        assert_eq!(
            TimingModel::new(TimingKind::Empirical(vec![])),
            Err(TimingError::Empty)
        );
        assert!(TimingModel::new(TimingKind::Empirical(vec![0, 5])).is_err());
        assert!(TimingModel::new(TimingKind::Bernoulli {
            p: 1.2,
            fast_us: 1,
            slow_us: 2
        })
        .is_err());
    }
}
