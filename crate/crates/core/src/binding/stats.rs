//! Acceptance and relay-attack statistics for distance bounding.

use thiserror::Error;

use super::DistanceBoundingConfig;

#[derive(Debug, Error, PartialEq, Clone)]
pub enum StatsError {
    #[error("required successes {k} exceeds rounds {n}")]
    KOutOfRange { n: u32, k: u32 },
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("sample set is empty")]
    EmptySamples,
    #[error("slack must be positive, got {0} µs")]
    NonPositiveSlack(f64),
}

/// Synthetic RTM response-time set: 30 values on [563, 894] µs, 25 of them
/// at or below 721 µs. Stands in for measured data, which is not available.
pub fn synthetic_samples() -> Vec<u64> {
    vec![
        563, 581, 590, 598, 606, 613, 619, 625, 631, 637, 642, 647, 652, 657, 662, 667, 672, 678,
        684, 690, 696, 702, 708, 714, 719, 748, 776, 809, 851, 894,
    ]
}

/// `Pr[X ≥ k]` for `X ~ Binomial(n, p)`, summed term by term.
pub fn binom_tail(n: u32, k: u32, p: f64) -> Result<f64, StatsError> {
    if k > n {
        return Err(StatsError::KOutOfRange { n, k });
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(StatsError::Probability(p));
    }
    if k == 0 {
        return Ok(1.0);
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return Ok(1.0);
    }
    let (ln_p, ln_q) = (p.ln(), (1.0 - p).ln());
    let mut ln_choose = 0.0f64;
    let mut sum = 0.0f64;
    for i in 1..=n {
        ln_choose += ((n - i + 1) as f64).ln() - (i as f64).ln();
        if i >= k {
            sum += (ln_choose + i as f64 * ln_p + (n - i) as f64 * ln_q).exp();
        }
    }
    Ok(sum.min(1.0))
}

/// Fraction of samples `≤ t`.
pub fn empirical_cdf(samples: &[u64], t: f64) -> Result<f64, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::EmptySamples);
    }
    let below = samples.iter().filter(|&&s| s as f64 <= t).count();
    Ok(below as f64 / samples.len() as f64)
}

/// Bandwidth in bits per second needed to move `relayed_bits` within
/// `slack_us` microseconds.
pub fn min_relay_bandwidth(relayed_bits: f64, slack_us: f64) -> Result<f64, StatsError> {
    if slack_us.is_nan() || slack_us <= 0.0 {
        return Err(StatsError::NonPositiveSlack(slack_us));
    }
    Ok(relayed_bits / (slack_us * 1e-6))
}

/// Probability that a relaying attacker adding `relay_delay_us` still binds.
pub fn attacker_success(
    relay_delay_us: f64,
    samples: &[u64],
    cfg: &DistanceBoundingConfig,
) -> Result<f64, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::EmptySamples);
    }
    let threshold = cfg.threshold_us as f64;
    if relay_delay_us >= threshold {
        return Ok(0.0);
    }
    let per_round = empirical_cdf(samples, threshold - relay_delay_us)?;
    binom_tail(cfg.rounds, cfg.required_successes(), per_round)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn enumerate(n: u32, k: u32, p: f64) -> f64 {
        (0u32..1 << n)
            .filter(|m| m.count_ones() >= k)
            .map(|m| p.powi(m.count_ones() as i32) * (1.0 - p).powi((n - m.count_ones()) as i32))
            .sum()
    }

    #[test]
    fn small_cases() {
        assert_eq!(binom_tail(2, 2, 0.5).unwrap(), 0.25);
        assert_eq!(binom_tail(7, 0, 0.3).unwrap(), 1.0);
        assert!((binom_tail(3, 1, 0.5).unwrap() - 0.875).abs() < 1e-15);
    }

    #[test]
    fn thirty_rounds_fifteen_required() {
        assert!((binom_tail(30, 15, 0.84).unwrap() - 0.99999724047).abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert_eq!(
            binom_tail(3, 4, 0.5),
            Err(StatsError::KOutOfRange { n: 3, k: 4 })
        );
        assert!(binom_tail(3, 1, 1.5).is_err());
        assert!(binom_tail(3, 1, f64::NAN).is_err());
        assert_eq!(empirical_cdf(&[], 1.0), Err(StatsError::EmptySamples));
        assert!(min_relay_bandwidth(880.0, 0.0).is_err());
    }

    #[test]
    fn synthetic_set_shape() {
        let s = synthetic_samples();
        assert_eq!(s.len(), 30);
        assert_eq!(*s.iter().min().unwrap(), 563);
        assert_eq!(*s.iter().max().unwrap(), 894);
        assert!((empirical_cdf(&s, 721.0).unwrap() - 25.0 / 30.0).abs() < 1e-15);
        assert_eq!(empirical_cdf(&s, 894.0).unwrap(), 1.0);
        assert_eq!(empirical_cdf(&s, 562.0).unwrap(), 0.0);
    }

    #[test]
    fn bandwidth_figures() {
        let bw = min_relay_bandwidth(880.0, 158.0).unwrap();
        assert!((bw - 5.5696e6).abs() < 1e3);
        let bw = min_relay_bandwidth(416.0, 158.0).unwrap();
        assert!((bw - 2.6329e6).abs() < 1e3);
        assert_eq!(
            min_relay_bandwidth(880.0, 316.0).unwrap() * 2.0,
            min_relay_bandwidth(880.0, 158.0).unwrap()
        );
    }

    #[test]
    fn attacker_cases() {
        let cfg = DistanceBoundingConfig::default();
        let s = synthetic_samples();
        assert_eq!(attacker_success(721.0, &s, &cfg).unwrap(), 0.0);
        let honest = binom_tail(30, 14, 25.0 / 30.0).unwrap();
        assert_eq!(attacker_success(0.0, &s, &cfg).unwrap(), honest);
        let relayed = attacker_success(158.0, &s, &cfg).unwrap();
        assert_eq!(relayed, binom_tail(30, 14, 1.0 / 30.0).unwrap());
        assert_eq!(attacker_success(159.0, &s, &cfg).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn matches_enumeration(n in 1u32..=10, k_frac in 0.0f64..=1.0, p in 0.0f64..=1.0) {
            let k = (k_frac * n as f64).round() as u32;
            let got = binom_tail(n, k, p).unwrap();
            prop_assert!((got - enumerate(n, k, p)).abs() < 1e-12);
        }

        #[test]
        fn monotone(n in 1u32..=60, k in 0u32..=60, p in 0.0f64..=1.0, dp in 0.0f64..=0.5) {
            let k = k.min(n);
            let p2 = (p + dp).min(1.0);
            let a = binom_tail(n, k, p).unwrap();
            prop_assert!(binom_tail(n, k, p2).unwrap() + 1e-12 >= a);
            if k < n {
                prop_assert!(binom_tail(n, k + 1, p).unwrap() <= a + 1e-12);
            }
        }
    }
}
