//! Chi-square tests used by the audits and the acceptance checks.

use std::collections::BTreeMap;

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::factorial::binomial;

use crate::error::{Error, Result};

pub const ALPHA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// `p_value >= ALPHA`: the null hypothesis is not rejected.
    pub pass: bool,
}

impl ChiSquare {
    fn from_statistic(statistic: f64, dof: usize) -> Self {
        let p_value = if dof == 0 {
            1.0
        } else {
            ChiSquared::new(dof as f64).expect("positive dof").sf(statistic)
        };
        Self { statistic, dof, p_value, pass: p_value >= ALPHA }
    }
}

/// Counts of `samples` (each in `[0, range)`) in `buckets` equal buckets.
pub fn bucket_counts(samples: &[u64], range: u64, buckets: usize) -> Vec<u64> {
    let mut counts = vec![0u64; buckets];
    for &s in samples {
        let b = (s as u128 * buckets as u128 / range as u128) as usize;
        counts[b.min(buckets - 1)] += 1;
    }
    counts
}

/// Goodness of fit of `samples` to the uniform distribution on `[0, range)`.
pub fn chi_square_uniform(samples: &[u64], range: u64, buckets: usize) -> Result<ChiSquare> {
    if samples.len() < 5 * buckets {
        return Err(Error::InsufficientSamples { needed: 5 * buckets, got: samples.len() });
    }
    let counts = bucket_counts(samples, range, buckets);
    // bucket widths differ by at most one slot when range is not a multiple
    let n = samples.len() as f64;
    let stat = counts
        .iter()
        .enumerate()
        .map(|(b, &o)| {
            let lo = (b as u128 * range as u128).div_ceil(buckets as u128);
            let hi = ((b as u128 + 1) * range as u128).div_ceil(buckets as u128);
            let e = n * (hi - lo) as f64 / range as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    Ok(ChiSquare::from_statistic(stat, buckets - 1))
}

/// Two-sample homogeneity test: were `a` and `b` drawn from the same
/// distribution over `[0, range)`? Buckets empty in both samples are dropped.
pub fn chi_square_two_sample(a: &[u64], b: &[u64], range: u64, buckets: usize) -> Result<ChiSquare> {
    let need = 5 * buckets;
    if a.len() < need || b.len() < need {
        return Err(Error::InsufficientSamples { needed: need, got: a.len().min(b.len()) });
    }
    let ca = bucket_counts(a, range, buckets);
    let cb = bucket_counts(b, range, buckets);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let total = na + nb;
    let mut stat = 0.0;
    let mut used = 0;
    for (&x, &y) in ca.iter().zip(&cb) {
        let col = (x + y) as f64;
        if col == 0.0 {
            continue;
        }
        used += 1;
        let ea = na * col / total;
        let eb = nb * col / total;
        stat += (x as f64 - ea).powi(2) / ea + (y as f64 - eb).powi(2) / eb;
    }
    Ok(ChiSquare::from_statistic(stat, used.max(1) - 1))
}

/// Fit of an attempts histogram (values >= 1) to geometric(p). Expected
/// counts below 5 are pooled into a final tail bin.
pub fn chi_square_geometric(hist: &BTreeMap<u32, u64>, p: f64) -> Result<ChiSquare> {
    let n: u64 = hist.values().sum();
    if n < 25 {
        return Err(Error::InsufficientSamples { needed: 25, got: n as usize });
    }
    let n = n as f64;
    let pmf = |k: u32| (1.0 - p).powi(k as i32 - 1) * p;
    let mut stat = 0.0;
    let mut bins = 0;
    let mut k = 1u32;
    let mut seen = 0u64;
    loop {
        let tail_expected = n * (1.0 - p).powi(k as i32 - 1);
        let e = n * pmf(k);
        // stop once the rest of the distribution is one well-filled bin
        if n * (1.0 - p).powi(k as i32) < 5.0 || e < 5.0 {
            let o = n - seen as f64;
            stat += (o - tail_expected).powi(2) / tail_expected;
            bins += 1;
            break;
        }
        let o = hist.get(&k).copied().unwrap_or(0);
        seen += o;
        stat += (o as f64 - e).powi(2) / e;
        bins += 1;
        k += 1;
    }
    Ok(ChiSquare::from_statistic(stat, bins - 1))
}

/// Probability that evicting `d + 1` blocks takes exactly `m` attempts in
/// total when each attempt succeeds with probability 1/2: the last attempt
/// succeeds and `d` of the first `m - 1` do.
pub fn total_attempts_pmf(m: u64, d: u64) -> f64 {
    if m < d + 1 {
        return 0.0;
    }
    binomial(m - 1, d) / 2f64.powi(m as i32)
}

/// Mean attempts per eviction at utilization `u` (geometric with success
/// probability `1 - u`).
pub fn expected_attempts(u: f64) -> f64 {
    1.0 / (1.0 - u)
}

/// Mean attempts per block for filling slots one at a time from empty up to
/// utilization `u`: the average of `1 / (1 - x)` over `x` in `[0, u]`.
pub fn expected_init_attempts(u: f64) -> f64 {
    if u == 0.0 {
        1.0
    } else {
        -(1.0 - u).ln() / u
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn uniform_prng_passes() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let s: Vec<u64> = (0..100_000).map(|_| rng.random_range(0..1 << 20)).collect();
        assert!(chi_square_uniform(&s, 1 << 20, 64).unwrap().pass);
    }

    #[test]
    fn constant_fails_and_small_samples_rejected() {
        let s = vec![7u64; 1000];
        assert!(!chi_square_uniform(&s, 1024, 64).unwrap().pass);
        assert_eq!(
            chi_square_uniform(&s[..100], 1024, 64),
            Err(Error::InsufficientSamples { needed: 320, got: 100 })
        );
    }

    #[test]
    fn known_statistic() {
        // 4 buckets over [0,4), observed 10/10/10/30 against 15 each
        let mut s = vec![0u64; 10];
        s.extend([1u64; 10]);
        s.extend([2u64; 10]);
        s.extend([3u64; 30]);
        let c = chi_square_uniform(&s, 4, 4).unwrap();
        assert!((c.statistic - 20.0).abs() < 1e-9);
        assert_eq!(c.dof, 3);
        // upper tail of chi2(3) at 20 is about 1.7e-4
        assert!(c.p_value < 2e-4 && c.p_value > 1.5e-4, "{}", c.p_value);
    }

    #[test]
    fn two_sample_same_vs_shifted() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let a: Vec<u64> = (0..20_000).map(|_| rng.random_range(0..1000)).collect();
        let b: Vec<u64> = (0..20_000).map(|_| rng.random_range(0..1000)).collect();
        assert!(chi_square_two_sample(&a, &b, 1000, 64).unwrap().pass);
        let c: Vec<u64> = (0..20_000).map(|_| rng.random_range(0..500)).collect();
        assert!(!chi_square_two_sample(&a, &c, 1000, 64).unwrap().pass);
    }

    #[test]
    fn geometric_fit() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut hist = BTreeMap::new();
        for _ in 0..10_000 {
            let mut k = 1;
            while !rng.random_bool(0.5) {
                k += 1;
            }
            *hist.entry(k).or_insert(0u64) += 1;
        }
        assert!(chi_square_geometric(&hist, 0.5).unwrap().pass);
        assert!(!chi_square_geometric(&hist, 0.7).unwrap().pass);
    }

    #[test]
    fn attempts_formula_matches_coin_flips() {
        assert_eq!(total_attempts_pmf(5, 4), 1.0 / 32.0);
        assert_eq!(total_attempts_pmf(4, 4), 0.0);
        assert!((total_attempts_pmf(6, 4) - 5.0 / 64.0).abs() < 1e-15);
        let total: f64 = (5..200).map(|m| total_attempts_pmf(m, 4)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        // independent oracle: fair coin flips until the fifth head
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let trials = 100_000;
        let mut hits = 0;
        for _ in 0..trials {
            let (mut heads, mut m) = (0, 0);
            while heads < 5 {
                m += 1;
                heads += rng.random_bool(0.5) as u32;
            }
            hits += (m == 5) as u32;
        }
        let f = hits as f64 / trials as f64;
        let sigma = (1.0 / 32.0 * (31.0 / 32.0) / trials as f64).sqrt();
        assert!((f - 1.0 / 32.0).abs() < 3.0 * sigma, "{f}");
    }

    #[test]
    fn expected_attempt_oracles() {
        assert!((expected_attempts(0.5) - 2.0).abs() < 1e-12);
        assert!((expected_attempts(0.25) - 4.0 / 3.0).abs() < 1e-12);
        assert!((expected_attempts(0.125) - 8.0 / 7.0).abs() < 1e-12);
        assert!((expected_init_attempts(0.5) - 2f64.ln() * 2.0).abs() < 1e-12);
        // fill simulation oracle
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let p = 1 << 14;
        let mut occ = vec![false; p];
        let mut tries = 0u64;
        for _ in 0..p / 2 {
            loop {
                tries += 1;
                let s = rng.random_range(0..p);
                if !occ[s] {
                    occ[s] = true;
                    break;
                }
            }
        }
        let mean = tries as f64 / (p / 2) as f64;
        assert!((mean - expected_init_attempts(0.5)).abs() < 0.03, "{mean}");
    }
}
