//! Exact integer combinatorics for partition spaces.
//!
//! Everything here is arbitrary precision: the number of set partitions of
//! even a single PCR plate's worth of cells (96) is around 6.7e109, far past
//! any fixed-width integer. Counts are exact; probabilities derived from them
//! are converted to `f64` at the last moment.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use std::collections::BTreeMap;
use std::sync::{OnceLock, RwLock};

/// Arbitrary-precision non-negative count.
pub type BigCount = BigUint;

/// Triangle of Stirling numbers of the second kind, grown row by row.
///
/// Row `n` holds `S(n,k)` for `k = 0..=n` under the recurrence
/// `S(n,k) = k*S(n-1,k) + S(n-1,k-1)` with `S(0,0) = 1`.
struct StirlingTriangle {
    rows: Vec<Vec<BigUint>>,
}

impl StirlingTriangle {
    fn new() -> Self {
        StirlingTriangle {
            rows: vec![vec![BigUint::one()]],
        }
    }

    fn grow_to(&mut self, n: usize) {
        while self.rows.len() <= n {
            let prev = self.rows.last().unwrap();
            let row_n = self.rows.len();
            let mut row = Vec::with_capacity(row_n + 1);
            row.push(BigUint::zero());
            for k in 1..=row_n {
                let mut v = prev.get(k).cloned().unwrap_or_else(BigUint::zero);
                v *= k;
                v += &prev[k - 1];
                row.push(v);
            }
            self.rows.push(row);
        }
    }

    fn get(&self, n: usize, k: usize) -> BigUint {
        if k > n {
            return BigUint::zero();
        }
        self.rows[n][k].clone()
    }

    fn bell(&self, n: usize) -> BigUint {
        self.rows[n].iter().sum()
    }
}

static TRIANGLE: OnceLock<RwLock<StirlingTriangle>> = OnceLock::new();

fn with_triangle<T>(n: usize, f: impl FnOnce(&StirlingTriangle) -> T) -> T {
    let lock = TRIANGLE.get_or_init(|| RwLock::new(StirlingTriangle::new()));
    {
        let guard = lock.read().unwrap();
        if guard.rows.len() > n {
            return f(&guard);
        }
    }
    {
        let mut guard = lock.write().unwrap();
        guard.grow_to(n);
    }
    let guard = lock.read().unwrap();
    f(&guard)
}

/// Stirling number of the second kind `S(n,k)`: partitions of `n` objects
/// into exactly `k` non-empty clusters.
pub fn stirling2(n: usize, k: usize) -> BigCount {
    with_triangle(n, |t| t.get(n, k))
}

/// Bell number `B(n) = sum_k S(n,k)`: all partitions of `n` objects.
pub fn bell(n: usize) -> BigCount {
    with_triangle(n, |t| t.bell(n))
}

/// Binomial coefficient `C(n,k)`.
pub fn binomial(n: usize, k: usize) -> BigCount {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc *= n - i;
        acc /= i + 1;
    }
    acc
}

/// Falling factorial `k (k-1) ... (k-j+1)`; equals `C(k,j) * j!`.
pub fn falling_factorial(k: usize, j: usize) -> BigCount {
    if j > k {
        return BigUint::zero();
    }
    let mut acc = BigUint::one();
    for i in 0..j {
        acc *= k - i;
    }
    acc
}

/// Number of partially labelled partitions of `n` objects with `m` distinct
/// labels available: `P[n,m] = sum_j sum_k C(m,j) C(k,j) j! S(n,k)`.
///
/// A PLP is a set partition in which each cluster optionally carries one of
/// the `m` labels and no label is used twice. `P[n,0]` is the Bell number.
pub fn plp_count(n: usize, m: usize) -> BigCount {
    assert!(n >= 1, "plp_count requires at least one object");
    with_triangle(n, |t| {
        let mut total = BigUint::zero();
        for k in 1..=n {
            let s = t.get(n, k);
            if s.is_zero() {
                continue;
            }
            // sum over j of C(m,j) * k(k-1)...(k-j+1)
            let mut label_ways = BigUint::zero();
            for j in 0..=m.min(k) {
                label_ways += binomial(m, j) * falling_factorial(k, j);
            }
            total += s * label_ways;
        }
        total
    })
}

/// Prior over the number of contributors implied by a uniform prior over
/// partitions: `P(k) = S(n,k) / B(n)` for `k` in `1..=n`.
pub fn noc_prior_uniform_partitions(n: usize) -> BTreeMap<usize, f64> {
    assert!(n >= 1);
    with_triangle(n, |t| {
        let b = t.bell(n);
        (1..=n)
            .map(|k| (k, big_ratio_to_f64(&t.get(n, k), &b)))
            .collect()
    })
}

/// `num/den` as `f64`, correct even when both exceed the `f64` range.
pub fn big_ratio_to_f64(num: &BigUint, den: &BigUint) -> f64 {
    assert!(!den.is_zero());
    if num.is_zero() {
        return 0.0;
    }
    let shift_num = num.bits().saturating_sub(64);
    let shift_den = den.bits().saturating_sub(64);
    let top = (num >> shift_num).to_f64().unwrap();
    let bot = (den >> shift_den).to_f64().unwrap();
    (top / bot) * 2f64.powi(shift_num as i32 - shift_den as i32)
}

/// Natural log of `num/den` for positive big integers.
pub fn ln_big_ratio(num: &BigUint, den: &BigUint) -> f64 {
    assert!(!num.is_zero() && !den.is_zero());
    ln_big(num) - ln_big(den)
}

fn ln_big(x: &BigUint) -> f64 {
    let shift = x.bits().saturating_sub(64);
    let top = (x >> shift).to_f64().unwrap();
    top.ln() + shift as f64 * std::f64::consts::LN_2
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stirling_small_values() {
        assert_eq!(stirling2(0, 0), BigUint::one());
        assert_eq!(stirling2(1, 0), BigUint::zero());
        assert_eq!(stirling2(3, 2), BigUint::from(3u32));
        assert_eq!(stirling2(10, 4), BigUint::from(34105u32));
        assert_eq!(stirling2(15, 6), BigUint::from(420_693_273u64));
        for n in 1..=40 {
            assert_eq!(stirling2(n, 1), BigUint::one());
            assert_eq!(stirling2(n, n), BigUint::one());
        }
        // S(n,2) = 2^(n-1) - 1
        assert_eq!(stirling2(8, 2), BigUint::from(127u32));
    }

    #[test]
    fn bell_sequence() {
        let expect: [u64; 13] = [
            1, 1, 2, 5, 15, 52, 203, 877, 4140, 21147, 115_975, 678_570, 4_213_597,
        ];
        for (n, &b) in expect.iter().enumerate() {
            assert_eq!(bell(n), BigUint::from(b), "B({n})");
        }
    }

    #[test]
    fn bell_row_sum_identity() {
        for n in 0..=60 {
            let sum: BigUint = (0..=n).map(|k| stirling2(n, k)).sum();
            assert_eq!(sum, bell(n));
        }
    }

    #[test]
    fn bell_96_magnitude() {
        let b96 = bell(96);
        let approx = big_ratio_to_f64(&b96, &BigUint::one());
        assert!((approx / 6.68e109 - 1.0).abs() < 0.01, "B(96) = {approx:e}");
    }

    #[test]
    fn plp_table_spot_checks() {
        assert_eq!(plp_count(5, 3), BigUint::from(1915u32));
        assert_eq!(plp_count(6, 2), BigUint::from(3263u32));
        assert_eq!(plp_count(2, 1), BigUint::from(5u32));
        assert_eq!(plp_count(2, 2), BigUint::from(10u32));
    }

    #[test]
    fn plp_reduces_to_bell_without_labels() {
        for n in 1..=30 {
            assert_eq!(plp_count(n, 0), bell(n));
        }
    }

    #[test]
    fn plp_one_label_is_bell_of_n_plus_one() {
        // One label acts as an extra object: P[n,1] = B(n+1).
        for n in 1..=30 {
            assert_eq!(plp_count(n, 1), bell(n + 1), "n={n}");
        }
    }

    #[test]
    fn plp_one_label_direct_summation() {
        for n in 1..=12 {
            let mut direct = BigUint::zero();
            for k in 1..=n {
                direct += stirling2(n, k) * (BigUint::one() + BigUint::from(k));
            }
            assert_eq!(direct, plp_count(n, 1));
        }
    }

    #[test]
    fn noc_prior_sums_to_one() {
        for n in [1usize, 4, 10, 20, 50] {
            let prior = noc_prior_uniform_partitions(n);
            let total: f64 = prior.values().sum();
            assert!((total - 1.0).abs() < 1e-12, "n={n} total={total}");
        }
    }

    #[test]
    fn noc_prior_single_cell() {
        let prior = noc_prior_uniform_partitions(1);
        assert_eq!(prior.len(), 1);
        assert!((prior[&1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn noc_prior_four_cells_exact() {
        let prior = noc_prior_uniform_partitions(4);
        assert!((prior[&1] - 1.0 / 15.0).abs() < 1e-12);
        assert!((prior[&2] - 7.0 / 15.0).abs() < 1e-12);
        assert!((prior[&3] - 6.0 / 15.0).abs() < 1e-12);
        assert!((prior[&4] - 1.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn noc_prior_twenty_cells_mean() {
        let prior = noc_prior_uniform_partitions(20);
        let mean: f64 = prior.iter().map(|(k, p)| *k as f64 * p).sum();
        assert!((mean - 8.18).abs() < 0.01, "mean={mean}");
    }

    #[test]
    fn ratio_conversion_handles_huge_values() {
        let b200 = bell(200);
        let r = big_ratio_to_f64(&b200, &b200);
        assert!((r - 1.0).abs() < 1e-12);
        let ln = ln_big_ratio(&(b200.clone() * 2u32), &b200);
        assert!((ln - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ln_ratio_matches_direct_log_for_small_values() {
        let a = BigUint::from(420_693_273u64);
        let b = BigUint::from(34105u64);
        let expect = (420_693_273f64 / 34105.0).ln();
        assert!((ln_big_ratio(&a, &b) - expect).abs() < 1e-12);
    }
}
