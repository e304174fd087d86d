//! Correctly rounded floating-point summation.
//!
//! Naive left-to-right `f64` addition is order dependent, which would make
//! graph pooling depend on node order. The accumulator here keeps the running
//! sum as a Shewchuk expansion (a list of non-overlapping partials whose exact
//! sum equals the exact sum of all inputs) and rounds only once at the end, so
//! the result is the nearest `f64` to the true sum regardless of input order.

/// Running error-free sum of `f64` values.
///
/// `add` is O(len(partials)); the partials list stays tiny (a handful of
/// entries) for realistic inputs.
#[derive(Debug, Clone, Default)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, mut x: f64) {
        // Two-sum each partial against x, keeping the non-zero remainders.
        let mut i = 0;
        for k in 0..self.partials.len() {
            let mut y = self.partials[k];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    /// Round the expansion to the nearest `f64`.
    ///
    /// Follows the fsum tail: accumulate from the largest partial down until
    /// the sum turns inexact, then apply one half-way correction so that
    /// round-to-even over the remaining partials comes out right.
    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        let mut hi = p[n - 1];
        n -= 1;
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            let y = p[n - 1];
            n -= 1;
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

/// Correctly rounded sum of an iterator of values.
pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = ExactSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Mean of a slice via exact summation; `None` on empty input.
pub fn exact_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(exact_sum(values.iter().copied()) / values.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ill_conditioned_cancellation() {
        // 1 + 1e100 + 1 - 1e100 = 2 exactly; naive summation returns 0.
        assert_eq!(exact_sum([1.0, 1e100, 1.0, -1e100]), 2.0);
    }

    #[test]
    fn matches_known_fsum_case() {
        // sum of 0.1 ten times rounds to exactly 1.0 under correct rounding,
        // while naive accumulation gives 0.9999999999999999.
        let v = [0.1; 10];
        assert_eq!(exact_sum(v), 1.0);
        assert_ne!(v.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn order_invariant_under_random_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut v: Vec<f64> = (0..200)
            .map(|_| (rng.gen::<f64>() - 0.5) * 10f64.powi(rng.gen_range(-20..20)))
            .collect();
        let reference = exact_sum(v.iter().copied());
        for _ in 0..50 {
            v.shuffle(&mut rng);
            let s = exact_sum(v.iter().copied());
            assert_eq!(s.to_bits(), reference.to_bits());
        }
    }

    #[test]
    fn empty_and_singleton() {
        assert_eq!(exact_sum([]), 0.0);
        assert_eq!(exact_sum([-3.5]), -3.5);
        assert_eq!(exact_mean(&[]), None);
        assert_eq!(exact_mean(&[2.0, 4.0]), Some(3.0));
    }

    #[test]
    fn half_even_correction_branch() {
        // Exercise the lo*2 correction: values engineered so the top partial
        // sits exactly halfway between representables relative to the rest.
        let v = [1.0, 0.5f64.powi(53), 0.5f64.powi(53), -0.5f64.powi(105)];
        let s = exact_sum(v);
        // Exact sum = 1 + 2^-52 - 2^-105, which rounds down to 1 + 2^-52... the
        // point here is only that the result equals the correctly rounded sum.
        let expected = 1.0 + 0.5f64.powi(52) - 0.5f64.powi(105);
        assert!((s - expected).abs() <= f64::EPSILON * expected.abs());
    }
}
