//! Reductions whose result does not depend on the thread schedule.

use rayon::prelude::*;

const CHUNK: usize = 4096;

/// `Σ_{i<n} f(i)`, summed sequentially within fixed-size chunks and then
/// across chunks in order, so the rounding is identical for any thread count.
pub(crate) fn ordered_sum(n: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    let partial: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| (c * CHUNK..((c + 1) * CHUNK).min(n)).map(&f).sum())
        .collect();
    partial.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_sequential_chunks() {
        let n: usize = 10_000;
        let f = |i: usize| (i as f64).sqrt();
        let mut expect = 0.0;
        for c in 0..n.div_ceil(CHUNK) {
            let part: f64 = (c * CHUNK..((c + 1) * CHUNK).min(n)).map(f).sum();
            expect += part;
        }
        assert_eq!(ordered_sum(n, f), expect);
        assert_eq!(ordered_sum(0, f), 0.0);
    }
}
