//! Deterministic blocked pairwise summation.
//!
//! Sums are formed over fixed-size blocks and the block partials are combined
//! in a fixed binary tree, so results do not depend on thread scheduling.

use rayon::prelude::*;

/// Rows per block. Block partials are summed naively.
pub const BLOCK: usize = 2048;

pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 64 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Combine per-block partial vectors with a fixed-shape binary tree.
pub fn tree_reduce<T, F>(mut parts: Vec<T>, combine: F) -> Option<T>
where
    F: Fn(T, T) -> T,
{
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        parts = next;
    }
    parts.pop()
}

/// Map each block of `n` items (by index range) to a partial result in
/// parallel, then reduce the partials in a fixed tree.
pub fn blocked_reduce<T, M, C>(n: usize, map: M, combine: C) -> Option<T>
where
    T: Send,
    M: Fn(usize, usize) -> T + Sync + Send,
    C: Fn(T, T) -> T,
{
    let blocks = n.div_ceil(BLOCK);
    let parts: Vec<T> = (0..blocks)
        .into_par_iter()
        .map(|b| map(b * BLOCK, ((b + 1) * BLOCK).min(n)))
        .collect();
    tree_reduce(parts, combine)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_exact_integers() {
        let xs: Vec<f64> = (1..=100_000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 5_000_050_000.0);
    }

    #[test]
    fn tree_reduce_is_order_fixed() {
        let parts: Vec<f64> = (0..37).map(|i| 0.1 * i as f64).collect();
        let a = tree_reduce(parts.clone(), |a, b| a + b).unwrap();
        let b = tree_reduce(parts, |a, b| a + b).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(tree_reduce(Vec::<f64>::new(), |a, b| a + b).is_none());
    }

    #[test]
    fn blocked_reduce_counts_every_item() {
        let n = 3 * BLOCK + 17;
        let total = blocked_reduce(n, |s, e| (e - s) as u64, |a, b| a + b).unwrap();
        assert_eq!(total as usize, n);
    }
}
