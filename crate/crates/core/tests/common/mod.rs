#![allow(dead_code)]

use nm_supernet::nm::SparsityLevel;

pub fn lv(s: &str) -> SparsityLevel {
    s.parse().unwrap()
}

/// Every N:M level with M in {4, 8}.
pub fn all_levels() -> Vec<SparsityLevel> {
    let mut out = Vec::new();
    for m in [4u32, 8] {
        for n in 1..=m {
            out.push(SparsityLevel::new(n, m).unwrap());
        }
    }
    out
}

/// Exhaustive best subset of size `n`: maximum integer score sum, ties
/// broken towards the lexicographically smallest sorted index set.
pub fn best_subset(scores: &[u32], n: usize) -> Vec<bool> {
    let m = scores.len();
    let mut best: Option<(u64, Vec<usize>)> = None;
    for bits in 0u32..(1 << m) {
        if bits.count_ones() as usize != n {
            continue;
        }
        let idx: Vec<usize> = (0..m).filter(|i| bits >> i & 1 == 1).collect();
        let sum: u64 = idx.iter().map(|&i| scores[i] as u64).sum();
        let better = match &best {
            None => true,
            Some((s, b)) => sum > *s || (sum == *s && idx < *b),
        };
        if better {
            best = Some((sum, idx));
        }
    }
    let mut out = vec![false; m];
    for i in best.expect("n <= m").1 {
        out[i] = true;
    }
    out
}
