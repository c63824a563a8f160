//! Minimum-cost assignment for small dense cost matrices.

/// Returns `(row, col)` pairs of a minimum-total-cost assignment covering
/// `min(rows, cols)` pairs, sorted by row. `cost` is row-major `rows × cols`.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    assert_eq!(cost.len(), rows * cols, "cost matrix size");
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows > cols {
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = cost[r * cols + c];
            }
        }
        let mut pairs: Vec<(usize, usize)> = hungarian(&t, cols, rows).into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        return pairs;
    }
    // potentials method, rows ≤ cols, 1-based with a virtual column 0
    let (n, m) = (rows, cols);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut min_v = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                if cur < min_v[j] {
                    min_v[j] = cur;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| owner[j] != 0).map(|j| (owner[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn brute_force(cost: &[f64], rows: usize, cols: usize) -> f64 {
        fn go(r: usize, rows: usize, cols: usize, cost: &[f64], used: &mut Vec<bool>, assigned: usize, acc: f64, best: &mut f64) {
            let need = rows.min(cols);
            if r == rows {
                if assigned == need {
                    *best = best.min(acc);
                }
                return;
            }
            // a row may stay unassigned only when rows exceed columns
            if rows - r - 1 >= need - assigned {
                go(r + 1, rows, cols, cost, used, assigned, acc, best);
            }
            for c in 0..cols {
                if !used[c] {
                    used[c] = true;
                    go(r + 1, rows, cols, cost, used, assigned + 1, acc + cost[r * cols + c], best);
                    used[c] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        go(0, rows, cols, cost, &mut vec![false; cols], 0, 0.0, &mut best);
        best
    }

    #[test]
    fn picks_the_cheap_diagonal() {
        let pairs = hungarian(&[3.0, 170.0, 160.0, 8.0], 2, 2);
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        let pairs = hungarian(&[170.0, 3.0, 8.0, 160.0], 2, 2);
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn rectangular_cases() {
        assert_eq!(hungarian(&[5.0, 1.0, 9.0], 1, 3), vec![(0, 1)]);
        assert_eq!(hungarian(&[5.0, 1.0, 9.0], 3, 1), vec![(1, 0)]);
        assert!(hungarian(&[], 0, 4).is_empty());
    }

    #[test]
    fn matches_exhaustive_search() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..500 {
            let rows = rng.gen_range(1..=5);
            let cols = rng.gen_range(1..=5);
            let cost: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.0..180.0)).collect();
            let pairs = hungarian(&cost, rows, cols);
            assert_eq!(pairs.len(), rows.min(cols));
            let total: f64 = pairs.iter().map(|&(r, c)| cost[r * cols + c]).sum();
            assert!((total - brute_force(&cost, rows, cols)).abs() < 1e-9);
        }
    }
}
