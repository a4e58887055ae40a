mod common;

use std::collections::HashSet;

use common::rng;
use pcw_core::packer::{balance, chunk_in_order, compute_n_max, pack, sample_examples};
use pcw_core::Error;
use rand::Rng;

/// Smallest sample value `v` with at least 90% of the retained samples ≤ `v`,
/// after discarding the longest ⌈n/100⌉ values (never all of them).
fn oracle_budget(train: &[usize], test: &[usize], capacity: usize) -> Option<(usize, usize, usize)> {
    let retain = |v: &[usize]| {
        let mut s = v.to_vec();
        s.sort_unstable_by(|a, b| b.cmp(a));
        let drop = v.len().div_ceil(100).min(v.len() - 1);
        s.split_off(drop)
    };
    let train = retain(train);
    let test = retain(test);
    let t_max = *test.iter().max()?;
    let d_90 = *train
        .iter()
        .filter(|&&v| 100 * train.iter().filter(|&&u| u <= v).count() >= 90 * train.len())
        .min()?;
    if capacity < t_max || d_90 == 0 {
        return None;
    }
    Some(((capacity - t_max) / d_90, t_max, d_90))
}

#[test]
fn n_max_matches_percentile_oracle() {
    let mut r = rng(21);
    for _ in 0..1000 {
        let n_train = r.gen_range(1..400);
        let n_test = r.gen_range(1..300);
        let hi = r.gen_range(2..200);
        let train: Vec<usize> = (0..n_train).map(|_| r.gen_range(1..hi)).collect();
        let test: Vec<usize> = (0..n_test).map(|_| r.gen_range(1..hi)).collect();
        let capacity = r.gen_range(1..1100);
        match (
            compute_n_max(&train, &test, capacity),
            oracle_budget(&train, &test, capacity),
        ) {
            (Ok(b), Some((n_max, t_max, d_90))) => {
                assert_eq!((b.n_max, b.t_max, b.d_90), (n_max, t_max, d_90));
            }
            (Err(Error::Budget(_)), None) => {}
            (got, want) => panic!("{got:?} vs {want:?}"),
        }
    }
}

#[test]
fn worked_budget_example() {
    let train = vec![10; 200];
    let mut test = vec![20; 99];
    test.push(57); // the longest percentile is dropped
    assert_eq!(compute_n_max(&train, &test, 100).unwrap().n_max, 8);
}

#[test]
fn balanced_spread_never_exceeds_chunking() {
    let mut r = rng(22);
    for _ in 0..1000 {
        let b = r.gen_range(1..9);
        let n_max = r.gen_range(1..9);
        let pool = b * n_max + r.gen_range(0..20);
        let lengths: Vec<usize> = (0..pool).map(|_| r.gen_range(1..300)).collect();
        let chosen = sample_examples(pool, b * n_max, r.gen()).unwrap();
        let packed = balance(&lengths, &chosen, b);
        let naive = chunk_in_order(&lengths, &chosen, b);
        assert!(packed.spread() <= naive.spread(), "{lengths:?} {chosen:?}");

        assert_eq!(packed.num_windows(), b);
        let mut seen = HashSet::new();
        for (w, idx) in packed.windows.iter().enumerate() {
            assert_eq!(idx.len(), n_max);
            assert_eq!(packed.totals[w], idx.iter().map(|&i| lengths[i]).sum::<usize>());
            for &i in idx {
                assert!(seen.insert(i));
            }
        }
        assert_eq!(seen, chosen.iter().copied().collect());
    }
}

#[test]
fn worked_swap_example_is_optimal() {
    // every equal-count split of [9,7,2,1] into two pairs
    let lengths = [9, 7, 2, 1];
    let best = [[0, 1], [0, 2], [0, 3]]
        .iter()
        .map(|pair| {
            let a: usize = pair.iter().map(|&i| lengths[i]).sum();
            let total: usize = lengths.iter().sum();
            a.abs_diff(total - a)
        })
        .min()
        .unwrap();
    assert_eq!(best, 1);
    assert_eq!(balance(&lengths, &[0, 1, 2, 3], 2).spread(), best);
}

#[test]
fn pack_is_deterministic_per_seed() {
    let mut r = rng(23);
    let lengths: Vec<usize> = (0..500).map(|_| r.gen_range(5..80)).collect();
    for seed in 0..20 {
        assert_eq!(pack(&lengths, 4, 6, seed).unwrap(), pack(&lengths, 4, 6, seed).unwrap());
    }
    let distinct: HashSet<Vec<Vec<usize>>> = (0..20).map(|s| pack(&lengths, 4, 6, s).unwrap().windows).collect();
    assert!(distinct.len() > 1);
}
