use std::collections::{HashMap, VecDeque};

use proptest::prelude::*;
use protodisent::metrics::{cosine_similarity, error_rate, spearman};

/// Every sequence over `{0, 1, 2}` of length at most `max_len`.
fn all_sequences(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..3u8 {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Single-edit neighbours (insert, delete, substitute) no longer than
/// `max_len`.
fn neighbours(s: &[u8], max_len: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for i in 0..s.len() {
        let mut d = s.to_vec();
        d.remove(i);
        out.push(d);
        for c in 0..3u8 {
            if c != s[i] {
                let mut t = s.to_vec();
                t[i] = c;
                out.push(t);
            }
        }
    }
    if s.len() < max_len {
        for i in 0..=s.len() {
            for c in 0..3u8 {
                let mut t = s.to_vec();
                t.insert(i, c);
                out.push(t);
            }
        }
    }
    out
}

/// Fewest single-token edits turning `src` into each reachable sequence,
/// by breadth-first search over the sequence graph. Intermediate sequences
/// never need to exceed the longer endpoint, so capping the length at
/// `max_len` loses no shortest path between sequences within the cap.
fn edit_graph_distances(src: &[u8], max_len: usize) -> HashMap<Vec<u8>, usize> {
    let mut dist = HashMap::new();
    dist.insert(src.to_vec(), 0);
    let mut queue = VecDeque::from([src.to_vec()]);
    while let Some(s) = queue.pop_front() {
        let d = dist[&s];
        for n in neighbours(&s, max_len) {
            if !dist.contains_key(&n) {
                dist.insert(n.clone(), d + 1);
                queue.push_back(n);
            }
        }
    }
    dist
}

#[test]
fn edit_distance_matches_graph_search_exhaustively() {
    let seqs = all_sequences(6);
    assert_eq!(seqs.len(), 1093);
    let mut checked = 0usize;
    for r in seqs.iter().filter(|s| !s.is_empty()) {
        let dist = edit_graph_distances(r, 6);
        for h in &seqs {
            let got = error_rate(r, h).unwrap();
            assert_eq!(got.errors(), dist[h], "{r:?} vs {h:?}");
            assert_eq!(got.insertions + got.reference_length, got.deletions + h.len());
            checked += 1;
        }
    }
    assert_eq!(checked, 1092 * 1093);
}

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e3f64..1e3, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn cosine_is_bounded_symmetric_and_scale_free(
        (a, b) in (1usize..12).prop_flat_map(|n| (finite_vec(n), finite_vec(n))),
        c in 0.01f64..100.0,
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-6) && b.iter().any(|x| x.abs() > 1e-6));
        let s = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - cosine_similarity(&b, &a).unwrap()).abs() < 1e-12);
        let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
        prop_assert!((s - cosine_similarity(&scaled, &b).unwrap()).abs() < 1e-9);
        prop_assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn error_counts_are_consistent(
        r in prop::collection::vec(0u8..5, 1..20),
        h in prop::collection::vec(0u8..5, 0..20),
    ) {
        let e = error_rate(&r, &h).unwrap();
        let (n, m) = (r.len(), h.len());
        prop_assert!(e.errors() >= n.abs_diff(m));
        prop_assert!(e.errors() <= n.max(m));
        prop_assert_eq!(e.deletions + m, e.insertions + n);
        prop_assert!((e.rate - e.errors() as f64 / n as f64).abs() < 1e-15);
        prop_assert_eq!(error_rate(&r, &r).unwrap().errors(), 0);
    }

    #[test]
    fn spearman_is_bounded_and_rank_based(
        x in prop::collection::vec(-50.0f64..50.0, 3..30),
        seed in any::<u64>(),
    ) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v.sin() + ((i as u64 ^ seed) % 7) as f64).collect();
        if let Ok(rho) = spearman(&x, &y) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
            let cubed: Vec<f64> = x.iter().map(|v| v * v * v).collect();
            prop_assert!((rho - spearman(&cubed, &y).unwrap()).abs() < 1e-12);
        }
    }
}
