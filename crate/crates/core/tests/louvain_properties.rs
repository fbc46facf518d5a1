mod oracle;

use std::collections::BTreeMap;

use oracle::{for_each_partition, labels_of, Dense};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ringwatch_core::louvain::{louvain, modularity, LouvainConfig, ModularityState, MoveTarget};

fn random_dense(rng: &mut ChaCha8Rng, n: usize, density: f64, max_w: u64) -> Dense {
    let mut d = Dense::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(density) {
                d.add(i, j, rng.random_range(1..=max_w));
            }
        }
    }
    d
}

#[test]
fn modularity_matches_dense_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let n = rng.random_range(2..9);
        let d = random_dense(&mut rng, n, 0.5, 3);
        if d.edge_total() == 0 {
            continue;
        }
        let g = d.to_graph();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let assignment: BTreeMap<u64, u32> = (0..n).map(|i| (i as u64 + 1, labels[i] as u32)).collect();
        let q = modularity(&g, &assignment).unwrap();
        assert!((q - d.modularity(&labels)).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&q));
    }
}

#[test]
fn single_community_is_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.random_range(2..10);
        let d = random_dense(&mut rng, n, 0.6, 4);
        let g = d.to_graph();
        let all: BTreeMap<u64, u32> = (1..=n as u64).map(|u| (u, 0)).collect();
        assert_eq!(modularity(&g, &all).unwrap(), 0.0);
    }
}

#[test]
fn local_optimum_and_monotone_quality() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let config = LouvainConfig::default();
    for _ in 0..300 {
        let n = rng.random_range(2..30);
        let density = rng.random_range(0.05..0.5);
        let d = random_dense(&mut rng, n, density, 3);
        let g = d.to_graph();
        let p = louvain(&g, &config).unwrap();
        let labels = labels_of(n, p.assignment());
        assert!((p.modularity_q() - d.modularity(&labels)).abs() < 1e-9);
        let singletons: Vec<usize> = (0..n).collect();
        assert!(p.modularity_q() >= d.modularity(&singletons) - 1e-12);
        if d.components() >= 2 && d.edge_total() > 0 {
            assert!(p.modularity_q() >= -1e-12);
        }
        let state = ModularityState::new(&g, p.assignment()).unwrap();
        for &u in g.nodes() {
            for c in state.neighbor_communities(u).unwrap() {
                let dq = state.delta_modularity(u, MoveTarget::Community(c)).unwrap();
                assert!(dq <= config.epsilon, "node {u} -> {c} still gains {dq}");
            }
        }
        assert_eq!(louvain(&g, &config).unwrap(), p, "louvain is not deterministic");
    }
}

#[test]
fn delta_matches_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut checked = 0;
    while checked < 1000 {
        let n = rng.random_range(2..9);
        let d = random_dense(&mut rng, n, 0.5, 3);
        if d.edge_total() == 0 {
            continue;
        }
        let g = d.to_graph();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let assignment: BTreeMap<u64, u32> = (0..n).map(|i| (i as u64 + 1, labels[i] as u32)).collect();
        let state = ModularityState::new(&g, &assignment).unwrap();
        let node = rng.random_range(0..n);
        let (target, after_label) = if rng.random_bool(0.2) {
            (MoveTarget::Fresh, n + 100)
        } else {
            let c = labels[rng.random_range(0..n)];
            (MoveTarget::Community(c as u32), c)
        };
        let mut after = labels.clone();
        after[node] = after_label;
        let expected = d.modularity(&after) - d.modularity(&labels);
        let got = state.delta_modularity(node as u64 + 1, target).unwrap();
        assert!((got - expected).abs() <= 1e-9, "n={n} node={node} {target:?}: {got} vs {expected}");
        checked += 1;
    }
}

#[test]
fn partition_enumeration_counts_bell_numbers() {
    for (n, bell) in [(1, 1), (3, 5), (5, 52), (6, 203)] {
        let mut count = 0;
        for_each_partition(n, |_| count += 1);
        assert_eq!(count, bell);
    }
}
