use std::collections::{BTreeMap, BTreeSet};

use chrono::TimeDelta;
use ringwatch_core::corpus::{build_interaction_table, write_posts_jsonl, UserId};
use ringwatch_core::detectors::{detect_suspicious_users, jump_preset, DumpWindow};
use ringwatch_core::graph::InteractionGraph;
use ringwatch_core::synth::{
    generate_forum, generate_snapshots, ForumConfig, PlantedJump, RingSpec, RingType, SnapshotConfig,
};

fn rings() -> Vec<RingSpec> {
    (0..4)
        .map(|i| RingSpec {
            member_count: 2 + i,
            interaction_count: 2 * (1 + i) + 3,
            all_accepted: i % 2 == 0,
            max_latency_hours: 0.5 + i as f64,
            clone_questions: i < 2,
            ring_type: if i % 2 == 0 { RingType::ThreadRing } else { RingType::SerialRing },
            member_ids: None,
        })
        .collect()
}

/// Connected components of the mutual graph, with their edge counts.
fn components(g: &InteractionGraph) -> Vec<(BTreeSet<UserId>, usize)> {
    let n = g.node_count();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for k in 0..g.edge_count() {
        let (a, b) = g.edge_endpoints(k);
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    let mut out: BTreeMap<usize, (BTreeSet<UserId>, usize)> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        out.entry(r).or_default().0.insert(g.nodes()[i]);
    }
    for k in 0..g.edge_count() {
        let r = find(&mut parent, g.edge_endpoints(k).0);
        out.get_mut(&r).unwrap().1 += 1;
    }
    out.into_values().collect()
}

#[test]
fn planted_rings_have_the_requested_shape() {
    for seed in 0..5 {
        let specs = rings();
        let f = generate_forum(&ForumConfig::new(300, 3000, specs.clone(), seed)).unwrap();
        let table = build_interaction_table(&f.posts);
        let g = InteractionGraph::from_records(&table.records).unwrap();
        assert_eq!(f.truth.fraud_communities.len(), specs.len());
        for (spec, members) in specs.iter().zip(&f.truth.fraud_communities) {
            let set: BTreeSet<UserId> = members.iter().copied().collect();
            assert_eq!(set.len(), spec.member_count);
            assert!(g.is_isolated(&set).unwrap(), "ring {members:?} touches honest users");
            let internal: Vec<_> =
                g.edges().iter().filter(|e| set.contains(&e.asker) && set.contains(&e.answerer)).collect();
            assert_eq!(internal.len(), spec.interaction_count);
            assert!(internal.iter().all(|e| e.attrs.e_time <= spec.max_latency()));
            assert!(internal.iter().all(|e| e.attrs.e_time > TimeDelta::zero()));
            if spec.all_accepted {
                assert!(internal.iter().all(|e| e.attrs.e_accepted));
            }
            for &u in members {
                assert!(f.truth.fraud_users.contains(&u));
                assert!(f.truth.removal_events.iter().any(|e| e.user_id == u));
            }
        }
    }
}

#[test]
fn forum_generation_is_deterministic() {
    let bytes = |seed| {
        let mut out = Vec::new();
        write_posts_jsonl(&mut out, &generate_forum(&ForumConfig::new(200, 1500, rings(), seed)).unwrap().posts).unwrap();
        out
    };
    assert_eq!(bytes(3), bytes(3));
    assert_ne!(bytes(3), bytes(4));
}

#[test]
fn honest_forums_rarely_form_dense_isolated_pairs() {
    let mut hits = 0;
    for seed in 0..30 {
        let f = generate_forum(&ForumConfig::new(1000, 20_000, vec![], seed)).unwrap();
        let g = InteractionGraph::from_records(&build_interaction_table(&f.posts).records).unwrap();
        if components(&g).iter().any(|(m, e)| m.len() == 2 && *e >= 6) {
            hits += 1;
        }
    }
    // Under 1% of corpora.
    assert!(hits * 100 < 30, "{hits} of 30 honest corpora contain a dense isolated pair");
}

#[test]
fn unit_multiple_is_never_flagged() {
    let window = DumpWindow::new("D2", "D1");
    for seed in 0..20 {
        let planted = vec![PlantedJump { user_id: 5000, multiple: 1.0 }];
        let (set, _) = generate_snapshots(&SnapshotConfig::new(500, planted, seed)).unwrap();
        let scan = detect_suspicious_users(&set, &jump_preset("C1", window.clone()).unwrap()).unwrap();
        assert!(scan.reports.iter().all(|r| r.subject.users() != vec![5000]));
    }
}

#[test]
fn honest_population_stays_quiet_under_the_loosest_preset() {
    let window = DumpWindow::new("D2", "D1");
    let cfg = jump_preset("C1", window).unwrap();
    for seed in 0..100 {
        let snap = SnapshotConfig { growth_sd: 5.0, ..SnapshotConfig::new(300, vec![], seed) };
        let (set, truth) = generate_snapshots(&snap).unwrap();
        assert!(truth.planted_jump_users.is_empty());
        assert!(detect_suspicious_users(&set, &cfg).unwrap().reports.is_empty(), "seed {seed}");
    }
}

#[test]
fn inactive_users_fall_outside_the_window() {
    let (set, _) = generate_snapshots(&SnapshotConfig::new(400, vec![], 1)).unwrap();
    let date = set.dump("D2").unwrap().date;
    let inactive = set
        .users()
        .into_iter()
        .filter(|&u| set.last_access(u, "D2").is_some_and(|t| date - t > TimeDelta::days(150)))
        .count();
    assert!(inactive > 10 && inactive < 80, "{inactive} inactive of 400");
}
