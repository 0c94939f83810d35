//! Property tests for graph, belief, digest and allocation invariants.

use nanoworld::belief::{BeliefNetwork, Evidence, Outcome};
use nanoworld::canonical::digest_of;
use nanoworld::context::{ContextEdge, ContextGraph, ContextNode, NodeKind};
use nanoworld::rsi::{ucb1_select, Trajectory};
use proptest::prelude::*;
use std::collections::{BTreeMap, BTreeSet, HashMap};

/// Node count, per-node model flag, and forward edges (i < j).
fn dag() -> impl Strategy<Value = (usize, Vec<bool>, Vec<(usize, usize)>)> {
    (2usize..30).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec((0..n, 0..n), 0..(n * 3)),
        )
            .prop_map(|(n, kinds, raw)| {
                let edges: BTreeSet<(usize, usize)> = raw
                    .into_iter()
                    .filter(|(a, b)| a != b)
                    .map(|(a, b)| (a.min(b), a.max(b)))
                    .collect();
                (n, kinds, edges.into_iter().collect())
            })
    })
}

fn name(i: usize) -> String {
    format!("n/{i:02}")
}

fn build(n: usize, kinds: &[bool], edges: &[(usize, usize)]) -> ContextGraph {
    let mut g = ContextGraph::new();
    for i in 0..n {
        let node = if kinds[i] {
            ContextNode::model(&name(i), "nano/any")
        } else {
            ContextNode::entity(&name(i), Some(i as f64))
        };
        g.add_node(node).unwrap();
    }
    for &(a, b) in edges {
        g.add_edge(ContextEdge::dep(&name(a), &name(b))).unwrap();
    }
    g
}

/// Fixed-point ancestor closure straight from the edge list.
fn brute_ancestors(edges: &[(usize, usize)], targets: &[usize]) -> BTreeSet<String> {
    let mut set: BTreeSet<usize> = targets.iter().copied().collect();
    loop {
        let before = set.len();
        for &(a, b) in edges {
            if set.contains(&b) {
                set.insert(a);
            }
        }
        if set.len() == before {
            return set.into_iter().map(name).collect();
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn activation_is_ancestor_closure((n, kinds, edges) in dag(), picks in prop::collection::vec(any::<prop::sample::Index>(), 1..4)) {
        let g = build(n, &kinds, &edges);
        let targets: Vec<usize> = picks.iter().map(|p| p.index(n)).collect();
        let names: Vec<String> = targets.iter().map(|&t| name(t)).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let act = g.activate(&refs).unwrap();

        let got: BTreeSet<String> = act.nodes.iter().cloned().collect();
        prop_assert_eq!(got.len(), act.nodes.len());
        let want = brute_ancestors(&edges, &targets);
        prop_assert_eq!(&got, &want);

        let models = want.iter().filter(|id| g.node(id).unwrap().kind == NodeKind::Model).count();
        let total = kinds.iter().filter(|k| **k).count();
        prop_assert_eq!(act.model_nodes, models);
        prop_assert_eq!(act.total_model_nodes, total);

        // every edge inside the closure points forward in the order
        let pos: BTreeMap<&String, usize> = act.nodes.iter().enumerate().map(|(i, id)| (id, i)).collect();
        for &(a, b) in &edges {
            if let (Some(pa), Some(pb)) = (pos.get(&name(a)), pos.get(&name(b))) {
                prop_assert!(pa < pb);
            }
        }
    }

    #[test]
    fn back_edges_are_rejected((n, kinds, edges) in dag()) {
        let mut g = build(n, &kinds, &edges);
        for &(a, b) in &edges {
            prop_assert!(g.add_edge(ContextEdge::dep(&name(b), &name(a))).is_err());
        }
        prop_assert_eq!(g.edge_count(), edges.len());
    }

    #[test]
    fn undo_then_redo_round_trips((n, kinds, edges) in dag(), sets in prop::collection::vec((any::<prop::sample::Index>(), -1e6f64..1e6), 1..20)) {
        let mut g = build(n, &kinds, &edges);
        let start = g.digest();
        for (i, v) in &sets {
            g.set_value(&name(i.index(n)), Some(*v)).unwrap();
        }
        let end = g.digest();
        for _ in &sets {
            g.undo().unwrap();
        }
        prop_assert_eq!(g.digest(), start);
        for _ in &sets {
            g.redo().unwrap();
        }
        prop_assert_eq!(g.digest(), end);
    }

    #[test]
    fn beta_updates_are_conjugate(evs in prop::collection::vec((0usize..5, any::<bool>(), 1u32..5), 0..200)) {
        let mut net = BeliefNetwork::new();
        let mut counts: HashMap<usize, (f64, f64, u64)> = HashMap::new();
        for &(id, ok, w) in &evs {
            let ev = Evidence {
                belief_id: format!("b{id}"),
                outcome: if ok { Outcome::Success } else { Outcome::Failure },
                weight: w as f64,
            };
            net.update(&ev).unwrap();
            let c = counts.entry(id).or_insert((1.0, 1.0, 0));
            if ok { c.0 += w as f64 } else { c.1 += w as f64 }
            c.2 += 1;
        }
        for (id, (a, b, k)) in counts {
            let node = net.get(&format!("b{id}")).unwrap();
            prop_assert_eq!((node.alpha, node.beta, node.update_count), (a, b, k));
            prop_assert!((node.mean() - a / (a + b)).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_order_does_not_change_posterior(evs in prop::collection::vec((0usize..4, any::<bool>(), 1u32..9), 1..100), seed in any::<u64>()) {
        let batch: Vec<Evidence> = evs
            .iter()
            .map(|&(id, ok, w)| Evidence {
                belief_id: format!("b{id}"),
                outcome: if ok { Outcome::Success } else { Outcome::Failure },
                weight: w as f64,
            })
            .collect();
        let mut shuffled = batch.clone();
        let k = (seed as usize) % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let (mut x, mut y) = (BeliefNetwork::new(), BeliefNetwork::new());
        x.batch_update(&batch);
        y.batch_update(&shuffled);
        for id in 0..4 {
            let id = format!("b{id}");
            prop_assert_eq!(x.get(&id), y.get(&id));
        }
    }

    #[test]
    fn digest_ignores_insertion_order(pairs in prop::collection::vec(("[a-z]{1,6}", -1e9f64..1e9), 0..30)) {
        let sorted: BTreeMap<String, f64> = pairs.iter().cloned().collect();
        let mut hashed: HashMap<String, f64> = HashMap::new();
        for (k, _) in pairs.iter().rev() {
            hashed.insert(k.clone(), sorted[k]);
        }
        prop_assert_eq!(digest_of(&sorted), digest_of(&hashed));
    }

    #[test]
    fn ucb1_pulls_unpulled_arms_first(pulls in prop::collection::vec(0u64..6, 1..8), means in prop::collection::vec(0.0f64..1.0, 8)) {
        let arms: Vec<Trajectory> = pulls
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let mut t = Trajectory::new(&format!("t{i}"), 0.0);
                for _ in 0..p {
                    t.record_reward(means[i]);
                }
                t
            })
            .collect();
        let pick = ucb1_select(&arms, 2f64.sqrt()).unwrap();
        let first_unpulled = arms.iter().find(|t| t.pulls == 0);
        match first_unpulled {
            Some(t) => prop_assert_eq!(&pick, &t.trajectory_id),
            None => prop_assert!(arms.iter().any(|t| t.trajectory_id == pick)),
        }
    }

    #[test]
    fn running_mean_matches_arithmetic_mean(rewards in prop::collection::vec(0.0f64..1.0, 1..200)) {
        let mut t = Trajectory::new("t", 0.0);
        for &r in &rewards {
            t.record_reward(r);
        }
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        prop_assert!((t.mean_reward - mean).abs() < 1e-12);
        prop_assert_eq!(t.pulls, rewards.len() as u64);
    }
}
