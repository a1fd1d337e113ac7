use hyperprompt::hypergraph::{table_to_hypergraph, triples_to_hypergraph, EdgeKind, HyperGraph, Side, Slot};
use hyperprompt::ingest::{Table, Triple, TripleSet};
use proptest::prelude::*;

fn table_strategy(max: usize) -> impl Strategy<Value = Table> {
    (1..=max, 1..=max).prop_flat_map(|(m, n)| {
        (
            prop::collection::vec("[a-c]{1,2}", n),
            prop::collection::vec(prop::collection::vec("[a-d]{0,2}", n), m),
        )
            .prop_map(|(h, rows)| Table::new(h, rows).unwrap())
    })
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn triple_strategy() -> impl Strategy<Value = TripleSet> {
    prop::collection::vec(("[a-e]", "[rs]", "[a-e]"), 0..12).prop_map(|v| {
        let ts = v
            .into_iter()
            .filter(|(h, _, t)| h != t)
            .map(|(h, r, t)| Triple::new(h, r, t))
            .collect();
        TripleSet::new(ts).unwrap()
    })
}

proptest! {
    #[test]
    fn table_counting_laws(t in table_strategy(20)) {
        let (m, n) = (t.n_rows(), t.n_cols());
        let g = table_to_hypergraph(&t);
        prop_assert_eq!(g.n_nodes(), m * n);
        prop_assert_eq!(g.n_hyperedges(), m + n);
        prop_assert_eq!(g.incidence().len(), 2 * m * n);
        for v in 0..g.n_nodes() {
            let es = g.neighbors(v, Side::OfNode).unwrap();
            prop_assert_eq!(es, &[v / n, m + v % n][..]);
        }
        prop_assert!(g.incidence().iter().all(|i| i.tag == Slot::None));
    }

    #[test]
    fn row_and_column_permutation_is_isomorphic(
        (t, rp, cp) in table_strategy(6).prop_flat_map(|t| {
            let (m, n) = (t.n_rows(), t.n_cols());
            (Just(t), permutation(m), permutation(n))
        })
    ) {
        let g = table_to_hypergraph(&t);
        let p = table_to_hypergraph(&t.permute_rows(&rp).permute_cols(&cp));
        prop_assert_eq!(g.degree_multiset(), p.degree_multiset());
        prop_assert_eq!(g.fingerprint(), p.fingerprint());
    }

    #[test]
    fn triple_counting_laws(ts in triple_strategy()) {
        let g = triples_to_hypergraph(&ts).unwrap();
        let mut distinct: Vec<&str> = ts.triples().iter().flat_map(|t| [t.head.as_str(), t.tail.as_str()]).collect();
        distinct.sort();
        distinct.dedup();
        prop_assert_eq!(g.n_nodes(), distinct.len());
        prop_assert_eq!(g.n_hyperedges(), 2 * ts.len());
        // Incidence oracle: four per triple occurrence.
        prop_assert_eq!(g.incidence().len(), ts.triples().iter().map(|_| 4).sum::<usize>());
        for e in g.hyperedges() {
            let slots: Vec<Slot> = g.incidence().iter().filter(|i| i.hyperedge == e.id).map(|i| i.tag).collect();
            prop_assert_eq!(slots.len(), 2);
            prop_assert!(slots.contains(&Slot::HeadSlot) && slots.contains(&Slot::TailSlot));
        }
    }

    #[test]
    fn reversing_twice_restores_slots(ts in triple_strategy()) {
        let g = triples_to_hypergraph(&ts).unwrap();
        let slot_of = |e: usize, tag: Slot| g.incidence().iter().find(|i| i.hyperedge == e && i.tag == tag).unwrap().node;
        for k in 0..ts.len() {
            let (fwd, rev) = (2 * k, 2 * k + 1);
            prop_assert_eq!(g.hyperedges()[fwd].kind, EdgeKind::Relation);
            prop_assert_eq!(g.hyperedges()[rev].kind, EdgeKind::ReverseRelation);
            // Reverse of the reverse: swap the slots of `rev` once more.
            prop_assert_eq!(slot_of(rev, Slot::TailSlot), slot_of(fwd, Slot::HeadSlot));
            prop_assert_eq!(slot_of(rev, Slot::HeadSlot), slot_of(fwd, Slot::TailSlot));
        }
    }

    #[test]
    fn json_round_trip(t in table_strategy(5), ts in triple_strategy()) {
        for g in [table_to_hypergraph(&t), triples_to_hypergraph(&ts).unwrap()] {
            prop_assert_eq!(HyperGraph::from_json(g.to_json().as_bytes()).unwrap(), g);
        }
    }
}

#[test]
fn duplicate_triples_keep_multiplicity() {
    let ts = TripleSet::new(vec![Triple::new("A", "r", "B"), Triple::new("A", "r", "B")]).unwrap();
    let g = triples_to_hypergraph(&ts).unwrap();
    let forward = g.hyperedges().iter().filter(|e| e.kind == EdgeKind::Relation).count();
    let reverse = g
        .hyperedges()
        .iter()
        .filter(|e| e.kind == EdgeKind::ReverseRelation)
        .count();
    assert_eq!((forward, reverse), (2, 2));
    assert_eq!(g.incidence().len(), 8);
}

#[test]
fn each_cell_sees_one_row_and_one_column() {
    let t = Table::new(
        vec!["Year".into(), "Team".into()],
        vec![vec!["2019".into(), "Ajax".into()], vec!["2020".into(), "PSV".into()]],
    )
    .unwrap();
    let g = table_to_hypergraph(&t);
    for v in 0..g.n_nodes() {
        let kinds: Vec<EdgeKind> = g
            .neighbors(v, Side::OfNode)
            .unwrap()
            .iter()
            .map(|&e| g.hyperedges()[e].kind)
            .collect();
        assert_eq!(kinds, [EdgeKind::Row, EdgeKind::Column]);
    }
}
