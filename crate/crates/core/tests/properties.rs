use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rprl_core::encoders::{Aggregation, ContextEncoder, EncoderConfig, GraphEncoder};
use rprl_core::harness::{few_shot_subset, split};
use rprl_core::kinetics::{integrate, Adjacency, KineticForm, KineticParams, StateDistribution};
use rprl_core::{Error, InfoPropView, ParamStore, RelGraph, Tape, Tensor};

fn edges_strategy(max_n: usize) -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (1..=max_n).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0..n), 0..3 * n)))
}

fn kinetic_form() -> impl Strategy<Value = KineticForm> {
    prop_oneof![
        Just(KineticForm::NeighborState),
        Just(KineticForm::OwnState),
        Just(KineticForm::Regular)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trajectories_stay_on_the_simplex(
        (n, edges) in edges_strategy(12),
        b1 in 0.0..1.0f64,
        b2 in 0.0..1.0f64,
        dt in 0.01..1.5f64,
        seed_node in 0usize..12,
        form in kinetic_form(),
    ) {
        let adj = Adjacency::from_edges(n, edges).unwrap();
        let s0 = StateDistribution::new(
            (0..n).map(|v| if v == seed_node % n { [0.2, 0.5, 0.3] } else { [1.0, 0.0, 0.0] }).collect(),
        ).unwrap();
        let traj = integrate(&s0, &adj, KineticParams::new(b1, b2).unwrap(), form, 30, dt).unwrap();
        for w in traj.states.windows(2) {
            prop_assert!(w[1].max_row_sum_error() <= 1e-9);
            for (a, b) in w[0].rows().iter().zip(w[1].rows()) {
                prop_assert!(b[0] >= 0.0 && b[0] <= a[0]);
                prop_assert!(b[1] >= a[1] && b[2] >= a[2]);
            }
        }
    }

    #[test]
    fn splits_partition_the_units(n in 3usize..500, a in 0.2..0.8f64, b in 0.05..0.15f64, seed in any::<u64>()) {
        let (tr, va) = ((n as f64 * a).round() as usize, (n as f64 * b).round() as usize);
        match split(n, [a, b, 1.0 - a - b], seed) {
            Ok(sp) => {
                prop_assert_eq!((sp.train.len(), sp.val.len()), (tr, va));
                prop_assert!(!sp.test.is_empty());
                let mut all: Vec<usize> = sp.train.iter().chain(&sp.val).chain(&sp.test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
            Err(Error::Config(_)) => prop_assert!(tr == 0 || va == 0 || tr + va >= n),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn few_shot_subsets_nest(n in 1usize..300, f in 0.01..1.0f64, g in 0.01..1.0f64, seed in any::<u64>()) {
        let train: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
        let (lo, hi) = if f <= g { (f, g) } else { (g, f) };
        let small = few_shot_subset(&train, lo, seed).unwrap();
        let large = few_shot_subset(&train, hi, seed).unwrap();
        prop_assert!(small.iter().all(|u| large.contains(u)));
        prop_assert!(large.iter().all(|u| train.contains(u)));
    }

    #[test]
    fn symmetrizing_a_view_changes_nothing((n, edges) in edges_strategy(15), ego in 0usize..15) {
        let ego = ego % n;
        let view = InfoPropView::from_edges(n, edges.clone(), ego).unwrap();
        let doubled = edges.iter().flat_map(|&(a, b)| [(a, b), (b, a)]);
        let sym = InfoPropView::from_edges(n, doubled, ego).unwrap();
        prop_assert_eq!(&view, &sym);
        let again = InfoPropView::from_edges(n, view.edge_list(), ego).unwrap();
        prop_assert_eq!(view, again);
    }

    #[test]
    fn encoders_are_permutation_equivariant(
        (n, edges) in edges_strategy(7),
        perm_seed in any::<u64>(),
        values in prop::collection::vec(-1.0..1.0f64, 7 * 4),
    ) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let cfg = EncoderConfig { d_model: 4, heads: 2, context_depth: 1, graph_depth: 2, ..EncoderConfig::default() };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ctx = ContextEncoder::new(&mut store, &cfg, &mut rng).unwrap();
        let gnn = GraphEncoder::new(&mut store, &cfg, 2, true, &mut rng).unwrap();

        let x = Tensor::matrix(n, 4, values[..4 * n].to_vec()).unwrap();
        // Row perm[i] of the permuted input is row i of the original.
        let mut px = Tensor::zeros(&[n, 4]);
        for i in 0..n {
            for c in 0..4 {
                px.set(perm[i], c, x.get(i, c));
            }
        }
        let rel: Vec<(usize, usize, usize)> = edges.iter().enumerate().map(|(i, &(a, b))| (a, b, i % 2)).collect();
        let g = RelGraph::new(n, 2, rel.clone()).unwrap();
        let pg = RelGraph::new(n, 2, rel.iter().map(|&(a, b, r)| (perm[a], perm[b], r))).unwrap();

        let run = |x: &Tensor, g: &RelGraph| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let c = ctx.encode(&mut tape, &store, xv).unwrap();
            let e = gnn.encode(&mut tape, &store, &Aggregation::new(g), xv).unwrap();
            (tape.value(c).clone(), tape.value(e).clone())
        };
        let (c, e) = run(&x, &g);
        let (pc, pe) = run(&px, &pg);
        for i in 0..n {
            for col in 0..4 {
                prop_assert!((c.get(i, col) - pc.get(perm[i], col)).abs() < 1e-10);
                prop_assert!((e.get(i, col) - pe.get(perm[i], col)).abs() < 1e-10);
            }
        }
    }
}
