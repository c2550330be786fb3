//! Independent reference computations for the graph, kinetic and
//! simulation code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rprl_core::kinetics::{
    integrate, kinetic_derivatives, simulate_agents, Adjacency, KineticForm, KineticParams, NodeState,
    StateDistribution,
};
use rprl_core::{InfoPropView, UNREACHABLE};

fn floyd_warshall(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for &(a, b) in edges {
        if a != b {
            d[a][b] = 1;
            d[b][a] = 1;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

#[test]
fn hop_distances_match_floyd_warshall() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let n = rng.random_range(1..=25);
        let edges: Vec<(usize, usize)> = (0..rng.random_range(0..2 * n))
            .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
            .collect();
        let dist = floyd_warshall(n, &edges);
        let ego = rng.random_range(0..n);
        let view = InfoPropView::from_edges(n, edges.iter().copied(), ego).unwrap();
        for j in 0..n {
            let expected = if dist[ego][j] >= usize::MAX / 4 { UNREACHABLE } else { dist[ego][j] };
            assert_eq!(view.hops()[j], expected, "n={n} ego={ego} j={j}");
        }
        let ecc = (0..n).filter(|j| view.hops()[*j] != UNREACHABLE).map(|j| dist[ego][j]).max().unwrap();
        assert_eq!(view.horizon(), ecc);
    }
}

fn rk4(s0: &[[f64; 3]], adj: &Adjacency, params: KineticParams, t_end: f64, steps: usize) -> Vec<[f64; 3]> {
    let h = t_end / steps as f64;
    let f = |rows: &[[f64; 3]]| {
        kinetic_derivatives(&StateDistribution::new(rows.to_vec()).unwrap(), adj, params, KineticForm::NeighborState).unwrap()
    };
    let axpy = |x: &[[f64; 3]], k: &[[f64; 3]], a: f64| -> Vec<[f64; 3]> {
        x.iter().zip(k).map(|(r, d)| [r[0] + a * d[0], r[1] + a * d[1], r[2] + a * d[2]]).collect()
    };
    let mut x = s0.to_vec();
    for _ in 0..steps {
        let k1 = f(&x);
        let k2 = f(&axpy(&x, &k1, h / 2.0));
        let k3 = f(&axpy(&x, &k2, h / 2.0));
        let k4 = f(&axpy(&x, &k3, h));
        x = x
            .iter()
            .enumerate()
            .map(|(v, r)| {
                let mut out = *r;
                for c in 0..3 {
                    out[c] += h / 6.0 * (k1[v][c] + 2.0 * k2[v][c] + 2.0 * k3[v][c] + k4[v][c]);
                }
                out
            })
            .collect();
    }
    x
}

#[test]
fn euler_converges_at_first_order_to_rk4() {
    let adj = Adjacency::from_edges(6, [(0, 1), (1, 2), (2, 3), (1, 4), (4, 5), (5, 2)]).unwrap();
    let params = KineticParams::new(0.4, 0.15).unwrap();
    let s0 = StateDistribution::seeded(6, &[(0, 1), (3, 2)]).unwrap();
    let t_end = 2.0;
    let reference = rk4(s0.rows(), &adj, params, t_end, 4000);

    let mut errors = Vec::new();
    for steps in [20, 40, 80, 160] {
        let traj = integrate(&s0, &adj, params, KineticForm::NeighborState, steps, t_end / steps as f64).unwrap();
        assert_eq!(traj.limited, 0);
        let last = traj.states.last().unwrap();
        let err = last
            .rows()
            .iter()
            .zip(&reference)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f64::max);
        errors.push(err);
    }
    for w in errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.8..2.2).contains(&ratio), "halving dt should halve the error: {errors:?}");
    }
}

#[test]
fn star_leaf_activation_matches_exponential_law() {
    // Hub informed-1, leaves unknown; a leaf has exactly one informed
    // neighbor, so after one step it is informed with p = 1 - exp(-0.3).
    let leaves = 4;
    let adj = Adjacency::from_edges(leaves + 1, (1..=leaves).map(|l| (0, l))).unwrap();
    let params = KineticParams::new(0.3, 0.0).unwrap();
    let mut initial = vec![NodeState::Unknown; leaves + 1];
    initial[0] = NodeState::Informed1;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let runs = 10_000;
    let mut hits = 0usize;
    for _ in 0..runs {
        let run = simulate_agents(&adj, &initial, params, 1.0, 1, &mut rng).unwrap();
        hits += usize::from(run.terminal[1] == NodeState::Informed1);
    }
    let p = 1.0 - (-0.3f64).exp();
    let sigma = (p * (1.0 - p) / runs as f64).sqrt();
    let observed = hits as f64 / runs as f64;
    assert!((observed - p).abs() < 3.0 * sigma, "observed {observed}, expected {p} ± {}", 3.0 * sigma);
}

#[test]
fn agent_mean_tracks_the_ode_on_a_star() {
    // On a star with the hub informed, leaves only ever see the hub, so the
    // leaf unknown probability after t unit steps is exp(-beta t) exactly in
    // the agent model and approximately in the ODE.
    let adj = Adjacency::from_edges(11, (1..=10).map(|l| (0, l))).unwrap();
    let params = KineticParams::new(0.2, 0.0).unwrap();
    let mut initial = vec![NodeState::Unknown; 11];
    initial[0] = NodeState::Informed1;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (runs, steps) = (2000, 3);
    let mut unknown = 0usize;
    for _ in 0..runs {
        let run = simulate_agents(&adj, &initial, params, 1.0, steps, &mut rng).unwrap();
        unknown += run.terminal[1..].iter().filter(|s| **s == NodeState::Unknown).count();
    }
    let observed = unknown as f64 / (runs * 10) as f64;
    let traj = integrate(
        &StateDistribution::seeded(11, &[(0, 1)]).unwrap(),
        &adj,
        params,
        KineticForm::NeighborState,
        3000,
        steps as f64 / 3000.0,
    )
    .unwrap();
    let ode = traj.states.last().unwrap().unknown(1);
    assert!((observed - ode).abs() < 0.02, "agent {observed}, ode {ode}");
}
