//! Markov-chain kinetic model of two competing informative states.
//!
//! Every node carries probabilities `[U, I1, I2]` (unknown, informed with
//! state 1, informed with state 2). Unknown nodes are converted by
//! informed neighbors at rate `beta_k`:
//!
//! ```text
//! dI_k,v/dt = U_v * beta_k * sum_j a_vj * I_k,j
//! dU_v/dt   = -sum_k dI_k,v/dt
//! ```
//!
//! There is no recovery term, so `U` only decreases and each `I_k` only
//! increases.

mod synth;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::InfoPropView;
use crate::numeric::Tensor;

pub use synth::{
    simulate_agents, simulate_synthetic, AgentRun, NodeState, SynthConfig, Topology,
    SYNTH_FEATURE_WIDTH,
};

/// Tolerance on `U + I1 + I2 = 1` when validating inputs.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Per-node probability rows `[U, I1, I2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateDistribution {
    rows: Vec<[f64; 3]>,
}

impl StateDistribution {
    pub fn new(rows: Vec<[f64; 3]>) -> Result<Self> {
        for (v, r) in rows.iter().enumerate() {
            if r.iter().any(|p| !(-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(p)) {
                return invalid(format!("node {v}: probability outside [0, 1]: {r:?}"));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return invalid(format!("node {v}: row sums to {s}"));
            }
        }
        Ok(Self { rows })
    }

    /// All nodes unknown except `seeds`, which start fully in the given state (1 or 2).
    pub fn seeded(n: usize, seeds: &[(usize, usize)]) -> Result<Self> {
        let mut rows = vec![[1.0, 0.0, 0.0]; n];
        for &(v, k) in seeds {
            if v >= n || !(1..=2).contains(&k) {
                return invalid(format!("bad seed ({v}, {k})"));
            }
            rows[v] = [0.0, 0.0, 0.0];
            rows[v][k] = 1.0;
        }
        Ok(Self { rows })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.cols() != 3 {
            return invalid(format!("state tensor needs 3 columns, got {}", t.cols()));
        }
        Self::new((0..t.rows()).map(|i| [t.get(i, 0), t.get(i, 1), t.get(i, 2)]).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.rows.iter().flatten().copied().collect();
        Tensor::matrix(self.rows.len(), 3, data).expect("n x 3")
    }

    pub fn rows(&self) -> &[[f64; 3]] {
        &self.rows
    }

    pub fn node_count(&self) -> usize {
        self.rows.len()
    }

    pub fn unknown(&self, v: usize) -> f64 {
        self.rows[v][0]
    }

    /// `I_k` of node `v`, `k` in `{1, 2}`.
    pub fn informed(&self, k: usize, v: usize) -> f64 {
        self.rows[v][k]
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Transition coefficients `[beta_1, beta_2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KineticParams {
    beta: [f64; 2],
}

impl KineticParams {
    pub fn new(beta1: f64, beta2: f64) -> Result<Self> {
        for b in [beta1, beta2] {
            if !b.is_finite() || b < 0.0 {
                return invalid(format!("transition coefficients must be finite and >= 0, got {b}"));
            }
        }
        Ok(Self {
            beta: [beta1, beta2],
        })
    }

    pub fn beta(&self) -> [f64; 2] {
        self.beta
    }
}

/// How the coupling term `sum_j a_vj * I_k,?` is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KineticForm {
    /// `sum_j a_vj * I_k,j`: informed neighbors drive the transition.
    #[default]
    NeighborState,
    /// `sum_j a_vj * I_k,v = degree(v) * I_k,v`: the node's own informed mass.
    OwnState,
    /// Uncoupled first-order kinetics `dI_k,v = beta_k * U_v`.
    Regular,
}

impl std::fmt::Display for KineticForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KineticForm::NeighborState => "neighbor-state",
            KineticForm::OwnState => "own-state",
            KineticForm::Regular => "regular",
        })
    }
}

impl std::str::FromStr for KineticForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neighbor-state" | "neighbor" => Ok(KineticForm::NeighborState),
            "own-state" | "literal" => Ok(KineticForm::OwnState),
            "regular" => Ok(KineticForm::Regular),
            other => Err(Error::Config(format!("unknown kinetic form {other}"))),
        }
    }
}

/// Symmetric 0/1 adjacency without self-loops, as neighbor lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut nb = vec![Vec::new(); n];
        for (a, b) in edges {
            if a >= n || b >= n {
                return invalid(format!("edge ({a}, {b}) outside 0..{n}"));
            }
            if a != b {
                nb[a].push(b);
                nb[b].push(a);
            }
        }
        for l in &mut nb {
            l.sort_unstable();
            l.dedup();
        }
        Ok(Self { neighbors: nb })
    }

    /// Validates a dense matrix: square, binary, symmetric, zero diagonal.
    pub fn from_dense(a: &Tensor) -> Result<Self> {
        let (n, m) = a.dims();
        if n != m {
            return invalid(format!("adjacency must be square, got {n}x{m}"));
        }
        let mut nb = vec![Vec::new(); n];
        for v in 0..n {
            for j in 0..n {
                let x = a.get(v, j);
                if x != 0.0 && x != 1.0 {
                    return invalid(format!("adjacency entry ({v}, {j}) = {x} is not binary"));
                }
                if x != a.get(j, v) {
                    return invalid(format!("adjacency not symmetric at ({v}, {j})"));
                }
                if x == 1.0 {
                    if v == j {
                        return invalid(format!("self-loop at node {v}"));
                    }
                    nb[v].push(j);
                }
            }
        }
        Ok(Self { neighbors: nb })
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    pub fn to_dense(&self) -> Tensor {
        let n = self.node_count();
        let mut t = Tensor::zeros(&[n, n]);
        for (v, nb) in self.neighbors.iter().enumerate() {
            for j in nb {
                t.set(v, *j, 1.0);
            }
        }
        t
    }
}

impl From<&InfoPropView> for Adjacency {
    fn from(view: &InfoPropView) -> Self {
        Self {
            neighbors: (0..view.node_count()).map(|v| view.neighbors(v).to_vec()).collect(),
        }
    }
}

/// Coupling strength `S_k(v)` that multiplies `U_v * beta_k`.
pub fn coupling(s: &StateDistribution, adj: &Adjacency, form: KineticForm, v: usize, k: usize) -> f64 {
    match form {
        KineticForm::NeighborState => adj.neighbors(v).iter().map(|j| s.informed(k, *j)).sum(),
        KineticForm::OwnState => adj.degree(v) as f64 * s.informed(k, v),
        KineticForm::Regular => 1.0,
    }
}

/// Right-hand side of the kinetic ODE, one `[dU, dI1, dI2]` row per node.
pub fn kinetic_derivatives(
    s: &StateDistribution,
    adj: &Adjacency,
    params: KineticParams,
    form: KineticForm,
) -> Result<Vec<[f64; 3]>> {
    if s.node_count() != adj.node_count() {
        return invalid(format!(
            "{} state rows for {} adjacency nodes",
            s.node_count(),
            adj.node_count()
        ));
    }
    if s.max_row_sum_error() > SIMPLEX_TOL {
        return invalid("state rows are off the probability simplex");
    }
    let beta = params.beta();
    Ok((0..s.node_count())
        .map(|v| {
            let u = s.unknown(v);
            let d1 = u * beta[0] * coupling(s, adj, form, v, 1);
            let d2 = u * beta[1] * coupling(s, adj, form, v, 2);
            [-(d1 + d2), d1, d2]
        })
        .collect())
}

/// Explicit-Euler trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<StateDistribution>,
    /// Number of (step, node) updates whose outflow exceeded the remaining
    /// `U` and was scaled down so that `U` stops at exactly 0.
    pub limited: usize,
}

/// Integrates the kinetic ODE with explicit Euler steps of size `dt`.
///
/// When a step would drive `U_v` below zero, the node's outflow is scaled
/// so that `U_v` lands on 0; informed mass is never removed, so `U` stays
/// non-increasing and each `I_k` non-decreasing. Rows are renormalized if
/// floating-point drift exceeds `1e-12`.
pub fn integrate(
    s0: &StateDistribution,
    adj: &Adjacency,
    params: KineticParams,
    form: KineticForm,
    steps: usize,
    dt: f64,
) -> Result<Trajectory> {
    if dt <= 0.0 || !dt.is_finite() {
        return invalid(format!("time step must be positive, got {dt}"));
    }
    let mut states = Vec::with_capacity(steps + 1);
    states.push(s0.clone());
    let mut limited = 0;
    for _ in 0..steps {
        let cur = states.last().expect("non-empty");
        let d = kinetic_derivatives(cur, adj, params, form)?;
        let mut next = Vec::with_capacity(cur.node_count());
        for (row, dr) in cur.rows().iter().zip(&d) {
            let gain = [dr[1] * dt, dr[2] * dt];
            let outflow = gain[0] + gain[1];
            let mut r = if outflow > row[0] {
                limited += 1;
                let k = if outflow > 0.0 { row[0] / outflow } else { 0.0 };
                [0.0, row[1] + gain[0] * k, row[2] + gain[1] * k]
            } else {
                [row[0] - outflow, row[1] + gain[0], row[2] + gain[1]]
            };
            let sum: f64 = r.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                r.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0) / sum);
            }
            next.push(r);
        }
        states.push(StateDistribution { rows: next });
    }
    Ok(Trajectory { states, limited })
}

/// Writes `t,node,U,I1,I2` rows.
pub fn write_trajectory_csv<W: Write>(mut w: W, states: &[StateDistribution]) -> Result<()> {
    writeln!(w, "t,node,U,I1,I2")?;
    for (t, s) in states.iter().enumerate() {
        for (v, r) in s.rows().iter().enumerate() {
            writeln!(w, "{t},{v},{},{},{}", r[0], r[1], r[2])?;
        }
    }
    Ok(())
}

/// Parses the output of [`write_trajectory_csv`].
pub fn read_trajectory_csv(text: &str) -> Result<Vec<StateDistribution>> {
    let mut by_t: Vec<Vec<[f64; 3]>> = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::Data(format!("line {}: expected 5 columns", ln + 1)));
        }
        let parse_u = |s: &str| s.trim().parse::<usize>().map_err(|e| Error::Data(format!("line {}: {e}", ln + 1)));
        let parse_f = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Data(format!("line {}: {e}", ln + 1)));
        let (t, v) = (parse_u(f[0])?, parse_u(f[1])?);
        if t >= by_t.len() {
            by_t.resize(t + 1, Vec::new());
        }
        if v != by_t[t].len() {
            return Err(Error::Data(format!("line {}: node rows out of order", ln + 1)));
        }
        by_t[t].push([parse_f(f[2])?, parse_f(f[3])?, parse_f(f[4])?]);
    }
    by_t.into_iter().map(StateDistribution::new).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> Adjacency {
        Adjacency::from_edges(3, [(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn no_source_no_change() {
        let s = StateDistribution::seeded(3, &[]).unwrap();
        let d = kinetic_derivatives(&s, &path3(), KineticParams::new(0.5, 0.5).unwrap(), KineticForm::NeighborState).unwrap();
        assert!(d.iter().flatten().all(|x| *x == 0.0));
    }

    #[test]
    fn two_node_hand_case() {
        let adj = Adjacency::from_edges(2, [(0, 1)]).unwrap();
        let s = StateDistribution::new(vec![[1.0, 0.0, 0.0], [0.25, 0.5, 0.25]]).unwrap();
        let d = kinetic_derivatives(&s, &adj, KineticParams::new(0.2, 0.1).unwrap(), KineticForm::NeighborState).unwrap();
        assert!((d[0][1] - 0.1).abs() < 1e-15);
        assert!((d[0][2] - 0.025).abs() < 1e-15);
        assert!((d[0][0] + 0.125).abs() < 1e-15);
    }

    #[test]
    fn derivatives_conserve_mass() {
        let s = StateDistribution::new(vec![[0.5, 0.3, 0.2], [0.1, 0.6, 0.3], [0.9, 0.05, 0.05]]).unwrap();
        for form in [KineticForm::NeighborState, KineticForm::OwnState, KineticForm::Regular] {
            let d = kinetic_derivatives(&s, &path3(), KineticParams::new(0.7, 0.4).unwrap(), form).unwrap();
            for r in d {
                assert!((r[0] + r[1] + r[2]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn own_state_reads_the_node_itself() {
        let s = StateDistribution::new(vec![[0.5, 0.5, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let d = kinetic_derivatives(&s, &path3(), KineticParams::new(1.0, 0.0).unwrap(), KineticForm::OwnState).unwrap();
        // node 0: degree 1, own I1 = 0.5 -> 0.5 * 1 * 0.5
        assert!((d[0][1] - 0.25).abs() < 1e-15);
        // node 1 has an informed neighbor but no own I1
        assert_eq!(d[1][1], 0.0);
    }

    #[test]
    fn simplex_violation_rejected() {
        assert!(StateDistribution::new(vec![[0.5, 0.5, 0.5]]).is_err());
        assert!(StateDistribution::new(vec![[1.5, -0.5, 0.0]]).is_err());
        assert!(KineticParams::new(-0.1, 0.0).is_err());
    }

    #[test]
    fn frozen_dynamics() {
        let s0 = StateDistribution::new(vec![[0.2, 0.8, 0.0], [1.0, 0.0, 0.0], [0.5, 0.0, 0.5]]).unwrap();
        let tr = integrate(&s0, &path3(), KineticParams::new(0.0, 0.0).unwrap(), KineticForm::NeighborState, 10, 1.0).unwrap();
        assert!(tr.states.iter().all(|s| *s == s0));
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let s0 = StateDistribution::seeded(3, &[(0, 1)]).unwrap();
        let tr = integrate(&s0, &path3(), KineticParams::new(0.3, 0.0).unwrap(), KineticForm::NeighborState, 0, 1.0).unwrap();
        assert_eq!(tr.states, vec![s0.clone()]);
        assert!(integrate(&s0, &path3(), KineticParams::new(0.3, 0.0).unwrap(), KineticForm::NeighborState, 1, 0.0).is_err());
    }

    #[test]
    fn outflow_is_limited_at_zero_unknown() {
        // a hub with many informed neighbors and a large rate overshoots in one step
        let adj = Adjacency::from_edges(5, (1..5).map(|i| (0, i))).unwrap();
        let s0 = StateDistribution::seeded(5, &[(1, 1), (2, 1), (3, 2), (4, 2)]).unwrap();
        let tr = integrate(&s0, &adj, KineticParams::new(1.0, 1.0).unwrap(), KineticForm::NeighborState, 1, 1.0).unwrap();
        assert_eq!(tr.limited, 1);
        let hub = tr.states[1].rows()[0];
        assert_eq!(hub[0], 0.0);
        assert!((hub[1] - 0.5).abs() < 1e-15 && (hub[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dense_adjacency_validation() {
        let mut a = Tensor::zeros(&[2, 2]);
        a.set(0, 1, 1.0);
        assert!(Adjacency::from_dense(&a).is_err());
        a.set(1, 0, 1.0);
        assert_eq!(Adjacency::from_dense(&a).unwrap(), Adjacency::from_edges(2, [(0, 1)]).unwrap());
        a.set(0, 0, 1.0);
        assert!(Adjacency::from_dense(&a).is_err());
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let s0 = StateDistribution::seeded(3, &[(0, 1)]).unwrap();
        let tr = integrate(&s0, &path3(), KineticParams::new(0.3, 0.1).unwrap(), KineticForm::NeighborState, 3, 1.0).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &tr.states).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,node,U,I1,I2\n"));
        assert_eq!(read_trajectory_csv(&text).unwrap(), tr.states);
    }
}
