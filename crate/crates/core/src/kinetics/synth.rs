//! Agent-based Monte-Carlo sampling of the kinetic process, and labeled
//! synthetic corpora built from it.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Adjacency, KineticParams};
use crate::error::{invalid, Error, Result};
use crate::graph::{Cascade, CascadeCorpus, PropagationTree, RelGraph, SocialNetwork, TaskDataset};
use crate::numeric::Tensor;
use crate::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeState {
    Unknown,
    Informed1,
    Informed2,
}

impl NodeState {
    pub fn index(self) -> usize {
        match self {
            NodeState::Unknown => 0,
            NodeState::Informed1 => 1,
            NodeState::Informed2 => 2,
        }
    }

    fn informed(k: usize) -> Self {
        if k == 1 {
            NodeState::Informed1
        } else {
            NodeState::Informed2
        }
    }
}

/// Result of one stochastic run.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentRun {
    pub terminal: Vec<NodeState>,
    /// Step at which each node left `Unknown` (0 for seeds).
    pub activated_at: Vec<Option<usize>>,
    pub steps: usize,
}

/// Synchronous discrete-time simulation. In each step an unknown node with
/// `n_k` informed-`k` neighbors is converted with probability
/// `1 - exp(-dt * sum_k beta_k n_k)`, landing in state `k` with probability
/// proportional to `beta_k n_k`. With a single active state this is exactly
/// `1 - exp(-beta_k dt n_k)`. Stops once no unknown node has a positive
/// conversion rate, or after `max_steps`.
pub fn simulate_agents<R: Rng>(
    adj: &Adjacency,
    initial: &[NodeState],
    params: KineticParams,
    dt: f64,
    max_steps: usize,
    rng: &mut R,
) -> Result<AgentRun> {
    let n = adj.node_count();
    if initial.len() != n {
        return invalid(format!("{} initial states for {n} nodes", initial.len()));
    }
    let beta = params.beta();
    let mut state = initial.to_vec();
    let mut activated_at: Vec<Option<usize>> = state
        .iter()
        .map(|s| (*s != NodeState::Unknown).then_some(0))
        .collect();
    let mut steps = 0;
    for step in 1..=max_steps {
        let prev = state.clone();
        let mut exposed = false;
        for v in 0..n {
            if prev[v] != NodeState::Unknown {
                continue;
            }
            let mut pressure = [0.0; 2];
            for &j in adj.neighbors(v) {
                match prev[j] {
                    NodeState::Informed1 => pressure[0] += beta[0],
                    NodeState::Informed2 => pressure[1] += beta[1],
                    NodeState::Unknown => {}
                }
            }
            let total = pressure[0] + pressure[1];
            if total <= 0.0 {
                continue;
            }
            exposed = true;
            let p = 1.0 - (-dt * total).exp();
            if rng.random::<f64>() < p {
                let k = if rng.random::<f64>() * total < pressure[0] { 1 } else { 2 };
                state[v] = NodeState::informed(k);
                activated_at[v] = Some(step);
            }
        }
        if !exposed {
            break;
        }
        steps = step;
    }
    Ok(AgentRun {
        terminal: state,
        activated_at,
        steps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    /// Random recursive tree: node `i` attaches to a uniform earlier node.
    Tree,
    /// Ring lattice with four neighbors per node and 20% rewiring.
    SmallWorld,
    /// One hub connected to every other node.
    Star,
}

impl std::str::FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tree" => Ok(Topology::Tree),
            "small-world" | "smallworld" => Ok(Topology::SmallWorld),
            "star" => Ok(Topology::Star),
            other => Err(Error::Config(format!("unknown topology {other}"))),
        }
    }
}

/// Number of feature columns produced by the synthesizer.
pub const SYNTH_FEATURE_WIDTH: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub task: Task,
    /// Trees (graph task), components (node task) or cascades (link task).
    pub n_graphs: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Topologies drawn uniformly per graph/component.
    pub topologies: Vec<Topology>,
    pub beta: KineticParams,
    /// Label flip probability.
    pub noise: f64,
    /// Standard deviation of the Gaussian noise added to every feature.
    pub feature_noise: f64,
    pub seed: u64,
    pub max_steps: usize,
    /// Probability of planting one opposite-state seed next to the ego's.
    pub counter_seed_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            task: Task::Graph,
            n_graphs: 200,
            min_nodes: 5,
            max_nodes: 15,
            topologies: vec![Topology::Tree],
            beta: KineticParams::new(0.4, 0.1).expect("valid"),
            noise: 0.1,
            feature_noise: 0.1,
            seed: 0,
            max_steps: 32,
            counter_seed_prob: 0.5,
        }
    }
}

/// Undirected topology edges over `0..n`; node 0 is the designated ego/hub.
fn topology_edges<R: Rng>(topology: Topology, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    match topology {
        Topology::Tree => (1..n).map(|i| (rng.random_range(0..i), i)).collect(),
        Topology::Star => (1..n).map(|i| (0, i)).collect(),
        Topology::SmallWorld => {
            let mut edges = Vec::new();
            let reach = if n > 4 { 2 } else { 1 };
            for i in 0..n {
                for k in 1..=reach {
                    let j = (i + k) % n;
                    if i == j {
                        continue;
                    }
                    if n > 3 && rng.random::<f64>() < 0.2 {
                        let t = rng.random_range(0..n);
                        if t != i {
                            edges.push((i, t));
                            continue;
                        }
                    }
                    edges.push((i, j));
                }
            }
            edges
        }
    }
}

/// BFS spanning tree from node 0, returned as parent -> child edges. Nodes
/// left disconnected by rewiring are attached to a random reached node.
fn spanning_tree<R: Rng>(n: usize, edges: &[(usize, usize)], rng: &mut R) -> Result<Vec<(usize, usize)>> {
    let adj = Adjacency::from_edges(n, edges.iter().copied())?;
    let mut seen = vec![false; n];
    let mut order = vec![0];
    let mut tree = Vec::with_capacity(n.saturating_sub(1));
    seen[0] = true;
    let mut queue = VecDeque::from([0]);
    while let Some(v) = queue.pop_front() {
        for &j in adj.neighbors(v) {
            if !seen[j] {
                seen[j] = true;
                tree.push((v, j));
                order.push(j);
                queue.push_back(j);
            }
        }
    }
    for v in 0..n {
        if !seen[v] {
            let p = order[rng.random_range(0..order.len())];
            seen[v] = true;
            tree.push((p, v));
            order.push(v);
        }
    }
    Ok(tree)
}

struct Episode {
    run: AgentRun,
    ego_state: NodeState,
}

/// Seeds the ego with a uniformly chosen active state and, with
/// `counter_seed_prob`, one random other node with the opposite state (when
/// that state has a non-zero rate), then runs the agent simulation.
fn run_episode<R: Rng>(adj: &Adjacency, ego: usize, cfg: &SynthConfig, rng: &mut R) -> Result<Episode> {
    let n = adj.node_count();
    let beta = cfg.beta.beta();
    let active: Vec<usize> = (1..=2).filter(|k| beta[k - 1] > 0.0).collect();
    let ego_k = match active.as_slice() {
        [] => 1,
        [k] => *k,
        ks => ks[rng.random_range(0..ks.len())],
    };
    let mut initial = vec![NodeState::Unknown; n];
    initial[ego] = NodeState::informed(ego_k);
    let other = 3 - ego_k;
    if n > 1 && beta[other - 1] > 0.0 && rng.random::<f64>() < cfg.counter_seed_prob {
        let mut v = rng.random_range(0..n - 1);
        if v >= ego {
            v += 1;
        }
        initial[v] = NodeState::informed(other);
    }
    let run = simulate_agents(adj, &initial, cfg.beta, 1.0, cfg.max_steps, rng)?;
    Ok(Episode {
        run,
        ego_state: initial[ego],
    })
}

/// Per-node features: one-hot terminal state, normalized activation
/// step, normalized degree, and a constant column, plus Gaussian noise.
fn node_features<R: Rng>(
    adj: &Adjacency,
    run: &AgentRun,
    cfg: &SynthConfig,
    normal: &Normal<f64>,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let n = adj.node_count();
    let max_deg = (0..n).map(|v| adj.degree(v)).max().unwrap_or(0).max(1) as f64;
    let horizon = run.steps.max(1) as f64;
    (0..n)
        .map(|v| {
            let mut row = vec![0.0; SYNTH_FEATURE_WIDTH];
            row[run.terminal[v].index()] = 1.0;
            row[3] = run.activated_at[v].map_or(1.5, |s| s as f64 / horizon);
            row[4] = adj.degree(v) as f64 / max_deg;
            row[5] = 1.0;
            if cfg.feature_noise > 0.0 {
                for x in &mut row {
                    *x += normal.sample(rng);
                }
            }
            row
        })
        .collect()
}

fn flip<R: Rng>(label: usize, noise: f64, rng: &mut R) -> usize {
    if rng.random::<f64>() < noise {
        1 - label
    } else {
        label
    }
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    if cfg.n_graphs == 0 || cfg.max_nodes == 0 {
        return invalid("synthetic corpus needs at least one graph with at least one node");
    }
    if cfg.min_nodes == 0 || cfg.min_nodes > cfg.max_nodes {
        return invalid(format!("bad node range {}..={}", cfg.min_nodes, cfg.max_nodes));
    }
    if cfg.topologies.is_empty() {
        return invalid("no topology given");
    }
    if !(0.0..=1.0).contains(&cfg.noise) || !(0.0..=1.0).contains(&cfg.counter_seed_prob) {
        return invalid("label noise and counter-seed probability must lie in [0, 1]");
    }
    if !(cfg.feature_noise >= 0.0 && cfg.feature_noise.is_finite()) {
        return invalid("feature noise must be a finite non-negative deviation");
    }
    if cfg.task == Task::Link && cfg.max_nodes < 3 {
        return invalid("link corpora need at least three users");
    }
    Ok(())
}

/// Builds a labeled dataset for `cfg.task` by sampling the kinetic process.
/// Deterministic under `cfg.seed`.
///
/// * graph: one propagation tree per graph; label 1 when informed-1 nodes
///   are the terminal majority (ties go to the ego's state).
/// * node: `n_graphs` disjoint components with two relation types; a node
///   is labeled 1 when it ends in informed-1.
/// * link: one network of `max_nodes` users; each cascade lists the users
///   in activation order starting from a random seed user.
pub fn simulate_synthetic(cfg: &SynthConfig) -> Result<TaskDataset> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.feature_noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    match cfg.task {
        Task::Graph => synth_trees(cfg, &mut rng, &normal),
        Task::Node => synth_network(cfg, &mut rng, &normal),
        Task::Link => synth_cascades(cfg, &mut rng, &normal),
    }
}

fn pick_topology<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Topology {
    cfg.topologies[rng.random_range(0..cfg.topologies.len())]
}

fn synth_trees(cfg: &SynthConfig, rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> Result<TaskDataset> {
    let mut trees = Vec::with_capacity(cfg.n_graphs);
    for g in 0..cfg.n_graphs {
        let n = rng.random_range(cfg.min_nodes..=cfg.max_nodes);
        let topo = pick_topology(cfg, rng);
        let raw = topology_edges(topo, n, rng);
        let tree_edges = spanning_tree(n, &raw, rng)?;
        let adj = Adjacency::from_edges(n, tree_edges.iter().copied())?;
        let ep = run_episode(&adj, 0, cfg, rng)?;
        let c1 = ep.run.terminal.iter().filter(|s| **s == NodeState::Informed1).count();
        let c2 = ep.run.terminal.iter().filter(|s| **s == NodeState::Informed2).count();
        let label = match c1.cmp(&c2) {
            std::cmp::Ordering::Greater => 1,
            std::cmp::Ordering::Less => 0,
            std::cmp::Ordering::Equal => usize::from(ep.ego_state == NodeState::Informed1),
        };
        let label = flip(label, cfg.noise, rng);
        let feats = node_features(&adj, &ep.run, cfg, normal, rng);
        let nodes = (0..n).map(|i| i.to_string()).collect();
        trees.push(PropagationTree::from_indices(
            format!("g{g}"),
            nodes,
            0,
            tree_edges,
            Tensor::from_rows(&feats)?,
            label,
        )?);
    }
    Ok(TaskDataset::Trees(trees))
}

fn synth_network(cfg: &SynthConfig, rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> Result<TaskDataset> {
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut features = Vec::new();
    let mut labels = BTreeMap::new();
    for g in 0..cfg.n_graphs {
        let n = rng.random_range(cfg.min_nodes..=cfg.max_nodes);
        let offset = nodes.len();
        let topo = pick_topology(cfg, rng);
        let raw = topology_edges(topo, n, rng);
        let adj = Adjacency::from_edges(n, raw.iter().copied())?;
        let ep = run_episode(&adj, 0, cfg, rng)?;
        for (a, b) in raw {
            edges.push((a + offset, b + offset, rng.random_range(0..2)));
        }
        for (v, s) in ep.run.terminal.iter().enumerate() {
            let y = usize::from(*s == NodeState::Informed1);
            labels.insert(offset + v, flip(y, cfg.noise, rng));
        }
        features.extend(node_features(&adj, &ep.run, cfg, normal, rng));
        nodes.extend((0..n).map(|v| format!("c{g}_{v}")));
    }
    let graph = RelGraph::new(nodes.len(), 2, edges)?;
    let features = Tensor::from_rows(&features)?;
    Ok(TaskDataset::Network(SocialNetwork::from_parts(nodes, graph, features, labels)?))
}

fn synth_cascades(cfg: &SynthConfig, rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> Result<TaskDataset> {
    let n = cfg.max_nodes;
    let topo = pick_topology(cfg, rng);
    let raw = topology_edges(topo, n, rng);
    let adj = Adjacency::from_edges(n, raw.iter().copied())?;
    let users: Vec<String> = (0..n).map(|v| format!("u{v}")).collect();

    let mut cascades = Vec::with_capacity(cfg.n_graphs);
    let mut attempts = 0;
    while cascades.len() < cfg.n_graphs {
        attempts += 1;
        if attempts > 100 * cfg.n_graphs {
            return invalid("rates too low: cascades keep dying before a second activation");
        }
        let seed_user = rng.random_range(0..n);
        let ep = run_episode(&adj, seed_user, cfg, rng)?;
        let mut order: Vec<(usize, usize)> = ep
            .run
            .activated_at
            .iter()
            .enumerate()
            .filter_map(|(v, s)| s.map(|s| (s, v)))
            .collect();
        if order.len() < 2 {
            continue;
        }
        // random order within one step, seeds first
        order.shuffle(rng);
        order.sort_by_key(|(s, v)| (*s, usize::from(*v != seed_user)));
        let events = order
            .iter()
            .enumerate()
            .map(|(pos, (s, v))| (users[*v].clone(), (*s * 3600 + pos) as f64))
            .collect();
        cascades.push(Cascade::new(events)?);
    }

    let idle = AgentRun {
        terminal: vec![NodeState::Unknown; n],
        activated_at: vec![None; n],
        steps: 1,
    };
    let features = node_features(&adj, &idle, cfg, normal, rng);
    let graph = RelGraph::new(n, 1, raw.into_iter().map(|(a, b)| (a, b, 0)))?;
    let network = SocialNetwork::from_parts(users, graph, Tensor::from_rows(&features)?, BTreeMap::new())?;
    Ok(TaskDataset::Cascades(CascadeCorpus::new(cascades, network)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturating_rate_informs_every_node() {
        let cfg = SynthConfig {
            n_graphs: 10,
            beta: KineticParams::new(1e6, 0.0).unwrap(),
            noise: 0.0,
            feature_noise: 0.0,
            ..SynthConfig::default()
        };
        let TaskDataset::Trees(trees) = simulate_synthetic(&cfg).unwrap() else {
            panic!("graph task yields trees");
        };
        for t in &trees {
            assert_eq!(t.label(), 1);
            for v in 0..t.node_count() {
                // noise 0: the one-hot block is exact
                assert_eq!(&t.features().row_slice(v)[..3], &[0.0, 1.0, 0.0]);
            }
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        for task in [Task::Graph, Task::Node, Task::Link] {
            let cfg = SynthConfig {
                task,
                n_graphs: 8,
                topologies: vec![Topology::Tree, Topology::SmallWorld, Topology::Star],
                ..SynthConfig::default()
            };
            assert_eq!(simulate_synthetic(&cfg).unwrap(), simulate_synthetic(&cfg).unwrap());
            let other = SynthConfig { seed: 1, ..cfg.clone() };
            assert_ne!(simulate_synthetic(&cfg).unwrap(), simulate_synthetic(&other).unwrap());
        }
    }

    #[test]
    fn degenerate_config_rejected() {
        let cfg = SynthConfig {
            max_nodes: 0,
            min_nodes: 0,
            ..SynthConfig::default()
        };
        assert!(simulate_synthetic(&cfg).is_err());
        let cfg = SynthConfig {
            n_graphs: 0,
            ..SynthConfig::default()
        };
        assert!(simulate_synthetic(&cfg).is_err());
    }

    #[test]
    fn node_and_link_shapes() {
        let cfg = SynthConfig {
            task: Task::Node,
            n_graphs: 3,
            ..SynthConfig::default()
        };
        let TaskDataset::Network(net) = simulate_synthetic(&cfg).unwrap() else {
            panic!()
        };
        assert_eq!(net.labels().len(), net.node_count());
        assert_eq!(net.n_relations(), 2);

        let cfg = SynthConfig {
            task: Task::Link,
            n_graphs: 12,
            max_nodes: 30,
            topologies: vec![Topology::SmallWorld],
            ..SynthConfig::default()
        };
        let TaskDataset::Cascades(c) = simulate_synthetic(&cfg).unwrap() else {
            panic!()
        };
        assert_eq!(c.cascades().len(), 12);
        assert!(c.cascades().iter().all(|c| c.len() >= 2));
    }
}
