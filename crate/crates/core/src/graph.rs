//! Task input shapes and the shared information-propagation view.
//!
//! Every task input (propagation tree, social network, cascade corpus) is
//! reduced to a [`RelGraph`]: a node-indexed, relation-tagged, symmetrized
//! edge set. An [`InfoPropView`] is that graph collapsed to a single
//! undirected adjacency plus breadth-first hop distances from an ego node.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use crate::error::{invalid, Error, Result};
use crate::numeric::Tensor;

/// Hop distance of nodes not reachable from the ego. Larger than any node count.
pub const UNREACHABLE: usize = usize::MAX;

/// Relation-tagged undirected graph over nodes `0..n`.
///
/// Edges are stored once per unordered pair and relation, with the smaller
/// endpoint first. Self-loops are dropped and duplicates merged on
/// construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelGraph {
    n: usize,
    n_relations: usize,
    edges: Vec<(usize, usize, usize)>,
}

impl RelGraph {
    pub fn new(
        n: usize,
        n_relations: usize,
        edges: impl IntoIterator<Item = (usize, usize, usize)>,
    ) -> Result<Self> {
        if n_relations == 0 {
            return invalid("a graph needs at least one relation type");
        }
        let mut set = BTreeSet::new();
        for (a, b, r) in edges {
            if a >= n || b >= n {
                return invalid(format!("edge ({a}, {b}) outside node range 0..{n}"));
            }
            if r >= n_relations {
                return invalid(format!("relation {r} outside 0..{n_relations}"));
            }
            if a == b {
                continue;
            }
            set.insert((a.min(b), a.max(b), r));
        }
        Ok(Self {
            n,
            n_relations,
            edges: set.into_iter().collect(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn n_relations(&self) -> usize {
        self.n_relations
    }

    pub fn edges(&self) -> &[(usize, usize, usize)] {
        &self.edges
    }

    /// Sorted, deduplicated neighbor lists over all relations.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![BTreeSet::new(); self.n];
        for &(a, b, _) in &self.edges {
            nb[a].insert(b);
            nb[b].insert(a);
        }
        nb.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    pub fn view(&self, ego: usize) -> Result<InfoPropView> {
        InfoPropView::from_neighbors(self.neighbors(), ego)
    }

    /// Induced subgraph on `nodes` (given in the order they should be
    /// renumbered).
    pub fn induced(&self, nodes: &[usize]) -> Result<RelGraph> {
        let pos: HashMap<usize, usize> = nodes.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        let edges = self.edges.iter().filter_map(|(a, b, r)| {
            Some((*pos.get(a)?, *pos.get(b)?, *r))
        });
        RelGraph::new(nodes.len(), self.n_relations, edges)
    }
}

/// Task-agnostic propagation abstraction: undirected adjacency, ego node
/// and BFS hop distances.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InfoPropView {
    neighbors: Vec<Vec<usize>>,
    ego: usize,
    hop: Vec<usize>,
    horizon: usize,
}

impl InfoPropView {
    /// Builds a view from an arbitrary edge list over nodes `0..n`.
    /// Direction is ignored, self-loops stripped, duplicates merged.
    pub fn from_edges(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        ego: usize,
    ) -> Result<Self> {
        RelGraph::new(n, 1, edges.into_iter().map(|(a, b)| (a, b, 0)))?.view(ego)
    }

    fn from_neighbors(neighbors: Vec<Vec<usize>>, ego: usize) -> Result<Self> {
        let n = neighbors.len();
        if ego >= n {
            return invalid(format!("ego {ego} is not a node (0..{n})"));
        }
        let hop = bfs(&neighbors, ego);
        let horizon = hop.iter().filter(|h| **h != UNREACHABLE).copied().max().unwrap_or(0);
        Ok(Self {
            neighbors,
            ego,
            hop,
            horizon,
        })
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn ego(&self) -> usize {
        self.ego
    }

    /// Largest finite hop distance (0 for an isolated ego).
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn hops(&self) -> &[usize] {
        &self.hop
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    pub fn hop_distance(&self, j: usize) -> Result<usize> {
        self.hop
            .get(j)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("node {j} not in view of {} nodes", self.hop.len())))
    }

    pub fn is_reachable(&self, j: usize) -> bool {
        self.hop.get(j).is_some_and(|h| *h != UNREACHABLE)
    }

    pub fn reachable(&self) -> Vec<bool> {
        self.hop.iter().map(|h| *h != UNREACHABLE).collect()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }

    /// Dense symmetric 0/1 adjacency `a[v][j]`.
    pub fn adjacency(&self) -> Tensor {
        let n = self.node_count();
        let mut t = Tensor::zeros(&[n, n]);
        for (v, nb) in self.neighbors.iter().enumerate() {
            for j in nb {
                t.set(v, *j, 1.0);
            }
        }
        t
    }

    /// Undirected edge list with the smaller endpoint first.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (v, nb) in self.neighbors.iter().enumerate() {
            out.extend(nb.iter().filter(|j| **j > v).map(|j| (v, *j)));
        }
        out
    }
}

fn bfs(neighbors: &[Vec<usize>], source: usize) -> Vec<usize> {
    let mut hop = vec![UNREACHABLE; neighbors.len()];
    hop[source] = 0;
    let mut queue = VecDeque::from([source]);
    while let Some(v) = queue.pop_front() {
        for &j in &neighbors[v] {
            if hop[j] == UNREACHABLE {
                hop[j] = hop[v] + 1;
                queue.push_back(j);
            }
        }
    }
    hop
}

fn index_ids(nodes: &[String]) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(nodes.len());
    for (i, id) in nodes.iter().enumerate() {
        if index.insert(id.clone(), i).is_some() {
            return invalid(format!("duplicate node id {id}"));
        }
    }
    Ok(index)
}

fn lookup(index: &HashMap<String, usize>, id: &str) -> Result<usize> {
    index
        .get(id)
        .copied()
        .ok_or_else(|| Error::InvalidInput(format!("unknown node id {id}")))
}

fn features_tensor(rows: Vec<Vec<f64>>, n: usize) -> Result<Tensor> {
    if rows.len() != n {
        return invalid(format!("{} feature rows for {n} nodes", rows.len()));
    }
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0, 0]));
    }
    Tensor::from_rows(&rows)
}

fn check_label(label: usize) -> Result<usize> {
    if label > 1 {
        return invalid(format!("label {label} is not binary"));
    }
    Ok(label)
}

/// Reply/retweet tree rooted at the source post.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationTree {
    id: String,
    nodes: Vec<String>,
    root: usize,
    edges: Vec<(usize, usize)>,
    features: Tensor,
    label: usize,
}

impl PropagationTree {
    /// Validates the tree shape: one root, one parent per non-root node,
    /// every node reachable from the root. Self-loops and repeated edges
    /// are dropped before validation.
    pub fn new(
        id: impl Into<String>,
        nodes: Vec<String>,
        root: &str,
        edges: &[(String, String)],
        features: Vec<Vec<f64>>,
        label: usize,
    ) -> Result<Self> {
        let index = index_ids(&nodes)?;
        let root = lookup(&index, root)?;
        let mut idx_edges = Vec::with_capacity(edges.len());
        for (p, c) in edges {
            idx_edges.push((lookup(&index, p)?, lookup(&index, c)?));
        }
        let features = features_tensor(features, nodes.len())?;
        Self::from_indices(id, nodes, root, idx_edges, features, label)
    }

    pub fn from_indices(
        id: impl Into<String>,
        nodes: Vec<String>,
        root: usize,
        edges: Vec<(usize, usize)>,
        features: Tensor,
        label: usize,
    ) -> Result<Self> {
        let id = id.into();
        let n = nodes.len();
        if root >= n {
            return invalid(format!("tree {id}: root index {root} outside 0..{n}"));
        }
        if features.rows() != n {
            return invalid(format!("tree {id}: {} feature rows for {n} nodes", features.rows()));
        }
        let mut seen = BTreeSet::new();
        let mut clean = Vec::with_capacity(edges.len());
        let mut parent = vec![None; n];
        for (p, c) in edges {
            if p >= n || c >= n {
                return invalid(format!("tree {id}: edge ({p}, {c}) outside 0..{n}"));
            }
            if p == c || !seen.insert((p, c)) {
                continue;
            }
            if c == root {
                return invalid(format!("tree {id}: root has a parent"));
            }
            if parent[c].replace(p).is_some() {
                return invalid(format!("tree {id}: node {} has two parents", nodes[c]));
            }
            clean.push((p, c));
        }
        // n - 1 parent links plus full reachability from the root rules out cycles
        let mut children = vec![Vec::new(); n];
        for &(p, c) in &clean {
            children[p].push(c);
        }
        let mut visited = vec![false; n];
        let mut stack = vec![root];
        visited[root] = true;
        while let Some(v) = stack.pop() {
            for &c in &children[v] {
                if !visited[c] {
                    visited[c] = true;
                    stack.push(c);
                }
            }
        }
        if let Some(orphan) = visited.iter().position(|v| !v) {
            return invalid(format!(
                "tree {id}: node {} is not reachable from the root",
                nodes[orphan]
            ));
        }
        Ok(Self {
            id,
            nodes,
            root,
            edges: clean,
            features,
            label: check_label(label)?,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn rel_graph(&self) -> RelGraph {
        RelGraph::new(self.nodes.len(), 1, self.edges.iter().map(|(p, c)| (*p, *c, 0)))
            .expect("tree edges validated on construction")
    }

    /// Propagation view rooted at the source post.
    pub fn view(&self) -> InfoPropView {
        self.rel_graph().view(self.root).expect("root validated")
    }

    /// View from an arbitrary ego, addressed by node id.
    pub fn view_from(&self, ego: &str) -> Result<InfoPropView> {
        let i = self
            .nodes
            .iter()
            .position(|n| n == ego)
            .ok_or_else(|| Error::InvalidInput(format!("unknown ego id {ego}")))?;
        self.rel_graph().view(i)
    }
}

/// Multi-relational social graph with partially labeled nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct SocialNetwork {
    nodes: Vec<String>,
    index: HashMap<String, usize>,
    graph: RelGraph,
    features: Tensor,
    labels: BTreeMap<usize, usize>,
}

impl SocialNetwork {
    /// `edges` are `(src, dst, relation)` triples over node ids.
    pub fn new(
        nodes: Vec<String>,
        n_relations: usize,
        edges: &[(String, String, usize)],
        features: Vec<Vec<f64>>,
        labels: &[(String, usize)],
    ) -> Result<Self> {
        let index = index_ids(&nodes)?;
        let mut idx_edges = Vec::with_capacity(edges.len());
        for (a, b, r) in edges {
            idx_edges.push((lookup(&index, a)?, lookup(&index, b)?, *r));
        }
        let mut idx_labels = BTreeMap::new();
        for (id, y) in labels {
            idx_labels.insert(lookup(&index, id)?, check_label(*y)?);
        }
        let features = features_tensor(features, nodes.len())?;
        let graph = RelGraph::new(nodes.len(), n_relations, idx_edges)?;
        Self::from_parts(nodes, graph, features, idx_labels)
    }

    pub fn from_parts(
        nodes: Vec<String>,
        graph: RelGraph,
        features: Tensor,
        labels: BTreeMap<usize, usize>,
    ) -> Result<Self> {
        let index = index_ids(&nodes)?;
        if graph.node_count() != nodes.len() {
            return invalid("graph and node list disagree on node count");
        }
        if features.rows() != nodes.len() && !(nodes.is_empty() && features.is_empty()) {
            return invalid(format!(
                "{} feature rows for {} nodes",
                features.rows(),
                nodes.len()
            ));
        }
        if let Some((bad, _)) = labels.iter().find(|(v, y)| **v >= nodes.len() || **y > 1) {
            return invalid(format!("bad label entry for node index {bad}"));
        }
        Ok(Self {
            nodes,
            index,
            graph,
            features,
            labels,
        })
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_index(&self, id: &str) -> Result<usize> {
        lookup(&self.index, id)
    }

    pub fn graph(&self) -> &RelGraph {
        &self.graph
    }

    pub fn n_relations(&self) -> usize {
        self.graph.n_relations()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_width(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> &BTreeMap<usize, usize> {
        &self.labels
    }

    pub fn view(&self, ego: &str) -> Result<InfoPropView> {
        self.graph.view(self.node_index(ego)?)
    }

    /// K-hop ego subgraph around `target`; the target is local node 0 and
    /// the remaining nodes follow BFS discovery order.
    pub fn ego_subgraph(&self, target: usize, k: usize) -> Result<EgoSubgraph> {
        if target >= self.nodes.len() {
            return invalid(format!("target {target} outside 0..{}", self.nodes.len()));
        }
        let neighbors = self.graph.neighbors();
        let mut order = vec![target];
        let mut depth = HashMap::from([(target, 0usize)]);
        let mut queue = VecDeque::from([target]);
        while let Some(v) = queue.pop_front() {
            let d = depth[&v];
            if d == k {
                continue;
            }
            for &j in &neighbors[v] {
                if let std::collections::hash_map::Entry::Vacant(e) = depth.entry(j) {
                    e.insert(d + 1);
                    order.push(j);
                    queue.push_back(j);
                }
            }
        }
        let graph = self.graph.induced(&order)?;
        let width = self.features.cols();
        let mut data = Vec::with_capacity(order.len() * width);
        for v in &order {
            data.extend_from_slice(self.features.row_slice(*v));
        }
        Ok(EgoSubgraph {
            members: order.clone(),
            graph,
            features: Tensor::matrix(order.len(), width, data)?,
        })
    }
}

/// Local neighborhood of one target node. `members[i]` is the global index
/// of local node `i`; local node 0 is the target (the ego).
#[derive(Clone, Debug, PartialEq)]
pub struct EgoSubgraph {
    pub members: Vec<usize>,
    pub graph: RelGraph,
    pub features: Tensor,
}

impl EgoSubgraph {
    pub fn view(&self) -> InfoPropView {
        self.graph.view(0).expect("ego subgraph is non-empty")
    }
}

/// Time-ordered user activations of one diffusion cascade.
#[derive(Clone, Debug, PartialEq)]
pub struct Cascade {
    events: Vec<(String, f64)>,
}

impl Cascade {
    pub fn new(events: Vec<(String, f64)>) -> Result<Self> {
        if events.len() < 2 {
            return invalid("a cascade needs at least two events");
        }
        let mut seen = BTreeSet::new();
        for w in events.windows(2) {
            if w[1].1 < w[0].1 {
                return invalid(format!(
                    "timestamps decrease at user {} ({} < {})",
                    w[1].0, w[1].1, w[0].1
                ));
            }
        }
        for (u, t) in &events {
            if !t.is_finite() {
                return invalid(format!("non-finite timestamp for user {u}"));
            }
            if !seen.insert(u.as_str()) {
                return invalid(format!("user {u} appears twice in one cascade"));
            }
        }
        Ok(Self { events })
    }

    pub fn events(&self) -> &[(String, f64)] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.events.iter().map(|(u, _)| u.as_str())
    }
}

/// Cascades together with the social graph over all of their users.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeCorpus {
    cascades: Vec<Cascade>,
    sequences: Vec<Vec<usize>>,
    network: SocialNetwork,
}

impl CascadeCorpus {
    pub fn new(cascades: Vec<Cascade>, network: SocialNetwork) -> Result<Self> {
        let mut sequences = Vec::with_capacity(cascades.len());
        for c in &cascades {
            let seq = c
                .users()
                .map(|u| {
                    network
                        .node_index(u)
                        .map_err(|_| Error::InvalidInput(format!("cascade user {u} missing from network")))
                })
                .collect::<Result<Vec<_>>>()?;
            sequences.push(seq);
        }
        Ok(Self {
            cascades,
            sequences,
            network,
        })
    }

    pub fn cascades(&self) -> &[Cascade] {
        &self.cascades
    }

    /// Node indices of cascade `c` in activation order.
    pub fn sequence(&self, c: usize) -> &[usize] {
        &self.sequences[c]
    }

    pub fn network(&self) -> &SocialNetwork {
        &self.network
    }

    pub fn user_count(&self) -> usize {
        self.network.node_count()
    }

    /// Propagation view of cascade `c` over the whole network, rooted at its first user.
    pub fn view(&self, c: usize) -> InfoPropView {
        self.network
            .graph()
            .view(self.sequences[c][0])
            .expect("cascade users validated")
    }
}

/// One dataset of any task shape.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskDataset {
    Trees(Vec<PropagationTree>),
    Network(SocialNetwork),
    Cascades(CascadeCorpus),
}

impl TaskDataset {
    pub fn task(&self) -> crate::Task {
        match self {
            TaskDataset::Trees(_) => crate::Task::Graph,
            TaskDataset::Network(_) => crate::Task::Node,
            TaskDataset::Cascades(_) => crate::Task::Link,
        }
    }

    /// Number of split units: trees, labeled nodes, or cascades.
    pub fn unit_count(&self) -> usize {
        match self {
            TaskDataset::Trees(t) => t.len(),
            TaskDataset::Network(n) => n.labels().len(),
            TaskDataset::Cascades(c) => c.cascades().len(),
        }
    }

    pub fn feature_width(&self) -> usize {
        match self {
            TaskDataset::Trees(t) => t.first().map_or(0, |t| t.features().cols()),
            TaskDataset::Network(n) => n.feature_width(),
            TaskDataset::Cascades(c) => c.network().feature_width(),
        }
    }

    pub fn n_relations(&self) -> usize {
        match self {
            TaskDataset::Trees(_) => 1,
            TaskDataset::Network(n) => n.n_relations(),
            TaskDataset::Cascades(c) => c.network().n_relations(),
        }
    }
}
