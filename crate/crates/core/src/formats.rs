//! Text formats for the three dataset shapes.
//!
//! A dataset directory holds, per task:
//!
//! * graph: `trees.jsonl`, one tree per line:
//!   `{"id", "label", "root", "nodes": [{"id", "feat": [..]}], "edges": [[parent, child], ..]}`
//! * node: `nodes.tsv` (`id<TAB>label<TAB>f1<TAB>f2..`, label `-` or empty
//!   when unlabeled) and `edges.tsv` (`src<TAB>dst<TAB>relation`)
//! * link: `cascades.txt` (one cascade per line of space-separated
//!   `user,timestamp` tokens), `edges.tsv`, and optionally `nodes.tsv`
//!   fixing the user list and order.
//!
//! Blank lines and lines starting with `#` are ignored in the tabular files.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::graph::{Cascade, CascadeCorpus, PropagationTree, RelGraph, SocialNetwork, TaskDataset};
use crate::Task;

pub const TREES_FILE: &str = "trees.jsonl";
pub const NODES_FILE: &str = "nodes.tsv";
pub const EDGES_FILE: &str = "edges.tsv";
pub const CASCADES_FILE: &str = "cascades.txt";

fn data_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}:{line}: {msg}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

#[derive(Serialize, Deserialize)]
struct TreeRecord {
    id: Value,
    label: usize,
    root: Value,
    nodes: Vec<NodeRecord>,
    edges: Vec<(Value, Value)>,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: Value,
    feat: Vec<f64>,
}

fn id_string(v: &Value) -> std::result::Result<String, String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(format!("node id must be a string or number, got {other}")),
    }
}

pub fn parse_trees(text: &str, path: &Path) -> Result<Vec<PropagationTree>> {
    let mut trees = Vec::new();
    for (no, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TreeRecord = serde_json::from_str(line).map_err(|e| data_err(path, no, e))?;
        let conv = |v: &Value| id_string(v).map_err(|e| data_err(path, no, e));
        let nodes = rec.nodes.iter().map(|n| conv(&n.id)).collect::<Result<Vec<_>>>()?;
        let edges = rec
            .edges
            .iter()
            .map(|(p, c)| Ok((conv(p)?, conv(c)?)))
            .collect::<Result<Vec<_>>>()?;
        let feats = rec.nodes.into_iter().map(|n| n.feat).collect();
        let tree = PropagationTree::new(conv(&rec.id)?, nodes, &conv(&rec.root)?, &edges, feats, rec.label)
            .map_err(|e| data_err(path, no, e))?;
        if let Some(first) = trees.first().map(|t: &PropagationTree| t.features().cols()) {
            if tree.features().cols() != first {
                return Err(data_err(path, no, format!("feature width {} differs from {first}", tree.features().cols())));
            }
        }
        trees.push(tree);
    }
    if trees.is_empty() {
        return Err(Error::Data(format!("{}: no trees", path.display())));
    }
    Ok(trees)
}

pub fn write_trees<W: Write>(mut w: W, trees: &[PropagationTree]) -> Result<()> {
    for t in trees {
        let rec = TreeRecord {
            id: Value::String(t.id().to_string()),
            label: t.label(),
            root: Value::String(t.nodes()[t.root()].clone()),
            nodes: t
                .nodes()
                .iter()
                .enumerate()
                .map(|(i, id)| NodeRecord {
                    id: Value::String(id.clone()),
                    feat: t.features().row_slice(i).to_vec(),
                })
                .collect(),
            edges: t
                .edges()
                .iter()
                .map(|(p, c)| (Value::String(t.nodes()[*p].clone()), Value::String(t.nodes()[*c].clone())))
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Rows of a nodes file: id, optional label, features.
pub type NodeRows = Vec<(String, Option<usize>, Vec<f64>)>;

pub fn parse_nodes(text: &str, path: &Path) -> Result<NodeRows> {
    let mut rows = Vec::new();
    let mut width = None;
    for (no, line) in content_lines(text) {
        let mut cols = line.split('\t');
        let id = cols.next().unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(data_err(path, no, "missing node id"));
        }
        let label = match cols.next().map(str::trim) {
            None | Some("") | Some("-") => None,
            Some(s) => match s.parse::<usize>() {
                Ok(y) if y <= 1 => Some(y),
                _ => return Err(data_err(path, no, format!("label {s:?} is not 0, 1, - or empty"))),
            },
        };
        let feats = cols
            .map(|c| c.trim().parse::<f64>().map_err(|e| data_err(path, no, format!("feature {c:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if feats.iter().any(|f| !f.is_finite()) {
            return Err(data_err(path, no, "non-finite feature"));
        }
        match width {
            None => width = Some(feats.len()),
            Some(w) if w != feats.len() => {
                return Err(data_err(path, no, format!("{} features, expected {w}", feats.len())));
            }
            _ => {}
        }
        rows.push((id, label, feats));
    }
    Ok(rows)
}

/// `src dst [relation]`, whitespace separated; relation defaults to 0.
pub fn parse_edges(text: &str, path: &Path) -> Result<Vec<(String, String, usize)>> {
    let mut edges = Vec::new();
    for (no, line) in content_lines(text) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        let rel = match cols.len() {
            2 => 0,
            3 => cols[2].parse().map_err(|e| data_err(path, no, format!("relation {:?}: {e}", cols[2])))?,
            n => return Err(data_err(path, no, format!("expected 2 or 3 columns, got {n}"))),
        };
        edges.push((cols[0].to_string(), cols[1].to_string(), rel));
    }
    Ok(edges)
}

pub fn parse_cascades(text: &str, path: &Path) -> Result<Vec<Cascade>> {
    let mut out = Vec::new();
    for (no, line) in content_lines(text) {
        let events = line
            .split_whitespace()
            .map(|tok| {
                let (u, t) = tok
                    .rsplit_once(',')
                    .ok_or_else(|| data_err(path, no, format!("token {tok:?} is not user,timestamp")))?;
                let t = t.parse::<f64>().map_err(|e| data_err(path, no, format!("timestamp {t:?}: {e}")))?;
                Ok((u.to_string(), t))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Cascade::new(events).map_err(|e| data_err(path, no, e))?);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no cascades", path.display())));
    }
    Ok(out)
}

fn relation_count(edges: &[(String, String, usize)]) -> usize {
    edges.iter().map(|e| e.2 + 1).max().unwrap_or(1)
}

pub fn read_network(nodes_path: &Path, edges_path: &Path) -> Result<SocialNetwork> {
    let rows = parse_nodes(&read(nodes_path)?, nodes_path)?;
    let edges = parse_edges(&read(edges_path)?, edges_path)?;
    let ids: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
    let labels: Vec<(String, usize)> = rows.iter().filter_map(|r| r.1.map(|y| (r.0.clone(), y))).collect();
    let feats = rows.into_iter().map(|r| r.2).collect();
    SocialNetwork::new(ids, relation_count(&edges), &edges, feats, &labels)
        .map_err(|e| Error::Data(format!("{}: {e}", nodes_path.display())))
}

/// Cascades plus their social graph. Users are taken from the nodes file if
/// given, otherwise in order of first appearance in the edge file and then
/// the cascades; cascade users absent from the edge file become isolated
/// nodes.
pub fn read_cascade_corpus(cascades_path: &Path, edges_path: &Path, nodes_path: Option<&Path>) -> Result<CascadeCorpus> {
    let cascades = parse_cascades(&read(cascades_path)?, cascades_path)?;
    let edges = parse_edges(&read(edges_path)?, edges_path)?;
    let (mut users, mut feats) = match nodes_path {
        Some(p) => {
            let rows = parse_nodes(&read(p)?, p)?;
            let users: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
            (users, rows.into_iter().map(|r| r.2).collect::<Vec<_>>())
        }
        None => (Vec::new(), Vec::new()),
    };
    let fixed = nodes_path.is_some();
    let mut index: HashMap<String, usize> = users.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
    let mut isolated = 0;
    let mut add = |u: &str, from_cascade: bool, users: &mut Vec<String>| {
        if !index.contains_key(u) {
            index.insert(u.to_string(), users.len());
            users.push(u.to_string());
            if from_cascade {
                isolated += 1;
            }
        }
    };
    if !fixed {
        for (a, b, _) in &edges {
            add(a, false, &mut users);
            add(b, false, &mut users);
        }
        for c in &cascades {
            for u in c.users() {
                add(u, true, &mut users);
            }
        }
    }
    if isolated > 0 {
        warn!("{isolated} cascade users have no edges; added as isolated nodes");
    }
    if !fixed {
        feats = vec![Vec::new(); users.len()];
    }
    let network = SocialNetwork::new(users, relation_count(&edges), &edges, feats, &[])
        .map_err(|e| Error::Data(format!("{}: {e}", edges_path.display())))?;
    CascadeCorpus::new(cascades, network).map_err(|e| Error::Data(format!("{}: {e}", cascades_path.display())))
}

fn label_field(labels: &BTreeMap<usize, usize>, v: usize) -> String {
    labels.get(&v).map_or_else(|| "-".to_string(), |y| y.to_string())
}

pub fn write_nodes<W: Write>(mut w: W, net: &SocialNetwork) -> Result<()> {
    for (v, id) in net.nodes().iter().enumerate() {
        write!(w, "{id}\t{}", label_field(net.labels(), v))?;
        if net.feature_width() > 0 {
            for f in net.features().row_slice(v) {
                write!(w, "\t{f}")?;
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_edges<W: Write>(mut w: W, nodes: &[String], graph: &RelGraph) -> Result<()> {
    for (a, b, r) in graph.edges() {
        writeln!(w, "{}\t{}\t{r}", nodes[*a], nodes[*b])?;
    }
    Ok(())
}

pub fn write_cascades<W: Write>(mut w: W, cascades: &[Cascade]) -> Result<()> {
    for c in cascades {
        let toks: Vec<String> = c.events().iter().map(|(u, t)| format!("{u},{t}")).collect();
        writeln!(w, "{}", toks.join(" "))?;
    }
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<std::io::BufWriter<fs::File>> {
    Ok(std::io::BufWriter::new(fs::File::create(dir.join(name))?))
}

/// Writes a dataset directory in the layout described in the module docs.
pub fn write_dataset(dir: &Path, data: &TaskDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    match data {
        TaskDataset::Trees(trees) => write_trees(create(dir, TREES_FILE)?, trees)?,
        TaskDataset::Network(net) => {
            write_nodes(create(dir, NODES_FILE)?, net)?;
            write_edges(create(dir, EDGES_FILE)?, net.nodes(), net.graph())?;
        }
        TaskDataset::Cascades(corpus) => {
            let net = corpus.network();
            write_cascades(create(dir, CASCADES_FILE)?, corpus.cascades())?;
            write_edges(create(dir, EDGES_FILE)?, net.nodes(), net.graph())?;
            write_nodes(create(dir, NODES_FILE)?, net)?;
        }
    }
    Ok(())
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Data(format!("missing data file {}", path.display())))
    }
}

/// Loads a dataset directory for `task`. For the graph task `path` may
/// also name a tree file directly.
pub fn load_dataset(path: &Path, task: Task) -> Result<TaskDataset> {
    match task {
        Task::Graph => {
            let file = if path.is_file() { path.to_path_buf() } else { require(path.join(TREES_FILE))? };
            Ok(TaskDataset::Trees(parse_trees(&read(&file)?, &file)?))
        }
        Task::Node => Ok(TaskDataset::Network(read_network(
            &require(path.join(NODES_FILE))?,
            &require(path.join(EDGES_FILE))?,
        )?)),
        Task::Link => {
            let nodes = path.join(NODES_FILE);
            Ok(TaskDataset::Cascades(read_cascade_corpus(
                &require(path.join(CASCADES_FILE))?,
                &require(path.join(EDGES_FILE))?,
                nodes.is_file().then_some(nodes.as_path()),
            )?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::{simulate_synthetic, SynthConfig};

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn tree_line_with_numeric_ids() {
        let line = r#"{"id": 7, "label": 1, "root": 0, "nodes": [{"id": 0, "feat": [1.0]}, {"id": "x", "feat": [2.0]}], "edges": [[0, "x"]]}"#;
        let trees = parse_trees(line, p()).unwrap();
        assert_eq!(trees[0].id(), "7");
        assert_eq!(trees[0].nodes(), &["0".to_string(), "x".to_string()]);
        assert_eq!(trees[0].label(), 1);
    }

    #[test]
    fn bad_tree_is_a_data_error() {
        let line = r#"{"id": 1, "label": 0, "root": "a", "nodes": [{"id": "a", "feat": []}], "edges": [["a", "zz"]]}"#;
        assert!(matches!(parse_trees(line, p()), Err(Error::Data(_))));
        assert!(matches!(parse_trees("{not json", p()), Err(Error::Data(_))));
    }

    #[test]
    fn nodes_with_unlabeled_markers() {
        let rows = parse_nodes("# header\na\t1\t0.5\t1\nb\t-\t0\t0\nc\t\t2\t3\n", p()).unwrap();
        assert_eq!(rows[0].1, Some(1));
        assert_eq!(rows[1].1, None);
        assert_eq!(rows[2].1, None);
        assert!(parse_nodes("a\t2\t0.5\n", p()).is_err());
        assert!(parse_nodes("a\t1\t0.5\nb\t0\n", p()).is_err());
    }

    #[test]
    fn edges_default_relation() {
        let e = parse_edges("a b\nb c 2\n", p()).unwrap();
        assert_eq!(e, vec![("a".into(), "b".into(), 0), ("b".into(), "c".into(), 2)]);
        assert!(parse_edges("a\n", p()).is_err());
    }

    #[test]
    fn cascade_tokens() {
        let c = parse_cascades("u1,0 u2,5.5 u3,9\n", p()).unwrap();
        assert_eq!(c[0].len(), 3);
        assert!(parse_cascades("u1,5 u2,1\n", p()).is_err());
        assert!(parse_cascades("u1 u2,1\n", p()).is_err());
    }

    #[test]
    fn synthetic_datasets_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        for task in [Task::Graph, Task::Node, Task::Link] {
            let data = simulate_synthetic(&SynthConfig {
                task,
                n_graphs: 5,
                min_nodes: 4,
                max_nodes: 7,
                ..SynthConfig::default()
            })
            .unwrap();
            let sub = dir.path().join(task.to_string());
            write_dataset(&sub, &data).unwrap();
            let back = load_dataset(&sub, task).unwrap();
            assert_eq!(back.unit_count(), data.unit_count());
            assert_eq!(back.n_relations(), data.n_relations());
            match (&data, &back) {
                (TaskDataset::Cascades(a), TaskDataset::Cascades(b)) => {
                    assert_eq!(a.user_count(), b.user_count());
                    for c in 0..a.cascades().len() {
                        assert_eq!(a.sequence(c), b.sequence(c));
                    }
                }
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn missing_files_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path(), Task::Node), Err(Error::Data(_))));
    }
}
