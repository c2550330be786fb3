//! Propagation-aware representation learning for social graphs.
//!
//! A dual encoder (attention over all nodes plus residual message passing)
//! is combined with a propagation pathway whose per-hop state predictions
//! are supervised by the residuals of a Markov-chain kinetic model. Task
//! adapters cover graph classification over propagation trees, node
//! classification over multi-relational networks, and next-user link
//! prediction over diffusion cascades.

pub mod encoders;
pub mod error;
pub mod formats;
pub mod graph;
pub mod harness;
pub mod kinetics;
pub mod model;
pub mod numeric;
pub mod propagation;
pub mod tasks;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};
pub use graph::{
    Cascade, CascadeCorpus, EgoSubgraph, InfoPropView, PropagationTree, RelGraph, SocialNetwork,
    TaskDataset, UNREACHABLE,
};
pub use numeric::{Activation, ParamStore, Tape, Tensor, Var};

/// The three supported downstream tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Binary classification of whole propagation trees (rumor detection).
    Graph,
    /// Binary classification of network nodes (bot detection).
    Node,
    /// Next-user prediction on diffusion cascades.
    Link,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "graph" | "rumor" => Ok(Task::Graph),
            "node" | "bot" => Ok(Task::Node),
            "link" | "diffusion" => Ok(Task::Link),
            other => Err(Error::Config(format!("unknown task {other}"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Graph => "graph",
            Task::Node => "node",
            Task::Link => "link",
        })
    }
}
