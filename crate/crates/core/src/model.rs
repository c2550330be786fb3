//! Full model: projection, dual encoder, propagation pathway, fusion and
//! task head, applied to one prepared instance at a time.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{neighborhood_mean_matrix, Aggregation, ContextEncoder, EncoderConfig, GraphEncoder, Projection};
use crate::error::{invalid, Error, Result};
use crate::graph::{InfoPropView, TaskDataset};
use crate::kinetics::KineticForm;
use crate::numeric::{ParamStore, Tape, Tensor, Var};
use crate::propagation::{kinetic_loss, BetaHead, MaskSchedule, PredictedTrajectory, PropEncoder, StateHead, DEFAULT_T_MAX};
use crate::tasks::{enhance, fuse, rank_of, supervised_loss, ClassHead, FusionConfig, LinkHead, Pooling};
use crate::Task;

/// Parameter-name prefixes shared across tasks and copied when fine-tuning.
pub const TRUNK_PREFIXES: [&str; 3] = ["ctx.", "graph.", "prop."];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    /// Feature width (graph and node tasks) or number of users (link task).
    pub input_width: usize,
    pub n_relations: usize,
    pub encoder: EncoderConfig,
    pub prop_depth: usize,
    pub t_max: usize,
    pub fusion: FusionConfig,
    pub pooling: Pooling,
    pub kinetic_form: KineticForm,
    /// `false` removes the propagation pathway (and its loss) entirely.
    pub propagation: bool,
    /// Radius of the ego subgraphs used by the node task.
    pub ego_hops: usize,
    pub graph_norm: bool,
}

impl ModelConfig {
    pub fn new(task: Task, input_width: usize, n_relations: usize) -> Self {
        Self {
            task,
            input_width,
            n_relations,
            encoder: EncoderConfig::default(),
            prop_depth: 1,
            t_max: DEFAULT_T_MAX,
            fusion: FusionConfig::default(),
            pooling: Pooling::Mean,
            kinetic_form: KineticForm::NeighborState,
            propagation: true,
            ego_hops: 2,
            graph_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.fusion.validate()?;
        if self.input_width == 0 {
            return Err(Error::Config("input width must be positive".into()));
        }
        if self.n_relations == 0 {
            return Err(Error::Config("at least one relation type is required".into()));
        }
        if self.prop_depth == 0 {
            return Err(Error::Config("propagation depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// Width of the projection input: feature columns, or users for the link task.
pub fn input_width(dataset: &TaskDataset) -> usize {
    match dataset {
        TaskDataset::Cascades(c) => c.user_count(),
        other => other.feature_width(),
    }
}

/// Supervision attached to an instance.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    /// Activation order of a cascade, as user indices.
    Sequence(Vec<usize>),
}

/// One forward unit with its precomputed constants.
#[derive(Clone, Debug)]
pub struct Instance {
    /// Raw feature rows; `None` for the link task, which uses embeddings.
    pub features: Option<Tensor>,
    pub aggregation: Arc<Aggregation>,
    pub view: InfoPropView,
    pub schedule: MaskSchedule,
    pub smoothing: Option<Arc<Tensor>>,
    pub target: Target,
}

impl Instance {
    pub fn node_count(&self) -> usize {
        self.view.node_count()
    }
}

/// Builds instances in split-unit order: trees, labeled nodes (by index), or cascades.
pub fn prepare(dataset: &TaskDataset, cfg: &ModelConfig) -> Result<Vec<Instance>> {
    if dataset.task() != cfg.task {
        return Err(Error::Config(format!("dataset is for the {} task, model for {}", dataset.task(), cfg.task)));
    }
    match dataset {
        TaskDataset::Trees(trees) => trees
            .iter()
            .map(|t| {
                let view = t.view();
                Ok(Instance {
                    features: Some(t.features().clone()),
                    aggregation: Arc::new(Aggregation::new(&t.rel_graph())),
                    schedule: MaskSchedule::new(&view, cfg.t_max),
                    view,
                    smoothing: None,
                    target: Target::Class(t.label()),
                })
            })
            .collect(),
        TaskDataset::Network(net) => net
            .labels()
            .iter()
            .map(|(v, y)| {
                let sub = net.ego_subgraph(*v, cfg.ego_hops)?;
                let view = sub.view();
                Ok(Instance {
                    features: Some(sub.features.clone()),
                    aggregation: Arc::new(Aggregation::new(&sub.graph)),
                    schedule: MaskSchedule::new(&view, cfg.t_max),
                    view,
                    smoothing: None,
                    target: Target::Class(*y),
                })
            })
            .collect(),
        TaskDataset::Cascades(corpus) => {
            let graph = corpus.network().graph();
            let aggregation = Arc::new(Aggregation::new(graph));
            let smoothing = Arc::new(neighborhood_mean_matrix(graph));
            (0..corpus.cascades().len())
                .map(|c| {
                    let view = corpus.view(c);
                    Ok(Instance {
                        features: None,
                        aggregation: aggregation.clone(),
                        schedule: MaskSchedule::new(&view, cfg.t_max),
                        view,
                        smoothing: Some(smoothing.clone()),
                        target: Target::Sequence(corpus.sequence(c).to_vec()),
                    })
                })
                .collect()
        }
    }
}

#[derive(Clone, Debug)]
enum Head {
    Class(ClassHead),
    Link(LinkHead),
}

#[derive(Clone, Debug)]
struct Pathway {
    encoder: PropEncoder,
    state: StateHead,
    beta: BetaHead,
}

/// Tape nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub projected: Var,
    pub context: Var,
    pub graph: Var,
    pub fused: Var,
    pub z: Vec<Var>,
    pub trajectory: Option<PredictedTrajectory>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub supervised: Var,
    pub kinetic: Var,
}

/// Model output for one instance.
#[derive(Clone, Debug, PartialEq)]
pub enum InstancePrediction {
    /// Probability of class 1 and the true class.
    Binary { score: f64, target: usize },
    /// Rank of every true next user along the cascade.
    Ranks(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct RprlModel {
    cfg: ModelConfig,
    projection: Projection,
    context: ContextEncoder,
    graph: GraphEncoder,
    pathway: Option<Pathway>,
    head: Head,
}

impl RprlModel {
    /// Registers all parameters in `store`.
    pub fn new<R: Rng>(cfg: ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.encoder.d_model;
        let projection = match cfg.task {
            Task::Link => Projection::embedding(store, cfg.input_width, d, rng)?,
            _ => Projection::affine(store, cfg.input_width, d, rng)?,
        };
        let context = ContextEncoder::new(store, &cfg.encoder, rng)?;
        let graph = GraphEncoder::new(store, &cfg.encoder, cfg.n_relations, cfg.graph_norm, rng)?;
        let pathway = if cfg.propagation {
            Some(Pathway {
                encoder: PropEncoder::new(store, &cfg.encoder, cfg.prop_depth, cfg.t_max, rng)?,
                state: StateHead::new(store, d, rng)?,
                beta: BetaHead::new(store, d, rng)?,
            })
        } else {
            None
        };
        let head = match cfg.task {
            Task::Link => Head::Link(LinkHead::new(store, d, rng)?),
            _ => Head::Class(ClassHead::new(store, d, rng)?),
        };
        Ok(Self {
            cfg,
            projection,
            context,
            graph,
            pathway,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Runs the encoders and fusion. The propagation trajectory is attached
    /// when the pathway is enabled.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, inst: &Instance) -> Result<Forward> {
        let projected = match (&inst.features, &inst.smoothing) {
            (Some(x), _) => self.projection.project(tape, store, x)?,
            (None, Some(s)) => {
                let users: Vec<usize> = (0..s.rows()).collect();
                self.projection.lookup(tape, store, s, &users)?
            }
            (None, None) => return invalid("instance has neither features nor a smoothing matrix"),
        };
        let context = self.context.encode(tape, store, projected)?;
        let graph = self.graph.encode(tape, store, &inst.aggregation, projected)?;
        let (enhanced, z, trajectory) = match &self.pathway {
            Some(p) => {
                let z = p.encoder.encode(tape, store, context, &inst.schedule)?;
                let last = *z.last().expect("at least one step");
                let states = z.iter().map(|zt| p.state.forward(tape, store, *zt)).collect::<Result<Vec<_>>>()?;
                let beta = p.beta.forward(tape, store, last)?;
                let enhanced = enhance(tape, context, last, self.cfg.fusion.sigma)?;
                (enhanced, z, Some(PredictedTrajectory { states, beta }))
            }
            None => (context, Vec::new(), None),
        };
        let fused = fuse(tape, graph, enhanced, self.cfg.fusion.gamma)?;
        Ok(Forward {
            projected,
            context,
            graph,
            fused,
            z,
            trajectory,
        })
    }

    /// Supervised, kinetic and combined loss of one instance.
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, inst: &Instance) -> Result<LossParts> {
        let fwd = self.forward(tape, store, inst)?;
        let supervised = match (&self.head, &inst.target) {
            (Head::Class(h), Target::Class(y)) => {
                let p = match self.cfg.task {
                    Task::Graph => h.graph(tape, store, fwd.fused, self.cfg.pooling)?,
                    _ => h.node(tape, store, fwd.fused, 0)?,
                };
                supervised_loss(tape, p, &[*y])?
            }
            (Head::Link(h), Target::Sequence(seq)) => {
                let scores = h.scores(tape, store, fwd.fused)?;
                let mut terms = Vec::with_capacity(seq.len() - 1);
                for m in 1..seq.len() {
                    let p = h.distribution(tape, scores, &seq[..m])?;
                    terms.push(supervised_loss(tape, p, &[seq[m]])?);
                }
                tape.add_all(&terms)?
            }
            _ => return invalid("instance target does not match the model head"),
        };
        let kinetic = match &fwd.trajectory {
            Some(traj) => kinetic_loss(tape, traj, &inst.view, self.cfg.kinetic_form)?,
            None => tape.constant(Tensor::scalar(0.0)),
        };
        let total = crate::tasks::total_loss(tape, supervised, kinetic, self.cfg.fusion.lambda)?;
        Ok(LossParts {
            total,
            supervised,
            kinetic,
        })
    }

    /// Prediction without the kinetic loss.
    pub fn predict(&self, store: &ParamStore, inst: &Instance) -> Result<InstancePrediction> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, store, inst)?;
        match (&self.head, &inst.target) {
            (Head::Class(h), Target::Class(y)) => {
                let p = match self.cfg.task {
                    Task::Graph => h.graph(&mut tape, store, fwd.fused, self.cfg.pooling)?,
                    _ => h.node(&mut tape, store, fwd.fused, 0)?,
                };
                Ok(InstancePrediction::Binary {
                    score: tape.value(p).data()[1],
                    target: *y,
                })
            }
            (Head::Link(h), Target::Sequence(seq)) => {
                let scores = h.scores(&mut tape, store, fwd.fused)?;
                let s = tape.value(scores).data().to_vec();
                let ranks = (1..seq.len())
                    .map(|m| rank_of(&s, seq[m], &seq[..m]))
                    .collect::<Result<Vec<_>>>()?;
                Ok(InstancePrediction::Ranks(ranks))
            }
            _ => invalid("instance target does not match the model head"),
        }
    }
}
