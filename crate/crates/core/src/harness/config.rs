use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::TaskDataset;
use crate::kinetics::KineticForm;
use crate::model::{input_width, ModelConfig};
use crate::propagation::DEFAULT_T_MAX;
use crate::tasks::{FusionConfig, Pooling};
use crate::Task;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    /// Decoupled weight decay applied with each step.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            epochs: 100,
            batch_size: 16,
            patience: 20,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    pub no_pretrain: bool,
    pub no_prop_embedding: bool,
    pub regular_kinetic: bool,
    pub literal_ode: bool,
}

impl Ablations {
    pub fn set(&mut self, name: &str) -> Result<()> {
        match name.trim() {
            "no-pretrain" => self.no_pretrain = true,
            "no-prop-embedding" => self.no_prop_embedding = true,
            "regular-kinetic" => self.regular_kinetic = true,
            "literal-ode" => self.literal_ode = true,
            "" | "none" => {}
            other => return Err(Error::Config(format!("unknown ablation {other}"))),
        }
        Ok(())
    }

    fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.no_pretrain {
            v.push("no-pretrain");
        }
        if self.no_prop_embedding {
            v.push("no-prop-embedding");
        }
        if self.regular_kinetic {
            v.push("regular-kinetic");
        }
        if self.literal_ode {
            v.push("literal-ode");
        }
        v
    }
}

/// Everything needed to reproduce one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub data: Vec<PathBuf>,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub seed: u64,
    /// Seed of the train/val/test shuffle; `None` reuses `seed`.
    pub split_seed: Option<u64>,
    pub optimizer: OptimConfig,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub prop_depth: usize,
    pub t_max: usize,
    pub ego_hops: usize,
    pub pooling: Pooling,
    pub graph_norm: bool,
    pub pretrain_from: Option<PathBuf>,
    pub few_shot: Option<f64>,
    pub zero_shot: bool,
    pub ablation: Ablations,
}

/// Default split fractions per task.
pub fn default_split(task: Task) -> [f64; 3] {
    match task {
        Task::Graph => [0.6, 0.2, 0.2],
        Task::Node => [0.7, 0.1, 0.2],
        Task::Link => [0.8, 0.1, 0.1],
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("{key} = {other:?}: expected a boolean"))),
    }
}

impl RunConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            data: Vec::new(),
            split: default_split(task),
            seed: 0,
            split_seed: None,
            optimizer: OptimConfig::default(),
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            prop_depth: 1,
            t_max: DEFAULT_T_MAX,
            ego_hops: 2,
            pooling: Pooling::Mean,
            graph_norm: true,
            pretrain_from: None,
            few_shot: None,
            zero_shot: false,
            ablation: Ablations::default(),
        }
    }

    /// Applies one `key = value` setting. Setting `task` also resets the
    /// split to that task's default.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "task" => {
                self.task = parse(key, v)?;
                self.split = default_split(self.task);
            }
            "data" => {
                self.data = v.split(',').map(str::trim).filter(|p| !p.is_empty()).map(PathBuf::from).collect()
            }
            "split" => {
                let parts: Vec<f64> = v.split([',', ':']).map(|p| parse(key, p)).collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(Error::Config(format!("split needs three fractions, got {v:?}")));
                }
                self.split = [parts[0], parts[1], parts[2]];
            }
            "seed" => self.seed = parse(key, v)?,
            "split_seed" => self.split_seed = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "lr" => self.optimizer.lr = parse(key, v)?,
            "weight_decay" => self.optimizer.weight_decay = parse(key, v)?,
            "epochs" => self.optimizer.epochs = parse(key, v)?,
            "batch_size" => self.optimizer.batch_size = parse(key, v)?,
            "patience" => self.optimizer.patience = parse(key, v)?,
            "d_model" => self.encoder.d_model = parse(key, v)?,
            "heads" => self.encoder.heads = parse(key, v)?,
            "context_depth" => self.encoder.context_depth = parse(key, v)?,
            "graph_depth" => self.encoder.graph_depth = parse(key, v)?,
            "nonlinearity" => self.encoder.nonlinearity = parse(key, v)?,
            "gamma" => self.fusion.gamma = parse(key, v)?,
            "lambda" => self.fusion.lambda = parse(key, v)?,
            "sigma" => self.fusion.sigma = parse(key, v)?,
            "prop_depth" => self.prop_depth = parse(key, v)?,
            "t_max" => self.t_max = parse(key, v)?,
            "ego_hops" => self.ego_hops = parse(key, v)?,
            "pooling" => self.pooling = parse(key, v)?,
            "graph_norm" => self.graph_norm = parse_bool(key, v)?,
            "pretrain_from" => self.pretrain_from = (!v.is_empty()).then(|| PathBuf::from(v)),
            "few_shot" => self.few_shot = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "zero_shot" => self.zero_shot = parse_bool(key, v)?,
            "ablation" => {
                self.ablation = Ablations::default();
                for a in v.split(',') {
                    self.ablation.set(a)?;
                }
            }
            other => return Err(Error::Config(format!("unknown config key {other}"))),
        }
        Ok(())
    }

    /// Parses a flat `key = value` file on top of the task defaults.
    /// `task` must come before keys whose defaults depend on it.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::new(Task::Graph);
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Inverse of [`RunConfig::from_kv`].
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let join = |p: &[PathBuf]| p.iter().map(|x| x.display().to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "task = {}", self.task);
        let _ = writeln!(s, "data = {}", join(&self.data));
        let _ = writeln!(s, "split = {},{},{}", self.split[0], self.split[1], self.split[2]);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "split_seed = {}", self.split_seed.map(|x| x.to_string()).unwrap_or_default());
        let o = &self.optimizer;
        let _ = writeln!(s, "lr = {}\nweight_decay = {}\nepochs = {}", o.lr, o.weight_decay, o.epochs);
        let _ = writeln!(s, "batch_size = {}\npatience = {}", o.batch_size, o.patience);
        let e = &self.encoder;
        let _ = writeln!(s, "d_model = {}\nheads = {}", e.d_model, e.heads);
        let _ = writeln!(s, "context_depth = {}\ngraph_depth = {}", e.context_depth, e.graph_depth);
        let _ = writeln!(s, "nonlinearity = {}", e.nonlinearity);
        let f = &self.fusion;
        let _ = writeln!(s, "gamma = {}\nlambda = {}\nsigma = {}", f.gamma, f.lambda, f.sigma);
        let _ = writeln!(s, "prop_depth = {}\nt_max = {}\nego_hops = {}", self.prop_depth, self.t_max, self.ego_hops);
        let pooling = match self.pooling {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        };
        let _ = writeln!(s, "pooling = {pooling}\ngraph_norm = {}", self.graph_norm);
        let _ = writeln!(
            s,
            "pretrain_from = {}",
            self.pretrain_from.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        );
        let _ = writeln!(s, "few_shot = {}", self.few_shot.map(|f| f.to_string()).unwrap_or_default());
        let _ = writeln!(s, "zero_shot = {}", self.zero_shot);
        let _ = writeln!(s, "ablation = {}", self.ablation.names().join(","));
        s
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {:?} must be non-negative and sum to 1", self.split)));
        }
        if let Some(f) = self.few_shot {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("few-shot fraction {f} outside (0, 1]")));
            }
        }
        if self.ablation.regular_kinetic && self.ablation.literal_ode {
            return Err(Error::Config("regular-kinetic and literal-ode ablations are exclusive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(o.weight_decay >= 0.0) || o.batch_size == 0 {
            return Err(Error::Config("optimizer needs lr > 0, weight_decay >= 0, batch_size >= 1".into()));
        }
        self.encoder.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.fusion.validate()?;
        if self.prop_depth == 0 {
            return Err(Error::Config("prop_depth must be at least 1".into()));
        }
        Ok(())
    }

    pub fn effective_split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.seed)
    }

    pub fn kinetic_form(&self) -> KineticForm {
        if self.ablation.regular_kinetic {
            KineticForm::Regular
        } else if self.ablation.literal_ode {
            KineticForm::OwnState
        } else {
            KineticForm::NeighborState
        }
    }

    /// Model configuration for this run on `data`, with ablations applied.
    pub fn model_config(&self, data: &TaskDataset) -> Result<ModelConfig> {
        self.validate()?;
        if data.task() != self.task {
            return Err(Error::Config(format!("dataset is for the {} task, run for {}", data.task(), self.task)));
        }
        let mut fusion = self.fusion.clone();
        if self.ablation.no_prop_embedding {
            fusion.lambda = 0.0;
        }
        let cfg = ModelConfig {
            task: self.task,
            input_width: input_width(data),
            n_relations: data.n_relations(),
            encoder: self.encoder.clone(),
            prop_depth: self.prop_depth,
            t_max: self.t_max,
            fusion,
            pooling: self.pooling,
            kinetic_form: self.kinetic_form(),
            propagation: !self.ablation.no_prop_embedding,
            ego_hops: self.ego_hops,
            graph_norm: self.graph_norm,
        };
        if cfg.input_width == 0 {
            return Err(Error::Data("dataset has zero-width features".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
