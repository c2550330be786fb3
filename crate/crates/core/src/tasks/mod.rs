//! Output combination, task heads and objectives.

mod metrics;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Linear;
use crate::error::{invalid, shape_err, Error, Result};
use crate::numeric::{Activation, ParamStore, Tape, Tensor, Var, MASK_NEG};

pub use metrics::{
    accuracy, auc, balanced_accuracy, f1_score, hit_at_k, map_at_k, metric_suite, primary_metric,
    rank_of, write_metrics_csv, write_metrics_json, MetricMap, Predictions,
};

/// Weights of the two pathways and the two loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Weight of the graph-encoder output in `γ e + (1-γ) ĥ`.
    pub gamma: f64,
    /// Weight of the kinetic loss in `L_s + λ L_p`.
    pub lambda: f64,
    /// Squashing applied to the propagation embedding before it is added.
    pub sigma: Activation,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            lambda: 0.5,
            sigma: Activation::Tanh,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// `ĥ = h + σ(z)`.
pub fn enhance(tape: &mut Tape, h: Var, z: Var, sigma: Activation) -> Result<Var> {
    let s = tape.activation(z, sigma)?;
    tape.add(h, s)
}

/// `o = γ e + (1-γ) ĥ`.
pub fn fuse(tape: &mut Tape, e: Var, h_hat: Var, gamma: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&gamma) {
        return invalid(format!("gamma must lie in [0, 1], got {gamma}"));
    }
    if tape.dims(e) != tape.dims(h_hat) {
        return shape_err("fuse", format!("{:?} vs {:?}", tape.dims(e), tape.dims(h_hat)));
    }
    let a = tape.scale(e, gamma)?;
    let b = tape.scale(h_hat, 1.0 - gamma)?;
    tape.add(a, b)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            other => Err(Error::Config(format!("unknown pooling {other}"))),
        }
    }
}

/// Two-class softmax head used by graph and node classification.
#[derive(Clone, Debug)]
pub struct ClassHead {
    linear: Linear,
}

impl ClassHead {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, "head.class", d, 2, true, rng)?,
        })
    }

    /// Pools all node rows of `o` and returns a `1 x 2` distribution.
    pub fn graph(&self, tape: &mut Tape, store: &ParamStore, o: Var, pooling: Pooling) -> Result<Var> {
        let pooled = match pooling {
            Pooling::Mean => tape.mean_all_rows(o)?,
            Pooling::Max => tape.max_rows(o)?,
        };
        self.classify(tape, store, pooled)
    }

    /// Distribution for row `target` of `o`.
    pub fn node(&self, tape: &mut Tape, store: &ParamStore, o: Var, target: usize) -> Result<Var> {
        let row = tape.gather_rows(o, &[target])?;
        self.classify(tape, store, row)
    }

    fn classify(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let logits = self.linear.forward(tape, store, x)?;
        tape.softmax(logits, None)
    }
}

/// Next-user head: one scalar score per user, softmax over users not yet in
/// the cascade prefix.
#[derive(Clone, Debug)]
pub struct LinkHead {
    linear: Linear,
}

impl LinkHead {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, "head.link", d, 1, false, rng)?,
        })
    }

    /// Per-user scores as a `1 x N` row.
    pub fn scores(&self, tape: &mut Tape, store: &ParamStore, o: Var) -> Result<Var> {
        let n = tape.dims(o).0;
        let s = self.linear.forward(tape, store, o)?;
        tape.reshape(s, vec![1, n])
    }

    /// `1 x N` distribution over candidates given precomputed scores.
    pub fn distribution(&self, tape: &mut Tape, scores: Var, prefix: &[usize]) -> Result<Var> {
        let n = tape.dims(scores).1;
        let mask = candidate_mask(n, prefix)?;
        tape.softmax(scores, Some(&mask))
    }
}

/// Additive mask excluding `prefix` users; errors when nothing remains.
pub fn candidate_mask(n: usize, prefix: &[usize]) -> Result<Tensor> {
    let mut mask = vec![0.0; n];
    for u in prefix {
        if *u >= n {
            return invalid(format!("user {u} out of range for {n} users"));
        }
        mask[*u] = MASK_NEG;
    }
    if mask.iter().all(|m| *m != 0.0) {
        return invalid("no candidate users left after masking the prefix");
    }
    Ok(Tensor::row(&mask))
}

/// Summed cross-entropy of one-hot `targets` under row distributions.
pub fn supervised_loss(tape: &mut Tape, probs: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(probs, targets)
}

/// `L = L_s + λ L_p`.
pub fn total_loss(tape: &mut Tape, ls: Var, lp: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return invalid(format!("lambda must be non-negative, got {lambda}"));
    }
    let weighted = tape.scale(lp, lambda)?;
    tape.add(ls, weighted)
}
