//! Propagation pathway: hop-limited masking, time-stepped attention,
//! per-hop state predictions, a graph-level rate estimate and the kinetic
//! residual loss that ties them to the ODE.

use std::io::Write;

use log::{debug, warn};
use rand::Rng;

use crate::encoders::{AttentionBlock, EncoderConfig, Linear};
use crate::error::{invalid, shape_err, Result};
use crate::graph::InfoPropView;
use crate::kinetics::{KineticForm, StateDistribution};
use crate::numeric::{ParamId, ParamStore, Tape, Tensor, Var};

/// Default cap on the number of propagation steps.
pub const DEFAULT_T_MAX: usize = 6;

/// Binary masks `m_t[j] = [hop(ego, j) <= t]` for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSchedule {
    masks: Vec<Vec<bool>>,
    reachable: Vec<bool>,
    truncated: bool,
}

impl MaskSchedule {
    /// Builds masks up to `min(horizon, t_max)`; a deeper view is truncated
    /// with a warning.
    pub fn new(view: &InfoPropView, t_max: usize) -> Self {
        let horizon = view.horizon();
        let truncated = horizon > t_max;
        if truncated {
            warn!("propagation horizon {horizon} exceeds the step cap {t_max}; truncating");
        }
        let steps = horizon.min(t_max);
        let masks = (0..=steps)
            .map(|t| view.hops().iter().map(|h| *h <= t).collect())
            .collect();
        Self {
            masks,
            reachable: view.reachable(),
            truncated,
        }
    }

    /// Number of steps `T` (the last mask index).
    pub fn horizon(&self) -> usize {
        self.masks.len() - 1
    }

    pub fn node_count(&self) -> usize {
        self.reachable.len()
    }

    pub fn mask(&self, t: usize) -> Result<&[bool]> {
        match self.masks.get(t) {
            Some(m) => Ok(m),
            None => invalid(format!("step {t} beyond horizon {}", self.horizon())),
        }
    }

    pub fn reachable(&self) -> &[bool] {
        &self.reachable
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }
}

fn bool_column(mask: &[bool]) -> Tensor {
    Tensor::column(&mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect::<Vec<_>>())
}

/// `mask_t ⊙ H`: rows beyond the hop frontier are zeroed.
pub fn mask_embeddings(tape: &mut Tape, h: Var, schedule: &MaskSchedule, t: usize) -> Result<Var> {
    let m = schedule.mask(t)?;
    if tape.dims(h).0 != m.len() {
        return shape_err("mask_embeddings", format!("{} rows vs {} mask entries", tape.dims(h).0, m.len()));
    }
    let col = tape.constant(bool_column(m));
    tape.scale_rows(h, col)
}

/// Shared attention blocks applied at every step to
/// `mask_t ⊙ H + tau(t)`, attending only to unmasked tokens.
#[derive(Clone, Debug)]
pub struct PropEncoder {
    blocks: Vec<AttentionBlock>,
    time: ParamId,
    t_max: usize,
}

impl PropEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        depth: usize,
        t_max: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if depth == 0 {
            return invalid("propagation encoder depth must be at least 1");
        }
        let blocks = (0..depth)
            .map(|i| AttentionBlock::new(store, &format!("prop.block{i}"), cfg.d_model, cfg.heads, cfg.nonlinearity, rng))
            .collect::<Result<_>>()?;
        let time = store.add_uniform("prop.time", &[t_max + 1, cfg.d_model], cfg.d_model, rng)?;
        Ok(Self { blocks, time, t_max })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// `z^(t)` for one step.
    pub fn encode_step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        schedule: &MaskSchedule,
        t: usize,
    ) -> Result<Var> {
        if t > self.t_max {
            return invalid(format!("step {t} beyond the step cap {}", self.t_max));
        }
        let n = tape.dims(h).0;
        let masked = mask_embeddings(tape, h, schedule, t)?;
        let table = tape.param(store, self.time);
        let tau = tape.gather_rows(table, &vec![t; n])?;
        let mut z = tape.add(masked, tau)?;
        let keys = schedule.mask(t)?;
        for b in &self.blocks {
            z = b.forward(tape, store, z, Some(keys))?;
        }
        Ok(z)
    }

    /// `[z^(0), ..., z^(T)]`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, h: Var, schedule: &MaskSchedule) -> Result<Vec<Var>> {
        (0..=schedule.horizon().min(self.t_max))
            .map(|t| self.encode_step(tape, store, h, schedule, t))
            .collect()
    }
}

/// `softmax(z W_s + b_s)` over `[U, I1, I2]`.
#[derive(Clone, Debug)]
pub struct StateHead {
    linear: Linear,
}

impl StateHead {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, "prop.state", d, 3, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let logits = self.linear.forward(tape, store, z)?;
        tape.softmax(logits, None)
    }
}

/// `softplus(W_b · mean(z^(T)) + b_b)`, a `1 x 2` row of non-negative rates.
#[derive(Clone, Debug)]
pub struct BetaHead {
    linear: Linear,
}

impl BetaHead {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, "prop.beta", d, 2, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z_last: Var) -> Result<Var> {
        let pooled = tape.mean_all_rows(z_last)?;
        let raw = self.linear.forward(tape, store, pooled)?;
        tape.softplus(raw)
    }
}

/// `x[t+1] - x[t]` for `t = 0..len-1`.
pub fn forward_difference(values: &[f64]) -> Vec<f64> {
    values.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Predicted `[U, I1, I2]` rows per step plus the rate estimate, as tape nodes.
#[derive(Clone, Debug)]
pub struct PredictedTrajectory {
    pub states: Vec<Var>,
    pub beta: Var,
}

impl PredictedTrajectory {
    pub fn to_states(&self, tape: &Tape) -> Result<Vec<StateDistribution>> {
        self.states
            .iter()
            .map(|s| StateDistribution::from_tensor(tape.value(*s)))
            .collect()
    }

    pub fn beta_values(&self, tape: &Tape) -> [f64; 2] {
        let b = tape.value(self.beta).data();
        [b[0], b[1]]
    }

    /// Writes the predicted trajectory as `t,node,U,I1,I2` rows.
    pub fn dump_csv<W: Write>(&self, tape: &Tape, w: W) -> Result<()> {
        crate::kinetics::write_trajectory_csv(w, &self.to_states(tape)?)
    }
}

/// Sum over steps `t < T` and reachable nodes of the squared residuals
/// `ΔI_k - U β_k S_k` and `ΔU + Σ_k U β_k S_k`, with finite differences
/// for the time derivative. Unreachable nodes carry no supervision; a
/// horizon of zero yields a zero loss.
pub fn kinetic_loss(
    tape: &mut Tape,
    traj: &PredictedTrajectory,
    view: &InfoPropView,
    form: KineticForm,
) -> Result<Var> {
    let n = view.node_count();
    if traj.states.is_empty() {
        return invalid("trajectory has no steps");
    }
    for s in &traj.states {
        if tape.dims(*s) != (n, 3) {
            return shape_err("kinetic_loss", format!("state {:?} for {n} nodes", tape.dims(*s)));
        }
    }
    if tape.dims(traj.beta) != (1, 2) {
        return shape_err("kinetic_loss", format!("rate estimate {:?}", tape.dims(traj.beta)));
    }
    if traj.states.len() == 1 {
        debug!("propagation horizon is zero; kinetic loss is zero");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let reach = tape.constant(bool_column(&view.reachable()));
    let coupling_const = match form {
        KineticForm::NeighborState => Some(tape.constant(view.adjacency())),
        KineticForm::OwnState => {
            let deg: Vec<f64> = (0..n).map(|v| view.degree(v) as f64).collect();
            Some(tape.constant(Tensor::column(&deg)))
        }
        KineticForm::Regular => None,
    };
    let ones = tape.constant(Tensor::filled(&[n, 2], 1.0));
    let mut terms = Vec::with_capacity(2 * (traj.states.len() - 1));
    for w in traj.states.windows(2) {
        let (cur, next) = (w[0], w[1]);
        let u = tape.slice_cols(cur, 0, 1)?;
        let informed = tape.slice_cols(cur, 1, 2)?;
        let s = match (form, coupling_const) {
            (KineticForm::NeighborState, Some(a)) => tape.matmul(a, informed)?,
            (KineticForm::OwnState, Some(deg)) => tape.scale_rows(informed, deg)?,
            _ => ones,
        };
        let rated = tape.scale_cols(s, traj.beta)?;
        let flux = tape.scale_rows(rated, u)?;
        let delta = tape.sub(next, cur)?;
        let du = tape.slice_cols(delta, 0, 1)?;
        let di = tape.slice_cols(delta, 1, 2)?;
        let res_i = tape.sub(di, flux)?;
        let outflow = tape.row_sum(flux)?;
        let res_u = tape.add(du, outflow)?;
        let res_i = tape.scale_rows(res_i, reach)?;
        let res_u = tape.scale_rows(res_u, reach)?;
        terms.push(tape.sum_squares(res_i)?);
        terms.push(tape.sum_squares(res_u)?);
    }
    tape.add_all(&terms)
}

/// [`kinetic_loss`] evaluated on plain state rows and rates.
pub fn kinetic_loss_value(
    states: &[StateDistribution],
    beta: [f64; 2],
    view: &InfoPropView,
    form: KineticForm,
) -> Result<f64> {
    let mut tape = Tape::new();
    let traj = PredictedTrajectory {
        states: states.iter().map(|s| tape.constant(s.to_tensor())).collect(),
        beta: tape.constant(Tensor::row(&beta)),
    };
    let loss = kinetic_loss(&mut tape, &traj, view, form)?;
    Ok(tape.scalar(loss))
}
