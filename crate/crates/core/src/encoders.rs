//! Dual encoder: task projection, structure-agnostic context encoder
//! (attention over all nodes, no adjacency), and residual message-passing
//! graph encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::graph::RelGraph;
use crate::numeric::{Activation, ParamId, ParamStore, Tape, Tensor, Var, MASK_NEG};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub context_depth: usize,
    pub graph_depth: usize,
    pub nonlinearity: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            context_depth: 2,
            graph_depth: 2,
            nonlinearity: Activation::Relu,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return invalid(format!(
                "model width {} must be a positive multiple of the head count {}",
                self.d_model, self.heads
            ));
        }
        if self.context_depth == 0 || self.graph_depth == 0 {
            return invalid("encoder depths must be at least 1");
        }
        Ok(())
    }
}

/// `x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng)?;
        let b = if bias {
            Some(store.add_zeros(format!("{name}.b"), &[fan_out])?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Learnable per-column gain and shift after row normalization.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[d], 1.0))?,
            shift: store.add_zeros(format!("{name}.shift"), &[d])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let g = tape.param(store, self.gain);
        let s = tape.param(store, self.shift);
        let y = tape.scale_cols(n, g)?;
        tape.add_bias(y, s)
    }
}

/// Task-specific input projection.
#[derive(Clone, Debug)]
pub enum Projection {
    /// Affine map of raw feature rows (graph and node tasks).
    Affine(Linear),
    /// Learnable per-user embedding table, smoothed once by the neighborhood
    /// mean over the social graph (link task).
    Embedding { table: ParamId, users: usize },
}

impl Projection {
    pub fn affine<R: Rng>(store: &mut ParamStore, input_width: usize, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Projection::Affine(Linear::new(store, "proj", input_width, d, true, rng)?))
    }

    pub fn embedding<R: Rng>(store: &mut ParamStore, users: usize, d: usize, rng: &mut R) -> Result<Self> {
        let table = store.add_uniform("proj.embedding", &[users, d], d, rng)?;
        Ok(Projection::Embedding { table, users })
    }

    pub fn input_width(&self) -> usize {
        match self {
            Projection::Affine(l) => l.fan_in,
            Projection::Embedding { users, .. } => *users,
        }
    }

    /// Projects raw feature rows `x` (affine variant only).
    pub fn project(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor) -> Result<Var> {
        match self {
            Projection::Affine(l) => {
                if x.cols() != l.fan_in {
                    return shape_err(
                        "project",
                        format!("feature width {} vs registered {}", x.cols(), l.fan_in),
                    );
                }
                let xv = tape.constant(x.clone());
                l.forward(tape, store, xv)
            }
            Projection::Embedding { .. } => invalid("embedding projection takes user ids, not features"),
        }
    }

    /// Rows for the given users after one smoothing pass with the row-stochastic
    /// matrix `smoothing` (`users x users`). Embedding variant only.
    pub fn lookup(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        smoothing: &Tensor,
        users: &[usize],
    ) -> Result<Var> {
        match self {
            Projection::Embedding { table, users: n } => {
                if smoothing.dims() != (*n, *n) {
                    return shape_err("lookup", format!("smoothing {:?} for {n} users", smoothing.dims()));
                }
                let t = tape.param(store, *table);
                let s = tape.constant(smoothing.clone());
                let smoothed = tape.matmul(s, t)?;
                tape.gather_rows(smoothed, users)
            }
            Projection::Affine(_) => invalid("affine projection takes feature rows, not user ids"),
        }
    }
}

/// Row-stochastic `(A + I) / (deg + 1)` over the collapsed graph.
pub fn neighborhood_mean_matrix(graph: &RelGraph) -> Tensor {
    let n = graph.node_count();
    let nb = graph.neighbors();
    let mut t = Tensor::zeros(&[n, n]);
    for (v, list) in nb.iter().enumerate() {
        let w = 1.0 / (list.len() + 1) as f64;
        t.set(v, v, w);
        for j in list {
            t.set(v, *j, w);
        }
    }
    t
}

/// Multi-head attention followed by a position-wise feed-forward layer,
/// each wrapped as `LayerNorm(x + sublayer(x))`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
    act: Activation,
}

impl AttentionBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        act: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return invalid(format!("width {d} not divisible by {heads} heads"));
        }
        let hidden = 2 * d;
        Ok(Self {
            heads,
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng)?,
            out: Linear::new(store, &format!("{name}.o"), d, d, true, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), d, hidden, true, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), hidden, d, true, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            act,
        })
    }

    /// `key_mask[j] == false` removes token `j` from every query's keys.
    /// Masked tokens still act as queries.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (n, d) = tape.dims(x);
        let mask = match key_mask {
            Some(m) if m.len() != n => {
                return shape_err("attention", format!("key mask of {} for {n} tokens", m.len()));
            }
            Some(m) => {
                let row: Vec<f64> = m.iter().map(|keep| if *keep { 0.0 } else { MASK_NEG }).collect();
                let data = (0..n).flat_map(|_| row.iter().copied()).collect();
                Some(Tensor::matrix(n, n, data)?)
            }
            None => None,
        };
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, x)?;
        let v = self.v.forward(tape, store, x)?;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores, mask.as_ref())?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let attn_out = self.out.forward(tape, store, cat)?;
        let r1 = tape.add(x, attn_out)?;
        let x1 = self.norm1.forward(tape, store, r1)?;
        let f = self.ff1.forward(tape, store, x1)?;
        let f = tape.activation(f, self.act)?;
        let f = self.ff2.forward(tape, store, f)?;
        let r2 = tape.add(x1, f)?;
        self.norm2.forward(tape, store, r2)
    }
}

/// Stacked attention blocks over every node of an instance, ignoring edges.
/// No positional encoding: permuting input rows permutes output rows.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    blocks: Vec<AttentionBlock>,
}

impl ContextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.context_depth)
            .map(|i| AttentionBlock::new(store, &format!("ctx.block{i}"), cfg.d_model, cfg.heads, cfg.nonlinearity, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        if tape.dims(x).0 == 0 {
            return invalid("context encoder needs at least one node");
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, store, h, None)?;
        }
        Ok(h)
    }
}

/// Constant aggregation operators of one graph: the self weight
/// `1 / (m_i + 1)` and, per relation, the row-scaled adjacency, where `m_i`
/// counts the (neighbor, relation) messages node `i` receives.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregation {
    pub self_weight: Tensor,
    pub relation_mats: Vec<Tensor>,
}

impl Aggregation {
    pub fn new(graph: &RelGraph) -> Self {
        let n = graph.node_count();
        let mut messages = vec![0usize; n];
        for &(a, b, _) in graph.edges() {
            messages[a] += 1;
            messages[b] += 1;
        }
        let self_weight = Tensor::column(&messages.iter().map(|m| 1.0 / (*m + 1) as f64).collect::<Vec<_>>());
        let mut relation_mats = vec![Tensor::zeros(&[n, n]); graph.n_relations()];
        for &(a, b, r) in graph.edges() {
            let m = &mut relation_mats[r];
            m.set(a, b, 1.0 / (messages[a] + 1) as f64);
            m.set(b, a, 1.0 / (messages[b] + 1) as f64);
        }
        Self {
            self_weight,
            relation_mats,
        }
    }

    pub fn node_count(&self) -> usize {
        self.self_weight.rows()
    }
}

#[derive(Clone, Debug)]
struct GraphLayer {
    w: ParamId,
    gates: ParamId,
    norm: Option<LayerNorm>,
}

/// Residual mean-aggregation message passing:
/// `E' = E + act(LN(W · mean_{j in N(i) ∪ {i}} g_r(ij) E_j))`, with one
/// learned scalar gate per relation type (initialized to 1).
#[derive(Clone, Debug)]
pub struct GraphEncoder {
    layers: Vec<GraphLayer>,
    act: Activation,
    n_relations: usize,
}

impl GraphEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        n_relations: usize,
        layer_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if n_relations == 0 {
            return invalid("graph encoder needs at least one relation type");
        }
        let d = cfg.d_model;
        let mut layers = Vec::with_capacity(cfg.graph_depth);
        for l in 0..cfg.graph_depth {
            let w = store.add_uniform(format!("graph.layer{l}.w"), &[d, d], d, rng)?;
            let gates = store.add(format!("graph.layer{l}.gates"), Tensor::filled(&[n_relations], 1.0))?;
            let norm = if layer_norm {
                Some(LayerNorm::new(store, &format!("graph.layer{l}.norm"), d)?)
            } else {
                None
            };
            layers.push(GraphLayer { w, gates, norm });
        }
        Ok(Self {
            layers,
            act: cfg.nonlinearity,
            n_relations,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Parameter ids of layer `l`: `(weight, gates)`.
    pub fn layer_params(&self, l: usize) -> (ParamId, ParamId) {
        (self.layers[l].w, self.layers[l].gates)
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, agg: &Aggregation, x: Var) -> Result<Var> {
        let n = tape.dims(x).0;
        if agg.node_count() != n {
            return shape_err("graph_encode", format!("{} graph nodes vs {n} feature rows", agg.node_count()));
        }
        if agg.relation_mats.len() != self.n_relations {
            return shape_err(
                "graph_encode",
                format!("{} relation types vs {} gates", agg.relation_mats.len(), self.n_relations),
            );
        }
        let self_w = tape.constant(agg.self_weight.clone());
        let rel: Vec<Var> = agg.relation_mats.iter().map(|m| tape.constant(m.clone())).collect();
        let mut e = x;
        for layer in &self.layers {
            let gates = tape.param(store, layer.gates);
            let mut mean = tape.scale_rows(e, self_w)?;
            for (r, m) in rel.iter().enumerate() {
                let msg = tape.matmul(*m, e)?;
                let g = tape.slice_cols(gates, r, 1)?;
                let msg = tape.scale_by(msg, g)?;
                mean = tape.add(mean, msg)?;
            }
            let w = tape.param(store, layer.w);
            let mut y = tape.matmul(mean, w)?;
            if let Some(norm) = &layer.norm {
                y = norm.forward(tape, store, y)?;
            }
            let y = tape.activation(y, self.act)?;
            e = tape.add(e, y)?;
        }
        Ok(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(d: usize, heads: usize) -> EncoderConfig {
        EncoderConfig {
            d_model: d,
            heads,
            context_depth: 1,
            graph_depth: 1,
            nonlinearity: Activation::Tanh,
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(6, 4).validate().is_err());
        assert!(cfg(8, 4).validate().is_ok());
        let mut c = cfg(8, 2);
        c.graph_depth = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_projection_is_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Projection::affine(&mut store, 3, 4, &mut rng).unwrap();
        store.set_value("proj.w", Tensor::zeros(&[3, 4])).unwrap();
        let mut tape = Tape::new();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        let y = p.project(&mut tape, &store, &x).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
        let wide = Tensor::zeros(&[1, 5]);
        assert!(p.project(&mut tape, &store, &wide).is_err());
    }

    #[test]
    fn identity_projection_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Projection::affine(&mut store, 3, 3, &mut rng).unwrap();
        store.set_value("proj.w", Tensor::identity(3)).unwrap();
        let mut tape = Tape::new();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, 9.0]]).unwrap();
        let y = p.project(&mut tape, &store, &x).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn embedding_lookup_is_pure() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Projection::embedding(&mut store, 4, 5, &mut rng).unwrap();
        let g = RelGraph::new(4, 1, [(0, 1, 0), (1, 2, 0)]).unwrap();
        let s = neighborhood_mean_matrix(&g);
        let mut tape = Tape::new();
        let y = p.lookup(&mut tape, &store, &s, &[2, 2]).unwrap();
        let v = tape.value(y);
        assert_eq!(v.row_slice(0), v.row_slice(1));
        // isolated user 3 keeps its own row
        let y3 = p.lookup(&mut tape, &store, &s, &[3]).unwrap();
        let table = store.value(store.id("proj.embedding").unwrap());
        assert_eq!(tape.value(y3).row_slice(0), table.row_slice(3));
    }

    #[test]
    fn single_token_attention_is_well_defined() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = ContextEncoder::new(&mut store, &cfg(8, 2), &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.3; 8]]).unwrap());
        let h = enc.encode(&mut tape, &store, x).unwrap();
        assert_eq!(tape.dims(h), (1, 8));
        assert!(tape.value(h).is_finite());
        let empty = tape.constant(Tensor::zeros(&[0, 8]));
        assert!(enc.encode(&mut tape, &store, empty).is_err());
    }

    #[test]
    fn duplicate_rows_give_duplicate_outputs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = ContextEncoder::new(&mut store, &cfg(8, 4), &mut rng).unwrap();
        let mut tape = Tape::new();
        let a: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..8).map(|i| (i as f64 * 0.11).cos()).collect();
        let x = tape.constant(Tensor::from_rows(&[a.clone(), b, a]).unwrap());
        let h = enc.encode(&mut tape, &store, x).unwrap();
        let v = tape.value(h);
        for j in 0..8 {
            assert!((v.get(0, j) - v.get(2, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_layer_hand_case() {
        // path a-b-c, identity weight, identity nonlinearity, no norm:
        // E_b = x_b + mean(x_a, x_b, x_c)
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = cfg(2, 1);
        c.nonlinearity = Activation::Identity;
        let enc = GraphEncoder::new(&mut store, &c, 1, false, &mut rng).unwrap();
        store.set_value("graph.layer0.w", Tensor::identity(2)).unwrap();
        let g = RelGraph::new(3, 1, [(0, 1, 0), (1, 2, 0)]).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0], vec![-4.0, 8.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let e = enc.encode(&mut tape, &store, &Aggregation::new(&g), xv).unwrap();
        let out = tape.value(e);
        let expect_b = [3.0 + (1.0 + 3.0 - 4.0) / 3.0, 5.0 + (2.0 + 5.0 + 8.0) / 3.0];
        assert!((out.get(1, 0) - expect_b[0]).abs() < 1e-12);
        assert!((out.get(1, 1) - expect_b[1]).abs() < 1e-12);
        // end node a: x_a + mean(x_a, x_b)
        assert!((out.get(0, 0) - (1.0 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn edgeless_graph_is_local() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = GraphEncoder::new(&mut store, &cfg(4, 1), 1, true, &mut rng).unwrap();
        let g = RelGraph::new(2, 1, []).unwrap();
        let r0 = vec![0.1, -0.4, 0.9, 0.2];
        let run = |other: Vec<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_rows(&[r0.clone(), other]).unwrap());
            let e = enc.encode(&mut tape, &store, &Aggregation::new(&g), x).unwrap();
            tape.value(e).row_slice(0).to_vec()
        };
        assert_eq!(run(vec![1.0; 4]), run(vec![-7.0, 2.0, 0.0, 3.0]));
    }

    #[test]
    fn cycle_with_identical_features_is_uniform() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut c = cfg(4, 1);
        c.graph_depth = 2;
        let enc = GraphEncoder::new(&mut store, &c, 1, true, &mut rng).unwrap();
        let g = RelGraph::new(5, 1, (0..5).map(|i| (i, (i + 1) % 5, 0))).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&vec![vec![0.3, -0.2, 0.5, 0.1]; 5]).unwrap());
        let e = enc.encode(&mut tape, &store, &Aggregation::new(&g), x).unwrap();
        let out = tape.value(e);
        for i in 1..5 {
            for j in 0..4 {
                assert!((out.get(i, j) - out.get(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_graph_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = GraphEncoder::new(&mut store, &cfg(4, 1), 1, true, &mut rng).unwrap();
        let g = RelGraph::new(3, 1, []).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(enc.encode(&mut tape, &store, &Aggregation::new(&g), x).is_err());
    }
}
