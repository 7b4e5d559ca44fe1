//! Scene encoder: polyline subgraphs followed by a stack of multi-head
//! attention blocks that exchange information between agents and lanes.
//!
//! All building blocks hold [`ParamId`]s into a [`ParamSet`] and are applied
//! to a fresh tape each forward pass via the `p: &[TensorId]` slice produced
//! by [`ParamSet::register`].

use adapt_tensor::{Graph, Real, Result, Tensor, TensorId};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::params::{self, ParamId, ParamSet};

/// Forward-pass mode. Training mode enables dropout, driven by a caller-owned
/// deterministic RNG.
pub enum Mode<'r> {
    Eval,
    Train {
        dropout: f64,
        rng: &'r mut dyn RngCore,
    },
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

fn maybe_dropout<T: Real>(g: &mut Graph<T>, x: TensorId, mode: &mut Mode) -> Result<TensorId> {
    match mode {
        Mode::Eval => Ok(x),
        Mode::Train { dropout, rng } => g.dropout(x, *dropout, &mut **rng),
    }
}

/// One attention distribution captured during a forward pass, for offline
/// inspection of what a block attends to.
#[derive(Debug, Clone, Serialize)]
pub struct AttentionRecord {
    pub iteration: usize,
    pub block: String,
    pub head: usize,
    pub query_index: usize,
    pub probabilities: Vec<f64>,
}

pub type Capture = Vec<AttentionRecord>;

/// Dense layer computing `x · W (+ b)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn init<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Linear {
        let w = ps.add(format!("{name}.w"), params::xavier_uniform(rng, d_in, d_out));
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(vec![d_out])));
        Linear { w, b, d_in, d_out }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[TensorId], x: TensorId) -> Result<TensorId> {
        let xw = g.matmul(x, p[self.w.index()])?;
        match self.b {
            Some(b) => g.add(xw, p[b.index()]),
            None => Ok(xw),
        }
    }
}

/// Learned gain/bias pair for layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn init<T: Real>(ps: &mut ParamSet<T>, name: &str, width: usize) -> LayerNormParams {
        LayerNormParams {
            gain: ps.add(format!("{name}.gain"), params::ones(vec![width])),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(vec![width])),
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[TensorId], x: TensorId) -> Result<TensorId> {
        g.layer_norm(x, p[self.gain.index()], p[self.bias.index()])
    }
}

/// Two dense layers with layer normalization and ReLU after the first:
/// `lin2(relu(norm(lin1(x))))`. Used for subgraph node updates.
#[derive(Debug, Clone)]
pub struct TwoLayerMlp {
    pub lin1: Linear,
    pub ln: LayerNormParams,
    pub lin2: Linear,
}

impl TwoLayerMlp {
    pub fn init<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> TwoLayerMlp {
        TwoLayerMlp {
            lin1: Linear::init(ps, rng, &format!("{name}.lin1"), d_in, d_hidden, true),
            ln: LayerNormParams::init(ps, &format!("{name}.ln"), d_hidden),
            lin2: Linear::init(ps, rng, &format!("{name}.lin2"), d_hidden, d_out, true),
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[TensorId], x: TensorId) -> Result<TensorId> {
        let h = self.lin1.apply(g, p, x)?;
        let h = self.ln.apply(g, p, h)?;
        let h = g.relu(h);
        self.lin2.apply(g, p, h)
    }
}

/// Polyline subgraph: per round, node features pass through an MLP and are
/// concatenated with the max-pool over the polyline's nodes; the polyline
/// feature is the max-pool of the final round's node features.
#[derive(Debug, Clone)]
pub struct Subgraph {
    pub layers: Vec<TwoLayerMlp>,
    pub node_width: usize,
    pub d: usize,
}

impl Subgraph {
    /// `d` must be even: each round's MLP emits `d/2` and the pooled concat
    /// restores width `d`.
    pub fn init<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        node_width: usize,
        d: usize,
        rounds: usize,
    ) -> Subgraph {
        assert!(d.is_multiple_of(2), "feature width must be even, got {d}");
        assert!(rounds >= 1, "subgraph needs at least one round");
        let half = d / 2;
        let layers = (0..rounds)
            .map(|l| {
                let d_in = if l == 0 { node_width } else { d };
                TwoLayerMlp::init(ps, rng, &format!("{name}.round{l}"), d_in, half, half)
            })
            .collect();
        Subgraph { layers, node_width, d }
    }

    /// Encode one polyline of shape `(n_nodes, node_width)` to `(1, d)`.
    pub fn apply<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[TensorId],
        nodes: TensorId,
    ) -> Result<TensorId> {
        let n = g.shape(nodes)[0];
        let half = self.d / 2;
        let mut x = nodes;
        for layer in &self.layers {
            let h = layer.apply(g, p, x)?;
            let pooled = g.max_axis(h, 0)?;
            let pooled = g.reshape(pooled, vec![1, half])?;
            let pooled = g.broadcast_to(pooled, vec![n, half])?;
            x = g.concat(&[h, pooled], 1)?;
        }
        let feature = g.max_axis(x, 0)?;
        g.reshape(feature, vec![1, self.d])
    }
}

/// Multi-head attention block: pre-softmax scaling by `1/sqrt(d_head)`,
/// dropout on the attention probabilities, then two residual+norm stages
/// around the attention output and a feed-forward network.
#[derive(Debug, Clone)]
pub struct Mhab {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub heads: usize,
    pub d: usize,
}

impl Mhab {
    pub fn init<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
    ) -> Mhab {
        assert!(heads >= 1 && d.is_multiple_of(heads), "heads must divide width {d}");
        Mhab {
            wq: Linear::init(ps, rng, &format!("{name}.wq"), d, d, false),
            wk: Linear::init(ps, rng, &format!("{name}.wk"), d, d, false),
            wv: Linear::init(ps, rng, &format!("{name}.wv"), d, d, false),
            wo: Linear::init(ps, rng, &format!("{name}.wo"), d, d, false),
            ffn1: Linear::init(ps, rng, &format!("{name}.ffn1"), d, d_ff, true),
            ffn2: Linear::init(ps, rng, &format!("{name}.ffn2"), d_ff, d, true),
            ln1: LayerNormParams::init(ps, &format!("{name}.ln1"), d),
            ln2: LayerNormParams::init(ps, &format!("{name}.ln2"), d),
            heads,
            d,
        }
    }

    /// Apply the block with queries `f_q` of shape `(nq, d)` against
    /// keys/values `f_kv` of shape `(nk, d)`, returning `(nq, d)`.
    #[allow(clippy::too_many_arguments)]
    pub fn apply<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[TensorId],
        f_q: TensorId,
        f_kv: TensorId,
        mode: &mut Mode,
        capture: Option<&mut Capture>,
        iteration: usize,
        block: &str,
    ) -> Result<TensorId> {
        let dh = self.d / self.heads;
        let q = self.wq.apply(g, p, f_q)?;
        let k = self.wk.apply(g, p, f_kv)?;
        let v = self.wv.apply(g, p, f_kv)?;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let mut head_outputs = Vec::with_capacity(self.heads);
        let mut records = capture;
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let probs = g.softmax(scores, 1)?;
            if let Some(records) = records.as_deref_mut() {
                let values = g.value(probs);
                let nk = values.shape()[1];
                for (qi, row) in values.data().chunks(nk).enumerate() {
                    records.push(AttentionRecord {
                        iteration,
                        block: block.to_string(),
                        head: h,
                        query_index: qi,
                        probabilities: row.iter().map(|&v| Real::to_f64(v)).collect(),
                    });
                }
            }
            let probs = maybe_dropout(g, probs, mode)?;
            head_outputs.push(g.matmul(probs, vh)?);
        }
        let mha = g.concat(&head_outputs, 1)?;
        let mha = self.wo.apply(g, p, mha)?;

        let res1 = g.add(f_q, mha)?;
        let f_tilde = self.ln1.apply(g, p, res1)?;

        let ff = self.ffn1.apply(g, p, f_tilde)?;
        let ff = g.relu(ff);
        let ff = self.ffn2.apply(g, p, ff)?;
        let res2 = g.add(f_tilde, ff)?;
        self.ln2.apply(g, p, res2)
    }
}

/// Order in which the four attention block kinds are applied across the
/// stack's iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionOrder {
    /// Per iteration: lanes attend to agents (AL), lanes to lanes (LL),
    /// agents to lanes (LA), agents to agents (AA); repeated `L` times.
    #[default]
    Iterative,
    /// Kind-major: all AL iterations, then all LL, LA, AA.
    Sequential,
}

/// Per-iteration set of the four attention blocks.
#[derive(Debug, Clone)]
pub struct InteractionBlocks {
    pub al: Mhab,
    pub ll: Mhab,
    pub la: Mhab,
    pub aa: Mhab,
}

/// Stack of agent/lane attention iterations over shared feature width `d`.
#[derive(Debug, Clone)]
pub struct InteractionStack {
    pub iterations: Vec<InteractionBlocks>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum BlockKind {
    Al,
    Ll,
    La,
    Aa,
}

impl BlockKind {
    fn label(self) -> &'static str {
        match self {
            BlockKind::Al => "AL",
            BlockKind::Ll => "LL",
            BlockKind::La => "LA",
            BlockKind::Aa => "AA",
        }
    }
}

impl InteractionStack {
    pub fn init<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        iterations: usize,
    ) -> InteractionStack {
        let iterations = (0..iterations)
            .map(|i| InteractionBlocks {
                al: Mhab::init(ps, rng, &format!("{name}.it{i}.al"), d, heads, d_ff),
                ll: Mhab::init(ps, rng, &format!("{name}.it{i}.ll"), d, heads, d_ff),
                la: Mhab::init(ps, rng, &format!("{name}.it{i}.la"), d, heads, d_ff),
                aa: Mhab::init(ps, rng, &format!("{name}.it{i}.aa"), d, heads, d_ff),
            })
            .collect();
        InteractionStack { iterations }
    }

    /// Run the stack over agent features `(n_a, d)` and optional lane
    /// features `(n_l, d)`. Lane blocks are skipped when there are no lanes.
    /// Returns the updated `(agents, lanes)` features.
    #[allow(clippy::too_many_arguments)]
    pub fn apply<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[TensorId],
        agents: TensorId,
        lanes: Option<TensorId>,
        order: AttentionOrder,
        mode: &mut Mode,
        mut capture: Option<&mut Capture>,
    ) -> Result<(TensorId, Option<TensorId>)> {
        let mut agents = agents;
        let mut lanes = lanes;
        let schedule: Vec<(usize, BlockKind)> = match order {
            AttentionOrder::Iterative => (0..self.iterations.len())
                .flat_map(|i| {
                    [BlockKind::Al, BlockKind::Ll, BlockKind::La, BlockKind::Aa]
                        .into_iter()
                        .map(move |k| (i, k))
                })
                .collect(),
            AttentionOrder::Sequential => [BlockKind::Al, BlockKind::Ll, BlockKind::La, BlockKind::Aa]
                .into_iter()
                .flat_map(|k| (0..self.iterations.len()).map(move |i| (i, k)))
                .collect(),
        };
        for (i, kind) in schedule {
            let blocks = &self.iterations[i];
            match kind {
                BlockKind::Al => {
                    if let Some(l) = lanes {
                        lanes = Some(blocks.al.apply(
                            g,
                            p,
                            l,
                            agents,
                            mode,
                            capture.as_deref_mut(),
                            i,
                            kind.label(),
                        )?);
                    }
                }
                BlockKind::Ll => {
                    if let Some(l) = lanes {
                        lanes = Some(blocks.ll.apply(
                            g,
                            p,
                            l,
                            l,
                            mode,
                            capture.as_deref_mut(),
                            i,
                            kind.label(),
                        )?);
                    }
                }
                BlockKind::La => {
                    if let Some(l) = lanes {
                        agents = blocks.la.apply(
                            g,
                            p,
                            agents,
                            l,
                            mode,
                            capture.as_deref_mut(),
                            i,
                            kind.label(),
                        )?;
                    }
                }
                BlockKind::Aa => {
                    agents = blocks.aa.apply(
                        g,
                        p,
                        agents,
                        agents,
                        mode,
                        capture.as_deref_mut(),
                        i,
                        kind.label(),
                    )?;
                }
            }
        }
        Ok((agents, lanes))
    }
}
