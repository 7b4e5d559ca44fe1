//! Model assembly: configuration, parameter construction, and the
//! scene-to-prediction forward pass in both the single-agent (agent-centric)
//! and multi-agent (scene-centric) settings.

use adapt_tensor::{Graph, Real, Tensor, TensorError, TensorId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{extract_prediction, DecodeOut, Decoder, HeadKind, META_WIDTH};
use crate::encoder::{AttentionOrder, Capture, InteractionStack, Mode, Subgraph};
use crate::params::ParamSet;
use crate::scene::{
    meta_info, to_agent_frame, to_scene_frame, vectorize, Point, Rigid, Scene, SceneError,
    VectorizedScene,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Prediction setting: one normalized pass per target agent, or one
/// scene-centric pass covering every target at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    SingleAgent,
    #[default]
    MultiAgent,
}

fn default_d() -> usize {
    128
}
fn default_l_subgraph() -> usize {
    3
}
fn default_l_interactions() -> usize {
    3
}
fn default_heads() -> usize {
    8
}
fn default_d_ff() -> usize {
    128
}
fn default_k_modes() -> usize {
    6
}
fn default_t_past() -> usize {
    10
}
fn default_t_future() -> usize {
    15
}
fn default_dropout() -> f64 {
    0.1
}
fn default_lane_radius() -> f64 {
    50.0
}
fn default_true() -> bool {
    true
}

/// Architecture and pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature width; must be even.
    pub d: usize,
    /// Polyline subgraph rounds.
    pub l_subgraph: usize,
    /// Interaction-stack iterations.
    pub l_interactions: usize,
    /// Attention heads; must divide `d`.
    pub heads: usize,
    /// Feed-forward hidden width inside attention blocks.
    pub d_ff: usize,
    /// Number of predicted modes per agent.
    pub k_modes: usize,
    /// Observed history length expected in the data.
    pub t_past: usize,
    /// Predicted future length.
    pub t_future: usize,
    pub setting: Setting,
    pub head: HeadKind,
    pub attention_order: AttentionOrder,
    /// Separate subgraph weights for agents and lanes; when false, one
    /// shared subgraph encodes both (lane nodes zero-padded to agent width).
    pub dual_subgraph: bool,
    /// Detach endpoint values feeding the refinement/interpolation/score
    /// branches.
    pub stop_gradient: bool,
    /// Predict endpoint offsets and add them to the raw proposals.
    pub refinement: bool,
    /// Dropout rate on attention probabilities during training.
    pub dropout: f64,
    /// Lanes farther than this from every agent are dropped.
    pub lane_radius: f64,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: default_d(),
            l_subgraph: default_l_subgraph(),
            l_interactions: default_l_interactions(),
            heads: default_heads(),
            d_ff: default_d_ff(),
            k_modes: default_k_modes(),
            t_past: default_t_past(),
            t_future: default_t_future(),
            setting: Setting::default(),
            head: HeadKind::default(),
            attention_order: AttentionOrder::default(),
            dual_subgraph: default_true(),
            stop_gradient: default_true(),
            refinement: default_true(),
            dropout: default_dropout(),
            lane_radius: default_lane_radius(),
            init_seed: 0,
        }
    }
}

/// Width of a vectorized lane node.
pub const LANE_NODE_WIDTH: usize = 4;

impl ModelConfig {
    /// Width of a vectorized agent node: segment endpoints plus a one-hot
    /// timestamp over the `t_past − 1` history segments.
    pub fn agent_node_width(&self) -> usize {
        4 + (self.t_past - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(ModelError::Config(msg.into()));
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return fail("d must be positive and even");
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail("heads must divide d");
        }
        if self.l_subgraph == 0 {
            return fail("l_subgraph must be at least 1");
        }
        if self.k_modes == 0 {
            return fail("k_modes must be at least 1");
        }
        if self.t_past < 2 {
            return fail("t_past must be at least 2");
        }
        if self.t_future == 0 {
            return fail("t_future must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        if self.lane_radius.is_nan() || self.lane_radius <= 0.0 {
            return fail("lane_radius must be positive");
        }
        Ok(())
    }
}

/// One target agent's bookkeeping inside a built forward pass.
#[derive(Debug, Clone)]
pub struct TargetInfo {
    pub agent_id: String,
    /// Agent index inside the owning decode batch.
    pub row: usize,
    /// Maps prediction-frame points back to the world frame.
    pub to_world: Rigid,
    /// Ground-truth future in the prediction frame, when the scene has one.
    pub gt_future: Option<Vec<Point>>,
    pub degenerate_heading: bool,
}

/// One decoded batch plus the targets it covers. The single-agent setting
/// produces one group per target; the multi-agent setting produces a single
/// group.
#[derive(Debug)]
pub struct DecodeGroup {
    pub out: DecodeOut,
    pub targets: Vec<TargetInfo>,
}

/// A complete forward pass over one scene, with the tape kept alive so the
/// caller can attach losses and run backward.
pub struct BuiltForward<T: Real> {
    pub graph: Graph<T>,
    /// Tape handles for every parameter, aligned with `ParamSet` ids.
    pub params: Vec<TensorId>,
    pub groups: Vec<DecodeGroup>,
}

/// Value-level prediction for one agent, in world-frame coordinates.
#[derive(Debug, Clone, Serialize)]
pub struct AgentPrediction {
    pub agent_id: String,
    /// `k` trajectories of `t_future` points each.
    pub trajectories: Vec<Vec<Point>>,
    pub scores: Vec<f64>,
}

/// The full model: configuration, parameters, and component wiring.
#[derive(Debug, Clone)]
pub struct AdaptModel<T: Real> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub agent_subgraph: Subgraph,
    pub lane_subgraph: Option<Subgraph>,
    pub stack: InteractionStack,
    pub decoder: Decoder,
}

impl<T: Real> AdaptModel<T> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut ps = ParamSet::new();
        let agent_w = config.agent_node_width();
        let (agent_subgraph, lane_subgraph) = if config.dual_subgraph {
            (
                Subgraph::init(&mut ps, &mut rng, "enc.agent_sub", agent_w, config.d, config.l_subgraph),
                Some(Subgraph::init(
                    &mut ps,
                    &mut rng,
                    "enc.lane_sub",
                    LANE_NODE_WIDTH,
                    config.d,
                    config.l_subgraph,
                )),
            )
        } else {
            (
                Subgraph::init(&mut ps, &mut rng, "enc.shared_sub", agent_w, config.d, config.l_subgraph),
                None,
            )
        };
        let stack = InteractionStack::init(
            &mut ps,
            &mut rng,
            "enc.stack",
            config.d,
            config.heads,
            config.d_ff,
            config.l_interactions,
        );
        let decoder = Decoder::init(
            &mut ps,
            &mut rng,
            "dec",
            config.d,
            config.k_modes,
            config.t_future,
            config.head,
            config.stop_gradient,
            config.refinement,
        );
        Ok(AdaptModel {
            config,
            params: ps,
            agent_subgraph,
            lane_subgraph,
            stack,
            decoder,
        })
    }

    fn nodes_tensor(nodes: &[Vec<f64>], width: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(nodes.len() * width);
        for row in nodes {
            debug_assert!(row.len() <= width);
            data.extend(row.iter().map(|&v| T::from_f64(v)));
            data.extend(std::iter::repeat_n(T::zero(), width - row.len()));
        }
        Tensor::new(vec![nodes.len(), width], data).expect("non-empty polyline")
    }

    /// Encode a vectorized scene into per-agent features `(n_a, d)` and
    /// optional per-lane features, then run the interaction stack. Also
    /// returns, per agent feature row, the index of the agent in
    /// `scene.agents`.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        p: &[TensorId],
        vs: &VectorizedScene,
        mode: &mut Mode,
        capture: Option<&mut Capture>,
    ) -> Result<(TensorId, Option<TensorId>, Vec<usize>)> {
        if vs.agents.is_empty() {
            return Err(ModelError::Config("no agent polylines to encode".into()));
        }
        let agent_w = self.config.agent_node_width();
        let mut agent_rows = Vec::with_capacity(vs.agents.len());
        let mut agent_index = Vec::with_capacity(vs.agents.len());
        for poly in &vs.agents {
            let nodes = g.constant(Self::nodes_tensor(&poly.nodes, agent_w));
            agent_rows.push(self.agent_subgraph.apply(g, p, nodes)?);
            if let crate::scene::Source::Agent(i) = poly.source {
                agent_index.push(i);
            }
        }
        let agents = if agent_rows.len() == 1 {
            agent_rows[0]
        } else {
            g.concat(&agent_rows, 0)?
        };

        let lanes = if vs.lanes.is_empty() {
            None
        } else {
            let (sub, width) = match &self.lane_subgraph {
                Some(sub) => (sub, LANE_NODE_WIDTH),
                None => (&self.agent_subgraph, agent_w),
            };
            let mut lane_rows = Vec::with_capacity(vs.lanes.len());
            for poly in &vs.lanes {
                let nodes = g.constant(Self::nodes_tensor(&poly.nodes, width));
                lane_rows.push(sub.apply(g, p, nodes)?);
            }
            Some(if lane_rows.len() == 1 {
                lane_rows[0]
            } else {
                g.concat(&lane_rows, 0)?
            })
        };

        let (agents, lanes) = self.stack.apply(
            g,
            p,
            agents,
            lanes,
            self.config.attention_order,
            mode,
            capture,
        )?;
        Ok((agents, lanes, agent_index))
    }

    fn check_scene(&self, scene: &Scene) -> Result<()> {
        if scene.t_past != self.config.t_past {
            return Err(ModelError::Config(format!(
                "scene t_past {} does not match model t_past {}",
                scene.t_past, self.config.t_past
            )));
        }
        if !scene.future.is_empty() && scene.t_future != self.config.t_future {
            return Err(ModelError::Config(format!(
                "scene t_future {} does not match model t_future {}",
                scene.t_future, self.config.t_future
            )));
        }
        Ok(())
    }

    /// Decode the listed targets from encoded agent features, concatenating
    /// each target's feature row with its meta info.
    fn decode_targets(
        &self,
        g: &mut Graph<T>,
        p: &[TensorId],
        local: &Scene,
        agents_feat: TensorId,
        agent_index: &[usize],
        target_ids: &[String],
    ) -> Result<DecodeOut> {
        let mut rows = Vec::with_capacity(target_ids.len());
        for id in target_ids {
            let scene_idx = local
                .agents
                .iter()
                .position(|a| &a.id == id)
                .expect("target id comes from the scene");
            let row = agent_index
                .iter()
                .position(|&i| i == scene_idx)
                .ok_or_else(|| {
                    ModelError::Config(format!("target agent {id} produced no polyline"))
                })?;
            let feat = g.slice(agents_feat, 0, row, 1)?;
            let meta = meta_info(local.agent(id)?)?;
            let meta_data: Vec<T> = meta.to_array().iter().map(|&v| T::from_f64(v)).collect();
            let meta_t = g.constant(Tensor::new(vec![1, META_WIDTH], meta_data).unwrap());
            rows.push(g.concat(&[feat, meta_t], 1)?);
        }
        let feats = if rows.len() == 1 {
            rows[0]
        } else {
            g.concat(&rows, 0)?
        };
        Ok(self.decoder.decode(g, p, feats)?)
    }

    /// Run the full pipeline on one world-frame scene, keeping the tape.
    pub fn build_forward(
        &self,
        scene: &Scene,
        mode: &mut Mode,
        mut capture: Option<&mut Capture>,
    ) -> Result<BuiltForward<T>> {
        self.check_scene(scene)?;
        let target_ids = scene.target_ids();
        if target_ids.is_empty() {
            return Err(ModelError::Config("scene has no target agents".into()));
        }
        let mut graph = Graph::new();
        let params = self.params.register(&mut graph);
        let mut groups = Vec::new();
        match self.config.setting {
            Setting::SingleAgent => {
                for id in &target_ids {
                    let (local, rigid, degenerate) = to_agent_frame(scene, id)?;
                    let vs = vectorize(&local, self.config.lane_radius)?;
                    let (agents_feat, _, agent_index) =
                        self.encode(&mut graph, &params, &vs, mode, capture.as_deref_mut())?;
                    let out = self.decode_targets(
                        &mut graph,
                        &params,
                        &local,
                        agents_feat,
                        &agent_index,
                        std::slice::from_ref(id),
                    )?;
                    groups.push(DecodeGroup {
                        out,
                        targets: vec![TargetInfo {
                            agent_id: id.clone(),
                            row: 0,
                            to_world: rigid.inverse(),
                            gt_future: local.future.get(id).cloned(),
                            degenerate_heading: degenerate,
                        }],
                    });
                }
            }
            Setting::MultiAgent => {
                let (local, rigid) = to_scene_frame(scene)?;
                let vs = vectorize(&local, self.config.lane_radius)?;
                let (agents_feat, _, agent_index) =
                    self.encode(&mut graph, &params, &vs, mode, capture)?;
                let out = self.decode_targets(
                    &mut graph,
                    &params,
                    &local,
                    agents_feat,
                    &agent_index,
                    &target_ids,
                )?;
                let to_world = rigid.inverse();
                let targets = target_ids
                    .iter()
                    .enumerate()
                    .map(|(row, id)| {
                        let degenerate = meta_info(local.agent(id).unwrap())
                            .map(|m| m.degenerate_heading)
                            .unwrap_or(false);
                        TargetInfo {
                            agent_id: id.clone(),
                            row,
                            to_world,
                            gt_future: local.future.get(id).cloned(),
                            degenerate_heading: degenerate,
                        }
                    })
                    .collect();
                groups.push(DecodeGroup { out, targets });
            }
        }
        Ok(BuiltForward {
            graph,
            params,
            groups,
        })
    }

    /// Evaluation-mode forward returning world-frame predictions.
    pub fn predict(&self, scene: &Scene) -> Result<Vec<AgentPrediction>> {
        self.predict_captured(scene, None)
    }

    /// One-agent evaluation pass: encode the scene in the frame dictated by
    /// the setting, then decode only the named target. In the multi-agent
    /// setting this re-runs the scene-centric computation once per call, so
    /// looping it over all targets must reproduce `predict` output.
    pub fn predict_one(&self, scene: &Scene, agent_id: &str) -> Result<AgentPrediction> {
        self.check_scene(scene)?;
        let (local, to_world) = match self.config.setting {
            Setting::SingleAgent => {
                let (local, rigid, _) = to_agent_frame(scene, agent_id)?;
                (local, rigid.inverse())
            }
            Setting::MultiAgent => {
                let (local, rigid) = to_scene_frame(scene)?;
                (local, rigid.inverse())
            }
        };
        let mut graph = Graph::new();
        let params = self.params.register(&mut graph);
        let vs = vectorize(&local, self.config.lane_radius)?;
        let (agents_feat, _, agent_index) =
            self.encode(&mut graph, &params, &vs, &mut Mode::Eval, None)?;
        let key = agent_id.to_string();
        let out = self.decode_targets(
            &mut graph,
            &params,
            &local,
            agents_feat,
            &agent_index,
            std::slice::from_ref(&key),
        )?;
        let set = extract_prediction(&graph, &out, 0);
        Ok(AgentPrediction {
            agent_id: key,
            trajectories: set
                .trajectories
                .iter()
                .map(|traj| traj.iter().map(|&pt| to_world.apply(pt)).collect())
                .collect(),
            scores: set.scores,
        })
    }

    /// Evaluation-mode forward, optionally recording attention
    /// distributions.
    pub fn predict_captured(
        &self,
        scene: &Scene,
        capture: Option<&mut Capture>,
    ) -> Result<Vec<AgentPrediction>> {
        let bf = self.build_forward(scene, &mut Mode::Eval, capture)?;
        let mut out = Vec::new();
        for group in &bf.groups {
            for target in &group.targets {
                let set = extract_prediction(&bf.graph, &group.out, target.row);
                out.push(AgentPrediction {
                    agent_id: target.agent_id.clone(),
                    trajectories: set
                        .trajectories
                        .iter()
                        .map(|traj| traj.iter().map(|&pt| target.to_world.apply(pt)).collect())
                        .collect(),
                    scores: set.scores,
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, GeneratorConfig};

    fn small_config() -> ModelConfig {
        ModelConfig {
            d: 16,
            l_subgraph: 2,
            l_interactions: 1,
            heads: 2,
            d_ff: 16,
            k_modes: 3,
            t_past: 6,
            t_future: 5,
            init_seed: 7,
            ..ModelConfig::default()
        }
    }

    fn sample_scene(index: usize) -> Scene {
        let cfg = GeneratorConfig {
            seed: 400,
            t_past: 6,
            t_future: 5,
            agents_per_scene: [2, 4],
            lanes_per_scene: [2, 4],
            ..GeneratorConfig::default()
        };
        generate_scene(&cfg, index)
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ModelConfig {
            d: 15,
            ..ModelConfig::default()
        };
        assert!(AdaptModel::<f64>::init(bad).is_err());
        let bad = ModelConfig {
            heads: 5,
            d: 16,
            ..ModelConfig::default()
        };
        assert!(AdaptModel::<f64>::init(bad).is_err());
    }

    #[test]
    fn multi_agent_forward_covers_all_targets() {
        let model: AdaptModel<f64> = AdaptModel::init(small_config()).unwrap();
        let scene = sample_scene(0);
        let preds = model.predict(&scene).unwrap();
        let targets = scene.target_ids();
        assert_eq!(preds.len(), targets.len());
        for (p, id) in preds.iter().zip(&targets) {
            assert_eq!(&p.agent_id, id);
            assert_eq!(p.trajectories.len(), 3);
            assert!(p.trajectories.iter().all(|t| t.len() == 5));
            let sum: f64 = p.scores.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_agent_forward_covers_all_targets() {
        let cfg = ModelConfig {
            setting: Setting::SingleAgent,
            head: HeadKind::Static,
            ..small_config()
        };
        let model: AdaptModel<f64> = AdaptModel::init(cfg).unwrap();
        let scene = sample_scene(1);
        let preds = model.predict(&scene).unwrap();
        assert_eq!(preds.len(), scene.target_ids().len());
    }

    #[test]
    fn prediction_is_deterministic() {
        let model: AdaptModel<f64> = AdaptModel::init(small_config()).unwrap();
        let scene = sample_scene(2);
        let a = model.predict(&scene).unwrap();
        let b = model.predict(&scene).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.trajectories, y.trajectories);
            assert_eq!(x.scores, y.scores);
        }
    }

    #[test]
    fn shared_subgraph_setting_works() {
        let cfg = ModelConfig {
            dual_subgraph: false,
            ..small_config()
        };
        let model: AdaptModel<f64> = AdaptModel::init(cfg).unwrap();
        let scene = sample_scene(3);
        assert!(!model.predict(&scene).unwrap().is_empty());
    }

    #[test]
    fn t_past_mismatch_is_rejected() {
        let model: AdaptModel<f64> = AdaptModel::init(small_config()).unwrap();
        let cfg = GeneratorConfig {
            seed: 9,
            t_past: 8,
            t_future: 5,
            ..GeneratorConfig::default()
        };
        let scene = generate_scene(&cfg, 0);
        assert!(matches!(
            model.predict(&scene),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn gt_future_rides_along_in_prediction_frame() {
        let model: AdaptModel<f64> = AdaptModel::init(small_config()).unwrap();
        let scene = sample_scene(4);
        let bf = model
            .build_forward(&scene, &mut Mode::Eval, None)
            .unwrap();
        for group in &bf.groups {
            for t in &group.targets {
                let gt = t.gt_future.as_ref().expect("generated scenes have futures");
                assert_eq!(gt.len(), 5);
                // Mapping the local-frame ground truth back to world recovers
                // the original future.
                let world = &scene.future[&t.agent_id];
                for (local_pt, world_pt) in gt.iter().zip(world) {
                    let back = t.to_world.apply(*local_pt);
                    assert!((back[0] - world_pt[0]).abs() < 1e-9);
                    assert!((back[1] - world_pt[1]).abs() < 1e-9);
                }
            }
        }
    }
}
