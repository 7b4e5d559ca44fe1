//! Scene representation: agent tracks, lane centerlines, reference frames,
//! meta info, and vectorization into polyline nodes.
//!
//! Scenes on disk are always world-frame `adapt-scene/1` records. Before a
//! scene reaches the model it is normalized either to an agent-centric frame
//! (target at the origin, heading along +x — one pass per agent, pose
//! invariant) or to a scene-centric frame (agent centroid at the origin, no
//! rotation — one pass for all agents).

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Version tag written into every serialized scene record.
pub const SCENE_SCHEMA: &str = "adapt-scene/1";

/// Planar point in meters.
pub type Point = [f64; 2];

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum SceneError {
    #[error("agent {id:?} not found in scene")]
    UnknownAgent { id: String },
    #[error("agent {id:?}: {msg}")]
    InvalidTrack { id: String, msg: String },
    #[error("scene invalid: {0}")]
    Invalid(String),
    #[error("no agent has a valid position at the current timestep")]
    NoValidAgents,
    #[error("vectorize requires an agent-centric or scene-centric frame, got {0:?}")]
    WorldFrame(Frame),
    #[error("unsupported schema version {0:?} (expected {SCENE_SCHEMA:?})")]
    SchemaVersion(String),
}

pub type Result<T> = std::result::Result<T, SceneError>;

/// Observed history of one agent: `t_past` positions at fixed Δt, with a
/// per-step validity flag. Targets (agents the model must predict) are fully
/// observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: String,
    pub is_target: bool,
    pub positions: Vec<Point>,
    pub valid: Vec<bool>,
}

impl AgentTrack {
    pub fn fully_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    /// Position at the current timestep (the last history entry), if valid.
    pub fn current_position(&self) -> Option<Point> {
        if *self.valid.last()? {
            Some(*self.positions.last()?)
        } else {
            None
        }
    }
}

/// Lane centerline: at least two consecutive distinct points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LanePolyline {
    pub points: Vec<Point>,
}

/// Reference frame a scene's coordinates are expressed in. The tag is
/// in-memory only; serialized records are always world-frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Frame {
    #[default]
    World,
    AgentCentric {
        agent_id: String,
    },
    SceneCentric,
}

fn default_schema() -> String {
    SCENE_SCHEMA.to_string()
}

/// One prediction scenario: agent histories, lane centerlines, and (for
/// training/evaluation data) per-agent ground-truth futures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub dt: f64,
    pub t_past: usize,
    pub t_future: usize,
    pub agents: Vec<AgentTrack>,
    pub lanes: Vec<LanePolyline>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub future: BTreeMap<String, Vec<Point>>,
    #[serde(skip)]
    pub frame: Frame,
}

impl Scene {
    /// Check every structural invariant; called on construction paths and on
    /// every record read from disk.
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCENE_SCHEMA {
            return Err(SceneError::SchemaVersion(self.schema.clone()));
        }
        if self.dt.is_nan() || self.dt <= 0.0 {
            return Err(SceneError::Invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if self.t_past < 2 {
            return Err(SceneError::Invalid(format!(
                "t_past must be at least 2, got {}",
                self.t_past
            )));
        }
        if self.agents.is_empty() {
            return Err(SceneError::Invalid("scene has no agents".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for a in &self.agents {
            if a.positions.len() != self.t_past || a.valid.len() != self.t_past {
                return Err(SceneError::InvalidTrack {
                    id: a.id.clone(),
                    msg: format!(
                        "expected {} positions and validity flags, got {} and {}",
                        self.t_past,
                        a.positions.len(),
                        a.valid.len()
                    ),
                });
            }
            if a.is_target && !a.fully_valid() {
                return Err(SceneError::InvalidTrack {
                    id: a.id.clone(),
                    msg: "target agents must be visible at all timestamps".into(),
                });
            }
            if !ids.insert(a.id.clone()) {
                return Err(SceneError::Invalid(format!("duplicate agent id {:?}", a.id)));
            }
        }
        if !self.agents.iter().any(|a| a.is_target) {
            return Err(SceneError::Invalid("scene has no target agent".into()));
        }
        for (i, lane) in self.lanes.iter().enumerate() {
            if lane.points.len() < 2 {
                return Err(SceneError::Invalid(format!(
                    "lane {i} has {} points, need at least 2",
                    lane.points.len()
                )));
            }
            for w in lane.points.windows(2) {
                if w[0] == w[1] {
                    return Err(SceneError::Invalid(format!(
                        "lane {i} has a degenerate zero-length segment"
                    )));
                }
            }
        }
        for (id, fut) in &self.future {
            if !ids.contains(id) {
                return Err(SceneError::Invalid(format!(
                    "future references unknown agent {id:?}"
                )));
            }
            if fut.len() != self.t_future {
                return Err(SceneError::Invalid(format!(
                    "future of agent {id:?} has {} steps, expected {}",
                    fut.len(),
                    self.t_future
                )));
            }
        }
        for a in self.agents.iter().filter(|a| a.is_target) {
            if !self.future.is_empty() && !self.future.contains_key(&a.id) {
                return Err(SceneError::Invalid(format!(
                    "target agent {:?} has no ground-truth future",
                    a.id
                )));
            }
        }
        Ok(())
    }

    pub fn agent(&self, id: &str) -> Result<&AgentTrack> {
        self.agents
            .iter()
            .find(|a| a.id == id)
            .ok_or_else(|| SceneError::UnknownAgent { id: id.to_string() })
    }

    pub fn target_ids(&self) -> Vec<String> {
        self.agents
            .iter()
            .filter(|a| a.is_target)
            .map(|a| a.id.clone())
            .collect()
    }

    /// Apply a rigid transform to every coordinate (agent histories, lanes,
    /// futures). The frame tag is preserved; frame constructors set it.
    pub fn transformed(&self, r: &Rigid) -> Scene {
        let mut out = self.clone();
        for a in &mut out.agents {
            for p in &mut a.positions {
                *p = r.apply(*p);
            }
        }
        for lane in &mut out.lanes {
            for p in &mut lane.points {
                *p = r.apply(*p);
            }
        }
        for fut in out.future.values_mut() {
            for p in fut.iter_mut() {
                *p = r.apply(*p);
            }
        }
        out
    }
}

/// Proper rigid motion p ↦ R(angle)·p + translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid {
    pub angle: f64,
    pub translation: Point,
}

impl Rigid {
    pub fn identity() -> Self {
        Rigid {
            angle: 0.0,
            translation: [0.0, 0.0],
        }
    }

    pub fn translation(t: Point) -> Self {
        Rigid {
            angle: 0.0,
            translation: t,
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        let (s, c) = self.angle.sin_cos();
        [
            c * p[0] - s * p[1] + self.translation[0],
            s * p[0] + c * p[1] + self.translation[1],
        ]
    }

    pub fn inverse(&self) -> Rigid {
        let (s, c) = self.angle.sin_cos();
        let [tx, ty] = self.translation;
        Rigid {
            angle: -self.angle,
            translation: [-(c * tx + s * ty), -(-s * tx + c * ty)],
        }
    }
}

/// Conditioning vector for the decoder: position at t, position at t−1, and
/// heading at t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaInfo {
    pub position: Point,
    pub previous: Point,
    /// Heading in (−π, π]; 0 under the stationary fallback.
    pub yaw: f64,
    /// True when the last displacement was zero and yaw fell back to 0.
    pub degenerate_heading: bool,
}

impl MetaInfo {
    pub fn to_array(&self) -> [f64; 5] {
        [
            self.position[0],
            self.position[1],
            self.previous[0],
            self.previous[1],
            self.yaw,
        ]
    }
}

/// Meta info of an agent from its last two observed steps.
pub fn meta_info(agent: &AgentTrack) -> Result<MetaInfo> {
    let t = agent.positions.len();
    if t < 2 || !agent.valid[t - 1] || !agent.valid[t - 2] {
        return Err(SceneError::InvalidTrack {
            id: agent.id.clone(),
            msg: "meta info needs valid positions at t and t−1".into(),
        });
    }
    let position = agent.positions[t - 1];
    let previous = agent.positions[t - 2];
    let (dx, dy) = (position[0] - previous[0], position[1] - previous[1]);
    let degenerate = dx == 0.0 && dy == 0.0;
    let mut yaw = if degenerate { 0.0 } else { dy.atan2(dx) };
    if yaw == -std::f64::consts::PI {
        yaw = std::f64::consts::PI;
    }
    Ok(MetaInfo {
        position,
        previous,
        yaw,
        degenerate_heading: degenerate,
    })
}

/// Normalize so `target` sits at the origin with heading along +x. Every
/// agent, lane, and future is transformed rigidly. Returns the transformed
/// scene, the rigid map that was applied (world → local), and a flag that is
/// true when the target was stationary and the zero-heading fallback was
/// used.
pub fn to_agent_frame(scene: &Scene, target: &str) -> Result<(Scene, Rigid, bool)> {
    let agent = scene.agent(target)?;
    let meta = meta_info(agent)?;
    let (s, c) = (-meta.yaw).sin_cos();
    let [px, py] = meta.position;
    // p ↦ R(−yaw)·(p − position)
    let rigid = Rigid {
        angle: -meta.yaw,
        translation: [-(c * px - s * py), -(s * px + c * py)],
    };
    let mut out = scene.transformed(&rigid);
    out.frame = Frame::AgentCentric {
        agent_id: target.to_string(),
    };
    Ok((out, rigid, meta.degenerate_heading))
}

/// Normalize so the mean of all agents' current positions is the origin.
/// Translation only — no rotation — so every agent shares one frame and the
/// model can predict all of them in a single pass. Returns the transformed
/// scene and the rigid map that was applied (world → local).
pub fn to_scene_frame(scene: &Scene) -> Result<(Scene, Rigid)> {
    let current: Vec<Point> = scene
        .agents
        .iter()
        .filter_map(|a| a.current_position())
        .collect();
    if current.is_empty() {
        return Err(SceneError::NoValidAgents);
    }
    let n = current.len() as f64;
    let cx = current.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = current.iter().map(|p| p[1]).sum::<f64>() / n;
    let rigid = Rigid::translation([-cx, -cy]);
    let mut out = scene.transformed(&rigid);
    out.frame = Frame::SceneCentric;
    Ok((out, rigid))
}

/// Where a vectorized polyline came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// Index into `scene.agents`.
    Agent(usize),
    /// Index into `scene.lanes`.
    Lane(usize),
}

/// One polyline as a sequence of segment nodes. `segments[i]` is the index of
/// the input segment (start-point index) node `i` was built from, so every
/// node traces back to exactly one input segment.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorPolyline {
    pub source: Source,
    pub segments: Vec<usize>,
    pub nodes: Vec<Vec<f64>>,
}

/// Vectorized scene: per-agent and per-lane node sets ready for the polyline
/// subgraph encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorizedScene {
    pub agents: Vec<VectorPolyline>,
    pub lanes: Vec<VectorPolyline>,
    pub agent_node_width: usize,
    pub lane_node_width: usize,
}

impl VectorizedScene {
    pub fn node_count(&self) -> usize {
        self.agents
            .iter()
            .chain(&self.lanes)
            .map(|p| p.nodes.len())
            .sum()
    }
}

/// Vectorize a normalized scene. Agent nodes are one per consecutive valid
/// displacement with features (start, end, one-hot timestep); lane nodes are
/// one per segment with features (start, end). Lanes with no point strictly
/// closer than `radius` to any agent's current position are dropped. Agents
/// with no valid consecutive pair produce no polyline.
pub fn vectorize(scene: &Scene, radius: f64) -> Result<VectorizedScene> {
    if scene.frame == Frame::World {
        return Err(SceneError::WorldFrame(scene.frame.clone()));
    }
    let agent_node_width = 4 + (scene.t_past - 1);
    let mut agents = Vec::new();
    for (ai, a) in scene.agents.iter().enumerate() {
        let mut nodes = Vec::new();
        let mut segments = Vec::new();
        for t in 0..scene.t_past - 1 {
            if a.valid[t] && a.valid[t + 1] {
                let mut feat = vec![0.0; agent_node_width];
                feat[0] = a.positions[t][0];
                feat[1] = a.positions[t][1];
                feat[2] = a.positions[t + 1][0];
                feat[3] = a.positions[t + 1][1];
                feat[4 + t] = 1.0;
                nodes.push(feat);
                segments.push(t);
            }
        }
        if !nodes.is_empty() {
            agents.push(VectorPolyline {
                source: Source::Agent(ai),
                segments,
                nodes,
            });
        }
    }

    let anchors: Vec<Point> = scene
        .agents
        .iter()
        .filter_map(|a| a.current_position())
        .collect();
    let mut lanes = Vec::new();
    for (li, lane) in scene.lanes.iter().enumerate() {
        let near = lane.points.iter().any(|p| {
            anchors
                .iter()
                .any(|a| ((p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2)).sqrt() < radius)
        });
        if !near {
            continue;
        }
        let mut nodes = Vec::new();
        let mut segments = Vec::new();
        for (si, w) in lane.points.windows(2).enumerate() {
            nodes.push(vec![w[0][0], w[0][1], w[1][0], w[1][1]]);
            segments.push(si);
        }
        lanes.push(VectorPolyline {
            source: Source::Lane(li),
            segments,
            nodes,
        });
    }

    Ok(VectorizedScene {
        agents,
        lanes,
        agent_node_width,
        lane_node_width: 4,
    })
}
