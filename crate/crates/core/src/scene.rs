//! Scene types, target-centric frames, and the fixed-shape network inputs.

use std::f64::consts::PI;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{RecoatError, Result};

/// Past states per track (1 s at 10 Hz).
pub const HISTORY_LEN: usize = 10;
/// Future waypoints per target (8 s at 2 Hz).
pub const FUTURE_LEN: usize = 16;
pub const HISTORY_DT: f64 = 0.1;
pub const FUTURE_DT: f64 = 0.5;
/// Values per state row: x, y, vx, vy, heading.
pub const STATE_DIM: usize = 5;
pub const MAX_NEIGHBORS: usize = 10;
/// Neighbors farther than this from the target at t0 are ignored.
pub const NEIGHBOR_RADIUS: f64 = 30.0;

pub type Point = [f64; 2];
pub type Polyline = Vec<Point>;
pub type Polygon = Vec<Point>;

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentType {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentType {
    pub const ALL: [AgentType; 3] = [AgentType::Vehicle, AgentType::Pedestrian, AgentType::Cyclist];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentType::Vehicle => "vehicle",
            AgentType::Pedestrian => "pedestrian",
            AgentType::Cyclist => "cyclist",
        }
    }
}

impl std::str::FromStr for AgentType {
    type Err = RecoatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vehicle" => Ok(AgentType::Vehicle),
            "pedestrian" => Ok(AgentType::Pedestrian),
            "cyclist" => Ok(AgentType::Cyclist),
            other => Err(RecoatError::InvalidInput(format!("unknown agent type `{other}`"))),
        }
    }
}

impl std::fmt::Display for AgentType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Kinematic state of one agent at one timestep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub heading: f64,
    pub valid: bool,
}

impl AgentState {
    pub fn new(x: f64, y: f64, vx: f64, vy: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            vx,
            vy,
            heading: normalize_angle(heading),
            valid: true,
        }
    }

    /// Missing observation; all numeric fields are zero.
    pub fn invalid() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            vx: 0.0,
            vy: 0.0,
            heading: 0.0,
            valid: false,
        }
    }

    pub fn position(&self) -> Point {
        [self.x, self.y]
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    pub fn row(&self) -> [f64; STATE_DIM] {
        [self.x, self.y, self.vx, self.vy, self.heading]
    }

    fn is_finite(&self) -> bool {
        self.row().iter().all(|v| v.is_finite())
    }
}

impl Serialize for AgentState {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let valid = if self.valid { 1.0 } else { 0.0 };
        [self.x, self.y, self.vx, self.vy, self.heading, valid].serialize(s)
    }
}

impl<'de> Deserialize<'de> for AgentState {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x, y, vx, vy, heading, valid] = <[f64; 6]>::deserialize(d)?;
        if valid != 0.0 && valid != 1.0 {
            return Err(serde::de::Error::custom(format!("valid flag must be 0 or 1, got {valid}")));
        }
        if valid == 0.0 {
            return Ok(AgentState::invalid());
        }
        Ok(AgentState {
            x,
            y,
            vx,
            vy,
            heading,
            valid: true,
        })
    }
}

/// One agent's past states, oldest first; the last entry is t0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    #[serde(rename = "type")]
    pub agent_type: AgentType,
    pub states: Vec<AgentState>,
    /// Ground-truth future at the target's 2 Hz horizon, `None` where unobserved.
    /// Only used for evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub future: Option<Vec<Option<Point>>>,
}

impl AgentTrack {
    pub fn new(agent_type: AgentType, states: Vec<AgentState>) -> Self {
        Self {
            agent_type,
            states,
            future: None,
        }
    }

    pub fn last_valid(&self) -> Option<&AgentState> {
        self.states.iter().rev().find(|s| s.valid)
    }

    pub fn current(&self) -> Option<&AgentState> {
        self.states.last()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadLineKind {
    RoadEdge,
    SolidWhite,
    BrokenWhite,
    Yellow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadLine {
    pub kind: RoadLineKind,
    pub points: Polyline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightState {
    Red,
    Green,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficLight {
    pub position: Point,
    pub state: LightState,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MapContext {
    #[serde(default)]
    pub lanes: Vec<Polygon>,
    #[serde(default)]
    pub road_lines: Vec<RoadLine>,
    #[serde(default)]
    pub crosswalks: Vec<Polygon>,
    #[serde(default)]
    pub speed_bumps: Vec<Polygon>,
    #[serde(default)]
    pub stop_signs: Vec<Point>,
    #[serde(default)]
    pub traffic_lights: Vec<TrafficLight>,
}

fn close_polygon(p: &mut Polygon) {
    if let (Some(first), Some(last)) = (p.first().copied(), p.last().copied()) {
        if first != last {
            p.push(first);
        }
    }
}

impl MapContext {
    /// Closes every polygon so its first and last vertices coincide.
    pub fn normalize(&mut self) {
        for p in self
            .lanes
            .iter_mut()
            .chain(self.crosswalks.iter_mut())
            .chain(self.speed_bumps.iter_mut())
        {
            close_polygon(p);
        }
    }

    fn map_points(&self, f: impl Fn(Point) -> Point) -> Self {
        let poly = |v: &Vec<Polygon>| v.iter().map(|p| p.iter().map(|&q| f(q)).collect()).collect();
        MapContext {
            lanes: poly(&self.lanes),
            road_lines: self
                .road_lines
                .iter()
                .map(|l| RoadLine {
                    kind: l.kind,
                    points: l.points.iter().map(|&q| f(q)).collect(),
                })
                .collect(),
            crosswalks: poly(&self.crosswalks),
            speed_bumps: poly(&self.speed_bumps),
            stop_signs: self.stop_signs.iter().map(|&q| f(q)).collect(),
            traffic_lights: self
                .traffic_lights
                .iter()
                .map(|t| TrafficLight {
                    position: f(t.position),
                    state: t.state,
                })
                .collect(),
        }
    }

    fn all_points(&self) -> impl Iterator<Item = &Point> {
        self.lanes
            .iter()
            .chain(&self.crosswalks)
            .chain(&self.speed_bumps)
            .flatten()
            .chain(self.road_lines.iter().flat_map(|l| &l.points))
            .chain(&self.stop_signs)
            .chain(self.traffic_lights.iter().map(|t| &t.position))
    }
}

/// One prediction problem: the target's past, its neighbors, the map, and the target's true future.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scenario_id: String,
    pub target: AgentTrack,
    pub target_future: Vec<Point>,
    #[serde(default)]
    pub neighbors: Vec<AgentTrack>,
    #[serde(default)]
    pub map: MapContext,
    #[serde(default)]
    pub centerlines: Vec<Polyline>,
}

fn finite_point(p: &Point) -> bool {
    p[0].is_finite() && p[1].is_finite()
}

impl Scene {
    /// Checks history/future lengths and that every coordinate is finite.
    pub fn validate(&self) -> Result<()> {
        let malformed = |m: String| Err(RecoatError::MalformedScene(format!("{}: {m}", self.scenario_id)));
        if self.target.states.len() != HISTORY_LEN {
            return malformed(format!("target has {} states, expected {HISTORY_LEN}", self.target.states.len()));
        }
        if self.target_future.len() != FUTURE_LEN {
            return malformed(format!("target_future has {} points, expected {FUTURE_LEN}", self.target_future.len()));
        }
        for (i, n) in self.neighbors.iter().enumerate() {
            if n.states.len() != HISTORY_LEN {
                return malformed(format!("neighbor {i} has {} states, expected {HISTORY_LEN}", n.states.len()));
            }
            if let Some(f) = &n.future {
                if f.len() != FUTURE_LEN {
                    return malformed(format!("neighbor {i} future has {} points", f.len()));
                }
            }
        }
        let states_ok = std::iter::once(&self.target)
            .chain(&self.neighbors)
            .flat_map(|t| &t.states)
            .all(AgentState::is_finite);
        let points_ok = self.target_future.iter().all(finite_point)
            && self.centerlines.iter().flatten().all(finite_point)
            && self.map.all_points().all(finite_point)
            && self
                .neighbors
                .iter()
                .filter_map(|n| n.future.as_ref())
                .flatten()
                .flatten()
                .all(finite_point);
        if !(states_ok && points_ok) {
            return malformed("non-finite coordinate".into());
        }
        Ok(())
    }

    /// The target's pose at t0, which defines the target frame.
    pub fn target_pose(&self) -> Result<Pose> {
        let s = self
            .target
            .current()
            .filter(|s| s.valid)
            .ok_or_else(|| RecoatError::MalformedScene(format!("{}: target state at t0 is missing", self.scenario_id)))?;
        Ok(Pose::new(s.x, s.y, s.heading))
    }

    /// Target speed at t0 in m/s.
    pub fn target_speed(&self) -> f64 {
        self.target.current().map_or(0.0, AgentState::speed)
    }

    /// Re-expresses every coordinate of the scene in the target frame.
    pub fn to_target_frame(&self) -> Result<Scene> {
        self.validate()?;
        let pose = self.target_pose()?;
        self.transformed(&pose)
    }

    /// Expresses the scene relative to `pose` (see [`to_target_frame`]).
    pub fn transformed(&self, pose: &Pose) -> Result<Scene> {
        pose.check()?;
        let f = |p: Point| pose.to_local(p);
        let neighbors = self
            .neighbors
            .iter()
            .map(|n| {
                let mut t = to_target_frame(n, pose)?;
                t.future = n.future.as_ref().map(|fut| fut.iter().map(|p| p.map(f)).collect());
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scene {
            scenario_id: self.scenario_id.clone(),
            target: to_target_frame(&self.target, pose)?,
            target_future: self.target_future.iter().map(|&p| f(p)).collect(),
            neighbors,
            map: self.map.map_points(f),
            centerlines: self.centerlines.iter().map(|l| l.iter().map(|&p| f(p)).collect()).collect(),
        })
    }
}

/// Rigid 2-D pose: origin and heading of a local frame in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading }
    }

    fn check(&self) -> Result<()> {
        if self.x.is_finite() && self.y.is_finite() && self.heading.is_finite() {
            Ok(())
        } else {
            Err(RecoatError::InvalidInput(format!("non-finite pose {self:?}")))
        }
    }

    /// World point → local frame.
    pub fn to_local(&self, p: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Local point → world frame.
    pub fn to_world(&self, p: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// World vector → local frame (rotation only).
    pub fn rotate_to_local(&self, v: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }

    /// The pose that undoes this one: `self.inverse().to_local(self.to_local(p)) == p`.
    pub fn inverse(&self) -> Pose {
        let (s, c) = self.heading.sin_cos();
        Pose {
            x: -(c * self.x + s * self.y),
            y: s * self.x - c * self.y,
            heading: -self.heading,
        }
    }
}

/// Expresses `track` in the frame whose origin and +x axis are given by `target_pose`.
///
/// Positions are translated then rotated, velocities rotated, headings shifted
/// and renormalized. Invalid states stay all-zero.
pub fn to_target_frame(track: &AgentTrack, target_pose: &Pose) -> Result<AgentTrack> {
    target_pose.check()?;
    let mut states = Vec::with_capacity(track.states.len());
    for s in &track.states {
        if !s.valid {
            states.push(AgentState::invalid());
            continue;
        }
        if !s.is_finite() {
            return Err(RecoatError::InvalidInput(format!("non-finite state {s:?}")));
        }
        let [x, y] = target_pose.to_local(s.position());
        let [vx, vy] = target_pose.rotate_to_local([s.vx, s.vy]);
        states.push(AgentState::new(x, y, vx, vy, s.heading - target_pose.heading));
    }
    Ok(AgentTrack {
        agent_type: track.agent_type,
        states,
        future: track.future.clone(),
    })
}

/// Up to ten nearest neighbors' histories, zero-padded to a fixed shape.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborTensor {
    /// Row-major `(MAX_NEIGHBORS, HISTORY_LEN, STATE_DIM)`.
    pub data: Vec<f64>,
    pub count: usize,
    /// t0 position (last valid state) of each retained neighbor, nearest first.
    pub positions: Vec<Point>,
    pub distances: Vec<f64>,
    /// Index of each retained neighbor in `Scene::neighbors`.
    pub source: Vec<usize>,
}

impl NeighborTensor {
    pub const ROW: usize = HISTORY_LEN * STATE_DIM;

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * Self::ROW..(i + 1) * Self::ROW]
    }

    /// Key positions padded to `MAX_NEIGHBORS` rows with the origin.
    pub fn padded_positions(&self) -> [Point; MAX_NEIGHBORS] {
        let mut out = [[0.0; 2]; MAX_NEIGHBORS];
        out[..self.count].copy_from_slice(&self.positions);
        out
    }
}

fn history_rows(track: &AgentTrack) -> Vec<f64> {
    track.states.iter().flat_map(AgentState::row).collect()
}

/// Selects neighbors within [`NEIGHBOR_RADIUS`] of the target at t0, nearest first.
///
/// Distance uses each neighbor's last valid state; neighbors with no valid state
/// are dropped. Equal distances keep input order.
pub fn build_neighbor_tensor(scene: &Scene) -> NeighborTensor {
    let origin = scene.target.current().map_or([0.0, 0.0], AgentState::position);
    let mut candidates: Vec<(usize, f64, Point)> = scene
        .neighbors
        .iter()
        .enumerate()
        .filter(|(_, n)| n.states.len() == HISTORY_LEN)
        .filter_map(|(i, n)| {
            let p = n.last_valid()?.position();
            let d = (p[0] - origin[0]).hypot(p[1] - origin[1]);
            (d <= NEIGHBOR_RADIUS).then_some((i, d, p))
        })
        .collect();
    // Stable: ties keep input order.
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1));
    candidates.truncate(MAX_NEIGHBORS);
    let mut data = vec![0.0; MAX_NEIGHBORS * NeighborTensor::ROW];
    for (row, (i, _, _)) in candidates.iter().enumerate() {
        data[row * NeighborTensor::ROW..(row + 1) * NeighborTensor::ROW]
            .copy_from_slice(&history_rows(&scene.neighbors[*i]));
    }
    NeighborTensor {
        data,
        count: candidates.len(),
        positions: candidates.iter().map(|c| c.2).collect(),
        distances: candidates.iter().map(|c| c.1).collect(),
        source: candidates.iter().map(|c| c.0).collect(),
    }
}

/// The target's history as a row-major `(HISTORY_LEN, STATE_DIM)` array, oldest first.
pub fn target_state_tensor(scene: &Scene) -> Result<Vec<f64>> {
    let n = scene.target.states.len();
    if n != HISTORY_LEN {
        return Err(RecoatError::MalformedScene(format!(
            "{}: target has {n} states, expected {HISTORY_LEN}",
            scene.scenario_id
        )));
    }
    Ok(history_rows(&scene.target))
}
