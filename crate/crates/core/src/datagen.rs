//! Synthetic multi-intent driving scenarios and scene-file IO.
//!
//! Every scenario is laid out in a template frame where the target
//! approaches from the west in the eastbound lane (`y = -1.75`) and any
//! junction is centered on the origin. The finished scene is then moved to a
//! random world pose. Turns follow a clothoid-arc-clothoid curvature profile
//! entered a few meters before the t0 position, and stops start braking one
//! second before t0, so every intent already shows in the observed history.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{io_error, json_error, RecoatError, Result};
use crate::scene::{
    AgentState, AgentTrack, AgentType, LightState, MapContext, Point, Polyline, Pose, RoadLine, RoadLineKind, Scene,
    TrafficLight, FUTURE_DT, FUTURE_LEN, HISTORY_DT, HISTORY_LEN,
};

pub const SCENE_VERSION: &str = "recoat-scene/1";
pub const MAX_GENERATED_NEIGHBORS: usize = 12;

const LANE_WIDTH: f64 = 3.5;
const HALF_ROAD: f64 = LANE_WIDTH;
const LANE_OFFSET: f64 = LANE_WIDTH / 2.0;
const ROAD_REACH: f64 = 80.0;
/// Template x where stopping vehicles come to rest before a junction.
const STOP_LINE_X: f64 = -9.0;
/// Seconds before t0 at which braking begins.
const BRAKE_LEAD: f64 = 1.0;
/// Arc length before the t0 position at which a turn begins.
const TURN_LEAD_M: f64 = 3.0;
const CLOTHOID_LEN: f64 = 4.0;
const LEFT_RADIUS: f64 = 10.5;
const RIGHT_RADIUS: f64 = 7.0;
/// Arc-length step used to integrate turn geometry.
const PATH_DS: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intent {
    Straight,
    LeftTurn,
    RightTurn,
    Stop,
}

impl Intent {
    pub const ALL: [Intent; 4] = [Intent::Straight, Intent::LeftTurn, Intent::RightTurn, Intent::Stop];

    pub fn as_str(self) -> &'static str {
        match self {
            Intent::Straight => "straight",
            Intent::LeftTurn => "left_turn",
            Intent::RightTurn => "right_turn",
            Intent::Stop => "stop",
        }
    }
}

impl fmt::Display for Intent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Intent {
    type Err = RecoatError;
    fn from_str(s: &str) -> Result<Self> {
        Intent::ALL
            .into_iter()
            .find(|i| i.as_str() == s)
            .ok_or_else(|| RecoatError::InvalidInput(format!("unknown intent `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MapTemplate {
    #[serde(rename = "straight_road")]
    StraightRoad,
    #[serde(rename = "T_junction")]
    TJunction,
    #[serde(rename = "crossroad")]
    Crossroad,
}

impl MapTemplate {
    pub const ALL: [MapTemplate; 3] = [MapTemplate::StraightRoad, MapTemplate::TJunction, MapTemplate::Crossroad];

    pub fn as_str(self) -> &'static str {
        match self {
            MapTemplate::StraightRoad => "straight_road",
            MapTemplate::TJunction => "T_junction",
            MapTemplate::Crossroad => "crossroad",
        }
    }

    /// Whether the target's approach lane allows `intent`.
    pub fn supports(self, intent: Intent) -> bool {
        match self {
            MapTemplate::StraightRoad => matches!(intent, Intent::Straight | Intent::Stop),
            MapTemplate::TJunction => intent != Intent::Straight,
            MapTemplate::Crossroad => true,
        }
    }

    fn has_junction(self) -> bool {
        self != MapTemplate::StraightRoad
    }
}

impl fmt::Display for MapTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything that determines one generated scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub intent: Intent,
    pub agent_type: AgentType,
    /// Cruise speed before any maneuver, m/s.
    pub speed_range: (f64, f64),
    /// Inclusive range of surrounding agents.
    pub neighbor_range: (usize, usize),
    pub template: MapTemplate,
    /// Standard deviation of the Gaussian noise added to observed and future positions.
    pub noise_sigma: f64,
}

impl ScenarioSpec {
    pub fn new(seed: u64, intent: Intent, template: MapTemplate) -> Self {
        Self {
            seed,
            intent,
            agent_type: AgentType::Vehicle,
            speed_range: default_speed_range(AgentType::Vehicle),
            neighbor_range: (0, MAX_GENERATED_NEIGHBORS),
            template,
            noise_sigma: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.speed_range;
        if !(0.0..=20.0).contains(&lo) || !(0.0..=20.0).contains(&hi) || lo > hi {
            return Err(RecoatError::InvalidConfig(format!("speed range ({lo}, {hi}) must lie within [0, 20]")));
        }
        let (nlo, nhi) = self.neighbor_range;
        if nlo > nhi || nhi > MAX_GENERATED_NEIGHBORS {
            return Err(RecoatError::InvalidConfig(format!(
                "neighbor range ({nlo}, {nhi}) must be ordered and at most {MAX_GENERATED_NEIGHBORS}"
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(RecoatError::InvalidConfig(format!("noise sigma {} must be non-negative", self.noise_sigma)));
        }
        if !self.template.supports(self.intent) {
            return Err(RecoatError::InvalidConfig(format!(
                "intent {} is not possible on a {} map",
                self.intent, self.template
            )));
        }
        Ok(())
    }
}

pub fn default_speed_range(t: AgentType) -> (f64, f64) {
    match t {
        AgentType::Vehicle => (3.0, 8.0),
        AgentType::Cyclist => (2.0, 6.0),
        AgentType::Pedestrian => (0.5, 2.0),
    }
}

/// Kinematic state along a template-frame path.
#[derive(Clone, Copy, Debug)]
struct Kin {
    pos: Point,
    heading: f64,
    speed: f64,
}

/// A path sampled by arc length from a start pose, straight beyond its end.
struct RefPath {
    /// `(x, y, heading)` every `PATH_DS` meters of arc length.
    table: Vec<(f64, f64, f64)>,
}

impl RefPath {
    fn straight(start: Point, heading: f64) -> Self {
        Self { table: vec![(start[0], start[1], heading)] }
    }

    /// Clothoid in, circular arc, clothoid out; `sign` +1 turns left.
    fn turn(start: Point, radius: f64, sign: f64) -> Self {
        let kappa = 1.0 / radius;
        let arc = (std::f64::consts::FRAC_PI_2 / kappa - CLOTHOID_LEN).max(0.0);
        let total = 2.0 * CLOTHOID_LEN + arc;
        let curvature = |s: f64| {
            let k = if s < CLOTHOID_LEN {
                kappa * s / CLOTHOID_LEN
            } else if s < CLOTHOID_LEN + arc {
                kappa
            } else {
                kappa * ((total - s) / CLOTHOID_LEN).max(0.0)
            };
            sign * k
        };
        let steps = (total / PATH_DS).round() as usize;
        let mut table = Vec::with_capacity(steps + 1);
        let (mut x, mut y, mut h) = (start[0], start[1], 0.0);
        table.push((x, y, h));
        for i in 0..steps {
            let s = i as f64 * PATH_DS;
            let hm = h + 0.5 * PATH_DS * curvature(s + 0.25 * PATH_DS);
            let h_next = h + PATH_DS * curvature(s + 0.5 * PATH_DS);
            x += PATH_DS * hm.cos();
            y += PATH_DS * hm.sin();
            h = h_next;
            table.push((x, y, h));
        }
        // Snap the exit heading so the continuation is exactly axis-aligned.
        if let Some(last) = table.last_mut() {
            last.2 = sign * std::f64::consts::FRAC_PI_2;
        }
        Self { table }
    }

    fn length(&self) -> f64 {
        (self.table.len() - 1) as f64 * PATH_DS
    }

    fn at(&self, s: f64) -> (Point, f64) {
        if s <= 0.0 {
            let (x, y, h) = self.table[0];
            return ([x + s * h.cos(), y + s * h.sin()], h);
        }
        let len = self.length();
        if s >= len {
            let (x, y, h) = *self.table.last().unwrap();
            let d = s - len;
            return ([x + d * h.cos(), y + d * h.sin()], h);
        }
        let f = s / PATH_DS;
        let i = f.floor() as usize;
        let t = f - i as f64;
        let (a, b) = (self.table[i], self.table[i + 1]);
        ([a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t], a.2 + (b.2 - a.2) * t)
    }

    fn polyline(&self, before: f64, after: f64, spacing: f64) -> Polyline {
        let len = self.length();
        let n = ((before + len + after) / spacing).ceil() as usize;
        (0..=n).map(|i| self.at(-before + i as f64 * spacing).0).collect()
    }
}

/// Motion of the target along its path over time relative to t0.
struct Motion {
    path: RefPath,
    /// Arc length at t0.
    s0: f64,
    cruise: f64,
    /// Braking deceleration, starting `BRAKE_LEAD` seconds before t0.
    decel: Option<f64>,
}

impl Motion {
    fn state(&self, t: f64) -> Kin {
        let (ds, speed) = match self.decel {
            None => (self.cruise * t, self.cruise),
            Some(a) => {
                // Distance and speed since braking began, relative to t0.
                let dist = |tau: f64| {
                    let tau = tau.clamp(0.0, self.cruise / a);
                    self.cruise * tau - 0.5 * a * tau * tau
                };
                let tb = t + BRAKE_LEAD;
                let speed = if tb < 0.0 { self.cruise } else { (self.cruise - a * tb).max(0.0) };
                let s = if tb < 0.0 { self.cruise * tb } else { dist(tb) };
                (s - dist(BRAKE_LEAD), speed)
            }
        };
        let (pos, heading) = self.path.at(self.s0 + ds);
        Kin { pos, heading, speed }
    }
}

/// Deceleration used when stopping from `v0`.
pub fn stop_deceleration(v0: f64) -> f64 {
    (v0 / 6.0).max(1.5)
}

fn target_motion(spec: &ScenarioSpec, speed: f64, rng: &mut ChaCha8Rng) -> Motion {
    let lane_y = -LANE_OFFSET;
    match spec.intent {
        Intent::Straight => {
            let x0 = match spec.template {
                MapTemplate::StraightRoad => rng.gen_range(-20.0..20.0),
                _ => rng.gen_range(-40.0..-5.0),
            };
            Motion { path: RefPath::straight([x0, lane_y], 0.0), s0: 0.0, cruise: speed, decel: None }
        }
        Intent::LeftTurn | Intent::RightTurn => {
            let (radius, sign, exit_x) = if spec.intent == Intent::LeftTurn {
                (LEFT_RADIUS, 1.0, LANE_OFFSET)
            } else {
                (RIGHT_RADIUS, -1.0, -LANE_OFFSET)
            };
            let probe = RefPath::turn([0.0, 0.0], radius, sign);
            let forward = probe.table.last().unwrap().0;
            let path = RefPath::turn([exit_x - forward, lane_y], radius, sign);
            Motion { path, s0: TURN_LEAD_M, cruise: speed, decel: None }
        }
        Intent::Stop => {
            let a = stop_deceleration(speed);
            let total = speed * speed / (2.0 * a);
            let braked_by_t0 = {
                let tau = BRAKE_LEAD.min(speed / a);
                speed * tau - 0.5 * a * tau * tau
            };
            let rest_x = match spec.template {
                MapTemplate::StraightRoad => rng.gen_range(-10.0..30.0),
                _ => STOP_LINE_X,
            };
            let x0 = rest_x - (total - braked_by_t0);
            Motion { path: RefPath::straight([x0, lane_y], 0.0), s0: 0.0, cruise: speed, decel: Some(a) }
        }
    }
}

/// A directed lane centerline of the template.
struct Lane {
    line: Polyline,
}

impl Lane {
    fn straight(from: Point, to: Point) -> Self {
        let len = (to[0] - from[0]).hypot(to[1] - from[1]);
        let n = (len / 1.0).ceil().max(1.0) as usize;
        let line = (0..=n)
            .map(|i| {
                let t = i as f64 / n as f64;
                [from[0] + (to[0] - from[0]) * t, from[1] + (to[1] - from[1]) * t]
            })
            .collect();
        Self { line }
    }

    fn length(&self) -> f64 {
        self.line.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])).sum()
    }

    /// Position and heading at arc length `s`, extrapolated straight past either end.
    fn at(&self, s: f64) -> (Point, f64) {
        let segs = self.line.len() - 1;
        let mut acc = 0.0;
        for (i, w) in self.line.windows(2).enumerate() {
            let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
            let len = dx.hypot(dy);
            if s <= acc + len || i + 1 == segs {
                let t = if len > 0.0 { (s - acc) / len } else { 0.0 };
                return ([w[0][0] + dx * t, w[0][1] + dy * t], dy.atan2(dx));
            }
            acc += len;
        }
        unreachable!("lanes have at least two vertices")
    }
}

struct Layout {
    map: MapContext,
    lanes: Vec<Lane>,
    centerlines: Vec<Polyline>,
    sidewalks: Vec<Lane>,
}

fn rect(x0: f64, x1: f64, y0: f64, y1: f64) -> Vec<Point> {
    vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
}

fn road_line(kind: RoadLineKind, from: Point, to: Point) -> RoadLine {
    RoadLine { kind, points: vec![from, to] }
}

fn layout(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Layout {
    let r = ROAD_REACH;
    let h = HALF_ROAD;
    let o = LANE_OFFSET;
    let mut map = MapContext::default();
    let mut lanes = Vec::new();
    let mut sidewalks = Vec::new();
    let mut centerlines = Vec::new();

    match spec.template {
        MapTemplate::StraightRoad => {
            map.lanes.push(rect(-r, r, -h, 0.0));
            map.lanes.push(rect(-r, r, 0.0, h));
            map.road_lines.push(road_line(RoadLineKind::RoadEdge, [-r, -h], [r, -h]));
            map.road_lines.push(road_line(RoadLineKind::RoadEdge, [-r, h], [r, h]));
            map.road_lines.push(road_line(RoadLineKind::BrokenWhite, [-r, 0.0], [r, 0.0]));
            lanes.push(Lane::straight([-r, -o], [r, -o]));
            lanes.push(Lane::straight([r, o], [-r, o]));
            sidewalks.push(Lane::straight([-r, -h - 1.5], [r, -h - 1.5]));
            sidewalks.push(Lane::straight([r, h + 1.5], [-r, h + 1.5]));
            if rng.gen_bool(0.3) {
                let x = rng.gen_range(-10.0..40.0);
                map.speed_bumps.push(rect(x, x + 1.0, -h, h));
            }
        }
        MapTemplate::TJunction | MapTemplate::Crossroad => {
            let cross = spec.template == MapTemplate::Crossroad;
            let east_end = if cross { r } else { h };
            // Horizontal road (only the western arm on a T junction) and the vertical road.
            map.lanes.push(rect(-r, east_end, -h, 0.0));
            map.lanes.push(rect(-r, east_end, 0.0, h));
            map.lanes.push(rect(-h, 0.0, -r, r));
            map.lanes.push(rect(0.0, h, -r, r));
            let edge = RoadLineKind::RoadEdge;
            map.road_lines.push(road_line(edge, [-r, -h], [-h, -h]));
            map.road_lines.push(road_line(edge, [-r, h], [-h, h]));
            map.road_lines.push(road_line(edge, [-h, -r], [-h, -h]));
            map.road_lines.push(road_line(edge, [-h, h], [-h, r]));
            if cross {
                map.road_lines.push(road_line(edge, [h, -h], [r, -h]));
                map.road_lines.push(road_line(edge, [h, h], [r, h]));
                map.road_lines.push(road_line(edge, [h, -r], [h, -h]));
                map.road_lines.push(road_line(edge, [h, h], [h, r]));
                map.road_lines.push(road_line(RoadLineKind::Yellow, [h, 0.0], [r, 0.0]));
            } else {
                map.road_lines.push(road_line(edge, [h, -r], [h, r]));
            }
            map.road_lines.push(road_line(RoadLineKind::Yellow, [-r, 0.0], [-h, 0.0]));
            map.road_lines.push(road_line(RoadLineKind::Yellow, [0.0, -r], [0.0, -h]));
            map.road_lines.push(road_line(RoadLineKind::Yellow, [0.0, h], [0.0, r]));
            map.road_lines.push(road_line(RoadLineKind::SolidWhite, [STOP_LINE_X + 2.5, -h], [STOP_LINE_X + 2.5, 0.0]));
            // Crosswalks on every arm, just outside the junction box.
            map.crosswalks.push(rect(-h - 3.0, -h, -h, h));
            map.crosswalks.push(rect(-h, h, h, h + 3.0));
            map.crosswalks.push(rect(-h, h, -h - 3.0, -h));
            if cross {
                map.crosswalks.push(rect(h, h + 3.0, -h, h));
                let light = if spec.intent == Intent::Stop { LightState::Red } else { LightState::Green };
                map.traffic_lights.push(TrafficLight { position: [STOP_LINE_X + 3.0, -h - 1.0], state: light });
            } else {
                map.stop_signs.push([STOP_LINE_X + 3.0, -h - 1.0]);
            }

            lanes.push(Lane::straight([-r, -o], [east_end, -o]));
            lanes.push(Lane::straight([east_end, o], [-r, o]));
            lanes.push(Lane::straight([o, -r], [o, r]));
            lanes.push(Lane::straight([-o, r], [-o, -r]));
            sidewalks.push(Lane::straight([-h - 1.5, -h - 1.5], [-h - 1.5, -r]));
            sidewalks.push(Lane::straight([-r, h + 1.5], [-h - 1.5, h + 1.5]));

            // Turn connectors from the target's approach lane.
            let approach = 60.0;
            let left = RefPath::turn([0.0, 0.0], LEFT_RADIUS, 1.0);
            let lf = left.table.last().unwrap().0;
            let left = RefPath::turn([o - lf, -o], LEFT_RADIUS, 1.0);
            let right = RefPath::turn([0.0, 0.0], RIGHT_RADIUS, -1.0);
            let rf = right.table.last().unwrap().0;
            let right = RefPath::turn([-o - rf, -o], RIGHT_RADIUS, -1.0);
            let left_start = left.table[0].0;
            let right_start = right.table[0].0;
            centerlines.push(left.polyline(approach + left_start, r - h, 1.0));
            centerlines.push(right.polyline(approach + right_start, r - h, 1.0));
        }
    }
    for lane in &lanes {
        centerlines.push(lane.line.clone());
    }
    // The approach lane goes first so ties in distance keep it.
    if spec.template.has_junction() {
        let approach = centerlines.len() - lanes.len();
        let lane = centerlines.remove(approach);
        centerlines.insert(0, lane);
    }
    map.normalize();
    Layout { map, lanes, centerlines, sidewalks }
}

fn track_from(kins: &[Kin], agent_type: AgentType) -> AgentTrack {
    let states = kins
        .iter()
        .map(|k| {
            let (s, c) = k.heading.sin_cos();
            AgentState::new(k.pos[0], k.pos[1], k.speed * c, k.speed * s, k.heading)
        })
        .collect();
    AgentTrack::new(agent_type, states)
}

fn history_times() -> impl Iterator<Item = f64> {
    (0..HISTORY_LEN).map(|i| -((HISTORY_LEN - 1 - i) as f64) * HISTORY_DT)
}

fn future_times() -> impl Iterator<Item = f64> {
    (1..=FUTURE_LEN).map(|k| k as f64 * FUTURE_DT)
}

fn neighbor(
    layout: &Layout,
    target_pos: Point,
    rng: &mut ChaCha8Rng,
    noise: &mut impl FnMut(&mut ChaCha8Rng) -> Point,
) -> AgentTrack {
    let pedestrian = !layout.sidewalks.is_empty() && rng.gen_bool(0.2);
    let (lane, agent_type, speed) = if pedestrian {
        let lane = &layout.sidewalks[rng.gen_range(0..layout.sidewalks.len())];
        (lane, AgentType::Pedestrian, rng.gen_range(0.8..1.6))
    } else {
        let lane = &layout.lanes[rng.gen_range(0..layout.lanes.len())];
        let t = if rng.gen_bool(0.1) { AgentType::Cyclist } else { AgentType::Vehicle };
        (lane, t, rng.gen_range(0.0..10.0))
    };
    let len = lane.length();
    // Keep clear of the target at t0.
    let mut s0 = rng.gen_range(0.0..len);
    for _ in 0..20 {
        let p = lane.at(s0).0;
        if (p[0] - target_pos[0]).hypot(p[1] - target_pos[1]) > 8.0 {
            break;
        }
        s0 = rng.gen_range(0.0..len);
    }
    let kin = |t: f64| {
        let (pos, heading) = lane.at(s0 + speed * t);
        Kin { pos, heading, speed }
    };
    let mut track = track_from(&history_times().map(kin).collect::<Vec<_>>(), agent_type);
    for s in &mut track.states {
        let n = noise(rng);
        s.x += n[0];
        s.y += n[1];
    }
    // Some agents appear part-way through the history window.
    if rng.gen_bool(0.15) {
        let missing = rng.gen_range(1..HISTORY_LEN - 1);
        for s in &mut track.states[..missing] {
            *s = AgentState::invalid();
        }
    }
    track.future = Some(future_times().map(|t| Some(kin(t).pos)).collect());
    track
}

/// Generates one scene in world coordinates.
pub fn generate(spec: &ScenarioSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sigma = spec.noise_sigma;
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("positive sigma");
    let mut noise = move |rng: &mut ChaCha8Rng| {
        if sigma == 0.0 {
            [0.0, 0.0]
        } else {
            [normal.sample(rng), normal.sample(rng)]
        }
    };

    let (lo, hi) = spec.speed_range;
    let speed = if lo == hi { lo } else { rng.gen_range(lo..hi) };
    let motion = target_motion(spec, speed, &mut rng);
    let layout = layout(spec, &mut rng);

    let mut target = track_from(&history_times().map(|t| motion.state(t)).collect::<Vec<_>>(), spec.agent_type);
    for s in &mut target.states {
        let n = noise(&mut rng);
        s.x += n[0];
        s.y += n[1];
    }
    let target_future: Vec<Point> = future_times()
        .map(|t| {
            let p = motion.state(t).pos;
            let n = noise(&mut rng);
            [p[0] + n[0], p[1] + n[1]]
        })
        .collect();

    let t0 = motion.state(0.0).pos;
    let (nlo, nhi) = spec.neighbor_range;
    let count = rng.gen_range(nlo..=nhi);
    let neighbors: Vec<AgentTrack> = (0..count).map(|_| neighbor(&layout, t0, &mut rng, &mut noise)).collect();

    let template_scene = Scene {
        scenario_id: format!("{}-{}-{:016x}", spec.template, spec.intent, spec.seed),
        target,
        target_future,
        neighbors,
        map: layout.map,
        centerlines: layout.centerlines,
    };

    // Place the template at a random world pose.
    let world = Pose::new(
        rng.gen_range(-500.0..500.0),
        rng.gen_range(-500.0..500.0),
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    );
    let scene = template_scene.transformed(&world.inverse())?;
    scene.validate()?;
    Ok(scene)
}

/// Dataset-level generation options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub count: usize,
    pub seed: u64,
    pub agent_type: AgentType,
    pub speed_range: (f64, f64),
    pub neighbor_range: (usize, usize),
    pub noise_sigma: f64,
}

impl DatasetSpec {
    pub fn new(count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            agent_type: AgentType::Vehicle,
            speed_range: default_speed_range(AgentType::Vehicle),
            neighbor_range: (0, MAX_GENERATED_NEIGHBORS),
            noise_sigma: 0.1,
        }
    }

    /// Scenario specs cycling through the intents, each on a random compatible map.
    pub fn scenarios(&self) -> Vec<ScenarioSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.count)
            .map(|i| {
                let intent = Intent::ALL[i % Intent::ALL.len()];
                let options: Vec<MapTemplate> = MapTemplate::ALL.into_iter().filter(|t| t.supports(intent)).collect();
                let template = options[rng.gen_range(0..options.len())];
                ScenarioSpec {
                    seed: rng.gen(),
                    intent,
                    agent_type: self.agent_type,
                    speed_range: self.speed_range,
                    neighbor_range: self.neighbor_range,
                    template,
                    noise_sigma: self.noise_sigma,
                }
            })
            .collect()
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<(ScenarioSpec, Scene)>> {
    spec.scenarios()
        .into_iter()
        .map(|s| {
            let scene = generate(&s)?;
            Ok((s, scene))
        })
        .collect()
}

#[derive(Serialize)]
struct SceneFileRef<'a> {
    version: &'a str,
    #[serde(flatten)]
    scene: &'a Scene,
}

pub fn scene_to_json(scene: &Scene) -> Result<String> {
    serde_json::to_string(&SceneFileRef { version: SCENE_VERSION, scene })
        .map_err(|e| RecoatError::InvalidInput(format!("cannot serialize scene: {e}")))
}

pub fn scene_from_json(text: &str, origin: &Path) -> Result<Scene> {
    let mut value: serde_json::Value = serde_json::from_str(text).map_err(json_error(origin))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| RecoatError::MalformedScene(format!("{}: top level is not an object", origin.display())))?;
    match obj.remove("version") {
        Some(serde_json::Value::String(v)) if v == SCENE_VERSION => {}
        Some(serde_json::Value::String(v)) => {
            return Err(RecoatError::SchemaVersion { found: v, expected: SCENE_VERSION })
        }
        other => {
            return Err(RecoatError::SchemaVersion {
                found: other.map_or_else(|| "<missing>".to_string(), |v| v.to_string()),
                expected: SCENE_VERSION,
            })
        }
    }
    let scene: Scene = serde_json::from_value(value)
        .map_err(|e| RecoatError::MalformedScene(format!("{}: {e}", origin.display())))?;
    scene.validate()?;
    Ok(scene)
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    scene.validate()?;
    std::fs::write(path, scene_to_json(scene)?).map_err(io_error(path))
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    scene_from_json(&text, path)
}

pub const MANIFEST_NAME: &str = "manifest.csv";

/// One line of a dataset manifest. Labels are for analysis only.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub scenario_id: String,
    pub intent: Intent,
    pub template: MapTemplate,
}

/// Writes every scene to `dir` plus a manifest; returns the manifest entries.
pub fn write_dataset(dir: &Path, scenes: &[(ScenarioSpec, Scene)]) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, (spec, scene)) in scenes.iter().enumerate() {
        let name = format!("scene_{i:05}.json");
        write_scene(&dir.join(&name), scene)?;
        entries.push(ManifestEntry {
            path: PathBuf::from(name),
            scenario_id: scene.scenario_id.clone(),
            intent: spec.intent,
            template: spec.template,
        });
    }
    let manifest = dir.join(MANIFEST_NAME);
    let file = File::create(&manifest).map_err(io_error(&manifest))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "path,scenario_id,intent,template")?;
        for e in &entries {
            writeln!(w, "{},{},{},{}", e.path.display(), e.scenario_id, e.intent, e.template)?;
        }
        w.flush()
    };
    write().map_err(io_error(&manifest))?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(io_error(&path))?;
    let mut lines = text.lines();
    if lines.next() != Some("path,scenario_id,intent,template") {
        return Err(RecoatError::InvalidInput(format!("{}: unexpected manifest header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(RecoatError::InvalidInput(format!("{}: bad manifest line `{l}`", path.display())));
            }
            let template = MapTemplate::ALL
                .into_iter()
                .find(|t| t.as_str() == f[3])
                .ok_or_else(|| RecoatError::InvalidInput(format!("unknown map template `{}`", f[3])))?;
            Ok(ManifestEntry {
                path: PathBuf::from(f[0]),
                scenario_id: f[1].to_string(),
                intent: f[2].parse()?,
                template,
            })
        })
        .collect()
}

/// Reads the scenes of a dataset directory in manifest order, or every
/// `*.json` file in name order when there is no manifest.
pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let paths: Vec<PathBuf> = if dir.join(MANIFEST_NAME).exists() {
        read_manifest(dir)?.into_iter().map(|e| dir.join(e.path)).collect()
    } else {
        let mut p: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_error(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        p.sort();
        p
    };
    paths.iter().map(|p| read_scene(p)).collect()
}

/// Labels a target-frame future by its final heading and motion.
pub fn classify_future(future: &[Point]) -> Intent {
    let n = future.len();
    let (a, b) = (future[n - 2], future[n - 1]);
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    if dx.hypot(dy) < 0.05 {
        return Intent::Stop;
    }
    let heading = dy.atan2(dx);
    if heading > std::f64::consts::FRAC_PI_4 {
        Intent::LeftTurn
    } else if heading < -std::f64::consts::FRAC_PI_4 {
        Intent::RightTurn
    } else {
        Intent::Straight
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(intent: Intent, template: MapTemplate, speed: f64) -> ScenarioSpec {
        ScenarioSpec {
            speed_range: (speed, speed),
            noise_sigma: 0.0,
            neighbor_range: (0, 0),
            ..ScenarioSpec::new(7, intent, template)
        }
    }

    #[test]
    fn stationary_stop_stays_at_origin() {
        let scene = generate(&quiet(Intent::Stop, MapTemplate::Crossroad, 0.0)).unwrap();
        let local = scene.to_target_frame().unwrap();
        for p in &local.target_future {
            assert!(p[0].abs() < 1e-9 && p[1].abs() < 1e-9, "{p:?}");
        }
    }

    #[test]
    fn straight_is_constant_velocity() {
        let scene = generate(&quiet(Intent::Straight, MapTemplate::StraightRoad, 5.0)).unwrap();
        let local = scene.to_target_frame().unwrap();
        for (k, p) in local.target_future.iter().enumerate() {
            assert!((p[0] - 2.5 * (k + 1) as f64).abs() < 1e-9, "{k}: {p:?}");
            assert!(p[1].abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = ScenarioSpec::new(11, Intent::LeftTurn, MapTemplate::TJunction);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn incompatible_template_rejected() {
        let spec = ScenarioSpec::new(1, Intent::LeftTurn, MapTemplate::StraightRoad);
        assert!(matches!(generate(&spec), Err(RecoatError::InvalidConfig(_))));
        let spec = ScenarioSpec { speed_range: (0.0, 25.0), ..ScenarioSpec::new(1, Intent::Stop, MapTemplate::Crossroad) };
        assert!(spec.validate().is_err());
        let spec = ScenarioSpec { neighbor_range: (0, 13), ..ScenarioSpec::new(1, Intent::Stop, MapTemplate::Crossroad) };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn turns_end_on_the_exit_lane() {
        for (intent, exit_x, sign) in [(Intent::LeftTurn, LANE_OFFSET, 1.0), (Intent::RightTurn, -LANE_OFFSET, -1.0)] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let spec = quiet(intent, MapTemplate::Crossroad, 6.0);
            let m = target_motion(&spec, 6.0, &mut rng);
            let end = m.state(8.0);
            assert!((end.pos[0] - exit_x).abs() < 1e-6, "{intent}: {:?}", end.pos);
            assert!((end.heading - sign * std::f64::consts::FRAC_PI_2).abs() < 1e-9);
            // The turn has begun before t0.
            assert!(m.state(0.0).heading.abs() > 1e-3);
        }
    }

    #[test]
    fn stop_comes_to_rest_at_the_stop_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = quiet(Intent::Stop, MapTemplate::Crossroad, 8.0);
        let m = target_motion(&spec, 8.0, &mut rng);
        let end = m.state(8.0);
        assert!((end.pos[0] - STOP_LINE_X).abs() < 1e-9);
        assert_eq!(end.speed, 0.0);
        assert!(m.state(0.0).speed < m.state(-0.9).speed);
    }

    #[test]
    fn intent_recoverable_without_noise() {
        let quiet_set = DatasetSpec { noise_sigma: 0.0, ..DatasetSpec::new(200, 3) };
        for (i, spec) in quiet_set.scenarios().iter().enumerate() {
            let local = generate(spec).unwrap().to_target_frame().unwrap();
            assert_eq!(classify_future(&local.target_future), spec.intent, "scene {i}");
        }
    }

    #[test]
    fn round_trip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let scene = generate(&ScenarioSpec::new(5, Intent::Stop, MapTemplate::Crossroad)).unwrap();
        let path = dir.path().join("s.json");
        write_scene(&path, &scene).unwrap();
        assert_eq!(read_scene(&path).unwrap(), scene);
        let text = std::fs::read_to_string(&path).unwrap().replace(SCENE_VERSION, "recoat-scene/0");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_scene(&path), Err(RecoatError::SchemaVersion { .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_dataset(&DatasetSpec::new(6, 1)).unwrap();
        let entries = write_dataset(dir.path(), &data).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), entries);
        let scenes = read_dataset(dir.path()).unwrap();
        assert_eq!(scenes.len(), 6);
        assert_eq!(scenes[3], data[3].1);
    }
}
