//! The driving environment: 0.1 s pose-displacement kinematics for the ego
//! vehicle, scripted surrounding traffic with a gap-based car-following
//! rule, seeded spawning, terminal-event detection, and trajectory logging.

use crate::consts::{DT, T_H};
use crate::geometry::{
    normalize_angle, sat_overlap, OrientedBox, Pose, VEHICLE_LENGTH, VEHICLE_WIDTH,
};
use crate::roadnet::{Route, Scenario};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::FRAC_PI_4;
use thiserror::Error;

pub use crate::roadnet::TrafficFlowSpec;

/// Minimum clear distance from an entry point before a spawn there.
const SPAWN_CLEARANCE: f64 = 8.0;
/// Car-following reacts to vehicles within this lateral distance of the
/// follower's route.
const FOLLOW_LATERAL: f64 = 1.75;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("step called on a terminated episode (step {step})")]
    EpisodeTerminated { step: usize },
}

/// One ego action: displacement to reach within 0.1 s, in the ego frame.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionDelta {
    pub dx: f64,
    pub dy: f64,
    pub dheading: f64,
}

/// Environment knobs not tied to a specific scenario.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    /// Episode step cap; reaching it raises the timeout event.
    pub step_cap: usize,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    /// goal_reached needs distance below this many metres...
    pub goal_dist_tol: f64,
    /// ...and absolute heading difference below this many radians.
    pub goal_heading_tol: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            step_cap: 600,
            vehicle_length: VEHICLE_LENGTH,
            vehicle_width: VEHICLE_WIDTH,
            goal_dist_tol: 2.0,
            goal_heading_tol: FRAC_PI_4,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EventSet {
    pub collision: bool,
    pub off_road: bool,
    pub goal_reached: bool,
    pub timeout: bool,
}

impl EventSet {
    pub fn is_terminal(&self) -> bool {
        self.collision || self.off_road || self.goal_reached || self.timeout
    }
}

/// Events raised by one environment step. The stepped `WorldState` is the
/// post-step snapshot; it is not duplicated here.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub events: EventSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    /// 0 is the ego vehicle; traffic ids start at 1 and never repeat.
    pub id: u64,
    pub pose: Pose,
    /// Index into `WorldState::route_table`; the ego has no assigned route.
    pub route_assignment: Option<usize>,
    /// (length, width) of the footprint, metres.
    pub dims: (f64, f64),
}

impl VehicleState {
    pub fn bbox(&self) -> OrientedBox {
        OrientedBox::new(self.pose, self.dims.0, self.dims.1)
    }
}

/// A scripted surrounding vehicle: follows its assigned route at a nominal
/// speed, yielding to vehicles ahead on that route.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficVehicle {
    pub state: VehicleState,
    pub nominal_speed: f64,
    /// Arc position along the assigned route, metres.
    pub arc: f64,
}

/// One line of the trajectory log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajRecord {
    pub t: usize,
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

#[derive(Debug, Clone)]
pub struct WorldState {
    pub scenario: Scenario,
    pub params: SimParams,
    pub step_count: usize,
    pub terminated: bool,
    pub ego: VehicleState,
    pub traffic: Vec<TrafficVehicle>,
    /// Routes assigned to spawned traffic, appended once per spawn.
    pub route_table: Vec<Route>,
    /// Last T_h + 1 poses (current plus T_h previous) per live vehicle.
    pub histories: BTreeMap<u64, VecDeque<Pose>>,
    pub log: Vec<TrajRecord>,
    next_vehicle_id: u64,
    /// Advanced once per entry lane per step regardless of outcome, so the
    /// spawn schedule does not depend on ego behaviour.
    spawn_rng: ChaCha8Rng,
    /// Advanced only when a spawn succeeds (speed and route draws).
    detail_rng: ChaCha8Rng,
}

fn backfilled_history(pose: Pose) -> VecDeque<Pose> {
    let mut h = VecDeque::with_capacity(T_H + 1);
    for _ in 0..=T_H {
        h.push_back(pose);
    }
    h
}

/// Pose at arc position `s` along a route (linear between the 1 m-spaced
/// waypoints, headings angle-interpolated). None past the route end.
pub fn route_pose_at(route: &Route, s: f64) -> Option<Pose> {
    if s < 0.0 {
        return None;
    }
    let n = route.waypoints.len();
    let idx = s.floor() as usize;
    if idx + 1 >= n {
        return (s <= (n - 1) as f64).then(|| route.waypoints[n - 1]);
    }
    let t = s - idx as f64;
    let a = route.waypoints[idx];
    let b = route.waypoints[idx + 1];
    let dh = normalize_angle(b.heading - a.heading);
    Some(Pose::new(
        a.x + (b.x - a.x) * t,
        a.y + (b.y - a.y) * t,
        normalize_angle(a.heading + dh * t),
    ))
}

/// Nearest waypoint index on `route` to a point, with its distance.
fn project_onto_route(route: &Route, x: f64, y: f64) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (i, wp) in route.waypoints.iter().enumerate() {
        let d = (wp.x - x).hypot(wp.y - y);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Gap-based car-following: full nominal speed with a clear road, scaling
/// linearly to zero as the center-to-center gap closes to 4 m.
pub fn car_following_speed(nominal: f64, gap_ahead: Option<f64>) -> f64 {
    match gap_ahead {
        None => nominal,
        Some(d) => (nominal * (d - 4.0) / 10.0).clamp(0.0, nominal),
    }
}

impl WorldState {
    /// Ego plus live traffic, ego first, traffic in spawn order.
    pub fn vehicles(&self) -> impl Iterator<Item = &VehicleState> {
        std::iter::once(&self.ego).chain(self.traffic.iter().map(|t| &t.state))
    }

    pub fn history(&self, id: u64) -> &VecDeque<Pose> {
        &self.histories[&id]
    }

    fn record_all(&mut self) {
        let t = self.step_count;
        let recs: Vec<TrajRecord> = self
            .vehicles()
            .map(|v| TrajRecord {
                t,
                id: v.id,
                x: v.pose.x,
                y: v.pose.y,
                heading: v.pose.heading,
                speed: v.pose.speed.unwrap_or(0.0),
            })
            .collect();
        self.log.extend(recs);
    }

    /// Line-delimited trajectory records: `t,id,x,y,heading,speed`.
    pub fn export_log(&self) -> String {
        let mut out = String::new();
        for r in &self.log {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.t, r.id, r.x, r.y, r.heading, r.speed
            ));
        }
        out
    }
}

pub fn reset(scenario: &Scenario, flow_seed: u64) -> WorldState {
    reset_with(scenario, flow_seed, SimParams::default())
}

pub fn reset_with(scenario: &Scenario, flow_seed: u64, params: SimParams) -> WorldState {
    let mut spawn_pose = scenario.ego_spawn;
    spawn_pose.speed = Some(0.0);
    let ego = VehicleState {
        id: 0,
        pose: spawn_pose,
        route_assignment: None,
        dims: (params.vehicle_length, params.vehicle_width),
    };
    let mut histories = BTreeMap::new();
    histories.insert(0, backfilled_history(spawn_pose));
    let mut world = WorldState {
        scenario: scenario.clone(),
        params,
        step_count: 0,
        terminated: false,
        ego,
        traffic: Vec::new(),
        route_table: Vec::new(),
        histories,
        log: Vec::new(),
        next_vehicle_id: 1,
        spawn_rng: ChaCha8Rng::seed_from_u64(flow_seed),
        detail_rng: ChaCha8Rng::seed_from_u64(flow_seed ^ 0x9E37_79B9_7F4A_7C15),
    };
    world.record_all();
    world
}

/// All full lane chains from an entry lane to an exit, as 1 m routes.
fn entry_routes(scenario: &Scenario, entry: usize) -> Vec<Route> {
    let net = &scenario.network;
    let mut out = Vec::new();
    let mut stack = vec![vec![entry]];
    while let Some(path) = stack.pop() {
        let last = *path.last().unwrap();
        if net.lanes[last].successors.is_empty() {
            let mut chain: Vec<Pose> = Vec::new();
            for &li in &path {
                chain.extend_from_slice(&net.lanes[li].waypoints);
            }
            out.push((path, chain));
            continue;
        }
        for &s in net.lanes[last].successors.iter().rev() {
            let mut p = path.clone();
            p.push(s);
            stack.push(p);
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out.into_iter().map(|(_, chain)| crate::roadnet::chain_to_route(&chain)).collect()
}

pub fn step(world: &mut WorldState, action: ActionDelta) -> Result<StepOutcome, SimError> {
    if world.terminated {
        return Err(SimError::EpisodeTerminated { step: world.step_count });
    }

    // Pre-step snapshot drives all traffic decisions this step, so update
    // order cannot matter.
    let snapshot: Vec<(u64, f64, f64)> = world
        .vehicles()
        .map(|v| (v.id, v.pose.x, v.pose.y))
        .collect();

    // Ego: displacement interpreted in the current ego frame.
    let ego_pose = world.ego.pose;
    let (sh, ch) = ego_pose.heading.sin_cos();
    let speed = action.dx.hypot(action.dy) / DT;
    world.ego.pose = Pose {
        x: ego_pose.x + ch * action.dx - sh * action.dy,
        y: ego_pose.y + sh * action.dx + ch * action.dy,
        heading: normalize_angle(ego_pose.heading + action.dheading),
        speed: Some(speed),
    };

    // Traffic: car-following along assigned routes.
    let mut despawned: Vec<u64> = Vec::new();
    for ti in 0..world.traffic.len() {
        let route_idx = world.traffic[ti].state.route_assignment.unwrap();
        let route = &world.route_table[route_idx];
        let arc = world.traffic[ti].arc;
        let self_id = world.traffic[ti].state.id;
        let mut gap: Option<f64> = None;
        for &(oid, ox, oy) in &snapshot {
            if oid == self_id {
                continue;
            }
            let (idx, lateral) = project_onto_route(route, ox, oy);
            if lateral > FOLLOW_LATERAL {
                continue;
            }
            let d = idx as f64 - arc;
            if d > 1e-9 && gap.map_or(true, |g| d < g) {
                gap = Some(d);
            }
        }
        let v = car_following_speed(world.traffic[ti].nominal_speed, gap);
        let new_arc = arc + v * DT;
        match route_pose_at(route, new_arc) {
            Some(mut pose) => {
                pose.speed = Some(v);
                world.traffic[ti].arc = new_arc;
                world.traffic[ti].state.pose = pose;
            }
            None => despawned.push(self_id),
        }
    }
    for id in &despawned {
        world.traffic.retain(|t| t.state.id != *id);
        world.histories.remove(id);
    }

    // Spawner: one uniform draw per entry lane per step, in lane order.
    let entry_lanes: Vec<usize> = world
        .scenario
        .network
        .lanes
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_entry)
        .map(|(i, _)| i)
        .collect();
    let p_spawn = world.scenario.traffic.spawn_rate * DT;
    for entry in entry_lanes {
        let u: f64 = world.spawn_rng.gen();
        if u >= p_spawn {
            continue;
        }
        if world.traffic.len() >= world.scenario.traffic.max_vehicles {
            continue;
        }
        let wp0 = world.scenario.network.lanes[entry].waypoints[0];
        let blocked = world
            .vehicles()
            .any(|v| v.pose.distance_to(&wp0) < SPAWN_CLEARANCE);
        if blocked {
            continue;
        }
        let routes = entry_routes(&world.scenario, entry);
        let pick = world.detail_rng.gen_range(0..routes.len());
        let spec = &world.scenario.traffic;
        let nominal = world.detail_rng.gen_range(spec.speed_min..=spec.speed_max);
        let mut pose = routes[pick].waypoints[0];
        pose.speed = Some(nominal);
        let id = world.next_vehicle_id;
        world.next_vehicle_id += 1;
        world.route_table.push(routes[pick].clone());
        world.traffic.push(TrafficVehicle {
            state: VehicleState {
                id,
                pose,
                route_assignment: Some(world.route_table.len() - 1),
                dims: (world.params.vehicle_length, world.params.vehicle_width),
            },
            nominal_speed: nominal,
            arc: 0.0,
        });
        world.histories.insert(id, backfilled_history(pose));
    }

    // Histories: drop the oldest pose, append the new one.
    let ego_pose = world.ego.pose;
    world
        .histories
        .get_mut(&0)
        .map(|h| {
            h.push_back(ego_pose);
            while h.len() > T_H + 1 {
                h.pop_front();
            }
        })
        .unwrap();
    for t in &world.traffic {
        let h = world.histories.get_mut(&t.state.id).unwrap();
        h.push_back(t.state.pose);
        while h.len() > T_H + 1 {
            h.pop_front();
        }
    }

    world.step_count += 1;
    world.record_all();

    // Events, collision first so it can suppress goal_reached.
    let ego_box = world.ego.bbox();
    let mut events = EventSet::default();
    events.collision = world
        .traffic
        .iter()
        .any(|t| sat_overlap(&ego_box, &t.state.bbox()));
    events.off_road = !crate::roadnet::is_on_road(&world.scenario.network, &ego_box);
    if !events.collision {
        let goal = world.scenario.task_goal;
        let dist = world.ego.pose.distance_to(&goal);
        let hdiff = normalize_angle(world.ego.pose.heading - goal.heading).abs();
        events.goal_reached =
            dist < world.params.goal_dist_tol && hdiff < world.params.goal_heading_tol;
    }
    events.timeout = world.step_count >= world.params.step_cap;
    world.terminated = events.is_terminal();
    Ok(StepOutcome { events })
}
