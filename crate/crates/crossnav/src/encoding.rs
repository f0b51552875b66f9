//! Vectorized state construction: per-vehicle trajectory history vectors,
//! candidate-route vectors, the drivable-area raster, and subgoal sampling.
//! Everything is expressed in the current ego frame.

use crate::consts::{N_P, N_R, N_S, N_SUBGOALS, SUBGOAL_SPACING, T_H};
use crate::geometry::{to_ego_frame, Pose};
use crate::roadnet::{rasterize_drivable, routes_toward, BevRaster, RoadError, Route};
use crate::sim::WorldState;

/// One step of motion history: two poses 0.1 s apart plus the slot id of
/// the vehicle (0 = ego, 1..=5 = surrounding slots).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajVector {
    pub p_prev: Pose,
    pub p_curr: Pose,
    pub vehicle_id: u64,
}

/// One step along a candidate route: two waypoints 1 m apart, the owning
/// vehicle slot, and the route index within that vehicle's candidate set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouteVector {
    pub wp_curr: Pose,
    pub wp_next: Pose,
    pub vehicle_id: u64,
    pub route_id: usize,
}

/// The full observation: fixed shape regardless of how many vehicles are
/// live; absent slots are zero-filled and flagged invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorState {
    /// T_h vectors for the ego.
    pub ego_history: Vec<TrajVector>,
    /// N_s slots of T_h vectors each.
    pub surr_histories: Vec<Vec<TrajVector>>,
    /// N_r routes of N_p - 1 vectors.
    pub ego_routes: Vec<Vec<RouteVector>>,
    /// N_s slots of N_r routes each.
    pub surr_routes: Vec<Vec<Vec<RouteVector>>>,
    pub drivable: BevRaster,
    pub surr_valid: [bool; N_S],
    /// World vehicle id occupying each slot, if any.
    pub surr_ids: [Option<u64>; N_S],
}

/// Exactly 12 candidate subgoals in the ego frame, route-major: the first
/// four belong to route 0 at 5/10/15/20 m, and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgoalSet {
    pub goals: [Pose; N_SUBGOALS],
    /// False where a slot was filled by the padding rule rather than
    /// sampled from its own route.
    pub sampled: [bool; N_SUBGOALS],
}

fn zero_pose() -> Pose {
    Pose::with_speed(0.0, 0.0, 0.0, 0.0)
}

fn zero_history(slot: u64) -> Vec<TrajVector> {
    (0..T_H)
        .map(|_| TrajVector { p_prev: zero_pose(), p_curr: zero_pose(), vehicle_id: slot })
        .collect()
}

fn zero_routes(slot: u64) -> Vec<Vec<RouteVector>> {
    (0..N_R)
        .map(|r| {
            (0..N_P - 1)
                .map(|_| RouteVector {
                    wp_curr: Pose::new(0.0, 0.0, 0.0),
                    wp_next: Pose::new(0.0, 0.0, 0.0),
                    vehicle_id: slot,
                    route_id: r,
                })
                .collect()
        })
        .collect()
}

/// History buffer (T_h + 1 poses, oldest first) into T_h ego-frame vectors.
fn history_vectors(
    ego: &Pose,
    buffer: &std::collections::VecDeque<Pose>,
    slot: u64,
) -> Vec<TrajVector> {
    debug_assert_eq!(buffer.len(), T_H + 1);
    let poses: Vec<Pose> = buffer.iter().map(|p| to_ego_frame(ego, p)).collect();
    poses
        .windows(2)
        .map(|w| TrajVector { p_prev: w[0], p_curr: w[1], vehicle_id: slot })
        .collect()
}

fn route_vectors(ego: &Pose, routes: &[Route], slot: u64) -> Vec<Vec<RouteVector>> {
    routes
        .iter()
        .enumerate()
        .map(|(ri, route)| {
            let wps: Vec<Pose> =
                route.waypoints.iter().map(|p| to_ego_frame(ego, p)).collect();
            wps.windows(2)
                .map(|w| RouteVector {
                    wp_curr: w[0],
                    wp_next: w[1],
                    vehicle_id: slot,
                    route_id: ri,
                })
                .collect()
        })
        .collect()
}

/// Ego-frame candidate routes for the ego vehicle (toward the task goal).
pub fn ego_routes_world(world: &WorldState) -> Result<Vec<Route>, RoadError> {
    routes_toward(&world.scenario.network, &world.ego.pose, &world.scenario.task_goal)
}

/// The N_s closest live vehicles by Euclidean distance (ties by id).
fn closest_slots(world: &WorldState) -> Vec<u64> {
    let ego = world.ego.pose;
    let mut by_dist: Vec<(f64, u64)> = world
        .traffic
        .iter()
        .map(|t| (t.state.pose.distance_to(&ego), t.state.id))
        .collect();
    by_dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    by_dist.into_iter().take(N_S).map(|(_, id)| id).collect()
}

pub fn encode_state(world: &WorldState) -> VectorState {
    let ego = world.ego.pose;
    let net = &world.scenario.network;

    let ego_history = history_vectors(&ego, world.history(0), 0);
    let ego_routes = match ego_routes_world(world) {
        Ok(routes) => route_vectors(&ego, &routes, 0),
        // Unreachable while the episode is live (an on-road ego is always
        // within range of a lane); keeps the encoder total regardless.
        Err(_) => zero_routes(0),
    };

    let mut surr_histories = Vec::with_capacity(N_S);
    let mut surr_routes = Vec::with_capacity(N_S);
    let mut surr_valid = [false; N_S];
    let mut surr_ids = [None; N_S];
    let chosen = closest_slots(world);
    for slot in 0..N_S {
        let slot_id = (slot + 1) as u64;
        match chosen.get(slot) {
            Some(&vid) => {
                let t = world.traffic.iter().find(|t| t.state.id == vid).unwrap();
                surr_histories.push(history_vectors(&ego, world.history(vid), slot_id));
                // A scripted vehicle's own goal is the end of its route.
                let assigned = &world.route_table[t.state.route_assignment.unwrap()];
                let goal = *assigned.waypoints.last().unwrap();
                let routes = routes_toward(net, &t.state.pose, &goal)
                    .unwrap_or_else(|_| vec![assigned.clone(); N_R]);
                // Truncate assigned full-length routes for fixed shape.
                let routes: Vec<Route> = routes
                    .into_iter()
                    .map(|mut r| {
                        r.waypoints.truncate(N_P);
                        while r.waypoints.len() < N_P {
                            let last = *r.waypoints.last().unwrap();
                            let (s, c) = last.heading.sin_cos();
                            r.waypoints.push(Pose::new(last.x + c, last.y + s, last.heading));
                        }
                        r
                    })
                    .collect();
                surr_routes.push(route_vectors(&ego, &routes, slot_id));
                surr_valid[slot] = true;
                surr_ids[slot] = Some(vid);
            }
            None => {
                surr_histories.push(zero_history(slot_id));
                surr_routes.push(zero_routes(slot_id));
            }
        }
    }

    VectorState {
        ego_history,
        surr_histories,
        ego_routes,
        surr_routes,
        drivable: rasterize_drivable(net, &ego),
        surr_valid,
        surr_ids,
    }
}

/// Samples 4 subgoals per route at 5/10/15/20 m of arc; slots a route
/// cannot fill are padded with the sampled subgoal closest to `goal`.
/// Routes and `goal` share one frame (callers pass ego-frame data).
pub fn subgoals_from_routes(routes: &[Route], goal: &Pose) -> SubgoalSet {
    debug_assert_eq!(routes.len(), N_R);
    let mut slots: [Option<Pose>; N_SUBGOALS] = [None; N_SUBGOALS];
    for (ri, route) in routes.iter().enumerate() {
        for k in 0..N_SUBGOALS / N_R {
            // 1 m waypoint spacing makes arc s land on index s exactly.
            let arc = (k + 1) * SUBGOAL_SPACING as usize;
            if arc < route.waypoints.len() {
                slots[ri * (N_SUBGOALS / N_R) + k] = Some(route.waypoints[arc]);
            }
        }
    }
    let pad = slots
        .iter()
        .flatten()
        .min_by(|a, b| a.distance_to(goal).partial_cmp(&b.distance_to(goal)).unwrap())
        .copied()
        // Degenerate fallback: no route reached even 5 m.
        .unwrap_or_else(|| *routes[0].waypoints.last().unwrap());
    let mut goals = [zero_pose(); N_SUBGOALS];
    let mut sampled = [false; N_SUBGOALS];
    for (i, s) in slots.iter().enumerate() {
        match s {
            Some(p) => {
                goals[i] = Pose::new(p.x, p.y, p.heading);
                sampled[i] = true;
            }
            None => goals[i] = Pose::new(pad.x, pad.y, pad.heading),
        }
    }
    SubgoalSet { goals, sampled }
}

/// The 12 ego-frame subgoals for the current world.
pub fn sample_subgoals(world: &WorldState) -> Result<SubgoalSet, RoadError> {
    let routes = ego_routes_world(world)?;
    let ego = world.ego.pose;
    let ego_frame_routes: Vec<Route> = routes
        .iter()
        .map(|r| Route {
            waypoints: r.waypoints.iter().map(|p| to_ego_frame(&ego, p)).collect(),
        })
        .collect();
    let goal_ego = to_ego_frame(&ego, &world.scenario.task_goal);
    Ok(subgoals_from_routes(&ego_frame_routes, &goal_ego))
}
