//! Analytic road networks: right-angle 4-way intersections with two lanes
//! per direction, route generation over the lane graph, drivable-area
//! queries, and bird's-eye-view rasterization.

use crate::consts::{N_P, N_R, RASTER_PX, RASTER_RES};
use crate::geometry::{from_ego_frame, normalize_angle, OrientedBox, Pose};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RoadError {
    #[error("pose ({x:.2}, {y:.2}) is more than {limit} m from every lane")]
    OffNetwork { x: f64, y: f64, limit: f64 },
    #[error("unknown scenario {0:?} (expected turn_left, go_straight or turn_right)")]
    UnknownScenario(String),
}

/// Poisson-style traffic generation parameters for a scenario.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficFlowSpec {
    /// Spawn probability per entry lane is `spawn_rate * DT` each step.
    pub spawn_rate: f64,
    /// Nominal speeds are drawn uniformly from this range, m/s.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Spawning pauses while this many vehicles are live.
    pub max_vehicles: usize,
}

impl Default for TrafficFlowSpec {
    fn default() -> Self {
        TrafficFlowSpec { spawn_rate: 0.15, speed_min: 4.0, speed_max: 8.0, max_vehicles: 10 }
    }
}

#[derive(Debug, Clone)]
pub struct Lane {
    /// Centerline poses at 1 m arc spacing, headings tangent.
    pub waypoints: Vec<Pose>,
    /// Indices of lanes that continue this one.
    pub successors: Vec<usize>,
    /// Traffic may spawn at waypoint 0 of entry lanes.
    pub is_entry: bool,
    pub is_exit: bool,
}

#[derive(Debug, Clone)]
pub struct RoadNetwork {
    pub lanes: Vec<Lane>,
    /// Convex polygons (counter-clockwise vertices) whose union is the
    /// drivable area.
    pub drivable: Vec<Vec<(f64, f64)>>,
}

/// A candidate path for one vehicle: waypoints at 1 m spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub waypoints: Vec<Pose>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioId {
    TurnLeft,
    GoStraight,
    TurnRight,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 3] =
        [ScenarioId::TurnLeft, ScenarioId::GoStraight, ScenarioId::TurnRight];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioId::TurnLeft => "turn_left",
            ScenarioId::GoStraight => "go_straight",
            ScenarioId::TurnRight => "turn_right",
        }
    }
}

impl std::str::FromStr for ScenarioId {
    type Err = RoadError;
    fn from_str(s: &str) -> Result<Self, RoadError> {
        match s {
            "turn_left" => Ok(ScenarioId::TurnLeft),
            "go_straight" => Ok(ScenarioId::GoStraight),
            "turn_right" => Ok(ScenarioId::TurnRight),
            other => Err(RoadError::UnknownScenario(other.to_string())),
        }
    }
}

impl std::fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub id: ScenarioId,
    pub network: RoadNetwork,
    pub ego_spawn: Pose,
    pub task_goal: Pose,
    pub traffic: TrafficFlowSpec,
}

/// Geometry knobs for the analytic intersection.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioParams {
    pub lane_width: f64,
    /// Ego spawns this far before the junction edge, metres.
    pub spawn_distance: f64,
    /// Task goal sits this far past the junction edge, metres.
    pub goal_distance: f64,
    pub traffic: TrafficFlowSpec,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            lane_width: 3.5,
            spawn_distance: 40.0,
            goal_distance: 30.0,
            traffic: TrafficFlowSpec::default(),
        }
    }
}

/// The four travel directions of the intersection's legs.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Leg {
    East,
    North,
    West,
    South,
}

impl Leg {
    const ALL: [Leg; 4] = [Leg::East, Leg::North, Leg::West, Leg::South];

    /// Unit vector of travel.
    fn u(self) -> (f64, f64) {
        match self {
            Leg::East => (1.0, 0.0),
            Leg::North => (0.0, 1.0),
            Leg::West => (-1.0, 0.0),
            Leg::South => (0.0, -1.0),
        }
    }

    /// Left normal of travel.
    fn n(self) -> (f64, f64) {
        let (ux, uy) = self.u();
        (-uy, ux)
    }

    fn heading(self) -> f64 {
        let (ux, uy) = self.u();
        uy.atan2(ux)
    }

    fn left_target(self) -> Leg {
        match self {
            Leg::East => Leg::North,
            Leg::North => Leg::West,
            Leg::West => Leg::South,
            Leg::South => Leg::East,
        }
    }

    fn right_target(self) -> Leg {
        match self {
            Leg::East => Leg::South,
            Leg::South => Leg::West,
            Leg::West => Leg::North,
            Leg::North => Leg::East,
        }
    }

    fn index(self) -> usize {
        match self {
            Leg::East => 0,
            Leg::North => 1,
            Leg::West => 2,
            Leg::South => 3,
        }
    }
}

/// Walks a polyline producing poses at exactly 1 m arc spacing, headings
/// along the local segment.
fn sample_polyline_1m(points: &[(f64, f64)]) -> Vec<Pose> {
    debug_assert!(points.len() >= 2);
    let mut segs = Vec::with_capacity(points.len() - 1);
    let mut total = 0.0;
    for w in points.windows(2) {
        let (ax, ay) = w[0];
        let (bx, by) = w[1];
        let len = (bx - ax).hypot(by - ay);
        segs.push((w[0], w[1], total, len));
        total += len;
    }
    let count = total.floor() as usize + 1;
    let mut out = Vec::with_capacity(count);
    let mut seg_idx = 0;
    for i in 0..count {
        let s = i as f64;
        while seg_idx + 1 < segs.len() && s > segs[seg_idx].2 + segs[seg_idx].3 + 1e-12 {
            seg_idx += 1;
        }
        let ((ax, ay), (bx, by), start, len) = segs[seg_idx];
        let t = if len > 0.0 { ((s - start) / len).clamp(0.0, 1.0) } else { 0.0 };
        let heading = (by - ay).atan2(bx - ax);
        out.push(Pose::new(ax + (bx - ax) * t, ay + (by - ay) * t, heading));
    }
    out
}

/// Quarter-circle arc from `start` with initial heading `h0`, turning
/// `+pi/2` (left) or `-pi/2` (right), radius `r`. Waypoints are placed at
/// equal-chord steps so consecutive points are exactly 1 m apart.
fn sample_arc_1m(start: (f64, f64), h0: f64, left: bool, r: f64) -> Vec<Pose> {
    let chord_angle = 2.0 * (0.5 / r).asin();
    let count = (FRAC_PI_2 / chord_angle).floor() as usize + 1;
    let sign = if left { 1.0 } else { -1.0 };
    // Center sits at distance r along the left (or right) normal.
    let (sin0, cos0) = h0.sin_cos();
    let center = (start.0 + sign * (-sin0) * r, start.1 + sign * cos0 * r);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let phi = sign * chord_angle * i as f64;
        let heading = normalize_angle(h0 + phi);
        // Position: rotate the center-to-start vector by phi.
        let vx = start.0 - center.0;
        let vy = start.1 - center.1;
        let (sinp, cosp) = phi.sin_cos();
        out.push(Pose::new(
            center.0 + cosp * vx - sinp * vy,
            center.1 + sinp * vx + cosp * vy,
            heading,
        ));
    }
    out
}

fn rect_ccw(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Vec<(f64, f64)> {
    vec![(xmin, ymin), (xmax, ymin), (xmax, ymax), (xmin, ymax)]
}

/// Closed-region test against one convex CCW polygon.
fn point_in_convex(poly: &[(f64, f64)], p: (f64, f64)) -> bool {
    for i in 0..poly.len() {
        let (ax, ay) = poly[i];
        let (bx, by) = poly[(i + 1) % poly.len()];
        let cross = (bx - ax) * (p.1 - ay) - (by - ay) * (p.0 - ax);
        if cross < -1e-9 {
            return false;
        }
    }
    true
}

impl RoadNetwork {
    /// True iff the point lies inside the union of drivable polygons.
    pub fn point_drivable(&self, x: f64, y: f64) -> bool {
        self.drivable.iter().any(|poly| point_in_convex(poly, (x, y)))
    }

    /// Builds the right-angle 4-way intersection. Each road carries two
    /// lanes per direction; approaches have a 10 m lane-change zone.
    pub fn four_way(params: &ScenarioParams) -> Self {
        let w = params.lane_width;
        let half = 2.0 * w;
        let ext = (half + params.goal_distance + 23.0).max(half + params.spawn_distance + 13.0);
        let near_len = 12.0 + w * 2.0;
        let zone_len = 10.0;
        let near_start = half + near_len;
        let zone_start = near_start + zone_len;
        let inner = -0.5 * w;
        let outer = -1.5 * w;

        let mut lanes: Vec<Lane> = Vec::new();
        let mut push = |wps: Vec<Pose>, is_entry: bool, is_exit: bool| -> usize {
            lanes.push(Lane { waypoints: wps, successors: Vec::new(), is_entry, is_exit });
            lanes.len() - 1
        };

        // Per leg: [a_in, a_out, b_in, b_out, bx_in_out, bx_out_in,
        //           c_in, c_out, j_left, j_str_in, j_str_out, j_right,
        //           x_in, x_out]
        let mut ids = [[0usize; 14]; 4];
        for leg in Leg::ALL {
            let (ux, uy) = leg.u();
            let (nx, ny) = leg.n();
            let at = |s: f64, o: f64| (s * ux + o * nx, s * uy + o * ny);
            let li = leg.index();
            for (k, &off) in [inner, outer].iter().enumerate() {
                ids[li][k] = push(
                    sample_polyline_1m(&[at(-ext, off), at(-zone_start, off)]),
                    true,
                    false,
                );
                ids[li][2 + k] = push(
                    sample_polyline_1m(&[at(-zone_start, off), at(-near_start, off)]),
                    false,
                    false,
                );
                ids[li][6 + k] = push(
                    sample_polyline_1m(&[at(-near_start, off), at(-half, off)]),
                    false,
                    false,
                );
                ids[li][12 + k] =
                    push(sample_polyline_1m(&[at(half, off), at(ext, off)]), false, true);
            }
            // Lane-change diagonals across the zone.
            ids[li][4] = push(
                sample_polyline_1m(&[at(-zone_start, inner), at(-near_start, outer)]),
                false,
                false,
            );
            ids[li][5] = push(
                sample_polyline_1m(&[at(-zone_start, outer), at(-near_start, inner)]),
                false,
                false,
            );
            // Junction connectors.
            let h = leg.heading();
            ids[li][8] = push(sample_arc_1m(at(-half, inner), h, true, half - inner), false, false);
            ids[li][9] =
                push(sample_polyline_1m(&[at(-half, inner), at(half, inner)]), false, false);
            ids[li][10] =
                push(sample_polyline_1m(&[at(-half, outer), at(half, outer)]), false, false);
            ids[li][11] =
                push(sample_arc_1m(at(-half, outer), h, false, half + outer), false, false);
        }

        for leg in Leg::ALL {
            let li = leg.index();
            let [a_in, a_out, b_in, b_out, bx_in_out, bx_out_in, c_in, c_out, j_left, j_str_in, j_str_out, j_right, x_in, x_out] =
                ids[li];
            let left_exit_in = ids[leg.left_target().index()][12];
            let right_exit_out = ids[leg.right_target().index()][13];
            lanes[a_in].successors = vec![b_in, bx_in_out];
            lanes[a_out].successors = vec![b_out, bx_out_in];
            lanes[b_in].successors = vec![c_in];
            lanes[b_out].successors = vec![c_out];
            lanes[bx_in_out].successors = vec![c_out];
            lanes[bx_out_in].successors = vec![c_in];
            lanes[c_in].successors = vec![j_left, j_str_in];
            lanes[c_out].successors = vec![j_str_out, j_right];
            lanes[j_left].successors = vec![left_exit_in];
            lanes[j_str_in].successors = vec![x_in];
            lanes[j_str_out].successors = vec![x_out];
            lanes[j_right].successors = vec![right_exit_out];
        }

        let drivable = vec![
            rect_ccw(-ext, ext, -half, half),
            rect_ccw(-half, half, -ext, ext),
        ];
        RoadNetwork { lanes, drivable }
    }
}

pub fn build_scenario(id: ScenarioId) -> Scenario {
    build_scenario_with(id, &ScenarioParams::default())
}

pub fn build_scenario_with(id: ScenarioId, params: &ScenarioParams) -> Scenario {
    let network = RoadNetwork::four_way(params);
    let w = params.lane_width;
    let half = 2.0 * w;
    let inner = -0.5 * w;
    let outer = -1.5 * w;
    // Ego always approaches eastbound; the maneuver fixes spawn lane & goal.
    let spawn_x = -(half + params.spawn_distance);
    let goal_s = half + params.goal_distance;
    let (spawn, goal) = match id {
        ScenarioId::TurnLeft => (
            Pose::with_speed(spawn_x, inner, 0.0, 0.0),
            // Exit northbound on the inner lane.
            Pose::new(-inner, goal_s, FRAC_PI_2),
        ),
        ScenarioId::GoStraight => (
            Pose::with_speed(spawn_x, inner, 0.0, 0.0),
            Pose::new(goal_s, inner, 0.0),
        ),
        ScenarioId::TurnRight => (
            Pose::with_speed(spawn_x, outer, 0.0, 0.0),
            // Exit southbound on the outer lane.
            Pose::new(outer, -goal_s, -FRAC_PI_2),
        ),
    };
    Scenario { id, network, ego_spawn: spawn, task_goal: goal, traffic: params.traffic }
}

/// Nearest lane waypoint to a pose. Prefers waypoints whose heading is
/// within a quarter turn of the pose's; falls back to pure distance when
/// the pose faces away from every nearby lane.
fn nearest_lane_point(
    network: &RoadNetwork,
    pose: &Pose,
    limit: f64,
) -> Result<(usize, usize), RoadError> {
    let mut best: Option<(f64, usize, usize)> = None;
    let mut best_any: Option<(f64, usize, usize)> = None;
    for (li, lane) in network.lanes.iter().enumerate() {
        for (wi, wp) in lane.waypoints.iter().enumerate() {
            let d = wp.distance_to(pose);
            if d > limit {
                continue;
            }
            let aligned = normalize_angle(wp.heading - pose.heading).abs() <= FRAC_PI_2;
            if aligned && best.map_or(true, |(bd, _, _)| d < bd - 1e-12) {
                best = Some((d, li, wi));
            }
            if best_any.map_or(true, |(bd, _, _)| d < bd - 1e-12) {
                best_any = Some((d, li, wi));
            }
        }
    }
    best.or(best_any)
        .map(|(_, li, wi)| (li, wi))
        .ok_or(RoadError::OffNetwork { x: pose.x, y: pose.y, limit })
}

/// All lane-id chains from `start` to an exit lane (the graph is a DAG with
/// short paths, so plain DFS enumeration is fine).
fn paths_to_exits(network: &RoadNetwork, start: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut stack = vec![(vec![start], start)];
    while let Some((path, last)) = stack.pop() {
        let lane = &network.lanes[last];
        if lane.successors.is_empty() {
            out.push(path);
            continue;
        }
        for &s in lane.successors.iter().rev() {
            let mut p = path.clone();
            p.push(s);
            stack.push((p, s));
        }
    }
    out.sort();
    out
}

/// Walks a polyline placing waypoints whose consecutive Euclidean spacing
/// is exactly 1 m: each next waypoint is the forward intersection of the
/// polyline with the unit circle around the previous one. Stops when the
/// polyline is exhausted or `cap` waypoints are placed.
fn circle_step(ext: &[Pose], cap: Option<usize>) -> Vec<Pose> {
    let mut waypoints = Vec::with_capacity(cap.unwrap_or(64));
    waypoints.push(Pose::new(ext[0].x, ext[0].y, ext[0].heading));
    let mut seg = 0usize;
    let mut t0 = 0.0f64;
    'outer: while cap.map_or(true, |c| waypoints.len() < c) {
        let cpt = *waypoints.last().unwrap();
        while seg + 1 < ext.len() {
            let a = ext[seg];
            let b = ext[seg + 1];
            let dx = b.x - a.x;
            let dy = b.y - a.y;
            let dd = dx * dx + dy * dy;
            if dd < 1e-18 {
                seg += 1;
                t0 = 0.0;
                continue;
            }
            let fx = a.x - cpt.x;
            let fy = a.y - cpt.y;
            let fd = fx * dx + fy * dy;
            let disc = fd * fd - dd * (fx * fx + fy * fy - 1.0);
            if disc >= 0.0 {
                let t = (-fd + disc.sqrt()) / dd;
                if t > t0 + 1e-12 && t <= 1.0 + 1e-12 {
                    let t = t.min(1.0);
                    let dh = normalize_angle(b.heading - a.heading);
                    waypoints.push(Pose::new(
                        a.x + dx * t,
                        a.y + dy * t,
                        normalize_angle(a.heading + dh * t),
                    ));
                    t0 = t;
                    continue 'outer;
                }
            }
            seg += 1;
            t0 = 0.0;
        }
        break;
    }
    waypoints
}

/// Full chain as an exact-1 m route (no length cap, no extrapolation);
/// used for the complete entry-to-exit paths traffic follows.
pub(crate) fn chain_to_route(chain: &[Pose]) -> Route {
    Route { waypoints: circle_step(chain, None) }
}

/// Resamples a waypoint chain into `N_P` waypoints at exact 1 m spacing,
/// extrapolating along the final heading when the chain is short.
fn resample_route(chain: &[Pose]) -> Route {
    debug_assert!(!chain.is_empty());
    // Extension far past what 50 waypoints can consume keeps the circle
    // stepping from ever running out of polyline.
    let mut ext: Vec<Pose> = chain.to_vec();
    let last = *chain.last().unwrap();
    let (sh, ch) = last.heading.sin_cos();
    ext.push(Pose::new(last.x + 60.0 * ch, last.y + 60.0 * sh, last.heading));
    let waypoints = circle_step(&ext, Some(N_P));
    debug_assert_eq!(waypoints.len(), N_P);
    Route { waypoints }
}

/// Exactly `N_R` candidate routes from `pose` toward `goal`, each `N_P`
/// waypoints at 1 m spacing. Ranked by closest approach to the goal, then
/// by path length; the best route is duplicated when fewer distinct paths
/// exist.
pub fn routes_toward(
    network: &RoadNetwork,
    pose: &Pose,
    goal: &Pose,
) -> Result<Vec<Route>, RoadError> {
    let (lane_id, wp_idx) = nearest_lane_point(network, pose, 5.0)?;
    let paths = paths_to_exits(network, lane_id);
    let mut scored: Vec<(f64, f64, Vec<usize>)> = Vec::with_capacity(paths.len());
    for path in paths {
        let mut chain: Vec<Pose> = Vec::new();
        for (pi, &li) in path.iter().enumerate() {
            let wps = &network.lanes[li].waypoints;
            let from = if pi == 0 { wp_idx } else { 0 };
            chain.extend_from_slice(&wps[from.min(wps.len() - 1)..]);
        }
        let mut goal_dist = f64::INFINITY;
        let mut arc_at_goal = 0.0;
        let mut arc = 0.0;
        for (i, wp) in chain.iter().enumerate() {
            if i > 0 {
                arc += chain[i - 1].distance_to(wp);
            }
            let d = wp.distance_to(goal);
            if d < goal_dist - 1e-12 {
                goal_dist = d;
                arc_at_goal = arc;
            }
        }
        scored.push((goal_dist, arc_at_goal, path));
    }
    scored.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.partial_cmp(&b.1).unwrap())
            .then(a.2.cmp(&b.2))
    });

    let mut routes: Vec<Route> = Vec::with_capacity(N_R);
    for (_, _, path) in &scored {
        if routes.len() == N_R {
            break;
        }
        let mut chain: Vec<Pose> = Vec::new();
        for (pi, &li) in path.iter().enumerate() {
            let wps = &network.lanes[li].waypoints;
            let from = if pi == 0 { wp_idx } else { 0 };
            chain.extend_from_slice(&wps[from.min(wps.len() - 1)..]);
        }
        routes.push(resample_route(&chain));
    }
    if routes.is_empty() {
        return Err(RoadError::OffNetwork { x: pose.x, y: pose.y, limit: 5.0 });
    }
    while routes.len() < N_R {
        routes.push(routes[0].clone());
    }
    Ok(routes)
}

/// The 64x64 drivable-area grid around the ego vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct BevRaster {
    /// Row-major 0/1 values; row 0 is 24.6 m ahead, column 0 is 24.6 m to
    /// the left, ego sits at pixel (32, 32).
    pub grid: Vec<u8>,
    pub resolution: f64,
}

impl BevRaster {
    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.grid[row * RASTER_PX + col]
    }
}

/// Renders the drivable polygons around the ego pose. Pixels are tested at
/// their centers; the grid is corner-anchored so the ego position is the
/// shared corner of the four central pixels and pixel (32,32) covers the
/// half-open cell just behind-right of it.
pub fn rasterize_drivable(network: &RoadNetwork, ego: &Pose) -> BevRaster {
    let mut grid = vec![0u8; RASTER_PX * RASTER_PX];
    let half = (RASTER_PX / 2) as f64;
    for r in 0..RASTER_PX {
        let xe = (half - r as f64 - 0.5) * RASTER_RES;
        for c in 0..RASTER_PX {
            let ye = (half - c as f64 - 0.5) * RASTER_RES;
            let p = from_ego_frame(ego, &Pose::new(xe, ye, 0.0));
            if network.point_drivable(p.x, p.y) {
                grid[r * RASTER_PX + c] = 1;
            }
        }
    }
    BevRaster { grid, resolution: RASTER_RES }
}

/// True iff all four footprint corners lie on the drivable union.
pub fn is_on_road(network: &RoadNetwork, bbox: &OrientedBox) -> bool {
    bbox.corners().iter().all(|&(x, y)| network.point_drivable(x, y))
}
