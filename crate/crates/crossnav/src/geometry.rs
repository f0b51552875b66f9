//! Pose algebra, ego-frame transforms, and oriented-rectangle collision
//! tests via the separating axis theorem.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default vehicle footprint, metres. The simulator and predictor use this
/// for every vehicle unless a scenario overrides it.
pub const VEHICLE_LENGTH: f64 = 4.0;
pub const VEHICLE_WIDTH: f64 = 1.8;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("trajectory length mismatch: ego has {ego} poses, other has {other}")]
    TrajectoryLengthMismatch { ego: usize, other: usize },
}

/// A planar pose. `speed` is present in vehicle history poses and absent in
/// route waypoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Radians in (-pi, pi].
    pub heading: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub speed: Option<f64>,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose { x, y, heading: normalize_angle(heading), speed: None }
    }

    pub fn with_speed(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        debug_assert!(speed >= 0.0);
        Pose { x, y, heading: normalize_angle(heading), speed: Some(speed) }
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Normalizes an angle to (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(std::f64::consts::TAU);
    if r > std::f64::consts::PI {
        r - std::f64::consts::TAU
    } else {
        r
    }
}

/// Expresses `p` in the frame centered at `ego` with the x-axis along
/// `ego.heading`. Speed is frame-independent and passes through.
pub fn to_ego_frame(ego: &Pose, p: &Pose) -> Pose {
    let (sin, cos) = ego.heading.sin_cos();
    let dx = p.x - ego.x;
    let dy = p.y - ego.y;
    Pose {
        x: cos * dx + sin * dy,
        y: -sin * dx + cos * dy,
        heading: normalize_angle(p.heading - ego.heading),
        speed: p.speed,
    }
}

/// Inverse of [`to_ego_frame`]: maps an ego-frame pose back to the world.
pub fn from_ego_frame(ego: &Pose, p: &Pose) -> Pose {
    let (sin, cos) = ego.heading.sin_cos();
    Pose {
        x: ego.x + cos * p.x - sin * p.y,
        y: ego.y + sin * p.x + cos * p.y,
        heading: normalize_angle(p.heading + ego.heading),
        speed: p.speed,
    }
}

/// An oriented rectangle: a vehicle footprint centred on a pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Pose,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(center: Pose, length: f64, width: f64) -> Self {
        debug_assert!(length > 0.0 && width > 0.0);
        OrientedBox { center, length, width }
    }

    /// Corner points in counter-clockwise order starting at front-left.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (sin, cos) = self.center.heading.sin_cos();
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        let local = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)];
        local.map(|(lx, ly)| {
            (
                self.center.x + cos * lx - sin * ly,
                self.center.y + sin * lx + cos * ly,
            )
        })
    }

    /// The two edge-normal unit axes (the box's local x and y directions).
    fn axes(&self) -> [(f64, f64); 2] {
        let (sin, cos) = self.center.heading.sin_cos();
        [(cos, sin), (-sin, cos)]
    }
}

fn project_onto(corners: &[(f64, f64); 4], axis: (f64, f64)) -> (f64, f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &(x, y) in corners {
        let d = x * axis.0 + y * axis.1;
        min = min.min(d);
        max = max.max(d);
    }
    (min, max)
}

/// True iff the closed rectangles intersect. Touching edges count as
/// overlap: the safety mask treats zero separation as a collision.
pub fn sat_overlap(a: &OrientedBox, b: &OrientedBox) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    for axis in a.axes().into_iter().chain(b.axes()) {
        let (min_a, max_a) = project_onto(&ca, axis);
        let (min_b, max_b) = project_onto(&cb, axis);
        if max_a < min_b || max_b < min_a {
            return false;
        }
    }
    true
}

/// True iff the two trajectories, swept with the given footprints, overlap
/// at any shared timestep. No interpolation between steps.
pub fn trajectories_collide(
    ego_traj: &[Pose],
    other_traj: &[Pose],
    ego_dims: (f64, f64),
    other_dims: (f64, f64),
) -> Result<bool, GeometryError> {
    if ego_traj.len() != other_traj.len() {
        return Err(GeometryError::TrajectoryLengthMismatch {
            ego: ego_traj.len(),
            other: other_traj.len(),
        });
    }
    for (e, o) in ego_traj.iter().zip(other_traj) {
        let be = OrientedBox::new(*e, ego_dims.0, ego_dims.1);
        let bo = OrientedBox::new(*o, other_dims.0, other_dims.1);
        if sat_overlap(&be, &bo) {
            return Ok(true);
        }
    }
    Ok(false)
}
