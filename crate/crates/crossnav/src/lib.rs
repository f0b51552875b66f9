//! Hierarchical navigation through unsignalized intersections.
//!
//! A high-level decision-maker picks a subgoal from candidates sampled along
//! the ego vehicle's feasible routes once every `T_M` simulation steps; a
//! low-level motion-planner executes discrete pose deltas at 10 Hz to track
//! the chosen subgoal. A goal-conditioned trajectory predictor rolls each
//! candidate subgoal forward and masks out the ones whose predicted futures
//! collide with predicted surrounding traffic.

pub mod agents;
pub mod autodiff;
pub mod cli;
pub mod encoding;
pub mod gccp;
pub mod geometry;
pub mod nets;
pub mod predictor;
pub mod roadnet;
pub mod sim;
pub mod trainer;

/// Shared problem constants. Network sizes and traffic levels are
/// configurable; these shapes are not.
pub mod consts {
    /// Simulation step, seconds.
    pub const DT: f64 = 0.1;
    /// History steps encoded per vehicle.
    pub const T_H: usize = 10;
    /// Prediction horizon, steps.
    pub const T_F: usize = 10;
    /// Steps between consecutive subgoal decisions.
    pub const T_M: usize = 10;
    /// Surrounding vehicle slots in the encoded state.
    pub const N_S: usize = 5;
    /// Candidate routes per vehicle.
    pub const N_R: usize = 3;
    /// Waypoints per route, spaced 1 m apart.
    pub const N_P: usize = 50;
    /// Subgoal candidates per decision.
    pub const N_SUBGOALS: usize = 12;
    /// Subgoal sampling range along each route, metres.
    pub const SUBGOAL_RANGE: f64 = 20.0;
    /// Spacing between subgoal samples along a route, metres.
    pub const SUBGOAL_SPACING: f64 = 5.0;
    /// Side length of the drivable-area raster, pixels.
    pub const RASTER_PX: usize = 64;
    /// Side length of the area covered by the raster, metres.
    pub const RASTER_SPAN: f64 = 50.0;
    /// Metres per raster pixel.
    pub const RASTER_RES: f64 = RASTER_SPAN / RASTER_PX as f64;
    /// Mask value applied to the logit of an unsafe subgoal.
    pub const MASK_UNSAFE: f64 = -1e8;
    /// Additive bias applied to masked attention keys.
    pub const ATTN_MASK: f64 = -1e9;
    /// Discrete motion-planner actions.
    pub const N_ACTIONS: usize = 6;
}

pub use geometry::{OrientedBox, Pose};
