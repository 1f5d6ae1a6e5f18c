//! Intersection geometry, fixed vehicle paths, longitudinal kinematics and
//! collision detection.

mod layout;
mod path;
mod sim;

pub use layout::{Arm, Layout, LayoutKind};
pub use path::{make_path, wrap_angle, PathSpec, Piece, Pose, Turn};
pub use sim::{
    braking_distance, detect_collisions, free_flow_steps, free_flow_time, step_vehicle,
    step_vehicle_scaled, Phase, VehicleSpec, VehicleState, World, WorldState, STATE_FEATURES,
};
