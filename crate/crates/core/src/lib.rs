//! Controllable trajectory generation with frame-level meta-actions.
//!
//! Everything here is pure computation over `alloc` collections: CTRA
//! kinematics and the discrete action grid, rolling-horizon control-label
//! extraction, rule-based meta-action labeling, rotary position embeddings,
//! a small transformer policy with meta-action prediction and injection,
//! closed-loop rollout sessions and decision-following metrics. File
//! formats, the CLI and the session service live in the `metaction` crate.
#![no_std]

extern crate alloc;

mod math;

pub mod control_fit;
pub mod geometry;
pub mod kinematics;
pub mod labeler;
pub mod metrics;
pub mod policy;
pub mod rope;
pub mod scene;
pub mod sim;
pub mod synth;
pub mod tensor;

pub use geometry::{FrenetProjection, KinematicWindow, MapPolyline, Point2, PolylineKind, RoadMap};
pub use kinematics::{ActionGrid, AgentState, ControlAction, Trajectory};
pub use labeler::{LabelConfig, LabelThresholds, MetaAction};
pub use scene::{Agent, AgentKind, Extents, Scene};
