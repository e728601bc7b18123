//! Trajectories, scenes, windowing into training samples, normalization and
//! a synthetic traffic-pattern generator.

mod normalize;
mod scene;
mod synthetic;
mod types;
mod window;

pub use normalize::{denormalize, normalize, NormStats};
pub use scene::{format_scene, load_scene, load_scene_dir, parse_scene, write_scene, Scene};
pub use synthetic::{generate_synthetic_scene, PatternParams, Runway};
pub use types::{AgentId, AgentPast, Frame, TrainingSample, Trajectory, Waypoint, WindSample};
pub use window::{pasts_at, window_scene, WindowConfig};
