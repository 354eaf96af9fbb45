//! Procedural tabletop world: scenes, rendering, instruction templates,
//! scripted oracle rollouts, success labels and datasets.

pub mod attrs;
pub mod dataset;
pub mod oracle;
pub mod render;
pub mod scene;
pub mod template;

pub use attrs::{Chars, Color, Direction, Shape, Texture};
pub use dataset::{DatasetConfig, DatasetManifest, Episode, Split};
pub use oracle::{check_success, oracle_rollout, Trajectory};
pub use render::{render, Frame};
pub use scene::{gen_scene, ObjectSpec, Scene, SlotValue, TaskId, TaskSpec};
pub use template::{make_instruction, parse_instruction, Instruction};
