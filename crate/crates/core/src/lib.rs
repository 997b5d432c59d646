//! Language-grounded bimanual kitchen pipeline.
//!
//! A request retrieves a recipe, the scene is checked for its ingredients,
//! a planner model writes a step plan, a code model turns it into calls of a
//! ten-function motion API, and the calls run in a kitchen simulator.

pub mod action_lang;
pub mod eval;
pub mod gateway;
pub mod geometry;
pub mod kitchen;
pub mod orchestrator;
pub mod perception;
pub mod rag;
pub mod scene;

pub use action_lang::{
    parse_plan, parse_program, serialize_program, ActionProgram, ApiCall, ApiFunction, PlanDocument,
};
pub use gateway::{Gateway, Transcript};
pub use geometry::{pixel_to_world, world_to_pixel, CameraModel, PixelPoint, WorldPoint};
pub use kitchen::{execute_program, ManipulatorId, WorldState};
pub use orchestrator::{Outcome, Pipeline, PipelineConfig, SessionTrace};
pub use rag::{Recipe, RecipeStore};
pub use scene::Scene;
