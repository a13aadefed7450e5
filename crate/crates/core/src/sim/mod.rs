//! Deterministic tabletop gridworld: scenes, tasks, an expert, and rendering.

mod env;
mod render;
mod scene;

pub use env::{
    expert_action, expert_step_bound, reset, reset_on_grid, run_episode, step, step_budget, StepOutcome,
    Transition, VariantMode, VariantSpec, MAX_DISTRACTORS,
};
pub use render::{base_color, render, BACKGROUND, CELL_PX, GRIPPER};
pub use scene::{
    Action, Cell, EpisodeResult, Grip, ObjectKind, Scene, SceneObject, Task, ACTION_COUNT, DEFAULT_GRID,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("capacity error: {needed} placements requested on a grid of {cells} cells")]
    Capacity { needed: usize, cells: usize },
    #[error("task error: {0}")]
    Task(String),
    #[error("invalid variant: {0}")]
    InvalidVariant(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

#[cfg(test)]
mod props;
