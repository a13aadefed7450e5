use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use super::scene::{Action, Cell, EpisodeResult, Grip, ObjectKind, Scene, SceneObject, Task, DEFAULT_GRID};
use super::SimError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantMode {
    VisualMatching,
    VariantAggregation,
}

impl VariantMode {
    pub fn name(self) -> &'static str {
        match self {
            VariantMode::VisualMatching => "visual_matching",
            VariantMode::VariantAggregation => "variant_aggregation",
        }
    }
}

impl std::str::FromStr for VariantMode {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "visual_matching" | "visual-matching" => Ok(VariantMode::VisualMatching),
            "variant_aggregation" | "variant-aggregation" => Ok(VariantMode::VariantAggregation),
            other => Err(SimError::InvalidVariant(format!("unknown variant mode {other:?}"))),
        }
    }
}

/// Visual and layout perturbation settings for one episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub distractor_count: u8,
    pub lighting: f64,
    pub palette_jitter_seed: u64,
    pub layout_seed: u64,
    pub mode: VariantMode,
}

pub const MAX_DISTRACTORS: u8 = 4;

impl VariantSpec {
    pub fn visual_matching(layout_seed: u64) -> Self {
        Self {
            distractor_count: 0,
            lighting: 1.0,
            palette_jitter_seed: 0,
            layout_seed,
            mode: VariantMode::VisualMatching,
        }
    }

    pub fn variant_aggregation(
        distractor_count: u8,
        lighting: f64,
        palette_jitter_seed: u64,
        layout_seed: u64,
    ) -> Result<Self, SimError> {
        let v = Self {
            distractor_count,
            lighting,
            palette_jitter_seed,
            layout_seed,
            mode: VariantMode::VariantAggregation,
        };
        v.validate()?;
        Ok(v)
    }

    /// Draws a variant for `mode`; aggregation variants get random distractors,
    /// lighting and palette jitter.
    pub fn sample(mode: VariantMode, seed: u64) -> Self {
        match mode {
            VariantMode::VisualMatching => Self::visual_matching(seed),
            VariantMode::VariantAggregation => {
                let mut rng = SplitMix64::seed_from_u64(seed ^ 0x5eed_7a51_a7e5_0001);
                Self {
                    distractor_count: rng.gen_range(0..=MAX_DISTRACTORS),
                    lighting: rng.gen_range(0.5..=1.5),
                    palette_jitter_seed: rng.gen(),
                    layout_seed: seed,
                    mode,
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.distractor_count > MAX_DISTRACTORS {
            return Err(SimError::InvalidVariant(format!(
                "distractor_count {} exceeds {MAX_DISTRACTORS}",
                self.distractor_count
            )));
        }
        if !(0.5..=1.5).contains(&self.lighting) {
            return Err(SimError::InvalidVariant(format!("lighting {} outside [0.5, 1.5]", self.lighting)));
        }
        if self.mode == VariantMode::VisualMatching
            && (self.distractor_count != 0 || self.lighting != 1.0 || self.palette_jitter_seed != 0)
        {
            return Err(SimError::InvalidVariant(
                "visual matching requires no distractors, unit lighting and no jitter".into(),
            ));
        }
        Ok(())
    }
}

/// Per-episode step budget: `4·(grid_w + grid_h)`.
pub fn step_budget(scene: &Scene) -> u32 {
    (4 * (scene.grid_w + scene.grid_h)) as u32
}

pub fn reset(task: &Task, variant: &VariantSpec, seed: u64) -> Result<Scene, SimError> {
    reset_on_grid(DEFAULT_GRID, DEFAULT_GRID, task, variant, seed)
}

/// Places the task objects, `distractor_count` distractors and the gripper on
/// distinct cells drawn from a SplitMix64 stream keyed by `seed` and the layout seed.
pub fn reset_on_grid(
    grid_w: usize,
    grid_h: usize,
    task: &Task,
    variant: &VariantSpec,
    seed: u64,
) -> Result<Scene, SimError> {
    variant.validate()?;
    let needed = 2 + variant.distractor_count as usize + 1;
    let cells = grid_w * grid_h;
    if needed > cells {
        return Err(SimError::Capacity { needed, cells });
    }
    let mut rng = SplitMix64::seed_from_u64(seed ^ variant.layout_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let distractor_kinds: Vec<ObjectKind> = ObjectKind::ALL
        .into_iter()
        .filter(|k| *k != task.source && *k != task.destination)
        .collect();
    let mut kinds = vec![task.source, task.destination];
    for _ in 0..variant.distractor_count {
        kinds.push(*distractor_kinds.choose(&mut rng).expect("six distractor kinds"));
    }
    let mut all_cells: Vec<Cell> = (0..grid_h)
        .flat_map(|y| (0..grid_w).map(move |x| Cell::new(x, y)))
        .collect();
    let (picked, _) = all_cells.partial_shuffle(&mut rng, needed);
    let objects = kinds
        .into_iter()
        .zip(picked.iter())
        .enumerate()
        .map(|(id, (kind, &cell))| SceneObject { id, kind, cell })
        .collect();
    let gripper_cell = picked[needed - 1];
    Ok(Scene {
        grid_w,
        grid_h,
        objects,
        gripper_cell,
        held: None,
        delivered: None,
        step_count: 0,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepOutcome {
    pub scene: Scene,
    pub grasped_now: bool,
    pub success_now: bool,
}

/// Applies one action: move (clamped), then the gripper command at the new cell.
///
/// Closing on the cell of the task's source grasps it. Opening while holding
/// releases only over the destination; elsewhere the object stays in the gripper.
pub fn step(scene: &Scene, task: &Task, action: Action) -> StepOutcome {
    let mut next = scene.clone();
    let clamp = |v: usize, d: i8, extent: usize| (v as i64 + d as i64).clamp(0, extent as i64 - 1) as usize;
    next.gripper_cell = Cell::new(
        clamp(scene.gripper_cell.x, action.dx, scene.grid_w),
        clamp(scene.gripper_cell.y, action.dy, scene.grid_h),
    );
    next.step_count += 1;
    if let Some(id) = next.held {
        let cell = next.gripper_cell;
        if let Some(o) = next.objects.iter_mut().find(|o| o.id == id) {
            o.cell = cell;
        }
    }
    let mut grasped_now = false;
    let mut success_now = false;
    match (action.grip, next.held) {
        (Grip::Close, None) if next.delivered.is_none() => {
            if let Some(src) = next.find_kind(task.source) {
                if src.cell == next.gripper_cell {
                    next.held = Some(src.id);
                    grasped_now = true;
                }
            }
        }
        (Grip::Open, Some(id)) => {
            let over_destination = next
                .find_kind(task.destination)
                .is_some_and(|d| d.cell == next.gripper_cell);
            if over_destination {
                next.held = None;
                next.delivered = Some(id);
                success_now = true;
            }
        }
        _ => {}
    }
    StepOutcome {
        scene: next,
        grasped_now,
        success_now,
    }
}

fn toward(from: Cell, to: Cell) -> (i8, i8) {
    let sx = (to.x as i64 - from.x as i64).signum() as i8;
    let sy = (to.y as i64 - from.y as i64).signum() as i8;
    if sx != 0 {
        (sx, 0)
    } else {
        (0, sy)
    }
}

/// Greedy scripted expert: close the x gap first, then y; grasp on the source
/// cell, carry with the gripper closed, release on the destination cell.
pub fn expert_action(scene: &Scene, task: &Task) -> Result<Action, SimError> {
    let src = scene
        .find_kind(task.source)
        .ok_or_else(|| SimError::Task(format!("no {} in scene", task.source)))?;
    let dst = scene
        .find_kind(task.destination)
        .ok_or_else(|| SimError::Task(format!("no {} in scene", task.destination)))?;
    let here = scene.gripper_cell;
    let action = if scene.delivered.is_some() {
        Action { dx: 0, dy: 0, grip: Grip::Open }
    } else if scene.held.is_some() {
        if here == dst.cell {
            Action { dx: 0, dy: 0, grip: Grip::Open }
        } else {
            let (dx, dy) = toward(here, dst.cell);
            Action { dx, dy, grip: Grip::Close }
        }
    } else if here == src.cell {
        Action { dx: 0, dy: 0, grip: Grip::Close }
    } else {
        let (dx, dy) = toward(here, src.cell);
        Action { dx, dy, grip: Grip::Open }
    };
    Ok(action)
}

/// Expert bound: Manhattan distance to the source, one grasp, distance to the
/// destination, one release.
pub fn expert_step_bound(scene: &Scene, task: &Task) -> Option<u32> {
    let src = scene.find_kind(task.source)?.cell;
    let dst = scene.find_kind(task.destination)?.cell;
    let here = scene.gripper_cell;
    let d = |a: Cell, b: Cell| (a.x.abs_diff(b.x) + a.y.abs_diff(b.y)) as u32;
    Some(d(here, src) + 1 + d(src, dst) + 1)
}

/// One step of a recorded episode: the scene the policy saw and what it chose.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub scene: Scene,
    pub action: Action,
}

/// Runs `policy` from `scene` until success or `max_steps`.
pub fn run_episode<E, F>(
    scene: Scene,
    task: &Task,
    max_steps: u32,
    mut policy: F,
) -> Result<(EpisodeResult, Vec<Transition>), E>
where
    F: FnMut(&Scene) -> Result<Action, E>,
{
    let mut scene = scene;
    let mut result = EpisodeResult {
        grasped: false,
        success: false,
        steps_used: 0,
    };
    let mut trajectory = Vec::new();
    while result.steps_used < max_steps {
        let action = policy(&scene)?;
        let outcome = step(&scene, task, action);
        trajectory.push(Transition { scene, action });
        result.steps_used += 1;
        result.grasped |= outcome.grasped_now;
        scene = outcome.scene;
        if outcome.success_now {
            result.success = true;
            break;
        }
    }
    Ok((result, trajectory))
}
