use super::rationale::HEADERS;
use crate::sim::Scene;

/// Structured prompt sent to an external teacher.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TeacherPrompt {
    pub text: String,
}

const QUESTIONS: [&str; 4] = [
    "Which task objects do you see, and in which cells? Answer as `<object> at (<x>, <y>)` items separated by `;`.",
    "What is the robot asked to do? Restate the instruction in its own words from the vocabulary.",
    "Where is the object to move relative to its target? Answer as `<object> <left_of|right_of|above|below|on|at> <object>` items separated by `;`.",
    "Which steps accomplish the task? Answer as `move to <object>`, `grasp <object>`, `release <object>` items separated by `;`.",
];

/// Fills the four-question template. Output depends only on the inputs.
pub fn render_prompt(scene_description: &str, instruction: &str) -> TeacherPrompt {
    let mut text = String::new();
    text.push_str("You are explaining a robot arm's behaviour on an 8x8 tabletop grid.\n");
    text.push_str("x grows to the right and y grows downward.\n\n");
    text.push_str(&format!("Scene: {scene_description}\n"));
    text.push_str(&format!("Instruction: {instruction}\n\n"));
    text.push_str("Reason step by step. Reply with exactly four lines, each starting with its header:\n");
    for (header, question) in HEADERS.iter().zip(QUESTIONS) {
        text.push_str(&format!("{header}: {question}\n"));
    }
    TeacherPrompt { text }
}

/// Plain-text scene summary used in prompts.
pub fn describe_scene(scene: &Scene) -> String {
    let objects: Vec<String> = scene
        .objects
        .iter()
        .map(|o| format!("{} at ({}, {})", o.kind, o.cell.x, o.cell.y))
        .collect();
    format!(
        "{}x{} grid; gripper at ({}, {}); objects: {}",
        scene.grid_w,
        scene.grid_h,
        scene.gripper_cell.x,
        scene.gripper_cell.y,
        objects.join("; ")
    )
}
