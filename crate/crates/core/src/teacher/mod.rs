//! Rationale teachers: a ground-truth oracle and an HTTP client for an external model.

mod prompt;
mod rationale;
mod remote;
pub mod stub;

pub use prompt::{describe_scene, render_prompt, TeacherPrompt};
pub use rationale::{
    oracle_annotate, parse_and_validate, parse_rationale_ids, rationale_to_text, serialize_rationale, Mention,
    PlanStep, RationaleRecord, Relation, SpatialFact, HEADERS,
};
pub use remote::{annotate_remote, RemoteConfig, ENDPOINT_ENV, TOKEN_ENV};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use crate::dataset::{DatasetError, Vocabulary};
use crate::sim::{Scene, Task};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TeacherError {
    #[error("task error: {0}")]
    Task(String),
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("hallucination: {0}")]
    Hallucination(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("teacher returned HTTP {status} after {attempts} attempts: {body}")]
    Remote { status: u16, attempts: u32, body: String },
    #[error("teacher configuration: {0}")]
    Config(String),
}

impl From<DatasetError> for TeacherError {
    fn from(e: DatasetError) -> Self {
        TeacherError::Vocab(e.to_string())
    }
}

/// Produces a rationale for one scene/task pair.
pub trait Teacher: Sync {
    fn annotate(&self, scene: &Scene, task: &Task) -> Result<RationaleRecord, TeacherError>;

    /// How many `annotate` calls may run at once.
    fn max_in_flight(&self) -> usize {
        1
    }
}

/// Deterministic teacher reading the answer off the simulator state.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleTeacher;

impl Teacher for OracleTeacher {
    fn annotate(&self, scene: &Scene, task: &Task) -> Result<RationaleRecord, TeacherError> {
        oracle_annotate(scene, task)
    }
}

/// External teacher behind [`annotate_remote`], with replies checked by [`parse_and_validate`].
#[derive(Clone, Debug)]
pub struct RemoteTeacher {
    pub config: RemoteConfig,
    pub vocab: Vocabulary,
}

impl Teacher for RemoteTeacher {
    fn annotate(&self, scene: &Scene, task: &Task) -> Result<RationaleRecord, TeacherError> {
        let prompt = render_prompt(&describe_scene(scene), &task.instruction_text());
        let raw = annotate_remote(&self.config, &prompt)?;
        parse_and_validate(&raw, scene, &self.vocab)
    }

    fn max_in_flight(&self) -> usize {
        self.config.concurrency.max(1)
    }
}

/// Annotates every job, running at most `teacher.max_in_flight()` at a time.
/// Results come back in job order.
pub fn annotate_all<T: Teacher + ?Sized>(
    teacher: &T,
    jobs: &[(&Scene, &Task)],
) -> Vec<Result<RationaleRecord, TeacherError>> {
    let workers = teacher.max_in_flight().clamp(1, jobs.len().max(1));
    if workers == 1 {
        return jobs.iter().map(|(s, t)| teacher.annotate(s, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RationaleRecord, TeacherError>>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((scene, task)) = jobs.get(i) else { break };
                let r = teacher.annotate(scene, task);
                slots.lock().expect("slot lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("slot lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}
