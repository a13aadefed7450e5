//! Closed-loop evaluation, success tables, attention alignment and plots.

mod alignment;
mod viz;

pub use alignment::{
    alignment_score, compare_alignment, episode_alignment, mean_action_attention, relevant_cells, AlignmentReport,
    AlignmentScore, EpisodeAlignment, PairedAlignment,
};
pub use viz::{emit_curves, emit_heatmap, read_heatmap_sidecar, CurvePoint, HeatmapSidecar};

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::to_canonical_json;
use crate::dataset::{episode_seed, Vocabulary};
use crate::model::{predict_actions, Checkpoint, ModelConfig, ModelError, ParamStore};
use crate::sim::{
    expert_action, render, reset, step, Action, EpisodeResult, Scene, SimError, Task, VariantMode, VariantSpec,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("incompatible inputs: {0}")]
    Compatibility(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("plot error: {0}")]
    Plot(String),
    #[error("evaluation config: {0}")]
    Config(String),
    #[error("episode {episode} of {task}: {source}")]
    Episode {
        task: String,
        episode: usize,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Salt separating evaluation layouts from training layouts drawn with the same seed.
pub const EVAL_SEED_SALT: u64 = 0x00e7_a15e_ed00_0001;

// ── policies ─────────────────────────────────────────────────────────────

/// One active episode handed to a policy.
pub struct PolicyQuery<'a> {
    /// Stable episode index within the current evaluation.
    pub slot: usize,
    pub scene: &'a Scene,
    pub task: &'a Task,
    pub variant: &'a VariantSpec,
}

pub trait Policy {
    /// Chooses one action per query, in order.
    fn act(&mut self, batch: &[PolicyQuery<'_>]) -> Result<Vec<Action>, EvalError>;
}

/// The scripted expert.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn act(&mut self, batch: &[PolicyQuery<'_>]) -> Result<Vec<Action>, EvalError> {
        batch.iter().map(|q| Ok(expert_action(q.scene, q.task)?)).collect()
    }
}

/// Uniformly random actions from a per-episode stream keyed by `seed` and the slot.
#[derive(Clone, Debug)]
pub struct RandomPolicy {
    seed: u64,
    streams: HashMap<usize, SplitMix64>,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self { seed, streams: HashMap::new() }
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, batch: &[PolicyQuery<'_>]) -> Result<Vec<Action>, EvalError> {
        Ok(batch
            .iter()
            .map(|q| {
                let seed = self.seed;
                let rng = self
                    .streams
                    .entry(q.slot)
                    .or_insert_with(|| SplitMix64::seed_from_u64(seed ^ (q.slot as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
                Action::from_index(rng.gen_range(0..crate::sim::ACTION_COUNT)).expect("index in range")
            })
            .collect())
    }
}

/// Greedy actions from the model, batched across episodes.
pub struct ModelPolicy<'a> {
    pub params: &'a ParamStore,
    pub config: &'a ModelConfig,
    pub vocab: &'a Vocabulary,
    /// Largest forward batch.
    pub chunk: usize,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(params: &'a ParamStore, config: &'a ModelConfig, vocab: &'a Vocabulary) -> Self {
        Self { params, config, vocab, chunk: 64 }
    }

    /// Wraps a checkpoint, rejecting it when it was trained on another vocabulary.
    pub fn from_checkpoint(ckpt: &'a Checkpoint, vocab: &'a Vocabulary) -> Result<Self, EvalError> {
        if ckpt.vocab_hash != vocab.hash() {
            return Err(EvalError::Compatibility("checkpoint vocabulary hash does not match".into()));
        }
        if ckpt.config.vocab_size != vocab.len() {
            return Err(EvalError::Compatibility(format!(
                "checkpoint expects {} tokens, vocabulary has {}",
                ckpt.config.vocab_size,
                vocab.len()
            )));
        }
        Ok(Self::new(&ckpt.params, &ckpt.config, vocab))
    }
}

impl Policy for ModelPolicy<'_> {
    fn act(&mut self, batch: &[PolicyQuery<'_>]) -> Result<Vec<Action>, EvalError> {
        let images: Vec<_> = batch.iter().map(|q| render(q.scene, q.variant)).collect();
        let instrs = batch
            .iter()
            .map(|q| self.vocab.encode_words(&q.task.instruction))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| EvalError::Compatibility(e.to_string()))?;
        let mut actions = Vec::with_capacity(batch.len());
        for start in (0..batch.len()).step_by(self.chunk.max(1)) {
            let end = (start + self.chunk.max(1)).min(batch.len());
            let items: Vec<_> = (start..end).map(|i| (&images[i], instrs[i].as_slice())).collect();
            for id in predict_actions(self.params, self.config, &items)? {
                actions.push(self.vocab.action_of(id).expect("prediction lies in the action block"));
            }
        }
        Ok(actions)
    }
}

// ── rollouts ─────────────────────────────────────────────────────────────

/// Everything needed to reproduce one evaluation episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub task: Task,
    pub variant: VariantSpec,
    pub seed: u64,
    pub episode: usize,
}

impl EpisodeSpec {
    pub fn initial_scene(&self) -> Result<Scene, SimError> {
        reset(&self.task, &self.variant, self.seed)
    }
}

/// Per-episode log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task: String,
    pub mode: VariantMode,
    pub episode: usize,
    pub seed: u64,
    pub scene_hash: String,
    pub grasped: bool,
    pub success: bool,
    pub steps_used: u32,
}

/// A ready-to-run episode: its initial scene plus identifying fields.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeStart {
    pub task: Task,
    pub variant: VariantSpec,
    pub scene: Scene,
    pub episode: usize,
    pub seed: u64,
}

/// Runs every episode in lockstep so the policy sees one batch per timestep.
pub fn run_episodes<P: Policy + ?Sized>(
    policy: &mut P,
    specs: &[EpisodeSpec],
    max_steps: u32,
) -> Result<Vec<EpisodeRecord>, EvalError> {
    let starts = specs
        .iter()
        .map(|s| {
            let scene = s.initial_scene().map_err(|e| episode_error(s, e.into()))?;
            Ok(EpisodeStart { task: s.task.clone(), variant: s.variant, scene, episode: s.episode, seed: s.seed })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    run_from(policy, &starts, max_steps)
}

/// Lockstep rollouts from explicit initial scenes.
pub fn run_from<P: Policy + ?Sized>(
    policy: &mut P,
    starts: &[EpisodeStart],
    max_steps: u32,
) -> Result<Vec<EpisodeRecord>, EvalError> {
    let mut scenes: Vec<Scene> = starts.iter().map(|s| s.scene.clone()).collect();
    let mut records: Vec<EpisodeRecord> = starts
        .iter()
        .map(|s| EpisodeRecord {
            task: s.task.name(),
            mode: s.variant.mode,
            episode: s.episode,
            seed: s.seed,
            scene_hash: s.scene.hash_hex(),
            grasped: false,
            success: false,
            steps_used: 0,
        })
        .collect();
    let mut active: Vec<usize> = (0..starts.len()).collect();
    for _ in 0..max_steps {
        if active.is_empty() {
            break;
        }
        let queries: Vec<PolicyQuery> = active
            .iter()
            .map(|&i| PolicyQuery {
                slot: i,
                scene: &scenes[i],
                task: &starts[i].task,
                variant: &starts[i].variant,
            })
            .collect();
        let actions = policy.act(&queries)?;
        if actions.len() != active.len() {
            return Err(EvalError::Compatibility("policy returned the wrong number of actions".into()));
        }
        for (&i, action) in active.iter().zip(actions) {
            let outcome = step(&scenes[i], &starts[i].task, action);
            let r = &mut records[i];
            r.steps_used += 1;
            r.grasped |= outcome.grasped_now;
            r.success |= outcome.success_now;
            scenes[i] = outcome.scene;
        }
        active.retain(|&i| !records[i].success);
    }
    Ok(records)
}

fn episode_error(spec: &EpisodeSpec, source: EvalError) -> EvalError {
    EvalError::Episode {
        task: spec.task.name(),
        episode: spec.episode,
        source: Box::new(source),
    }
}

/// One closed-loop episode.
pub fn rollout<P: Policy + ?Sized>(
    policy: &mut P,
    task: &Task,
    variant: &VariantSpec,
    seed: u64,
    max_steps: u32,
) -> Result<EpisodeResult, EvalError> {
    let spec = EpisodeSpec { task: task.clone(), variant: *variant, seed, episode: 0 };
    let r = run_episodes(policy, &[spec], max_steps)?.remove(0);
    Ok(EpisodeResult { grasped: r.grasped, success: r.success, steps_used: r.steps_used })
}

// ── suites and tables ────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes_per_task: usize,
    pub modes: Vec<VariantMode>,
    pub max_steps: u32,
    pub seed_base: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes_per_task: 50,
            modes: vec![VariantMode::VisualMatching],
            max_steps: 64,
            seed_base: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.episodes_per_task == 0 {
            return Err(EvalError::Config("episodes_per_task must be at least 1".into()));
        }
        if self.modes.is_empty() {
            return Err(EvalError::Config("at least one variant mode is required".into()));
        }
        Ok(())
    }

    /// Episode specs for every mode × task × episode. Layout seeds are salted so
    /// they differ from the training generator's seeds.
    pub fn specs(&self, tasks: &[Task], mode: VariantMode) -> Vec<EpisodeSpec> {
        let mut out = Vec::new();
        for (ti, task) in tasks.iter().enumerate() {
            for e in 0..self.episodes_per_task {
                let seed = episode_seed(self.seed_base ^ EVAL_SEED_SALT, ti, e);
                out.push(EpisodeSpec {
                    task: task.clone(),
                    variant: VariantSpec::sample(mode, seed),
                    seed,
                    episode: ti * self.episodes_per_task + e,
                });
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: String,
    pub episodes: usize,
    pub grasp_rate: f64,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessTable {
    pub mode: VariantMode,
    pub rows: Vec<TaskRow>,
    pub average_grasp: f64,
    pub average_success: f64,
}

impl SuccessTable {
    /// Aggregates episode logs of one mode; tasks keep first-appearance order.
    pub fn from_records(mode: VariantMode, records: &[EpisodeRecord]) -> Self {
        let mut order: Vec<String> = Vec::new();
        let mut tally: HashMap<String, (usize, usize, usize)> = HashMap::new();
        for r in records.iter().filter(|r| r.mode == mode) {
            if !tally.contains_key(&r.task) {
                order.push(r.task.clone());
            }
            let t = tally.entry(r.task.clone()).or_default();
            t.0 += 1;
            t.1 += usize::from(r.grasped);
            t.2 += usize::from(r.success);
        }
        let rows: Vec<TaskRow> = order
            .into_iter()
            .map(|task| {
                let (n, g, s) = tally[&task];
                TaskRow {
                    task,
                    episodes: n,
                    grasp_rate: g as f64 / n as f64,
                    success_rate: s as f64 / n as f64,
                }
            })
            .collect();
        let mean = |f: fn(&TaskRow) -> f64| {
            if rows.is_empty() {
                0.0
            } else {
                rows.iter().map(f).sum::<f64>() / rows.len() as f64
            }
        };
        let (average_grasp, average_success) = (mean(|r| r.grasp_rate), mean(|r| r.success_rate));
        Self { mode, rows, average_grasp, average_success }
    }

    /// `mode,task,grasp,success,episodes` rows followed by an `average` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,task,grasp,success,episodes\n");
        for r in &self.rows {
            s += &format!("{},{},{},{},{}\n", self.mode.name(), r.task, r.grasp_rate, r.success_rate, r.episodes);
        }
        let n: usize = self.rows.iter().map(|r| r.episodes).sum();
        s += &format!("{},average,{},{},{}\n", self.mode.name(), self.average_grasp, self.average_success, n);
        s
    }
}

/// Runs the configured suite; returns one table per mode and all episode logs.
pub fn eval_suite<P: Policy + ?Sized>(
    policy: &mut P,
    tasks: &[Task],
    config: &EvalConfig,
) -> Result<(Vec<SuccessTable>, Vec<EpisodeRecord>), EvalError> {
    config.validate()?;
    let mut tables = Vec::new();
    let mut all = Vec::new();
    for &mode in &config.modes {
        let records = run_episodes(policy, &config.specs(tasks, mode), config.max_steps)?;
        tables.push(SuccessTable::from_records(mode, &records));
        all.extend(records);
    }
    Ok((tables, all))
}

pub fn write_episode_log(path: &Path, records: &[EpisodeRecord]) -> Result<(), EvalError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(out, "{}", to_canonical_json(r)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_episode_log(path: &Path) -> Result<Vec<EpisodeRecord>, EvalError> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
