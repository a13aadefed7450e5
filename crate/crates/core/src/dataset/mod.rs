//! Vocabulary, demonstration generation, rationale enrichment, persistence and sampling.

pub mod vocab;

pub use vocab::{TokenId, Vocabulary};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::to_canonical_json;
use crate::sim::{
    expert_action, render, reset, run_episode, step_budget, Scene, SimError, Task, VariantMode, VariantSpec,
};
use crate::autodiff::Tensor;
use crate::teacher::{annotate_all, serialize_rationale, Teacher};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed record on line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("size error: batch of {batch} from {available} steps")]
    Size { batch: usize, available: usize },
    #[error("{} of {total} steps failed to annotate (first failures at {:?}): {first_error}", failed.len(), &failed[..failed.len().min(8)])]
    PartialOutput {
        failed: Vec<usize>,
        total: usize,
        first_error: String,
    },
    #[error("simulator error: {0}")]
    Sim(#[from] SimError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

// ── records ──────────────────────────────────────────────────────────────

/// One expert timestep: the scene before acting and the expert's action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoStep {
    pub episode: u32,
    pub t: u32,
    pub task: Task,
    pub scene: Scene,
    pub variant: VariantSpec,
    pub instruction_ids: Vec<TokenId>,
    pub action_id: TokenId,
}

impl DemoStep {
    /// Re-renders the observation.
    pub fn observation(&self) -> Tensor {
        render(&self.scene, &self.variant)
    }
}

/// A demonstration step enriched with a tokenized rationale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedStep {
    #[serde(flatten)]
    pub demo: DemoStep,
    pub rationale_ids: Vec<TokenId>,
}

/// Behaviour shared by raw and annotated step records.
pub trait StepRecord: Clone + Serialize + DeserializeOwned {
    const ANNOTATED: bool;

    fn demo(&self) -> &DemoStep;

    fn validate(&self, vocab: &Vocabulary) -> Result<(), DatasetError> {
        let d = self.demo();
        for &id in &d.instruction_ids {
            vocab.token(id)?;
        }
        if vocab.action_of(d.action_id).is_none() {
            return Err(DatasetError::Vocab(format!("action id {} outside the action block", d.action_id)));
        }
        Ok(())
    }
}

impl StepRecord for DemoStep {
    const ANNOTATED: bool = false;

    fn demo(&self) -> &DemoStep {
        self
    }
}

impl StepRecord for AnnotatedStep {
    const ANNOTATED: bool = true;

    fn demo(&self) -> &DemoStep {
        &self.demo
    }

    fn validate(&self, vocab: &Vocabulary) -> Result<(), DatasetError> {
        for &id in &self.rationale_ids {
            vocab.token(id)?;
        }
        self.demo.validate(vocab)
    }
}

// ── datasets ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub vocab_hash: String,
    pub generator_seed: u64,
    /// Step counts keyed by task name.
    pub counts_per_task: BTreeMap<String, usize>,
    pub total_steps: usize,
    pub episodes: usize,
    pub annotated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    pub manifest: Manifest,
    pub steps: Vec<S>,
}

pub type DemoDataset = Dataset<DemoStep>;
pub type AnnotatedDataset = Dataset<AnnotatedStep>;

impl<S: StepRecord> Dataset<S> {
    /// Builds a dataset whose manifest is derived from `steps`.
    pub fn from_steps(steps: Vec<S>, vocab_hash: String, generator_seed: u64) -> Self {
        let manifest = Self::describe(&steps, vocab_hash, generator_seed);
        Self { manifest, steps }
    }

    fn describe(steps: &[S], vocab_hash: String, generator_seed: u64) -> Manifest {
        let mut counts_per_task = BTreeMap::new();
        let mut episodes = std::collections::BTreeSet::new();
        for s in steps {
            *counts_per_task.entry(s.demo().task.name()).or_insert(0) += 1;
            episodes.insert(s.demo().episode);
        }
        Manifest {
            format_version: FORMAT_VERSION,
            vocab_hash,
            generator_seed,
            counts_per_task,
            total_steps: steps.len(),
            episodes: episodes.len(),
            annotated: S::ANNOTATED,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Checks the manifest against the records and every id against `vocab`.
    pub fn check(&self, vocab: &Vocabulary) -> Result<(), DatasetError> {
        if self.manifest.format_version != FORMAT_VERSION {
            return Err(DatasetError::Version {
                found: self.manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        if self.manifest.vocab_hash != vocab.hash() {
            return Err(DatasetError::Consistency("manifest vocab hash differs from the vocabulary".into()));
        }
        if self.manifest.annotated != S::ANNOTATED {
            return Err(DatasetError::Consistency(format!(
                "manifest says annotated={}, loader expects {}",
                self.manifest.annotated,
                S::ANNOTATED
            )));
        }
        let expected = Self::describe(&self.steps, self.manifest.vocab_hash.clone(), self.manifest.generator_seed);
        if expected != self.manifest {
            return Err(DatasetError::Consistency(format!(
                "manifest counts {:?} / {} steps / {} episodes do not match records {:?} / {} / {}",
                self.manifest.counts_per_task,
                self.manifest.total_steps,
                self.manifest.episodes,
                expected.counts_per_task,
                expected.total_steps,
                expected.episodes
            )));
        }
        self.steps.iter().try_for_each(|s| s.validate(vocab))
    }

    /// Distinct episode ids in first-appearance order.
    pub fn episode_ids(&self) -> Vec<u32> {
        let mut seen = std::collections::HashSet::new();
        self.steps
            .iter()
            .map(|s| s.demo().episode)
            .filter(|e| seen.insert(*e))
            .collect()
    }

    /// Splits by episode: the last `ceil(fraction · episodes)` episodes of each
    /// task (at least one when `fraction > 0`) go to the second half.
    pub fn split_by_episode(&self, fraction: f64) -> (Self, Self) {
        let mut per_task: BTreeMap<String, Vec<u32>> = BTreeMap::new();
        for s in &self.steps {
            let eps = per_task.entry(s.demo().task.name()).or_default();
            if !eps.contains(&s.demo().episode) {
                eps.push(s.demo().episode);
            }
        }
        let mut held_out = std::collections::HashSet::<u32>::new();
        for eps in per_task.values() {
            let k = ((fraction.clamp(0.0, 1.0) * eps.len() as f64).ceil() as usize).min(eps.len());
            held_out.extend(&eps[eps.len() - k..]);
        }
        let (val, train): (Vec<S>, Vec<S>) = self
            .steps
            .iter()
            .cloned()
            .partition(|s| held_out.contains(&s.demo().episode));
        let hash = self.manifest.vocab_hash.clone();
        let seed = self.manifest.generator_seed;
        (Self::from_steps(train, hash.clone(), seed), Self::from_steps(val, hash, seed))
    }

    /// Writes `<name>.manifest.json` and `<name>.records.jsonl` under `dir`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<(), DatasetError> {
        std::fs::create_dir_all(dir)?;
        let (manifest_path, records_path) = paths(dir, name);
        std::fs::write(&manifest_path, serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        let mut out = BufWriter::new(File::create(&records_path)?);
        for s in &self.steps {
            out.write_all(to_canonical_json(s)?.as_bytes())?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a dataset written by [`Dataset::save`] and checks it against `vocab`.
    pub fn load(dir: &Path, name: &str, vocab: &Vocabulary) -> Result<Self, DatasetError> {
        let (manifest_path, records_path) = paths(dir, name);
        let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != FORMAT_VERSION {
            return Err(DatasetError::Version {
                found,
                expected: FORMAT_VERSION,
            });
        }
        let manifest: Manifest = serde_json::from_value(raw)?;
        let reader = BufReader::new(File::open(&records_path)?);
        let mut steps = Vec::with_capacity(manifest.total_steps);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let step = serde_json::from_str(&line).map_err(|e| DatasetError::MalformedLine {
                line: i + 1,
                message: e.to_string(),
            })?;
            steps.push(step);
        }
        let ds = Self { manifest, steps };
        ds.check(vocab)?;
        Ok(ds)
    }
}

fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{name}.manifest.json")),
        dir.join(format!("{name}.records.jsonl")),
    )
}

impl AnnotatedDataset {
    /// Drops the rationales, recovering the underlying demonstrations.
    pub fn strip(&self) -> DemoDataset {
        let steps = self.steps.iter().map(|s| s.demo.clone()).collect();
        DemoDataset::from_steps(steps, self.manifest.vocab_hash.clone(), self.manifest.generator_seed)
    }
}

// ── generation ───────────────────────────────────────────────────────────

/// Seed for episode `episode` of task `task_index` under generator `seed`.
pub fn episode_seed(seed: u64, task_index: usize, episode: usize) -> u64 {
    let key = ((task_index as u64) << 32) ^ episode as u64;
    SplitMix64::seed_from_u64(seed ^ key.wrapping_mul(0x9e37_79b9_7f4a_7c15)).next_u64()
}

/// Rolls out the scripted expert for `episodes_per_task` episodes of each task.
/// Episode ids are `task_index · episodes_per_task + episode`.
pub fn generate_demos(
    tasks: &[Task],
    mode: VariantMode,
    episodes_per_task: usize,
    seed: u64,
    vocab: &Vocabulary,
) -> Result<DemoDataset, DatasetError> {
    if episodes_per_task == 0 {
        return Err(DatasetError::Consistency("episodes_per_task must be at least 1".into()));
    }
    let mut steps = Vec::new();
    for (ti, task) in tasks.iter().enumerate() {
        let instruction_ids = vocab.encode_words(&task.instruction)?;
        for e in 0..episodes_per_task {
            let es = episode_seed(seed, ti, e);
            let variant = VariantSpec::sample(mode, es);
            let scene = reset(task, &variant, es)?;
            let budget = step_budget(&scene);
            let (result, trajectory) = run_episode(scene, task, budget, |s| expert_action(s, task))?;
            if !result.success {
                return Err(DatasetError::Consistency(format!(
                    "expert failed episode {e} of {}",
                    task.name()
                )));
            }
            let episode = (ti * episodes_per_task + e) as u32;
            steps.extend(trajectory.into_iter().enumerate().map(|(t, tr)| DemoStep {
                episode,
                t: t as u32,
                task: task.clone(),
                scene: tr.scene,
                variant,
                instruction_ids: instruction_ids.clone(),
                action_id: vocab.action_id(tr.action),
            }));
        }
    }
    Ok(DemoDataset::from_steps(steps, vocab.hash(), seed))
}

/// Asks `teacher` for a rationale for every step. Any failure aborts with the
/// full list of failed step indices.
pub fn augment<T: Teacher + ?Sized>(
    demos: &DemoDataset,
    teacher: &T,
    vocab: &Vocabulary,
) -> Result<AnnotatedDataset, DatasetError> {
    let jobs: Vec<(&Scene, &Task)> = demos.steps.iter().map(|s| (&s.scene, &s.task)).collect();
    let results = annotate_all(teacher, &jobs);
    let mut failed = Vec::new();
    let mut first_error = None;
    let mut steps = Vec::with_capacity(demos.len());
    for (i, (demo, r)) in demos.steps.iter().zip(results).enumerate() {
        match r.and_then(|rec| serialize_rationale(&rec, vocab)) {
            Ok(rationale_ids) => steps.push(AnnotatedStep {
                demo: demo.clone(),
                rationale_ids,
            }),
            Err(e) => {
                log::warn!("step {i}: {e}");
                first_error.get_or_insert_with(|| format!("step {i}: {e}"));
                failed.push(i);
            }
        }
    }
    if !failed.is_empty() {
        return Err(DatasetError::PartialOutput {
            total: demos.len(),
            failed,
            first_error: first_error.unwrap_or_default(),
        });
    }
    Ok(AnnotatedDataset {
        manifest: Manifest {
            annotated: true,
            ..demos.manifest.clone()
        },
        steps,
    })
}

// ── sampling ─────────────────────────────────────────────────────────────

/// `batch` distinct indices drawn uniformly from `0..len`.
pub fn sample_indices<R: rand::Rng + ?Sized>(len: usize, batch: usize, rng: &mut R) -> Result<Vec<usize>, DatasetError> {
    if batch > len {
        return Err(DatasetError::Size { batch, available: len });
    }
    Ok(rand::seq::index::sample(rng, len, batch).into_vec())
}

pub fn sample_minibatch<'a, S, R: rand::Rng + ?Sized>(
    data: &'a Dataset<S>,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<&'a S>, DatasetError> {
    Ok(sample_indices(data.steps.len(), batch, rng)?
        .into_iter()
        .map(|i| &data.steps[i])
        .collect())
}
