use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use vla_core::dataset::Vocabulary;
use vla_core::eval::EvalConfig;
use vla_core::model::ModelConfig;
use vla_core::sim::{Task, VariantMode};
use vla_core::teacher::RemoteConfig;
use vla_core::train::TrainConfig;

use crate::error::CliError;

/// Name of the resolved configuration written into every output directory.
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    #[default]
    Oracle,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSettings {
    /// Task names (`spoon_to_towel`, ...); empty means all four.
    pub tasks: Vec<String>,
    pub episodes_per_task: usize,
    pub variant_mode: VariantMode,
    pub seed: u64,
    /// Directory holding `demos.*` (input of `annotate`).
    pub demos_dir: Option<PathBuf>,
    /// Directory holding `annotated.*` (input of training commands).
    pub annotated_dir: Option<PathBuf>,
    /// Fraction of each task's episodes held out for validation.
    pub val_fraction: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            tasks: Vec::new(),
            episodes_per_task: 125,
            variant_mode: VariantMode::VisualMatching,
            seed: 0,
            demos_dir: None,
            annotated_dir: None,
            val_fraction: 0.1,
        }
    }
}

/// Architecture knobs; vocabulary-derived fields are filled in by [`RunConfig::model_config`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub max_seq_len: usize,
    pub rationale_max_len: usize,
    pub init_seed: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            dim: 64,
            mlp_ratio: 4,
            max_seq_len: 128,
            rationale_max_len: 48,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TeacherSettings {
    pub mode: TeacherMode,
    pub remote: RemoteConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    /// Values to sweep; empty means the command's default list.
    pub values: Vec<f64>,
    pub jobs: usize,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self { values: Vec::new(), jobs: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VizSettings {
    pub before: Option<PathBuf>,
    pub after: Option<PathBuf>,
    /// Heatmap pairs written per task (the report covers every episode).
    pub heatmaps_per_task: usize,
}

impl Default for VizSettings {
    fn default() -> Self {
        Self { before: None, after: None, heatmaps_per_task: 2 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// The checkpoint named in `eval_checkpoint`.
    #[default]
    Checkpoint,
    Expert,
    Random,
}

/// Fully merged configuration of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub out: PathBuf,
    pub data: DataSettings,
    pub model: ModelSettings,
    pub train: TrainConfig,
    /// Run the evaluation suite on the best checkpoint after `train`.
    pub evaluate_after_train: bool,
    pub eval: EvalConfig,
    pub eval_policy: PolicyKind,
    pub eval_checkpoint: Option<PathBuf>,
    pub teacher: TeacherSettings,
    pub sweep: SweepSettings,
    pub viz: VizSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            out: PathBuf::from("out"),
            data: DataSettings::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            evaluate_after_train: false,
            eval: EvalConfig::default(),
            eval_policy: PolicyKind::default(),
            eval_checkpoint: None,
            teacher: TeacherSettings::default(),
            sweep: SweepSettings::default(),
            viz: VizSettings::default(),
        }
    }
}

// ── merging ──────────────────────────────────────────────────────────────

/// Recursively overlays `patch` onto `base`; objects merge key by key, any
/// other value replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets the value at a dotted path such as `train.lambda_r`.
pub fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut patch = value;
    for key in path.rsplit('.') {
        let mut m = serde_json::Map::new();
        m.insert(key.to_string(), patch);
        patch = Value::Object(m);
    }
    merge(root, patch);
}

/// Defaults, then the JSON file (if any), then flag overrides. Unknown keys in
/// the file are rejected.
pub fn resolve(file: Option<&Path>, overrides: Vec<(&'static str, Value)>) -> Result<RunConfig, CliError> {
    let mut root = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading config {}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(CliError::Config(format!("config {} must be a JSON object", path.display())));
        }
        check_known_keys(&root, &patch, "")?;
        merge(&mut root, patch);
    }
    for (path, value) in overrides {
        set_path(&mut root, path, value);
    }
    serde_json::from_value(root).map_err(|e| CliError::Config(format!("invalid configuration: {e}")))
}

fn check_known_keys(defaults: &Value, patch: &Value, prefix: &str) -> Result<(), CliError> {
    let (Value::Object(d), Value::Object(p)) = (defaults, patch) else {
        return Ok(());
    };
    for (k, v) in p {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match d.get(k) {
            Some(dv) => check_known_keys(dv, v, &path)?,
            // Optional fields serialize as null or are skipped; accept those names.
            None if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            None => return Err(CliError::Config(format!("unknown config key {path:?}"))),
        }
    }
    Ok(())
}

/// Keys that never appear in the serialized defaults.
const OPTIONAL_KEYS: [&str; 1] = ["teacher.remote.token"];

impl RunConfig {
    pub fn tasks(&self) -> Result<Vec<Task>, CliError> {
        let all = Task::canonical();
        if self.data.tasks.is_empty() {
            return Ok(all);
        }
        self.data
            .tasks
            .iter()
            .map(|name| {
                all.iter().find(|t| &t.name() == name).cloned().ok_or_else(|| {
                    let known: Vec<String> = all.iter().map(Task::name).collect();
                    CliError::Config(format!("unknown task {name:?} (known: {})", known.join(", ")))
                })
            })
            .collect()
    }

    pub fn model_config(&self, vocab: &Vocabulary) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            layers: m.layers,
            heads: m.heads,
            dim: m.dim,
            mlp_ratio: m.mlp_ratio,
            max_seq_len: m.max_seq_len,
            rationale_max_len: m.rationale_max_len,
            frozen_blocks: self.train.frozen_blocks,
            freeze_embeddings: self.train.freeze_embeddings,
            ..ModelConfig::for_vocab(vocab)
        }
    }

    /// Creates the output directory and writes the resolved configuration.
    pub fn persist(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.out.join(CONFIG_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
