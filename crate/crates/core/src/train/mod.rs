//! Joint action/reasoning fine-tuning with selective freezing, checkpoints and sweeps.

mod optim;
mod sweep;

pub use optim::{clip_global_norm, OptimizerKind, Optimizer};
pub use sweep::{sweep, SweepAxis, SweepReport, SweepRun};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::dataset::{sample_indices, AnnotatedDataset, AnnotatedStep, DatasetError, TokenId, Vocabulary};
use crate::eval::{run_from, EpisodeStart, EvalError, ModelPolicy};
use crate::model::{forward, save_checkpoint, Checkpoint, ForwardOutput, ModelConfig, ModelError, ModelInput, ParamStore};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("divergence at step {step}: {message}")]
    Divergence { step: usize, message: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

// ── configuration ────────────────────────────────────────────────────────

/// How token losses are reduced within a sequence before the batch mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Mean over the sequence's target positions.
    #[default]
    Mean,
    /// Sum over the sequence's target positions.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_r: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Steps between validation rollouts.
    pub eval_interval: usize,
    /// Validations without a 0.5-point gain before stopping.
    pub patience: usize,
    /// Steps between metrics rows.
    pub log_interval: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Lowest transformer blocks kept frozen.
    pub frozen_blocks: usize,
    pub freeze_embeddings: bool,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub reduction: Reduction,
    /// Drops the reasoning term from the graph regardless of `lambda_r`.
    pub action_only: bool,
    /// Fills the `wall_ms` column; off by default so metrics stay byte-reproducible.
    pub record_wall_time: bool,
    /// Step budget of each validation rollout.
    pub val_max_steps: u32,
    /// Upper bound on validation episodes per task.
    pub val_episodes_per_task: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_r: 0.3,
            lr: 3e-4,
            batch_size: 16,
            max_steps: 5000,
            eval_interval: 250,
            patience: 4,
            log_interval: 10,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            frozen_blocks: 2,
            freeze_embeddings: false,
            clip_norm: Some(1.0),
            reduction: Reduction::Mean,
            action_only: false,
            record_wall_time: false,
            val_max_steps: 64,
            val_episodes_per_task: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lambda_r >= 0.0) || !self.lambda_r.is_finite() {
            return bad(format!("lambda_r must be a finite non-negative number, got {}", self.lambda_r));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.eval_interval == 0 || self.log_interval == 0 {
            return bad("eval_interval and log_interval must be at least 1".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// Whether the reasoning term enters the training graph.
    pub fn uses_reasoning(&self) -> bool {
        !self.action_only && self.lambda_r > 0.0
    }
}

// ── losses ───────────────────────────────────────────────────────────────

/// Mean NLL of the target action token at each sequence's `<ACT>` row.
pub fn action_nll(out: &mut ForwardOutput, action_ids: &[TokenId]) -> Result<Var, TrainError> {
    let logits = out
        .action_logits
        .ok_or_else(|| TrainError::DegenerateBatch("forward pass has no action row".into()))?;
    if action_ids.len() != out.layout.batch {
        return Err(TrainError::DegenerateBatch(format!(
            "{} action targets for a batch of {}",
            action_ids.len(),
            out.layout.batch
        )));
    }
    let targets: Vec<usize> = action_ids.iter().map(|&a| a as usize).collect();
    Ok(out.tape.nll_loss(logits, &targets, &vec![true; targets.len()])?)
}

/// Reasoning NLL over rationale rows. `targets[b][j]` is the token predicted at
/// rationale row `j` of sequence `b`, counted only where `mask[b][j]` holds.
/// Each sequence is reduced per `reduction`, then sequences with at least one
/// target are averaged.
pub fn reasoning_nll(
    out: &mut ForwardOutput,
    targets: &[Vec<TokenId>],
    mask: &[Vec<bool>],
    reduction: Reduction,
) -> Result<Var, TrainError> {
    let logits = out
        .rationale_logits
        .ok_or_else(|| TrainError::DegenerateBatch("forward pass has no rationale rows".into()))?;
    let span = out.layout.rationale_span;
    if targets.len() != out.layout.batch || mask.len() != out.layout.batch {
        return Err(TrainError::DegenerateBatch("targets and mask must cover the batch".into()));
    }
    let mut per_seq = Vec::new();
    for b in 0..out.layout.batch {
        if targets[b].len() > span || mask[b].len() != targets[b].len() {
            return Err(TrainError::DegenerateBatch(format!("sequence {b} targets do not fit {span} rationale rows")));
        }
        let count = mask[b].iter().filter(|&&m| m).count();
        if count == 0 {
            continue;
        }
        let mut t = vec![0usize; span];
        let mut m = vec![false; span];
        for (j, (&id, &keep)) in targets[b].iter().zip(&mask[b]).enumerate() {
            t[j] = id as usize;
            m[j] = keep;
        }
        let rows = out.tape.slice_rows(logits, b * span, span)?;
        let nll = out.tape.nll_loss(rows, &t, &m)?;
        per_seq.push(match reduction {
            Reduction::Mean => nll,
            Reduction::Sum => out.tape.scale(nll, count as f64),
        });
    }
    if per_seq.is_empty() {
        return Err(TrainError::DegenerateBatch("every rationale position is masked".into()));
    }
    let n = per_seq.len();
    let mut total = per_seq[0];
    for &v in &per_seq[1..] {
        total = out.tape.add(total, v)?;
    }
    Ok(if n == 1 { total } else { out.tape.scale(total, 1.0 / n as f64) })
}

/// `L_a + λ·L_r`. With `λ = 0` the action loss node itself is returned.
pub fn joint_loss(tape: &mut Tape, l_action: Var, l_reasoning: Option<Var>, lambda_r: f64) -> Result<Var, TrainError> {
    if !(lambda_r >= 0.0) || !lambda_r.is_finite() {
        return Err(TrainError::Config(format!("lambda_r must be non-negative, got {lambda_r}")));
    }
    match l_reasoning {
        Some(lr) if lambda_r > 0.0 => {
            let weighted = tape.scale(lr, lambda_r);
            Ok(tape.add(l_action, weighted)?)
        }
        _ => Ok(l_action),
    }
}

// ── batches ──────────────────────────────────────────────────────────────

/// Rendered, tokenized training examples.
pub struct Batch {
    pub images: Vec<Tensor>,
    pub instructions: Vec<Vec<TokenId>>,
    /// Teacher-forced rationale inputs: every rationale token but the last.
    pub rationale_inputs: Vec<Vec<TokenId>>,
    /// Full rationales, predicted from `<SEP>` onward.
    pub rationale_targets: Vec<Vec<TokenId>>,
    pub actions: Vec<TokenId>,
}

impl Batch {
    pub fn from_steps(steps: &[&AnnotatedStep], config: &ModelConfig) -> Result<Self, TrainError> {
        let mut b = Batch {
            images: Vec::with_capacity(steps.len()),
            instructions: Vec::with_capacity(steps.len()),
            rationale_inputs: Vec::with_capacity(steps.len()),
            rationale_targets: Vec::with_capacity(steps.len()),
            actions: Vec::with_capacity(steps.len()),
        };
        for s in steps {
            let r = &s.rationale_ids;
            if r.is_empty() || r.len() > config.rationale_max_len {
                return Err(TrainError::DegenerateBatch(format!(
                    "rationale of {} tokens outside 1..={}",
                    r.len(),
                    config.rationale_max_len
                )));
            }
            b.images.push(s.demo.observation());
            b.instructions.push(s.demo.instruction_ids.clone());
            b.rationale_inputs.push(r[..r.len() - 1].to_vec());
            b.rationale_targets.push(r.clone());
            b.actions.push(s.demo.action_id);
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn inputs(&self, with_rationale: bool) -> Vec<ModelInput<'_>> {
        (0..self.len())
            .map(|i| ModelInput {
                image: &self.images[i],
                instruction: &self.instructions[i],
                rationale: with_rationale.then(|| self.rationale_inputs[i].as_slice()),
            })
            .collect()
    }

    fn rationale_mask(&self) -> Vec<Vec<bool>> {
        self.rationale_targets.iter().map(|t| vec![true; t.len()]).collect()
    }
}

/// The two losses and their combination for one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub l_action: f64,
    pub l_reasoning: f64,
    pub l_total: f64,
}

/// Losses of `params` on `batch` without recording gradients.
pub fn evaluate_losses(
    params: &ParamStore,
    config: &ModelConfig,
    batch: &Batch,
    lambda_r: f64,
    reduction: Reduction,
) -> Result<Losses, TrainError> {
    let mut out = forward(params, config, &batch.inputs(true), true, false)?;
    let la = action_nll(&mut out, &batch.actions)?;
    let lr = reasoning_nll(&mut out, &batch.rationale_targets, &batch.rationale_mask(), reduction)?;
    let total = joint_loss(&mut out.tape, la, Some(lr), lambda_r)?;
    let v = |x: Var| out.tape.value(x).item();
    Ok(Losses { l_action: v(la), l_reasoning: v(lr), l_total: v(total) })
}

// ── steps ────────────────────────────────────────────────────────────────

/// One row of the metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    #[serde(rename = "L_action")]
    pub l_action: f64,
    #[serde(rename = "L_reasoning")]
    pub l_reasoning: Option<f64>,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub val_success: Option<f64>,
    pub wall_ms: Option<u64>,
}

pub const METRICS_HEADER: &str = "step,L_action,L_reasoning,L_total,val_success,wall_ms";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s += &format!(
            "{},{},{},{},{},{}\n",
            r.step,
            r.l_action,
            opt(r.l_reasoning),
            r.l_total,
            opt(r.val_success),
            r.wall_ms.map(|w| w.to_string()).unwrap_or_default()
        );
    }
    s
}

/// One forward, both losses, backward, clipping and an update of the trainable
/// tensors. When the reasoning term is out of the graph, `L_reasoning` is
/// measured by a separate gradient-free pass only if `measure_reasoning` is set.
pub fn train_step(
    params: &mut ParamStore,
    optimizer: &mut Optimizer,
    model: &ModelConfig,
    batch: &Batch,
    config: &TrainConfig,
    step: usize,
    measure_reasoning: bool,
) -> Result<MetricsRow, TrainError> {
    let joint = config.uses_reasoning();
    let mut out = forward(params, model, &batch.inputs(joint), true, true).map_err(|e| match e {
        ModelError::Autodiff(AutodiffError::NonFinite(m)) => TrainError::Divergence { step, message: m },
        e => e.into(),
    })?;
    let la = action_nll(&mut out, &batch.actions)?;
    let lr = if joint {
        Some(reasoning_nll(&mut out, &batch.rationale_targets, &batch.rationale_mask(), config.reduction)?)
    } else {
        None
    };
    let total = joint_loss(&mut out.tape, la, lr, config.lambda_r)?;
    let l_action = out.tape.value(la).item();
    let l_total_graph = out.tape.value(total).item();
    let l_reasoning_graph = lr.map(|v| out.tape.value(v).item());
    if !l_total_graph.is_finite() {
        return Err(TrainError::Divergence { step, message: format!("loss is {l_total_graph}") });
    }
    out.tape.backward(total)?;
    let mut grads: Vec<Option<Tensor>> = out.param_grads().into_iter().map(|g| g.cloned()).collect();
    drop(out);
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(TrainError::Divergence { step, message: "non-finite gradient".into() });
    }
    if let Some(c) = config.clip_norm {
        clip_global_norm(&mut grads, c);
    }
    let l_reasoning = match l_reasoning_graph {
        Some(r) => Some(r),
        None if measure_reasoning => Some(evaluate_losses(params, model, batch, 0.0, config.reduction)?.l_reasoning),
        None => None,
    };
    optimizer.step(params, &grads)?;
    if params.entries().iter().any(|e| !e.tensor.is_finite()) {
        return Err(TrainError::Divergence { step, message: "update left a non-finite parameter".into() });
    }
    Ok(MetricsRow {
        step,
        l_action,
        l_reasoning,
        l_total: l_total_graph,
        val_success: None,
        wall_ms: None,
    })
}

/// Effective reasoning weight: zero when the term is out of the graph.
pub fn effective_lambda(config: &TrainConfig) -> f64 {
    if config.uses_reasoning() {
        config.lambda_r
    } else {
        0.0
    }
}

// ── loop ─────────────────────────────────────────────────────────────────

/// Closed-loop starts for validation: the first step of each held-out episode,
/// capped per task.
pub fn validation_starts(val: &AnnotatedDataset, per_task: Option<usize>) -> Vec<EpisodeStart> {
    let mut taken = std::collections::BTreeMap::<String, usize>::new();
    let mut starts = Vec::new();
    for s in val.steps.iter().map(|s| &s.demo).filter(|d| d.t == 0) {
        let n = taken.entry(s.task.name()).or_default();
        if per_task.is_some_and(|cap| *n >= cap) {
            continue;
        }
        *n += 1;
        starts.push(EpisodeStart {
            task: s.task.clone(),
            variant: s.variant,
            scene: s.scene.clone(),
            episode: s.episode as usize,
            seed: s.variant.layout_seed,
        });
    }
    starts
}

/// Closed-loop success rate of `params` from `starts`.
pub fn validation_success(
    params: &ParamStore,
    model: &ModelConfig,
    vocab: &Vocabulary,
    starts: &[EpisodeStart],
    max_steps: u32,
) -> Result<f64, TrainError> {
    if starts.is_empty() {
        return Err(TrainError::Config("validation split has no episodes".into()));
    }
    let mut policy = ModelPolicy::new(params, model, vocab);
    let records = run_from(&mut policy, starts, max_steps)?;
    Ok(records.iter().filter(|r| r.success).count() as f64 / records.len() as f64)
}

/// Result of a training run.
pub struct TrainOutcome {
    pub final_params: ParamStore,
    pub best_params: ParamStore,
    pub best_val_success: f64,
    pub best_step: usize,
    pub metrics: Vec<MetricsRow>,
    pub steps_run: usize,
    pub stopped_early: bool,
    /// Losses on the fixed probe batch before and after training.
    pub probe_initial: Losses,
    pub probe_final: Losses,
}

/// Where a run persists its artifacts.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub metrics: PathBuf,
    pub best: PathBuf,
    pub final_ckpt: PathBuf,
}

impl RunPaths {
    pub fn under(dir: &Path) -> Self {
        Self {
            metrics: dir.join("metrics.csv"),
            best: dir.join("checkpoints").join("best.ckpt"),
            final_ckpt: dir.join("checkpoints").join("final.ckpt"),
        }
    }
}

const PROBE_SIZE: usize = 64;

fn checkpoint_of(params: &ParamStore, model: &ModelConfig, vocab: &Vocabulary, meta: serde_json::Value) -> Checkpoint {
    Checkpoint { config: model.clone(), vocab_hash: vocab.hash(), metadata: meta, params: params.clone() }
}

/// Trains until `max_steps` or until validation success stops improving for
/// `patience` consecutive evaluations. Step 0 logs the initial losses and
/// validation success without updating.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    init: &ParamStore,
    model: &ModelConfig,
    train: &AnnotatedDataset,
    val: &AnnotatedDataset,
    vocab: &Vocabulary,
    config: &TrainConfig,
    paths: Option<&RunPaths>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Config("train and validation splits must be non-empty".into()));
    }
    let model = ModelConfig {
        frozen_blocks: config.frozen_blocks,
        freeze_embeddings: config.freeze_embeddings,
        ..model.clone()
    };
    model.validate()?;
    let mut params = init.clone();
    params.apply_freeze(model.layers, config.frozen_blocks, config.freeze_embeddings)?;
    let starts = validation_starts(val, config.val_episodes_per_task);
    let lambda = effective_lambda(config);

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.seed);
    let mut probe_rng = Xoshiro256PlusPlus::seed_from_u64(config.seed ^ 0x70_726f_6265);
    let probe_idx = sample_indices(train.len(), PROBE_SIZE.min(train.len()), &mut probe_rng)?;
    let probe_steps: Vec<&AnnotatedStep> = probe_idx.iter().map(|&i| &train.steps[i]).collect();
    let probe = Batch::from_steps(&probe_steps, &model)?;

    let clock = Instant::now();
    let wall = |c: &TrainConfig| c.record_wall_time.then(|| clock.elapsed().as_millis() as u64);
    let probe_initial = evaluate_losses(&params, &model, &probe, lambda, config.reduction)?;
    let val0 = validation_success(&params, &model, vocab, &starts, config.val_max_steps)?;
    let mut metrics = vec![MetricsRow {
        step: 0,
        l_action: probe_initial.l_action,
        l_reasoning: Some(probe_initial.l_reasoning),
        l_total: probe_initial.l_total,
        val_success: Some(val0),
        wall_ms: wall(config),
    }];
    let meta = |step: usize, val: f64| {
        json!({"step": step, "val_success": val, "lambda_r": config.lambda_r, "frozen_blocks": config.frozen_blocks})
    };
    let mut best = (val0, 0usize, params.clone());
    if let Some(p) = paths {
        save_checkpoint(&p.best, &checkpoint_of(&params, &model, vocab, meta(0, val0)))?;
    }
    let mut optimizer = Optimizer::new(config.optimizer, config.lr, &params);
    let mut stale = 0usize;
    let mut stopped_early = false;
    let mut steps_run = 0usize;
    let batch_size = config.batch_size.min(train.len());
    let result: Result<(), TrainError> = (|| {
        for step in 1..=config.max_steps {
            let idx = sample_indices(train.len(), batch_size, &mut rng)?;
            let steps: Vec<&AnnotatedStep> = idx.iter().map(|&i| &train.steps[i]).collect();
            let batch = Batch::from_steps(&steps, &model)?;
            let evaluate = step % config.eval_interval == 0 || step == config.max_steps;
            let log = evaluate || step % config.log_interval == 0;
            let mut row = train_step(&mut params, &mut optimizer, &model, &batch, config, step, log)?;
            steps_run = step;
            if evaluate {
                let v = validation_success(&params, &model, vocab, &starts, config.val_max_steps)?;
                row.val_success = Some(v);
                if v >= best.0 + 0.005 {
                    best = (v, step, params.clone());
                    stale = 0;
                    if let Some(p) = paths {
                        save_checkpoint(&p.best, &checkpoint_of(&params, &model, vocab, meta(step, v)))?;
                    }
                } else {
                    stale += 1;
                }
            }
            if log {
                row.wall_ms = wall(config);
                let show = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
                log::info!(
                    "step {step}: L_action {:.4} L_reasoning {} val {}",
                    row.l_action,
                    show(row.l_reasoning),
                    show(row.val_success)
                );
                metrics.push(row);
            }
            if stale >= config.patience {
                stopped_early = true;
                break;
            }
        }
        Ok(())
    })();
    if let Some(p) = paths {
        write_metrics(&p.metrics, &metrics)?;
    }
    result?;
    let probe_final = evaluate_losses(&params, &model, &probe, lambda, config.reduction)?;
    if let Some(p) = paths {
        let last_val = metrics.iter().rev().find_map(|r| r.val_success).unwrap_or(val0);
        save_checkpoint(&p.final_ckpt, &checkpoint_of(&params, &model, vocab, meta(steps_run, last_val)))?;
    }
    Ok(TrainOutcome {
        final_params: params,
        best_params: best.2,
        best_val_success: best.0,
        best_step: best.1,
        metrics,
        steps_run,
        stopped_early,
        probe_initial,
        probe_final,
    })
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), TrainError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(metrics_csv(rows).as_bytes())?;
    Ok(())
}

// ── end-to-end gradient check ────────────────────────────────────────────

/// Relative error between the analytic gradient of the joint loss and central
/// differences, on a 2-layer, width-16 model with random weights and a batch of
/// two annotated steps. `coords_per_tensor` coordinates of every parameter
/// tensor are probed.
pub fn joint_loss_gradient_check(
    steps: &[&AnnotatedStep],
    vocab: &Vocabulary,
    seed: u64,
    h: f64,
    coords_per_tensor: usize,
) -> Result<f64, TrainError> {
    use rand::Rng;
    let model = ModelConfig {
        layers: 2,
        heads: 2,
        dim: 16,
        frozen_blocks: 0,
        ..ModelConfig::for_vocab(vocab)
    };
    // Larger weights than the default init keep gradients well above round-off.
    let mut params = ParamStore::init(&model, seed)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x6772_6164);
    for e in params.entries_mut() {
        for v in e.tensor.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let batch = Batch::from_steps(steps, &model)?;
    let loss_of = |p: &ParamStore| -> Result<f64, TrainError> {
        Ok(evaluate_losses(p, &model, &batch, 0.3, Reduction::Mean)?.l_total)
    };
    let mut out = forward(&params, &model, &batch.inputs(true), true, true)?;
    let la = action_nll(&mut out, &batch.actions)?;
    let lr = reasoning_nll(&mut out, &batch.rationale_targets, &batch.rationale_mask(), Reduction::Mean)?;
    let total = joint_loss(&mut out.tape, la, Some(lr), 0.3)?;
    out.tape.backward(total)?;
    let grads: Vec<Tensor> = out
        .param_grads()
        .into_iter()
        .map(|g| g.cloned().expect("every parameter is trainable"))
        .collect();
    drop(out);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (ti, g) in grads.iter().enumerate() {
        let n = g.numel();
        let picks = rand::seq::index::sample(&mut rng, n, coords_per_tensor.min(n)).into_vec();
        for i in picks {
            let orig = params.entries()[ti].tensor.data()[i];
            params.entries_mut()[ti].tensor.data_mut()[i] = orig + h;
            let up = loss_of(&params)?;
            params.entries_mut()[ti].tensor.data_mut()[i] = orig - h;
            let down = loss_of(&params)?;
            params.entries_mut()[ti].tensor.data_mut()[i] = orig;
            analytic.push(g.data()[i]);
            numeric.push((up - down) / (2.0 * h));
        }
    }
    Ok(crate::autodiff::relative_error(&analytic, &numeric))
}
