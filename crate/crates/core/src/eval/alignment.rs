use serde::{Deserialize, Serialize};

use super::{EpisodeSpec, EvalConfig, EvalError};
use crate::autodiff::Tensor;
use crate::dataset::Vocabulary;
use crate::model::{extract_attention, forward, Checkpoint, ModelConfig, ModelInput, ParamStore, QuerySpan};
use crate::sim::{render, Cell, Scene, Task};

/// Source object, destination object and gripper cells, deduplicated in that order.
pub fn relevant_cells(scene: &Scene, task: &Task) -> Result<Vec<Cell>, EvalError> {
    let find = |kind| {
        scene
            .find_kind(kind)
            .map(|o| o.cell)
            .ok_or_else(|| EvalError::Metric(format!("no {kind} in scene")))
    };
    let mut cells = Vec::with_capacity(3);
    for c in [find(task.source)?, find(task.destination)?, scene.gripper_cell] {
        if !cells.contains(&c) {
            cells.push(c);
        }
    }
    Ok(cells)
}

/// Alignment of one attention extraction with its per-layer/head breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScore {
    pub score: f64,
    /// `per_layer_head[layer][head]`, each averaged over queries.
    pub per_layer_head: Vec<Vec<f64>>,
}

/// Mean over layers, heads and query rows of the attention mass on the patches
/// of `relevant` cells. `maps[layer][head]` is `[Q, grid_w · grid_h]` with rows
/// already renormalized over patch keys.
pub fn alignment_score(maps: &[Vec<Tensor>], relevant: &[Cell], grid_w: usize) -> Result<AlignmentScore, EvalError> {
    if relevant.is_empty() {
        return Err(EvalError::Metric("relevant cell set is empty".into()));
    }
    if maps.is_empty() || maps.iter().any(|l| l.is_empty()) {
        return Err(EvalError::Metric("no attention maps supplied".into()));
    }
    let mut idx: Vec<usize> = relevant.iter().map(|c| c.y * grid_w + c.x).collect();
    idx.sort_unstable();
    idx.dedup();
    let mut per_layer_head = Vec::with_capacity(maps.len());
    let mut total = 0.0;
    let mut count = 0usize;
    for layer in maps {
        let mut row = Vec::with_capacity(layer.len());
        for m in layer {
            if m.rows() == 0 || idx.iter().any(|&i| i >= m.cols()) {
                return Err(EvalError::Metric(format!("attention map {:?} does not cover the grid", m.shape())));
            }
            let mass: f64 = (0..m.rows()).map(|q| idx.iter().map(|&i| m.at(q, i)).sum::<f64>()).sum();
            row.push(mass / m.rows() as f64);
            total += mass;
            count += m.rows();
        }
        per_layer_head.push(row);
    }
    Ok(AlignmentScore { score: total / count as f64, per_layer_head })
}

/// Action-query attention over patches averaged across layers and heads, as a
/// single row of `num_patches` values.
pub fn mean_action_attention(maps: &[Vec<Tensor>]) -> Vec<f64> {
    let n = maps[0][0].cols();
    let mut acc = vec![0.0; n];
    let mut count = 0usize;
    for m in maps.iter().flatten() {
        for q in 0..m.rows() {
            for (a, v) in acc.iter_mut().zip(m.row(q)) {
                *a += v;
            }
            count += 1;
        }
    }
    acc.iter().map(|a| a / count as f64).collect()
}

/// Alignment measured on the initial observation of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeAlignment {
    pub task: String,
    pub episode: usize,
    pub seed: u64,
    pub scene_hash: String,
    pub alignment: AlignmentScore,
    /// Mean action attention over patches, for heatmaps.
    pub attention: Vec<f64>,
}

/// Scores the model's action attention on each episode's initial scene.
pub fn episode_alignment(
    params: &ParamStore,
    config: &ModelConfig,
    vocab: &Vocabulary,
    specs: &[EpisodeSpec],
) -> Result<Vec<EpisodeAlignment>, EvalError> {
    let grid_w = config.image_size / config.patch_size;
    let mut out = Vec::with_capacity(specs.len());
    for chunk in specs.chunks(32) {
        let scenes = chunk.iter().map(|s| s.initial_scene()).collect::<Result<Vec<_>, _>>()?;
        let images: Vec<Tensor> = scenes.iter().zip(chunk).map(|(sc, s)| render(sc, &s.variant)).collect();
        let instrs = chunk
            .iter()
            .map(|s| vocab.encode_words(&s.task.instruction))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| EvalError::Compatibility(e.to_string()))?;
        let inputs: Vec<ModelInput> = images
            .iter()
            .zip(&instrs)
            .map(|(image, instruction)| ModelInput { image, instruction, rationale: None })
            .collect();
        let f = forward(params, config, &inputs, true, false)?;
        for (b, (spec, scene)) in chunk.iter().zip(&scenes).enumerate() {
            let maps = extract_attention(&f, b, QuerySpan::Action)?;
            let cells = relevant_cells(scene, &spec.task)?;
            out.push(EpisodeAlignment {
                task: spec.task.name(),
                episode: spec.episode,
                seed: spec.seed,
                scene_hash: scene.hash_hex(),
                alignment: alignment_score(&maps, &cells, grid_w)?,
                attention: mean_action_attention(&maps),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedAlignment {
    pub task: String,
    pub episode: usize,
    pub seed: u64,
    pub scene_hash: String,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub mean_before: f64,
    pub mean_after: f64,
    pub mean_delta: f64,
    pub per_layer_head_before: Vec<Vec<f64>>,
    pub per_layer_head_after: Vec<Vec<f64>>,
    pub per_layer_head_delta: Vec<Vec<f64>>,
    pub episodes: Vec<PairedAlignment>,
}

fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    let strip = |c: &ModelConfig| ModelConfig { frozen_blocks: 0, freeze_embeddings: false, ..c.clone() };
    strip(a) == strip(b)
}

fn mean_grid(runs: &[EpisodeAlignment]) -> Vec<Vec<f64>> {
    let first = &runs[0].alignment.per_layer_head;
    first
        .iter()
        .enumerate()
        .map(|(l, heads)| {
            (0..heads.len())
                .map(|h| runs.iter().map(|r| r.alignment.per_layer_head[l][h]).sum::<f64>() / runs.len() as f64)
                .collect()
        })
        .collect()
}

/// Paired before/after alignment on identical scenes. Every delta is `after − before`.
pub fn compare_alignment(
    before: &Checkpoint,
    after: &Checkpoint,
    vocab: &Vocabulary,
    tasks: &[Task],
    config: &EvalConfig,
) -> Result<(AlignmentReport, Vec<EpisodeAlignment>, Vec<EpisodeAlignment>), EvalError> {
    config.validate()?;
    if before.vocab_hash != after.vocab_hash || before.vocab_hash != vocab.hash() {
        return Err(EvalError::Compatibility("checkpoints and vocabulary disagree on the vocabulary hash".into()));
    }
    if !same_architecture(&before.config, &after.config) {
        return Err(EvalError::Compatibility("checkpoints have different model configurations".into()));
    }
    let specs: Vec<EpisodeSpec> = config.modes.iter().flat_map(|&m| config.specs(tasks, m)).collect();
    let b = episode_alignment(&before.params, &before.config, vocab, &specs)?;
    let a = episode_alignment(&after.params, &after.config, vocab, &specs)?;
    let mut episodes = Vec::with_capacity(specs.len());
    for (x, y) in b.iter().zip(&a) {
        if x.scene_hash != y.scene_hash {
            return Err(EvalError::Compatibility(format!("episode {} scenes differ across the pair", x.episode)));
        }
        episodes.push(PairedAlignment {
            task: x.task.clone(),
            episode: x.episode,
            seed: x.seed,
            scene_hash: x.scene_hash.clone(),
            before: x.alignment.score,
            after: y.alignment.score,
            delta: y.alignment.score - x.alignment.score,
        });
    }
    let n = episodes.len() as f64;
    let mean_before = episodes.iter().map(|e| e.before).sum::<f64>() / n;
    let mean_after = episodes.iter().map(|e| e.after).sum::<f64>() / n;
    let (gb, ga) = (mean_grid(&b), mean_grid(&a));
    let per_layer_head_delta = gb
        .iter()
        .zip(&ga)
        .map(|(rb, ra)| rb.iter().zip(ra).map(|(x, y)| y - x).collect())
        .collect();
    let report = AlignmentReport {
        mean_before,
        mean_after,
        mean_delta: mean_after - mean_before,
        per_layer_head_before: gb,
        per_layer_head_after: ga,
        per_layer_head_delta,
        episodes,
    };
    Ok((report, b, a))
}
