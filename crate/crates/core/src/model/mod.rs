//! Tiny multimodal transformer: image patches and instruction tokens in,
//! rationale and action token logits out.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{ParamEntry, ParamGroup, ParamStore};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AttentionSpec, AutodiffError, Tape, Tensor, Var};
use crate::dataset::{vocab, TokenId, Vocabulary};
use crate::sim::ACTION_COUNT;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model configuration: {0}")]
    Config(String),
    #[error("sequence needs {needed} positions, model supports {max}")]
    Length { needed: usize, max: usize },
    #[error("span error: {0}")]
    Span(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Token ids the model needs to lay out sequences and decode actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: TokenId,
    pub sep: TokenId,
    pub act: TokenId,
    pub eos: TokenId,
    /// First id of the contiguous action block.
    pub action_start: TokenId,
}

impl SpecialIds {
    pub fn from_vocab(v: &Vocabulary) -> Self {
        Self {
            pad: v.special(vocab::PAD),
            sep: v.special(vocab::SEP),
            act: v.special(vocab::ACT),
            eos: v.special(vocab::EOS),
            action_start: v.action_block().start,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rationale_max_len: usize,
    pub frozen_blocks: usize,
    pub freeze_embeddings: bool,
    pub specials: SpecialIds,
}

impl ModelConfig {
    pub fn for_vocab(v: &Vocabulary) -> Self {
        Self {
            layers: 4,
            heads: 4,
            dim: 64,
            mlp_ratio: 4,
            patch_size: 4,
            image_size: 32,
            vocab_size: v.len(),
            max_seq_len: 128,
            rationale_max_len: 48,
            frozen_blocks: 2,
            freeze_embeddings: false,
            specials: SpecialIds::from_vocab(v),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.mlp_ratio == 0 {
            return fail("layers, heads, dim and mlp_ratio must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.frozen_blocks > self.layers {
            return fail(format!("frozen_blocks {} exceeds layers {}", self.frozen_blocks, self.layers));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!("image size {} is not a multiple of patch size {}", self.image_size, self.patch_size));
        }
        let s = &self.specials;
        let ids = [s.pad, s.sep, s.act, s.eos, s.action_start + ACTION_COUNT as TokenId - 1];
        if ids.iter().any(|&i| i as usize >= self.vocab_size) {
            return fail("special or action ids fall outside the vocabulary".into());
        }
        if self.max_seq_len < self.num_patches() + 2 {
            return fail(format!("max_seq_len {} leaves no room for text", self.max_seq_len));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

// ── inputs and layout ────────────────────────────────────────────────────

/// One sequence to run.
///
/// `rationale` holds the teacher-forced tokens that follow `<SEP>`; `None`
/// leaves the rationale span out entirely. With `Some(r)` the model emits
/// `1 + r.len()` rationale logit rows, the first predicting the token after `<SEP>`.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub image: &'a Tensor,
    pub instruction: &'a [TokenId],
    pub rationale: Option<&'a [TokenId]>,
}

/// Row layout shared by every sequence in a batch:
/// `[patches][instruction, padded][<SEP> rationale, padded][<ACT>]`.
///
/// The rationale span sees the prefix and earlier rationale rows; `<ACT>` sees
/// only the prefix and itself, with its position id placed right after `<SEP>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub batch: usize,
    pub patches: usize,
    pub instr_span: usize,
    pub rationale_span: usize,
    pub has_act: bool,
    pub instr_lens: Vec<usize>,
    /// Real rationale rows per sequence (`<SEP>` included); zero when absent.
    pub rationale_rows: Vec<usize>,
}

impl Layout {
    pub fn seq(&self) -> usize {
        self.patches + self.instr_span + self.rationale_span + usize::from(self.has_act)
    }

    pub fn prefix(&self) -> usize {
        self.patches + self.instr_span
    }

    pub fn act_row(&self) -> Option<usize> {
        self.has_act.then(|| self.seq() - 1)
    }

    fn region(&self, row: usize) -> Region {
        if row < self.prefix() {
            Region::Prefix
        } else if Some(row) == self.act_row() {
            Region::Act
        } else {
            Region::Rationale
        }
    }

    fn mask(&self) -> Vec<bool> {
        let t = self.seq();
        let p = self.prefix();
        let mut mask = vec![false; t * t];
        for i in 0..t {
            for j in 0..t {
                mask[i * t + j] = j < p
                    || match self.region(i) {
                        Region::Prefix => false,
                        Region::Rationale => self.region(j) == Region::Rationale && j <= i,
                        Region::Act => j == i,
                    };
            }
        }
        mask
    }

    fn key_valid(&self) -> Vec<bool> {
        let t = self.seq();
        let mut valid = vec![true; self.batch * t];
        for b in 0..self.batch {
            for j in self.instr_lens[b]..self.instr_span {
                valid[b * t + self.patches + j] = false;
            }
            for j in self.rationale_rows[b]..self.rationale_span {
                valid[b * t + self.prefix() + j] = false;
            }
        }
        valid
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Region {
    Prefix,
    Rationale,
    Act,
}

/// Splits a `[H, W, 3]` image into row-major `patch × patch × 3` feature rows.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Vec<f64>, ModelError> {
    let [h, w, c] = image.shape() else {
        return Err(ModelError::Config(format!("image shape {:?} is not [H, W, 3]", image.shape())));
    };
    let (h, w, c) = (*h, *w, *c);
    if c != 3 || h % patch != 0 || w % patch != 0 {
        return Err(ModelError::Config(format!("image shape {:?} does not tile into {patch}px patches", image.shape())));
    }
    let data = image.data();
    let mut out = Vec::with_capacity(h * w * 3);
    for py in 0..h / patch {
        for px in 0..w / patch {
            for dy in 0..patch {
                let o = ((py * patch + dy) * w + px * patch) * 3;
                out.extend_from_slice(&data[o..o + patch * 3]);
            }
        }
    }
    Ok(out)
}

// ── forward ──────────────────────────────────────────────────────────────

/// A recorded forward pass. Holds the tape so losses can be added and
/// differentiated, and exposes logits and attention weights.
pub struct ForwardOutput {
    pub tape: Tape,
    /// Tape leaves for each parameter, in canonical order.
    pub params: Vec<Var>,
    /// `[batch · rationale_span, V]`, row `b · rationale_span + j`.
    pub rationale_logits: Option<Var>,
    /// `[batch, V]` logits at `<ACT>`.
    pub action_logits: Option<Var>,
    /// Attention node of each layer.
    pub attention: Vec<Var>,
    pub layout: Layout,
    heads: usize,
}

impl ForwardOutput {
    pub fn rationale_logits(&self) -> Option<&Tensor> {
        self.rationale_logits.map(|v| self.tape.value(v))
    }

    pub fn action_logits(&self) -> Option<&Tensor> {
        self.action_logits.map(|v| self.tape.value(v))
    }

    /// Attention weights `A[q][k]` of one sequence, layer and head.
    pub fn attention_map(&self, b: usize, layer: usize, head: usize) -> Tensor {
        let t = self.layout.seq();
        let probs = self.tape.attention_probs(self.attention[layer]).expect("attention node");
        let o = (b * self.heads + head) * t * t;
        Tensor::from_parts(vec![t, t], probs[o..o + t * t].to_vec())
    }

    pub fn layers(&self) -> usize {
        self.attention.len()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Gradient of each parameter after `tape.backward`, in canonical order.
    pub fn param_grads(&self) -> Vec<Option<&Tensor>> {
        self.params.iter().map(|&v| self.tape.grad(v)).collect()
    }
}

/// Runs the model on a batch. With `grads` set, trainable parameters become
/// differentiable leaves; otherwise every parameter is a constant.
pub fn forward(
    params: &ParamStore,
    config: &ModelConfig,
    inputs: &[ModelInput<'_>],
    with_act: bool,
    grads: bool,
) -> Result<ForwardOutput, ModelError> {
    if inputs.is_empty() {
        return Err(ModelError::Span("empty batch".into()));
    }
    let with_rationale = inputs[0].rationale.is_some();
    if inputs.iter().any(|i| i.rationale.is_some() != with_rationale) {
        return Err(ModelError::Span("batch mixes sequences with and without rationale".into()));
    }
    if !with_act && !with_rationale {
        return Err(ModelError::Span("nothing to predict".into()));
    }
    let layout = Layout {
        batch: inputs.len(),
        patches: config.num_patches(),
        instr_span: inputs.iter().map(|i| i.instruction.len()).max().unwrap_or(0),
        rationale_span: inputs.iter().map(|i| i.rationale.map_or(0, |r| r.len() + 1)).max().unwrap_or(0),
        has_act: with_act,
        instr_lens: inputs.iter().map(|i| i.instruction.len()).collect(),
        rationale_rows: inputs.iter().map(|i| i.rationale.map_or(0, |r| r.len() + 1)).collect(),
    };
    let needed = layout.prefix() + layout.rationale_span.max(if with_act { 2 } else { 0 });
    if needed > config.max_seq_len {
        return Err(ModelError::Length { needed, max: config.max_seq_len });
    }
    let (b, t, d) = (layout.batch, layout.seq(), config.dim);
    let n_patch = layout.patches;
    let sp = config.specials;

    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .entries()
        .iter()
        .map(|e| tape.leaf(e.tensor.clone(), grads && e.trainable))
        .collect();
    let p = |name: &str| vars[params.index_of(name).expect("known parameter")];

    // Patch rows for the whole batch, then text rows, then a gather into sequence order.
    let mut pixels = Vec::with_capacity(b * n_patch * config.patch_dim());
    for input in inputs {
        pixels.extend(patchify(input.image, config.patch_size)?);
    }
    if pixels.len() != b * n_patch * config.patch_dim() {
        return Err(ModelError::Config("image size does not match the model".into()));
    }
    let pixels = tape.constant(Tensor::new(vec![b * n_patch, config.patch_dim()], pixels).map_err(ModelError::Autodiff)?);
    let patch_emb = tape.matmul(pixels, p("patch_proj.weight"))?;
    let patch_emb = tape.add(patch_emb, p("patch_proj.bias"))?;

    let text_len = t - n_patch;
    let mut text_ids = Vec::with_capacity(b * text_len);
    let mut pos_ids = Vec::with_capacity(b * t);
    for (bi, input) in inputs.iter().enumerate() {
        let ilen = layout.instr_lens[bi];
        text_ids.extend(input.instruction.iter().map(|&i| i as usize));
        text_ids.extend(std::iter::repeat_n(sp.pad as usize, layout.instr_span - ilen));
        if let Some(r) = input.rationale {
            text_ids.push(sp.sep as usize);
            text_ids.extend(r.iter().map(|&i| i as usize));
            text_ids.extend(std::iter::repeat_n(sp.pad as usize, layout.rationale_span - r.len() - 1));
        }
        if with_act {
            text_ids.push(sp.act as usize);
        }
        // Padding rows take the last real position; they are never visible as keys.
        pos_ids.extend(0..n_patch);
        pos_ids.extend((0..layout.instr_span).map(|j| n_patch + j.min(ilen.saturating_sub(1))));
        let sep_pos = n_patch + ilen;
        pos_ids.extend((0..layout.rationale_span).map(|j| sep_pos + j.min(layout.rationale_rows[bi].saturating_sub(1))));
        if with_act {
            pos_ids.push(sep_pos + 1);
        }
    }
    if let Some(&bad) = text_ids.iter().find(|&&i| i >= config.vocab_size) {
        return Err(ModelError::Config(format!("token id {bad} outside vocabulary of {}", config.vocab_size)));
    }
    let text_emb = tape.gather(p("token_embedding"), &text_ids)?;
    let stacked = tape.concat_rows(&[patch_emb, text_emb])?;
    let order: Vec<usize> = (0..b)
        .flat_map(|bi| {
            (0..t).map(move |r| if r < n_patch { bi * n_patch + r } else { b * n_patch + bi * text_len + (r - n_patch) })
        })
        .collect();
    let x = tape.gather(stacked, &order)?;
    let pos = tape.gather(p("position_embedding"), &pos_ids)?;
    let mut x = tape.add(x, pos)?;

    let spec = AttentionSpec {
        batch: b,
        seq: t,
        heads: config.heads,
        mask: layout.mask(),
        key_valid: Some(layout.key_valid()),
    };
    let mut attention = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let name = |s: &str| format!("blocks.{l}.{s}");
        let h = tape.layer_norm(x, p(&name("ln1.gain")), p(&name("ln1.bias")))?;
        let qkv = tape.matmul(h, p(&name("attn.qkv.weight")))?;
        let qkv = tape.add(qkv, p(&name("attn.qkv.bias")))?;
        let q = tape.slice_cols(qkv, 0, d)?;
        let k = tape.slice_cols(qkv, d, d)?;
        let v = tape.slice_cols(qkv, 2 * d, d)?;
        let a = tape.attention(q, k, v, spec.clone())?;
        attention.push(a);
        let o = tape.matmul(a, p(&name("attn.out.weight")))?;
        let o = tape.add(o, p(&name("attn.out.bias")))?;
        x = tape.add(x, o)?;
        let h = tape.layer_norm(x, p(&name("ln2.gain")), p(&name("ln2.bias")))?;
        let m = tape.matmul(h, p(&name("mlp.fc1.weight")))?;
        let m = tape.add(m, p(&name("mlp.fc1.bias")))?;
        let m = tape.gelu(m);
        let m = tape.matmul(m, p(&name("mlp.fc2.weight")))?;
        let m = tape.add(m, p(&name("mlp.fc2.bias")))?;
        x = tape.add(x, m)?;
    }

    // Only rows that predict something go through the head.
    let mut rows: Vec<usize> = Vec::new();
    for bi in 0..b {
        rows.extend((0..layout.rationale_span).map(|j| bi * t + layout.prefix() + j));
    }
    let n_rationale = rows.len();
    if let Some(act) = layout.act_row() {
        rows.extend((0..b).map(|bi| bi * t + act));
    }
    let out = tape.gather(x, &rows)?;
    let out = tape.layer_norm(out, p("final_norm.gain"), p("final_norm.bias"))?;
    let logits = tape.matmul(out, p("head.weight"))?;
    let logits = tape.add(logits, p("head.bias"))?;
    let rationale_logits = if n_rationale > 0 {
        Some(tape.slice_rows(logits, 0, n_rationale)?)
    } else {
        None
    };
    let action_logits = if with_act {
        Some(tape.slice_rows(logits, n_rationale, b)?)
    } else {
        None
    };
    Ok(ForwardOutput {
        tape,
        params: vars,
        rationale_logits,
        action_logits,
        attention,
        layout,
        heads: config.heads,
    })
}

// ── decoding ─────────────────────────────────────────────────────────────

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy action from a logit row, restricted to the action block.
pub fn action_from_logits(row: &[f64], specials: &SpecialIds) -> TokenId {
    let start = specials.action_start as usize;
    specials.action_start + argmax(&row[start..start + ACTION_COUNT]) as TokenId
}

/// Greedy action token for each `(image, instruction)` pair.
pub fn predict_actions(
    params: &ParamStore,
    config: &ModelConfig,
    items: &[(&Tensor, &[TokenId])],
) -> Result<Vec<TokenId>, ModelError> {
    let inputs: Vec<ModelInput> = items
        .iter()
        .map(|(image, instruction)| ModelInput { image, instruction, rationale: None })
        .collect();
    let out = forward(params, config, &inputs, true, false)?;
    let logits = out.action_logits().expect("action row requested");
    Ok((0..items.len()).map(|b| action_from_logits(logits.row(b), &config.specials)).collect())
}

pub fn predict_action(
    params: &ParamStore,
    config: &ModelConfig,
    image: &Tensor,
    instruction: &[TokenId],
) -> Result<TokenId, ModelError> {
    Ok(predict_actions(params, config, &[(image, instruction)])?[0])
}

/// Greedy rationale decode after `<SEP>`, stopping after `<EOS>` or `max_len` tokens.
/// `max_len` is capped at the configured rationale budget.
pub fn generate_rationale(
    params: &ParamStore,
    config: &ModelConfig,
    image: &Tensor,
    instruction: &[TokenId],
    max_len: usize,
) -> Result<Vec<TokenId>, ModelError> {
    let max_len = max_len.min(config.rationale_max_len);
    let mut out: Vec<TokenId> = Vec::new();
    while out.len() < max_len {
        let input = ModelInput { image, instruction, rationale: Some(&out) };
        let f = forward(params, config, &[input], false, false)?;
        let logits = f.rationale_logits().expect("rationale rows requested");
        let next = argmax(logits.row(out.len())) as TokenId;
        out.push(next);
        if next == config.specials.eos {
            break;
        }
    }
    Ok(out)
}

// ── attention extraction ─────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySpan {
    Action,
    Rationale,
}

/// Attention of the chosen query rows of sequence `b` restricted to the patch
/// keys and renormalized per row: `result[layer][head]` is `[Q, patches]`.
pub fn extract_attention(out: &ForwardOutput, b: usize, span: QuerySpan) -> Result<Vec<Vec<Tensor>>, ModelError> {
    let layout = &out.layout;
    if b >= layout.batch {
        return Err(ModelError::Span(format!("sequence {b} outside batch of {}", layout.batch)));
    }
    let queries: Vec<usize> = match span {
        QuerySpan::Action => layout.act_row().into_iter().collect(),
        QuerySpan::Rationale => (0..layout.rationale_rows[b]).map(|j| layout.prefix() + j).collect(),
    };
    if queries.is_empty() {
        return Err(ModelError::Span(format!("{span:?} span is empty for this sequence")));
    }
    let np = layout.patches;
    let mut result = Vec::with_capacity(out.layers());
    for l in 0..out.layers() {
        let mut per_head = Vec::with_capacity(out.heads());
        for h in 0..out.heads() {
            let a = out.attention_map(b, l, h);
            let mut data = Vec::with_capacity(queries.len() * np);
            for &q in &queries {
                data.extend(renormalize(&a.row(q)[..np])?);
            }
            per_head.push(Tensor::from_parts(vec![queries.len(), np], data));
        }
        result.push(per_head);
    }
    Ok(result)
}

/// Scales a non-negative row to sum to one.
pub fn renormalize(row: &[f64]) -> Result<Vec<f64>, ModelError> {
    let total: f64 = row.iter().sum();
    if !(total > 0.0) {
        return Err(ModelError::Span("no attention mass on the selected keys".into()));
    }
    Ok(row.iter().map(|v| v / total).collect())
}

#[cfg(test)]
mod tests;
