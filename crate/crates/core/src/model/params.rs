use std::collections::HashMap;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::autodiff::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Patch projection, token and position embeddings.
    Embedding,
    Block(usize),
    /// Final norm and output head; never frozen.
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
    pub trainable: bool,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Named parameters in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

fn layout(config: &ModelConfig) -> Vec<(String, ParamGroup, Vec<usize>, Init)> {
    let d = config.dim;
    let v = config.vocab_size;
    let hidden = config.mlp_ratio * d;
    let mut out = vec![
        ("patch_proj.weight".into(), ParamGroup::Embedding, vec![config.patch_dim(), d], Init::Normal),
        ("patch_proj.bias".into(), ParamGroup::Embedding, vec![d], Init::Zeros),
        ("token_embedding".into(), ParamGroup::Embedding, vec![v, d], Init::Normal),
        ("position_embedding".into(), ParamGroup::Embedding, vec![config.max_seq_len, d], Init::Normal),
    ];
    for l in 0..config.layers {
        let g = ParamGroup::Block(l);
        let n = |s: &str| format!("blocks.{l}.{s}");
        out.extend([
            (n("ln1.gain"), g, vec![d], Init::Ones),
            (n("ln1.bias"), g, vec![d], Init::Zeros),
            (n("attn.qkv.weight"), g, vec![d, 3 * d], Init::Normal),
            (n("attn.qkv.bias"), g, vec![3 * d], Init::Zeros),
            (n("attn.out.weight"), g, vec![d, d], Init::Normal),
            (n("attn.out.bias"), g, vec![d], Init::Zeros),
            (n("ln2.gain"), g, vec![d], Init::Ones),
            (n("ln2.bias"), g, vec![d], Init::Zeros),
            (n("mlp.fc1.weight"), g, vec![d, hidden], Init::Normal),
            (n("mlp.fc1.bias"), g, vec![hidden], Init::Zeros),
            (n("mlp.fc2.weight"), g, vec![hidden, d], Init::Normal),
            (n("mlp.fc2.bias"), g, vec![d], Init::Zeros),
        ]);
    }
    out.extend([
        ("final_norm.gain".into(), ParamGroup::Head, vec![d], Init::Ones),
        ("final_norm.bias".into(), ParamGroup::Head, vec![d], Init::Zeros),
        ("head.weight".into(), ParamGroup::Head, vec![d, v], Init::Normal),
        ("head.bias".into(), ParamGroup::Head, vec![v], Init::Zeros),
    ]);
    out
}

impl ParamStore {
    /// Seeded Gaussian initialization (std 0.02), zero offsets, unit gains,
    /// with trainable flags taken from the config's freeze settings.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let entries = layout(config)
            .into_iter()
            .map(|(name, group, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                ParamEntry {
                    name,
                    group,
                    tensor: Tensor::new(shape, data).expect("shape matches data"),
                    trainable: true,
                }
            })
            .collect();
        let mut store = Self::from_entries(entries);
        store.apply_freeze(config.layers, config.frozen_blocks, config.freeze_embeddings)?;
        Ok(store)
    }

    /// Every tensor zero (including norm gains).
    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        let mut store = Self::init(config, 0)?;
        for e in &mut store.entries {
            e.tensor = Tensor::zeros(e.tensor.shape());
        }
        Ok(store)
    }

    fn from_entries(entries: Vec<ParamEntry>) -> Self {
        let index = entries.iter().enumerate().map(|(i, e)| (e.name.clone(), i)).collect();
        Self { entries, index }
    }

    /// Names and shapes the config implies, in canonical order.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        layout(config).into_iter().map(|(n, _, s, _)| (n, s)).collect()
    }

    /// Rebuilds a store from flat values in canonical order.
    pub fn from_flat(config: &ModelConfig, values: &[f64]) -> Result<Self, ModelError> {
        let mut store = Self::init(config, 0)?;
        if values.len() != store.num_params() {
            return Err(ModelError::Checkpoint(format!(
                "{} values for a model with {} parameters",
                values.len(),
                store.num_params()
            )));
        }
        let mut offset = 0;
        for e in &mut store.entries {
            let n = e.tensor.numel();
            e.tensor.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(store)
    }

    /// Marks blocks `0..k` (and the embeddings when asked) frozen and
    /// everything else trainable. The final norm and head always train.
    pub fn apply_freeze(&mut self, layers: usize, k: usize, freeze_embeddings: bool) -> Result<(), ModelError> {
        if k > layers {
            return Err(ModelError::Config(format!("cannot freeze {k} of {layers} blocks")));
        }
        for e in &mut self.entries {
            e.trainable = match e.group {
                ParamGroup::Embedding => !freeze_embeddings,
                ParamGroup::Block(l) => l >= k,
                ParamGroup::Head => true,
            };
        }
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.entries[i].tensor)
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }

    /// All values concatenated in canonical order.
    pub fn flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.tensor.data().iter().copied()).collect()
    }
}
