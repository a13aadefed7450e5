use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::canonical::sha256_hex;
use crate::sim::{Action, ObjectKind, ACTION_COUNT};

pub type TokenId = u32;

pub const PAD: &str = "<PAD>";
pub const BOS: &str = "<BOS>";
pub const EOS: &str = "<EOS>";
pub const SEP: &str = "<SEP>";
pub const OBS: &str = "<OBS>";
pub const SIT: &str = "<SIT>";
pub const SPA: &str = "<SPA>";
pub const PLAN: &str = "<PLAN>";
pub const ACT: &str = "<ACT>";

pub const SPECIALS: [&str; 9] = [PAD, BOS, EOS, SEP, OBS, SIT, SPA, PLAN, ACT];
pub const RELATIONS: [&str; 6] = ["left_of", "right_of", "above", "below", "on", "at"];
pub const WORDS: [&str; 7] = ["put", "stack", "in", "move", "to", "grasp", "release"];

/// Bijective token ↔ id map. Ids are contiguous from zero and the 18 action
/// tokens occupy one contiguous block ordered by [`Action::index`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    hash: String,
}

impl Vocabulary {
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(Action::all().map(Action::token));
        tokens.extend(ObjectKind::ALL.iter().map(|k| k.word().to_string()));
        tokens.extend(RELATIONS.iter().map(|s| s.to_string()));
        tokens.extend(WORDS.iter().map(|s| s.to_string()));
        tokens.extend((0..10).map(|d| d.to_string()));
        Self::from_tokens(tokens).expect("standard vocabulary is a bijection")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, DatasetError> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as TokenId).is_some() {
                return Err(DatasetError::Vocab(format!("duplicate token {t:?}")));
            }
        }
        let v = Self { tokens, ids };
        let first = v.id(&Action::from_index(0).expect("action 0").token())?;
        for a in Action::all() {
            if v.id(&a.token())? != first + a.index() as TokenId {
                return Err(DatasetError::Vocab("action tokens are not one contiguous block".into()));
            }
        }
        for s in SPECIALS {
            v.id(s)?;
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<TokenId, DatasetError> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| DatasetError::Vocab(format!("out-of-vocabulary token {token:?}")))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> Result<&str, DatasetError> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| DatasetError::Vocab(format!("id {id} outside vocabulary of {}", self.len())))
    }

    /// Special token id; panics only if the vocabulary was built without specials,
    /// which [`Vocabulary::from_tokens`] rejects.
    pub fn special(&self, token: &str) -> TokenId {
        self.ids[token]
    }

    pub fn action_block(&self) -> Range<TokenId> {
        let start = self.ids[&Action::from_index(0).expect("action 0").token()];
        start..start + ACTION_COUNT as TokenId
    }

    pub fn action_id(&self, action: Action) -> TokenId {
        self.action_block().start + action.index() as TokenId
    }

    pub fn action_of(&self, id: TokenId) -> Option<Action> {
        let block = self.action_block();
        block
            .contains(&id)
            .then(|| Action::from_index((id - block.start) as usize))
            .flatten()
    }

    /// Whitespace tokenization.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, DatasetError> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<TokenId>, DatasetError> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, DatasetError> {
        let words: Result<Vec<&str>, _> = ids.iter().map(|&i| self.token(i)).collect();
        Ok(words?.join(" "))
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.tokens.join("\n").as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let file = VocabFile {
            tokens: self.tokens.clone(),
            hash: self.hash(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let file: VocabFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let v = Self::from_tokens(file.tokens)?;
        if v.hash() != file.hash {
            return Err(DatasetError::Consistency("vocab.json hash does not match its tokens".into()));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn standard_vocabulary_shape() {
        let v = Vocabulary::standard();
        assert!(v.len() <= 64);
        assert_eq!(v.len(), 58);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t).unwrap() as usize, i);
        }
        let block = v.action_block();
        assert_eq!(block.end - block.start, 18);
        for a in Action::all() {
            assert_eq!(v.action_of(v.action_id(a)), Some(a));
        }
        assert_eq!(v.action_of(v.special(EOS)), None);
    }

    #[test]
    fn rejects_duplicates_and_unknown_words() {
        let mut tokens = Vocabulary::standard().tokens().to_vec();
        tokens.push("spoon".into());
        assert!(Vocabulary::from_tokens(tokens).is_err());
        assert!(Vocabulary::standard().encode("put banana on towel").is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let v = Vocabulary::standard();
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    proptest! {
        #[test]
        fn decode_encode_identity(ids in proptest::collection::vec(0u32..58, 0..40)) {
            let v = Vocabulary::standard();
            let text = v.decode(&ids).unwrap();
            prop_assert_eq!(v.encode(&text).unwrap(), ids);
        }
    }
}
