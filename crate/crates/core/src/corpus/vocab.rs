use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ImageRecord;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: usize = 4;

pub const PAD_TOKEN: &str = "<pad>";
pub const START_TOKEN: &str = "<start>";
pub const END_TOKEN: &str = "<end>";
pub const UNK_TOKEN: &str = "<unk>";

const RESERVED_TOKENS: [&str; RESERVED] = [PAD_TOKEN, START_TOKEN, END_TOKEN, UNK_TOKEN];

/// Bijective token ↔ id map. Ids 0–3 are the reserved tokens; the rest are
/// sorted lexicographically so the mapping never depends on hash order.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.min_count == other.min_count
    }
}

impl Vocabulary {
    /// Builds a vocabulary from non-reserved tokens; they are sorted and
    /// deduplicated, and reserved spellings are ignored.
    pub fn from_tokens<I, S>(tokens: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut words: Vec<String> = tokens
            .into_iter()
            .map(Into::into)
            .filter(|t| !RESERVED_TOKENS.contains(&t.as_str()))
            .collect();
        words.sort();
        words.dedup();
        let tokens: Vec<String> = RESERVED_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            index,
            min_count,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Out-of-vocabulary tokens map to [`UNK`].
    pub fn token_to_id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn id_to_token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.token_to_id(t.as_ref())).collect()
    }

    /// `⟨start⟩ w₁ … wₙ ⟨end⟩`, truncating the words to `max_len`.
    pub fn encode_target<S: AsRef<str>>(&self, tokens: &[S], max_len: usize) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len().min(max_len) + 2);
        ids.push(START);
        ids.extend(tokens.iter().take(max_len).map(|t| self.token_to_id(t.as_ref())));
        ids.push(END);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.id_to_token(id).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    min_count: usize,
    tokens: Vec<String>,
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        VocabRepr {
            min_count: self.min_count,
            tokens: self.tokens.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = VocabRepr::deserialize(d)?;
        if repr.tokens.len() < RESERVED
            || repr.tokens[..RESERVED]
                .iter()
                .zip(RESERVED_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(D::Error::custom("vocabulary must start with the reserved tokens"));
        }
        let vocab = Vocabulary::from_tokens(repr.tokens[RESERVED..].iter().cloned(), repr.min_count);
        if vocab.tokens != repr.tokens {
            return Err(D::Error::custom(
                "vocabulary tokens must be unique and lexicographically sorted",
            ));
        }
        Ok(vocab)
    }
}

/// Every question or keyword token with corpus frequency ≥ `min_count` gets an id.
pub fn build_vocab(records: &[ImageRecord], min_count: usize) -> Result<Vocabulary> {
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for record in records {
        let question_tokens = record.questions.iter().flatten();
        for tok in question_tokens.chain(record.keywords.iter()) {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    let vocab = Vocabulary::from_tokens(
        counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .map(|(t, _)| t),
        min_count,
    );
    if vocab.is_empty() {
        return Err(Error::EmptyVocabulary(min_count));
    }
    Ok(vocab)
}
