//! Corpus ingestion: annotation and feature files, tokenization, vocabularies,
//! image-level splits and synthetic desk-scale corpora.

mod io;
mod split;
mod synthetic;
mod vocab;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    features_to_binary, features_to_text, load_annotations, load_features, parse_annotations,
    parse_features_binary, parse_features_text, save_annotations, save_features_binary,
    save_features_text, annotations_to_string,
};
pub(crate) use io::write_atomic;
pub use split::{split_corpus, SplitSpec};
pub use synthetic::{generate_synthetic_corpus, SyntheticCorpus, SyntheticCorpusSpec};
pub use vocab::{build_vocab, Vocabulary, END, END_TOKEN, PAD, PAD_TOKEN, RESERVED, START, START_TOKEN, UNK, UNK_TOKEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" | "" => Ok(Split::Unassigned),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// One annotated image. Feature vectors live in a separate [`FeatureTable`]
/// keyed by `image_id`, mirroring the on-disk layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub image_id: String,
    pub keywords: Vec<String>,
    pub location: Option<String>,
    pub questions: Vec<Vec<String>>,
    pub split: Split,
}

/// Image id → feature vector, all of one dimension. Vectors are stored in
/// single precision as on disk and widened by the model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f32>>,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, image_id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let image_id = image_id.into();
        if self.vectors.is_empty() && self.dim == 0 {
            self.dim = vector.len();
        }
        if vector.len() != self.dim {
            return Err(Error::FeatureDimension {
                image_id,
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if self.vectors.contains_key(&image_id) {
            return Err(Error::DuplicateId(image_id));
        }
        self.vectors.insert(image_id, vector);
        Ok(())
    }

    pub fn get(&self, image_id: &str) -> Option<&[f32]> {
        self.vectors.get(image_id).map(Vec::as_slice)
    }

    pub fn require(&self, image_id: &str) -> Result<&[f32]> {
        self.get(image_id)
            .ok_or_else(|| Error::MissingFeature(image_id.to_string()))
    }

    /// Entries in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

const STRIP: &[char] = &['.', ',', '!', '?', ';', ':', '"', '(', ')'];

/// Lowercase, split on whitespace and strip leading/trailing punctuation from
/// each token. Internal apostrophes survive; empty tokens are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|tok| tok.trim_matches(STRIP))
        .filter(|tok| !tok.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Records restricted to one split, in input order.
pub fn records_in(records: &[ImageRecord], split: Split) -> Vec<&ImageRecord> {
    records.iter().filter(|r| r.split == split).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("What is this?"), ["what", "is", "this"]);
        assert_eq!(
            tokenize("What's the name of that body?"),
            ["what's", "the", "name", "of", "that", "body"]
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("  (Hello),  \"world\"!! "), ["hello", "world"]);
        assert!(tokenize("?? ...").is_empty());
    }

    #[test]
    fn feature_table_rejects_duplicates_and_bad_dims() {
        let mut t = FeatureTable::new(2);
        t.insert("a", vec![0.0, 1.0]).unwrap();
        assert!(matches!(t.insert("a", vec![0.0, 1.0]), Err(Error::DuplicateId(_))));
        match t.insert("b", vec![0.0]) {
            Err(Error::FeatureDimension { image_id, .. }) => assert_eq!(image_id, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(s in "\\PC{0,60}") {
            let once = tokenize(&s);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(once, twice);
        }
    }
}
