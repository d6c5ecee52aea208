use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{tokenize, FeatureTable, ImageRecord, Split};
use crate::error::{Error, Result};

const NOISE_SCALE: f64 = 0.01;

const TEMPLATES: [&str; 8] = [
    "what kind of {} is this",
    "where can i buy this {}",
    "how old is this {}",
    "what color is the {}",
    "who made this {}",
    "is this {} for sale",
    "how much does this {} cost",
    "when was this {} made",
];

const NOUNS: [&str; 24] = [
    "bridge", "castle", "flower", "dish", "necklace", "statue", "bird", "boat", "building",
    "painting", "tree", "car", "lamp", "chair", "dog", "cake", "tower", "shell", "guitar",
    "vase", "clock", "mask", "kite", "rug",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub n_images: usize,
    pub n_concepts: usize,
    pub questions_per_image: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            n_images: 40,
            n_concepts: 5,
            questions_per_image: 3,
            feature_dim: 16,
            seed: 42,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_concepts == 0 {
            return Err(Error::Config("n_concepts must be at least 1".into()));
        }
        if self.n_concepts > self.n_images {
            return Err(Error::Config(format!(
                "n_concepts ({}) exceeds n_images ({})",
                self.n_concepts, self.n_images
            )));
        }
        if self.questions_per_image == 0 || self.questions_per_image > TEMPLATES.len() {
            return Err(Error::Config(format!(
                "questions_per_image must be in 1..={}",
                TEMPLATES.len()
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub records: Vec<ImageRecord>,
    pub features: FeatureTable,
    /// Concept index of each record, parallel to `records`.
    pub concepts: Vec<usize>,
}

pub fn concept_noun(concept: usize) -> String {
    let base = NOUNS[concept % NOUNS.len()];
    match concept / NOUNS.len() {
        0 => base.to_string(),
        k => format!("{base}{k}"),
    }
}

/// Image `i` belongs to concept `i mod n_concepts`. Its feature is the
/// concept's seeded prototype plus N(0, 0.01²) noise, its questions are the
/// concept's template set and its only keyword is the concept noun.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let prototypes: Vec<Vec<f64>> = (0..spec.n_concepts)
        .map(|_| {
            (0..spec.feature_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let question_sets: Vec<Vec<Vec<String>>> = (0..spec.n_concepts)
        .map(|c| {
            let mut order: Vec<usize> = (0..TEMPLATES.len()).collect();
            order.shuffle(&mut rng);
            let noun = concept_noun(c);
            order[..spec.questions_per_image]
                .iter()
                .map(|&t| tokenize(&TEMPLATES[t].replace("{}", &noun)))
                .collect()
        })
        .collect();

    let noise = Normal::new(0.0, NOISE_SCALE).expect("valid normal");
    let mut records = Vec::with_capacity(spec.n_images);
    let mut features = FeatureTable::new(spec.feature_dim);
    let mut concepts = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let c = i % spec.n_concepts;
        let image_id = format!("img{i:05}");
        let vector = prototypes[c]
            .iter()
            .map(|&p| (p + noise.sample(&mut rng)) as f32)
            .collect();
        features.insert(image_id.clone(), vector)?;
        records.push(ImageRecord {
            image_id,
            keywords: vec![concept_noun(c)],
            location: None,
            questions: question_sets[c].clone(),
            split: Split::Unassigned,
        });
        concepts.push(c);
    }
    Ok(SyntheticCorpus {
        records,
        features,
        concepts,
    })
}
