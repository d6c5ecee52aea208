//! Question generation from a trained model: greedy, beam and diverse beam
//! search, plus exhaustive enumeration as a test oracle.
//!
//! A hypothesis never contains `⟨start⟩`; every other id, `⟨pad⟩` and
//! `⟨unk⟩` included, is a legal continuation. Scores are raw sums of step
//! log-probabilities with no length normalization.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_atomic, FeatureTable, ImageRecord, Vocabulary, END, START};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seq_model::{Model, State};
use crate::tensor::cast_vec;

/// Largest search space [`exhaustive_top_k`] will enumerate.
pub const ENUMERATION_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam,
    Dbs,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Beam => "beam",
            Strategy::Dbs => "dbs",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "beam" => Ok(Strategy::Beam),
            "dbs" | "diverse" => Ok(Strategy::Dbs),
            other => Err(Error::Config(format!("unknown decoding strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub strategy: Strategy,
    /// Beam width `k`.
    pub beam_size: usize,
    /// Number of plain beam steps `T` before clustering starts.
    pub min_steps: usize,
    /// Jaccard threshold `θ` for joining a cluster.
    pub similarity_threshold: f64,
    /// Maximum tokens per hypothesis, `⟨end⟩` included.
    pub max_len: usize,
    /// Cap on the diverse beam result list.
    pub max_results: usize,
    pub seed: u64,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Dbs,
            beam_size: 5,
            min_steps: 3,
            similarity_threshold: 0.5,
            max_len: 20,
            max_results: 10,
            seed: 0,
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.min_steps == 0 || self.max_len == 0 || self.max_results == 0 {
            return Err(Error::Config("beam size, T, max_len and max_results must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.similarity_threshold) {
            return Err(Error::Config(format!(
                "similarity threshold {} outside [0, 1]",
                self.similarity_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis<T> {
    /// Generated ids after `⟨start⟩`; ends with `⟨end⟩` when finished.
    pub tokens: Vec<usize>,
    pub logprob: T,
    pub finished: bool,
    /// Recurrent state before the last token is fed back in.
    pub state: State<T>,
}

impl<T: Scalar> Hypothesis<T> {
    fn root(init: &State<T>) -> Self {
        Self {
            tokens: Vec::new(),
            logprob: T::zero(),
            finished: false,
            state: init.clone(),
        }
    }

    /// The question without its trailing `⟨end⟩`.
    pub fn question(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&END, rest)) if self.finished => rest,
            _ => &self.tokens,
        }
    }

    fn last_input(&self) -> usize {
        self.tokens.last().copied().unwrap_or(START)
    }
}

/// Logprob descending, then shorter first, then lexicographic ids.
pub fn rank<T: Scalar>(a: &Hypothesis<T>, b: &Hypothesis<T>) -> Ordering {
    b.logprob
        .partial_cmp(&a.logprob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Ids that may follow `logp`'s context, best first (lowest id on ties).
fn ranked_continuations<T: Scalar>(logp: &[T]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..logp.len()).filter(|&id| id != START).collect();
    ids.sort_by(|&a, &b| logp[b].partial_cmp(&logp[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    ids
}

/// Children of `hyp` for its best `k` continuations.
fn expand<T: Scalar>(model: &Model<T>, hyp: &Hypothesis<T>, k: usize, out: &mut Vec<Hypothesis<T>>) -> Result<()> {
    let (state, logp) = model.step_log_probs(&hyp.state, hyp.last_input())?;
    for id in ranked_continuations(&logp).into_iter().take(k) {
        let mut tokens = Vec::with_capacity(hyp.tokens.len() + 1);
        tokens.extend_from_slice(&hyp.tokens);
        tokens.push(id);
        out.push(Hypothesis {
            tokens,
            logprob: hyp.logprob + logp[id],
            finished: id == END,
            state: state.clone(),
        });
    }
    Ok(())
}

fn expand_all<T: Scalar>(model: &Model<T>, active: &[Hypothesis<T>], k: usize) -> Result<Vec<Hypothesis<T>>> {
    let mut out = Vec::with_capacity(active.len() * k);
    for hyp in active {
        expand(model, hyp, k, &mut out)?;
    }
    out.sort_by(rank);
    Ok(out)
}

/// Moves finished candidates to `finished` and keeps the best `k` of the rest.
fn select_beam<T: Scalar>(candidates: Vec<Hypothesis<T>>, k: usize, finished: &mut Vec<Hypothesis<T>>) -> Vec<Hypothesis<T>> {
    let mut active = Vec::with_capacity(k);
    for c in candidates {
        if c.finished {
            finished.push(c);
        } else if active.len() < k {
            active.push(c);
        }
    }
    active
}

/// Argmax decoding from `init`.
pub fn greedy_decode<T: Scalar>(model: &Model<T>, init: &State<T>, max_len: usize) -> Result<Hypothesis<T>> {
    let mut hyp = Hypothesis::root(init);
    while hyp.tokens.len() < max_len && !hyp.finished {
        let (state, logp) = model.step_log_probs(&hyp.state, hyp.last_input())?;
        let id = ranked_continuations(&logp)[0];
        hyp.tokens.push(id);
        hyp.logprob += logp[id];
        hyp.finished = id == END;
        hyp.state = state;
    }
    Ok(hyp)
}

/// Standard beam search of width `k`; returns up to `k` hypotheses, best
/// first. Stops once `k` hypotheses have finished, the beam empties, or
/// `max_len` tokens have been produced; short results are padded with the
/// best unfinished hypotheses.
pub fn beam_search<T: Scalar>(model: &Model<T>, init: &State<T>, k: usize, max_len: usize) -> Result<Vec<Hypothesis<T>>> {
    if k == 0 {
        return Err(Error::Config("beam size must be ≥ 1".into()));
    }
    let mut active = vec![Hypothesis::root(init)];
    let mut finished = Vec::new();
    for _ in 0..max_len {
        let candidates = expand_all(model, &active, k)?;
        active = select_beam(candidates, k, &mut finished);
        if finished.len() >= k || active.is_empty() {
            break;
        }
    }
    finished.sort_by(rank);
    finished.truncate(k);
    let missing = k - finished.len();
    finished.extend(active.into_iter().take(missing));
    finished.sort_by(rank);
    Ok(finished)
}

/// Jaccard similarity of the token sets of `a` and `b`; two empty sets are
/// identical.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<usize> = a.iter().copied().collect();
    let b: BTreeSet<usize> = b.iter().copied().collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(&b).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// Greedy leader clustering in the given order: each item joins the first
/// cluster whose first member is at least `theta`-similar, else opens a new
/// one. Returns member indices per cluster.
pub fn cluster_by_similarity(items: &[&[usize]], theta: f64) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for (i, item) in items.iter().enumerate() {
        match clusters.iter_mut().find(|c| jaccard(items[c[0]], item) >= theta) {
            Some(c) => c.push(i),
            None => clusters.push(vec![i]),
        }
    }
    clusters
}

/// Generator for the cluster-head draws of one image, so results do not
/// depend on which images are decoded together.
pub fn image_rng(seed: u64, image_id: &str) -> ChaCha8Rng {
    // 64-bit FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in image_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Diverse beam search: `T` plain beam steps, then at every later step the
/// unfinished candidates are clustered by token-set similarity and one
/// randomly chosen head per cluster survives (at most `k`, best first).
/// Every hypothesis that emits `⟨end⟩` is collected; the deduplicated list is
/// returned best first, truncated to `max_results`. If nothing finished, the
/// best surviving beams are returned instead.
pub fn diverse_beam_search<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    init: &State<T>,
    config: &DecodingConfig,
    rng: &mut R,
) -> Result<Vec<Hypothesis<T>>> {
    config.validate()?;
    let k = config.beam_size;
    let mut active = vec![Hypothesis::root(init)];
    let mut results = Vec::new();
    for step in 1..=config.max_len {
        let candidates = expand_all(model, &active, k)?;
        if step <= config.min_steps {
            active = select_beam(candidates, k, &mut results);
        } else {
            let (done, open): (Vec<_>, Vec<_>) = candidates.into_iter().partition(|c| c.finished);
            results.extend(done);
            let token_lists: Vec<&[usize]> = open.iter().map(|h| h.tokens.as_slice()).collect();
            let clusters = cluster_by_similarity(&token_lists, config.similarity_threshold);
            let mut heads: Vec<usize> = clusters
                .iter()
                .map(|members| members[rng.random_range(0..members.len())])
                .collect();
            heads.sort_unstable();
            heads.truncate(k);
            let mut open: Vec<Option<Hypothesis<T>>> = open.into_iter().map(Some).collect();
            active = heads.into_iter().filter_map(|i| open[i].take()).collect();
        }
        if active.is_empty() {
            break;
        }
    }
    results.sort_by(rank);
    let mut seen = HashSet::new();
    results.retain(|h| seen.insert(h.tokens.clone()));
    results.truncate(config.max_results);
    if results.is_empty() {
        results = active;
        results.truncate(config.max_results);
    }
    Ok(results)
}

/// Scores every sequence that ends in `⟨end⟩` within `max_len` tokens or
/// reaches `max_len` unfinished, and returns the best `k`.
pub fn exhaustive_top_k<T: Scalar>(model: &Model<T>, init: &State<T>, max_len: usize, k: usize) -> Result<Vec<Hypothesis<T>>> {
    let space = (model.vocab_size() as f64).powi(max_len as i32);
    if space > ENUMERATION_LIMIT {
        return Err(Error::EnumerationTooLarge(space));
    }
    let mut out = Vec::new();
    let mut stack = vec![Hypothesis::root(init)];
    while let Some(hyp) = stack.pop() {
        if hyp.finished || hyp.tokens.len() == max_len {
            out.push(hyp);
            continue;
        }
        expand(model, &hyp, usize::MAX, &mut stack)?;
    }
    out.sort_by(rank);
    out.truncate(k);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedQuestion {
    pub tokens: Vec<usize>,
    pub logprob: f64,
}

/// Questions produced for one image, best first, without `⟨end⟩`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSet {
    pub image_id: String,
    pub questions: Vec<GeneratedQuestion>,
}

impl GenerationSet {
    fn from_hypotheses<T: Scalar>(image_id: &str, hyps: &[Hypothesis<T>]) -> Self {
        Self {
            image_id: image_id.to_string(),
            questions: hyps
                .iter()
                .map(|h| GeneratedQuestion {
                    tokens: h.question().to_vec(),
                    logprob: h.logprob.to_f64_lossy(),
                })
                .collect(),
        }
    }
}

/// Decodes one image with the configured strategy.
pub fn decode_image<T: Scalar>(
    model: &Model<T>,
    image_id: &str,
    feature: &[T],
    keywords: &[usize],
    config: &DecodingConfig,
) -> Result<GenerationSet> {
    config.validate()?;
    let init = model.encode(feature, keywords)?;
    let hyps = match config.strategy {
        Strategy::Greedy => vec![greedy_decode(model, &init, config.max_len)?],
        Strategy::Beam => beam_search(model, &init, config.beam_size, config.max_len)?,
        Strategy::Dbs => {
            let mut rng = image_rng(config.seed, image_id);
            diverse_beam_search(model, &init, config, &mut rng)?
        }
    };
    Ok(GenerationSet::from_hypotheses(image_id, &hyps))
}

/// Decodes every record in parallel; output order follows `records`.
pub fn decode_records<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    records: &[&ImageRecord],
    features: &FeatureTable,
    config: &DecodingConfig,
) -> Result<Vec<GenerationSet>> {
    config.validate()?;
    records
        .par_iter()
        .map(|r| {
            let feature: Vec<T> = cast_vec(features.require(&r.image_id)?);
            decode_image(model, &r.image_id, &feature, &vocab.encode(&r.keywords), config)
        })
        .collect()
}

/// Decoding settings echoed into generation files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub k: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub theta: f64,
    pub seed: u64,
}

impl From<&DecodingConfig> for ConfigSummary {
    fn from(c: &DecodingConfig) -> Self {
        Self {
            k: c.beam_size,
            t: c.min_steps,
            theta: c.similarity_threshold,
            seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionRecord {
    pub tokens: Vec<String>,
    pub logprob: f64,
}

/// One line of a generation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRecord {
    pub image_id: String,
    pub questions: Vec<QuestionRecord>,
    pub strategy: Strategy,
    pub config: ConfigSummary,
}

impl GenerationRecord {
    pub fn new(set: &GenerationSet, vocab: &Vocabulary, config: &DecodingConfig) -> Self {
        Self {
            image_id: set.image_id.clone(),
            questions: set
                .questions
                .iter()
                .map(|q| QuestionRecord {
                    tokens: vocab.decode(&q.tokens),
                    logprob: q.logprob,
                })
                .collect(),
            strategy: config.strategy,
            config: config.into(),
        }
    }
}

pub fn generations_to_string(records: &[GenerationRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_generations(path: impl AsRef<Path>, records: &[GenerationRecord]) -> Result<()> {
    write_atomic(path.as_ref(), generations_to_string(records)?.as_bytes())
}

pub fn parse_generations(text: &str, origin: &Path) -> Result<Vec<GenerationRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: GenerationRecord = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
        if !seen.insert(rec.image_id.clone()) {
            return Err(parse(format!("duplicate image_id `{}`", rec.image_id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_generations(path: impl AsRef<Path>) -> Result<Vec<GenerationRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_generations(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PAD;
    use crate::seq_model::ModelDims;

    fn dims(vocab: usize) -> ModelDims {
        ModelDims {
            vocab_size: vocab,
            embed_dim: 4,
            hidden_dim: 6,
            feature_dim: 3,
        }
    }

    fn random_setup(vocab: usize, seed: u64, scale: f64) -> (Model<f64>, State<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::random(dims(vocab), scale, &mut rng);
        let feature = crate::tensor::uniform_vec(3, 1.0, &mut rng);
        let init = model.encode(&feature, &[4]).unwrap();
        (model, init)
    }

    fn assert_rescores(model: &Model<f64>, init: &State<f64>, hyps: &[Hypothesis<f64>]) {
        for h in hyps {
            let again = model.sequence_log_prob(init, &h.tokens).unwrap();
            assert!((again - h.logprob).abs() < 1e-9, "{:?}: {} vs {}", h.tokens, h.logprob, again);
            assert!(h.logprob <= 0.0);
            assert_eq!(h.finished, h.tokens.last() == Some(&END));
            assert!(!h.tokens.contains(&START));
        }
    }

    #[test]
    fn greedy_follows_a_rigged_path() {
        // Output bias favours token 5 and the recurrent path is zero, so the
        // distribution is the same every step; then flip to ⟨end⟩ via max_len.
        let mut model = Model::<f64>::zeros(dims(7));
        model.output.b[5] = 30.0;
        let init = State::zeros(6);
        let hyp = greedy_decode(&model, &init, 3).unwrap();
        assert_eq!(hyp.tokens, vec![5, 5, 5]);
        assert!(!hyp.finished);
        model.output.b[END] = 60.0;
        let hyp = greedy_decode(&model, &init, 3).unwrap();
        assert_eq!(hyp.tokens, vec![END]);
        assert!(hyp.finished);
        assert!(hyp.question().is_empty());
    }

    #[test]
    fn greedy_breaks_ties_towards_lowest_id() {
        let model = Model::<f64>::zeros(dims(6));
        let hyp = greedy_decode(&model, &State::zeros(6), 4).unwrap();
        assert_eq!(hyp.tokens, vec![PAD; 4]);
        assert!((hyp.logprob + 4.0 * 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn greedy_equals_beam_of_width_one() {
        for seed in 0..100 {
            let (model, init) = random_setup(9, seed, 1.5);
            let g = greedy_decode(&model, &init, 8).unwrap();
            let b = beam_search(&model, &init, 1, 8).unwrap();
            assert_eq!(b.len(), 1);
            assert_eq!(b[0].tokens, g.tokens, "seed {seed}");
            assert_eq!(b[0].logprob, g.logprob);
        }
    }

    #[test]
    fn exhaustive_enumeration_counts() {
        let (model, init) = random_setup(5, 1, 0.5);
        assert_eq!(exhaustive_top_k(&model, &init, 2, usize::MAX).unwrap().len(), 1 + 3 + 9);
        let all = exhaustive_top_k(&model, &init, 4, usize::MAX).unwrap();
        assert_eq!(all.len(), 1 + 3 + 9 + 27 + 81);
        assert_eq!(all.iter().filter(|h| h.finished).count(), 40);
        assert!(matches!(
            exhaustive_top_k(&model, &init, 9, 1),
            Err(Error::EnumerationTooLarge(_))
        ));
    }

    #[test]
    fn exhaustive_ties_follow_documented_order() {
        let model = Model::<f64>::zeros(dims(5));
        let all = exhaustive_top_k(&model, &State::zeros(6), 2, usize::MAX).unwrap();
        let got: Vec<Vec<usize>> = all.iter().take(5).map(|h| h.tokens.clone()).collect();
        assert_eq!(got, vec![vec![END], vec![0, 0], vec![0, END], vec![0, 3], vec![0, 4]]);
    }

    #[test]
    fn wide_beam_matches_exhaustive_oracle() {
        for seed in 0..5 {
            let (model, init) = random_setup(5, seed, 1.0);
            let oracle = exhaustive_top_k(&model, &init, 4, usize::MAX).unwrap();
            let beam = beam_search(&model, &init, oracle.len(), 4).unwrap();
            assert_eq!(beam.len(), oracle.len());
            for (b, o) in beam.iter().zip(&oracle) {
                assert_eq!(b.tokens, o.tokens);
                assert!((b.logprob - o.logprob).abs() < 1e-9);
            }
            assert_rescores(&model, &init, &beam);
            let greedy = greedy_decode(&model, &init, 4).unwrap();
            assert!(oracle[0].logprob >= greedy.logprob);
        }
    }

    #[test]
    fn beam_results_rescore_and_are_sorted() {
        for seed in 0..20 {
            let (model, init) = random_setup(12, seed, 1.0);
            let beam = beam_search(&model, &init, 5, 10).unwrap();
            assert_eq!(beam.len(), 5);
            assert!(beam.windows(2).all(|w| rank(&w[0], &w[1]) != Ordering::Greater));
            assert_rescores(&model, &init, &beam);
        }
    }

    #[test]
    fn jaccard_and_clustering() {
        assert_eq!(jaccard(&[1, 2, 3], &[3, 2, 1, 1]), 1.0);
        assert_eq!(jaccard(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(jaccard(&[], &[]), 1.0);
        assert!((jaccard(&[1, 2, 3], &[2, 3, 4]) - 0.5).abs() < 1e-15);

        let shared: Vec<&[usize]> = vec![&[5, 6, 7], &[5, 6, 7], &[7, 6, 5]];
        assert_eq!(cluster_by_similarity(&shared, 0.5), vec![vec![0, 1, 2]]);
        let distinct: Vec<&[usize]> = vec![&[5, 6], &[5, 7], &[6, 7], &[8]];
        assert_eq!(cluster_by_similarity(&distinct, 1.0).len(), 4);
        // Membership is decided against the first member only.
        let chain: Vec<&[usize]> = vec![&[1, 2], &[2, 3], &[3, 4]];
        assert_eq!(cluster_by_similarity(&chain, 1.0 / 3.0), vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn dbs_is_deterministic_and_rescores() {
        let cfg = DecodingConfig { max_len: 10, ..Default::default() };
        for seed in 0..10 {
            let (model, init) = random_setup(12, seed, 1.5);
            let a = diverse_beam_search(&model, &init, &cfg, &mut image_rng(7, "img00001")).unwrap();
            let b = diverse_beam_search(&model, &init, &cfg, &mut image_rng(7, "img00001")).unwrap();
            assert_eq!(a, b);
            assert!(!a.is_empty() && a.len() <= cfg.max_results);
            assert_rescores(&model, &init, &a);
            let unique: HashSet<_> = a.iter().map(|h| h.tokens.clone()).collect();
            assert_eq!(unique.len(), a.len());
        }
    }

    #[test]
    fn dbs_prefix_matches_beam_until_clustering() {
        // With T ≥ max_len no clustering happens; the finished hypotheses are
        // a superset of what beam search reports as finished.
        let (model, init) = random_setup(8, 3, 1.5);
        let cfg = DecodingConfig { min_steps: 6, max_len: 6, max_results: 1000, ..Default::default() };
        let dbs = diverse_beam_search(&model, &init, &cfg, &mut image_rng(0, "x")).unwrap();
        let beam = beam_search(&model, &init, 5, 6).unwrap();
        for b in beam.iter().filter(|b| b.finished) {
            assert!(dbs.iter().any(|d| d.tokens == b.tokens), "{:?}", b.tokens);
        }
    }

    #[test]
    fn dbs_falls_back_to_beams_when_nothing_finishes() {
        let mut model = Model::<f64>::zeros(dims(7));
        model.output.b[END] = -50.0;
        let cfg = DecodingConfig { max_len: 5, ..Default::default() };
        let out = diverse_beam_search(&model, &State::zeros(6), &cfg, &mut image_rng(0, "x")).unwrap();
        assert!(!out.is_empty());
        assert!(out.iter().all(|h| !h.finished && h.tokens.len() == 5));
    }

    #[test]
    fn image_rng_depends_on_seed_and_id() {
        let draw = |s, id| image_rng(s, id).random::<u64>();
        assert_eq!(draw(1, "a"), draw(1, "a"));
        assert_ne!(draw(1, "a"), draw(1, "b"));
        assert_ne!(draw(1, "a"), draw(2, "a"));
    }

    #[test]
    fn config_validation_and_strategy_names() {
        assert!(DecodingConfig::default().validate().is_ok());
        assert!(DecodingConfig { beam_size: 0, ..Default::default() }.validate().is_err());
        assert!(DecodingConfig { similarity_threshold: 1.5, ..Default::default() }.validate().is_err());
        for s in [Strategy::Greedy, Strategy::Beam, Strategy::Dbs] {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("nucleus".parse::<Strategy>().is_err());
    }

    #[test]
    fn generation_records_round_trip() {
        let vocab = Vocabulary::from_tokens(["a", "b"], 1);
        let set = GenerationSet {
            image_id: "img1".into(),
            questions: vec![GeneratedQuestion { tokens: vec![4, 5], logprob: -1.25 }],
        };
        let cfg = DecodingConfig::default();
        let rec = GenerationRecord::new(&set, &vocab, &cfg);
        let text = generations_to_string(std::slice::from_ref(&rec)).unwrap();
        assert!(text.contains(r#""config":{"k":5,"T":3,"theta":0.5,"seed":0}"#), "{text}");
        assert!(text.contains(r#""tokens":["a","b"]"#));
        assert_eq!(parse_generations(&text, Path::new("g")).unwrap(), vec![rec]);
        let dup = format!("{text}{text}");
        assert!(matches!(parse_generations(&dup, Path::new("g")), Err(Error::Parse { line: 2, .. })));
    }

    proptest::proptest! {
        #[test]
        fn beam_invariants(seed in 0u64..1000, k in 1usize..6, max_len in 1usize..7) {
            let (model, init) = random_setup(8, seed, 1.5);
            let hyps = beam_search(&model, &init, k, max_len).unwrap();
            proptest::prop_assert!(!hyps.is_empty() && hyps.len() <= k);
            for h in &hyps {
                proptest::prop_assert!(h.tokens.len() <= max_len);
                proptest::prop_assert!(h.logprob <= 0.0);
                proptest::prop_assert_eq!(h.finished, h.tokens.last() == Some(&END));
            }
        }
    }
}
