//! Corpus-level text metrics (BLEU, exact-match METEOR, ROUGE-L, CIDEr) and
//! the diversity measures generative strength and inventiveness.
//!
//! Every n-gram metric is reported on a 0–100 scale. Tokens are compared only
//! for equality, so any `Ord` token type works (ids or strings).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ImageRecord, Split};
use crate::decoding::GenerationRecord;
use crate::error::{Error, Result};

pub const BLEU_ORDER: usize = 4;
pub const CIDER_ORDER: usize = 4;
pub const ROUGE_BETA: f64 = 1.2;
pub const METEOR_VARIANT: &str = "exact-match";
pub const BLEU_SMOOTHING: &str = "zero n-gram precision replaced by 1/(2*hyp_len)";

/// Alignment search nodes explored before METEOR settles for the best
/// alignment found so far.
const METEOR_SEARCH_BUDGET: usize = 200_000;

fn ngram_counts<W: Ord>(tokens: &[W], n: usize) -> BTreeMap<&[W], usize> {
    let mut out = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *out.entry(g).or_insert(0) += 1;
        }
    }
    out
}

/// Sentence BLEU with clipped precisions up to `max_n`, closest-reference
/// brevity penalty (ties go to the shorter reference) and 1/(2·|hyp|) in
/// place of zero precisions. Hypotheses shorter than `max_n` use orders up
/// to their own length.
pub fn bleu<W: Ord>(hyp: &[W], refs: &[Vec<W>], max_n: usize) -> f64 {
    if hyp.is_empty() || refs.is_empty() || max_n == 0 {
        return 0.0;
    }
    let c = hyp.len();
    let order = max_n.min(c);
    let mut log_sum = 0.0;
    for n in 1..=order {
        let counts = ngram_counts(hyp, n);
        let mut max_ref: BTreeMap<&[W], usize> = BTreeMap::new();
        for r in refs {
            for (g, k) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        let clipped: usize = counts
            .iter()
            .map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if clipped == 0 {
            1.0 / (2.0 * c as f64)
        } else {
            clipped as f64 / (c - n + 1) as f64
        };
        log_sum += p.ln();
    }
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(c);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * (log_sum / order as f64).exp()
}

/// Minimum number of chunks over one-to-one exact alignments with the
/// maximum number of matches; returns `(matches, chunks)`.
pub fn meteor_alignment<W: Ord>(hyp: &[W], reference: &[W]) -> (usize, usize) {
    let mut ref_positions: BTreeMap<&W, Vec<usize>> = BTreeMap::new();
    for (j, w) in reference.iter().enumerate() {
        ref_positions.entry(w).or_default().push(j);
    }
    let mut hyp_count: BTreeMap<&W, usize> = BTreeMap::new();
    for w in hyp {
        *hyp_count.entry(w).or_insert(0) += 1;
    }
    // Per word: how many hyp occurrences may stay unmatched.
    let mut skips: BTreeMap<&W, usize> = BTreeMap::new();
    let mut matches = 0;
    for (&w, &ch) in &hyp_count {
        let cr = ref_positions.get(w).map_or(0, Vec::len);
        matches += ch.min(cr);
        skips.insert(w, ch - ch.min(cr));
    }
    if matches == 0 {
        return (0, 0);
    }

    struct Search<'a, W> {
        hyp: &'a [W],
        ref_positions: BTreeMap<&'a W, Vec<usize>>,
        used: Vec<bool>,
        skips: BTreeMap<&'a W, usize>,
        best: usize,
        nodes: usize,
    }

    impl<W: Ord> Search<'_, W> {
        fn run(&mut self, i: usize, prev: Option<usize>, chunks: usize) {
            self.nodes += 1;
            if chunks >= self.best || self.nodes > METEOR_SEARCH_BUDGET {
                return;
            }
            if i == self.hyp.len() {
                self.best = chunks;
                return;
            }
            let w = &self.hyp[i];
            let positions = self.ref_positions.get(w).cloned().unwrap_or_default();
            // Extending the current chunk first finds good bounds early.
            let next = prev.map(|p| p + 1);
            let order = positions
                .iter()
                .copied()
                .filter(|&j| Some(j) == next)
                .chain(positions.iter().copied().filter(|&j| Some(j) != next));
            for j in order.collect::<Vec<_>>() {
                if self.used[j] {
                    continue;
                }
                self.used[j] = true;
                let extra = usize::from(Some(j) != next);
                self.run(i + 1, Some(j), chunks + extra);
                self.used[j] = false;
                if self.best == 1 {
                    return;
                }
            }
            if let Some(s) = self.skips.get_mut(w) {
                if *s > 0 {
                    *s -= 1;
                    self.run(i + 1, None, chunks);
                    *self.skips.get_mut(w).expect("present") += 1;
                }
            }
        }
    }

    let mut search = Search {
        hyp,
        ref_positions,
        used: vec![false; reference.len()],
        skips,
        best: usize::MAX,
        nodes: 0,
    };
    search.run(0, None, 0);
    (matches, search.best)
}

/// METEOR with exact unigram matching only:
/// `F = PR / (0.9P + 0.1R)`, penalty `0.5 (chunks / matches)³`, best reference.
pub fn meteor_lite<W: Ord>(hyp: &[W], refs: &[Vec<W>]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    refs.iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let (m, chunks) = meteor_alignment(hyp, r);
            if m == 0 {
                return 0.0;
            }
            let p = m as f64 / hyp.len() as f64;
            let rec = m as f64 / r.len() as f64;
            let f = p * rec / (0.9 * p + 0.1 * rec);
            let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
            100.0 * f * (1.0 - penalty)
        })
        .fold(0.0, f64::max)
}

pub fn lcs_len<W: Eq>(a: &[W], b: &[W]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS-based F-measure with β = 1.2, best reference.
pub fn rouge_l<W: Eq>(hyp: &[W], refs: &[Vec<W>]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    refs.iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let l = lcs_len(hyp, r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / hyp.len() as f64;
            let rec = l as f64 / r.len() as f64;
            100.0 * (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Per-order n-gram document frequencies over a reference corpus.
#[derive(Debug, Clone)]
pub struct NGramStats<W> {
    pub n_images: usize,
    pub df: Vec<BTreeMap<Vec<W>, usize>>,
}

impl<W: Ord + Clone> NGramStats<W> {
    pub fn from_references(refs_by_image: &[Vec<Vec<W>>], max_n: usize) -> Self {
        let mut df = vec![BTreeMap::new(); max_n];
        for refs in refs_by_image {
            for (n, table) in df.iter_mut().enumerate() {
                let seen: BTreeSet<&[W]> = refs.iter().flat_map(|r| ngram_counts(r, n + 1).into_keys()).collect();
                for g in seen {
                    *table.entry(g.to_vec()).or_insert(0) += 1;
                }
            }
        }
        Self {
            n_images: refs_by_image.len(),
            df,
        }
    }

    /// `ln(N / max(1, df))`; n-grams no reference contains get `ln N`.
    pub fn idf(&self, n: usize, gram: &[W]) -> f64 {
        let df = self.df[n - 1].get(gram).copied().unwrap_or(0).max(1);
        (self.n_images as f64 / df as f64).ln()
    }

    fn tfidf<'a>(&self, tokens: &'a [W], n: usize) -> BTreeMap<&'a [W], f64> {
        ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, k)| {
                let idf = self.idf(n, g);
                (g, k as f64 * idf)
            })
            .collect()
    }
}

fn cosine<W: Ord>(a: &BTreeMap<&[W], f64>, b: &BTreeMap<&[W], f64>) -> f64 {
    let norm = |v: &BTreeMap<&[W], f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    dot / (na * nb)
}

/// CIDEr of one hypothesis on the usual 0–10 scale.
pub fn cider_image<W: Ord + Clone>(hyp: &[W], refs: &[Vec<W>], stats: &NGramStats<W>) -> f64 {
    if hyp.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let max_n = stats.df.len();
    let mut total = 0.0;
    for n in 1..=max_n {
        let h = stats.tfidf(hyp, n);
        let sim: f64 = refs.iter().map(|r| cosine(&h, &stats.tfidf(r, n))).sum();
        total += sim / refs.len() as f64;
    }
    10.0 * total / max_n as f64
}

/// Corpus CIDEr on the 0–100 reporting scale. A single-image corpus has all
/// idf = 0 and scores 0.
pub fn cider<W: Ord + Clone>(hyps: &[Vec<W>], refs_by_image: &[Vec<Vec<W>>]) -> Result<f64> {
    if hyps.len() != refs_by_image.len() {
        return Err(Error::dim("cider references", hyps.len(), refs_by_image.len()));
    }
    if hyps.is_empty() {
        return Ok(0.0);
    }
    if hyps.len() == 1 {
        log::warn!("CIDEr over a single image: every idf is 0, so the score is 0");
    }
    let stats = NGramStats::from_references(refs_by_image, CIDER_ORDER);
    let total: f64 = hyps
        .iter()
        .zip(refs_by_image)
        .map(|(h, r)| cider_image(h, r, &stats))
        .sum();
    Ok(10.0 * total / hyps.len() as f64)
}

/// Mean number of distinct questions per image.
pub fn generative_strength<W: Ord>(sets: &[Vec<Vec<W>>]) -> f64 {
    if sets.is_empty() {
        return 0.0;
    }
    let distinct: usize = sets
        .iter()
        .map(|qs| qs.iter().collect::<BTreeSet<_>>().len())
        .sum();
    distinct as f64 / sets.len() as f64
}

/// Percentage of distinct generated questions (over all images) that never
/// occur in `train`.
pub fn inventiveness<W: Ord>(sets: &[Vec<Vec<W>>], train: &BTreeSet<Vec<W>>) -> f64 {
    let distinct: BTreeSet<&Vec<W>> = sets.iter().flatten().collect();
    if distinct.is_empty() {
        log::warn!("no generated questions; inventiveness defined as 0");
        return 0.0;
    }
    let novel = distinct.iter().filter(|q| !train.contains(**q)).count();
    100.0 * novel as f64 / distinct.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub image_id: String,
    /// Top-1 question the n-gram scores refer to.
    pub question: Vec<String>,
    pub bleu: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub unique_questions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub generative_strength: f64,
    pub inventiveness_pct: f64,
    pub n_images: usize,
    pub meteor_variant: String,
    pub bleu_smoothing: String,
    pub bleu_order: usize,
    pub scale: String,
    pub per_image: Vec<ImageScores>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::corpus::write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Highest-logprob question; the earliest wins ties.
fn top1(rec: &GenerationRecord) -> Vec<String> {
    rec.questions
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.logprob.total_cmp(&b.logprob).then(j.cmp(i)))
        .map(|(_, q)| q.tokens.clone())
        .unwrap_or_default()
}

/// Scores a generation file against reference questions.
///
/// `references` supplies each image's questions; questions of `train`-split
/// records in `training` define what counts as seen for inventiveness.
/// N-gram metrics use the top-1 question per image; the corpus mean is taken
/// in ascending `image_id` order.
pub fn evaluate_run(
    generated: &[GenerationRecord],
    references: &[ImageRecord],
    training: &[ImageRecord],
) -> Result<MetricReport> {
    let by_id: HashMap<&str, &ImageRecord> = references.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut gens: Vec<&GenerationRecord> = generated.iter().collect();
    gens.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    if let Some(w) = gens.windows(2).find(|w| w[0].image_id == w[1].image_id) {
        return Err(Error::DuplicateId(w[0].image_id.clone()));
    }
    let refs: Vec<Vec<Vec<String>>> = gens
        .iter()
        .map(|g| match by_id.get(g.image_id.as_str()) {
            Some(r) if !r.questions.is_empty() => Ok(r.questions.clone()),
            _ => Err(Error::MissingReferences(g.image_id.clone())),
        })
        .collect::<Result<_>>()?;
    let hyps: Vec<Vec<String>> = gens.iter().map(|g| top1(g)).collect();
    let sets: Vec<Vec<Vec<String>>> = gens
        .iter()
        .map(|g| g.questions.iter().map(|q| q.tokens.clone()).collect())
        .collect();

    let stats = NGramStats::from_references(&refs, CIDER_ORDER);
    if gens.len() == 1 {
        log::warn!("CIDEr over a single image: every idf is 0, so the score is 0");
    }
    let per_image: Vec<ImageScores> = (0..gens.len())
        .into_par_iter()
        .map(|i| ImageScores {
            image_id: gens[i].image_id.clone(),
            question: hyps[i].clone(),
            bleu: bleu(&hyps[i], &refs[i], BLEU_ORDER),
            meteor: meteor_lite(&hyps[i], &refs[i]),
            rouge_l: rouge_l(&hyps[i], &refs[i]),
            cider: 10.0 * cider_image(&hyps[i], &refs[i], &stats),
            unique_questions: sets[i].iter().collect::<BTreeSet<_>>().len(),
        })
        .collect();

    let n = per_image.len();
    let mean = |f: fn(&ImageScores) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_image.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let train: BTreeSet<Vec<String>> = training
        .iter()
        .filter(|r| r.split == Split::Train)
        .flat_map(|r| r.questions.iter().cloned())
        .collect();
    Ok(MetricReport {
        bleu: mean(|s| s.bleu),
        meteor: mean(|s| s.meteor),
        rouge_l: mean(|s| s.rouge_l),
        cider: mean(|s| s.cider),
        generative_strength: generative_strength(&sets),
        inventiveness_pct: inventiveness(&sets, &train),
        n_images: n,
        meteor_variant: METEOR_VARIANT.into(),
        bleu_smoothing: BLEU_SMOOTHING.into(),
        bleu_order: BLEU_ORDER,
        scale: "0-100".into(),
        per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::{ConfigSummary, QuestionRecord, Strategy};

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    fn refs(list: &[&str]) -> Vec<Vec<&'static str>> {
        list.iter()
            .map(|s| s.split_whitespace().map(|w| &*Box::leak(w.to_string().into_boxed_str())).collect())
            .collect()
    }

    #[test]
    fn bleu_examples() {
        let r = refs(&["what kind of dog is this"]);
        assert!((bleu(&toks("what kind of dog is this"), &r, 4) - 100.0).abs() < 1e-9);
        let r = refs(&["what is that"]);
        let want = 100.0 * ((2.0 / 3.0) * 0.5f64).sqrt();
        assert!((bleu(&toks("what is this"), &r, 2) - want).abs() < 1e-9);
        assert!((want - 57.735).abs() < 1e-3);
        assert!((bleu(&toks("what is that"), &r, 4) - 100.0).abs() < 1e-9);
        assert_eq!(bleu::<&str>(&[], &r, 4), 0.0);
    }

    #[test]
    fn bleu_without_overlap_is_smoothed_near_zero() {
        let r = refs(&["what kind of dog is this one over here on the left"]);
        let hyp = toks("a b c");
        let got = bleu(&hyp, &r, 4);
        // Every order falls back to 1/(2·3); brevity penalty for 3 vs 12.
        let want = 100.0 * (1.0 - 12.0 / 3.0f64).exp() / 6.0;
        assert!((got - want).abs() < 1e-9);
        assert!(got > 0.0 && got < 1.0);

        // Without a brevity penalty the floor is 100/(2·|hyp|).
        let r = refs(&["what colour is the car"]);
        let got = bleu(&toks("a b c d e"), &r, 4);
        assert!((got - 10.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_brevity_penalty_prefers_shorter_reference_on_ties() {
        let r = refs(&["a b c d e f", "a b"]);
        // |hyp| = 4 is equidistant from 2 and 6: the shorter reference wins,
        // so no penalty applies.
        let hyp = toks("a b x y");
        let p1: f64 = 2.0 / 4.0;
        let p2: f64 = 1.0 / 3.0;
        let p3: f64 = 1.0 / 8.0;
        let want = 100.0 * ((p1.ln() + p2.ln() + 2.0 * p3.ln()) / 4.0).exp();
        assert!((bleu(&hyp, &r, 4) - want).abs() < 1e-9);
    }

    #[test]
    fn bleu_clips_repeated_words() {
        let r = refs(&["the cat"]);
        // "the the the": unigram precision clipped to 1/3.
        let got = bleu(&toks("the the the"), &r, 1);
        assert!((got - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn meteor_examples() {
        let r = refs(&["what is this"]);
        let want = 100.0 * (1.0 - 0.5 / 27.0);
        assert!((meteor_lite(&toks("what is this"), &r) - want).abs() < 1e-9);
        assert!((want - 98.148).abs() < 1e-3);
        assert_eq!(meteor_lite(&toks("a b"), &refs(&["c d"])), 0.0);
        assert!((meteor_lite(&toks("dog"), &refs(&["dog"])) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn meteor_alignment_minimises_chunks() {
        // "the" could align to either occurrence; only one choice keeps a
        // single chunk.
        assert_eq!(meteor_alignment(&toks("the cat"), &toks("the dog the cat")), (2, 1));
        assert_eq!(meteor_alignment(&toks("b a"), &toks("a b")), (2, 2));
        assert_eq!(meteor_alignment(&toks("a x b"), &toks("a b")), (2, 2));
        let many = vec!["a"; 40];
        assert_eq!(meteor_alignment(&many, &many), (40, 1));
        let r = refs(&["a b c d"]);
        let (p, rec) = (3.0 / 3.0, 3.0 / 4.0);
        let f = p * rec / (0.9 * p + 0.1 * rec);
        let want = 100.0 * f * (1.0 - 0.5 * (2.0f64 / 3.0).powi(3));
        assert!((meteor_lite(&toks("a b d"), &r) - want).abs() < 1e-9);
    }

    #[test]
    fn rouge_examples() {
        let r = refs(&["what is this"]);
        assert!((rouge_l(&toks("what is this"), &r) - 100.0).abs() < 1e-9);
        assert!((rouge_l(&toks("what is that"), &r) - 200.0 / 3.0).abs() < 1e-9);
        assert!((rouge_l(&toks("this is what"), &r) - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(lcs_len(&toks("a b c d"), &toks("b d a c")), 2);
    }

    #[test]
    fn cider_examples() {
        let hyps = vec![toks("what breed is this dog"), toks("who painted this old house")];
        let r = vec![refs(&["what breed is this dog"]), refs(&["who painted this old house"])];
        assert!((cider(&hyps, &r).unwrap() - 100.0).abs() < 1e-9);

        let stats = NGramStats::from_references(&r, 4);
        assert!((stats.idf(1, &["what"]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(stats.idf(1, &["this"]), 0.0);
        assert_eq!(cider_image(&[], &r[0], &stats), 0.0);
        assert_eq!(cider_image(&toks("zebra stripes"), &r[0], &stats), 0.0);
        assert_eq!(cider(&hyps[..1], &r[..1]).unwrap(), 0.0);
    }

    #[test]
    fn cider_matches_hand_tfidf() {
        // Two images; image 0 hypothesis "a b" against reference "a c".
        let hyps = vec![toks("a b"), toks("d e")];
        let r = vec![refs(&["a c"]), refs(&["d e"])];
        let ln2 = 2f64.ln();
        // Unigrams: hyp {a: ln2, b: ln2 (unseen → ln N)}, ref {a: ln2, c: ln2}
        // → cosine 1/2. Higher orders share nothing.
        let img0 = 10.0 * (0.5 / 4.0);
        let img1 = 10.0 * (2.0 / 4.0);
        let want = 10.0 * (img0 + img1) / 2.0;
        assert!((cider(&hyps, &r).unwrap() - want).abs() < 1e-9);
        assert!(ln2 > 0.0);
    }

    #[test]
    fn diversity_examples() {
        let sets = vec![vec![toks("q1"), toks("q2"), toks("q2")], vec![toks("q3")]];
        assert_eq!(generative_strength(&sets), 1.5);
        assert_eq!(generative_strength(&[vec![toks("a")], vec![toks("b")]]), 1.0);
        assert_eq!(generative_strength::<&str>(&[vec![], vec![]]), 0.0);

        let gen = vec![vec![toks("q1"), toks("q2")], vec![toks("q3"), toks("q1")]];
        let train: BTreeSet<Vec<&str>> = [toks("q1")].into_iter().collect();
        assert!((inventiveness(&gen, &train) - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(inventiveness(&gen, &BTreeSet::new()), 100.0);
        let all: BTreeSet<Vec<&str>> = [toks("q1"), toks("q2"), toks("q3")].into_iter().collect();
        assert_eq!(inventiveness(&gen, &all), 0.0);
        assert_eq!(inventiveness::<&str>(&[vec![]], &all), 0.0);
    }

    fn record(id: &str, split: Split, qs: &[&str]) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            keywords: vec![],
            location: None,
            questions: qs.iter().map(|q| q.split_whitespace().map(String::from).collect()).collect(),
            split,
        }
    }

    fn gen(id: &str, qs: &[(&str, f64)]) -> GenerationRecord {
        GenerationRecord {
            image_id: id.into(),
            questions: qs
                .iter()
                .map(|(q, lp)| QuestionRecord {
                    tokens: q.split_whitespace().map(String::from).collect(),
                    logprob: *lp,
                })
                .collect(),
            strategy: Strategy::Beam,
            config: ConfigSummary { k: 5, t: 3, theta: 0.5, seed: 0 },
        }
    }

    #[test]
    fn evaluate_run_top1_equals_reference() {
        let anns = vec![
            record("i1", Split::Test, &["what breed is this dog", "is this a puppy"]),
            record("i2", Split::Test, &["who painted this old house"]),
            record("t1", Split::Train, &["is this a puppy"]),
        ];
        let gens = vec![
            gen("i2", &[("who painted this old house", -1.0)]),
            gen("i1", &[("is this a cat", -3.0), ("what breed is this dog", -2.0), ("is this a puppy", -2.5)]),
        ];
        let rep = evaluate_run(&gens, &anns, &anns).unwrap();
        assert_eq!(rep.n_images, 2);
        assert!((rep.bleu - 100.0).abs() < 1e-9);
        assert!((rep.rouge_l - 100.0).abs() < 1e-9);
        assert_eq!(rep.per_image[0].image_id, "i1");
        assert_eq!(rep.generative_strength, 2.0);
        assert!((rep.inventiveness_pct - 75.0).abs() < 1e-9);
        assert_eq!(rep.scale, "0-100");
        assert_eq!(rep.meteor_variant, "exact-match");

        let mut shuffled = gens.clone();
        shuffled.reverse();
        assert_eq!(evaluate_run(&shuffled, &anns, &anns).unwrap(), rep);

        let mut dup = gens.clone();
        let extra = dup[1].questions[1].clone();
        dup[1].questions.push(extra);
        let again = evaluate_run(&dup, &anns, &anns).unwrap();
        assert_eq!(again.bleu, rep.bleu);
        assert_eq!(again.generative_strength, rep.generative_strength);
        assert_eq!(again.inventiveness_pct, rep.inventiveness_pct);

        let missing = vec![gen("nope", &[("x", -1.0)])];
        match evaluate_run(&missing, &anns, &anns) {
            Err(Error::MissingReferences(id)) => assert_eq!(id, "nope"),
            other => panic!("{other:?}"),
        }
        let json = rep.to_json().unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
    }

    mod properties {
        use super::super::*;
        use proptest::prelude::*;

        fn sentence() -> impl Strategy<Value = Vec<u8>> {
            proptest::collection::vec(0u8..6, 0..9)
        }

        fn all_scores(h: &[u8], r: &[Vec<u8>]) -> [f64; 3] {
            [bleu(h, r, 4), meteor_lite(h, r), rouge_l(h, r)]
        }

        proptest! {
            #[test]
            fn scores_in_range(h in sentence(), r in proptest::collection::vec(sentence(), 1..4)) {
                for s in all_scores(&h, &r) {
                    prop_assert!((0.0..=100.0 + 1e-9).contains(&s), "{s}");
                }
            }

            #[test]
            fn identity_scores_full(h in proptest::collection::vec(0u8..6, 1..9)) {
                let r = vec![h.clone()];
                prop_assert!((bleu(&h, &r, 4) - 100.0).abs() < 1e-9);
                prop_assert!((rouge_l(&h, &r) - 100.0).abs() < 1e-9);
            }

            #[test]
            fn renaming_tokens_changes_nothing(
                hs in proptest::collection::vec(sentence(), 2..4),
                rs in proptest::collection::vec(proptest::collection::vec(sentence(), 1..3), 2..4),
                shift in 1u8..6,
            ) {
                let n = hs.len().min(rs.len());
                let (hs, rs) = (&hs[..n], &rs[..n]);
                let rename = |s: &Vec<u8>| s.iter().map(|&t| (t + shift) % 6).collect::<Vec<u8>>();
                let hs2: Vec<Vec<u8>> = hs.iter().map(rename).collect();
                let rs2: Vec<Vec<Vec<u8>>> = rs.iter().map(|r| r.iter().map(rename).collect()).collect();
                for i in 0..n {
                    let a = all_scores(&hs[i], &rs[i]);
                    let b = all_scores(&hs2[i], &rs2[i]);
                    for (x, y) in a.iter().zip(&b) {
                        prop_assert!((x - y).abs() < 1e-9);
                    }
                }
                prop_assert!((cider(hs, rs).unwrap() - cider(&hs2, &rs2).unwrap()).abs() < 1e-9);
            }

            #[test]
            fn report_ignores_order_and_duplicates(
                gens in proptest::collection::vec(
                    proptest::collection::vec((sentence(), -20.0f64..0.0), 0..4), 1..5),
                refs in proptest::collection::vec(proptest::collection::vec(sentence(), 1..3), 5),
                rotate in 0usize..5,
                dup in 0usize..5,
            ) {
                use crate::corpus::{ImageRecord, Split};
                use crate::decoding::{ConfigSummary, GenerationRecord, QuestionRecord, Strategy};
                let words = |s: &Vec<u8>| s.iter().map(|t| format!("w{t}")).collect::<Vec<String>>();
                let records: Vec<ImageRecord> = refs
                    .iter()
                    .enumerate()
                    .map(|(i, qs)| ImageRecord {
                        image_id: format!("img{i}"),
                        keywords: vec![],
                        location: None,
                        questions: qs.iter().map(words).collect(),
                        split: if i % 2 == 0 { Split::Train } else { Split::Test },
                    })
                    .collect();
                let mut run: Vec<GenerationRecord> = gens
                    .iter()
                    .enumerate()
                    .map(|(i, qs)| GenerationRecord {
                        image_id: format!("img{i}"),
                        questions: qs
                            .iter()
                            .map(|(q, lp)| QuestionRecord { tokens: words(q), logprob: *lp })
                            .collect(),
                        strategy: Strategy::Dbs,
                        config: ConfigSummary { k: 5, t: 3, theta: 0.5, seed: 0 },
                    })
                    .collect();
                let base = evaluate_run(&run, &records, &records).unwrap();
                let r = rotate % run.len();
                run.rotate_left(r);
                prop_assert_eq!(&evaluate_run(&run, &records, &records).unwrap(), &base);

                let i = dup % run.len();
                if let Some(q) = run[i].questions.first().cloned() {
                    run[i].questions.push(q);
                    let with_dup = evaluate_run(&run, &records, &records).unwrap();
                    prop_assert_eq!(with_dup.bleu, base.bleu);
                    prop_assert_eq!(with_dup.meteor, base.meteor);
                    prop_assert_eq!(with_dup.rouge_l, base.rouge_l);
                    prop_assert_eq!(with_dup.cider, base.cider);
                    prop_assert_eq!(with_dup.generative_strength, base.generative_strength);
                    prop_assert_eq!(with_dup.inventiveness_pct, base.inventiveness_pct);
                }
            }
        }
    }
}
