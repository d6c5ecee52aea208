use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::Args;
use serde::Serialize;

use vqg_core::corpus::{
    build_vocab, generate_synthetic_corpus, load_annotations, load_features, save_annotations, save_features_text,
    split_corpus, ImageRecord, Split, SplitSpec, SyntheticCorpusSpec, Vocabulary,
};
use vqg_core::decoding::{decode_records, load_generations, save_generations, DecodingConfig, GenerationRecord, Strategy};
use vqg_core::grad_check::{grad_check as run_grad_check, GradCheckConfig};
use vqg_core::metrics::{evaluate_run, MetricReport};
use vqg_core::trainer::{train as run_train, ModelCheckpoint, TrainConfig};

use crate::manifest::{manifest_path, ManifestBuilder};
use crate::table;
use crate::CliError;

type CmdResult = Result<(), CliError>;

const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(anyhow!("{msg}"))
}

/// `<path><suffix>` without touching the existing extension.
fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub images: usize,
    #[arg(long, default_value_t = 5)]
    pub concepts: usize,
    #[arg(long, default_value_t = 3)]
    pub questions_per_image: usize,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

pub fn synth(a: SynthArgs) -> CmdResult {
    let manifest = ManifestBuilder::new("synth", &a)?;
    let spec = SyntheticCorpusSpec {
        n_images: a.images,
        n_concepts: a.concepts,
        questions_per_image: a.questions_per_image,
        feature_dim: a.feature_dim,
        seed: a.seed,
    };
    spec.validate()?;
    let corpus = generate_synthetic_corpus(&spec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ann = a.out.join("annotations.jsonl");
    let feat = a.out.join("features.jsonl");
    save_annotations(&ann, &corpus.records)?;
    save_features_text(&feat, &corpus.features)?;
    manifest.finish(&[&ann, &feat], &a.out.join("manifest.json"))?;
    println!(
        "wrote {} images ({} concepts) to {}",
        corpus.records.len(),
        a.concepts,
        a.out.display()
    );
    Ok(())
}

/// Assigns splits when every record is unassigned; fully tagged corpora are
/// returned unchanged.
fn ensure_splits(records: Vec<ImageRecord>, seed: u64) -> Result<Vec<ImageRecord>, CliError> {
    let unassigned = records.iter().filter(|r| r.split == Split::Unassigned).count();
    if unassigned == records.len() {
        Ok(split_corpus(records, &SplitSpec::with_seed(seed))?)
    } else if unassigned == 0 {
        Ok(records)
    } else {
        Err(CliError::Data(anyhow!(
            "{unassigned} of {} records have no split while others do",
            records.len()
        )))
    }
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// JSON training configuration; defaults apply to omitted fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Existing vocabulary (JSON); otherwise built from the training split.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
}

pub fn train(a: TrainArgs) -> CmdResult {
    let mut manifest = ManifestBuilder::new("train", &a)?;
    manifest.input(&a.annotations);
    manifest.input(&a.features);
    let config = match &a.config {
        Some(path) => {
            manifest.input(path);
            TrainConfig::load(path)?
        }
        None => TrainConfig::default(),
    };
    let records = ensure_splits(load_annotations(&a.annotations)?, config.seed)?;
    let features = load_features(&a.features)?;
    let vocab = match &a.vocab {
        Some(path) => {
            manifest.input(path);
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<Vocabulary>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => {
            let train_recs: Vec<ImageRecord> = records.iter().filter(|r| r.split == Split::Train).cloned().collect();
            build_vocab(&train_recs, a.min_count)?
        }
    };

    let outcome = run_train(&records, &features, &vocab, &config)?;
    outcome.checkpoint.save(&a.out)?;
    let splits = with_suffix(&a.out, ".splits.jsonl");
    save_annotations(&splits, &records)?;
    let history = with_suffix(&a.out, ".history.json");
    let mut text = serde_json::to_string_pretty(&outcome.history).context("serialising history")?;
    text.push('\n');
    fs::write(&history, text).with_context(|| format!("writing {}", history.display()))?;
    manifest.finish(&[&a.out, &splits, &history], &manifest_path(&a.out))?;

    let h = &outcome.history;
    print!(
        "epochs {}  vocab {}  initial loss {:.4}  final loss {:.4}",
        config.epochs,
        vocab.len(),
        h.initial_loss,
        outcome.checkpoint.final_loss
    );
    match h.val_perplexity.last() {
        Some(p) => println!("  val perplexity {p:.3}"),
        None => println!(),
    }
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Annotations that define split membership and keywords; defaults to the
    /// split file written next to the checkpoint.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// train, val, test, or all
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value = "dbs")]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 5)]
    pub beam_size: usize,
    #[arg(long, default_value_t = 3)]
    pub min_steps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub sim_threshold: f64,
    #[arg(long, default_value_t = 10)]
    pub max_results: usize,
    #[arg(long, default_value_t = 20)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn generate(a: GenerateArgs) -> CmdResult {
    let mut manifest = ManifestBuilder::new("generate", &a)?;
    let split = match a.split.as_str() {
        "all" => None,
        s => match s.parse::<Split>() {
            Ok(Split::Unassigned) | Err(_) => return Err(usage(format!("unknown split `{s}`"))),
            Ok(sp) => Some(sp),
        },
    };
    let config = DecodingConfig {
        strategy: a.strategy,
        beam_size: a.beam_size,
        min_steps: a.min_steps,
        similarity_threshold: a.sim_threshold,
        max_len: a.max_len,
        max_results: a.max_results,
        seed: a.seed,
    };
    config.validate()?;

    let ckpt = ModelCheckpoint::load(&a.ckpt)?;
    manifest.input(&a.ckpt);
    manifest.input(&a.features);
    let ann_path = a.annotations.clone().unwrap_or_else(|| with_suffix(&a.ckpt, ".splits.jsonl"));
    manifest.input(&ann_path);
    let records = ensure_splits(load_annotations(&ann_path)?, ckpt.config.seed)?;
    let features = load_features(&a.features)?;
    let selected: Vec<&ImageRecord> = records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .collect();
    if selected.is_empty() {
        log::warn!("split `{}` is empty; writing an empty generation file", a.split);
    }

    let sets = decode_records(&ckpt.model, &ckpt.vocab, &selected, &features, &config)?;
    let out: Vec<GenerationRecord> = sets
        .iter()
        .map(|s| GenerationRecord::new(s, &ckpt.vocab, &config))
        .collect();
    save_generations(&a.out, &out)?;
    manifest.finish(&[&a.out], &manifest_path(&a.out))?;
    let total: usize = out.iter().map(|r| r.questions.len()).sum();
    println!(
        "{}: {} questions for {} images -> {}",
        a.strategy,
        total,
        out.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub generated: PathBuf,
    /// Reference questions for the generated images.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Annotations whose `train` split defines seen questions; defaults to
    /// --annotations.
    #[arg(long)]
    pub train_annotations: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn report_header() -> String {
    format!(
        "{:>8} {:>8} {:>8} {:>8} {:>9} {:>8} {:>7}",
        "BLEU", "METEOR", "ROUGE-L", "CIDEr", "Gen.Str.", "Inv.%", "images"
    )
}

fn report_row(r: &MetricReport) -> String {
    format!(
        "{:>8.1} {:>8.1} {:>8.1} {:>8.1} {:>9.2} {:>8.1} {:>7}",
        r.bleu, r.meteor, r.rouge_l, r.cider, r.generative_strength, r.inventiveness_pct, r.n_images
    )
}

pub fn evaluate(a: EvaluateArgs) -> CmdResult {
    let mut manifest = ManifestBuilder::new("evaluate", &a)?;
    manifest.input(&a.generated);
    manifest.input(&a.annotations);
    let generated = load_generations(&a.generated)?;
    let references = load_annotations(&a.annotations)?;
    let training = match &a.train_annotations {
        Some(path) => {
            manifest.input(path);
            load_annotations(path)?
        }
        None => references.clone(),
    };
    let report = evaluate_run(&generated, &references, &training)?;
    report.save(&a.out)?;
    manifest.finish(&[&a.out], &manifest_path(&a.out))?;
    println!("{}", report_header());
    println!("{}", report_row(&report));
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct GradCheckArgs {
    /// First seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
}

pub fn grad_check(a: GradCheckArgs) -> CmdResult {
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let config = GradCheckConfig::default();
    let started = Instant::now();
    let mut worst = 0.0f64;
    for seed in a.seed..a.seed + a.seeds {
        let err = run_grad_check(&config, seed, a.eps)?;
        log::info!("seed {seed}: max relative error {err:.3e}");
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    println!(
        "max relative error {worst:.3e} over {} seed(s) in {:.2}s (tolerance {GRAD_CHECK_TOLERANCE:.0e})",
        a.seeds,
        started.elapsed().as_secs_f64()
    );
    if worst < GRAD_CHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Data(anyhow!("gradient check failed: {worst:.3e} ≥ {GRAD_CHECK_TOLERANCE:.0e}")))
    }
}

#[derive(Args, Debug, Serialize)]
pub struct CompareArgs {
    #[arg(long, num_args = 1..)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn compare(a: CompareArgs) -> CmdResult {
    if a.reports.is_empty() {
        return Err(usage("compare needs at least one --reports file"));
    }
    let rows = a
        .reports
        .iter()
        .map(|p| {
            let report = MetricReport::load(p)?;
            let label = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            Ok((label, table::metric_values(&report)))
        })
        .collect::<Result<Vec<_>, vqg_core::Error>>()?;
    let text = table::render(&rows);
    if let Some(out) = &a.out {
        fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{text}");
    Ok(())
}
