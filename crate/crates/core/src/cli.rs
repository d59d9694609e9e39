//! Command-line front end.
//!
//! Every command is a plain function over a resolved configuration so that
//! tests can drive the pipeline without spawning the binary. Randomness
//! flows from three seeds: the model seed (initialization and shuffling),
//! the fold seed (group assignment) and the pairing seed (random
//! mismatches, ablation re-pairing, hypothesis pairs).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Dataset, DescriptionSource, Label};
use crate::diffsum;
use crate::embed::{self, EmbeddingProvider, FileBacked, HashSeeded};
use crate::eval::{self, ConfusionMatrix, MwwResult, SweepRow};
use crate::pairing::{self, ExampleKind, FoldPlan, QaExample};
use crate::qa_model::{BatchExample, ModelConfig, QaModel};
use crate::synthetic::{self, SyntheticSpec};

#[derive(Debug, Parser)]
#[command(name = "patchqa", version, about = "Patch correctness prediction as bug-report question answering")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a dataset and print its summary.
    Ingest(IngestArgs),
    /// Grouped k-fold cross-validation with reports and per-fold checkpoints.
    Crossval(RunArgs),
    /// Train one model on every labeled example.
    Train(RunArgs),
    /// Score one bug report against one patch.
    Predict(PredictArgs),
    /// Threshold sweep over a scores CSV.
    Evaluate(EvaluateArgs),
    /// Distance study of matched versus random (report, description) pairs.
    Hypothesis(RunArgs),
    /// Write a generated planted-keyword dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Also write the deduplicated dataset here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Flags shared by the pipeline commands. Unset flags fall back to the
/// config file, then to the defaults of [`RunConfig`].
#[derive(Debug, Args, Default, Clone)]
pub struct RunArgs {
    /// TOML file with any of the keys below (snake_case); flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Token vector file; tokens missing from it fall back to hashing.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub hash_seed: Option<u64>,
    #[arg(long)]
    pub hash_dim: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub fold_seed: Option<u64>,
    #[arg(long)]
    pub pair_seed: Option<u64>,
    #[arg(long)]
    pub model_seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Operating threshold; defaults to the best row of the sweep.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    dataset: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    hash_seed: Option<u64>,
    hash_dim: Option<usize>,
    k: Option<usize>,
    fold_seed: Option<u64>,
    pair_seed: Option<u64>,
    model_seed: Option<u64>,
    epochs: Option<usize>,
    lr: Option<f64>,
    hidden: Option<usize>,
    max_len: Option<usize>,
    batch: Option<usize>,
    threshold: Option<f64>,
    thresholds: Option<Vec<f64>>,
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub embeddings: Option<PathBuf>,
    pub hash_seed: u64,
    /// Used only without an embeddings file.
    pub hash_dim: usize,
    pub k: usize,
    pub fold_seed: u64,
    pub pair_seed: u64,
    /// `model.seed` is the model seed.
    pub model: ModelConfig,
    pub threshold: Option<f64>,
    pub thresholds: Vec<f64>,
    pub out: PathBuf,
}

pub const DEFAULT_HASH_DIM: usize = 32;

impl RunConfig {
    pub fn with_dataset(dataset: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            embeddings: None,
            hash_seed: 0,
            hash_dim: DEFAULT_HASH_DIM,
            k: 10,
            fold_seed: 0,
            pair_seed: 0,
            model: ModelConfig::default(),
            threshold: None,
            thresholds: eval::default_thresholds(),
            out: out.into(),
        }
    }

    /// Merges flags over the optional config file over the defaults.
    pub fn resolve(args: &RunArgs) -> Result<Self> {
        let file: ConfigFile = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => ConfigFile::default(),
        };
        let dataset = args
            .dataset
            .clone()
            .or(file.dataset)
            .context("--dataset is required")?;
        let out = args.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("out"));
        let mut cfg = Self::with_dataset(dataset, out);
        let d = ModelConfig::default();
        cfg.embeddings = args.embeddings.clone().or(file.embeddings);
        cfg.hash_seed = args.hash_seed.or(file.hash_seed).unwrap_or(0);
        cfg.hash_dim = args.hash_dim.or(file.hash_dim).unwrap_or(DEFAULT_HASH_DIM);
        cfg.k = args.k.or(file.k).unwrap_or(10);
        cfg.fold_seed = args.fold_seed.or(file.fold_seed).unwrap_or(0);
        cfg.pair_seed = args.pair_seed.or(file.pair_seed).unwrap_or(0);
        cfg.model = ModelConfig {
            max_seq_len: args.max_len.or(file.max_len).unwrap_or(d.max_seq_len),
            hidden_size: args.hidden.or(file.hidden).unwrap_or(d.hidden_size),
            learning_rate: args.lr.or(file.lr).unwrap_or(d.learning_rate),
            epochs: args.epochs.or(file.epochs).unwrap_or(d.epochs),
            batch_size: args.batch.or(file.batch).unwrap_or(d.batch_size),
            seed: args.model_seed.or(file.model_seed).unwrap_or(d.seed),
        };
        cfg.threshold = args.threshold.or(file.threshold);
        if let Some(t) = args.thresholds.clone().or(file.thresholds) {
            cfg.thresholds = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        ensure!(self.k >= 1, "k must be at least 1");
        ensure!(self.hash_dim >= 1, "hash dim must be positive");
        if let Some(t) = self.threshold {
            ensure!((0.0..=1.0).contains(&t), "threshold {t} outside [0, 1]");
        }
        ensure!(!self.thresholds.is_empty(), "thresholds must not be empty");
        ensure!(
            self.thresholds.iter().all(|t| (0.0..=1.0).contains(t)),
            "thresholds must lie in [0, 1]"
        );
        ensure!(
            self.thresholds.windows(2).all(|w| w[0] < w[1]),
            "thresholds must be strictly ascending"
        );
        Ok(())
    }

    pub fn provider(&self) -> Result<Box<dyn EmbeddingProvider>> {
        Ok(match &self.embeddings {
            Some(path) => Box::new(
                FileBacked::load(path, self.hash_seed).with_context(|| format!("loading {}", path.display()))?,
            ),
            None => Box::new(HashSeeded::new(self.hash_seed, self.hash_dim)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IngestSummary {
    pub bugs: usize,
    pub patches: usize,
    pub correct: usize,
    pub incorrect: usize,
    pub unlabeled: usize,
    pub developer_patches: usize,
    pub apr_patches: usize,
    pub human_descriptions: usize,
    pub generated_descriptions: usize,
    pub duplicates_removed: usize,
}

/// Loads, deduplicates and summarizes.
pub fn ingest(path: &Path) -> Result<(Dataset, IngestSummary)> {
    let raw = corpus::load_dataset(path).with_context(|| format!("ingest: {}", path.display()))?;
    let ds = corpus::dedup_patches(&raw);
    let count = |l: Label| ds.patches().filter(|p| p.label == l).count();
    let developer_patches = ds.patches().filter(|p| p.origin.is_developer()).count();
    let human = ds
        .descriptions()
        .filter(|d| d.source == DescriptionSource::HumanCommitMessage)
        .count();
    let summary = IngestSummary {
        bugs: ds.bug_count(),
        patches: ds.patch_count(),
        correct: count(Label::Correct),
        incorrect: count(Label::Incorrect),
        unlabeled: count(Label::Unlabeled),
        developer_patches,
        apr_patches: ds.patch_count() - developer_patches,
        human_descriptions: human,
        generated_descriptions: ds.description_count() - human,
        duplicates_removed: raw.patch_count() - ds.patch_count(),
    };
    Ok((ds, summary))
}

fn to_batch(ex: &QaExample, provider: &dyn EmbeddingProvider, max_len: usize) -> Result<BatchExample> {
    Ok(BatchExample {
        bug: embed::embed_text(&ex.bug_text, provider, max_len)?,
        description: embed::embed_text(&ex.description_text, provider, max_len)?,
        label: ex.label,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingInfo {
    pub source: String,
    pub dim: usize,
    pub hash_seed: u64,
}

impl EmbeddingInfo {
    fn of(cfg: &RunConfig, provider: &dyn EmbeddingProvider) -> Self {
        Self {
            source: match &cfg.embeddings {
                Some(p) => format!("file:{}", p.display()),
                None => "hash".into(),
            },
            dim: provider.dim(),
            hash_seed: cfg.hash_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    pub test_bugs: usize,
    pub auc: Option<f64>,
    /// At the operating threshold.
    pub confusion: ConfusionMatrix,
    pub plus_recall: Option<f64>,
    pub minus_recall: Option<f64>,
    pub f1: Option<f64>,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanMetrics {
    /// Mean over the folds where the metric is defined.
    pub auc: Option<f64>,
    pub plus_recall: Option<f64>,
    pub minus_recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    /// Recalled positives: label 1 and score at or above the operating threshold.
    pub recalled: usize,
    pub mean_score_before: Option<f64>,
    pub mean_score_after: Option<f64>,
    pub dropped_below_threshold: usize,
    pub dropped_fraction: Option<f64>,
    /// Folds whose test group has fewer than two bugs.
    pub skipped_folds: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Statistics {
    /// Positive against negative test scores.
    pub score_separation: Option<MwwResult>,
    pub ablation: AblationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossvalReport {
    pub config: RunConfig,
    pub embedding: EmbeddingInfo,
    pub examples: BTreeMap<String, usize>,
    pub per_fold: Vec<FoldReport>,
    pub mean: MeanMetrics,
    pub pooled_auc: Option<f64>,
    pub operating_threshold: f64,
    /// `flag` or `best_sweep_row`.
    pub operating_threshold_source: String,
    pub sweep: Vec<SweepRow>,
    pub statistics: Statistics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub patch_id: String,
    pub bug_id: String,
    pub label: u8,
    pub score: f64,
}

pub struct CrossvalRun {
    pub report: CrossvalReport,
    pub scores: Vec<ScoreRow>,
    pub plan: FoldPlan,
    pub models: Vec<QaModel>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn kind_name(kind: ExampleKind) -> String {
    serde_json::to_value(kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Pairing, k training rounds and evaluation. Writes nothing.
pub fn crossval(cfg: &RunConfig) -> Result<CrossvalRun> {
    cfg.validate()?;
    let (ds, _) = ingest(&cfg.dataset)?;
    let examples = pairing::build_examples(&ds, cfg.pair_seed).context("pairing")?;
    ensure!(!examples.is_empty(), "pairing: dataset yields no labeled examples");
    let plan = pairing::make_fold_plan(
        pairing::example_bug_ids(&examples).iter().map(String::as_str),
        cfg.k,
        cfg.fold_seed,
    )
    .context("fold plan")?;
    let provider = cfg.provider().context("embedding")?;
    let provider = provider.as_ref();
    let batches: Vec<BatchExample> = examples
        .iter()
        .map(|e| to_batch(e, provider, cfg.model.max_seq_len))
        .collect::<Result<_>>()
        .context("embedding")?;
    let groups: Vec<usize> = examples
        .iter()
        .map(|e| plan.group_of(&e.bug_id).ok_or_else(|| pairing::PairingError::Unassigned(e.bug_id.clone())))
        .collect::<std::result::Result<_, _>>()
        .context("fold split")?;

    let mut models = Vec::with_capacity(cfg.k);
    let mut fold_scores: Vec<Vec<(usize, f64)>> = Vec::with_capacity(cfg.k);
    let mut losses = Vec::with_capacity(cfg.k);
    let mut sizes = Vec::with_capacity(cfg.k);
    for g in 0..cfg.k {
        let (test, train): (Vec<usize>, Vec<usize>) = (0..examples.len()).partition(|&i| groups[i] == g);
        let train_batches: Vec<BatchExample> = train.iter().map(|&i| batches[i].clone()).collect();
        let mut model = QaModel::new(cfg.model.clone(), provider.dim()).context("model")?;
        let report = if train_batches.is_empty() {
            Vec::new()
        } else {
            model
                .train(&train_batches)
                .with_context(|| format!("training fold {g}"))?
                .loss_history
        };
        let scored = test
            .iter()
            .map(|&i| Ok((i, model.score(&batches[i])?)))
            .collect::<Result<Vec<_>>>()
            .with_context(|| format!("scoring fold {g}"))?;
        sizes.push((train.len(), test.len(), plan.bugs_in(g).count()));
        losses.push(report);
        fold_scores.push(scored);
        models.push(model);
    }

    let pooled: Vec<(f64, bool)> = fold_scores
        .iter()
        .flatten()
        .map(|&(i, s)| (s, examples[i].label))
        .collect();
    let sweep = eval::threshold_sweep(&pooled, &cfg.thresholds);
    let (operating_threshold, source) = match cfg.threshold {
        Some(t) => (t, "flag"),
        None => (
            sweep.best_row().map(|r| r.threshold).unwrap_or(0.5),
            "best_sweep_row",
        ),
    };

    let per_fold: Vec<FoldReport> = (0..cfg.k)
        .map(|g| {
            let pts: Vec<(f64, bool)> = fold_scores[g].iter().map(|&(i, s)| (s, examples[i].label)).collect();
            let cm = eval::confusion_at(&pts, operating_threshold);
            FoldReport {
                fold: g,
                train_examples: sizes[g].0,
                test_examples: sizes[g].1,
                test_bugs: sizes[g].2,
                auc: eval::auc(&pts).ok(),
                confusion: cm,
                plus_recall: eval::plus_recall(&cm).ok(),
                minus_recall: eval::minus_recall(&cm).ok(),
                f1: eval::f1(&cm).ok(),
                loss_history: losses[g].clone(),
            }
        })
        .collect();
    let mean = MeanMetrics {
        auc: mean_of(per_fold.iter().map(|f| f.auc)),
        plus_recall: mean_of(per_fold.iter().map(|f| f.plus_recall)),
        minus_recall: mean_of(per_fold.iter().map(|f| f.minus_recall)),
        f1: mean_of(per_fold.iter().map(|f| f.f1)),
    };

    let positives: Vec<f64> = pooled.iter().filter(|p| p.1).map(|p| p.0).collect();
    let negatives: Vec<f64> = pooled.iter().filter(|p| !p.1).map(|p| p.0).collect();
    let ablation = ablation(
        &ds,
        &examples,
        &plan,
        &models,
        &fold_scores,
        provider,
        cfg,
        operating_threshold,
    )?;

    let mut counts = BTreeMap::new();
    for e in &examples {
        *counts.entry(kind_name(e.kind)).or_insert(0) += 1;
    }
    counts.insert("total".into(), examples.len());

    let scores = fold_scores
        .iter()
        .flatten()
        .map(|&(i, s)| ScoreRow {
            patch_id: examples[i].patch_id.clone(),
            bug_id: examples[i].bug_id.clone(),
            label: u8::from(examples[i].label),
            score: s,
        })
        .collect();

    let report = CrossvalReport {
        config: cfg.clone(),
        embedding: EmbeddingInfo::of(cfg, provider),
        examples: counts,
        per_fold,
        mean,
        pooled_auc: sweep.auc,
        operating_threshold,
        operating_threshold_source: source.into(),
        sweep: sweep.rows,
        statistics: Statistics {
            score_separation: eval::mww_test(&positives, &negatives).ok(),
            ablation,
        },
    };
    Ok(CrossvalRun {
        report,
        scores,
        plan,
        models,
    })
}

/// Re-pairs every recalled positive of a fold with a random other bug of the
/// same test group and rescores it with that fold's model.
#[allow(clippy::too_many_arguments)]
fn ablation(
    ds: &Dataset,
    examples: &[QaExample],
    plan: &FoldPlan,
    models: &[QaModel],
    fold_scores: &[Vec<(usize, f64)>],
    provider: &dyn EmbeddingProvider,
    cfg: &RunConfig,
    threshold: f64,
) -> Result<AblationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pair_seed);
    // Stream 0 drew the training mismatches.
    rng.set_stream(1);
    let mut before = Vec::new();
    let mut after = Vec::new();
    let mut skipped = Vec::new();
    for (g, scored) in fold_scores.iter().enumerate() {
        let pool: Vec<String> = plan
            .bugs_in(g)
            .filter(|b| ds.bug(b).is_some())
            .map(str::to_string)
            .collect();
        if pool.len() < 2 {
            skipped.push(g);
            continue;
        }
        for &(i, s) in scored {
            let e = &examples[i];
            if !e.label || s < threshold || !pool.contains(&e.bug_id) {
                continue;
            }
            let other = pairing::draw_other(&pool, &e.bug_id, &mut rng);
            let text = ds.bug(other).map(|b| b.text()).unwrap_or_default();
            let swapped = BatchExample {
                bug: embed::embed_text(&text, provider, cfg.model.max_seq_len)?,
                description: embed::embed_text(&e.description_text, provider, cfg.model.max_seq_len)?,
                label: true,
            };
            before.push(s);
            after.push(models[g].score(&swapped).context("ablation")?);
        }
    }
    let dropped = after.iter().filter(|s| **s < threshold).count();
    let avg = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(AblationReport {
        recalled: before.len(),
        mean_score_before: avg(&before),
        mean_score_after: avg(&after),
        dropped_below_threshold: dropped,
        dropped_fraction: (!after.is_empty()).then(|| dropped as f64 / after.len() as f64),
        skipped_folds: skipped,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<ScoreRow>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    for row in &rows {
        ensure!(row.label <= 1, "label of `{}` must be 0 or 1", row.patch_id);
        ensure!(row.score.is_finite(), "score of `{}` is not finite", row.patch_id);
    }
    Ok(rows)
}

/// Runs [`crossval`] and writes `report.json`, `scores.csv`,
/// `foldplan.json` and `checkpoints/fold-NN.pqa` under `cfg.out`.
pub fn run_crossval(cfg: &RunConfig) -> Result<CrossvalReport> {
    let run = crossval(cfg)?;
    let ckpt = cfg.out.join("checkpoints");
    fs::create_dir_all(&ckpt).with_context(|| format!("creating {}", ckpt.display()))?;
    write_json(&cfg.out.join("report.json"), &run.report)?;
    write_scores(&cfg.out.join("scores.csv"), &run.scores)?;
    write_json(&cfg.out.join("foldplan.json"), &run.plan)?;
    for (g, m) in run.models.iter().enumerate() {
        m.save(&ckpt.join(format!("fold-{g:02}.pqa")))?;
    }
    Ok(run.report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub config: RunConfig,
    pub embedding: EmbeddingInfo,
    pub examples: usize,
    pub loss_history: Vec<f64>,
    pub model: PathBuf,
}

/// Trains on every example and writes `model.pqa` and `train.json`.
pub fn run_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let (ds, _) = ingest(&cfg.dataset)?;
    let examples = pairing::build_examples(&ds, cfg.pair_seed).context("pairing")?;
    ensure!(!examples.is_empty(), "pairing: dataset yields no labeled examples");
    let provider = cfg.provider().context("embedding")?;
    let batches: Vec<BatchExample> = examples
        .iter()
        .map(|e| to_batch(e, provider.as_ref(), cfg.model.max_seq_len))
        .collect::<Result<_>>()
        .context("embedding")?;
    let mut model = QaModel::new(cfg.model.clone(), provider.dim())?;
    let report = model.train(&batches).context("training")?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let path = cfg.out.join("model.pqa");
    model.save(&path)?;
    let summary = TrainSummary {
        config: cfg.clone(),
        embedding: EmbeddingInfo::of(cfg, provider.as_ref()),
        examples: batches.len(),
        loss_history: report.loss_history,
        model: path,
    };
    write_json(&cfg.out.join("train.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Args, Clone)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, conflicts_with = "bug_file")]
    pub bug: Option<String>,
    #[arg(long)]
    pub bug_file: Option<PathBuf>,
    #[arg(long, conflicts_with_all = ["description_file", "diff"])]
    pub description: Option<String>,
    #[arg(long, conflicts_with = "diff")]
    pub description_file: Option<PathBuf>,
    /// Unified diff; summarized when no description is given.
    #[arg(long)]
    pub diff: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Must match the embeddings the model was trained with.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub hash_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictOutput {
    pub score: f64,
    pub threshold: f64,
    pub verdict: String,
    pub description: String,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn predict(args: &PredictArgs) -> Result<PredictOutput> {
    ensure!(
        (0.0..=1.0).contains(&args.threshold),
        "threshold {} outside [0, 1]",
        args.threshold
    );
    let model = QaModel::load(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let bug = match (&args.bug, &args.bug_file) {
        (Some(t), _) => t.clone(),
        (None, Some(p)) => read_text(p)?,
        (None, None) => bail!("missing bug report: pass --bug or --bug-file"),
    };
    let description = match (&args.description, &args.description_file, &args.diff) {
        (Some(t), _, _) => t.clone(),
        (None, Some(p), _) => read_text(p)?,
        (None, None, Some(p)) => diffsum::describe_diff(&read_text(p)?).context("summarizing diff")?,
        (None, None, None) => bail!("missing patch: pass --description, --description-file or --diff"),
    };
    let provider: Box<dyn EmbeddingProvider> = match &args.embeddings {
        Some(p) => Box::new(FileBacked::load(p, args.hash_seed)?),
        None => Box::new(HashSeeded::new(args.hash_seed, model.input_dim)?),
    };
    let max_len = model.config.max_seq_len;
    let ex = BatchExample {
        bug: embed::embed_text(&bug, provider.as_ref(), max_len)?,
        description: embed::embed_text(&description, provider.as_ref(), max_len)?,
        label: true,
    };
    let p = model.predict(&ex, args.threshold)?;
    Ok(PredictOutput {
        score: p.score,
        threshold: args.threshold,
        verdict: if p.label { "correct" } else { "incorrect" }.into(),
        description,
    })
}

#[derive(Debug, Args, Clone)]
pub struct EvaluateArgs {
    /// CSV with columns patch_id, bug_id, label, score.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluateReport {
    pub examples: usize,
    pub auc: Option<f64>,
    pub sweep: Vec<SweepRow>,
    pub best_threshold: Option<f64>,
}

pub fn evaluate(args: &EvaluateArgs) -> Result<EvaluateReport> {
    let thresholds = args.thresholds.clone().unwrap_or_else(eval::default_thresholds);
    ensure!(
        thresholds.windows(2).all(|w| w[0] < w[1]),
        "thresholds must be strictly ascending"
    );
    let rows = read_scores(&args.scores)?;
    let pts: Vec<(f64, bool)> = rows.iter().map(|r| (r.score, r.label == 1)).collect();
    let sweep = eval::threshold_sweep(&pts, &thresholds);
    let report = EvaluateReport {
        examples: rows.len(),
        auc: sweep.auc,
        best_threshold: sweep.best_row().map(|r| r.threshold),
        sweep: sweep.rows,
    };
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisReport {
    pub pair_seed: u64,
    pub embedding: EmbeddingInfo,
    pub pairs: usize,
    pub original_median: f64,
    pub random_median: f64,
    pub original_closer: bool,
    pub test: MwwResult,
    pub original_distances: Vec<f64>,
    pub random_distances: Vec<f64>,
}

/// Developer patches with a description record, as (bug id, description).
fn hypothesis_pairs(ds: &Dataset) -> Vec<(String, String)> {
    ds.patches()
        .filter(|p| p.origin.is_developer())
        .filter_map(|p| ds.description(&p.patch_id).map(|d| (p.bug_id.clone(), d.text.clone())))
        .collect()
}

/// Mean-pooled, jointly standardized text vectors; original pairs against
/// pairs with a seeded random other bug.
pub fn hypothesis(cfg: &RunConfig) -> Result<HypothesisReport> {
    let (ds, _) = ingest(&cfg.dataset)?;
    let pairs = hypothesis_pairs(&ds);
    let pool: Vec<String> = pairs
        .iter()
        .map(|(b, _)| b.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    ensure!(
        pool.len() >= 2,
        "hypothesis: need at least 2 bugs with described developer patches, found {}",
        pool.len()
    );
    let provider = cfg.provider().context("embedding")?;
    let provider = provider.as_ref();

    // One row per bug, then one row per description.
    let mut texts: Vec<String> = pool.iter().map(|b| ds.bug(b).map(|r| r.text()).unwrap_or_default()).collect();
    texts.extend(pairs.iter().map(|(_, d)| d.clone()));
    let raw: Vec<Vec<f64>> = texts.iter().map(|t| embed::mean_embedding(t, provider)).collect();
    let z = embed::standardize(&raw).context("hypothesis: standardize")?;
    let bug_row = |b: &str| pool.binary_search_by(|p| p.as_str().cmp(b)).expect("bug in pool");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pair_seed);
    let mut original = Vec::with_capacity(pairs.len());
    let mut random = Vec::with_capacity(pairs.len());
    for (i, (bug, _)) in pairs.iter().enumerate() {
        let desc = z[pool.len() + i].clone();
        let other = pairing::draw_other(&pool, bug, &mut rng);
        original.push((z[bug_row(bug)].clone(), desc.clone()));
        random.push((z[bug_row(other)].clone(), desc));
    }
    let study = eval::euclidean_distance_study(&original, &random).context("hypothesis")?;
    Ok(HypothesisReport {
        pair_seed: cfg.pair_seed,
        embedding: EmbeddingInfo::of(cfg, provider),
        pairs: pairs.len(),
        original_median: study.original_median,
        random_median: study.random_median,
        original_closer: study.original_closer,
        test: study.test,
        original_distances: study.original_distances,
        random_distances: study.random_distances,
    })
}

#[derive(Debug, Args, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub bugs: usize,
    #[arg(long, default_value_t = 4)]
    pub developer_per_bug: usize,
    #[arg(long, default_value_t = 0)]
    pub incorrect_per_bug: usize,
    #[arg(long, default_value_t = 2023)]
    pub seed: u64,
}

pub fn synth(args: &SynthArgs) -> Result<Dataset> {
    let ds = synthetic::generate(&SyntheticSpec {
        bugs: args.bugs,
        developer_per_bug: args.developer_per_bug,
        incorrect_per_bug: args.incorrect_per_bug,
        seed: args.seed,
        ..SyntheticSpec::default()
    });
    ds.save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    Ok(ds)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => {
            let (ds, summary) = ingest(&a.dataset)?;
            if let Some(out) = &a.out {
                ds.save(out).with_context(|| format!("writing {}", out.display()))?;
            }
            print_json(&summary)
        }
        Command::Crossval(a) => {
            let report = run_crossval(&RunConfig::resolve(&a)?)?;
            print_json(&serde_json::json!({
                "mean": report.mean,
                "pooled_auc": report.pooled_auc,
                "operating_threshold": report.operating_threshold,
                "ablation": report.statistics.ablation,
            }))
        }
        Command::Train(a) => {
            let s = run_train(&RunConfig::resolve(&a)?)?;
            print_json(&serde_json::json!({ "model": s.model, "loss_history": s.loss_history }))
        }
        Command::Predict(a) => print_json(&predict(&a)?),
        Command::Evaluate(a) => print_json(&evaluate(&a)?),
        Command::Hypothesis(a) => {
            let cfg = RunConfig::resolve(&a)?;
            let report = hypothesis(&cfg)?;
            fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
            write_json(&cfg.out.join("hypothesis.json"), &report)?;
            print_json(&serde_json::json!({
                "pairs": report.pairs,
                "original_median": report.original_median,
                "random_median": report.random_median,
                "u_statistic": report.test.u_statistic,
                "p_value": report.test.p_value,
                "original_closer": report.original_closer,
            }))
        }
        Command::Synth(a) => {
            let ds = synth(&a)?;
            print_json(&serde_json::json!({
                "out": a.out,
                "bugs": ds.bug_count(),
                "patches": ds.patch_count(),
            }))
        }
    }
}
