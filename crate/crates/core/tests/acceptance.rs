//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed.
//!
//! Run with `cargo test --release --test acceptance`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use patchqa::cli::{self, RunConfig};
use patchqa::embed::SequenceMatrix;
use patchqa::eval::{self, ConfusionMatrix};
use patchqa::pairing::{self, FoldPlan};
use patchqa::qa_model::{bce_loss, BatchExample, ModelConfig, QaModel};
use patchqa::synthetic::{self, SyntheticSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

// Tolerances and budgets.
const RECALL_TOL_PP: f64 = 0.1;
const GRAD_H: f64 = 1e-4;
const GRAD_REL_TOL: f64 = 1e-3;
const SCORE_LO: f64 = 0.26894;
const SCORE_HI: f64 = 0.73107;
const ORACLE_TOL: f64 = 1e-12;
const MIN_AUC: f64 = 0.95;
const MIN_PLUS_RECALL: f64 = 0.9;
const MAX_P: f64 = 0.01;
const MIN_DROPPED: f64 = 0.10;

const BUDGET_METRICS: Duration = Duration::from_secs(1);
const BUDGET_GRADIENT: Duration = Duration::from_secs(10);
const BUDGET_RANGE: Duration = Duration::from_secs(5);
const BUDGET_SEPARABILITY: Duration = Duration::from_secs(180);
const BUDGET_STATS: Duration = Duration::from_secs(5);
const BUDGET_HYPOTHESIS: Duration = Duration::from_secs(30);

/// Reference sweep rows: threshold, counts, and expected recall percentages.
const TABLE: [(f64, usize, usize, usize, usize, f64, f64); 9] = [
    (0.1, 1591, 0, 7544, 0, 100.0, 0.0),
    (0.2, 1582, 2388, 5156, 9, 99.4, 31.7),
    (0.3, 1551, 3010, 4534, 40, 97.5, 39.9),
    (0.4, 1475, 4653, 2891, 116, 92.7, 61.7),
    (0.5, 1175, 6566, 978, 416, 73.9, 87.0),
    (0.6, 583, 7261, 283, 1008, 36.6, 96.2),
    (0.7, 189, 7522, 22, 1402, 11.9, 99.7),
    (0.8, 0, 7544, 0, 1591, 0.0, 100.0),
    (0.9, 0, 7544, 0, 1591, 0.0, 100.0),
];

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        ok,
        detail: detail.into(),
    }
}

fn timed(budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let elapsed = start.elapsed();
    o.detail = format!("{} [{:.2}s]", o.detail, elapsed.as_secs_f64());
    if let Some(b) = budget {
        if elapsed > b {
            o.ok = false;
            o.detail = format!("{} exceeds budget {:.0}s", o.detail, b.as_secs_f64());
        }
    }
    o
}

fn metric_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    for &(t, tp, tn, fp, fn_, plus, minus) in &TABLE {
        let cm = ConfusionMatrix { tp, tn, fp, fn_ };
        let (Ok(p), Ok(m)) = (eval::plus_recall(&cm), eval::minus_recall(&cm)) else {
            return outcome(false, format!("t={t}: recall undefined"));
        };
        worst = worst.max((100.0 * p - plus).abs()).max((100.0 * m - minus).abs());
    }
    outcome(worst <= RECALL_TOL_PP, format!("max deviation {worst:.3} pp over 9 rows"))
}

fn random_seq(rng: &mut ChaCha8Rng, len: usize, dim: usize, max_len: usize) -> SequenceMatrix {
    let rows: Vec<Vec<f64>> = (0..len)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    SequenceMatrix::from_rows(&rows, dim, max_len)
}

fn gradient_check() -> Outcome {
    let (dim, hidden, n) = (4, 3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let config = ModelConfig {
        max_seq_len: n,
        hidden_size: hidden,
        seed: 11,
        ..ModelConfig::default()
    };
    let model = QaModel::new(config, dim).expect("model");
    let examples = [
        BatchExample {
            bug: random_seq(&mut rng, n, dim, n),
            description: random_seq(&mut rng, 4, dim, n),
            label: true,
        },
        BatchExample {
            bug: random_seq(&mut rng, 3, dim, n),
            description: random_seq(&mut rng, n, dim, n),
            label: false,
        },
    ];
    let batch: Vec<&BatchExample> = examples.iter().collect();
    let loss = |m: &QaModel, exs: &[&BatchExample]| {
        exs.iter().map(|e| bce_loss(m.score(e).unwrap(), e.label)).sum::<f64>() / exs.len() as f64
    };
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
    let mut worst: f64 = 0.0;
    let mut checked = 0;

    let (_, grads) = model.batch_gradients(&batch).expect("gradients");
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().cloned().collect();
    for (ti, tensor) in analytic.iter().enumerate() {
        for (i, &a) in tensor.iter().enumerate() {
            let mut plus = model.clone();
            plus.tensors_mut()[ti][i] += GRAD_H;
            let mut minus = model.clone();
            minus.tensors_mut()[ti][i] -= GRAD_H;
            let numeric = (loss(&plus, &batch) - loss(&minus, &batch)) / (2.0 * GRAD_H);
            if a.abs().max(numeric.abs()) < 1e-7 {
                continue;
            }
            worst = worst.max(rel(a, numeric));
            checked += 1;
        }
    }
    // Embedding inputs, per example.
    for ex in &examples {
        let g = model.example_gradients(ex).expect("gradients");
        for (side, analytic) in [(0, &g.bug_input), (1, &g.description_input)] {
            for (i, &a) in analytic.iter().enumerate() {
                let nudge = |d: f64| {
                    let mut e = ex.clone();
                    let m = if side == 0 { &mut e.bug } else { &mut e.description };
                    m.rows[i] += d;
                    e
                };
                let (p, m) = (nudge(GRAD_H), nudge(-GRAD_H));
                let numeric = (loss(&model, &[&p]) - loss(&model, &[&m])) / (2.0 * GRAD_H);
                if a.abs().max(numeric.abs()) < 1e-7 {
                    continue;
                }
                worst = worst.max(rel(a, numeric));
                checked += 1;
            }
        }
    }
    outcome(
        worst < GRAD_REL_TOL && checked > 0,
        format!("{checked} partials, max relative error {worst:.2e}"),
    )
}

fn score_range() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let config = ModelConfig {
        seed: 5,
        ..ModelConfig::default()
    };
    let dim = 16;
    let model = QaModel::new(config.clone(), dim).expect("model");
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut positives_at_high = 0;
    for _ in 0..1000 {
        let lb = rng.random_range(0..=config.max_seq_len);
        let lc = rng.random_range(0..=config.max_seq_len);
        let ex = BatchExample {
            bug: random_seq(&mut rng, lb, dim, config.max_seq_len),
            description: random_seq(&mut rng, lc, dim, config.max_seq_len),
            label: rng.random(),
        };
        let s = model.score(&ex).expect("score");
        lo = lo.min(s);
        hi = hi.max(s);
        for t in [0.8, 0.9] {
            if model.predict(&ex, t).expect("predict").label {
                positives_at_high += 1;
            }
        }
    }
    outcome(
        lo >= SCORE_LO && hi <= SCORE_HI && positives_at_high == 0,
        format!("1000 scores in [{lo:.5}, {hi:.5}], {positives_at_high} 'correct' at t=0.8/0.9"),
    )
}

fn stats_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_u: f64 = 0.0;
    for _ in 0..50 {
        // Small integer range so ties occur.
        let a: Vec<f64> = (0..15).map(|_| rng.random_range(0..20) as f64).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.random_range(0..20) as f64).collect();
        let brute: f64 = a
            .iter()
            .flat_map(|x| b.iter().map(move |y| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 }))
            .sum();
        let Ok(r) = eval::mww_test(&a, &b) else {
            return outcome(false, "mww_test failed on a random sample");
        };
        worst_u = worst_u.max((r.u_statistic - brute).abs());
    }
    let mut worst_auc: f64 = 0.0;
    for _ in 0..50 {
        let mut pts: Vec<(f64, bool)> = (0..12).map(|_| (rng.random_range(0..8) as f64 / 7.0, rng.random())).collect();
        pts[0].1 = true;
        pts[1].1 = false;
        let (mut hits, mut pairs) = (0.0, 0.0);
        for p in pts.iter().filter(|p| p.1) {
            for n in pts.iter().filter(|p| !p.1) {
                pairs += 1.0;
                hits += if p.0 > n.0 { 1.0 } else if p.0 == n.0 { 0.5 } else { 0.0 };
            }
        }
        let Ok(a) = eval::auc(&pts) else {
            return outcome(false, "auc failed on a random score set");
        };
        worst_auc = worst_auc.max((a - hits / pairs).abs());
    }
    outcome(
        worst_u <= ORACLE_TOL && worst_auc <= ORACLE_TOL,
        format!("max |U - brute| {worst_u:.1e}, max |AUC - brute| {worst_auc:.1e}"),
    )
}

fn num(v: &Value, path: &[&str]) -> Option<f64> {
    path.iter().try_fold(v, |v, k| v.get(k))?.as_f64()
}

fn separability(report: &Value) -> Outcome {
    let auc = num(report, &["mean", "auc"]);
    let best = report["sweep"]
        .as_array()
        .and_then(|rows| {
            rows.iter()
                .filter_map(|r| Some((r["threshold"].as_f64()?, r["plus_recall"].as_f64()?, r["minus_recall"].as_f64()?)))
                .fold(None, |best: Option<(f64, f64, f64)>, r| match best {
                    Some(b) if b.1 + b.2 >= r.1 + r.2 => Some(b),
                    _ => Some(r),
                })
        });
    let folds = report["per_fold"].as_array().map_or(0, Vec::len);
    match (auc, best) {
        (Some(auc), Some((t, plus, _))) => outcome(
            auc >= MIN_AUC && plus >= MIN_PLUS_RECALL && folds == 10,
            format!("{folds} folds, mean AUC {auc:.4}, +Recall {plus:.4} at best threshold {t}"),
        ),
        _ => outcome(false, "report lacks mean AUC or a defined sweep row"),
    }
}

fn leakage(dataset: &Path, out: &Path, pair_seed: u64) -> Outcome {
    let plan: FoldPlan = match fs::read_to_string(out.join("foldplan.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
    {
        Some(p) => p,
        None => return outcome(false, "foldplan.json missing or unreadable"),
    };
    let ds = patchqa::corpus::load_dataset(dataset).expect("dataset");
    let examples = pairing::build_examples(&ds, pair_seed).expect("examples");
    let mut tested: BTreeMap<String, usize> = BTreeMap::new();
    for g in 0..plan.k {
        let Ok((train, test)) = pairing::fold_split(&examples, &plan, g) else {
            return outcome(false, format!("fold {g}: plan does not cover every example bug"));
        };
        let train_bugs: BTreeSet<&str> = train.iter().map(|e| e.bug_id.as_str()).collect();
        let test_bugs: BTreeSet<&str> = test.iter().map(|e| e.bug_id.as_str()).collect();
        if !train_bugs.is_disjoint(&test_bugs) {
            return outcome(false, format!("fold {g}: train and test share bugs"));
        }
        for b in test_bugs {
            *tested.entry(b.to_string()).or_default() += 1;
        }
    }
    let all: BTreeSet<String> = pairing::example_bug_ids(&examples);
    let once = tested.len() == all.len() && tested.values().all(|c| *c == 1);
    let rows = cli::read_scores(&out.join("scores.csv")).expect("scores");
    let scored: BTreeSet<(String, String)> = rows.iter().map(|r| (r.patch_id.clone(), r.bug_id.clone())).collect();
    let complete = scored.len() == rows.len() && rows.len() == examples.len();
    outcome(
        once && complete,
        format!(
            "{} bugs over {} folds, each tested {}; {} examples scored once",
            all.len(),
            plan.k,
            if once { "exactly once" } else { "NOT exactly once" },
            rows.len()
        ),
    )
}

fn hypothesis_direction(cfg: &RunConfig) -> Outcome {
    match cli::hypothesis(cfg) {
        Ok(r) => outcome(
            r.original_closer && r.original_median < r.random_median && r.test.p_value < MAX_P,
            format!(
                "{} pairs, median {:.3} vs {:.3}, p = {:.2e}",
                r.pairs, r.original_median, r.random_median, r.test.p_value
            ),
        ),
        Err(e) => outcome(false, format!("{e:#}")),
    }
}

fn determinism(earlier: &Path, out: &Path) -> Outcome {
    let same = |f: &str| fs::read(earlier.join(f)).ok().is_some_and(|x| Some(x) == fs::read(out.join(f)).ok());
    let (r, s) = (same("report.json"), same("scores.csv"));
    outcome(r && s, format!("report.json identical: {r}, scores.csv identical: {s}"))
}

fn ablation(report: &Value) -> Outcome {
    let a = &report["statistics"]["ablation"];
    match (
        a["mean_score_before"].as_f64(),
        a["mean_score_after"].as_f64(),
        a["dropped_fraction"].as_f64(),
    ) {
        (Some(before), Some(after), Some(frac)) => outcome(
            after < before && frac >= MIN_DROPPED,
            format!(
                "{} recalled, mean score {before:.4} -> {after:.4}, {:.1}% below threshold {}",
                a["recalled"],
                100.0 * frac,
                report["operating_threshold"]
            ),
        ),
        _ => outcome(false, "no recalled positives to re-pair"),
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    results.push((1, "metric oracle vs reference sweep counts", timed(Some(BUDGET_METRICS), metric_oracle)));
    results.push((2, "gradient correctness", timed(Some(BUDGET_GRADIENT), gradient_check)));
    results.push((3, "score-range invariant", timed(Some(BUDGET_RANGE), score_range)));

    let dir = tempfile::tempdir().expect("tempdir");
    let dataset = dir.path().join("synthetic.jsonl");
    synthetic::generate(&SyntheticSpec::default())
        .save(&dataset)
        .expect("write dataset");
    let cfg = |run: &str| RunConfig {
        hash_seed: 1,
        fold_seed: 2,
        pair_seed: 3,
        model: ModelConfig {
            seed: 4,
            ..ModelConfig::default()
        },
        ..RunConfig::with_dataset(&dataset, dir.path().join(run))
    };
    let first = cfg("run");

    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool");
    let mut report = Value::Null;
    let sep = timed(Some(BUDGET_SEPARABILITY), || {
        match single.install(|| cli::run_crossval(&first)) {
            Ok(r) => {
                report = serde_json::to_value(&r).expect("report json");
                separability(&report)
            }
            Err(e) => outcome(false, format!("{e:#}")),
        }
    });
    results.push((4, "synthetic separability", sep));
    results.push((5, "leakage invariant", timed(None, || leakage(&dataset, &first.out, first.pair_seed))));
    results.push((6, "statistics oracles", timed(Some(BUDGET_STATS), stats_oracles)));
    results.push((7, "hypothesis-study direction", timed(Some(BUDGET_HYPOTHESIS), || hypothesis_direction(&first))));
    // Same config and output directory; the first run's files are set aside.
    let earlier = dir.path().join("earlier");
    fs::create_dir_all(&earlier).expect("mkdir");
    for f in ["report.json", "scores.csv"] {
        let _ = fs::copy(first.out.join(f), earlier.join(f));
    }
    let det = timed(None, || match cli::run_crossval(&first) {
        Ok(_) => determinism(&earlier, &first.out),
        Err(e) => outcome(false, format!("{e:#}")),
    });
    results.push((8, "determinism", det));
    results.push((9, "mismatch ablation", timed(None, || ablation(&report))));

    let mut failed = 0;
    for (n, name, o) in &results {
        println!("{} criterion {n}: {name}: {}", if o.ok { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.ok);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
