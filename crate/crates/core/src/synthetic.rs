//! Generator for planted-keyword corpora.
//!
//! Every bug gets a few keywords of its own. The bug report and the
//! developer's patch description both contain those keywords; all other
//! words come from two disjoint filler vocabularies, one for reports and
//! one for descriptions. A description therefore shares words with its own
//! report and with no other report. Keywords lead both texts, in the same
//! order, the way a bug title and a commit message both open with the names
//! of the code they concern.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{BugReport, Dataset, DescriptionSource, Label, Origin, PatchDescription, PatchRecord};

const REPORT_WORDS: &[&str] = &[
    "error", "exception", "when", "calling", "with", "null", "input", "returns", "wrong", "value",
    "crash", "unexpected", "behaviour", "after", "upgrade", "throws", "on", "empty", "string",
    "incorrect", "result", "for", "negative", "numbers", "missing", "check", "causes", "failure",
    "should", "not", "be", "allowed", "inconsistent", "state", "timeout", "under", "load", "broken",
    "parsing", "of", "large", "files", "regression", "since", "version", "leads", "to", "overflow",
];

const DESCRIPTION_WORDS: &[&str] = &[
    "fix", "handle", "guard", "add", "remove", "update", "correct", "ensure", "return", "early",
    "properly", "refactor", "adjust", "initialize", "validate", "clamp", "reset", "skip", "use",
    "instead", "default", "branch", "condition", "loop", "bound", "patch", "change", "logic",
];

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub bugs: usize,
    pub keywords_per_bug: usize,
    /// Developer patches per bug, each with its own description.
    pub developer_per_bug: usize,
    /// Filler words in a bug report, excluding keywords.
    pub report_filler: usize,
    /// Filler words in a description, excluding keywords.
    pub description_filler: usize,
    /// Incorrect APR patches per bug, described with filler words only.
    pub incorrect_per_bug: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            bugs: 200,
            keywords_per_bug: 3,
            developer_per_bug: 4,
            report_filler: 8,
            description_filler: 4,
            incorrect_per_bug: 0,
            seed: 2023,
        }
    }
}

fn pseudo_word<R: Rng>(rng: &mut R) -> String {
    const CONSONANTS: &[u8] = b"bcdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let syllables = rng.random_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*CONSONANTS.choose(rng).expect("non-empty") as char);
        w.push(*VOWELS.choose(rng).expect("non-empty") as char);
    }
    w.push(*CONSONANTS.choose(rng).expect("non-empty") as char);
    w
}

fn sentence<R: Rng>(rng: &mut R, vocabulary: &[&str], filler: usize, keywords: &[String]) -> Vec<String> {
    let mut words = keywords.to_vec();
    words.extend((0..filler).map(|_| vocabulary.choose(rng).expect("non-empty").to_string()));
    words
}

/// Keywords for every bug, unique across the corpus and disjoint from both
/// filler vocabularies.
fn keywords<R: Rng>(rng: &mut R, bugs: usize, per_bug: usize) -> Vec<Vec<String>> {
    let mut used: std::collections::BTreeSet<String> = REPORT_WORDS
        .iter()
        .chain(DESCRIPTION_WORDS)
        .map(|w| w.to_string())
        .collect();
    (0..bugs)
        .map(|_| {
            (0..per_bug)
                .map(|_| loop {
                    let w = pseudo_word(rng);
                    if used.insert(w.clone()) {
                        break w;
                    }
                })
                .collect()
        })
        .collect()
}

pub fn generate(spec: &SyntheticSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let kws = keywords(&mut rng, spec.bugs, spec.keywords_per_bug);
    let mut bugs = Vec::new();
    let mut patches = Vec::new();
    let mut descriptions = Vec::new();

    for (i, kw) in kws.iter().enumerate() {
        let bug_id = format!("SYN-{i:04}");
        let report = sentence(&mut rng, REPORT_WORDS, spec.report_filler, kw);
        let split = report.len() / 3;
        bugs.push(BugReport {
            bug_id: bug_id.clone(),
            title: report[..split].join(" "),
            body: report[split..].join(" "),
        });

        let ident = kw.join("_");
        for d in 0..spec.developer_per_bug {
            let patch_id = format!("{bug_id}-dev{d}");
            patches.push(PatchRecord {
                patch_id: patch_id.clone(),
                bug_id: bug_id.clone(),
                diff: format!(
                    "--- a/src/{ident}.java\n+++ b/src/{ident}.java\n@@ -{line},1 +{line},1 @@\n-    run({ident});\n+    if ({ident} != null) run({ident});\n",
                    line = 10 + d
                ),
                origin: Origin::Developer,
                label: Label::Correct,
            });
            descriptions.push(PatchDescription {
                patch_id,
                text: sentence(&mut rng, DESCRIPTION_WORDS, spec.description_filler, kw).join(" "),
                source: DescriptionSource::HumanCommitMessage,
            });
        }

        for j in 0..spec.incorrect_per_bug {
            let patch_id = format!("{bug_id}-apr{j}");
            patches.push(PatchRecord {
                patch_id: patch_id.clone(),
                bug_id: bug_id.clone(),
                diff: format!("--- a/src/Util.java\n+++ b/src/Util.java\n@@ -5,1 +5,1 @@\n-    x = {j};\n+    x = {};\n", j + 1),
                origin: Origin::AprTool("synthetic".into()),
                label: Label::Incorrect,
            });
            descriptions.push(PatchDescription {
                patch_id,
                text: sentence(&mut rng, DESCRIPTION_WORDS, spec.description_filler + spec.keywords_per_bug, &[]).join(" "),
                source: DescriptionSource::Generated,
            });
        }
    }
    Dataset::from_records(bugs, patches, descriptions).expect("generated records are consistent")
}
