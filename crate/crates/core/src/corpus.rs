//! Dataset model: bug reports, candidate patches and their natural-language
//! descriptions, loaded from a line-delimited JSON file.
//!
//! A dataset file holds three record kinds, discriminated by `"kind"`:
//!
//! ```text
//! {"kind":"bug","bug_id":"Lang-7","title":"...","body":"..."}
//! {"kind":"patch","patch_id":"p1","bug_id":"Lang-7","diff":"...","origin":"developer","label":"correct"}
//! {"kind":"description","patch_id":"p1","text":"...","source":"human"}
//! ```
//!
//! Records may appear in any order; references are resolved after the whole
//! file has been read.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read dataset: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate {what} id `{id}`")]
    Duplicate {
        line: usize,
        what: &'static str,
        id: String,
    },
    #[error("line {line}: {what} references unknown {target} `{id}`")]
    Dangling {
        line: usize,
        what: &'static str,
        target: &'static str,
        id: String,
    },
}

/// The question side of a pair. Comments are never stored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BugReport {
    pub bug_id: String,
    pub title: String,
    #[serde(default)]
    pub body: String,
}

impl BugReport {
    /// Title and body joined by a newline.
    pub fn text(&self) -> String {
        format!("{}\n{}", self.title, self.body)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Origin {
    Developer,
    AprTool(String),
}

impl Origin {
    pub fn is_developer(&self) -> bool {
        matches!(self, Origin::Developer)
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Developer => f.write_str("developer"),
            Origin::AprTool(tool) => write!(f, "apr:{tool}"),
        }
    }
}

impl std::str::FromStr for Origin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "developer" {
            return Ok(Origin::Developer);
        }
        match s.strip_prefix("apr:") {
            Some(tool) if !tool.is_empty() => Ok(Origin::AprTool(tool.to_string())),
            _ => Err(format!(
                "invalid origin `{s}` (expected `developer` or `apr:<tool>`)"
            )),
        }
    }
}

impl Serialize for Origin {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Origin {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Correct,
    Incorrect,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: String,
    pub bug_id: String,
    pub diff: String,
    pub origin: Origin,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DescriptionSource {
    #[serde(rename = "human")]
    HumanCommitMessage,
    #[serde(rename = "generated")]
    Generated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchDescription {
    pub patch_id: String,
    pub text: String,
    pub source: DescriptionSource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Bug(BugReport),
    Patch(PatchRecord),
    Description(PatchDescription),
}

/// Immutable after construction; all maps are ordered by key so iteration is
/// deterministic.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    bugs: BTreeMap<String, BugReport>,
    patches: BTreeMap<String, PatchRecord>,
    descriptions: BTreeMap<String, PatchDescription>,
}

impl Dataset {
    /// Builds a dataset from in-memory records, applying the same checks as
    /// [`load_dataset`]. Line numbers in errors are 1-based positions in the
    /// concatenated record order (bugs, patches, descriptions).
    pub fn from_records(
        bugs: impl IntoIterator<Item = BugReport>,
        patches: impl IntoIterator<Item = PatchRecord>,
        descriptions: impl IntoIterator<Item = PatchDescription>,
    ) -> Result<Self, CorpusError> {
        let records = bugs
            .into_iter()
            .map(Record::Bug)
            .chain(patches.into_iter().map(Record::Patch))
            .chain(descriptions.into_iter().map(Record::Description));
        assemble(records.enumerate().map(|(i, r)| (i + 1, r)))
    }

    pub fn bugs(&self) -> impl Iterator<Item = &BugReport> {
        self.bugs.values()
    }

    pub fn patches(&self) -> impl Iterator<Item = &PatchRecord> {
        self.patches.values()
    }

    pub fn descriptions(&self) -> impl Iterator<Item = &PatchDescription> {
        self.descriptions.values()
    }

    pub fn bug(&self, bug_id: &str) -> Option<&BugReport> {
        self.bugs.get(bug_id)
    }

    pub fn patch(&self, patch_id: &str) -> Option<&PatchRecord> {
        self.patches.get(patch_id)
    }

    pub fn description(&self, patch_id: &str) -> Option<&PatchDescription> {
        self.descriptions.get(patch_id)
    }

    pub fn bug_count(&self) -> usize {
        self.bugs.len()
    }

    pub fn patch_count(&self) -> usize {
        self.patches.len()
    }

    pub fn description_count(&self) -> usize {
        self.descriptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bugs.is_empty() && self.patches.is_empty() && self.descriptions.is_empty()
    }

    /// Writes the dataset in the line-delimited format read by
    /// [`load_dataset`]: bugs, then patches, then descriptions, each in key
    /// order.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let records = self
            .bugs
            .values()
            .cloned()
            .map(Record::Bug)
            .chain(self.patches.values().cloned().map(Record::Patch))
            .chain(self.descriptions.values().cloned().map(Record::Description));
        for record in records {
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let file = fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(file);
        self.write_jsonl(&mut out)?;
        out.flush()
    }
}

/// Reads a dataset file. Blank lines are ignored.
pub fn load_dataset(path: &Path) -> Result<Dataset, CorpusError> {
    let file = fs::File::open(path)?;
    read_dataset(BufReader::new(file))
}

pub fn read_dataset<R: BufRead>(reader: R) -> Result<Dataset, CorpusError> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: lineno,
                message: e.to_string(),
            })?;
        records.push((lineno, record));
    }
    assemble(records)
}

fn assemble(records: impl IntoIterator<Item = (usize, Record)>) -> Result<Dataset, CorpusError> {
    let mut ds = Dataset::default();
    // Line numbers kept for reporting dangling references after all bugs are known.
    let mut patch_lines = BTreeMap::new();
    let mut desc_lines = BTreeMap::new();

    for (line, record) in records {
        match record {
            Record::Bug(bug) => {
                if bug.bug_id.trim().is_empty() {
                    return Err(malformed(line, "bug_id must be non-empty"));
                }
                if ds.bugs.contains_key(&bug.bug_id) {
                    return Err(CorpusError::Duplicate {
                        line,
                        what: "bug",
                        id: bug.bug_id,
                    });
                }
                ds.bugs.insert(bug.bug_id.clone(), bug);
            }
            Record::Patch(patch) => {
                if patch.patch_id.trim().is_empty() {
                    return Err(malformed(line, "patch_id must be non-empty"));
                }
                if patch.diff.trim().is_empty() {
                    return Err(malformed(
                        line,
                        &format!("patch `{}` has an empty diff", patch.patch_id),
                    ));
                }
                if ds.patches.contains_key(&patch.patch_id) {
                    return Err(CorpusError::Duplicate {
                        line,
                        what: "patch",
                        id: patch.patch_id,
                    });
                }
                patch_lines.insert(patch.patch_id.clone(), line);
                ds.patches.insert(patch.patch_id.clone(), patch);
            }
            Record::Description(desc) => {
                if normalize_whitespace(&desc.text).is_empty() {
                    return Err(malformed(
                        line,
                        &format!("description for `{}` is empty", desc.patch_id),
                    ));
                }
                if ds.descriptions.contains_key(&desc.patch_id) {
                    return Err(CorpusError::Duplicate {
                        line,
                        what: "description",
                        id: desc.patch_id,
                    });
                }
                desc_lines.insert(desc.patch_id.clone(), line);
                ds.descriptions.insert(desc.patch_id.clone(), desc);
            }
        }
    }

    for patch in ds.patches.values() {
        if !ds.bugs.contains_key(&patch.bug_id) {
            return Err(CorpusError::Dangling {
                line: patch_lines[&patch.patch_id],
                what: "patch",
                target: "bug",
                id: patch.bug_id.clone(),
            });
        }
    }
    for desc in ds.descriptions.values() {
        if !ds.patches.contains_key(&desc.patch_id) {
            return Err(CorpusError::Dangling {
                line: desc_lines[&desc.patch_id],
                what: "description",
                target: "patch",
                id: desc.patch_id.clone(),
            });
        }
    }
    Ok(ds)
}

fn malformed(line: usize, message: &str) -> CorpusError {
    CorpusError::Malformed {
        line,
        message: message.to_string(),
    }
}

fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Diff normalization used for deduplication: trailing whitespace is stripped
/// from every line and runs of blank lines collapse into one.
pub fn normalize_diff(diff: &str) -> String {
    let mut out: Vec<&str> = Vec::new();
    for line in diff.lines() {
        let line = line.trim_end();
        if line.is_empty() && out.last().is_some_and(|prev| prev.is_empty()) {
            continue;
        }
        out.push(line);
    }
    out.join("\n")
}

/// Keeps one patch per `(bug_id, normalized diff)` group, the one with the
/// smallest `patch_id`. Descriptions of dropped patches are dropped too.
pub fn dedup_patches(dataset: &Dataset) -> Dataset {
    let mut seen = BTreeSet::new();
    let mut patches = BTreeMap::new();
    for (id, patch) in &dataset.patches {
        if seen.insert((patch.bug_id.clone(), normalize_diff(&patch.diff))) {
            patches.insert(id.clone(), patch.clone());
        }
    }
    let descriptions = dataset
        .descriptions
        .iter()
        .filter(|(id, _)| patches.contains_key(*id))
        .map(|(id, d)| (id.clone(), d.clone()))
        .collect();
    Dataset {
        bugs: dataset.bugs.clone(),
        patches,
        descriptions,
    }
}
