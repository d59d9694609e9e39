//! Unified diff parsing and a rule-based patch summarizer.
//!
//! The summarizer is the fallback used when a patch arrives without an
//! ingested description. Its output is a fixed template:
//!
//! ```text
//! removed 1 line [if (str.startsWith("--")) {] added 1 line [if (str.startsWith("---")) {] in NumberUtils
//! ```
//!
//! with one clause per file, clauses joined by `"; "`.

use thiserror::Error;

/// Changed-line snippets are cut to this many whitespace-separated tokens.
pub const SNIPPET_TOKENS: usize = 12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DiffError {
    #[error("line {line}: malformed hunk header `{header}`")]
    BadHeader { line: usize, header: String },
    #[error("line {line}: hunk appears before any `+++` file header")]
    MissingFileHeader { line: usize },
    #[error("hunk at line {line}: expected {expected_old} old / {expected_new} new lines, found {found_old} / {found_new}")]
    CountMismatch {
        line: usize,
        expected_old: usize,
        expected_new: usize,
        found_old: usize,
        found_new: usize,
    },
    #[error("hunk at line {line} has no added or removed lines")]
    EmptyHunk { line: usize },
    #[error("cannot summarize an empty hunk list")]
    NothingToSummarize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffHunk {
    pub file_path: String,
    pub old_start: usize,
    pub new_start: usize,
    pub removed_lines: Vec<String>,
    pub added_lines: Vec<String>,
    pub context_lines: Vec<String>,
}

struct OpenHunk {
    header_line: usize,
    old_len: usize,
    new_len: usize,
    hunk: DiffHunk,
}

impl OpenHunk {
    fn is_full(&self) -> bool {
        let h = &self.hunk;
        h.removed_lines.len() + h.context_lines.len() >= self.old_len
            && h.added_lines.len() + h.context_lines.len() >= self.new_len
    }

    fn finish(self) -> Result<DiffHunk, DiffError> {
        let h = self.hunk;
        let found_old = h.removed_lines.len() + h.context_lines.len();
        let found_new = h.added_lines.len() + h.context_lines.len();
        if found_old != self.old_len || found_new != self.new_len {
            return Err(DiffError::CountMismatch {
                line: self.header_line,
                expected_old: self.old_len,
                expected_new: self.new_len,
                found_old,
                found_new,
            });
        }
        if h.removed_lines.is_empty() && h.added_lines.is_empty() {
            return Err(DiffError::EmptyHunk {
                line: self.header_line,
            });
        }
        Ok(h)
    }
}

/// Parses `-a,b` / `+c,d` ranges. A missing count means 1.
fn parse_range(text: &str, sign: char) -> Option<(usize, usize)> {
    let rest = text.strip_prefix(sign)?;
    let (start, len) = match rest.split_once(',') {
        Some((s, l)) => (s.parse().ok()?, l.parse().ok()?),
        None => (rest.parse().ok()?, 1),
    };
    Some((start, len))
}

fn parse_hunk_header(line: &str) -> Option<(usize, usize, usize, usize)> {
    let inner = line.strip_prefix("@@ ")?;
    let end = inner.find(" @@")?;
    let mut parts = inner[..end].split_whitespace();
    let (old_start, old_len) = parse_range(parts.next()?, '-')?;
    let (new_start, new_len) = parse_range(parts.next()?, '+')?;
    if parts.next().is_some() {
        return None;
    }
    Some((old_start, old_len, new_start, new_len))
}

/// Strips a `a/` or `b/` prefix and any tab-separated timestamp.
fn header_path(rest: &str, prefix: &str) -> String {
    let path = rest.split('\t').next().unwrap_or("").trim_end();
    path.strip_prefix(prefix).unwrap_or(path).to_string()
}

/// Parses unified diff text into hunks, in file order.
///
/// Ranges with a zero length (new or deleted files) report a start line of 1.
pub fn parse_unified_diff(diff: &str) -> Result<Vec<DiffHunk>, DiffError> {
    let mut hunks = Vec::new();
    let mut old_path: Option<String> = None;
    let mut file_path: Option<String> = None;
    let mut open: Option<OpenHunk> = None;

    for (idx, line) in diff.lines().enumerate() {
        let lineno = idx + 1;

        if let Some(cur) = open.as_mut() {
            if !cur.is_full() {
                let body = line.get(1..).unwrap_or("").to_string();
                match line.chars().next() {
                    Some('+') => {
                        cur.hunk.added_lines.push(body);
                        continue;
                    }
                    Some('-') => {
                        cur.hunk.removed_lines.push(body);
                        continue;
                    }
                    Some(' ') => {
                        cur.hunk.context_lines.push(body);
                        continue;
                    }
                    // Some tools drop the leading space on blank context lines.
                    None => {
                        cur.hunk.context_lines.push(String::new());
                        continue;
                    }
                    Some('\\') => continue,
                    _ => {}
                }
            } else if line.starts_with('\\') {
                continue;
            }
            hunks.push(open.take().expect("open hunk").finish()?);
        }

        if let Some(rest) = line.strip_prefix("--- ") {
            old_path = Some(header_path(rest, "a/"));
        } else if let Some(rest) = line.strip_prefix("+++ ") {
            let path = header_path(rest, "b/");
            file_path = if path == "/dev/null" {
                old_path.clone().or(Some(path))
            } else {
                Some(path)
            };
        } else if line.starts_with("@@") {
            let (old_start, old_len, new_start, new_len) =
                parse_hunk_header(line).ok_or_else(|| DiffError::BadHeader {
                    line: lineno,
                    header: line.to_string(),
                })?;
            let path = file_path
                .clone()
                .ok_or(DiffError::MissingFileHeader { line: lineno })?;
            open = Some(OpenHunk {
                header_line: lineno,
                old_len,
                new_len,
                hunk: DiffHunk {
                    file_path: path,
                    old_start: old_start.max(1),
                    new_start: new_start.max(1),
                    removed_lines: Vec::new(),
                    added_lines: Vec::new(),
                    context_lines: Vec::new(),
                },
            });
        }
        // Anything else (`diff --git`, `index`, mode lines, free text) is ignored.
    }
    if let Some(cur) = open {
        hunks.push(cur.finish()?);
    }
    Ok(hunks)
}

/// File name without directories or extension.
fn file_stem(path: &str) -> &str {
    let name = path.rsplit(['/', '\\']).next().unwrap_or(path);
    match name.rfind('.') {
        Some(0) | None => name,
        Some(dot) => &name[..dot],
    }
}

fn snippet<'a>(lines: impl IntoIterator<Item = &'a String>) -> Option<String> {
    lines
        .into_iter()
        .find(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .take(SNIPPET_TOKENS)
                .collect::<Vec<_>>()
                .join(" ")
        })
}

fn plural(n: usize) -> &'static str {
    if n == 1 {
        "line"
    } else {
        "lines"
    }
}

/// Deterministic template summary of a list of hunks.
///
/// Template words are lowercase; snippets and file stems keep the casing of
/// the diff so identifiers survive.
pub fn summarize(hunks: &[DiffHunk]) -> Result<String, DiffError> {
    if hunks.is_empty() {
        return Err(DiffError::NothingToSummarize);
    }
    // Group by file, preserving first-appearance order.
    let mut files: Vec<(&str, Vec<&DiffHunk>)> = Vec::new();
    for h in hunks {
        match files.iter_mut().find(|(p, _)| *p == h.file_path) {
            Some((_, group)) => group.push(h),
            None => files.push((&h.file_path, vec![h])),
        }
    }

    let clauses: Vec<String> = files
        .iter()
        .map(|(path, group)| {
            let removed: usize = group.iter().map(|h| h.removed_lines.len()).sum();
            let added: usize = group.iter().map(|h| h.added_lines.len()).sum();
            let mut parts = Vec::new();
            if removed > 0 {
                let mut s = format!("removed {removed} {}", plural(removed));
                if let Some(snip) = snippet(group.iter().flat_map(|h| &h.removed_lines)) {
                    s.push_str(&format!(" [{snip}]"));
                }
                parts.push(s);
            }
            if added > 0 {
                let mut s = format!("added {added} {}", plural(added));
                if let Some(snip) = snippet(group.iter().flat_map(|h| &h.added_lines)) {
                    s.push_str(&format!(" [{snip}]"));
                }
                parts.push(s);
            }
            parts.push(format!("in {}", file_stem(path)));
            parts.join(" ")
        })
        .collect();
    Ok(clauses.join("; "))
}

/// Parses and summarizes in one step.
pub fn describe_diff(diff: &str) -> Result<String, DiffError> {
    summarize(&parse_unified_diff(diff)?)
}
