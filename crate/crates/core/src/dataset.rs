//! Benchmark loaders for the HumanEvalPack fix split and the MBPP test split.
//!
//! Both loaders read line-delimited JSON from local files only. Fetching and
//! caching the upstream files is the CLI's job (see [`fetch`]).

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::sandbox::{Executor, SandboxError, VerdictStatus};

pub const HUMANEVALPACK_TASKS: usize = 164;
pub const MBPP_TEST_TASKS: usize = 500;

/// MBPP task ids 11..=510 form the test split.
const MBPP_TEST_IDS: std::ops::RangeInclusive<u64> = 11..=510;

pub const HUMANEVALPACK_URL: &str =
    "https://huggingface.co/datasets/bigcode/humanevalpack/resolve/main/data/python/data/humanevalpack.jsonl";
pub const MBPP_URL: &str =
    "https://raw.githubusercontent.com/google-research/google-research/master/mbpp/mbpp.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Origin {
    HumanEvalPack,
    #[serde(rename = "MBPP")]
    Mbpp,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::HumanEvalPack => f.write_str("HumanEvalPack"),
            Origin::Mbpp => f.write_str("MBPP"),
        }
    }
}

/// One benchmark unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairTask {
    pub id: String,
    pub origin: Origin,
    pub entry_point: String,
    pub signature: String,
    pub prelude: String,
    pub subject_code: String,
    pub description: String,
    pub canonical_solution: String,
    pub test_code: String,
    pub bug_type: Option<String>,
}

impl RepairTask {
    /// First assertion line of the test code, used to show the expected call shape.
    pub fn first_assertion(&self) -> Option<&str> {
        self.test_code
            .lines()
            .map(str::trim)
            .find(|l| l.starts_with("assert"))
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("0 records in {0}")]
    Empty(PathBuf),
    #[error("expected {expected} records, found {found}")]
    Count { expected: usize, found: usize },
    #[error("task {id}: {message}")]
    Invalid { id: String, message: String },
    #[error("download failed: {0}")]
    Fetch(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

type JsonObject = serde_json::Map<String, Value>;

/// Reads non-blank lines as JSON objects, keeping 1-based line numbers.
fn read_jsonl(path: &Path) -> Result<Vec<(usize, JsonObject)>, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (idx, raw) in bytes.split(|b| *b == b'\n').enumerate() {
        let line = idx + 1;
        let text = std::str::from_utf8(raw).map_err(|_| DatasetError::Malformed {
            line,
            message: "not valid UTF-8".into(),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(text).map_err(|e| DatasetError::Malformed {
            line,
            message: e.to_string(),
        })?;
        match value {
            Value::Object(map) => out.push((line, map)),
            _ => {
                return Err(DatasetError::Malformed { line, message: "record is not a JSON object".into() })
            }
        }
    }
    if out.is_empty() {
        return Err(DatasetError::Empty(path.to_path_buf()));
    }
    Ok(out)
}

fn str_field<'a>(
    rec: &'a serde_json::Map<String, Value>,
    line: usize,
    key: &str,
) -> Result<&'a str, DatasetError> {
    match rec.get(key) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(DatasetError::Malformed { line, message: format!("field `{key}` is not a string") }),
        None => Err(DatasetError::Malformed { line, message: format!("missing field `{key}`") }),
    }
}

fn opt_str_field<'a>(rec: &'a serde_json::Map<String, Value>, key: &str) -> &'a str {
    rec.get(key).and_then(Value::as_str).unwrap_or("")
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c == '_' || c.is_alphabetic())
        && chars.all(|c| c == '_' || c.is_alphanumeric())
}

/// Returns `(index of first line, index past last line)` of the `def` header
/// for `name`, following the header across lines until the closing colon.
fn find_def_header(lines: &[&str], name: &str) -> Option<(usize, usize)> {
    let start = lines.iter().position(|l| {
        let t = l.trim_start();
        let t = t.strip_prefix("async ").map(str::trim_start).unwrap_or(t);
        t.strip_prefix("def ")
            .map(|rest| {
                let rest = rest.trim_start();
                rest.strip_prefix(name)
                    .is_some_and(|after| after.trim_start().starts_with('('))
            })
            .unwrap_or(false)
    })?;
    let mut depth = 0i32;
    for (i, line) in lines.iter().enumerate().skip(start) {
        for c in line.chars() {
            match c {
                '(' | '[' | '{' => depth += 1,
                ')' | ']' | '}' => depth -= 1,
                _ => {}
            }
        }
        if depth <= 0 && line.trim_end().ends_with(':') {
            return Some((start, i + 1));
        }
    }
    Some((start, start + 1))
}

/// Strips a leading triple-quoted docstring from an indented function body.
pub fn strip_leading_docstring(body: &str) -> String {
    let trimmed = body.trim_start_matches(['\n', '\r']);
    let lead = trimmed.len() - trimmed.trim_start().len();
    let after_ws = &trimmed[lead..];
    let after_prefix = after_ws.trim_start_matches(['r', 'R', 'u', 'U']);
    for quote in ["\"\"\"", "'''"] {
        if let Some(rest) = after_prefix.strip_prefix(quote) {
            if let Some(end) = rest.find(quote) {
                let remainder = &rest[end + quote.len()..];
                // drop the rest of the docstring's closing line
                let remainder = match remainder.find('\n') {
                    Some(nl) if remainder[..nl].trim().is_empty() => &remainder[nl + 1..],
                    None if remainder.trim().is_empty() => "",
                    _ => remainder,
                };
                return remainder.to_string();
            }
        }
    }
    body.to_string()
}

fn join_unit(header: &str, body: &str) -> String {
    let mut out = header.trim_end_matches('\n').to_string();
    out.push('\n');
    out.push_str(body.trim_start_matches('\n').trim_end());
    out.push('\n');
    out
}

/// Splits a HumanEvalPack declaration into `(prelude, signature)`.
///
/// Everything above the entry point's `def` (imports, helper functions) is
/// prelude; the header itself is the signature, and any docstring below it is
/// dropped.
fn split_declaration(declaration: &str, entry_point: &str) -> Option<(String, String)> {
    let lines: Vec<&str> = declaration.lines().collect();
    let (start, end) = find_def_header(&lines, entry_point)?;
    let prelude = lines[..start].join("\n").trim_end().to_string();
    let signature = lines[start..end].join("\n");
    Some((prelude, signature))
}

/// Loads the HumanEvalPack (Python) fix split. Accepts a file or a directory
/// containing `humanevalpack.jsonl`.
pub fn load_humanevalpack(source: &Path) -> Result<Vec<RepairTask>, DatasetError> {
    let path = if source.is_dir() { source.join("humanevalpack.jsonl") } else { source.to_path_buf() };
    let records = read_jsonl(&path)?;
    let mut tasks = Vec::with_capacity(records.len());
    for (line, rec) in &records {
        let line = *line;
        let raw_id = str_field(rec, line, "task_id")?;
        let declaration = str_field(rec, line, "declaration")?;
        let buggy = str_field(rec, line, "buggy_solution")?;
        let canonical = str_field(rec, line, "canonical_solution")?;
        let test = str_field(rec, line, "test")?;
        let entry_point = str_field(rec, line, "entry_point")?;
        let bug_type = str_field(rec, line, "bug_type")?;

        if !is_identifier(entry_point) {
            return Err(DatasetError::Malformed { line, message: format!("entry_point `{entry_point}` is not an identifier") });
        }
        let id = match raw_id.strip_prefix("Python/") {
            Some(n) => format!("HumanEval/{n}"),
            None => raw_id.to_string(),
        };
        let (mut prelude, signature) = split_declaration(declaration, entry_point).ok_or_else(|| {
            DatasetError::Malformed { line, message: format!("declaration has no `def {entry_point}(`") }
        })?;
        let imports = opt_str_field(rec, "import").trim();
        if !imports.is_empty() && !prelude.contains(imports) {
            prelude = format!("{imports}\n{prelude}").trim_end().to_string();
        }
        let subject_code = join_unit(&signature, &strip_leading_docstring(buggy));
        let canonical_solution = join_unit(&signature, &strip_leading_docstring(canonical));

        let task = RepairTask {
            id,
            origin: Origin::HumanEvalPack,
            entry_point: entry_point.to_string(),
            signature,
            prelude,
            subject_code,
            description: String::new(),
            canonical_solution,
            test_code: test.to_string(),
            bug_type: Some(bug_type.to_string()),
        };
        check_task(&task)?;
        tasks.push(task);
    }
    if tasks.len() != HUMANEVALPACK_TASKS {
        return Err(DatasetError::Count { expected: HUMANEVALPACK_TASKS, found: tasks.len() });
    }
    Ok(tasks)
}

fn mbpp_id(rec: &serde_json::Map<String, Value>, line: usize) -> Result<u64, DatasetError> {
    match rec.get("task_id") {
        Some(Value::Number(n)) => n.as_u64(),
        Some(Value::String(s)) => s.trim_start_matches("mbpp/").parse().ok(),
        _ => None,
    }
    .ok_or_else(|| DatasetError::Malformed { line, message: "missing or invalid `task_id`".into() })
}

/// Picks the function the assertions exercise: the first `def` in the
/// reference code whose name is called in the first assertion.
fn mbpp_entry_point(code: &str, first_test: &str) -> Option<String> {
    let names: Vec<&str> = code
        .lines()
        .filter_map(|l| {
            let rest = l.trim_start().strip_prefix("def ")?;
            let end = rest.find('(')?;
            Some(rest[..end].trim())
        })
        .collect();
    names
        .iter()
        .find(|n| {
            first_test.match_indices(**n).any(|(i, _)| {
                let before = first_test[..i].chars().next_back();
                let after = first_test[i + n.len()..].trim_start().chars().next();
                !before.is_some_and(|c| c == '_' || c.is_alphanumeric()) && after == Some('(')
            })
        })
        .or(names.last())
        .map(|s| s.to_string())
}

/// Loads the MBPP test split (task ids 11..=510). A full 974-record file is
/// accepted and filtered down to the test split.
pub fn load_mbpp_test(source: &Path) -> Result<Vec<RepairTask>, DatasetError> {
    let records = read_jsonl(source)?;
    let full_file = records.len() > MBPP_TEST_TASKS;
    let mut tasks = Vec::with_capacity(MBPP_TEST_TASKS);
    for (line, rec) in &records {
        let line = *line;
        let num = mbpp_id(rec, line)?;
        if full_file && !MBPP_TEST_IDS.contains(&num) {
            continue;
        }
        let id = format!("mbpp/{num}");
        let text = str_field(rec, line, "text")?;
        let code = str_field(rec, line, "code")?;
        let tests: Vec<String> = match rec.get("test_list") {
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| {
                    v.as_str().map(str::to_string).ok_or_else(|| DatasetError::Malformed {
                        line,
                        message: "`test_list` entries must be strings".into(),
                    })
                })
                .collect::<Result<_, _>>()?,
            _ => return Err(DatasetError::Malformed { line, message: "missing field `test_list`".into() }),
        };
        if tests.is_empty() {
            return Err(DatasetError::Invalid { id, message: "empty assertion list".into() });
        }
        let setup = opt_str_field(rec, "test_setup_code");
        let entry_point = mbpp_entry_point(code, &tests[0]).ok_or_else(|| DatasetError::Invalid {
            id: id.clone(),
            message: "reference code defines no function".into(),
        })?;
        let signature = code
            .lines()
            .find(|l| l.trim_start().starts_with(&format!("def {entry_point}")))
            .unwrap_or("")
            .trim()
            .to_string();
        let mut test_code = String::new();
        if !setup.trim().is_empty() {
            test_code.push_str(setup.trim_end());
            test_code.push('\n');
        }
        for t in &tests {
            test_code.push_str(t.trim());
            test_code.push('\n');
        }
        let task = RepairTask {
            id,
            origin: Origin::Mbpp,
            entry_point,
            signature,
            prelude: String::new(),
            subject_code: String::new(),
            description: text.trim().to_string(),
            canonical_solution: code.replace("\r\n", "\n"),
            test_code,
            bug_type: None,
        };
        check_task(&task)?;
        tasks.push(task);
    }
    if tasks.len() != MBPP_TEST_TASKS {
        return Err(DatasetError::Count { expected: MBPP_TEST_TASKS, found: tasks.len() });
    }
    Ok(tasks)
}

/// Checks the per-task invariants that do not need a sandbox.
pub fn check_task(task: &RepairTask) -> Result<(), DatasetError> {
    let invalid = |message: &str| DatasetError::Invalid { id: task.id.clone(), message: message.to_string() };
    if !is_identifier(&task.entry_point) {
        return Err(invalid("entry point is not an identifier"));
    }
    if !task.test_code.contains(&task.entry_point) {
        return Err(invalid("entry point does not appear in the test code"));
    }
    match task.origin {
        Origin::HumanEvalPack => {
            if task.subject_code.trim().is_empty() {
                return Err(invalid("empty buggy solution"));
            }
            if task.bug_type.is_none() {
                return Err(invalid("missing bug type"));
            }
        }
        Origin::Mbpp => {
            if task.description.is_empty() {
                return Err(invalid("empty description"));
            }
        }
    }
    Ok(())
}

/// Content hash of a task list, recorded in run manifests.
pub fn dataset_digest(tasks: &[RepairTask]) -> String {
    let mut hasher = Sha256::new();
    for task in tasks {
        let line = serde_json::to_vec(task).expect("task serialises");
        hasher.update(&line);
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

/// Plain-text exclusion list: one task id per line, `#` comments allowed.
pub fn load_exclusions(path: &Path) -> Result<BTreeSet<String>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn write_exclusions(path: &Path, ids: &[String]) -> Result<(), DatasetError> {
    let mut text = String::new();
    for id in ids {
        text.push_str(id);
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationEntry {
    pub id: String,
    pub verdict: VerdictStatus,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub entries: Vec<ValidationEntry>,
}

impl ValidationReport {
    pub fn passed(&self) -> usize {
        self.entries.iter().filter(|e| e.verdict == VerdictStatus::Pass).count()
    }

    pub fn pass_fraction(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.passed() as f64 / self.entries.len() as f64
    }

    pub fn failed_ids(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.verdict != VerdictStatus::Pass)
            .map(|e| e.id.clone())
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), DatasetError> {
        let mut file = fs::File::create(path).map_err(io_err(path))?;
        for entry in &self.entries {
            let line = serde_json::to_string(entry).expect("entry serialises");
            writeln!(file, "{line}").map_err(io_err(path))?;
        }
        Ok(())
    }
}

/// Runs every canonical solution against its own tests.
pub fn validate_dataset(
    tasks: &[RepairTask],
    sandbox: &dyn Executor,
    timeout: std::time::Duration,
) -> Result<ValidationReport, SandboxError> {
    let mut report = ValidationReport::default();
    for task in tasks {
        let verdict = sandbox.run_tests(&task.prelude, &task.canonical_solution, &task.test_code, timeout)?;
        report.entries.push(ValidationEntry { id: task.id.clone(), verdict: verdict.status, detail: verdict.detail });
    }
    Ok(report)
}

/// Runs every shipped buggy solution; each must fail or error for the task to
/// be a meaningful repair target. Returns ids whose bug does not break the tests.
pub fn verify_bugs(
    tasks: &[RepairTask],
    sandbox: &dyn Executor,
    timeout: std::time::Duration,
) -> Result<Vec<String>, SandboxError> {
    let mut passing = Vec::new();
    for task in tasks.iter().filter(|t| !t.subject_code.is_empty()) {
        let verdict = sandbox.run_tests(&task.prelude, &task.subject_code, &task.test_code, timeout)?;
        if verdict.status == VerdictStatus::Pass {
            passing.push(task.id.clone());
        }
    }
    Ok(passing)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    HumanEvalPack,
    Mbpp,
}

impl Benchmark {
    pub fn file_name(self) -> &'static str {
        match self {
            Benchmark::HumanEvalPack => "humanevalpack.jsonl",
            Benchmark::Mbpp => "mbpp.jsonl",
        }
    }

    pub fn default_url(self) -> &'static str {
        match self {
            Benchmark::HumanEvalPack => HUMANEVALPACK_URL,
            Benchmark::Mbpp => MBPP_URL,
        }
    }

    pub fn load(self, path: &Path) -> Result<Vec<RepairTask>, DatasetError> {
        match self {
            Benchmark::HumanEvalPack => load_humanevalpack(path),
            Benchmark::Mbpp => load_mbpp_test(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchOutcome {
    pub path: PathBuf,
    pub records: usize,
    pub cache_hit: bool,
}

/// Downloads a benchmark into `cache_dir` unless a valid copy is already
/// there. The download is validated with the loader before it replaces the
/// cache, so a corrupted transfer never clobbers a good file.
pub fn fetch(benchmark: Benchmark, cache_dir: &Path, url: Option<&str>) -> Result<FetchOutcome, DatasetError> {
    let target = cache_dir.join(benchmark.file_name());
    if target.exists() {
        if let Ok(tasks) = benchmark.load(&target) {
            return Ok(FetchOutcome { path: target, records: tasks.len(), cache_hit: true });
        }
        log::warn!("cached {} is invalid; downloading again", target.display());
    }
    fs::create_dir_all(cache_dir).map_err(io_err(cache_dir))?;
    let url = url.unwrap_or(benchmark.default_url());
    let response = reqwest::blocking::get(url).map_err(|e| DatasetError::Fetch(e.to_string()))?;
    if !response.status().is_success() {
        return Err(DatasetError::Fetch(format!("{url}: HTTP {}", response.status())));
    }
    let body = response.bytes().map_err(|e| DatasetError::Fetch(e.to_string()))?;
    let mut staged = tempfile::NamedTempFile::new_in(cache_dir).map_err(io_err(cache_dir))?;
    staged.write_all(&body).map_err(io_err(staged.path()))?;
    let tasks = benchmark.load(staged.path())?;
    staged.persist(&target).map_err(|e| DatasetError::Io { path: target.clone(), source: e.error })?;
    Ok(FetchOutcome { path: target, records: tasks.len(), cache_hit: false })
}
