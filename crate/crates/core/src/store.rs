//! Append-only run store: one directory per run holding `manifest.json` and
//! `records.jsonl`.
//!
//! A crash can leave a partial final line in `records.jsonl`. Readers ignore
//! such a torn tail; opening the run for writing truncates it, so the key it
//! would have recorded is simply pending again.

use std::collections::{BTreeSet, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use thiserror::Error;

use crate::record::{Phase, RecordKey, RepairMethod, RunManifest, RunRecord, StoredRecord};
use crate::sandbox::VerdictStatus;

const MANIFEST: &str = "manifest.json";
const RECORDS: &str = "records.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("run `{0}` not found")]
    NotFound(String),
    #[error("run `{0}` already exists")]
    AlreadyExists(String),
    #[error("duplicate record {0}")]
    Duplicate(RecordKey),
    #[error("{path}:{line}: corrupt record: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("store I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecordFilter {
    pub model: Option<String>,
    pub method: Option<RepairMethod>,
    pub phase: Option<Phase>,
    pub verdict: Option<VerdictStatus>,
}

impl RecordFilter {
    pub fn matches(&self, r: &RunRecord) -> bool {
        self.model.as_ref().is_none_or(|m| *m == r.model_id)
            && self.method.is_none_or(|m| r.method == Some(m))
            && self.phase.is_none_or(|p| p == r.phase)
            && self.verdict.is_none_or(|v| v == r.verdict.status)
    }
}

#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_at(&root))?;
        Ok(RunStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    fn records_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join(RECORDS)
    }

    pub fn exists(&self, run_id: &str) -> bool {
        self.run_dir(run_id).join(MANIFEST).is_file()
    }

    /// Writes the manifest (before any record) and opens the run for appends.
    pub fn create_run(&self, manifest: &RunManifest) -> Result<RunWriter, StoreError> {
        let dir = self.run_dir(&manifest.run_id);
        if self.exists(&manifest.run_id) {
            return Err(StoreError::AlreadyExists(manifest.run_id.clone()));
        }
        fs::create_dir_all(&dir).map_err(io_at(&dir))?;
        let path = dir.join(MANIFEST);
        let json = serde_json::to_string_pretty(manifest).expect("manifest serialises");
        let tmp = dir.join(".manifest.json.tmp");
        fs::write(&tmp, json).map_err(io_at(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_at(&path))?;
        self.open_run(&manifest.run_id)
    }

    pub fn manifest(&self, run_id: &str) -> Result<RunManifest, StoreError> {
        let path = self.run_dir(run_id).join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => StoreError::NotFound(run_id.to_string()),
            _ => StoreError::Io { path: path.clone(), source: e },
        })?;
        serde_json::from_str(&text).map_err(|e| StoreError::Corrupt { path, line: 0, message: e.to_string() })
    }

    pub fn list_runs(&self) -> Result<Vec<String>, StoreError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(io_at(&self.root))? {
            let entry = entry.map_err(io_at(&self.root))?;
            let id = entry.file_name().to_string_lossy().to_string();
            if self.exists(&id) {
                ids.push(id);
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Opens an existing run for appends, truncating any torn tail line.
    pub fn open_run(&self, run_id: &str) -> Result<RunWriter, StoreError> {
        if !self.exists(run_id) {
            return Err(StoreError::NotFound(run_id.to_string()));
        }
        let path = self.records_path(run_id);
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(&path).map_err(io_at(&path))?;
        let bytes = fs::read(&path).map_err(io_at(&path))?;
        let whole = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        if whole < bytes.len() {
            log::warn!("{}: truncating torn tail ({} bytes)", path.display(), bytes.len() - whole);
            file.set_len(whole as u64).map_err(io_at(&path))?;
            file.seek(SeekFrom::End(0)).map_err(io_at(&path))?;
        }
        let keys = parse_records(&path, &bytes[..whole])?.iter().map(RunRecord::key).collect();
        Ok(RunWriter { run_id: run_id.to_string(), path, inner: Mutex::new(WriterState { file, keys }) })
    }

    /// All whole records of a run matching `filter`, in file order.
    pub fn query(&self, run_id: &str, filter: &RecordFilter) -> Result<Vec<RunRecord>, StoreError> {
        Ok(self.records(run_id)?.into_iter().filter(|r| filter.matches(r)).collect())
    }

    pub fn records(&self, run_id: &str) -> Result<Vec<RunRecord>, StoreError> {
        if !self.exists(run_id) {
            return Err(StoreError::NotFound(run_id.to_string()));
        }
        let path = self.records_path(run_id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(StoreError::Io { path, source: e }),
        };
        let whole = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        parse_records(&path, &bytes[..whole])
    }

    pub fn completed_keys(&self, run_id: &str) -> Result<BTreeSet<RecordKey>, StoreError> {
        Ok(self.records(run_id)?.iter().map(RunRecord::key).collect())
    }
}

fn parse_records(path: &Path, bytes: &[u8]) -> Result<Vec<RunRecord>, StoreError> {
    let mut out = Vec::new();
    for (i, line) in bytes.split(|b| *b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let corrupt = |message: String| StoreError::Corrupt { path: path.to_path_buf(), line: i + 1, message };
        let stored: StoredRecord = serde_json::from_slice(line).map_err(|e| corrupt(e.to_string()))?;
        out.push(RunRecord::try_from(stored).map_err(corrupt)?);
    }
    Ok(out)
}

struct WriterState {
    file: File,
    keys: HashSet<RecordKey>,
}

/// Single writer for one run; appends are serialised through a mutex.
pub struct RunWriter {
    run_id: String,
    path: PathBuf,
    inner: Mutex<WriterState>,
}

impl RunWriter {
    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn append_record(&self, record: &RunRecord) -> Result<(), StoreError> {
        let key = record.key();
        let mut state = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        if state.keys.contains(&key) {
            return Err(StoreError::Duplicate(key));
        }
        let mut line = serde_json::to_vec(&StoredRecord::from(record)).expect("record serialises");
        line.push(b'\n');
        state.file.write_all(&line).map_err(io_at(&self.path))?;
        state.file.sync_data().map_err(io_at(&self.path))?;
        state.keys.insert(key);
        Ok(())
    }

    pub fn completed_keys(&self) -> BTreeSet<RecordKey> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).keys.iter().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Origin;
    use crate::llm::{ChatExchange, ChatMessage, LlmConfig, Role};
    use crate::prompts::SummaryStyle;
    use crate::record::{Protocol, RunOptionsSnapshot};
    use crate::sandbox::Verdict;
    use chrono::Utc;

    fn manifest(run_id: &str) -> RunManifest {
        RunManifest {
            run_id: run_id.into(),
            protocol: Protocol::BugRepair,
            dataset_digest: "abc".into(),
            task_ids: vec!["t1".into()],
            model_ids: vec!["m".into()],
            models: vec![LlmConfig::mock("m")],
            methods: vec![RepairMethod::DirectRepair],
            options: RunOptionsSnapshot::default(),
            created_at: Utc::now(),
        }
    }

    fn record(task: &str, status: VerdictStatus) -> RunRecord {
        RunRecord {
            run_id: "r".into(),
            task_id: task.into(),
            origin: Origin::HumanEvalPack,
            model_id: "m".into(),
            method: Some(RepairMethod::SummaryMediated(SummaryStyle::Error)),
            phase: Phase::Repair,
            summary_text: "Zählt die Wörter: returns a dict".into(),
            candidate_code: "def f(x):\n    \"\"\"doc\"\"\"\n    return {'a': x}\n".into(),
            verdict: Verdict { status, detail: "line 1\nline 2".into(), duration_ms: 12 },
            exchanges: vec![ChatExchange {
                request_prompt: "p".into(),
                messages: vec![ChatMessage { role: Role::User, content: "p".into() }],
                response_text: "```\ncode\n```".into(),
                model_id: "m".into(),
                latency_ms: 3,
                prompt_tokens: Some(10),
                completion_tokens: None,
                retry_count: 0,
                timestamp: Utc::now(),
            }],
            created_at: Utc::now(),
        }
    }

    #[test]
    fn append_then_query_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        let w = store.create_run(&manifest("r")).unwrap();
        let rec = record("t1", VerdictStatus::Pass);
        w.append_record(&rec).unwrap();
        let back = store.query("r", &RecordFilter::default()).unwrap();
        assert_eq!(back, vec![rec]);
        let text = fs::read_to_string(store.records_path("r")).unwrap();
        assert_eq!(text.lines().count(), 1);
        for field in ["run_id", "method_kind", "summary_style", "verdict_status", "verdict_detail", "duration_ms"] {
            assert!(text.contains(&format!("\"{field}\"")), "{field}");
        }
    }

    #[test]
    fn duplicate_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        let w = store.create_run(&manifest("r")).unwrap();
        w.append_record(&record("t1", VerdictStatus::Fail)).unwrap();
        assert!(matches!(w.append_record(&record("t1", VerdictStatus::Pass)), Err(StoreError::Duplicate(_))));
        assert_eq!(store.records("r").unwrap().len(), 1);
    }

    #[test]
    fn torn_tail_is_truncated_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        let w = store.create_run(&manifest("r")).unwrap();
        for t in ["t1", "t2", "t3"] {
            w.append_record(&record(t, VerdictStatus::Pass)).unwrap();
        }
        drop(w);
        let path = store.records_path("r");
        let bytes = fs::read(&path).unwrap();
        let last_start = bytes[..bytes.len() - 1].iter().rposition(|b| *b == b'\n').unwrap() + 1;
        let cut = last_start + (bytes.len() - last_start) / 2;
        fs::write(&path, &bytes[..cut]).unwrap();

        let keys = store.completed_keys("r").unwrap();
        assert_eq!(keys.len(), 2);
        let w = store.open_run("r").unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes[..last_start].to_vec());
        w.append_record(&record("t3", VerdictStatus::Fail)).unwrap();
        assert_eq!(store.completed_keys("r").unwrap().len(), 3);
    }

    #[test]
    fn filters_and_missing_runs() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        assert!(store.completed_keys("r").is_err());
        let w = store.create_run(&manifest("r")).unwrap();
        assert!(store.completed_keys("r").unwrap().is_empty());
        w.append_record(&record("t1", VerdictStatus::Pass)).unwrap();
        w.append_record(&record("t2", VerdictStatus::Fail)).unwrap();
        let pass = RecordFilter { verdict: Some(VerdictStatus::Pass), ..Default::default() };
        assert_eq!(store.query("r", &pass).unwrap().len(), 1);
        assert_eq!(store.query("r", &RecordFilter::default()).unwrap().len(), 2);
        assert!(matches!(store.query("nope", &RecordFilter::default()), Err(StoreError::NotFound(_))));
        assert!(matches!(store.create_run(&manifest("r")), Err(StoreError::AlreadyExists(_))));
        assert_eq!(store.manifest("r").unwrap(), manifest_with_time(&store));
    }

    fn manifest_with_time(store: &RunStore) -> RunManifest {
        let mut m = manifest("r");
        m.created_at = store.manifest("r").unwrap().created_at;
        m
    }
}
