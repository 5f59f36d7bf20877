//! Test execution for candidate solutions.
//!
//! [`SubprocessSandbox`] assembles `prelude + candidate + tests` into one
//! program file inside a private temp directory and runs
//! `interpreter shim program` in a fresh process group. The shim reports a
//! single JSON line on stdout:
//!
//! ```text
//! {"status": "pass"|"fail"|"error", "detail": "...", "tests_run": 3}
//! ```
//!
//! The exit code is ignored. Network access is not blocked.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);
/// Upper bound on captured child stdout.
pub const OUTPUT_CAP: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Pass,
    Fail,
    Error,
    Timeout,
    ExtractionFailure,
}

impl VerdictStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            VerdictStatus::Pass => "pass",
            VerdictStatus::Fail => "fail",
            VerdictStatus::Error => "error",
            VerdictStatus::Timeout => "timeout",
            VerdictStatus::ExtractionFailure => "extraction_failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: VerdictStatus,
    pub detail: String,
    pub duration_ms: u64,
}

impl Verdict {
    pub fn new(status: VerdictStatus, detail: impl Into<String>) -> Self {
        Verdict { status, detail: detail.into(), duration_ms: 0 }
    }

    pub fn passed(&self) -> bool {
        self.status == VerdictStatus::Pass
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    /// The host cannot run tests at all (missing interpreter or shim).
    #[error("sandbox environment error: {0}")]
    Environment(String),
    #[error("sandbox I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub trait Executor: Send + Sync {
    fn run_tests(
        &self,
        prelude: &str,
        candidate_code: &str,
        test_code: &str,
        timeout: Duration,
    ) -> Result<Verdict, SandboxError>;
}

/// Program order is prelude, candidate, tests: the candidate may shadow
/// prelude helpers and the tests always see the candidate.
pub fn assemble_program(prelude: &str, candidate_code: &str, test_code: &str) -> String {
    let mut program = String::new();
    for part in [prelude, candidate_code, test_code] {
        if part.trim().is_empty() {
            continue;
        }
        program.push_str(part.trim_end());
        program.push_str("\n\n");
    }
    program
}

/// The JSON line printed by the shim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShimReport {
    pub status: String,
    #[serde(default)]
    pub detail: String,
    #[serde(default)]
    pub tests_run: u64,
}

/// Maps raw child stdout to a verdict, reading the last non-empty line.
pub fn parse_shim_output(stdout: &str) -> Verdict {
    let Some(last) = stdout.lines().rev().find(|l| !l.trim().is_empty()) else {
        return Verdict::new(VerdictStatus::Error, "shim produced no verdict");
    };
    let report: ShimReport = match serde_json::from_str(last.trim()) {
        Ok(r) => r,
        Err(_) => return Verdict::new(VerdictStatus::Error, "shim protocol"),
    };
    let status = match report.status.as_str() {
        "pass" => VerdictStatus::Pass,
        "fail" => VerdictStatus::Fail,
        "error" => VerdictStatus::Error,
        _ => return Verdict::new(VerdictStatus::Error, "shim protocol"),
    };
    Verdict::new(status, report.detail)
}

/// Counting semaphore bounding concurrent child processes.
#[derive(Debug)]
pub struct Semaphore {
    available: Mutex<usize>,
    cond: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore { available: Mutex::new(permits.max(1)), cond: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.cond.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cond.notify_one();
    }
}

fn read_capped(mut src: impl Read, cap: usize) -> Vec<u8> {
    let mut kept = Vec::new();
    let mut buf = [0u8; 8192];
    loop {
        match src.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                // keep draining past the cap so the child never blocks on a full pipe
                let room = cap.saturating_sub(kept.len());
                kept.extend_from_slice(&buf[..n.min(room)]);
            }
        }
    }
    kept
}

#[derive(Debug)]
pub struct SubprocessSandbox {
    interpreter: PathBuf,
    shim: PathBuf,
    permits: Semaphore,
}

impl SubprocessSandbox {
    pub fn new(interpreter: impl Into<PathBuf>, shim: impl Into<PathBuf>, max_children: usize) -> Result<Self, SandboxError> {
        let shim = shim.into();
        if !shim.is_file() {
            return Err(SandboxError::Environment(format!("shim not found at {}", shim.display())));
        }
        Ok(SubprocessSandbox { interpreter: interpreter.into(), shim, permits: Semaphore::new(max_children) })
    }

    fn execute(&self, workdir: &Path, program: &Path, timeout: Duration) -> Result<Verdict, SandboxError> {
        let started = Instant::now();
        let mut child = Command::new(&self.interpreter)
            .arg(&self.shim)
            .arg(program)
            .current_dir(workdir)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0)
            .spawn()
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => {
                    SandboxError::Environment(format!("interpreter {} not found", self.interpreter.display()))
                }
                _ => SandboxError::Io(e),
            })?;
        let stdout = child.stdout.take().expect("piped stdout");
        let stderr = child.stderr.take().expect("piped stderr");
        let out_reader = thread::spawn(move || read_capped(stdout, OUTPUT_CAP));
        let err_reader = thread::spawn(move || read_capped(stderr, 64 * 1024));

        let pgid = child.id() as libc::pid_t;
        let mut timed_out = false;
        loop {
            if child.try_wait()?.is_some() {
                break;
            }
            if started.elapsed() >= timeout {
                timed_out = true;
                // SAFETY: signalling our own child's process group.
                unsafe {
                    libc::kill(-pgid, libc::SIGKILL);
                }
                let _ = child.kill();
                let _ = child.wait();
                break;
            }
            thread::sleep(Duration::from_millis(5));
        }
        if !timed_out {
            // reap anything the subject left running in the group
            unsafe {
                libc::kill(-pgid, libc::SIGKILL);
            }
        }
        let out = out_reader.join().unwrap_or_default();
        let err = err_reader.join().unwrap_or_default();
        let duration_ms = started.elapsed().as_millis() as u64;

        let mut verdict = if timed_out {
            Verdict::new(VerdictStatus::Timeout, format!("killed after {}s", timeout.as_secs_f64()))
        } else {
            let mut v = parse_shim_output(&String::from_utf8_lossy(&out));
            if v.detail == "shim produced no verdict" {
                let tail = String::from_utf8_lossy(&err);
                let tail: String = tail.lines().rev().take(3).collect::<Vec<_>>().into_iter().rev().collect::<Vec<_>>().join("\n");
                if !tail.is_empty() {
                    v.detail = format!("shim produced no verdict: {tail}");
                }
            }
            v
        };
        verdict.duration_ms = duration_ms;
        Ok(verdict)
    }
}

impl Executor for SubprocessSandbox {
    fn run_tests(
        &self,
        prelude: &str,
        candidate_code: &str,
        test_code: &str,
        timeout: Duration,
    ) -> Result<Verdict, SandboxError> {
        let _permit = self.permits.acquire();
        let workdir = tempfile::Builder::new().prefix("smrepair-").tempdir()?;
        let program = workdir.path().join("program.py");
        fs::write(&program, assemble_program(prelude, candidate_code, test_code))?;
        log::debug!("sandbox run in {}", workdir.path().display());
        self.execute(workdir.path(), &program, timeout)
    }
}

/// How a scripted verdict recognises a candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptRule {
    /// Candidate equals this text, ignoring surrounding whitespace.
    Exact(String),
    Contains(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedVerdict {
    pub rule: ScriptRule,
    pub status: VerdictStatus,
}

/// Executor returning scripted verdicts without running anything. Exact
/// rules are consulted first, then `contains` rules in order, then the default.
#[derive(Debug, Clone)]
pub struct ScriptedExecutor {
    exact: HashMap<String, VerdictStatus>,
    contains: Vec<(String, VerdictStatus)>,
    default: VerdictStatus,
}

impl ScriptedExecutor {
    pub fn new(default: VerdictStatus) -> Self {
        ScriptedExecutor { exact: HashMap::new(), contains: Vec::new(), default }
    }

    pub fn with_rules(default: VerdictStatus, rules: impl IntoIterator<Item = ScriptedVerdict>) -> Self {
        let mut exec = ScriptedExecutor::new(default);
        for r in rules {
            exec.add(r);
        }
        exec
    }

    pub fn add(&mut self, rule: ScriptedVerdict) {
        match rule.rule {
            ScriptRule::Exact(code) => {
                self.exact.entry(code.trim().to_string()).or_insert(rule.status);
            }
            ScriptRule::Contains(needle) => self.contains.push((needle, rule.status)),
        }
    }

    /// Reads line-delimited [`ScriptedVerdict`]s.
    pub fn load(path: &Path, default: VerdictStatus) -> Result<Self, SandboxError> {
        let text = fs::read_to_string(path)?;
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rule: ScriptedVerdict = serde_json::from_str(line)
                .map_err(|e| SandboxError::Environment(format!("{} line {}: {e}", path.display(), i + 1)))?;
            rules.push(rule);
        }
        Ok(ScriptedExecutor::with_rules(default, rules))
    }

    pub fn status_for(&self, candidate_code: &str) -> VerdictStatus {
        if let Some(s) = self.exact.get(candidate_code.trim()) {
            return *s;
        }
        self.contains
            .iter()
            .find(|(needle, _)| candidate_code.contains(needle.as_str()))
            .map(|(_, s)| *s)
            .unwrap_or(self.default)
    }
}

impl Executor for ScriptedExecutor {
    fn run_tests(&self, _prelude: &str, candidate_code: &str, _test_code: &str, _timeout: Duration) -> Result<Verdict, SandboxError> {
        Ok(Verdict::new(self.status_for(candidate_code), "scripted"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn last_line_carries_verdict() {
        let out = "noise\n{\"status\": \"fail\"}\n{\"status\":\"pass\",\"detail\":\"\",\"tests_run\":2}\n\n";
        assert_eq!(parse_shim_output(out).status, VerdictStatus::Pass);
        let v = parse_shim_output("{\"status\":\"fail\",\"detail\":\"assert f(1) == 2\",\"tests_run\":0}");
        assert_eq!(v.status, VerdictStatus::Fail);
        assert_eq!(v.detail, "assert f(1) == 2");
    }

    #[test]
    fn malformed_line_is_protocol_error() {
        let v = parse_shim_output("{\"status\": \"pass\"\n");
        assert_eq!((v.status, v.detail.as_str()), (VerdictStatus::Error, "shim protocol"));
        let v = parse_shim_output("{\"status\": \"maybe\"}");
        assert_eq!(v.detail, "shim protocol");
        assert_eq!(parse_shim_output("").status, VerdictStatus::Error);
    }

    #[test]
    fn program_order_is_prelude_candidate_tests() {
        let p = assemble_program("import math", "def f():\n    return 1\n", "assert f() == 1");
        assert_eq!(p, "import math\n\ndef f():\n    return 1\n\nassert f() == 1\n\n");
        assert!(assemble_program("", "x = 1", "").starts_with("x = 1"));
    }

    #[test]
    fn scripted_rules() {
        let exec = ScriptedExecutor::with_rules(
            VerdictStatus::Fail,
            vec![
                ScriptedVerdict { rule: ScriptRule::Exact("def f():\n    return 1".into()), status: VerdictStatus::Pass },
                ScriptedVerdict { rule: ScriptRule::Contains("while True".into()), status: VerdictStatus::Timeout },
            ],
        );
        assert_eq!(exec.status_for("\ndef f():\n    return 1\n"), VerdictStatus::Pass);
        assert_eq!(exec.status_for("def f():\n    while True: pass"), VerdictStatus::Timeout);
        assert_eq!(exec.status_for("def f():\n    return 2"), VerdictStatus::Fail);
    }

    #[test]
    fn missing_shim_is_environment_error() {
        let err = SubprocessSandbox::new("python3", "/nonexistent/shim.py", 1).unwrap_err();
        assert!(matches!(err, SandboxError::Environment(_)));
    }

    #[test]
    fn missing_interpreter_is_environment_error() {
        let dir = tempfile::tempdir().unwrap();
        let shim = dir.path().join("shim.py");
        fs::write(&shim, "").unwrap();
        let sb = SubprocessSandbox::new("/nonexistent/python", &shim, 1).unwrap();
        let err = sb.run_tests("", "x = 1", "", Duration::from_secs(1)).unwrap_err();
        assert!(matches!(err, SandboxError::Environment(_)), "{err}");
    }

    #[test]
    fn verdict_status_wire_names() {
        assert_eq!(serde_json::to_string(&VerdictStatus::ExtractionFailure).unwrap(), "\"extraction_failure\"");
        assert_eq!(VerdictStatus::Timeout.as_str(), "timeout");
    }
}
