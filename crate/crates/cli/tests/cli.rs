use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use summary_repair::dataset::load_humanevalpack;
use summary_repair::llm::load_roster;
use summary_repair::mock::write_fixtures;
use summary_repair::sandbox::{ScriptRule, ScriptedVerdict};
use summary_repair::synthetic::{self, InitialBehaviour};
use summary_repair::{PromptRegistry, RepairMethod, RepairTask, VerdictStatus};

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn smrepair(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_smrepair"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("RUST_LOG")
            .output()
            .expect("spawn smrepair")
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_id(o: &Output) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("run ").map(str::to_string))
        .unwrap_or_else(|| panic!("no run id in {}", stdout(o)))
}

fn write_stub_verdicts(path: &Path, tasks: &[RepairTask]) {
    let lines: String = tasks
        .iter()
        .map(|t| {
            let v = ScriptedVerdict { rule: ScriptRule::Exact(t.canonical_solution.clone()), status: VerdictStatus::Pass };
            format!("{}\n", serde_json::to_string(&v).unwrap())
        })
        .collect();
    fs::write(path, lines).unwrap();
}

/// Synthetic HumanEvalPack data, fixtures fixing every third task, and stub verdicts.
fn bug_repair_workspace() -> (Workspace, Vec<RepairTask>) {
    let ws = Workspace { dir: tempfile::tempdir().unwrap() };
    fs::create_dir_all(ws.path("data")).unwrap();
    let data = ws.path("data/humanevalpack.jsonl");
    synthetic::write_jsonl(&data, &synthetic::humanevalpack_records()).unwrap();
    let tasks = load_humanevalpack(&data).unwrap();
    let fixtures = synthetic::bug_repair_fixtures(&PromptRegistry::default(), &tasks, &RepairMethod::ALL, &|t, _| {
        t.id.trim_start_matches("HumanEval/").parse::<usize>().unwrap() % 3 == 0
    });
    write_fixtures(&ws.path("fixtures.jsonl"), &fixtures).unwrap();
    write_stub_verdicts(&ws.path("verdicts.jsonl"), &tasks);
    (ws, tasks)
}

const MOCK_RUN: [&str; 9] = [
    "run",
    "--protocol",
    "bug-repair",
    "--mock",
    "fixtures.jsonl",
    "--stub-verdicts",
    "verdicts.jsonl",
    "--models",
    "mock-1",
];

#[test]
fn mock_bug_repair_run_report_and_resume() {
    let (ws, _) = bug_repair_workspace();
    let out = ws.smrepair(&[&MOCK_RUN[..], &["--methods", "all"]].concat());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("984 records written"), "{}", stdout(&out));
    let id = run_id(&out);

    let again = ws.smrepair(&[&MOCK_RUN[..], &["--resume", &id]].concat());
    assert!(again.status.success(), "{}", stderr(&again));
    assert!(stdout(&again).contains("0 pending keys"), "{}", stdout(&again));

    let report = ws.smrepair(&["report", &id]);
    assert!(report.status.success(), "{}", stderr(&report));
    let text = stdout(&report);
    let method_rows: Vec<&str> =
        text.lines().filter(|l| l.starts_with("| Direct") || l.starts_with("| Summary")).collect();
    assert_eq!(method_rows.len(), 6, "{text}");
    // 55 of 164 tasks are multiples of three
    assert!(method_rows.iter().all(|r| r.ends_with("| 33.54% |")), "{text}");

    let csv = ws.smrepair(&["report", &id, "--format", "csv", "--output", "report.csv"]);
    assert!(csv.status.success());
    let written = fs::read_to_string(ws.path("report.csv")).unwrap();
    assert!(written.starts_with("model,method,attempted,fixed,fix_at_1,initial_pass,adjusted_pass_at_1\n"));
    assert_eq!(written.lines().count(), 7);

    let cases = ws.smrepair(&["cases", &id, "--output", "cases.jsonl"]);
    assert!(cases.status.success(), "{}", stderr(&cases));
    // every style fixes exactly what direct repair fixes, so there are no cases
    assert!(stdout(&cases).contains("(0 cases)"), "{}", stdout(&cases));

    let manifest = fs::read_to_string(ws.path(&format!("runs/{id}/manifest.json"))).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(manifest["task_ids"].as_array().unwrap().len(), 164);
    assert_eq!(manifest["options"]["concurrency"], 4);
}

#[test]
fn single_method_run_writes_one_record_per_task() {
    let (ws, _) = bug_repair_workspace();
    let out = ws.smrepair(&[&MOCK_RUN[..], &["--methods", "summary:error"]].concat());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("164 records written"), "{}", stdout(&out));
}

#[test]
fn partial_runs_need_the_partial_flag() {
    let (ws, _) = bug_repair_workspace();
    let out = ws.smrepair(&[&MOCK_RUN[..], &["--limit", "10"]].concat());
    assert!(out.status.success(), "{}", stderr(&out));
    let id = run_id(&out);
    let strict = ws.smrepair(&["report", &id]);
    assert_eq!(strict.status.code(), Some(1));
    assert!(stderr(&strict).contains("incomplete run"), "{}", stderr(&strict));
    let partial = ws.smrepair(&["report", &id, "--partial"]);
    assert!(partial.status.success(), "{}", stderr(&partial));
}

#[test]
fn excluded_tasks_are_left_out() {
    let (ws, _) = bug_repair_workspace();
    fs::write(ws.path("exclude.txt"), "# known-bad tasks\nHumanEval/0\nHumanEval/1\n").unwrap();
    let out = ws.smrepair(&[&MOCK_RUN[..], &["--methods", "direct", "--exclude", "exclude.txt"]].concat());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("162 records written"), "{}", stdout(&out));
}

#[test]
fn overriding_fixed_templates_needs_opt_in() {
    let (ws, _) = bug_repair_workspace();
    fs::write(ws.path("overrides.json"), r#"{"direct_repair": "Fix this: {code}"}"#).unwrap();
    let out = ws.smrepair(&[&MOCK_RUN[..], &["--template-overrides", "overrides.json"]].concat());
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("--allow-template-override"), "{}", stderr(&out));
}

#[test]
fn missing_credentials_fail_before_any_work() {
    let (ws, _) = bug_repair_workspace();
    let roster = r#"[{"name": "Live", "model_id": "live-1", "endpoint_url": "http://127.0.0.1:9/v1",
                     "api_key_env": "SMREPAIR_DEFINITELY_UNSET"}]"#;
    fs::write(ws.path("roster.json"), roster).unwrap();
    let out = ws.smrepair(&[
        "run", "--protocol", "bug-repair", "--roster", "roster.json", "--stub-verdicts", "verdicts.jsonl",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("SMREPAIR_DEFINITELY_UNSET"));
    assert!(!ws.path("runs").exists() || fs::read_dir(ws.path("runs")).unwrap().count() == 0);
}

#[test]
fn run_needs_an_executor() {
    let (ws, _) = bug_repair_workspace();
    let out = ws.smrepair(&["run", "--protocol", "bug-repair", "--mock", "fixtures.jsonl"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn self_repair_run_rejects_case_analysis() {
    let ws = Workspace { dir: tempfile::tempdir().unwrap() };
    fs::create_dir_all(ws.path("data")).unwrap();
    let data = ws.path("data/mbpp.jsonl");
    synthetic::write_jsonl(&data, &synthetic::mbpp_records(false)).unwrap();
    let tasks = summary_repair::dataset::load_mbpp_test(&data).unwrap();
    let fixtures = synthetic::self_repair_fixtures(
        &PromptRegistry::default(),
        &tasks,
        &RepairMethod::ALL,
        &|t| if t.id.ends_with('0') { InitialBehaviour::Wrong } else { InitialBehaviour::Solve },
        &|_, m| m == RepairMethod::DirectRepair,
    );
    write_fixtures(&ws.path("fixtures.jsonl"), &fixtures).unwrap();
    write_stub_verdicts(&ws.path("verdicts.jsonl"), &tasks);
    let out = ws.smrepair(&[
        "run", "--protocol", "self-repair", "--mock", "fixtures.jsonl", "--stub-verdicts", "verdicts.jsonl",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let id = run_id(&out);

    let report = ws.smrepair(&["report", &id]);
    assert!(report.status.success(), "{}", stderr(&report));
    let text = stdout(&report);
    assert!(text.contains("| Solve rate (no repair) | -- | 90.00% |"), "{text}");
    assert!(text.contains("| Direct repair (baseline) | 100.00% | 100.00% |"), "{text}");

    let cases = ws.smrepair(&["cases", &id, "--data", "data/mbpp.jsonl"]);
    assert_eq!(cases.status.code(), Some(1));
    assert!(stderr(&cases).contains("only defined for bug-repair"), "{}", stderr(&cases));
}

#[test]
fn validate_with_stub_verdicts() {
    let (ws, _) = bug_repair_workspace();
    let out = ws.smrepair(&[
        "validate", "--dataset", "hep", "--stub-verdicts", "verdicts.jsonl", "--write-exclusions", "excl.txt",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("164/164 canonical solutions pass"), "{}", stdout(&out));
    assert!(stdout(&out).contains("0 buggy solutions pass"), "{}", stdout(&out));
    assert!(ws.path("excl.txt").exists());
}

#[test]
fn fetch_uses_a_warm_cache_offline() {
    let (ws, _) = bug_repair_workspace();
    let out = ws.smrepair(&["fetch", "--dataset", "hep", "--url", "http://127.0.0.1:9/unreachable"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("164 records (cache hit)"), "{}", stdout(&out));
}

#[test]
fn shipped_roster_lists_eight_models() {
    let roster = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/models.json");
    let models = load_roster(&roster).unwrap();
    assert_eq!(models.len(), 8);
    assert!(models.iter().all(|m| m.temperature == 0.2 && m.top_p == 1.0 && m.max_output_tokens == 2048));
    assert!(models.iter().all(|m| m.api_key_env.is_some()));
}

#[test]
fn help_lists_the_subcommands() {
    let ws = Workspace { dir: tempfile::tempdir().unwrap() };
    let out = ws.smrepair(&["--help"]);
    let text = stdout(&out);
    for cmd in ["fetch", "validate", "run", "report", "cases"] {
        assert!(text.contains(cmd), "{text}");
    }
    let bad = ws.smrepair(&["run", "--protocol", "nonsense"]);
    assert_eq!(bad.status.code(), Some(2));
}
