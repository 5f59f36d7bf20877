use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use summary_repair::sandbox::SandboxError;
use summary_repair::{Executor, SubprocessSandbox, VerdictStatus};

const T: Duration = Duration::from_secs(10);

fn python() -> Option<PathBuf> {
    let ok = Command::new("python3").arg("-c").arg("import ast; ast.unparse").output().ok()?.status.success();
    ok.then(|| PathBuf::from("python3"))
}

fn shim() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/shim_stub.py")
}

fn sandbox() -> Option<SubprocessSandbox> {
    match python() {
        Some(py) => Some(SubprocessSandbox::new(py, shim(), 4).unwrap()),
        None => {
            eprintln!("python3 not available; skipping");
            None
        }
    }
}

const ADD: &str = "def add(a, b):\n    return a + b\n";
const TESTS: &str = "assert add(1, 2) == 3\nassert add(0, 0) == 0\n";

#[test]
fn verdicts_follow_the_shim() {
    let Some(sb) = sandbox() else { return };
    assert_eq!(sb.run_tests("", ADD, TESTS, T).unwrap().status, VerdictStatus::Pass);

    let v = sb.run_tests("", "def add(a, b):\n    return a - b\n", TESTS, T).unwrap();
    assert_eq!(v.status, VerdictStatus::Fail);
    assert!(v.detail.contains("add(1, 2) == 3"), "{}", v.detail);

    let v = sb.run_tests("", "def add(a, b):\n    return missing\n", TESTS, T).unwrap();
    assert_eq!(v.status, VerdictStatus::Error);
    assert!(v.detail.contains("NameError"), "{}", v.detail);

    let v = sb.run_tests("", "def add(a, b)\n    return a + b\n", TESTS, T).unwrap();
    assert_eq!(v.status, VerdictStatus::Error);
}

#[test]
fn prelude_comes_first() {
    let Some(sb) = sandbox() else { return };
    let prelude = "from typing import List\n\ndef helper(x):\n    return x * 2\n";
    let candidate = "def twice(xs: List[int]) -> List[int]:\n    return [helper(x) for x in xs]\n";
    let v = sb.run_tests(prelude, candidate, "assert twice([1, 2]) == [2, 4]\n", T).unwrap();
    assert_eq!(v.status, VerdictStatus::Pass, "{}", v.detail);
}

#[test]
fn off_by_one_mutant_fails() {
    let Some(sb) = sandbox() else { return };
    let canonical = "def count_upto(n):\n    c = 0\n    i = 0\n    while i <= n:\n        c += 1\n        i += 1\n    return c\n";
    let tests = "assert count_upto(3) == 4\n";
    assert_eq!(sb.run_tests("", canonical, tests, T).unwrap().status, VerdictStatus::Pass);
    let mutant = canonical.replace("<=", "<");
    assert_eq!(sb.run_tests("", &mutant, tests, T).unwrap().status, VerdictStatus::Fail);
}

#[test]
fn runaway_candidate_times_out() {
    let Some(sb) = sandbox() else { return };
    let started = Instant::now();
    let v = sb.run_tests("", "def spin():\n    while True:\n        pass\n", "spin()\n", Duration::from_secs(1)).unwrap();
    assert_eq!(v.status, VerdictStatus::Timeout);
    assert!(v.duration_ms >= 1000);
    assert!(started.elapsed() < Duration::from_secs(3), "{:?}", started.elapsed());
}

#[test]
fn subject_output_never_corrupts_the_verdict() {
    let Some(sb) = sandbox() else { return };
    let noisy = [
        "print('{\"status\": \"fail\", \"detail\": \"forged\"}')",
        "import sys; sys.stdout.write('no newline at end')",
        "import os; os.write(1, b'{\"status\": \"error\"}')",
        "print('\\n' * 1000)",
        "print('x' * 100000)",
    ];
    for noise in noisy {
        let candidate = format!("{ADD}{noise}\n");
        let v = sb.run_tests("", &candidate, TESTS, T).unwrap();
        assert_eq!(v.status, VerdictStatus::Pass, "noise {noise:?}: {}", v.detail);
    }
}

#[test]
fn deterministic_and_isolated() {
    let Some(sb) = sandbox() else { return };
    // each run must start in an empty private directory
    let candidate = "import os\nassert not os.path.exists('marker')\nopen('marker', 'w').write('x')\n";
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..10).map(|_| s.spawn(|| sb.run_tests("", candidate, "assert True\n", T).unwrap())).collect();
        for h in handles {
            assert_eq!(h.join().unwrap().status, VerdictStatus::Pass);
        }
    });
}

#[test]
fn malformed_shim_output_is_an_error_verdict() {
    let Some(py) = python() else { return };
    let dir = tempfile::tempdir().unwrap();
    let fake = dir.path().join("fake_shim.py");
    std::fs::write(&fake, "print('this is not json')\n").unwrap();
    let sb = SubprocessSandbox::new(py, &fake, 1).unwrap();
    let v = sb.run_tests("", ADD, TESTS, T).unwrap();
    assert_eq!(v.status, VerdictStatus::Error);
    assert_eq!(v.detail, "shim protocol");

    std::fs::write(&fake, "import sys\nsys.exit(3)\n").unwrap();
    let v = sb.run_tests("", ADD, TESTS, T).unwrap();
    assert_eq!(v.status, VerdictStatus::Error);
}

#[test]
fn missing_binaries_are_environment_errors() {
    assert!(matches!(
        SubprocessSandbox::new("python3", "/nonexistent/shim.py", 1),
        Err(SandboxError::Environment(_))
    ));
    let sb = SubprocessSandbox::new("/nonexistent/python", shim(), 1).unwrap();
    assert!(matches!(sb.run_tests("", ADD, TESTS, T), Err(SandboxError::Environment(_))));
}

#[test]
fn synthetic_benchmarks_validate_under_a_real_interpreter() {
    use summary_repair::dataset::{load_humanevalpack, load_mbpp_test, validate_dataset, verify_bugs};
    use summary_repair::synthetic;
    let Some(sb) = sandbox() else { return };
    let dir = tempfile::tempdir().unwrap();
    let hep = dir.path().join("hep.jsonl");
    synthetic::write_jsonl(&hep, &synthetic::humanevalpack_records()).unwrap();
    let tasks = load_humanevalpack(&hep).unwrap();
    let report = validate_dataset(&tasks, &sb, T).unwrap();
    assert_eq!(report.passed(), 164, "{:?}", report.failed_ids());
    assert!(verify_bugs(&tasks, &sb, T).unwrap().is_empty());

    let mbpp = dir.path().join("mbpp.jsonl");
    synthetic::write_jsonl(&mbpp, &synthetic::mbpp_records(false)).unwrap();
    let tasks = load_mbpp_test(&mbpp).unwrap();
    let sample: Vec<_> = tasks.into_iter().step_by(25).collect();
    let report = validate_dataset(&sample, &sb, T).unwrap();
    assert_eq!(report.passed(), sample.len(), "{:?}", report.failed_ids());
    for t in &sample {
        let v = sb.run_tests("", &synthetic::mbpp_buggy(t), &t.test_code, T).unwrap();
        assert_eq!(v.status, VerdictStatus::Fail, "{}", t.id);
    }
}
