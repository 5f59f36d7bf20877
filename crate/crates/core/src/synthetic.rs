//! Benchmark-shaped synthetic datasets and mock scenarios.
//!
//! The generators emit records in the upstream HumanEvalPack and MBPP
//! schemas, with small but real Python functions and tests, so the loaders,
//! the sandbox and the protocols can be exercised without network access.
//! The scenario builders produce mock fixtures that drive a run to a chosen
//! outcome per (task, method).

use std::io;
use std::path::Path;

use serde_json::{json, Value};

use crate::dataset::RepairTask;
use crate::extract::extract_code;
use crate::mock::Fixture;
use crate::prompts::{Bindings, PromptRegistry};
use crate::record::RepairMethod;
use crate::sandbox::{ScriptRule, ScriptedExecutor, ScriptedVerdict, VerdictStatus};

/// Bug categories and how many HumanEvalPack tasks carry each.
pub const BUG_TYPES: [(&str, usize); 6] = [
    ("value misuse", 44),
    ("missing logic", 33),
    ("excess logic", 31),
    ("operator misuse", 25),
    ("variable misuse", 23),
    ("function misuse", 8),
];

const NAMES: [&str; 4] = ["sum_positive", "positive_total", "tally_positive", "accumulate"];

fn bug_type_of(index: usize) -> &'static str {
    let mut i = index % 164;
    for (name, n) in BUG_TYPES {
        if i < n {
            return name;
        }
        i -= n;
    }
    unreachable!()
}

fn hep_body(k: usize, bug: Option<&str>) -> String {
    let init = if bug == Some("value misuse") { k + 1 } else { k };
    let accumulate = match bug {
        Some("operator misuse") => "total -= x",
        _ => "total += x",
    };
    let guard = match bug {
        Some("variable misuse") => "if total > 0:",
        _ => "if x > 0:",
    };
    let mut body = format!("    total = {init}\n    for x in xs:\n");
    if bug == Some("missing logic") {
        body.push_str(&format!("        {accumulate}\n"));
    } else {
        body.push_str(&format!("        {guard}\n            {accumulate}\n"));
    }
    if bug == Some("excess logic") {
        body.push_str("    if total > 100:\n        total = 100\n");
    }
    let ret = if bug == Some("function misuse") { "min" } else { "max" };
    body.push_str(&format!("    return {ret}(total, {k})\n"));
    body
}

/// One HumanEvalPack-schema record (`Python/{index}`).
pub fn humanevalpack_record(index: usize) -> Value {
    let k = index % 7 + 1;
    let name = format!("{}_{index}", NAMES[index % NAMES.len()]);
    let typed = index.is_multiple_of(10);
    let (import, signature) = if typed {
        ("from typing import List\n", format!("def {name}(xs: List[int]) -> int:"))
    } else {
        ("", format!("def {name}(xs):"))
    };
    let prelude = if typed { "from typing import List\n\n\n" } else { "" };
    let docstring = format!(
        "    \"\"\"Sum the positive numbers in xs, starting from {k}.\n    >>> {name}([1, -2, 3])\n    {}\n    \"\"\"\n",
        k + 4
    );
    let declaration = format!("{prelude}{signature}\n{docstring}");
    let test = format!(
        "\n\ndef check(candidate):\n    assert candidate([1, -2, 3]) == {}\n    assert candidate([50, 60]) == {}\n    assert candidate([]) == {k}\n\ncheck({name})\n",
        k + 4,
        k + 110
    );
    let bug = bug_type_of(index);
    json!({
        "task_id": format!("Python/{index}"),
        "prompt": format!("{declaration}"),
        "declaration": declaration,
        "canonical_solution": hep_body(k, None),
        "buggy_solution": hep_body(k, Some(bug)),
        "bug_type": bug,
        "failure_symptoms": "incorrect output",
        "entry_point": name,
        "import": import,
        "test_setup": "",
        "test": test,
        "example_test": "",
        "signature": signature.trim_start_matches("def ").trim_end_matches(':'),
        "docstring": "",
        "instruction": "",
    })
}

/// The 164 records of a HumanEvalPack-shaped Python file.
pub fn humanevalpack_records() -> Vec<Value> {
    (0..164).map(humanevalpack_record).collect()
}

/// One MBPP-schema record. Returns `(record, buggy variant of its code)`.
pub fn mbpp_record(task_id: u64) -> (Value, String) {
    let k = (task_id % 5 + 2) as i64;
    let n = task_id;
    let (text, code, buggy, tests): (String, String, String, Vec<String>) = match n % 4 {
        0 => (
            format!("Write a function to add {k} to every element of a list."),
            format!("def add_k_{n}(xs):\n    return [x + {k} for x in xs]"),
            format!("def add_k_{n}(xs):\n    return [x - {k} for x in xs]"),
            vec![
                format!("assert add_k_{n}([1, 2]) == [{}, {}]", 1 + k, 2 + k),
                format!("assert add_k_{n}([]) == []"),
                format!("assert add_k_{n}([0]) == [{k}]"),
            ],
        ),
        1 => (
            format!("Write a python function to find the largest element of a list plus {k}."),
            format!("def max_plus_{n}(xs):\n    return max(xs) + {k}"),
            format!("def max_plus_{n}(xs):\n    return min(xs) + {k}"),
            vec![
                format!("assert max_plus_{n}([1, 5, 3]) == {}", 5 + k),
                format!("assert max_plus_{n}([-1]) == {}", k - 1),
                format!("assert max_plus_{n}([2, 2]) == {}", 2 + k),
            ],
        ),
        2 => (
            format!("Write a function to check whether a number is a multiple of {k}."),
            format!("def is_multiple_{n}(x):\n    return x % {k} == 0"),
            format!("def is_multiple_{n}(x):\n    return x % {k} == 1"),
            vec![
                format!("assert is_multiple_{n}({}) == True", 3 * k),
                format!("assert is_multiple_{n}({}) == False", 3 * k + 1),
                format!("assert is_multiple_{n}(0) == True"),
            ],
        ),
        _ => (
            format!("Write a function to repeat a string {k} times."),
            format!("def repeat_{n}(s):\n    return s * {k}"),
            format!("def repeat_{n}(s):\n    return s * ({k} + 1)"),
            vec![
                format!("assert repeat_{n}('ab') == '{}'", "ab".repeat(k as usize)),
                format!("assert repeat_{n}('') == ''"),
                format!("assert repeat_{n}('x') == '{}'", "x".repeat(k as usize)),
            ],
        ),
    };
    let record = json!({
        "task_id": task_id,
        "text": text,
        "code": code,
        "test_list": tests,
        "test_setup_code": "",
        "challenge_test_list": [],
    });
    (record, buggy)
}

/// MBPP records for the test split (ids 11..=510), or for the full
/// 974-record file when `full` is set.
pub fn mbpp_records(full: bool) -> Vec<Value> {
    let ids = if full { 1..=974 } else { 11..=510 };
    ids.map(|id| mbpp_record(id).0).collect()
}

/// Buggy variant of an MBPP task's reference code, by task id (`mbpp/N`).
pub fn mbpp_buggy(task: &RepairTask) -> String {
    let n: u64 = task.id.trim_start_matches("mbpp/").parse().expect("mbpp task id");
    mbpp_record(n).1
}

pub fn write_jsonl(path: &Path, records: &[Value]) -> io::Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    std::fs::write(path, out)
}

/// Executor that passes exactly the tasks' reference solutions.
pub fn canonical_executor(tasks: &[RepairTask]) -> ScriptedExecutor {
    ScriptedExecutor::with_rules(
        VerdictStatus::Fail,
        tasks.iter().map(|t| ScriptedVerdict {
            rule: ScriptRule::Exact(t.canonical_solution.clone()),
            status: VerdictStatus::Pass,
        }),
    )
}

/// A response that carries `code` in a fenced block.
pub fn fenced(code: &str) -> String {
    format!("Here is the function:\n\n```python\n{}\n```\n", code.trim_end())
}

fn render(registry: &PromptRegistry, template: &str, bindings: &[(&str, &str)]) -> String {
    let bindings: Bindings = bindings.iter().copied().collect();
    registry
        .get_template(template)
        .and_then(|t| t.render(&bindings))
        .expect("synthetic prompts render")
}

/// Canned summary for one task and method.
pub fn summary_text(task: &RepairTask, method: RepairMethod) -> String {
    format!(
        "The function `{}` from {} walks its input and returns a computed value ({method} summary).",
        task.entry_point, task.id
    )
}

/// Fixtures answering every repair prompt for `subject` code: a fixed
/// method responds with the reference solution, any other with `subject`.
pub fn repair_fixtures(
    registry: &PromptRegistry,
    task: &RepairTask,
    subject: &str,
    methods: &[RepairMethod],
    fixes: &dyn Fn(&RepairTask, RepairMethod) -> bool,
) -> Vec<Fixture> {
    let mut out = Vec::new();
    for &method in methods {
        let response = if fixes(task, method) { fenced(&task.canonical_solution) } else { fenced(subject) };
        match method.style() {
            None => out.push(Fixture::exact(&render(registry, "direct_repair", &[("code", subject)]), response)),
            Some(style) => {
                let summary = summary_text(task, method);
                out.push(Fixture::exact(&render(registry, style.template_name(), &[("code", subject)]), summary.clone()));
                let generate = render(registry, "generate", &[("function", &task.entry_point), ("summary", &summary)]);
                out.push(Fixture::exact(&generate, response));
            }
        }
    }
    out
}

/// Fixtures for a bug-repair run over `tasks`.
pub fn bug_repair_fixtures(
    registry: &PromptRegistry,
    tasks: &[RepairTask],
    methods: &[RepairMethod],
    fixes: &dyn Fn(&RepairTask, RepairMethod) -> bool,
) -> Vec<Fixture> {
    tasks
        .iter()
        .flat_map(|t| repair_fixtures(registry, t, &t.subject_code, methods, fixes))
        .collect()
}

/// How the mock answers a task's initial-solve prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialBehaviour {
    Solve,
    /// Fenced code that fails the tests.
    Wrong,
    /// Prose without code.
    Prose,
}

/// Fixtures for a self-repair run over MBPP `tasks`.
pub fn self_repair_fixtures(
    registry: &PromptRegistry,
    tasks: &[RepairTask],
    methods: &[RepairMethod],
    initial: &dyn Fn(&RepairTask) -> InitialBehaviour,
    fixes: &dyn Fn(&RepairTask, RepairMethod) -> bool,
) -> Vec<Fixture> {
    let mut out = Vec::new();
    for task in tasks {
        let example = task.first_assertion().expect("mbpp task has an assertion");
        let prompt = render(
            registry,
            "initial_solve",
            &[("function", &task.entry_point), ("task", &task.description), ("example_test", example)],
        );
        let response = match initial(task) {
            InitialBehaviour::Solve => fenced(&task.canonical_solution),
            InitialBehaviour::Wrong => fenced(&mbpp_buggy(task)),
            InitialBehaviour::Prose => "I am not able to write this function.".to_string(),
        };
        let extracted = extract_code(&response, &task.entry_point);
        out.push(Fixture::exact(&prompt, response));
        if initial(task) == InitialBehaviour::Wrong {
            out.extend(repair_fixtures(registry, task, &extracted.code, methods, fixes));
        }
    }
    out
}
