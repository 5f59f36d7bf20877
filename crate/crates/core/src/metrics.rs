//! fix@1, adjusted pass@1, table rendering and case analysis.
//!
//! Percentages are computed exactly from integer counts and rounded half-up:
//! two decimals for cells, one for cross-model averages.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::RepairTask;
use crate::pipeline::needs_repair;
use crate::record::{Phase, Protocol, RecordKey, RepairMethod, RunManifest, RunRecord};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("metric undefined: zero denominator")]
    Undefined,
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("incomplete run: {0}")]
    Incomplete(String),
    #[error("case analysis is only defined for bug-repair runs")]
    UnsupportedProtocol,
}

/// A percentage held as an integer number of `10^-decimals` units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Percentage {
    scaled: u64,
    decimals: u32,
}

impl Percentage {
    /// `100·num/den` rounded half-up to `decimals` places.
    pub fn from_ratio(num: u64, den: u64, decimals: u32) -> Result<Self, MetricsError> {
        if den == 0 {
            return Err(MetricsError::Undefined);
        }
        let scale = 10u128.pow(decimals);
        let num = num as u128 * 100 * scale;
        let den = den as u128;
        let scaled = (2 * num + den) / (2 * den);
        Ok(Percentage { scaled: scaled as u64, decimals })
    }

    pub fn value(self) -> f64 {
        self.scaled as f64 / 10f64.powi(self.decimals as i32)
    }

    pub fn scaled(self) -> u64 {
        self.scaled
    }

    pub fn decimals(self) -> u32 {
        self.decimals
    }
}

impl fmt::Display for Percentage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let scale = 10u64.pow(self.decimals);
        if self.decimals == 0 {
            write!(f, "{}", self.scaled)
        } else {
            write!(f, "{}.{:0width$}", self.scaled / scale, self.scaled % scale, width = self.decimals as usize)
        }
    }
}

pub fn fix_at_1(fixed: u64, attempted: u64) -> Result<Percentage, MetricsError> {
    if fixed > attempted {
        return Err(MetricsError::Invariant(format!("fixed {fixed} > attempted {attempted}")));
    }
    Percentage::from_ratio(fixed, attempted, 2)
}

pub fn adjusted_pass_at_1(initial_pass: u64, fixed: u64, total: u64) -> Result<Percentage, MetricsError> {
    if initial_pass + fixed > total {
        return Err(MetricsError::Invariant(format!("{initial_pass} + {fixed} solved of {total} tasks")));
    }
    Percentage::from_ratio(initial_pass + fixed, total, 2)
}

/// One (model, method) cell of a result table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodCell {
    pub model_id: String,
    pub method: RepairMethod,
    pub attempted: u64,
    pub fixed: u64,
    /// `None` when nothing was attempted (rendered as `--`).
    pub fix_at_1: Option<Percentage>,
    pub initial_pass: Option<u64>,
    pub total: Option<u64>,
    pub adjusted_pass_at_1: Option<Percentage>,
    /// Initial attempts with no code to repair (extraction failures, provider errors).
    pub unrepairable_initials: Option<u64>,
}

impl MethodCell {
    pub fn bug_repair(model_id: &str, method: RepairMethod, fixed: u64, attempted: u64) -> Result<Self, MetricsError> {
        Ok(MethodCell {
            model_id: model_id.to_string(),
            method,
            attempted,
            fixed,
            fix_at_1: optional(fix_at_1(fixed, attempted))?,
            initial_pass: None,
            total: None,
            adjusted_pass_at_1: None,
            unrepairable_initials: None,
        })
    }

    pub fn self_repair(
        model_id: &str,
        method: RepairMethod,
        fixed: u64,
        attempted: u64,
        initial_pass: u64,
        total: u64,
    ) -> Result<Self, MetricsError> {
        if initial_pass + attempted > total {
            return Err(MetricsError::Invariant(format!("{initial_pass} passes + {attempted} repairs > {total} tasks")));
        }
        Ok(MethodCell {
            model_id: model_id.to_string(),
            method,
            attempted,
            fixed,
            fix_at_1: optional(fix_at_1(fixed, attempted))?,
            initial_pass: Some(initial_pass),
            total: Some(total),
            adjusted_pass_at_1: Some(adjusted_pass_at_1(initial_pass, fixed, total)?),
            unrepairable_initials: Some(total - initial_pass - attempted),
        })
    }

    /// Initial solve rate (self-repair cells only).
    pub fn solve_rate(&self) -> Option<Percentage> {
        Percentage::from_ratio(self.initial_pass?, self.total?, 2).ok()
    }
}

fn optional(r: Result<Percentage, MetricsError>) -> Result<Option<Percentage>, MetricsError> {
    match r {
        Ok(p) => Ok(Some(p)),
        Err(MetricsError::Undefined) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Unweighted mean of the cells' (rounded) fix@1 values for `method`, one decimal.
pub fn method_average(cells: &[MethodCell], method: RepairMethod) -> Option<Percentage> {
    let values: Vec<Percentage> = cells.iter().filter(|c| c.method == method).filter_map(|c| c.fix_at_1).collect();
    mean_of(&values, 1)
}

/// Half-up mean of same-precision percentages at `decimals` places.
pub fn mean_of(values: &[Percentage], decimals: u32) -> Option<Percentage> {
    let first = values.first()?;
    let src = first.decimals;
    assert!(values.iter().all(|v| v.decimals == src), "mixed precision");
    assert!(decimals <= src);
    let sum: u64 = values.iter().map(|v| v.scaled).sum();
    // mean in source units = sum / n; convert to target units and round half up
    let den = values.len() as u128 * 10u128.pow(src - decimals);
    let scaled = (2 * sum as u128 + den) / (2 * den);
    Some(Percentage { scaled: scaled as u64, decimals })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Completeness {
    /// Every expected key must be present exactly once.
    #[default]
    Strict,
    /// Aggregate whatever is present.
    Partial,
}

fn describe_keys(label: &str, keys: &[RecordKey]) -> String {
    let shown: Vec<String> = keys.iter().take(10).map(ToString::to_string).collect();
    let more = if keys.len() > 10 { format!(" (+{} more)", keys.len() - 10) } else { String::new() };
    format!("{} {label}: {}{more}", keys.len(), shown.join(", "))
}

/// Keys the run must contain, given its initial-solve outcomes.
pub fn expected_keys(manifest: &RunManifest, records: &[RunRecord]) -> BTreeSet<RecordKey> {
    let mut expected = BTreeSet::new();
    let repair_keys = |expected: &mut BTreeSet<RecordKey>, task_id: &str, model_id: &str| {
        for &method in &manifest.methods {
            expected.insert(RecordKey {
                task_id: task_id.to_string(),
                model_id: model_id.to_string(),
                method: Some(method),
                phase: Phase::Repair,
            });
        }
    };
    match manifest.protocol {
        Protocol::BugRepair => {
            for model in &manifest.model_ids {
                for task in &manifest.task_ids {
                    repair_keys(&mut expected, task, model);
                }
            }
        }
        Protocol::SelfRepair => {
            let initial: HashMap<(&str, &str), &RunRecord> = records
                .iter()
                .filter(|r| r.phase == Phase::InitialSolve)
                .map(|r| ((r.task_id.as_str(), r.model_id.as_str()), r))
                .collect();
            for model in &manifest.model_ids {
                for task in &manifest.task_ids {
                    expected.insert(RecordKey {
                        task_id: task.clone(),
                        model_id: model.clone(),
                        method: None,
                        phase: Phase::InitialSolve,
                    });
                    if initial.get(&(task.as_str(), model.as_str())).is_some_and(|r| needs_repair(r)) {
                        repair_keys(&mut expected, task, model);
                    }
                }
            }
        }
    }
    expected
}

/// Checks that `records` holds every expected key exactly once and nothing else.
pub fn check_complete(manifest: &RunManifest, records: &[RunRecord]) -> Result<(), MetricsError> {
    let expected = expected_keys(manifest, records);
    let mut seen = BTreeSet::new();
    let mut duplicates = Vec::new();
    let mut unexpected = Vec::new();
    for r in records {
        let key = r.key();
        if !expected.contains(&key) {
            unexpected.push(key.clone());
        }
        if !seen.insert(key.clone()) {
            duplicates.push(key);
        }
    }
    let missing: Vec<RecordKey> = expected.difference(&seen).cloned().collect();
    let mut problems = Vec::new();
    if !missing.is_empty() {
        problems.push(describe_keys("missing keys", &missing));
    }
    if !duplicates.is_empty() {
        problems.push(describe_keys("duplicate keys", &duplicates));
    }
    if !unexpected.is_empty() {
        problems.push(describe_keys("unexpected keys", &unexpected));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(MetricsError::Incomplete(problems.join("; ")))
    }
}

/// One cell per (model, method), in manifest order.
pub fn aggregate(
    manifest: &RunManifest,
    records: &[RunRecord],
    completeness: Completeness,
) -> Result<Vec<MethodCell>, MetricsError> {
    if completeness == Completeness::Strict {
        check_complete(manifest, records)?;
    }
    let mut fixed: HashMap<(&str, RepairMethod), u64> = HashMap::new();
    let mut attempts: HashMap<(&str, RepairMethod), u64> = HashMap::new();
    let mut initial_pass: HashMap<&str, u64> = HashMap::new();
    let mut initial_total: HashMap<&str, u64> = HashMap::new();
    let mut repair_set: HashMap<&str, u64> = HashMap::new();
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.key()) {
            continue;
        }
        match (r.phase, r.method) {
            (Phase::Repair, Some(m)) => {
                *attempts.entry((r.model_id.as_str(), m)).or_default() += 1;
                if r.passed() {
                    *fixed.entry((r.model_id.as_str(), m)).or_default() += 1;
                }
            }
            (Phase::InitialSolve, _) => {
                *initial_total.entry(r.model_id.as_str()).or_default() += 1;
                if r.passed() {
                    *initial_pass.entry(r.model_id.as_str()).or_default() += 1;
                }
                if needs_repair(r) {
                    *repair_set.entry(r.model_id.as_str()).or_default() += 1;
                }
            }
            (Phase::Repair, None) => {}
        }
    }

    let mut cells = Vec::new();
    for model in &manifest.model_ids {
        let m = model.as_str();
        for &method in &manifest.methods {
            let f = fixed.get(&(m, method)).copied().unwrap_or(0);
            let cell = match manifest.protocol {
                Protocol::BugRepair => {
                    let attempted = match completeness {
                        Completeness::Strict => manifest.task_ids.len() as u64,
                        Completeness::Partial => attempts.get(&(m, method)).copied().unwrap_or(0),
                    };
                    MethodCell::bug_repair(m, method, f, attempted)?
                }
                Protocol::SelfRepair => {
                    let total = match completeness {
                        Completeness::Strict => manifest.task_ids.len() as u64,
                        Completeness::Partial => initial_total.get(m).copied().unwrap_or(0),
                    };
                    let attempted = match completeness {
                        Completeness::Strict => repair_set.get(m).copied().unwrap_or(0),
                        Completeness::Partial => attempts.get(&(m, method)).copied().unwrap_or(0),
                    };
                    MethodCell::self_repair(m, method, f, attempted, initial_pass.get(m).copied().unwrap_or(0), total)?
                }
            };
            cells.push(cell);
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseScope {
    PerModel,
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub task_id: String,
    pub bug_type: Option<String>,
    pub models: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseUnit {
    /// Model id, or `pooled`.
    pub label: String,
    pub cases: Vec<CaseEntry>,
    pub tally: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseReport {
    pub scope: CaseScope,
    pub units: Vec<CaseUnit>,
}

impl CaseReport {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for unit in &self.units {
            for case in &unit.cases {
                out.push_str(&serde_json::to_string(case).expect("case serialises"));
                out.push('\n');
            }
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        for unit in &self.units {
            out.push_str(&format!("### {} ({} cases)\n\n", unit.label, unit.cases.len()));
            for (bug, n) in &unit.tally {
                out.push_str(&format!("- {bug}: {n}\n"));
            }
            out.push('\n');
        }
        out
    }
}

const UNKNOWN_BUG: &str = "unknown";

/// Tasks that every summary style fixes but direct repair does not.
pub fn case_analysis(
    manifest: &RunManifest,
    records: &[RunRecord],
    tasks: &[RepairTask],
    scope: CaseScope,
) -> Result<CaseReport, MetricsError> {
    if manifest.protocol != Protocol::BugRepair {
        return Err(MetricsError::UnsupportedProtocol);
    }
    for method in RepairMethod::ALL {
        if !manifest.methods.contains(&method) {
            return Err(MetricsError::Incomplete(format!("case analysis needs method {method}")));
        }
    }
    let bug_types: HashMap<&str, &str> =
        tasks.iter().filter_map(|t| Some((t.id.as_str(), t.bug_type.as_deref()?))).collect();
    let fixed: BTreeSet<(&str, &str, RepairMethod)> = records
        .iter()
        .filter(|r| r.phase == Phase::Repair && r.passed())
        .filter_map(|r| Some((r.model_id.as_str(), r.task_id.as_str(), r.method?)))
        .collect();
    let is_case = |model: &str, task: &str| {
        !fixed.contains(&(model, task, RepairMethod::DirectRepair))
            && RepairMethod::ALL[1..].iter().all(|m| fixed.contains(&(model, task, *m)))
    };
    let entry = |task: &str, models: Vec<String>| CaseEntry {
        task_id: task.to_string(),
        bug_type: bug_types.get(task).map(|s| s.to_string()),
        models,
    };
    let tally_of = |cases: &[CaseEntry]| {
        let mut tally = BTreeMap::new();
        for c in cases {
            *tally.entry(c.bug_type.clone().unwrap_or_else(|| UNKNOWN_BUG.into())).or_insert(0) += 1;
        }
        tally
    };

    let units = match scope {
        CaseScope::PerModel => manifest
            .model_ids
            .iter()
            .map(|model| {
                let cases: Vec<CaseEntry> = manifest
                    .task_ids
                    .iter()
                    .filter(|t| is_case(model, t))
                    .map(|t| entry(t, vec![model.clone()]))
                    .collect();
                CaseUnit { label: model.clone(), tally: tally_of(&cases), cases }
            })
            .collect(),
        CaseScope::Pooled => {
            let cases: Vec<CaseEntry> = manifest
                .task_ids
                .iter()
                .filter_map(|t| {
                    let models: Vec<String> = manifest.model_ids.iter().filter(|m| is_case(m, t)).cloned().collect();
                    (!models.is_empty()).then(|| entry(t, models))
                })
                .collect();
            vec![CaseUnit { label: "pooled".into(), tally: tally_of(&cases), cases }]
        }
    };
    Ok(CaseReport { scope, units })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

fn cell_text(p: Option<Percentage>) -> String {
    p.map(|p| format!("{p}%")).unwrap_or_else(|| "--".into())
}

fn ordered<T: PartialEq + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for i in items {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// Renders cells as a markdown results table (one column per model, or a
/// fix@1/pass@1 pair per model for self-repair) or as one CSV row per cell.
pub fn render_report(cells: &[MethodCell], format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => render_markdown(cells),
        ReportFormat::Csv => render_csv(cells),
    }
}

fn render_markdown(cells: &[MethodCell]) -> String {
    let models = ordered(cells.iter().map(|c| c.model_id.clone()));
    let methods = ordered(cells.iter().map(|c| c.method));
    let self_repair = cells.iter().any(|c| c.initial_pass.is_some());
    let find = |m: &str, method: RepairMethod| cells.iter().find(|c| c.model_id == m && c.method == method);

    let mut out = String::new();
    let mut header = vec!["Repair method".to_string()];
    for m in &models {
        if self_repair {
            header.push(format!("{m} fix@1"));
            header.push(format!("{m} pass@1"));
        } else {
            header.push(format!("{m} fix@1"));
        }
    }
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    out.push_str(&format!("|---|{}\n", "---:|".repeat(header.len() - 1)));

    if self_repair {
        let mut row = vec!["Solve rate (no repair)".to_string()];
        for m in &models {
            let solve = cells.iter().find(|c| &c.model_id == m).and_then(MethodCell::solve_rate);
            row.push("--".into());
            row.push(cell_text(solve));
        }
        out.push_str(&format!("| {} |\n", row.join(" | ")));
    }
    for method in &methods {
        let mut row = vec![method.table_label().to_string()];
        for m in &models {
            let cell = find(m, *method);
            row.push(cell_text(cell.and_then(|c| c.fix_at_1)));
            if self_repair {
                row.push(cell_text(cell.and_then(|c| c.adjusted_pass_at_1)));
            }
        }
        out.push_str(&format!("| {} |\n", row.join(" | ")));
    }

    if self_repair {
        let excluded: Vec<String> = models
            .iter()
            .filter_map(|m| {
                let n = cells.iter().find(|c| &c.model_id == m)?.unrepairable_initials?;
                (n > 0).then(|| format!("{m}: {n}"))
            })
            .collect();
        if !excluded.is_empty() {
            out.push_str(&format!(
                "\nInitial attempts with no extractable code, excluded from fix@1 denominators: {}\n",
                excluded.join(", ")
            ));
        }
    }
    out
}

fn render_csv(cells: &[MethodCell]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "method", "attempted", "fixed", "fix_at_1", "initial_pass", "adjusted_pass_at_1"])
        .expect("in-memory write");
    for c in cells {
        w.write_record([
            c.model_id.clone(),
            c.method.to_string(),
            c.attempted.to_string(),
            c.fixed.to_string(),
            c.fix_at_1.map(|p| p.to_string()).unwrap_or_default(),
            c.initial_pass.map(|p| p.to_string()).unwrap_or_default(),
            c.adjusted_pass_at_1.map(|p| p.to_string()).unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}
