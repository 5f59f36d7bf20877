//! Repair protocols.
//!
//! Summary-mediated repair is two strictly sequential exchanges: summarise
//! the subject code, then regenerate a function from the summary alone. The
//! subject code never reaches the generate prompt. Direct repair is the
//! single-prompt baseline. Self-repair first asks the model to solve each
//! task and repairs only its failing, extractable attempts.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::Utc;
use thiserror::Error;

use crate::dataset::{Origin, RepairTask};
use crate::extract::extract_code;
use crate::llm::{ChatExchange, ChatProvider, LlmConfig, LlmError};
use crate::prompts::{Bindings, PromptError, PromptRegistry, SummaryStyle};
use crate::record::{Phase, Protocol, RecordKey, RepairMethod, RunManifest, RunRecord};
use crate::sandbox::{Executor, SandboxError, Verdict, VerdictStatus};
use crate::store::{RecordFilter, RunStore, StoreError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Configuration(LlmError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("run cancelled")]
    Cancelled,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub concurrency: usize,
    /// Stop after this many new records (for staged or partial runs).
    pub max_new_records: Option<usize>,
    pub cancel: Option<Arc<AtomicBool>>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { concurrency: 4, max_new_records: None, cancel: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    pub run_id: String,
    /// Units that still had no record when this invocation started its
    /// last phase.
    pub pending: usize,
    pub new_records: usize,
}

/// Executes single units of work for one run.
pub struct Pipeline<'a> {
    pub run_id: String,
    pub registry: &'a PromptRegistry,
    pub provider: &'a dyn ChatProvider,
    pub executor: &'a dyn Executor,
    pub timeout: Duration,
}

/// Result of one exchange: fatal errors abort, provider errors end the unit.
enum Exchange {
    Ok(ChatExchange),
    Failed(String),
}

impl<'a> Pipeline<'a> {
    fn ask(&self, model: &LlmConfig, prompt: &str) -> Result<Exchange, PipelineError> {
        match self.provider.complete(model, prompt) {
            Ok(ex) => Ok(Exchange::Ok(ex)),
            Err(e) if e.is_fatal() => Err(PipelineError::Configuration(e)),
            Err(e) => Ok(Exchange::Failed(e.to_string())),
        }
    }

    fn render(&self, template: &str, bindings: &[(&str, &str)]) -> Result<String, PipelineError> {
        let bindings: Bindings = bindings.iter().copied().collect();
        Ok(self.registry.get_template(template)?.render(&bindings)?)
    }

    fn record(
        &self,
        task: &RepairTask,
        model: &LlmConfig,
        method: Option<RepairMethod>,
        phase: Phase,
    ) -> RunRecord {
        RunRecord {
            run_id: self.run_id.clone(),
            task_id: task.id.clone(),
            origin: task.origin,
            model_id: model.model_id.clone(),
            method,
            phase,
            summary_text: String::new(),
            candidate_code: String::new(),
            verdict: Verdict::new(VerdictStatus::Error, ""),
            exchanges: Vec::new(),
            created_at: Utc::now(),
        }
    }

    /// Extracts code from the final response and tests it.
    fn finish(&self, task: &RepairTask, mut rec: RunRecord, response: &str) -> Result<RunRecord, PipelineError> {
        let extracted = extract_code(response, &task.entry_point);
        if !extracted.is_found() || extracted.code.trim().is_empty() {
            rec.verdict = Verdict::new(VerdictStatus::ExtractionFailure, "no candidate definition found");
            return Ok(rec);
        }
        rec.verdict = self.executor.run_tests(&task.prelude, &extracted.code, &task.test_code, self.timeout)?;
        rec.candidate_code = extracted.code;
        Ok(rec)
    }

    fn provider_failure(mut rec: RunRecord, reason: String) -> RunRecord {
        rec.verdict = Verdict::new(VerdictStatus::Error, format!("provider: {reason}"));
        rec
    }

    pub fn summary_mediated_repair(
        &self,
        task: &RepairTask,
        style: SummaryStyle,
        model: &LlmConfig,
    ) -> Result<RunRecord, PipelineError> {
        if task.subject_code.trim().is_empty() {
            return Err(PipelineError::Precondition(format!("{}: no subject code to repair", task.id)));
        }
        let mut rec = self.record(task, model, Some(RepairMethod::SummaryMediated(style)), Phase::Repair);
        let prompt = self.render(style.template_name(), &[("code", &task.subject_code)])?;
        let summary = match self.ask(model, &prompt)? {
            Exchange::Ok(ex) => ex,
            Exchange::Failed(reason) => return Ok(Self::provider_failure(rec, reason)),
        };
        rec.summary_text = summary.response_text.clone();
        rec.exchanges.push(summary);
        if rec.summary_text.trim().is_empty() {
            return Ok(Self::provider_failure(rec, "empty summary".into()));
        }

        let prompt = self.render("generate", &[("function", &task.entry_point), ("summary", &rec.summary_text)])?;
        let generated = match self.ask(model, &prompt)? {
            Exchange::Ok(ex) => ex,
            Exchange::Failed(reason) => return Ok(Self::provider_failure(rec, reason)),
        };
        let response = generated.response_text.clone();
        rec.exchanges.push(generated);
        self.finish(task, rec, &response)
    }

    pub fn direct_repair(&self, task: &RepairTask, model: &LlmConfig) -> Result<RunRecord, PipelineError> {
        if task.subject_code.trim().is_empty() {
            return Err(PipelineError::Precondition(format!("{}: no subject code to repair", task.id)));
        }
        let mut rec = self.record(task, model, Some(RepairMethod::DirectRepair), Phase::Repair);
        let prompt = self.render("direct_repair", &[("code", &task.subject_code)])?;
        let ex = match self.ask(model, &prompt)? {
            Exchange::Ok(ex) => ex,
            Exchange::Failed(reason) => return Ok(Self::provider_failure(rec, reason)),
        };
        let response = ex.response_text.clone();
        rec.exchanges.push(ex);
        self.finish(task, rec, &response)
    }

    pub fn repair(&self, task: &RepairTask, method: RepairMethod, model: &LlmConfig) -> Result<RunRecord, PipelineError> {
        match method {
            RepairMethod::DirectRepair => self.direct_repair(task, model),
            RepairMethod::SummaryMediated(style) => self.summary_mediated_repair(task, style, model),
        }
    }

    pub fn initial_solve(&self, task: &RepairTask, model: &LlmConfig) -> Result<RunRecord, PipelineError> {
        if task.origin != Origin::Mbpp {
            return Err(PipelineError::Precondition(format!("{}: initial solve is for MBPP tasks", task.id)));
        }
        let example = task
            .first_assertion()
            .ok_or_else(|| PipelineError::Precondition(format!("{}: no assertion in tests", task.id)))?;
        let mut rec = self.record(task, model, None, Phase::InitialSolve);
        let prompt = self.render(
            "initial_solve",
            &[("function", &task.entry_point), ("task", &task.description), ("example_test", example)],
        )?;
        let ex = match self.ask(model, &prompt)? {
            Exchange::Ok(ex) => ex,
            Exchange::Failed(reason) => return Ok(Self::provider_failure(rec, reason)),
        };
        let response = ex.response_text.clone();
        rec.exchanges.push(ex);
        self.finish(task, rec, &response)
    }
}

/// Whether an initial-solve record leaves code for the repair phase. Pass
/// needs no repair; extraction failures and provider errors have no code.
pub fn needs_repair(initial: &RunRecord) -> bool {
    !initial.passed() && !initial.candidate_code.trim().is_empty()
}

#[derive(Debug, Clone)]
enum Unit {
    Initial { task: usize, model: usize },
    Repair { task: usize, model: usize, method: RepairMethod },
}

/// Runs `work` over `units` with at most `concurrency` threads. Stops handing
/// out units after the first fatal error or on cancellation.
fn run_pool<F>(
    units: &[Unit],
    concurrency: usize,
    cancel: Option<&AtomicBool>,
    work: F,
) -> Result<usize, PipelineError>
where
    F: Fn(&Unit) -> Result<bool, PipelineError> + Sync,
{
    let next = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let failure: Mutex<Option<PipelineError>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..concurrency.max(1).min(units.len().max(1)) {
            scope.spawn(|| loop {
                if stop.load(Ordering::SeqCst) || cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(unit) = units.get(i) else { break };
                match work(unit) {
                    Ok(true) => {
                        done.fetch_add(1, Ordering::SeqCst);
                    }
                    Ok(false) => {}
                    Err(e) => {
                        stop.store(true, Ordering::SeqCst);
                        failure.lock().unwrap_or_else(|p| p.into_inner()).get_or_insert(e);
                        break;
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap_or_else(|p| p.into_inner()) {
        return Err(e);
    }
    if cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
        return Err(PipelineError::Cancelled);
    }
    Ok(done.into_inner())
}

impl Pipeline<'_> {
    /// Runs (or resumes) the experiment described by `manifest`. Keys already
    /// in the store are skipped, so re-running a finished run is a no-op.
    pub fn run_experiment(
        &self,
        store: &RunStore,
        manifest: &RunManifest,
        tasks: &[RepairTask],
        options: &RunOptions,
    ) -> Result<RunOutcome, PipelineError> {
        let origin = manifest.protocol.origin();
        let by_id: HashMap<&str, usize> = tasks.iter().enumerate().map(|(i, t)| (t.id.as_str(), i)).collect();
        let mut scope = Vec::with_capacity(manifest.task_ids.len());
        for id in &manifest.task_ids {
            let &i = by_id
                .get(id.as_str())
                .ok_or_else(|| PipelineError::Precondition(format!("task {id} is not in the dataset")))?;
            if tasks[i].origin != origin {
                return Err(PipelineError::Precondition(format!("task {id} is not a {origin} task")));
            }
            scope.push(i);
        }
        if manifest.methods.is_empty() || manifest.models.is_empty() {
            return Err(PipelineError::Precondition("run needs at least one model and one method".into()));
        }

        let writer = if store.exists(&manifest.run_id) {
            let stored = store.manifest(&manifest.run_id)?;
            if stored.protocol != manifest.protocol || stored.dataset_digest != manifest.dataset_digest {
                return Err(PipelineError::Precondition(format!(
                    "run {} was started with a different protocol or dataset",
                    manifest.run_id
                )));
            }
            store.open_run(&manifest.run_id)?
        } else {
            store.create_run(manifest)?
        };
        let mut budget = options.max_new_records.unwrap_or(usize::MAX);
        let cancel = options.cancel.as_deref();

        let execute = |unit: &Unit, subjects: &HashMap<(usize, usize), String>| -> Result<bool, PipelineError> {
            let record = match unit {
                Unit::Initial { task, model } => self.initial_solve(&tasks[*task], &manifest.models[*model])?,
                Unit::Repair { task, model, method } => match subjects.get(&(*task, *model)) {
                    Some(code) => {
                        let mut own = tasks[*task].clone();
                        own.subject_code = code.clone();
                        self.repair(&own, *method, &manifest.models[*model])?
                    }
                    None => self.repair(&tasks[*task], *method, &manifest.models[*model])?,
                },
            };
            match writer.append_record(&record) {
                Ok(()) => Ok(true),
                Err(StoreError::Duplicate(_)) => Ok(false),
                Err(e) => Err(e.into()),
            }
        };

        let mut new_records = 0;
        let mut subjects: HashMap<(usize, usize), String> = HashMap::new();
        let repair_targets: Vec<(usize, usize)> = match manifest.protocol {
            Protocol::BugRepair => {
                (0..manifest.models.len()).flat_map(|m| scope.iter().map(move |&t| (t, m))).collect()
            }
            Protocol::SelfRepair => {
                let done = writer.completed_keys();
                let mut initial: Vec<Unit> = Vec::new();
                for (m, model) in manifest.models.iter().enumerate() {
                    for &t in &scope {
                        let key = RecordKey {
                            task_id: tasks[t].id.clone(),
                            model_id: model.model_id.clone(),
                            method: None,
                            phase: Phase::InitialSolve,
                        };
                        if !done.contains(&key) {
                            initial.push(Unit::Initial { task: t, model: m });
                        }
                    }
                }
                initial.truncate(budget);
                budget -= initial.len();
                let empty = HashMap::new();
                new_records += run_pool(&initial, options.concurrency, cancel, |u| execute(u, &empty))?;

                let filter = RecordFilter { phase: Some(Phase::InitialSolve), ..Default::default() };
                let model_index: HashMap<&str, usize> =
                    manifest.models.iter().enumerate().map(|(i, m)| (m.model_id.as_str(), i)).collect();
                let in_scope: BTreeSet<usize> = scope.iter().copied().collect();
                let mut targets = Vec::new();
                for rec in store.query(&manifest.run_id, &filter)? {
                    let (Some(&t), Some(&m)) = (by_id.get(rec.task_id.as_str()), model_index.get(rec.model_id.as_str()))
                    else {
                        continue;
                    };
                    if in_scope.contains(&t) && needs_repair(&rec) {
                        subjects.insert((t, m), rec.candidate_code);
                        targets.push((t, m));
                    }
                }
                // keep dataset order regardless of completion order
                targets.sort_by_key(|&(t, m)| (m, scope.iter().position(|&s| s == t)));
                targets
            }
        };

        let done = writer.completed_keys();
        let mut repairs: Vec<Unit> = Vec::new();
        for &(t, m) in &repair_targets {
            for &method in &manifest.methods {
                let key = RecordKey {
                    task_id: tasks[t].id.clone(),
                    model_id: manifest.models[m].model_id.clone(),
                    method: Some(method),
                    phase: Phase::Repair,
                };
                if !done.contains(&key) {
                    repairs.push(Unit::Repair { task: t, model: m, method });
                }
            }
        }
        let pending = repairs.len();
        repairs.truncate(budget);
        new_records += run_pool(&repairs, options.concurrency, cancel, |u| execute(u, &subjects))?;
        Ok(RunOutcome { run_id: manifest.run_id.clone(), pending, new_records })
    }
}
