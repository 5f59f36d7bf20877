//! Run records, repair methods and run manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::dataset::Origin;
use crate::llm::{ChatExchange, LlmConfig};
use crate::prompts::SummaryStyle;
use crate::sandbox::{Verdict, VerdictStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Repair shipped buggy solutions (HumanEvalPack).
    BugRepair,
    /// Solve, then repair the model's own failures (MBPP).
    SelfRepair,
}

impl Protocol {
    pub fn origin(self) -> Origin {
        match self {
            Protocol::BugRepair => Origin::HumanEvalPack,
            Protocol::SelfRepair => Origin::Mbpp,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::BugRepair => "bug-repair",
            Protocol::SelfRepair => "self-repair",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    DirectRepair,
    SummaryMediated,
}

/// One row of the result tables: the baseline or a summary style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RepairMethod {
    DirectRepair,
    SummaryMediated(SummaryStyle),
}

impl RepairMethod {
    /// Baseline followed by the five styles, in table order.
    pub const ALL: [RepairMethod; 6] = [
        RepairMethod::DirectRepair,
        RepairMethod::SummaryMediated(SummaryStyle::Base),
        RepairMethod::SummaryMediated(SummaryStyle::Short),
        RepairMethod::SummaryMediated(SummaryStyle::Intent),
        RepairMethod::SummaryMediated(SummaryStyle::Error),
        RepairMethod::SummaryMediated(SummaryStyle::Warn),
    ];

    pub fn kind(self) -> MethodKind {
        match self {
            RepairMethod::DirectRepair => MethodKind::DirectRepair,
            RepairMethod::SummaryMediated(_) => MethodKind::SummaryMediated,
        }
    }

    pub fn style(self) -> Option<SummaryStyle> {
        match self {
            RepairMethod::DirectRepair => None,
            RepairMethod::SummaryMediated(s) => Some(s),
        }
    }

    pub fn from_parts(kind: MethodKind, style: Option<SummaryStyle>) -> Result<Self, String> {
        match (kind, style) {
            (MethodKind::DirectRepair, None) => Ok(RepairMethod::DirectRepair),
            (MethodKind::SummaryMediated, Some(s)) => Ok(RepairMethod::SummaryMediated(s)),
            (MethodKind::DirectRepair, Some(_)) => Err("direct repair takes no summary style".into()),
            (MethodKind::SummaryMediated, None) => Err("summary-mediated repair needs a summary style".into()),
        }
    }

    /// Row label used in reports.
    pub fn table_label(self) -> &'static str {
        match self {
            RepairMethod::DirectRepair => "Direct repair (baseline)",
            RepairMethod::SummaryMediated(SummaryStyle::Base) => "Summary: Base",
            RepairMethod::SummaryMediated(SummaryStyle::Short) => "Summary: Short",
            RepairMethod::SummaryMediated(SummaryStyle::Intent) => "Summary: Intent",
            RepairMethod::SummaryMediated(SummaryStyle::Error) => "Summary: Error",
            RepairMethod::SummaryMediated(SummaryStyle::Warn) => "Summary: Warn",
        }
    }

    /// Parses `all` or a comma-separated list of `direct` / `summary:<style>`.
    pub fn parse_list(s: &str) -> Result<Vec<RepairMethod>, String> {
        if s.trim() == "all" {
            return Ok(RepairMethod::ALL.to_vec());
        }
        let mut out: Vec<RepairMethod> = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m: RepairMethod = part.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err("no methods given".into());
        }
        Ok(out)
    }
}

impl fmt::Display for RepairMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RepairMethod::DirectRepair => f.write_str("direct"),
            RepairMethod::SummaryMediated(s) => write!(f, "summary:{s}"),
        }
    }
}

impl FromStr for RepairMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "direct" || s == "direct_repair" || s == "baseline" {
            return Ok(RepairMethod::DirectRepair);
        }
        s.strip_prefix("summary:")
            .and_then(SummaryStyle::parse)
            .map(RepairMethod::SummaryMediated)
            .ok_or_else(|| format!("unknown method `{s}` (expected direct or summary:<base|short|intent|error|warn>)"))
    }
}

impl TryFrom<String> for RepairMethod {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<RepairMethod> for String {
    fn from(m: RepairMethod) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    InitialSolve,
    Repair,
}

/// Identity of one unit of work within a run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub task_id: String,
    pub model_id: String,
    /// `None` for initial-solve records.
    pub method: Option<RepairMethod>,
    pub phase: Phase,
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let method = self.method.map(|m| m.to_string()).unwrap_or_else(|| "-".into());
        write!(f, "{}/{}/{}/{:?}", self.task_id, self.model_id, method, self.phase)
    }
}

/// One (task, model, method, phase) trial.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    pub task_id: String,
    pub origin: Origin,
    pub model_id: String,
    pub method: Option<RepairMethod>,
    pub phase: Phase,
    pub summary_text: String,
    pub candidate_code: String,
    pub verdict: Verdict,
    pub exchanges: Vec<ChatExchange>,
    pub created_at: DateTime<Utc>,
}

impl RunRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            task_id: self.task_id.clone(),
            model_id: self.model_id.clone(),
            method: self.method,
            phase: self.phase,
        }
    }

    pub fn passed(&self) -> bool {
        self.verdict.status == VerdictStatus::Pass
    }
}

/// Flat line format of `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRecord {
    pub run_id: String,
    pub task_id: String,
    pub origin: Origin,
    pub model_id: String,
    pub method_kind: Option<MethodKind>,
    pub summary_style: Option<SummaryStyle>,
    pub phase: Phase,
    pub summary_text: String,
    pub candidate_code: String,
    pub verdict_status: VerdictStatus,
    pub verdict_detail: String,
    pub duration_ms: u64,
    pub exchanges: Vec<ChatExchange>,
    pub created_at: DateTime<Utc>,
}

impl From<&RunRecord> for StoredRecord {
    fn from(r: &RunRecord) -> Self {
        StoredRecord {
            run_id: r.run_id.clone(),
            task_id: r.task_id.clone(),
            origin: r.origin,
            model_id: r.model_id.clone(),
            method_kind: r.method.map(RepairMethod::kind),
            summary_style: r.method.and_then(RepairMethod::style),
            phase: r.phase,
            summary_text: r.summary_text.clone(),
            candidate_code: r.candidate_code.clone(),
            verdict_status: r.verdict.status,
            verdict_detail: r.verdict.detail.clone(),
            duration_ms: r.verdict.duration_ms,
            exchanges: r.exchanges.clone(),
            created_at: r.created_at,
        }
    }
}

impl TryFrom<StoredRecord> for RunRecord {
    type Error = String;

    fn try_from(s: StoredRecord) -> Result<Self, Self::Error> {
        let method = match s.method_kind {
            None if s.summary_style.is_none() => None,
            None => return Err("summary_style without method_kind".into()),
            Some(kind) => Some(RepairMethod::from_parts(kind, s.summary_style)?),
        };
        Ok(RunRecord {
            run_id: s.run_id,
            task_id: s.task_id,
            origin: s.origin,
            model_id: s.model_id,
            method,
            phase: s.phase,
            summary_text: s.summary_text,
            candidate_code: s.candidate_code,
            verdict: Verdict { status: s.verdict_status, detail: s.verdict_detail, duration_ms: s.duration_ms },
            exchanges: s.exchanges,
            created_at: s.created_at,
        })
    }
}

/// Effective options of a run, snapshotted into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptionsSnapshot {
    pub concurrency: usize,
    pub timeout_secs: u64,
    #[serde(default)]
    pub template_overrides: BTreeMap<String, String>,
    #[serde(default)]
    pub allow_template_override: bool,
    #[serde(default)]
    pub excluded_task_ids: Vec<String>,
    /// Free-form provenance (dataset path, provider, executor...).
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl Default for RunOptionsSnapshot {
    fn default() -> Self {
        RunOptionsSnapshot {
            concurrency: 4,
            timeout_secs: crate::sandbox::DEFAULT_TIMEOUT.as_secs(),
            template_overrides: BTreeMap::new(),
            allow_template_override: false,
            excluded_task_ids: Vec::new(),
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub protocol: Protocol,
    pub dataset_digest: String,
    /// Tasks in scope for this run, after exclusions.
    pub task_ids: Vec<String>,
    pub model_ids: Vec<String>,
    pub models: Vec<LlmConfig>,
    pub methods: Vec<RepairMethod>,
    pub options: RunOptionsSnapshot,
    pub created_at: DateTime<Utc>,
}

pub fn new_run_id(protocol: Protocol) -> String {
    let stamp = Utc::now().format("%Y%m%dT%H%M%SZ");
    let tag = uuid::Uuid::new_v4().simple().to_string();
    format!("{protocol}-{stamp}-{}", &tag[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_labels_round_trip() {
        for m in RepairMethod::ALL {
            assert_eq!(m.to_string().parse::<RepairMethod>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<RepairMethod>(&json).unwrap(), m);
        }
        assert_eq!(RepairMethod::parse_list("all").unwrap().len(), 6);
        assert_eq!(
            RepairMethod::parse_list("summary:error").unwrap(),
            vec![RepairMethod::SummaryMediated(SummaryStyle::Error)]
        );
        assert!(RepairMethod::parse_list("summary:loud").is_err());
    }

    #[test]
    fn method_parts_enforce_style_rule() {
        assert!(RepairMethod::from_parts(MethodKind::SummaryMediated, None).is_err());
        assert!(RepairMethod::from_parts(MethodKind::DirectRepair, Some(SummaryStyle::Base)).is_err());
    }

    #[test]
    fn exactly_six_methods() {
        let distinct: std::collections::BTreeSet<_> = RepairMethod::ALL.iter().collect();
        assert_eq!(distinct.len(), 6);
        assert_eq!(RepairMethod::ALL.iter().filter(|m| m.kind() == MethodKind::DirectRepair).count(), 1);
    }
}
