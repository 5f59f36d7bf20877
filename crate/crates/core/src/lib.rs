//! Summary-mediated program repair harness.
//!
//! A buggy function is summarised in natural language, and a fresh function
//! is generated from that summary alone; the result is tested against the
//! benchmark's tests. The crate covers the benchmark loaders, prompt
//! templates, an OpenAI-compatible client with a deterministic mock, response
//! parsing, the sandbox driver, the repair protocols, an append-only run store
//! and the metrics/report layer.

pub mod dataset;
pub mod extract;
pub mod llm;
pub mod metrics;
pub mod mock;
pub mod pipeline;
pub mod prompts;
pub mod record;
pub mod sandbox;
pub mod store;
#[cfg(feature = "synthetic")]
pub mod synthetic;

pub use dataset::{Origin, RepairTask};
pub use extract::{defines_entry_point, extract_code, ExtractionResult};
pub use llm::{ChatExchange, ChatProvider, HttpProvider, LlmConfig, LlmError};
pub use metrics::{adjusted_pass_at_1, fix_at_1, MethodCell, Percentage};
pub use mock::{MockDefault, MockProvider};
pub use pipeline::{Pipeline, PipelineError, RunOptions, RunOutcome};
pub use prompts::{PromptRegistry, PromptTemplate, SummaryStyle};
pub use record::{Phase, Protocol, RecordKey, RepairMethod, RunManifest, RunRecord};
pub use sandbox::{Executor, ScriptedExecutor, SubprocessSandbox, Verdict, VerdictStatus};
pub use store::{RecordFilter, RunStore};
