//! Multi-agent LLM orchestration for full-pipeline AutoML.
//!
//! A natural-language task description is verified, parsed into a
//! [`UserRequirements`] document, turned into several independent plans with
//! retrieval-augmented planning, executed by role-specific agents through
//! prompting alone, verified, and finally implemented as a runnable pipeline
//! script that is executed in a subprocess sandbox and graded.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`requirements`]: requirement schema, prompt parsing and validation
//! - [`gateway`]: chat-completion backends, retries, transcripts, mock scripts
//! - [`prompts`]: agent system prompts and the prompt template catalog
//! - [`knowledge`]: external knowledge retrieval and summarization
//! - [`planning`]: plan generation and revision
//! - [`execution`]: plan decomposition and pseudo execution
//! - [`verification`]: request, execution and implementation verification
//! - [`codegen`]: best-outcome selection, instruction synthesis, code extraction
//! - [`sandbox`]: subprocess execution and result-line parsing
//! - [`metrics`]: success rate, normalized performance and comprehensive score
//! - [`orchestrator`]: the INIT / PLAN / END state machine and run artifacts

pub mod codegen;
pub mod execution;
pub mod gateway;
pub mod knowledge;
pub mod metrics;
pub mod orchestrator;
pub mod planning;
pub mod prompts;
pub mod requirements;
pub mod sandbox;
pub mod verification;

mod util;

pub use codegen::{PipelineArtifact, TaskFamily};
pub use execution::{CandidateModel, ExecutionOutcome};
pub use gateway::{ChatRequest, Gateway, GatewayError, MockBackend};
pub use knowledge::KnowledgeBundle;
pub use metrics::{GradingMode, MetricReport};
pub use orchestrator::{RunConfig, RunOutcome};
pub use planning::{Plan, PlanSet};
pub use requirements::{MetricConstraint, RawInstruction, UserRequirements};
pub use sandbox::{RunResult, SandboxConfig};
pub use verification::{Feedback, Verdict};

/// Scalar used for every score and metric value.
pub type Score = f64;
