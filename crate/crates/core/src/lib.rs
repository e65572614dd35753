//! Knowledge-base refinement: retrieval over a triple store, model-driven
//! defect diagnosis and repair, reward computation, query selection, and
//! corrupted-benchmark construction.

pub mod corrupt;
pub mod coverage;
pub mod dsl;
pub mod embed;
pub mod gateway;
pub mod kb;
pub mod pipeline;
pub mod retrieval;
pub mod reward;

pub use coverage::{CoverageConfig, QueryCoverage, Selection};
pub use dsl::{ActionKind, ApplyOptions, ApplyReport, RefinementAction};
pub use embed::{CachedEmbedder, EmbeddingProvider, HashEmbedder};
pub use gateway::{ChatClient, ChatRequest, Gateway, GatewayError, Role};
pub use kb::{KbError, KnowledgeBase, ReplaceMode, Triple};
pub use pipeline::{QuerySample, RefineConfig, RefineOutcome, StreamReport};
pub use retrieval::{RetrievalConfig, ScoredTriple, Subgraph};
pub use reward::{AnswerRecord, RewardRecord};
