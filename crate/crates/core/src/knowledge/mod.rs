//! Prompt emission for an external language model and storage of the
//! knowledge vectors it (or the synthetic generator) produces.

mod prompt;
mod store;

pub use prompt::{
    build_all_prompts, build_scenario_prompt, build_user_prompt, write_prompts_jsonl, PromptContext,
    PromptRecord, ScenarioInfo, ScenarioStats, COMMONALITY_INSTRUCTION,
};
pub use store::{FallbackPolicy, KnowledgeVector, Scope, VectorStore};
