//! Personalized product search reranking with multimodal LLM prompt scoring.

pub mod backend;
pub mod config;
pub mod domain;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod pipeline;
pub mod prompt;
pub mod rerank;
pub mod select;
pub mod service;
pub mod summarize;
pub mod training;
pub mod util;
