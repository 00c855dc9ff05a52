//! Evaluation toolkit for language models: n-gram and perplexity metrics,
//! relaxed perplexity over sampled continuations, and analyses of how those
//! metrics agree across models and benchmarks.

pub mod analytics;
pub mod backend;
pub mod harness;
pub mod mock;
pub mod perplexity;
pub mod relaxed;
pub mod text_metrics;
