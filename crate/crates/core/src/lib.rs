//! Symbolic orchestration toolkit: harmony-skeleton analysis, compressed REMI
//! tokenization, dissonance-averse sampling, objective metrics, a small 3D
//! hierarchical sequence model and a GRPO fine-tuning harness.

pub mod score;
pub mod tokenizer;
pub mod harmony;
pub mod dissonance;
pub mod metrics;
pub mod hiermodel;
pub mod pipeline;
