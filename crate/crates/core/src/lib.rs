//! Verifiable machinery for inline-thinking code generation.
//!
//! - [`interleave`]: parse, validate and serialize mixed think/code output
//! - [`sandbox`]: judge extracted code against tests in limited child processes
//! - [`reward`]: structure and correctness rewards and their combination
//! - [`grpo`]: group-relative advantages and the clipped surrogate objective
//! - [`embed`]: trigger-token embedding initialization and table I/O
//! - [`coldstart`]: template rendering, sample filtering, dataset building
//! - [`analysis`]: entropy windows, syntactic context, pass@k, token cost

pub mod analysis;
pub mod coldstart;
pub mod embed;
pub mod fixtures;
pub mod grpo;
pub mod interleave;
pub mod par;
pub mod reward;
pub mod sandbox;
