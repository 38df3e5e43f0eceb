//! Fully-qualified name inference for partial Java code.
//!
//! The crate covers corpus handling, WordPiece tokenization, masked prompt
//! generation, inference-point detection, fill-mask scoring backends, span
//! search, and evaluation metrics.

pub mod backend;
pub mod corpus;
pub mod detect;
pub mod eval;
pub mod infer;
pub mod lexer;
pub mod promptgen;
pub mod tokenizer;
