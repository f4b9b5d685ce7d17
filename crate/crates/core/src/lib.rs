//! Tabular row serialization for language-model prompts, covariance feature
//! ranking, few-shot corpus generation and AUC grid evaluation.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod fewshot;
pub mod importance;
pub mod predict;
pub mod serialize;
pub mod verbalize;
