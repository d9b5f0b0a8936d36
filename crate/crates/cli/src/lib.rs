//! Experiment harness: configuration, training runs, lemma checks, comparisons.

pub mod compare;
pub mod config;
pub mod export;
pub mod lemmas;
pub mod record;
pub mod run;
