//! Counterfactual debiasing for visual question answering.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! - [`dataset`]: canonical QA records, vocabularies and question→answer prior audits.
//! - [`resplit`]: greedy changing-priors re-splitting with word-coverage repair.
//! - [`encoders`] and [`causal`]: the three-branch model, the counterfactual
//!   branch built from learnable stand-in vectors, and `TIE = TE − NDE`.
//! - [`trainer`], [`evaluator`]: multi-branch training and per-type reports.
//! - [`synth`]: synthetic corpora with controllable prior skew.
//! - [`tensor`]: the reverse-mode autodiff engine underneath all of it.

pub mod causal;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod fsutil;
pub mod resplit;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{ParamId, ParamStore, Tape, Tensor, Var};
