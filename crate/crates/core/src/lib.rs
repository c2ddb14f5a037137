//! Desk-scale vision-language projector lab: a stochastic Gaussian projector
//! with an entropy-adaptive compression schedule, a frozen toy decoder with a
//! hand-verified gradient engine, caption/VQA hallucination metrics, and a
//! biased synthetic dataset generator for end-to-end experiments.

pub mod adaptive_beta;
pub mod data_io;
pub mod error;
pub mod experiments;
pub mod halluc_metrics;
pub mod numerics;
pub mod projector;
pub mod toy_model;
pub mod trainer;

pub use error::{Error, Result};
