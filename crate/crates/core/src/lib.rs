//! Demographic perturbation datasets and perturbation-robustness fairness
//! evaluation.
//!
//! The crate has two halves. [`pipeline`] assembles datasets of perturbation
//! sets (one synthetic base image inpainted into one variant per perceived
//! race) over pluggable model [`adapters`]. [`evaluation`] and [`stats`] score
//! classifiers on such datasets: the fairness metric is one minus the median,
//! over sets, of the sample standard deviation of the true-label probability
//! across a set's variants.

pub mod adapters;
pub mod dataset;
pub mod evaluation;
pub mod pipeline;
pub mod prompting;
pub mod report;
pub mod review;
pub mod stats;
