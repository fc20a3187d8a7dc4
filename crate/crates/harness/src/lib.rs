//! Experiment harness: dataset ingestion, configuration, the evaluation
//! grids, and report emission for the rdc codec/attack/defense stack.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod fixtures;
pub mod report;
