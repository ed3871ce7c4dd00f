// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experimental protocols and reports.
//!
//! Each `run_*` entry point takes an [`ExperimentConfig`] and returns a
//! [`Report`]. Protocols that only need logits (orthogonality, logit test)
//! also accept a tensor dump as the model source.

pub mod config;
pub mod protocols;
pub mod report;
pub mod source;

pub use config::{ExperimentConfig, ModelSourceConfig, Perturbation};
pub use protocols::{
    arm_scores, export_toy_dump, extract_to_dump, logit_from_source, orthogonality_from_source, run_fisher,
    run_gauge_check, run_logit_test, run_multi_env, run_nullspace, run_orthogonality_test, run_scale_sweep,
    ArmScores, GAUGE_TOL,
};
pub use report::{find_reports, render_report, Format, Report, ReportBody, SCHEMA, SCHEMA_VERSION};
pub use source::{build_arms, plant_probe, Arm, ModelSource, SeedArms, ToySource, ToyWorld};
