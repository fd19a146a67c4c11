//! Transfer evaluation, gradient-alignment diagnostics and the
//! regression-based risk estimator.

pub mod regression;
pub mod report;
pub mod transfer;

pub use regression::{
    bootstrap_ci, bootstrap_ci_stratified, fit_risk_regression, link_from_str, links, spearman, Interval,
    Link, LogitLink, IdentityLink, RegressionModel, CI_LEVEL,
};
pub use report::{build_report, AttackSection, Aggregates, ReportConfig, RiskReport};
pub use transfer::{
    gradient_alignment, read_transfer_csv, transfer_eval, transfer_from_batch, write_transfer_csv, Alignment, TransferRecord,
};
