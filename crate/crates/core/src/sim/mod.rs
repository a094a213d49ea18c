//! Simulation study: data-generating processes, error metrics, and the
//! replicate runner.

pub mod dgp;
pub mod metrics;
pub mod panel;
pub mod study;

pub use dgp::{draw, generate_dgp, DgpId, Draw, TrueEffects};
pub use metrics::{coverage_summary, rmse, rmse_mean, rmsme, CoverageSummary};
pub use panel::{draw_panel, PanelDraw};
pub use study::{run_study, StudyConfig, StudyReport};
