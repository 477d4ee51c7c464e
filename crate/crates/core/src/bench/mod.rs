//! Experiment harness: data sources, resampling experiments, self-checks and
//! plot data.

pub mod data;
pub mod experiment;
pub mod figures;
pub mod verify;

pub use data::{generate_synthetic, load_csv, true_quantile, SyntheticKind};
pub use experiment::{
    run_quantile_experiment, run_sum_experiment, DataSource, DatasetPreset, ExperimentSpec, Method, ResultRecord,
};
pub use figures::{emit_pdf_figures, PdfFigure};
pub use verify::{run_suite, run_verification_suite, Suite, VerificationReport, VerifyOptions};
