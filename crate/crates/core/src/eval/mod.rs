//! Downstream evaluation of frozen embeddings: stratified cross-validation,
//! confound residualization, kernel ridge regression and the bootstrap and
//! permutation statistics reported per target.

mod cv;
mod downstream;
mod krr;
mod residualize;
mod stats;

pub use cv::{stratified_kfold, CvPlan};
pub use downstream::{
    format_embeddings, format_null_dump, format_predictions, format_report, parse_embeddings, predict_target,
    read_embeddings, run_downstream, write_embeddings, Embeddings, EvalSettings, EvaluationReport, TargetReport,
    REPORT_HEADER,
};
pub use krr::{krr_fit, krr_predict, select_lambda, Kernel, KernelKind, KrrModel, KrrSettings, Standardizer};
pub use residualize::{residualize_confounds, Residualized};
pub use stats::{bootstrap_ci, paired_bootstrap_test, pearson, permutation_p, PredictionRecord, StatResult};

/// Alias matching the statistical name of [`permutation_p`].
pub fn permutation_test(observed: f64, nulls: &[f64]) -> crate::Result<f64> {
    permutation_p(observed, nulls)
}
