//! Scoring, evaluation suites, gate statistics, ablations and reports.

mod ablate;
mod report;
mod score;
mod suite;

pub use ablate::{ablate_layers, ablate_samples, AblationAxis, AblationPoint, AblationReport};
pub use report::{emit_report, load_report, rows_from_csv, rows_to_csv, ReportFormat, CSV_HEADER};
pub use score::{normalize, score_answer};
pub use suite::{
    aggregate, eval_suite, gate_gap, gate_stats, predict_all, prompt_gates, EvalReport, EvalRow, GateStat, Method,
    MethodRun, Prediction,
};
