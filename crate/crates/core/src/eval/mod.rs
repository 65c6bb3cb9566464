//! Filtered link-prediction evaluation, continual metrics, error analysis and reports.

mod errors;
mod metrics;
mod rank;
mod report;

pub use errors::{classify_errors, ErrorCategory, ErrorHistogram, ErrorRecord, ErrorThresholds};
pub use metrics::{
    avg_metrics, bwt, evaluate_model, evaluate_triples, forgetting_curve, new_vs_old, Averages, Cell, MetricMatrix,
};
pub use rank::{
    filtered_top1, query_scores, rank_from_scores, rank_query, rank_triples, Direction, FilterIndex, Query,
};
pub use report::{emit_report, matrix_csv, parse_matrix_csv, read_matrix, NewOld, Report, ReportFormat};
