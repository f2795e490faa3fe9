//! Detection and forgetting metrics.

mod ap;
pub mod boxes;
mod metrics;
mod report;

pub use ap::{ap_from_flags, average_precision, coco_thresholds, match_class, mean_defined, Interpolation};
pub use boxes::{giou, iou, BBox};
pub use metrics::{
    argmax_row, assign_queries, class_agnostic_recall, gap_metrics, recall_counts, recognition_counts, Ratio,
};
pub use report::{
    collect_predictions, evaluate, export_features, feature_csv, forgetting_csv, forgetting_report, relative_drop,
    report_from_scores, EvalOptions, EvalReport, FeatureRow, ForgettingRow, Prediction,
};
