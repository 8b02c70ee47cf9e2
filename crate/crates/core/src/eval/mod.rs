//! Cross-validation, training loops and the metric suite.

pub mod cv;
pub mod folds;
pub mod metrics;
pub mod optim;
pub mod train;

pub use cv::{cross_validate, prepare_dataset, CvReport, PreparedWsi};
pub use folds::{make_folds, Fold, FoldPlan};
pub use metrics::{confusion_metrics, Confusion, MetricsReport};
