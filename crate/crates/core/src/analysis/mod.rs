//! Evaluation metrics and representation similarity.

mod metrics;
mod similarity;

pub use metrics::{
    argmax_rows, client_accuracy, dataset_logits, evaluate, fairness_std, per_class_accuracy, top1_accuracy, EvalReport,
};
pub use similarity::{
    block_representations, compare_models, linear_cka, mean_cca, to_matrix, Measure, SimilarityMatrix, CCA_EPSILON,
    PROBE_SIZE,
};
