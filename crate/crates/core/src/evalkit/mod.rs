//! Automatic metrics and structure-interpretation tools.

pub mod metrics;
pub mod structure;

pub use metrics::{bleu_n, distinct_n, rouge, MetricReport};
pub use structure::{
    adjusted_mutual_info, assign_states, export_structure, structure_recovery_score, transition_matrix,
    StateAssignment, TransitionMatrix,
};
