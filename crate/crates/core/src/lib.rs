//! Distant-recurrence identification from clinical narratives and structured
//! variables: concept extraction with negation and cue filtering, feature
//! assembly, a linear SVM with calibrated probabilities, and evaluation.

pub mod clinical;
pub mod concept;
pub mod corpus;
pub mod eval;
pub mod features;
pub mod pipeline;
pub mod stats;
pub mod synth;
pub mod svm;
pub mod text;
