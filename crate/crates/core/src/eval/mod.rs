//! Downstream evaluation of pretrained encoders.

pub mod change;
pub mod inspect;
pub mod metrics;
pub mod probe;

pub use change::{
    bce_with_logits, change_detect_eval, change_detect_train, change_probabilities, difference_features,
    generate_change_pairs, load_change_directory, write_change_directory, ChangeConfig, ChangeDecoder, ChangeModel,
    ChangePair, ChangePairSpec,
};
pub use inspect::{high_frequency_energy, high_frequency_grid, high_pass, inspect_features, InspectArtifacts};
pub use metrics::{accuracy, average_precision, confusion_matrix, f1_score, map_score, ConfusionCounts, F1Score, MapScore};
pub use probe::{probe_train, ProbeConfig, ProbeLabels, ProbeMode, ProbeModel, ProbeReport};
