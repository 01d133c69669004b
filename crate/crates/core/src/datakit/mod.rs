//! Synthetic data, the array container, metrics and the command line.

pub mod cli;
pub mod container;
pub mod corpus;
pub mod metrics;

pub use container::{read_container, write_container, Container};
pub use corpus::{synth_corpus, Corpus, CorpusSpec, SyntheticSpeaker};
pub use metrics::{
    eer_threshold, evaluate_conversions, pearson_lf0, speaker_accuracy, ConversionReport,
    PitchProbe,
};
