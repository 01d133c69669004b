//! MTCR-VC: zero-shot voice conversion with multi-level temporal-channel
//! speaker retrieval, trained on synthetic feature corpora.

pub mod attention;
pub mod config;
pub mod datakit;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod features;
pub mod graph;
pub mod model;
pub mod nn;
pub mod params;
pub mod perceptual;
pub mod tcr;
pub mod training;

pub use attention::{attend, AttentionResult};
pub use config::{validate_config, Ablation, LossWeights, ModelConfig};
pub use error::{Error, Result};
pub use features::{pad_to_multiple, FeatureBundle};
pub use model::{ConversionResult, MtcrVc};
pub use perceptual::{FrozenModels, LossBreakdown};
pub use tcr::SpeakerRetrievalOutput;
pub use training::{fit, lr_schedule, train_batch, train_step, FitOptions, TrainState};
