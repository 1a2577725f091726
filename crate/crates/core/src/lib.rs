pub mod benchkit;
pub mod cfm;
pub mod config;
pub mod dsp;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod trainer;
pub mod units;
pub mod vfnet;

pub use benchkit::{CorpusManifest, EvalReport};
pub use cfm::{MaskSpec, PathConfig};
pub use config::RunConfig;
pub use sampler::SwayConfig;
pub use trainer::{Stage, TrainConfig};
pub use units::{Codebook, FeatureMatrix, UnitSequence};
pub use vfnet::{InputMode, ModelConfig};
pub use error::{Error, Result};
