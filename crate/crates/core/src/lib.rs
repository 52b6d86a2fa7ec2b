//! Granger causality alignment for time-series domain adaptation.

pub mod autodiff;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod ledger;
pub mod model;
pub mod nn;
pub mod objective;
pub mod predictor;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

pub use error::{GcaError, Result};
pub use tensor::Tensor;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use dataio::{SeriesWindow, SplitSpec};
pub use encoder::{CausalStructure, SampleMode};
pub use eval::EpochRecord;
pub use ledger::{MatrixLedger, RunLedger};
pub use model::{Domain, GcaModel, ModelConfig};
pub use objective::{LossBreakdown, ObjectiveConfig, Variant};
pub use synthgen::{DomainGenConfig, GroundTruthStructure, RawSeries};
pub use trainer::{Forecaster, TrainConfig, TrainOutcome, TransferData};
