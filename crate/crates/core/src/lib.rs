//! Harmonized training and human/model alignment metrics for image
//! classifiers.
//!
//! [`diffcore`] is a small define-by-run autodiff engine whose gradients
//! are themselves differentiable, which the training objective needs since
//! it penalizes the model's input gradient. On top of it:
//!
//! - [`explain`]: gradient saliency and the [`ImportanceMap`] type.
//! - [`pyramid`]: the binomial Gaussian pyramid used by the loss and the
//!   multi-scale metrics.
//! - [`harmonize`]: the harmonization loss and an SGD trainer.
//! - [`metrics`]: rank correlation, inter-rater ceilings, alignment scores.
//! - [`stimuli`] and [`decisions`]: masked stimuli for rapid
//!   categorization and normalized decision curves.
//! - [`dataio`]: file formats and the synthetic spurious-cue dataset.

pub mod dataio;
pub mod decisions;
pub mod diffcore;
pub mod explain;
pub mod harmonize;
pub mod metrics;
pub mod pyramid;
pub mod seeding;
pub mod stimuli;

pub use dataio::{
    Category, DataError, Response, RevealLevel, StimulusEntry, StimulusManifest, SyntheticDataset, SyntheticSpec,
    TrialResponse,
};
pub use decisions::{AlignmentMethod, CurveStatus, DecisionCurve, DecisionError};
pub use diffcore::{Architecture, Graph, GraphError, LayerSpec, Model, NodeId, Tensor};
pub use explain::{ExplainError, ImportanceMap, RaterMap};
pub use harmonize::{EpochRecord, FitOutcome, HarmonizeConfig, HarmonizeError, TrainSample};
pub use metrics::{AlignmentOptions, AlignmentReport, CeilingEstimate, ImageRaters, MetricsError};
pub use pyramid::{Pyramid, PyramidError};
pub use stimuli::{GrayImage, Mask, StimulusError};

/// Any error raised by the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Harmonize(#[from] HarmonizeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Stimulus(#[from] StimulusError),
    #[error(transparent)]
    Decision(#[from] DecisionError),
    #[error(transparent)]
    Data(#[from] DataError),
}
