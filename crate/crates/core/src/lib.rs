//! Budget-constrained active domain generalization.
//!
//! An MLP classifier is trained on several labeled source domains while an
//! active-learning loop decides which unlabeled source samples to annotate.
//! Query selection fuses uncertainty, domain representativeness and diversity
//! ranks; training combines cross-entropy, augmentation consistency and a
//! MixUp-based expansion loss over pseudo-labeled reliable samples.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix `f64`.

pub mod datagen;
pub mod error;
pub mod experiment;
pub mod exploration;
pub mod generalization;
pub mod math;
pub mod model;
pub mod pools;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use error::{CegError, Result};
pub use rng::RngStream;
pub use scalar::Scalar;

pub use datagen::{generate, leave_one_domain_out, load_dataset, save_dataset, DomainSpec};
pub use exploration::{FusionWeights, QueryScores, Strategy};
pub use generalization::{AugmentConfig, LossWeights, MixMode, ThresholdSchedule};
pub use model::MlpDims;
pub use pools::{BudgetLedger, LabelOracle, PoolState, QueryRecord, SampleId};
pub use trainer::{
    evaluate, run_ablation, run_baseline, run_ceg, run_strategy, Ablation, BaselineLoss, Component, QueryStrategy,
    RunReport, TrainConfig,
};

pub type Mlp = model::MlpParams<f64>;
pub type Discriminator = model::DomainDiscriminator<f64>;
pub type Gradients = model::GradientSet<f64>;
pub type Sample = pools::Sample<f64>;
pub type Dataset = datagen::GeneratedDataset<f64>;
pub type Split = datagen::DomainSplit<f64>;
pub type Centroids = exploration::CentroidSet<f64>;
pub type Reliable = generalization::ReliableSample<f64>;
pub type Mixed = generalization::MixedSample<f64>;
pub type Noise = generalization::FeatureNoise<f64>;
pub type Run<'a> = trainer::Run<'a, f64>;
