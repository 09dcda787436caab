//! Core algorithms: point-cloud geometry, registration losses and metrics,
//! Gaussian-mixture distribution analysis, synthetic TPS deformation data,
//! and the UniRiT two-stage registration model.

pub mod error;
pub mod geom;
pub mod gmm;
pub mod metrics;
pub mod nn;
pub mod synth;
pub mod unirit;

pub use error::{Error, Result};
pub use geom::{DisplacementField, NormParams, PointCloud, RigidTransform};
pub use gmm::{DivergenceMatrix, DivergenceProtocol, EmFit, GaussianMixture};
pub use metrics::{LossWeights, MetricReport};
pub use synth::{Case, Manifest, ManifestEntry, PairSpec, ShapeFamily, SynthPair, TpsWarp};
pub use unirit::{
    RegisterOutput, RotationParam, TrainPair, TrainResult, UniRiTConfig, UniRiTModel,
};
