//! Batch reinforcement learning toolkit that learns a small set of
//! distinct, safety-constrained stochastic policies from logged ICU-style
//! trajectories and evaluates them off-policy.
//!
//! Pipeline: discretize logged care decisions onto a 20-action grid
//! ([`data_model`]), estimate the logging policy and safe action sets with
//! weighted kNN ([`behavior`]), train K softmax policies that trade off
//! closeness to the logged behavior against pairwise distinctness
//! ([`policy`], [`training`]), and score them with a consistent weighted
//! per-decision importance-sampling estimator gated on effective sample
//! size ([`ope`]). A synthetic ground-truth environment ([`simulator`])
//! provides Monte-Carlo oracle values for end-to-end verification.
//!
//! Everything numeric is generic over the scalar type through [`Scalar`]
//! (`f32` or `f64`); the aliases at the crate root pin `f64`.

pub mod behavior;
pub mod config;
pub mod data_model;
pub mod ope;
pub mod policy;
pub mod scalar;
pub mod simulator;
pub mod training;

pub use scalar::Scalar;

pub type StateVector = data_model::StateVector<f64>;
pub type Transition = data_model::Transition<f64>;
pub type Trajectory = data_model::Trajectory<f64>;
pub type Dataset = data_model::Dataset<f64>;

pub type BehaviorModel = behavior::BehaviorModel<f64>;
pub type BehaviorAnnotations = behavior::BehaviorAnnotations<f64>;

pub type PolicyParams = policy::PolicyParams<f64>;
pub type PolicyCollection = policy::PolicyCollection<f64>;
pub type CollectionCheckpoint = policy::CollectionCheckpoint<f64>;

pub type FlatData = training::FlatData<f64>;
pub type LossBreakdown = training::LossBreakdown<f64>;
pub type AdamState = training::AdamState<f64>;
pub type TrainOutput = training::TrainOutput<f64>;

pub type OpeResult = ope::OpeResult<f64>;
pub type CollectionEval = ope::CollectionEval<f64>;
