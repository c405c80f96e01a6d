//! Byzantine-robust federated distillation.
//!
//! Clients in federated distillation (FD) share soft predictions on a public,
//! unlabeled dataset instead of model parameters; the server aggregates those
//! predictions and distills them into its own model. This crate provides:
//!
//! * [`simplex`]: probability vectors and per-client prediction tables,
//! * [`model`]: a small softmax MLP with exact gradients and Jacobians,
//! * [`attacks`]: byzantine prediction generators (RLF, LMA, CPA, HiPS variants)
//!   and the two FedAvg parameter attacks,
//! * [`defences`]: mean, geometric median, eigenvector filtering, Cronus and the
//!   ExpGuard exponential-weights meta-aggregator,
//! * [`federation`]: the FD / FedAvg round loop,
//! * [`data`]: synthetic blobs, deterministic splits and the dataset text format,
//! * [`checks`]: executable verification of the gradient, bias and attack
//!   optimality results,
//! * [`config`] and [`metrics`]: the flat `key=value` experiment format and the
//!   JSON-lines metrics stream.
//!
//! Every stochastic component draws from seeded ChaCha streams, so a fixed
//! configuration reproduces bit-identical results regardless of thread count.

pub mod attacks;
pub mod checks;
pub mod config;
pub mod data;
pub mod defences;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod simplex;

pub use attacks::{AttackKind, AttackSpec, SimilarityMatrix};
pub use config::{Branch, ConfigError, ExperimentConfig};
pub use data::{Dataset, SplitPlan};
pub use defences::{AggregatorState, DefenceKind, DefenceSpec};
pub use federation::{RoundRecord, RunError, RunOutcome};
pub use model::{Activation, Architecture, LossKind, ModelParams, TrainSchedule};
pub use simplex::{PredictionSet, ProbVector, SimplexError};
