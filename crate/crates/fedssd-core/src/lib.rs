//! Deterministic federated-learning simulator with selective self-distillation.
//!
//! The crate is organized around the lifecycle of a simulated federation:
//!
//! - [`nn`] — a small MLP classifier with exact analytic gradients and
//!   SGD-with-momentum; serves as both the local model and the frozen teacher.
//! - [`data`] — synthetic and IDX-format datasets, non-IID partitioning
//!   (quantity-based and Dirichlet), auxiliary-set sampling for the server.
//! - [`distill`] — teacher credibility estimation and all distillation /
//!   regularization loss terms (selective, constant-KL, constant-MSE, proximal).
//! - [`fed`] — the server loop: client sampling, local training, weighted
//!   aggregation, checkpointing.
//! - [`metrics`] — accuracy / confusion evaluation, forgetting gap, CSV and
//!   JSON emission.
//!
//! Everything is a pure function of its inputs and seeds; two runs with the
//! same configuration produce byte-identical artifacts.

pub mod data;
pub mod distill;
pub mod error;
pub mod fed;
pub mod metrics;
pub mod nn;
pub mod seeds;

pub use data::{LabeledDataset, PartitionPlan, PartitionStrategy};
pub use distill::{CompositeLossSpec, CredibilityMatrix, DistillWeights, LossMode};
pub use error::CoreError;
pub use fed::{FederationConfig, RoundRecord};
pub use metrics::RoundMetrics;
pub use nn::{Batch, ModelParams, OptimizerState};
