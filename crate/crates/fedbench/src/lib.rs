//! Federated learning experiment engine.
//!
//! Provides the building blocks for reproducible federated learning
//! experiments at desk scale:
//!
//! - [`model`] — small differentiable classifiers (softmax regression and a
//!   one-hidden-layer MLP) over flat parameter vectors, with analytic
//!   gradients, empirical Fisher diagonals, and SGD/Adam optimizers.
//! - [`data`] — dataset loaders (MNIST IDX, CIFAR-10 binary, CSV), synthetic
//!   blob generation, and feature normalization.
//! - [`partition`] — six deterministic client-partitioning schemes: uniform,
//!   quantity skew, labels quantity skew, Dirichlet labels skew, pathological
//!   labels skew, and PCA-based covariate shift.
//! - [`algo`] — FedAvg and FedCurv local training and aggregation rules.
//! - [`orchestrator`] — the seeded in-process round loop.
//! - [`wire`] — the framed binary protocol used between aggregator and
//!   collaborators.
//! - [`netlink`] — TCP aggregator/collaborator endpoints speaking [`wire`].
//!
//! Every operation is a deterministic function of its inputs and seeds; two
//! runs with the same configuration produce identical results.

pub mod algo;
pub mod data;
mod error;
pub mod linalg;
pub mod model;
pub mod netlink;
pub mod orchestrator;
pub mod partition;
pub mod wire;

pub use error::{Error, Result};
