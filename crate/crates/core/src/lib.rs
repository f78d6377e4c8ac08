//! Hessian-trace regularization for small classifiers.
//!
//! * [`autodiff`]: expression graph with differentiable gradients and
//!   Hessian-vector products.
//! * [`model`]: MLP classifiers, softmax cross-entropy and output-space
//!   curvature diagnostics.
//! * [`estimators`]: Rademacher and sparse `Q(p)` probes, the full-parameter
//!   and layer-dropout Hutchinson estimators, and an exact-trace oracle.
//! * [`dynamics`]: gradient-flow integration and linear stability at equilibria.
//! * [`harness`]: datasets, SGD training with an optional trace penalty, and
//!   seed-replicated comparisons.

pub mod autodiff;
pub mod dynamics;
pub mod estimators;
pub mod error;
pub mod harness;
pub mod model;
pub mod params;
pub mod problems;

pub use autodiff::{ExprGraph, HvpSession, NodeId, Objective};
pub use error::{Error, Result};
pub use model::{Activation, Batch, ModelSpec};
pub use params::{FlatVector, LayerEntry, LayerRegistry, ParamStore};
