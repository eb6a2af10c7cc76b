//! Multi-knowledge feature fusion for generalized zero-shot learning.
//!
//! Three conditional generators map class semantics to visual features at the
//! family, genus and species level of a taxonomy. An adaptive fusion module
//! weights their outputs, a Wasserstein critic with a class head judges the
//! fused features, and a genetic new-feature generator grows pools of enhanced
//! and novel semantics during training. Everything runs on the small
//! reverse-mode tape in [`tensor`].

pub mod audit;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nfg;
pub mod optim;
pub mod tensor;
pub mod train;

pub use data::{DatasetBundle, Level, SampleAccess};
pub use error::{DataError, EvalError, ModelError, NfgError, TensorError, TrainError};
pub use tensor::{Graph, Tensor, Var};
