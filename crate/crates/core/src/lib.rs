//! Zero-shot object counting with quantity-aware prompts on a small
//! synthetic domain.
//!
//! The model pairs a prompted text encoder with a prompted vision encoder,
//! scores a patch-text similarity map, aggregates it with a windowed
//! attention decoder and regresses a nonnegative density map whose sum is
//! the count. During training each scene is also encoded under a set of
//! counterfactual quantities so the alignment and decoder counts can be
//! ranked; at inference the quantity modules are skipped entirely.

pub mod backbone;
pub mod data;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod loss;
pub mod model;
pub mod params;
pub mod prompting;
pub mod quantity;

pub use error::{QicaError, Result};
pub use model::{ModelConfig, QicaModel, Target, TrainingObjective};
