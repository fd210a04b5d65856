//! Template fusion by differentiable quality-aware coreset selection.
//!
//! A template is an unordered set of face embeddings. The pipeline picks a
//! small core template with a Gumbel-Softmax relaxation of farthest-point
//! sampling, enriches it with self- and cross-attention against the full
//! template, and sums it into one unit-length descriptor.

pub mod attend;
pub mod config;
pub mod coreset;
pub mod error;
pub mod evalbench;
pub mod io;
pub mod loss;
pub mod metric;
pub mod model;
pub mod numgrad;
pub mod simdata;
pub mod template;
pub mod train;

pub use error::{Error, Result};
pub use metric::{Feature, Gamma};
pub use model::{AblationFlags, FusedTemplate, GammaPolicy, Model, ModelConfig};
pub use template::{Dataset, Item, MediaKind, Template};
