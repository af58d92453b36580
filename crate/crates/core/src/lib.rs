//! Image-text retrieval in a joint embedding space.
//!
//! Region features are enhanced with a global image representation, both
//! modalities are aggregated with a learned order-statistic pooling, and the
//! encoders are trained with a hubness-aware contrastive loss over the
//! mini-batch plus momentum-encoder queues.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod feature_store;
pub mod model;
pub mod momentum_contrast;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pooling;
pub mod real;
pub mod text_encoder;
pub mod trainer;
pub mod visual_encoder;

pub use error::{Error, Result};
pub use real::Real;
