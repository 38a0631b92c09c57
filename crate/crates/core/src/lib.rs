pub mod bench;
pub mod ct_physics;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod networks;
pub mod noise_model;
pub mod pipeline;
pub mod rng;
pub mod tomo_sim;
pub mod training;

pub use error::{Error, Result};
pub use sinodenoise_nn::par;
