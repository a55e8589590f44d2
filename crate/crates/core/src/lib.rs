pub mod artifact_store;
pub mod distributions;
pub mod error;
pub mod gmvae;
pub mod hosts;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod splice;
pub mod textdata;

pub use error::{CoreError, Result};
