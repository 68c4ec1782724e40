//! Cross-user activity recognition with adversarial conditional-VAE domain
//! adaptation and temporal relation attention.

pub mod attention;
pub mod baseline;
pub mod checkpoint;
pub mod components;
pub mod cvae;
pub mod data;
pub mod error;
pub mod features;
pub mod methods;
pub mod metrics;
pub mod report;
pub mod states;
pub mod train;

pub use error::{CoreError, Result};
