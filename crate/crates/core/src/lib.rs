pub mod attention;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod repair;
pub mod retrieval;
pub mod tensor;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
