//! CAN bus intrusion detection with a lightweight encoder-only transformer.

pub mod config;
pub mod data;
pub mod federated;
pub mod model;
pub mod tensor;
pub mod training;
