pub mod cli;
pub mod compress;
pub mod cost;
pub mod data;
pub mod error;
pub mod model;
pub mod ops;
pub mod report;
pub mod rng;
pub mod supermask;
pub mod tensor;
pub mod train;
