//! Forward/backward kernels behind the tape operations.

pub mod activation;
pub mod basic;
pub mod conv;
pub mod loss;
pub mod norm;
pub mod scale;
