//! Vertical federated fine-tuning with replicated three-party MPC and
//! differentially private banded matrix-factorization noise.

pub mod abb;
pub mod numerics;
pub mod rep3;
pub mod transport;
pub mod bandmf;
pub mod dpcore;
pub mod models;
pub mod estimation;
pub mod data;
pub mod protocols;
pub mod config;
pub mod cli;
