//! Multi-task reinforcement learning with genotype-routed modular networks.
//!
//! Each task owns a population of binary genotypes. A genotype decodes into a
//! lower-triangular [`genotype::WeightPlan`] that wires the shared modules of a
//! [`modular_net::ModularActorNet`]. Genotypes are optimized by a genetic
//! algorithm ([`ga`]), network parameters by SAC ([`sac`]), and the number of
//! modules grows per task when a task stalls ([`evolution`]).

pub mod envs;
pub mod error;
pub mod evolution;
pub mod ga;
pub mod genotype;
pub mod harness;
pub mod modular_net;
pub mod nn;
pub mod sac;

pub use error::{MegaError, Result};
