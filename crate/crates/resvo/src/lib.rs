//! Multi-agent reinforcement learning lab built around reward-sharing
//! orientation functions.
//!
//! Agents in an intertemporal social dilemma learn *orientation functions*
//! that decide how much of their extrinsic reward to share with every other
//! agent. The matrix of sharing ratios doubles as a role space: a low-rank
//! penalty pushes agents into a small number of roles, a variational
//! mutual-information term ties roles to long-term behavior, and policies
//! are conditioned on each agent's recent role embeddings.
//!
//! The crate ships three environments (iterated prisoner's dilemma, N-player
//! escape room, cleanup gridworld), a tape-based automatic differentiation
//! engine with second-order support for the bi-level sharing update, the
//! training loop that interleaves policy and orientation optimization, and a
//! closed-form dynamics analyzer for the two-player dilemma.

pub mod analyzer;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod core;
pub mod envs;
pub mod metrics;
pub mod mi;
pub mod params;
pub mod policy;
pub mod svo;
pub mod trainer;
