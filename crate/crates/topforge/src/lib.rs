//! Team Orienteering Problem toolkit.
//!
//! A fleet of agents starts at a shared depot, visits pairwise-disjoint
//! subsets of prize-bearing regions, and must reach the end depot within a
//! per-agent time budget; the objective is the total collected prize. This
//! crate bundles everything needed to study the problem end to end:
//!
//! - [`top`]: instances, solutions, feasibility checking, rewards
//! - [`gen`]: seeded instance generation and JSON-lines datasets
//! - [`tensor`]: a small reverse-mode autodiff engine on dense `f64` tensors
//! - [`policy`]: an attention encoder-decoder that maps instance states to
//!   per-agent action distributions
//! - [`sim`]: the fleet rollout loop gluing policy outputs to instance state
//! - [`baselines`]: non-learned reference solvers
//! - [`train`]: REINFORCE with a greedy-rollout baseline, plus checkpoints
//!
//! The `topforge` binary exposes dataset generation, training, evaluation,
//! and benchmarking as subcommands.

pub mod baselines;
pub mod gen;
pub mod policy;
pub mod sim;
pub mod tensor;
pub mod top;
pub mod train;
