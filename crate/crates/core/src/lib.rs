//! Gradient-episodic-memory family of continual-learning updates.
//!
//! The crate provides the four constrained update rules ([`gradient_rules`]),
//! the episodic memory they draw reference gradients from
//! ([`episodic_memory`]), a small multi-head perceptron with flat parameter
//! and gradient vectors ([`mlp_model`]), sequential task generators
//! ([`task_streams`]), the usual continual-learning metrics ([`metrics`]),
//! an interval-refinement search for the soft margin ([`epsilon_search`]),
//! and the experiment harness behind the `softgem` binary ([`harness`]).

pub mod episodic_memory;
pub mod epsilon_search;
pub mod gradient_rules;
pub mod harness;
pub mod metrics;
pub mod mlp_model;
pub mod task_streams;

pub use gradient_rules::{FlatGradient, SoftConstraint, Update};
pub use harness::{ExperimentConfig, Method, RunRecord};
