//! Imagination-based planning.
//!
//! An agent that, before each real action, may run a variable number of
//! imagination steps against a model of the world, folding every imagined
//! and real outcome into a recurrent plan context. A manager decides when
//! to act and where to imagine from; a controller proposes actions; the
//! imagination evaluates them; a memory aggregates the results.
//!
//! The crate contains two instantiations:
//!
//! * [`planner`] / [`trainer`]: the continuous agent on the
//!   [`spaceship`] task, with a learned relational dynamics model and all
//!   networks trained through the in-crate autodiff ([`diffcore`]).
//! * [`maze_planner`]: the discrete agent on [`maze`] tasks, with a tabular
//!   controller, an additive history tensor, and a perfect model.

pub mod diffcore;
pub mod maze;
pub mod maze_planner;
pub mod nn;
pub mod planner;
pub mod rng;
pub mod spaceship;
pub mod trainer;
pub mod tree;

pub use diffcore::{DiffError, NodeId, Tape, Tensor};
