pub mod fixtures;
pub mod gridworld;
pub mod invariant;
pub mod markov;
pub mod polytope;
pub mod solver;
pub mod synthesis;
