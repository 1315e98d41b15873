pub mod error;
pub mod rng;
pub mod signals;
pub mod systems;
pub mod checkpoint;
pub mod behavior;
pub mod codec;
pub mod controlsim;
pub mod corpus;
pub mod harness;
