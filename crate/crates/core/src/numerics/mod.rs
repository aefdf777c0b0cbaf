//! Dense linear algebra and seeded randomness shared by the whole crate.

mod matrix;
mod real;
mod rng;

pub use matrix::{softmax_in_place, Matrix};
pub use real::Real;
pub use rng::Rng;
