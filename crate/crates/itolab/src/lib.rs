//! itolab: a desk-scale lab for implicit transfer operator learning.
//!
//! Reference dynamics come from overdamped Langevin simulation of toy
//! potentials. A conditional flow-matching surrogate learns the transition
//! density over multiple lag times and temperatures, and the analysis stack
//! (TICA, free-energy surfaces, Markov state models, Arrhenius fits)
//! compares surrogate ensembles against the reference.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod conditioning;
pub mod data;
pub mod error;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod systems;
pub mod training;

pub use cli::run;
pub use error::{ItoError, Result};
