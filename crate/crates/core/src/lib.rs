//! Neural processes for image in-painting.

pub mod dataio;
pub mod diagnostics;
pub mod distributions;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod training;
