mod crosscheck;
mod euler;
mod model;

pub use crosscheck::*;
pub use euler::*;
pub use model::*;
