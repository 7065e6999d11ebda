pub mod cli;
pub mod config;
pub mod constitutive;
pub mod diagnostics;
pub mod dynamics;
pub mod entropy;
pub mod gasdyn;
pub mod linalg;
pub mod minors;
pub mod sampling;
