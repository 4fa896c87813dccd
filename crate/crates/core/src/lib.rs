pub mod cli;
pub mod data;
pub mod model;
pub mod numerics;
pub mod patching;
pub mod rng;
pub mod training;
pub mod verify;
