pub mod config;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod geometry;
pub mod heads;
pub mod model;
pub mod numerics;
pub mod training;
