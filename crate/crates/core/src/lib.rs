pub mod dataset;
pub mod detector;
pub mod engine;
pub mod eval;
pub mod geometry;
pub mod oracle;
pub mod sampling;
pub mod seed;
