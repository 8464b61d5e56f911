pub mod binio;
pub mod diffcore;
pub mod geometry;
pub mod nets;
pub mod distill;
pub mod synthworld;
pub mod metrics;
pub mod trainer;
pub mod experiment;
pub mod selftest;
