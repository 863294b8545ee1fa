pub mod engine;
pub mod explain;
pub mod model;
pub mod molgraph;
pub mod nn;
pub mod planner;
pub mod reaction;
pub mod trainer;
