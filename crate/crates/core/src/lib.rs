pub mod checkpoint;
pub mod corpus;
pub mod gan;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod recognizer;
pub mod trainer;
