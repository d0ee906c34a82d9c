pub mod conditioning;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod inference;
pub mod noise;
pub mod ops;
pub mod quad;
pub mod special;
pub mod tensor;
pub mod vae;
