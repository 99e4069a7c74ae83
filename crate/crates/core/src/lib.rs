pub mod ablation;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod gradsuite;
pub mod maps;
pub mod ops;
pub mod parallel;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;
