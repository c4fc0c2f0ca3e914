pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod map;
pub mod metric;
pub mod mocm;
pub mod segnet;
pub mod teacher;
pub mod trainer;
