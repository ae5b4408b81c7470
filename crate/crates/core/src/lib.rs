pub mod arm;
pub mod data;
pub mod encoders;
pub mod esam;
pub mod numerics;
pub mod retrieval;
pub mod model;
pub mod config;
pub mod checkpoint;
pub mod train;
pub mod cli;
