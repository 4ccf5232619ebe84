pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod generator;
pub mod ipwd;
pub mod metrics;
pub mod models;
pub mod numcore;
pub mod protocol;
