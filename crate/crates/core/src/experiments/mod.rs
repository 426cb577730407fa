//! Synthetic-task training, ablation grids, routing studies and scaling
//! benchmarks.

pub mod bench;
pub mod config;
pub mod diagnose;
pub mod grid;
pub mod model;
pub mod optim;
pub mod report;
pub mod router;
pub mod tasks;
pub mod train;
