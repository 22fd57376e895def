//! Multi-modal sequential recommendation with ID-aware joint item encoding,
//! per-branch sequence towers and online distillation between branches.

pub mod branches;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod eval;
pub mod experiment;
pub mod item_tower;
pub mod losses;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod seq_tower;
pub mod trainer;
