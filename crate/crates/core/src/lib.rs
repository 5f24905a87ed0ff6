//! Grouped, utility-guided multi-agent communication learning.

pub mod autodiff;
pub mod comm;
pub mod config;
pub mod critics;
pub mod env;
pub mod eval;
pub mod grouping;
pub mod model;
pub mod nn;
pub mod trainer;
