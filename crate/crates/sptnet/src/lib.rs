//! Desk-scale spatial prompt tuning for generalized category discovery:
//! pixel-border prompts composed with a tiny Vision Transformer, trained by
//! an alternating two-stage schedule over data parameters (prompts) and model
//! parameters, and evaluated with the clustering-accuracy protocol.

pub mod autodiff;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod prompts;
pub mod schedule;
pub mod cli;
