//! Point-cloud × multi-view shape recognition with locality-aware
//! thresholded cross-attention fusion.

pub mod autodiff;
pub mod synthdata;
pub mod encoders;
pub mod laf;
pub mod latformer;
pub mod eval;
pub mod cli;
