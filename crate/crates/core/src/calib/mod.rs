//! Mapping external sensing into robot frames and binarizing analog signals.

pub mod grasper;
pub mod mlp;
pub mod pedal;
pub mod rigid;
