//! End-to-end applications: an adaptive reactor controller and a gradient
//! learner, each run plainly and through the encoded protocol.
pub mod control;
pub mod ml;
