mod basic;
mod nn;
mod spatial;

pub use nn::{causal_mask, MASKED};
pub use spatial::ResamplePlan;
