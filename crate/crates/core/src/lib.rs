#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod am;
pub mod autograd;
pub mod corpus;
pub mod desk;
pub mod frontend;
pub mod joint;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod s2i;
pub mod t2i;
pub mod tensor;
pub mod train;
pub mod tts;
