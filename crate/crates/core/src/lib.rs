//! Differentiable spiking-network engine where neuromodulated synaptic
//! plasticity is the inner-loop learner and gradient descent through the
//! unrolled simulation trains the plasticity and modulation parameters.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod networks;
pub mod neuromod;
pub mod neuron;
pub mod plasticity;
pub mod tasks;

pub use error::{Error, Result};
