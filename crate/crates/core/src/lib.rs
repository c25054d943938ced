//! Tree-splitting reservation for slotted random multiple access.
//!
//! Active terminals contend for the channel in reservation slots at the start
//! of each frame. Terminals sharing a decision history form a cluster and use
//! one transmission probability. Since all terminals see the same error-free
//! feedback, they share a belief over how terminals are spread across
//! clusters, and pick probabilities by planning over that belief.
//!
//! - [`model`]: occupancy states, transition/observation kernels, state counts.
//! - [`belief`]: belief states, Bayes update, quantized keys.
//! - [`genie`]: value iteration on the fully observed reduced model.
//! - [`rtdp`]: the trial-based belief planner with genie pre-training.
//! - [`sim`]: traffic, frames and closed-loop protocol simulation.
//! - [`bench`]: slotted ALOHA, stack algorithm and RTS/CTS CSMA/CA baselines.

pub mod belief;
pub mod bench;
pub mod genie;
pub mod model;
pub mod rtdp;
pub mod sim;
