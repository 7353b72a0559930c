//! Distribution-aware flow matching for few-shot reinforcement learning on a
//! simulated DVFS processor.
//!
//! The crate is organised bottom-up:
//!
//! * [`sim`]: RC-thermal processor simulator and the fps/temperature/power reward.
//! * [`nn`]: dense MLPs with manual backprop, Adam, and finite-difference checks.
//! * [`agent`]: replay memories and the DQN agent.
//! * [`forest`]: random-forest regression and normalized impurity importances.
//! * [`flow`]: bootstrapped, feature-weighted conditional flow matching.
//! * [`orchestrator`]: the Dyna-style loop and the three baselines.
//! * [`eval`]: correlation fidelity, Wasserstein distance, regret, stability.
//! * [`config`] and [`io`]: experiment configuration and file formats.

pub mod agent;
pub mod config;
pub mod error;
pub mod eval;
pub mod flow;
pub mod forest;
pub mod io;
pub mod nn;
pub mod orchestrator;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
