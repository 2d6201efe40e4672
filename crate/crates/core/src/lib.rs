//! Edge-side dispatcher that decides when to request a fresh action chunk
//! from a remote policy, plus the simulator used to evaluate it.

pub mod chunk;
pub mod cloud;
pub mod config;
pub mod error;
pub mod kinematics;
pub mod protocol;
pub mod realtime;
pub mod report;
pub mod rng;
pub mod scenario;
pub mod sim;
pub mod stats;
pub mod trajectory;
pub mod trigger;

pub use error::{RapidError, Result};
