//! Cost-guided approximation of nonlinear MPC policies.

pub mod closed_loop;
pub mod config;
pub mod dataset;
pub mod dual;
pub mod dynamics;
pub mod error;
pub mod nlp;
pub mod ocp;
pub mod pipeline;
pub mod plot;
pub mod policy;
pub mod qp;
pub mod sensitivity;
pub mod solver;
pub mod training;

pub use error::{Error, Result};
