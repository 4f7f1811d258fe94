//! Joint video paragraph retrieval and weakly supervised sentence grounding
//! over 2D temporal moment maps.
//!
//! The crate is organised bottom-up: [`autograd`] and [`nn`] provide a small
//! reverse-mode tape and layers; [`moment_map`] holds the candidate-moment
//! geometry; [`encoders`], [`retrieval`], [`grounding_local`],
//! [`grounding_global`] and [`grounding_temporal`] implement the model
//! branches; [`model`] wires them into one forward pass; [`trainer`],
//! [`eval`] and [`data`] cover optimisation, evaluation and file formats.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod grounding_global;
pub mod grounding_local;
pub mod grounding_temporal;
pub mod model;
pub mod moment_map;
pub mod nn;
pub mod params;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
