//! On-disk formats and corpus construction.

pub mod annotations;
pub mod config;
pub mod corpus;
pub mod features;
pub mod synthetic;
