//! 2D-to-3D human pose lifting with inference-stage self-supervised
//! adaptation, on top of a small tape-based autodiff engine.
//!
//! The crate is organized around the experimental workflow: generate
//! synthetic skeleton datasets ([`synthdata`]), train a lifter with joint
//! supervised + self-supervised objectives ([`train`]), adapt it per
//! instance at inference time ([`iso`]) and evaluate under the standard
//! pose metrics and protocols ([`eval`]).

pub mod autodiff;
pub mod real;

pub mod geometry;

pub mod nn;

pub mod checkpoint;

pub mod optimizer;

pub mod losses;

pub mod synthdata;

pub mod eval;

pub mod train;

pub mod iso;

pub mod config;

pub mod cli;
