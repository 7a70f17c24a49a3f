//! Numerical lab for the weakly damped nonlinear Schrödinger equation driven
//! by small additive or multiplicative noise on a periodic box.
//!
//! The crate is generic over the floating point type; `f64` aliases are
//! provided for the common case.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod action;
pub mod dynamics;
pub mod error;
pub mod exit;
pub mod functionals;
pub mod grid;
pub mod init;
pub mod noise;
pub mod rng;
pub mod scalar;
pub mod snapshot;
pub mod verify;

pub use error::{Error, Result};
pub use grid::{Field, Grid, GridSpec};
pub use noise::{NoiseOperator, NoiseProfile};
pub use scalar::Real;

pub type Field64 = grid::Field<f64>;
pub type Field32 = grid::Field<f32>;
pub type Grid64 = grid::Grid<f64>;
pub type Grid32 = grid::Grid<f32>;
pub type NoiseOperator64 = noise::NoiseOperator<f64>;
pub type SdeParams64 = dynamics::SdeParams<f64>;
pub type Trajectory64 = dynamics::Trajectory<f64>;
